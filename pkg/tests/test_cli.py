from __future__ import annotations

import csv
import json

import pytest

from synthdata import build_dataset, small_dataset, write_fixture_tree

from medabstract.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_OK,
    build_parser,
    main,
)

# Flags promised by the documented command surface; --help must list them.
DOCUMENTED_FLAGS = {
    "ingest": ["--corpus", "--gold", "--out", "--tasks", "--top-k", "--group-by"],
    "run": [
        "--model", "--temp", "--shots", "--tasks", "--corpus", "--out",
        "--cache-dir", "--concurrency", "--providers", "--shot-pool",
        "--reprompt-invalid",
    ],
    "evaluate": ["--gold", "--preds", "--out"],
    "review-serve": ["--run", "--port", "--runs-root", "--shot-pool", "--baseline"],
    "export": ["--runs-root", "--run", "--out"],
}


class TestHelpDocDrift:
    def test_every_documented_flag_in_help(self, capsys):
        parser = build_parser()
        for command, flags in DOCUMENTED_FLAGS.items():
            with pytest.raises(SystemExit):
                parser.parse_args([command, "--help"])
            help_text = capsys.readouterr().out
            for flag in flags:
                assert flag in help_text, f"{command} --help is missing {flag}"

    def test_top_level_config_flag(self, capsys):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["--help"])
        assert "--config" in capsys.readouterr().out

    def test_unknown_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as excinfo:
            build_parser().parse_args(["frobnicate"])
        assert excinfo.value.code == 2


@pytest.fixture()
def tree(tmp_path):
    ds = small_dataset(12)
    paths = write_fixture_tree(ds, tmp_path / "fixtures")
    return {"ds": ds, "paths": paths, "tmp": tmp_path}


class TestIngestCommand:
    def test_bundle_written(self, tree):
        out = tree["tmp"] / "bundle"
        code = main([
            "ingest",
            "--corpus", str(tree["paths"]["corpus"]),
            "--gold", str(tree["paths"]["gold"]),
            "--out", str(out),
        ])
        assert code == EXIT_OK
        assert (out / "corpus.csv").exists()
        assert (out / "gold.csv").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["summaries"][-1]["source"] == "all"

    def test_top_k_selection(self, tree):
        out = tree["tmp"] / "bundle"
        code = main([
            "ingest",
            "--corpus", str(tree["paths"]["corpus"]),
            "--gold", str(tree["paths"]["gold"]),
            "--out", str(out),
            "--top-k", "5",
        ])
        # gold now references dropped entries -> data error, bundle still written
        assert code == EXIT_DATA
        with open(out / "corpus.csv", newline="") as fh:
            assert len(list(csv.reader(fh))) == 1 + 5

    def test_missing_inputs_config_error(self, tree):
        assert main(["ingest", "--out", str(tree["tmp"] / "x")]) == EXIT_CONFIG


class TestRunAndEvaluate:
    def test_oracle_run_to_perfect_report(self, tree):
        out = tree["tmp"] / "grid"
        code = main([
            "run",
            "--model", "mock-oracle",
            "--temp", "0",
            "--shots", "10",
            "--corpus", str(tree["paths"]["corpus"]),
            "--providers", str(tree["paths"]["providers"]),
            "--shot-pool", str(tree["paths"]["pool"]),
            "--out", str(out),
            "--cache-dir", str(tree["tmp"] / "cache"),
        ])
        assert code == EXIT_OK
        report = tree["tmp"] / "report"
        code = main([
            "evaluate",
            "--gold", str(tree["paths"]["gold"]),
            "--preds", str(out),
            "--out", str(report),
        ])
        assert code == EXIT_OK
        rows = list(csv.reader(open(report / "results_long.csv", newline="")))
        accuracy_rows = [r for r in rows[1:] if r[5] == "accuracy"]
        assert accuracy_rows and all(float(r[6]) == 1.0 for r in accuracy_rows)

    def test_task_selection_by_name(self, tree):
        out = tree["tmp"] / "grid"
        code = main([
            "run",
            "--model", "mock-oracle",
            "--temp", "0",
            "--shots", "0",
            "--tasks", "iv_fluid,generic_route",
            "--corpus", str(tree["paths"]["corpus"]),
            "--providers", str(tree["paths"]["providers"]),
            "--out", str(out),
        ])
        assert code == EXIT_OK
        manifest = json.loads((out / "grid_manifest.json").read_text())
        assert {c["task"] for c in manifest["cells"]} == {"iv_fluid", "generic_route"}

    def test_evaluate_missing_gold_is_config_error(self, tree):
        code = main([
            "evaluate",
            "--gold", str(tree["tmp"] / "nope.csv"),
            "--preds", str(tree["tmp"]),
            "--out", str(tree["tmp"] / "r"),
        ])
        assert code == EXIT_CONFIG

    def test_unknown_model_is_config_error(self, tree):
        code = main([
            "run",
            "--model", "ghost",
            "--temp", "0",
            "--shots", "0",
            "--corpus", str(tree["paths"]["corpus"]),
            "--providers", str(tree["paths"]["providers"]),
            "--out", str(tree["tmp"] / "g"),
        ])
        assert code == EXIT_CONFIG

    def test_replay_reproduces_bytes(self, tree):
        out = tree["tmp"] / "grid"
        cache = tree["tmp"] / "cache"
        main([
            "run",
            "--model", "mock-oracle",
            "--temp", "0", "--shots", "2",
            "--tasks", "iv_fluid",
            "--corpus", str(tree["paths"]["corpus"]),
            "--providers", str(tree["paths"]["providers"]),
            "--shot-pool", str(tree["paths"]["pool"]),
            "--out", str(out),
            "--cache-dir", str(cache),
        ])
        cell_dir = next((out / "cells").iterdir())
        replay_dir = tree["tmp"] / "replay"
        code = main([
            "run",
            "--replay", str(cell_dir),
            "--providers", str(tree["paths"]["providers"]),
            "--shot-pool", str(tree["paths"]["pool"]),
            "--out", str(replay_dir),
            "--cache-dir", str(cache),
        ])
        assert code == EXIT_OK
        assert (replay_dir / "predictions.jsonl").read_bytes() == (
            cell_dir / "predictions.jsonl"
        ).read_bytes()


class TestExport:
    def run_grid(self, tree):
        out = tree["tmp"] / "grid"
        main([
            "run",
            "--model", "mock-oracle",
            "--temp", "0", "--shots", "0",
            "--tasks", "iv_fluid",
            "--corpus", str(tree["paths"]["corpus"]),
            "--providers", str(tree["paths"]["providers"]),
            "--out", str(out),
        ])
        return out

    def test_export_twice_identical(self, tree):
        grid = self.run_grid(tree)

        def export(dest):
            code = main(["export", "--runs-root", str(grid), "--out", str(dest)])
            assert code == EXIT_OK
            return {
                p.relative_to(dest).as_posix(): p.read_bytes()
                for p in sorted(dest.rglob("*")) if p.is_file()
            }

        first = export(tree["tmp"] / "a1")
        second = export(tree["tmp"] / "a2")
        assert first == second

    def test_export_empty_root_is_data_error(self, tree):
        empty = tree["tmp"] / "empty"
        empty.mkdir()
        assert main(["export", "--runs-root", str(empty), "--out", str(tree["tmp"] / "o")]) == EXIT_DATA


class TestProjectConfig:
    def test_config_paths_resolved_and_used(self, tree, tmp_path):
        config_path = tree["tmp"] / "project.json"
        config_path.write_text(json.dumps({
            "corpus": str(tree["paths"]["corpus"]),
            "gold": str(tree["paths"]["gold"]),
            "shot_pool": str(tree["paths"]["pool"]),
            "providers": str(tree["paths"]["providers"]),
            "out_root": str(tree["tmp"] / "grid"),
            "grid": {
                "models": ["mock-oracle"],
                "temperatures": [0.0],
                "shot_counts": [0],
            },
        }))
        code = main(["--config", str(config_path), "run", "--tasks", "iv_fluid"])
        assert code == EXIT_OK

    def test_dangling_path_is_config_error(self, tree):
        config_path = tree["tmp"] / "project.json"
        config_path.write_text(json.dumps({"corpus": "missing.csv"}))
        assert main(["--config", str(config_path), "run"]) == EXIT_CONFIG
