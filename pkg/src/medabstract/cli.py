"""Single entry point: ingest -> run -> evaluate -> review-serve -> export.

Exit codes: 0 success, 2 usage, 3 config error, 4 data error, 5 provider
error, 6 partial grid or aborted run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import domain, engine, evalkit, ingest, promptkit, providers
from .errors import ConfigError, DataError, MedabstractError, ProviderError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_PROVIDER = 5
EXIT_PARTIAL = 6


@dataclass
class ProjectConfig:
    corpus: Optional[Path] = None
    gold: Optional[Path] = None
    shot_pool: Optional[Path] = None
    providers: Optional[Path] = None
    tasks: Optional[Path] = None
    out_root: Optional[Path] = None
    cache_dir: Optional[Path] = None
    grid_models: Optional[list[str]] = None
    grid_temperatures: Optional[list[float]] = None
    grid_shot_counts: Optional[list[int]] = None
    grid_tasks: Optional[list[str]] = None


def load_project_config(path: Path) -> ProjectConfig:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read project config {path}: {exc}") from exc
    base = path.parent

    def _p(key: str) -> Optional[Path]:
        value = raw.get(key)
        if value is None:
            return None
        resolved = (base / value).resolve()
        if not resolved.exists():
            raise ConfigError(f"project config {path}: {key} path {resolved} does not exist")
        return resolved

    grid = raw.get("grid") or {}
    if grid and not (grid.get("models") and grid.get("temperatures") is not None):
        raise ConfigError(f"project config {path}: grid spec must name models and temperatures")
    return ProjectConfig(
        corpus=_p("corpus"),
        gold=_p("gold"),
        shot_pool=_p("shot_pool"),
        providers=_p("providers"),
        tasks=_p("tasks"),
        out_root=(base / raw["out_root"]).resolve() if raw.get("out_root") else None,
        cache_dir=(base / raw["cache_dir"]).resolve() if raw.get("cache_dir") else None,
        grid_models=grid.get("models"),
        grid_temperatures=grid.get("temperatures"),
        grid_shot_counts=grid.get("shot_counts"),
        grid_tasks=grid.get("tasks"),
    )


def resolve_tasks(tasks_arg: Optional[str]) -> tuple[list[domain.TaskSpec], list[domain.TaskSpec]]:
    """``--tasks`` takes either a registry file path (override the whole
    registry, run all its tasks) or a comma-separated list of task names
    from the default registry. Returns (registry, selected)."""
    registry = domain.task_registry()
    if tasks_arg is None:
        return registry, registry
    path = Path(tasks_arg)
    if path.exists():
        registry = domain.load_task_registry(path)
        return registry, registry
    by_name = domain.registry_by_name(registry)
    selected = []
    for name in (n.strip() for n in tasks_arg.split(",")):
        if not name:
            continue
        if name not in by_name:
            raise ConfigError(
                f"unknown task {name!r} (known: {sorted(by_name)}); "
                f"if {tasks_arg!r} was meant as a registry file, it does not exist"
            )
        selected.append(by_name[name])
    if not selected:
        raise ConfigError("--tasks selected no tasks")
    return registry, selected


def cmd_ingest(args: argparse.Namespace, config: ProjectConfig) -> int:
    corpus_path = Path(args.corpus) if args.corpus else config.corpus
    gold_path = Path(args.gold) if args.gold else config.gold
    if corpus_path is None or gold_path is None:
        raise ConfigError("ingest needs --corpus and --gold (or a project config)")
    registry, _ = resolve_tasks(args.tasks)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    corpus, corpus_errors = ingest.parse_corpus(corpus_path)
    if args.top_k is not None:
        if args.group_by == "source":
            selected = []
            for source in sorted({e.source for e in corpus}):
                selected.extend(
                    ingest.select_top_k([e for e in corpus if e.source == source], args.top_k)
                )
            corpus = selected
        else:
            corpus = ingest.select_top_k(corpus, args.top_k)
    gold, gold_errors = ingest.load_gold(gold_path, registry)
    report = domain.validate_gold_set(gold, corpus, registry)

    ingest.write_corpus(corpus, out_dir / "corpus.csv")
    ingest.write_gold(gold, out_dir / "gold.csv")
    summaries = [s.to_dict() for s in ingest.summarize_by_source(corpus, gold)]
    summaries.append(ingest.summarize(corpus, gold).to_dict())
    (out_dir / "summary.json").write_text(
        json.dumps({"summaries": summaries}, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    findings = {
        "corpus_row_errors": [e.to_dict() for e in corpus_errors],
        "gold_row_errors": [e.to_dict() for e in gold_errors],
        "gold_validation": report.to_dict(),
    }
    (out_dir / "errors.json").write_text(
        json.dumps(findings, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    print(f"ingested {len(corpus)} entries, {len(gold)} gold labels -> {out_dir}")
    if corpus_errors or gold_errors:
        print(f"rejected rows: corpus={len(corpus_errors)} gold={len(gold_errors)}", file=sys.stderr)
    if not report.ok:
        print(f"gold validation failed: {report.to_dict()}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _load_run_inputs(
    args: argparse.Namespace, config: ProjectConfig
) -> tuple[list, providers.ProviderRegistry, dict]:
    corpus_path = Path(args.corpus) if args.corpus else config.corpus
    if corpus_path is None:
        raise ConfigError("run needs --corpus (or a project config)")
    corpus, errors = ingest.parse_corpus(corpus_path)
    if errors:
        print(f"warning: skipped {len(errors)} malformed corpus rows", file=sys.stderr)
    if not corpus:
        raise DataError(f"corpus {corpus_path} has no usable entries")
    registry_path = Path(args.providers) if args.providers else config.providers
    if registry_path is None:
        raise ConfigError("run needs --providers (or a project config)")
    registry = providers.ProviderRegistry.from_file(registry_path)
    pool_path = Path(args.shot_pool) if args.shot_pool else config.shot_pool
    pools = promptkit.load_shot_pool(pool_path) if pool_path else {}
    return corpus, registry, pools


def cmd_run(args: argparse.Namespace, config: ProjectConfig) -> int:
    if args.replay:
        return _run_replay(args, config)
    corpus, registry, pools = _load_run_inputs(args, config)
    _, tasks = resolve_tasks(args.tasks)
    models = args.model or config.grid_models
    temperatures = args.temp if args.temp is not None else config.grid_temperatures
    shot_counts = args.shots if args.shots is not None else config.grid_shot_counts
    if not models or temperatures is None or shot_counts is None:
        raise ConfigError("run needs --model, --temp and --shots (or a project config grid)")
    out_root = Path(args.out) if args.out else config.out_root
    if out_root is None:
        raise ConfigError("run needs --out (or a project config out_root)")
    cache_dir = Path(args.cache_dir) if args.cache_dir else (config.cache_dir or out_root / "cache")
    cache = engine.ResponseCache(cache_dir) if not args.no_cache else None

    grid = engine.run_grid(
        corpus,
        tasks,
        models=models,
        temperatures=temperatures,
        shot_counts=shot_counts,
        shot_pools=pools,
        registry=registry,
        out_root=out_root,
        cache=cache,
        max_retries=args.max_retries,
        concurrency_cap=args.concurrency,
        cache_enabled=not args.no_cache,
        abort_fraction=args.abort_fraction,
        reprompt_invalid=args.reprompt_invalid,
    )
    complete = sum(1 for c in grid.cells if c.status == engine.STATUS_COMPLETE)
    print(f"grid: {complete}/{len(grid.cells)} cells complete -> {out_root}")
    return EXIT_OK if grid.status == engine.STATUS_COMPLETE else EXIT_PARTIAL


def _run_replay(args: argparse.Namespace, config: ProjectConfig) -> int:
    """Re-execute one run from its manifest against the corpus snapshot in
    the run directory; with a warm cache this is bit-identical."""
    run_dir = Path(args.replay)
    manifest_path = run_dir / engine.MANIFEST_FILE
    if not manifest_path.exists():
        raise ConfigError(f"--replay: no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    cfg = manifest["config"]
    corpus, _ = ingest.parse_corpus(run_dir / engine.CORPUS_FILE)
    registry_path = Path(args.providers) if args.providers else config.providers
    if registry_path is None:
        raise ConfigError("replay needs --providers (or a project config)")
    registry = providers.ProviderRegistry.from_file(registry_path)
    pool_path = Path(args.shot_pool) if args.shot_pool else config.shot_pool
    pools = promptkit.load_shot_pool(pool_path) if pool_path else {}
    _, tasks = resolve_tasks(args.tasks)
    by_name = {t.name: t for t in tasks}
    task_name = manifest["tasks"][0]
    if task_name not in by_name:
        raise ConfigError(f"replay: task {task_name!r} not in the active registry")
    out_dir = Path(args.out) if args.out else None
    if out_dir is None:
        raise ConfigError("replay needs --out")
    cache_dir = Path(args.cache_dir) if args.cache_dir else (config.cache_dir or None)
    if cache_dir is None:
        raise ConfigError("replay needs --cache-dir to reproduce responses")
    run_config = domain.RunConfig(
        model_id=cfg["model_id"],
        provider_kind=cfg["provider_kind"],
        temperature=cfg["temperature"],
        shot_count=cfg["shot_count"],
        max_retries=cfg["max_retries"],
        concurrency_cap=args.concurrency,
        cache_enabled=True,
    )
    provider = registry.build(
        cfg["model_id"],
        retry=providers.RetryPolicy(max_retries=cfg["max_retries"]),
    )
    engine.run_task(
        corpus,
        by_name[task_name],
        run_config,
        pools.get(task_name, []),
        provider,
        out_dir=out_dir,
        cache=engine.ResponseCache(cache_dir),
    )
    print(f"replayed run {manifest['run_id']} -> {out_dir}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, config: ProjectConfig) -> int:
    gold_path = Path(args.gold) if args.gold else config.gold
    if gold_path is None or not gold_path.exists():
        raise ConfigError(f"evaluate: gold path missing or not found: {gold_path}")
    preds_dir = Path(args.preds)
    if not preds_dir.exists():
        raise ConfigError(f"evaluate: predictions directory not found: {preds_dir}")
    registry, _ = resolve_tasks(args.tasks)
    gold, errors = ingest.load_gold(gold_path, registry)
    if errors:
        raise DataError(f"gold file has {len(errors)} malformed rows; run ingest first")
    binary_tasks = {t.name for t in registry if t.output_domain == domain.OUTPUT_BINARY}
    evals = evalkit.evaluate_grid(preds_dir, gold, binary_tasks)
    out_dir = Path(args.out)
    evalkit.grid_report(
        evals,
        out_dir,
        pivot_shot_count=args.pivot_shots,
        pivot_temperature=args.pivot_temp,
    )
    print(f"scored {len(evals)} cells -> {out_dir}")
    partial = any(e.status != engine.STATUS_COMPLETE for e in evals)
    return EXIT_PARTIAL if partial else EXIT_OK


def cmd_review_serve(args: argparse.Namespace, config: ProjectConfig) -> int:
    from .review_service import create_app

    runs_root = Path(args.runs_root) if args.runs_root else config.out_root
    if runs_root is None:
        raise ConfigError("review-serve needs --runs-root (or a project config out_root)")
    baseline = None
    if args.baseline:
        try:
            baseline = {k: int(v) for k, v in json.loads(Path(args.baseline).read_text()).items()}
        except (OSError, json.JSONDecodeError, ValueError) as exc:
            raise ConfigError(f"cannot read baseline file {args.baseline}: {exc}") from exc
    pool_path = Path(args.shot_pool) if args.shot_pool else config.shot_pool
    app = create_app(
        runs_root=runs_root,
        data_dir=Path(args.data_dir),
        shot_pool_path=pool_path,
        baseline=baseline,
        run_filter=args.run,
        ui_dir=Path(args.ui_dir) if args.ui_dir else None,
    )
    import uvicorn

    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def cmd_export(args: argparse.Namespace, config: ProjectConfig) -> int:
    runs_root = Path(args.runs_root) if args.runs_root else config.out_root
    if runs_root is None or not runs_root.exists():
        raise ConfigError(f"export: runs root missing or not found: {runs_root}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    copied: dict[str, str] = {}

    def _copy_tree(src: Path, rel_prefix: str) -> None:
        for path in sorted(src.rglob("*")):
            if not path.is_file():
                continue
            rel = f"{rel_prefix}/{path.relative_to(src)}"
            dest = out_dir / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(path, dest)
            copied[rel] = _hash_file(dest)

    manifests = sorted(runs_root.rglob(engine.MANIFEST_FILE))
    for manifest_path in manifests:
        run_dir = manifest_path.parent
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        if args.run and manifest["run_id"] != args.run:
            continue
        _copy_tree(run_dir, f"runs/{manifest['run_id']}")
    grid_manifest = runs_root / engine.GRID_MANIFEST_FILE
    if grid_manifest.exists() and not args.run:
        shutil.copyfile(grid_manifest, out_dir / engine.GRID_MANIFEST_FILE)
        copied[engine.GRID_MANIFEST_FILE] = _hash_file(grid_manifest)
    if args.reports:
        reports = Path(args.reports)
        if reports.exists():
            _copy_tree(reports, "reports")
    if not copied:
        raise DataError(f"export: nothing to export under {runs_root}")
    (out_dir / "index.json").write_text(
        json.dumps({"files": dict(sorted(copied.items()))}, indent=2) + "\n",
        encoding="utf-8",
    )
    print(f"exported {len(copied)} files -> {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medabstract",
        description="Abstract raw EHR medication entries into standardized concepts "
        "with few-shot prompted completion models, evaluate configurations, and "
        "review the outputs.",
    )
    parser.add_argument("--config", help="project config file (JSON)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="load, select and validate a corpus bundle")
    p_ingest.add_argument("--corpus", help="corpus CSV (drug, route, count, source)")
    p_ingest.add_argument("--gold", help="gold CSV (entry_id, task, value)")
    p_ingest.add_argument("--out", required=True, help="bundle output directory")
    p_ingest.add_argument("--tasks", help="task registry file or comma-separated task names")
    p_ingest.add_argument("--top-k", type=int, help="keep only the k most frequent entries")
    p_ingest.add_argument(
        "--group-by",
        choices=["none", "source"],
        default="source",
        help="apply --top-k per source database or over the whole corpus",
    )

    p_run = sub.add_parser("run", help="run a model/temperature/shot grid over a corpus")
    p_run.add_argument("--model", nargs="+", help="model id(s) from the provider registry")
    p_run.add_argument("--temp", nargs="+", type=float, help="sampling temperature(s)")
    p_run.add_argument("--shots", nargs="+", type=int, help="shot count(s), 0..10")
    p_run.add_argument("--tasks", help="task registry file or comma-separated task names")
    p_run.add_argument("--corpus", help="corpus CSV")
    p_run.add_argument("--out", help="output root for run directories")
    p_run.add_argument("--cache-dir", help="response cache directory")
    p_run.add_argument("--concurrency", type=int, default=4, help="in-flight provider calls")
    p_run.add_argument("--providers", help="provider registry file (JSON)")
    p_run.add_argument("--shot-pool", help="shot pool CSV (task, drug, route, expected_output)")
    p_run.add_argument("--no-cache", action="store_true", help="disable the response cache")
    p_run.add_argument("--max-retries", type=int, default=2, help="retries per provider call")
    p_run.add_argument(
        "--abort-fraction",
        type=float,
        default=engine.DEFAULT_ABORT_FRACTION,
        help="abort a run when transport failures exceed this fraction of entries",
    )
    p_run.add_argument(
        "--reprompt-invalid",
        type=int,
        default=0,
        help="re-ask the provider up to N times when the output fails to parse",
    )
    p_run.add_argument("--replay", help="re-execute one run directory from its manifest")

    p_eval = sub.add_parser("evaluate", help="score grid predictions against gold labels")
    p_eval.add_argument("--gold", help="gold CSV")
    p_eval.add_argument("--preds", required=True, help="grid output directory to score")
    p_eval.add_argument("--out", required=True, help="report output directory")
    p_eval.add_argument("--tasks", help="task registry file or comma-separated task names")
    p_eval.add_argument("--pivot-shots", type=int, help="shot count for the model x task pivot")
    p_eval.add_argument("--pivot-temp", type=float, help="temperature for pivots and curves")

    p_serve = sub.add_parser("review-serve", help="serve the clinician review loop")
    p_serve.add_argument("--run", help="restrict the service to one run id")
    p_serve.add_argument("--port", type=int, default=8765)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--runs-root", help="directory containing run directories")
    p_serve.add_argument("--data-dir", default="review_data", help="decision log directory")
    p_serve.add_argument("--shot-pool", help="shot pool file to promote corrections into")
    p_serve.add_argument(
        "--baseline",
        help='JSON file of per-group annotation seconds, e.g. {"total": 952}',
    )
    p_serve.add_argument("--ui-dir", help="directory of built UI assets to serve at /")

    p_export = sub.add_parser("export", help="bundle runs and reports into one archive directory")
    p_export.add_argument("--runs-root", help="directory containing run directories")
    p_export.add_argument("--run", help="export only this run id")
    p_export.add_argument("--reports", help="report directory to include")
    p_export.add_argument("--out", required=True, help="archive output directory")

    return parser


COMMANDS = {
    "ingest": cmd_ingest,
    "run": cmd_run,
    "evaluate": cmd_evaluate,
    "review-serve": cmd_review_serve,
    "export": cmd_export,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_project_config(Path(args.config)) if args.config else ProjectConfig()
        return COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except engine.RunAbortedError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ProviderError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except MedabstractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
