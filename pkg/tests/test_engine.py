from __future__ import annotations

import json

import pytest

from synthdata import corrupt_rules, oracle_rules, shot_pool_from, small_dataset

from medabstract.domain import RunConfig, registry_by_name, task_registry
from medabstract.engine import (
    GRID_MANIFEST_FILE,
    PREDICTIONS_FILE,
    ResponseCache,
    RunAbortedError,
    cache_key,
    normalize_freetext_output,
    parse_binary_output,
    read_predictions,
    run_grid,
    run_task,
)
from medabstract.providers import (
    CompletionRequest,
    CompletionResponse,
    MockProvider,
    Provider,
    ProviderRegistry,
    ProviderSpec,
    TransportError,
    save_mock_rules,
)

TASKS = registry_by_name(task_registry())


def config(**kwargs):
    defaults = dict(
        model_id="mock-oracle",
        provider_kind="mock",
        temperature=0.0,
        shot_count=0,
        concurrency_cap=4,
    )
    defaults.update(kwargs)
    return RunConfig(**defaults)


class TestOutputParsing:
    @pytest.mark.parametrize(
        "raw,expected",
        [(" 1\n", 1), ("0", 0), ("1", 1), ("  0  ", 0), ("The answer is 1", None),
         ("01", None), ("", None), ("yes", None)],
    )
    def test_binary_strictness(self, raw, expected):
        assert parse_binary_output(raw) == expected

    @pytest.mark.parametrize(
        "raw,expected",
        [
            ("Injectable  Product ", "injectable product"),
            ("Sodium Chloride 9mg/mL", "sodium chloride 9mg/ml"),
            ("", None),
            ("   ", None),
            ("a\t b\n c", "a b c"),
        ],
    )
    def test_freetext_normalization(self, raw, expected):
        assert normalize_freetext_output(raw) == expected


class TestCache:
    def test_round_trip(self, tmp_path):
        cache = ResponseCache(tmp_path)
        key = cache_key("m", 0.2, "digest")
        cache.put(key, "hello", 12, 1)
        assert cache.get(key) == {"output_text": "hello", "latency_ms": 12, "attempts": 1}

    def test_miss_returns_none(self, tmp_path):
        assert ResponseCache(tmp_path).get(cache_key("m", 0.0, "x")) is None

    def test_temperature_is_part_of_the_key(self):
        assert cache_key("m", 0.0, "d") != cache_key("m", 0.2, "d")
        assert cache_key("m", 0.2, "d") == cache_key("m", 0.2, "d")


def oracle_provider(ds, corrupt_task=None, k=0):
    rules = oracle_rules(ds)
    corrupted_keys = []
    if corrupt_task is not None:
        rules, corrupted_keys = corrupt_rules(rules, corrupt_task, k)
    return MockProvider(rules), corrupted_keys


class TestRunTask:
    def test_oracle_run_matches_gold_everywhere(self, tiny):
        provider, _ = oracle_provider(tiny)
        pools = shot_pool_from(tiny)
        gold = tiny.gold_by_key()
        for task in tiny.tasks:
            result = run_task(tiny.corpus, task, config(shot_count=2), pools[task.name], provider)
            assert all(p.valid for p in result.predictions)
            for p in result.predictions:
                assert p.parsed == gold[(p.entry_id, task.name)]
            assert result.manifest.counts == {
                "total": len(tiny.corpus),
                "valid": len(tiny.corpus),
                "invalid": 0,
                "cache_hits": 0,
            }

    def test_predictions_in_corpus_order(self, tiny):
        provider, _ = oracle_provider(tiny)
        result = run_task(tiny.corpus, TASKS["iv_fluid"], config(concurrency_cap=8), [], provider)
        assert [p.entry_id for p in result.predictions] == [e.id for e in tiny.corpus]

    def test_corrupted_rules_shift_exactly_k(self, tiny):
        k = 5
        provider, corrupted = oracle_provider(tiny, corrupt_task="iv_fluid", k=k)
        assert len(corrupted) == k
        gold = tiny.gold_by_key()
        result = run_task(tiny.corpus, TASKS["iv_fluid"], config(), [], provider)
        wrong = [p for p in result.predictions if p.parsed != gold[(p.entry_id, "iv_fluid")]]
        assert len(wrong) == k

    def test_warm_cache_rerun_identical_bytes(self, tmp_path, tiny):
        provider, _ = oracle_provider(tiny)
        cache = ResponseCache(tmp_path / "cache")
        out1 = tmp_path / "run1"
        out2 = tmp_path / "run2"
        cold = run_task(tiny.corpus, TASKS["iv_fluid"], config(), [], provider, out_dir=out1, cache=cache)
        assert cold.manifest.counts["cache_hits"] == 0
        warm = run_task(tiny.corpus, TASKS["iv_fluid"], config(), [], provider, out_dir=out2, cache=cache)
        assert warm.manifest.counts["cache_hits"] == warm.manifest.counts["total"]
        assert (out1 / PREDICTIONS_FILE).read_bytes() == (out2 / PREDICTIONS_FILE).read_bytes()

    def test_result_bytes_independent_of_concurrency(self, tmp_path, tiny):
        provider, _ = oracle_provider(tiny)
        outs = []
        for cap in (1, 8):
            out = tmp_path / f"cap{cap}"
            run_task(tiny.corpus, TASKS["generic_name"], config(concurrency_cap=cap), [], provider, out_dir=out)
            outs.append((out / PREDICTIONS_FILE).read_bytes())
        assert outs[0] == outs[1]

    def test_invalid_output_recorded_not_dropped(self, tiny):
        provider, _ = oracle_provider(tiny)
        # Garbage output for one entry's rule
        key = ("iv_fluid", tiny.corpus[0].drug_raw, tiny.corpus[0].route_raw)
        rule = provider.rules[key]
        provider.rules[key] = type(rule)(rule.task, rule.drug_raw, rule.route_raw, "It is 1")
        result = run_task(tiny.corpus, TASKS["iv_fluid"], config(), [], provider)
        assert result.manifest.counts["invalid"] == 1
        assert result.manifest.counts["total"] == len(tiny.corpus)
        bad = result.predictions[0]
        assert not bad.valid and bad.parsed is None and bad.raw_output == "It is 1"

    def test_permanent_error_marks_entry_and_continues(self, tiny):
        provider, _ = oracle_provider(tiny)
        key = ("iv_fluid", tiny.corpus[3].drug_raw, tiny.corpus[3].route_raw)
        del provider.rules[key]  # no rule, fallback=error
        result = run_task(tiny.corpus, TASKS["iv_fluid"], config(), [], provider)
        assert result.manifest.counts["total"] == len(tiny.corpus)
        errored = result.predictions[3]
        assert not errored.valid and errored.error is not None

    def test_transport_failures_abort_preserving_partials(self, tmp_path, tiny):
        class FlakyProvider(Provider):
            def __init__(self, oracle, bad_drugs):
                self.oracle = oracle
                self.bad_drugs = bad_drugs

            def complete(self, request: CompletionRequest) -> CompletionResponse:
                if any(f'["{d}"' in request.prompt_text for d in self.bad_drugs):
                    raise TransportError("boom")
                return self.oracle.complete(request)

        oracle, _ = oracle_provider(tiny)
        bad = {e.drug_raw for e in tiny.corpus[:10]}
        provider = FlakyProvider(oracle, bad)
        out = tmp_path / "aborted"
        with pytest.raises(RunAbortedError):
            run_task(
                tiny.corpus,
                TASKS["iv_fluid"],
                config(concurrency_cap=1),
                [],
                provider,
                out_dir=out,
                abort_fraction=0.2,
            )
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "aborted"
        assert (out / PREDICTIONS_FILE).exists()

    def test_reprompt_invalid_budget(self, tiny):
        class CountingMock(Provider):
            def __init__(self, inner):
                self.inner = inner
                self.calls = 0

            def complete(self, request):
                self.calls += 1
                return self.inner.complete(request)

        oracle, _ = oracle_provider(tiny)
        key = ("iv_fluid", tiny.corpus[0].drug_raw, tiny.corpus[0].route_raw)
        rule = oracle.rules[key]
        oracle.rules[key] = type(rule)(rule.task, rule.drug_raw, rule.route_raw, "??")
        provider = CountingMock(oracle)
        result = run_task(tiny.corpus, TASKS["iv_fluid"], config(), [], provider, reprompt_invalid=2)
        assert provider.calls == len(tiny.corpus) + 2
        assert not result.predictions[0].valid

    def test_persisted_lines_match_documented_format(self, tmp_path, tiny):
        provider, _ = oracle_provider(tiny)
        out = tmp_path / "run"
        run_task(tiny.corpus, TASKS["iv_fluid"], config(shot_count=1), shot_pool_from(tiny)["iv_fluid"], provider, out_dir=out)
        lines = (out / PREDICTIONS_FILE).read_text().splitlines()
        record = json.loads(lines[0])
        assert list(record) == [
            "entry_id", "task", "model_id", "temperature", "shot_count",
            "raw_output", "parsed", "valid", "latency_ms",
        ]
        reread = read_predictions(out / PREDICTIONS_FILE)
        assert len(reread) == len(tiny.corpus)


def registry_for(ds, tmp_path, rules=None):
    rules_path = tmp_path / "rules.csv"
    save_mock_rules(rules if rules is not None else oracle_rules(ds), rules_path)
    return ProviderRegistry(
        [ProviderSpec(model_id="mock-oracle", provider_kind="mock", rules_path=rules_path)]
    )


class TestRunGrid:
    def test_single_cell(self, tmp_path, tiny):
        registry = registry_for(tiny, tmp_path)
        grid = run_grid(
            tiny.corpus,
            [TASKS["iv_fluid"]],
            models=["mock-oracle"],
            temperatures=[0.0],
            shot_counts=[1],
            shot_pools=shot_pool_from(tiny),
            registry=registry,
            out_root=tmp_path / "grid",
        )
        assert len(grid.cells) == 1
        assert grid.status == "complete"
        assert (tmp_path / "grid" / GRID_MANIFEST_FILE).exists()

    def test_full_cross_product(self, tmp_path):
        ds = small_dataset(n=6)
        registry = registry_for(ds, tmp_path)
        grid = run_grid(
            ds.corpus,
            ds.tasks,
            models=["mock-oracle"],
            temperatures=[0.0, 0.2],
            shot_counts=[0, 2],
            shot_pools=shot_pool_from(ds),
            registry=registry,
            out_root=tmp_path / "grid",
        )
        assert len(grid.cells) == 1 * 2 * 2 * 8
        seen = {(c.model_id, c.temperature, c.shot_count, c.task) for c in grid.cells}
        assert len(seen) == len(grid.cells)

    def test_grid_twice_is_byte_identical(self, tmp_path):
        ds = small_dataset(n=6)
        registry = registry_for(ds, tmp_path)

        def run_once(out):
            run_grid(
                ds.corpus,
                [TASKS["iv_fluid"], TASKS["generic_route"]],
                models=["mock-oracle"],
                temperatures=[0.0],
                shot_counts=[0, 1],
                shot_pools=shot_pool_from(ds),
                registry=registry,
                out_root=out,
                cache=ResponseCache(tmp_path / "cache"),
            )
            return {
                p.relative_to(out).as_posix(): p.read_bytes()
                for p in sorted(out.rglob(PREDICTIONS_FILE))
            }

        first = run_once(tmp_path / "g1")
        second = run_once(tmp_path / "g2")
        assert first == second

    def test_unknown_model_fails_before_any_call(self, tmp_path, tiny):
        from medabstract.errors import ConfigError

        registry = registry_for(tiny, tmp_path)
        with pytest.raises(ConfigError):
            run_grid(
                tiny.corpus,
                [TASKS["iv_fluid"]],
                models=["mock-oracle", "ghost"],
                temperatures=[0.0],
                shot_counts=[0],
                shot_pools={},
                registry=registry,
            )

    def test_aborted_cell_marks_grid_partial(self, tmp_path, tiny):
        # Rules only for iv_fluid; generic_route calls hit NoRuleError
        # (permanent, run continues) so instead drop ALL rules to force
        # transport-free abortion via a failing provider is overkill here;
        # use a registry whose rules are empty and fallback missing for one
        # task, which yields invalid predictions, not abort. Aborts come from
        # transport errors, tested in TestRunTask; here we check partial
        # status propagation with a stub.
        from medabstract import engine as engine_mod

        registry = registry_for(tiny, tmp_path)
        original = engine_mod.run_task
        calls = {"n": 0}

        def flaky_run_task(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] == 2:
                raise RunAbortedError("forced")
            return original(*args, **kwargs)

        engine_mod.run_task = flaky_run_task
        try:
            grid = run_grid(
                tiny.corpus,
                [TASKS["iv_fluid"], TASKS["antibiotic"]],
                models=["mock-oracle"],
                temperatures=[0.0],
                shot_counts=[0],
                shot_pools={},
                registry=registry,
                out_root=tmp_path / "grid",
            )
        finally:
            engine_mod.run_task = original
        assert grid.status == "partial"
        statuses = [c.status for c in grid.cells]
        assert statuses.count("complete") == 1 and statuses.count("aborted") == 1
