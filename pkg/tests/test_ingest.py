from __future__ import annotations

import csv
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medabstract.domain import task_registry
from medabstract.errors import DataError
from medabstract.ingest import (
    load_gold,
    parse_corpus,
    select_top_k,
    summarize,
    summarize_by_source,
    write_corpus,
    write_gold,
)


def write_rows(path, rows, header=("drug", "route", "count", "source")):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


class TestParseCorpus:
    def test_field_mapping(self, tmp_path):
        path = tmp_path / "c.csv"
        write_rows(path, [["normal saline", "IV", 5021, "eicu_crd"]])
        entries, errors = parse_corpus(path)
        assert errors == []
        (entry,) = entries
        assert entry.drug_raw == "normal saline"
        assert entry.route_raw == "IV"
        assert entry.frequency == 5021
        assert entry.source == "eicu_crd"

    def test_empty_drug_goes_to_error_list(self, tmp_path):
        path = tmp_path / "c.csv"
        write_rows(path, [["", "IV", 3, "mimic_iv"], ["aspirin", "PO", 2, "mimic_iv"]])
        entries, errors = parse_corpus(path)
        assert [e.drug_raw for e in entries] == ["aspirin"]
        assert len(errors) == 1 and "empty drug" in errors[0].reason

    def test_duplicate_identity_rejected(self, tmp_path):
        path = tmp_path / "c.csv"
        write_rows(path, [["aspirin", "PO", 2, "mimic_iv"], ["aspirin", "PO", 9, "mimic_iv"]])
        entries, errors = parse_corpus(path)
        assert len(entries) == 1 and entries[0].frequency == 2
        assert len(errors) == 1 and "duplicate" in errors[0].reason

    def test_malformed_count_rejected_row_by_row(self, tmp_path):
        path = tmp_path / "c.csv"
        write_rows(path, [["a", "IV", "many", "mimic_iv"], ["b", "IV", -1, "mimic_iv"]])
        entries, errors = parse_corpus(path)
        assert entries == []
        assert len(errors) == 2

    def test_unreadable_file_is_fatal(self, tmp_path):
        with pytest.raises(DataError):
            parse_corpus(tmp_path / "missing.csv")

    def test_wrong_header_is_fatal(self, tmp_path):
        path = tmp_path / "c.csv"
        write_rows(path, [["a", "IV", 1]], header=("drug", "route", "n"))
        with pytest.raises(DataError):
            parse_corpus(path)

    def test_reserialize_roundtrip(self, tmp_path, dataset):
        first = tmp_path / "first.csv"
        second = tmp_path / "second.csv"
        write_corpus(dataset.corpus, first)
        entries, errors = parse_corpus(first)
        assert errors == []
        write_corpus(entries, second)
        reparsed, _ = parse_corpus(second)
        assert reparsed == entries
        assert [e.id for e in reparsed] == [e.id for e in dataset.corpus]


class TestSelectTopK:
    def test_tie_broken_by_drug_then_route(self, tiny):
        base = tiny.corpus[0]
        a = base.__class__(id="a", drug_raw="a", route_raw="IV", source="s", frequency=7)
        b = base.__class__(id="b", drug_raw="b", route_raw="IV", source="s", frequency=7)
        assert select_top_k([b, a], 1) == [a]

    def test_k_larger_than_corpus_returns_all_sorted(self, tiny):
        result = select_top_k(tiny.corpus, 10_000)
        assert len(result) == len(tiny.corpus)
        freqs = [e.frequency for e in result]
        assert freqs == sorted(freqs, reverse=True)

    def test_top_200_of_large_corpus(self):
        from medabstract.domain import MedEntry

        rng = random.Random(7)
        corpus = [
            MedEntry(
                id=str(i),
                drug_raw=f"drug{i}",
                route_raw="IV",
                source="eicu_crd",
                frequency=rng.randrange(0, 5000),
            )
            for i in range(14_604)
        ]
        assert len(select_top_k(corpus, 200)) == 200

    def test_k_must_be_positive(self, tiny):
        with pytest.raises(ValueError):
            select_top_k(tiny.corpus, 0)

    @settings(max_examples=200, deadline=None)
    @given(
        freqs=st.lists(st.integers(min_value=0, max_value=50), min_size=1, max_size=40),
        k=st.integers(min_value=1, max_value=40),
    )
    def test_prefix_property(self, freqs, k):
        from medabstract.domain import MedEntry

        corpus = [
            MedEntry(id=str(i), drug_raw=f"d{i:02d}", route_raw="IV", source="s", frequency=f)
            for i, f in enumerate(freqs)
        ]
        assert select_top_k(corpus, k) == select_top_k(corpus, k + 1)[:k]


class TestLoadGold:
    def test_binary_parse_and_normalization(self, tmp_path):
        path = tmp_path / "g.csv"
        write_rows(
            path,
            [
                ["id1", "iv_fluid", "1"],
                ["id2", "generic_route", "Injectable Product"],
            ],
            header=("entry_id", "task", "value"),
        )
        labels, errors = load_gold(path, task_registry())
        assert errors == []
        assert labels[0].value == 1
        assert labels[1].value == "injectable product"

    def test_unknown_task_is_row_error(self, tmp_path):
        path = tmp_path / "g.csv"
        write_rows(path, [["id3", "analgesic", "1"]], header=("entry_id", "task", "value"))
        labels, errors = load_gold(path, task_registry())
        assert labels == []
        assert len(errors) == 1 and "unknown task" in errors[0].reason

    def test_non_binary_value_for_binary_task(self, tmp_path):
        path = tmp_path / "g.csv"
        write_rows(path, [["id1", "antibiotic", "yes"]], header=("entry_id", "task", "value"))
        labels, errors = load_gold(path, task_registry())
        assert labels == []
        assert len(errors) == 1

    def test_gold_roundtrip(self, tmp_path, tiny):
        path = tmp_path / "g.csv"
        write_gold(tiny.gold, path)
        labels, errors = load_gold(path, task_registry())
        assert errors == []
        assert labels == tiny.gold


class TestSummarize:
    def test_published_shape_mimic(self, dataset):
        s = summarize(dataset.corpus, dataset.gold, source="mimic_iv")
        assert s.n_entries == 198
        assert s.n_unique_routes == 6
        assert s.n_unique_generic_names == 83
        assert s.positives_per_class["antibiotic"] == 8
        assert s.positives_per_class["anticoagulant"] == 13
        assert s.positives_per_class["electrolytes"] == 17
        assert s.positives_per_class["iv_fluid"] == 22
        assert s.positives_per_class["opioid_analgesic"] == 12
        assert s.positives_per_class["stress_ulcer_prophylaxis"] == 8

    def test_published_shape_eicu(self, dataset):
        s = summarize(dataset.corpus, dataset.gold, source="eicu_crd")
        assert s.n_entries == 200
        assert s.n_unique_routes == 5
        assert s.n_unique_generic_names == 50
        assert s.positives_per_class["iv_fluid"] == 28

    def test_empty_gold_all_zero(self, dataset):
        s = summarize(dataset.corpus, [])
        assert s.n_unique_routes == 0
        assert s.n_unique_generic_names == 0
        assert all(v == 0 for v in s.positives_per_class.values())

    def test_matches_brute_force_set_cardinalities(self, dataset):
        s = summarize(dataset.corpus, dataset.gold)
        routes = set()
        names = set()
        positives = {}
        ids = {e.id for e in dataset.corpus}
        for g in dataset.gold:
            if g.entry_id not in ids:
                continue
            if g.task == "generic_route":
                routes.add(g.value)
            elif g.task == "generic_name":
                names.add(g.value)
            elif g.value == 1:
                positives[g.task] = positives.get(g.task, 0) + 1
        assert s.n_unique_routes == len(routes)
        assert s.n_unique_generic_names == len(names)
        for class_id, count in positives.items():
            assert s.positives_per_class[class_id] == count

    def test_by_source_ordering(self, dataset):
        summaries = summarize_by_source(dataset.corpus, dataset.gold)
        assert [s.source for s in summaries] == ["eicu_crd", "mimic_iv"]
