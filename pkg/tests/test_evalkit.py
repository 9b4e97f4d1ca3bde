"""Metric arithmetic and error-triage tests."""

import numpy as np
import pytest

from entlink.evalkit import ErrorCounts, categorize_errors, ed_f1, micro_f1, render_table


class TestMicroF1:
    def test_half_recall(self):
        out = micro_f1({"d": {(2, 3, "e1")}}, {"d": {(2, 3, "e1"), (5, 5, "e2")}})
        assert out["precision"] == 1.0
        assert out["recall"] == 0.5
        assert out["f1"] == pytest.approx(2 / 3)

    def test_md_only_ignores_entity(self):
        out = micro_f1(
            {"d": {(2, 3, "WRONG")}},
            {"d": {(2, 3, "e1"), (5, 5, "e2")}},
            mode="md_only",
        )
        assert out["f1"] == pytest.approx(2 / 3)

    def test_empty_predictions(self):
        out = micro_f1({"d": set()}, {"d": {(1, 1, "e1")}})
        assert out["f1"] == 0.0
        assert out["precision"] == 0.0

    def test_md_relaxation_dominates(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pred = {
                "d": {
                    (int(s), int(s) + int(l), f"e{int(e)}")
                    for s, l, e in zip(
                        rng.integers(1, 20, 8), rng.integers(0, 3, 8), rng.integers(0, 5, 8)
                    )
                }
            }
            gold = {
                "d": {
                    (int(s), int(s) + int(l), f"e{int(e)}")
                    for s, l, e in zip(
                        rng.integers(1, 20, 8), rng.integers(0, 3, 8), rng.integers(0, 5, 8)
                    )
                }
            }
            assert micro_f1(pred, gold, "md_only")["f1"] >= micro_f1(pred, gold, "full")["f1"]

    def test_permutation_invariance(self):
        pred = {"d1": {(1, 1, "a")}, "d2": {(2, 2, "b")}}
        gold = {"d1": {(1, 1, "a")}, "d2": {(3, 3, "b")}}
        a = micro_f1(pred, gold)
        b = micro_f1(dict(reversed(pred.items())), dict(reversed(gold.items())))
        assert a == b

    def test_mention_objects_accepted(self):
        from entlink.kbstore import LabeledMention, TokenMention

        pred = {"d": [LabeledMention(2, 3, "e1", 0.9)]}
        gold = {"d": [TokenMention(2, 3, "e1")]}
        assert micro_f1(pred, gold)["f1"] == 1.0


class TestEdF1:
    def test_exact_acceptance(self):
        assert ed_f1([({"e1", "e2"}, {"e1", "e2"})])["f1"] == 1.0

    def test_one_extra_acceptance(self):
        out = ed_f1([({"e1", "e2", "e3"}, {"e1", "e2"})])
        assert out["precision"] == pytest.approx(2 / 3)
        assert out["recall"] == 1.0
        assert out["f1"] == pytest.approx(0.8)

    def test_rejects_everything(self):
        assert ed_f1([(set(), {"e1"})])["f1"] == 0.0


class TestCategorizeErrors:
    def test_over(self):
        counts = categorize_errors([({(1, 1, "a"), (2, 2, "b")}, {(1, 1, "a")})])
        assert counts.over == 1

    def test_under(self):
        counts = categorize_errors([({(1, 1, "a")}, {(1, 1, "a"), (2, 2, "b")})])
        assert counts.under == 1

    def test_neither(self):
        counts = categorize_errors([({(1, 1, "a"), (3, 3, "c")}, {(1, 1, "a"), (2, 2, "b")})])
        assert counts.neither == 1

    def test_correct(self):
        counts = categorize_errors([({(1, 1, "a")}, {(1, 1, "a")})])
        assert counts.correct == 1

    def test_partition(self):
        rng = np.random.default_rng(1)
        pairs = []
        for _ in range(200):
            pred = {(int(i), int(i), "e") for i in rng.integers(1, 6, rng.integers(0, 5))}
            gold = {(int(i), int(i), "e") for i in rng.integers(1, 6, rng.integers(0, 5))}
            pairs.append((pred, gold))
        counts = categorize_errors(pairs)
        assert counts.total == 200


class TestRendering:
    def test_table_contains_metrics(self):
        text = render_table([{"metric": "micro_f1[full]", "f1": 0.5, "tp": 3}])
        assert "micro_f1[full]" in text
        assert "0.5000" in text

    def test_empty(self):
        assert render_table([]) == "(no metrics)"
