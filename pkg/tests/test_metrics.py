#!/usr/bin/env python
# tests/test_metrics.py

"""
Tests for accuracy, macro-F1, round curves, perplexity and the report tables.
"""

import itertools
import json
import math
import os
import shutil
import tempfile
import unittest

import numpy as np

from tests.support import FIXTURE_CORPUS, FIXTURE_SOLUTIONS, make_annotation, make_conversation

from backend.errors import EmptyInput, EmptyTokens, MalformedRecord, PositiveLogProb
from backend.metrics import (FieldPrediction, FieldScores, MetricsReport, comparison_frame,
                             field_accuracy, format_accuracy, format_accuracy_cell, format_f1,
                             format_f1_cell, load_predictions, macro_f1, metrics_report,
                             multi_round_curve, perplexity, ppl_gap_report, prediction_to_record,
                             render_comparison_table, render_ppl_table)
from backend.pipeline import build_probes
from backend.policy import new_policy_for
from backend.prefgen import load_solution_bank
from backend.schema import read_conversations
from utils.io_json import write_jsonl

FIELDS = ("evaluation", "action", "substate")


def prediction(turn, gold, pred, conv_id="c1"):
    """gold/pred are (evaluation, action, substate) tuples; pred may be None."""
    return FieldPrediction(conv_id, turn, *gold, *(pred or (None, None, None)))


def random_predictions(rng, n):
    preds = []
    for i in range(n):
        gold = (str(rng.choice(list("abc"))), int(rng.integers(1, 4)), str(rng.choice(list("wx"))))
        pred = None if rng.random() < 0.1 else (str(rng.choice(list("abd"))), int(rng.integers(1, 5)),
                                                str(rng.choice(list("wxy"))))
        preds.append(prediction(int(rng.integers(1, 12)), gold, pred, conv_id=f"c{i}"))
    return preds


def brute_force_f1(gold, pred):
    """Macro F1 by direct confusion counting over gold classes."""
    scores = []
    for label in sorted(set(gold)):
        tp = sum(1 for g, p in zip(gold, pred) if g == label and p == label)
        fp = sum(1 for g, p in zip(gold, pred) if g != label and p == label)
        fn = sum(1 for g, p in zip(gold, pred) if g == label and p != label)
        scores.append(2 * tp / (2 * tp + fp + fn))
    return sum(scores) / len(scores)


def field_columns(preds, name):
    gold = [str(getattr(p, f"gold_{name}")) for p in preds]
    pred = [str(getattr(p, f"pred_{name}")) if p.parsed else None for p in preds]
    return gold, pred


class TestAccuracy(unittest.TestCase):

    def test_display_of_mean(self):
        scores = FieldScores.of(0.74, 0.74, 0.84)
        self.assertAlmostEqual(scores.mean, 0.773333333333, places=10)
        self.assertEqual(format_accuracy_cell(scores), "77 (74, 74, 84)")

    def test_halves_round_up(self):
        self.assertEqual(format_accuracy(0.745), "75")
        self.assertEqual(format_accuracy(0.125), "13")
        self.assertEqual(format_accuracy(0.7449), "74")
        self.assertEqual(format_accuracy(1.0), "100")

    def test_perfect(self):
        preds = [prediction(t, ("b", 6, "y"), ("b", 6, "y")) for t in (1, 2, 3)]
        self.assertEqual(tuple(field_accuracy(preds)), (1.0, 1.0, 1.0, 1.0))
        self.assertEqual(tuple(macro_f1(preds)), (1.0, 1.0, 1.0, 1.0))

    def test_counting(self):
        preds = [prediction(1, ("a", 1, "x"), ("a", 1, "x")),
                 prediction(2, ("a", 2, "x"), ("a", 2, "x")),
                 prediction(3, ("a", 3, "x"), ("a", 3, "x")),
                 prediction(4, ("a", 4, "x"), ("a", 5, "x"))]
        self.assertEqual(field_accuracy(preds).action, 0.75)

    def test_unparseable_counts_as_wrong(self):
        preds = [prediction(1, ("a", 1, "x"), None), prediction(2, ("a", 1, "x"), ("a", 1, "x"))]
        self.assertEqual(tuple(field_accuracy(preds)[:3]), (0.5, 0.5, 0.5))
        self.assertEqual(metrics_report(preds).n_unparseable, 1)

    def test_empty(self):
        for fn in (field_accuracy, macro_f1, multi_round_curve):
            with self.assertRaises(EmptyInput):
                fn([])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            preds = random_predictions(rng, int(rng.integers(1, 9)))
            accuracy = field_accuracy(preds)
            f1 = macro_f1(preds)
            for i, name in enumerate(FIELDS):
                gold, pred = field_columns(preds, name)
                hits = sum(1 for g, p in zip(gold, pred) if g == p)
                self.assertAlmostEqual(accuracy[i], hits / len(preds), delta=1e-12)
                self.assertAlmostEqual(f1[i], brute_force_f1(gold, pred), delta=1e-12)


class TestMacroF1(unittest.TestCase):

    def test_display_of_mean(self):
        scores = FieldScores.of(0.42, 0.24, 0.37)
        self.assertAlmostEqual(scores.mean, 0.343333333333, places=10)
        self.assertEqual(format_f1_cell(scores), "0.34 (0.42, 0.24, 0.37)")

    def test_halves_round_up(self):
        self.assertEqual(format_f1(0.125), "0.13")
        self.assertEqual(format_f1(0.345), "0.35")
        self.assertEqual(format_f1(0.0), "0.00")

    def test_small_example(self):
        preds = [prediction(1, ("a", 1, "x"), ("a", 1, "x")),
                 prediction(2, ("a", 1, "x"), ("b", 1, "x")),
                 prediction(3, ("b", 1, "x"), ("b", 1, "x"))]
        self.assertAlmostEqual(macro_f1(preds).evaluation, 2 / 3)

    def test_classes_absent_from_gold_are_excluded(self):
        preds = [prediction(1, ("a", 1, "x"), ("c", 1, "x")), prediction(2, ("a", 1, "x"), ("a", 1, "x"))]
        # only class a: tp 1, gold 2, predicted 1
        self.assertAlmostEqual(macro_f1(preds).evaluation, 2 / 3)


class TestRoundCurve(unittest.TestCase):

    def test_single_round(self):
        preds = [prediction(1, ("b", 6, "y"), ("b", 6, "y"), conv_id=f"c{i}") for i in range(4)]
        self.assertEqual([tuple(p) for p in multi_round_curve(preds)], [(1, 1.0, 4)])

    def test_pooling(self):
        preds = [prediction(t, ("b", 6, "y"), ("b", 6, "y")) for t in (1, 8, 9, 10)]
        curve = multi_round_curve(preds, cap=8)
        self.assertEqual([(p.round, p.n) for p in curve], [(1, 1), (8, 3)])

    def test_empty_rounds_omitted(self):
        preds = [prediction(t, ("b", 6, "y"), ("b", 6, "y")) for t in (1, 3)]
        self.assertEqual([p.round for p in multi_round_curve(preds)], [1, 3])

    def test_declining_curve(self):
        preds = []
        for t, right in ((1, 3), (8, 9)):
            # round 1: 3 of 4 turns fully right; round 8: 9 of 15
            total = 4 if t == 1 else 15
            for i in range(total):
                pred = ("b", 6, "y") if i < right else ("a", 5, "x")
                preds.append(prediction(t, ("b", 6, "y"), pred, conv_id=f"c{t}-{i}"))
        curve = multi_round_curve(preds)
        self.assertAlmostEqual(curve[0].accuracy, 0.75)
        self.assertAlmostEqual(curve[-1].accuracy, 0.60)

    def test_weighted_rounds_equal_overall(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            preds = random_predictions(rng, int(rng.integers(1, 30)))
            curve = multi_round_curve(preds)
            weighted = sum(p.accuracy * p.n for p in curve) / sum(p.n for p in curve)
            self.assertAlmostEqual(weighted, field_accuracy(preds).mean, delta=1e-12)

    def test_bad_cap(self):
        with self.assertRaises(ValueError):
            multi_round_curve([prediction(1, ("b", 6, "y"), None)], cap=0)


class TestPerplexity(unittest.TestCase):

    def test_values(self):
        self.assertAlmostEqual(perplexity([-0.5, -1.0, -1.5]), math.e, places=12)
        self.assertEqual(perplexity([0.0]), 1.0)
        for k in (1, 3, 10):
            self.assertAlmostEqual(perplexity([-math.log(4)] * k), 4.0, places=12)

    def test_order_and_duplication(self):
        rng = np.random.default_rng(13)
        for _ in range(1000):
            values = list(-rng.exponential(size=int(rng.integers(1, 10))))
            shuffled = list(rng.permutation(values))
            self.assertAlmostEqual(perplexity(values), perplexity(shuffled), delta=1e-12 * perplexity(values))
            self.assertAlmostEqual(perplexity(values), perplexity(values + values), delta=1e-12 * perplexity(values))
            expected = math.exp(-sum(values) / len(values))
            self.assertAlmostEqual(perplexity(values), expected, delta=1e-12 * expected)

    def test_errors(self):
        with self.assertRaises(EmptyTokens):
            perplexity([])
        with self.assertRaises(PositiveLogProb):
            perplexity([-1.0, 0.5])
        with self.assertRaises(ValueError):
            perplexity([float("-inf")])


class TestPplGap(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        convs, _ = read_conversations(FIXTURE_CORPUS)
        cls.probes = build_probes(convs, load_solution_bank(FIXTURE_SOLUTIONS))
        cls.policy = new_policy_for(["hint start writing down the answer"])

    def test_uniform_policy_buckets_equal(self):
        table = ppl_gap_report(self.probes, self.policy)
        v = len(self.policy.vocab)
        for bucket in ("A1", "A2", "A4", "A5"):
            self.assertAlmostEqual(table.means[bucket], v, places=9)
        self.assertAlmostEqual(table.gap("A1", "A2"), 0.0, places=9)

    def test_matches_per_probe_recompute(self):
        rng = np.random.default_rng(14)
        policy = self.policy.copy()
        policy.token_model[...] = rng.normal(size=policy.token_model.shape)
        table = ppl_gap_report(self.probes, policy)
        for bucket, side in (("A1", "aligned"), ("A2", "misaligned")):
            values = []
            for probe in self.probes:
                ann = getattr(probe, side)
                if f"A{ann.action}" == bucket:
                    values.append(perplexity(policy.token_logprobs(ann)))
            self.assertAlmostEqual(table.means[bucket], sum(values) / len(values), places=9)
            self.assertEqual(table.counts[bucket], len(values))

    def test_absent_buckets(self):
        only_a1 = [p for p in self.probes if p.aligned.action == 1]
        table = ppl_gap_report(only_a1, self.policy)
        self.assertEqual(sorted(table.means), ["A1", "A2"])
        self.assertIsNone(table.gap("A4", "A5"))
        self.assertIsNone(table.to_record()["gap_A4_A5"])

    def test_empty(self):
        with self.assertRaises(EmptyInput):
            ppl_gap_report([], self.policy)


class TestPredictionFiles(unittest.TestCase):

    def setUp(self):
        self.test_dir = tempfile.mkdtemp(prefix="pedalign-metrics-")
        self.path = os.path.join(self.test_dir, "predictions.jsonl")

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_load(self):
        write_jsonl([
            {"conv_id": "c1", "turn": 1, "pred": {"eval": "B", "action": "6", "substate": "y"},
             "gold": {"eval": "b", "action": 6, "substate": "y"}},
            {"conv_id": "c1", "turn": 2, "pred": {"eval": "b", "action": "thirteen"},
             "gold": {"Evaluation of Student Response": "a", "Action Based on Evaluation": "4",
                      "Subproblem State": "x"}},
            {"conv_id": "c1", "turn": 3, "pred": None, "gold": {"eval": "a", "action": 1, "substate": "x"}},
        ], self.path)
        preds = load_predictions(self.path)
        self.assertEqual(len(preds), 3)
        self.assertTrue(preds[0].parsed)
        self.assertFalse(preds[1].parsed)
        self.assertEqual(preds[1].gold_action, 4)
        self.assertEqual(tuple(field_accuracy(preds)[:3]), (1 / 3, 1 / 3, 1 / 3))

    def test_bad_gold(self):
        write_jsonl([{"conv_id": "c1", "turn": 1, "pred": None, "gold": {"eval": "q", "action": 1, "substate": "x"}}],
                    self.path)
        with self.assertRaises(MalformedRecord):
            load_predictions(self.path)

    def test_record_roundtrip(self):
        preds = [prediction(2, ("a", 4, "x"), ("b", 5, "y")), prediction(3, ("a", 4, "x"), None)]
        write_jsonl([prediction_to_record(p) for p in preds], self.path)
        self.assertEqual(load_predictions(self.path), preds)


class TestTables(unittest.TestCase):

    def setUp(self):
        self.reports = {
            "SFT": MetricsReport(FieldScores.of(0.5, 0.5, 0.5), FieldScores.of(0.4, 0.4, 0.4), 10),
            "DPO": MetricsReport(FieldScores.of(0.74, 0.74, 0.84), FieldScores.of(0.42, 0.24, 0.37), 10),
        }

    def test_comparison_table(self):
        table = render_comparison_table(self.reports)
        self.assertIn("77 (74, 74, 84)", table)
        self.assertIn("0.34 (0.42, 0.24, 0.37)", table)
        self.assertIn("+27.3", table)

    def test_comparison_frame(self):
        frame = comparison_frame(self.reports)
        self.assertEqual(list(frame["variant"]), ["SFT", "DPO"])
        self.assertAlmostEqual(frame.loc[1, "gain_vs_SFT"], 27.333333333, places=6)

    def test_report_record_is_json(self):
        report = metrics_report([prediction(1, ("b", 6, "y"), ("b", 6, "y"))])
        record = report.to_record()
        json.dumps(record)
        self.assertEqual(record["display"]["accuracy"], "100 (100, 100, 100)")

    def test_ppl_table(self):
        convs = [make_conversation("c1", [3, 1, 4])]
        bank = {"What is the cost of 3 apples?": "6 dollars"}
        policy = new_policy_for([make_annotation(1).utterance])
        text = render_ppl_table({"Base": ppl_gap_report(build_probes(convs, bank), policy)})
        self.assertIn("Base", text)
        self.assertIn("A2-A1", text)


if __name__ == '__main__':
    unittest.main()
