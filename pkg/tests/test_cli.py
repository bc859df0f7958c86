#!/usr/bin/env python
# tests/test_cli.py

"""
Tests for the pedalign command line: exit codes and the files each command writes.
"""

import io
import json
import os
import shutil
import tempfile
import unittest
from contextlib import redirect_stdout

from tests.support import (FIXTURE_CONVERSATIONS, FIXTURE_CORPUS, FIXTURE_DIVERGENT_TURNS,
                           FIXTURE_PROBES, FIXTURE_SFT_STREAM, FIXTURE_SOLUTIONS, FIXTURE_TURNS,
                           make_conversation)

from backend.metrics import FieldPrediction, prediction_to_record
from backend.schema import conversation_to_record
from cli.pedalign_cli import main
from utils.io_json import read_json, read_jsonl, write_jsonl


class TestCli(unittest.TestCase):

    def setUp(self):
        self.test_dir = tempfile.mkdtemp(prefix="pedalign-cli-")

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def path(self, name):
        return os.path.join(self.test_dir, name)

    def run_cli(self, *argv):
        """Run the CLI quietly; returns (exit code, stdout)."""
        buffer = io.StringIO()
        with redirect_stdout(buffer):
            code = main(list(argv) + ["-q"])
        return code, buffer.getvalue()

    def write_corpus(self, name, *action_lists):
        convs = [make_conversation(f"c{i}", actions) for i, actions in enumerate(action_lists)]
        write_jsonl([conversation_to_record(c) for c in convs], self.path(name))
        return self.path(name)

    # --- validate / stats ----------------------------------------------------------

    def test_validate_fixture(self):
        code, out = self.run_cli("validate", FIXTURE_CORPUS)
        self.assertEqual(code, 0)
        self.assertIn(f"{FIXTURE_CONVERSATIONS} conversations, 0 skipped, 0 violations", out)

    def test_validate_ordering_violation(self):
        corpus = self.write_corpus("bad.jsonl", [3, 1], [2, 1])
        code, out = self.run_cli("validate", corpus)
        self.assertEqual(code, 1)
        self.assertIn("c1 turn 1: action2-before-action1", out)
        self.assertIn("1 violations", out)

    def test_validate_lenient(self):
        corpus = self.write_corpus("bad.jsonl", [2, 1])
        with open(corpus, "a", encoding="utf-8") as f:
            f.write("not json\n")
        self.assertEqual(self.run_cli("validate", corpus)[0], 1)
        code, out = self.run_cli("validate", corpus, "--lenient")
        self.assertEqual(code, 0)
        self.assertIn("1 conversations, 1 skipped", out)

    def test_missing_file(self):
        self.assertEqual(self.run_cli("validate", self.path("missing.jsonl"))[0], 2)

    def test_missing_config(self):
        self.assertEqual(self.run_cli("split", FIXTURE_CORPUS, "--config", self.path("missing.json"))[0], 2)

    def test_no_command(self):
        self.assertEqual(main([]), 1)

    def test_stats(self):
        code, out = self.run_cli("stats", FIXTURE_CORPUS)
        self.assertEqual(code, 0)
        record = json.loads(out)
        self.assertEqual(record["conversations"], FIXTURE_CONVERSATIONS)
        self.assertEqual(record["qa_pairs"], FIXTURE_TURNS)

    # --- data preparation ------------------------------------------------------------

    def test_split(self):
        code, _ = self.run_cli("split", FIXTURE_CORPUS, "--sizes", "20", "10", "5", "--out", self.test_dir)
        self.assertEqual(code, 0)
        splits = read_json(self.path("splits.json"))
        self.assertEqual(splits["discarded"], 5)
        self.assertEqual(len(read_jsonl(self.path("test.jsonl"))), 5)

    def test_split_too_large(self):
        code, _ = self.run_cli("split", FIXTURE_CORPUS, "--sizes", "20", "20", "20", "--out", self.test_dir)
        self.assertEqual(code, 1)

    def test_build_pairs(self):
        code, out = self.run_cli("build-pairs", FIXTURE_CORPUS, FIXTURE_SFT_STREAM, "--out", self.path("pairs.jsonl"))
        self.assertEqual(code, 0)
        self.assertIn(f"{FIXTURE_DIVERGENT_TURNS} preference pairs", out)
        self.assertEqual(len(read_jsonl(self.path("pairs.jsonl"))), FIXTURE_DIVERGENT_TURNS)

    def test_build_pairs_noisy(self):
        out_path = self.path("pairs.jsonl")
        code, _ = self.run_cli("build-pairs", FIXTURE_CORPUS, "--solution-bank", FIXTURE_SOLUTIONS,
                               "--flip-prob", "1.0", "--out", out_path)
        self.assertEqual(code, 0)
        self.assertEqual(len(read_jsonl(out_path)), FIXTURE_TURNS)

    def test_build_pairs_needs_out(self):
        self.assertEqual(self.run_cli("build-pairs", FIXTURE_CORPUS, FIXTURE_SFT_STREAM)[0], 2)

    def test_build_pairs_misaligned(self):
        other = self.write_corpus("other.jsonl", [3])
        self.assertEqual(self.run_cli("build-pairs", FIXTURE_CORPUS, other, "--out", self.path("p.jsonl"))[0], 1)

    def test_build_probes(self):
        code, out = self.run_cli("build-probes", FIXTURE_CORPUS, "--solution-bank", FIXTURE_SOLUTIONS,
                                 "--out", self.path("probes.jsonl"))
        self.assertEqual(code, 0)
        self.assertEqual(len(read_jsonl(self.path("probes.jsonl"))), FIXTURE_PROBES)

    def test_build_probes_for_one_partition(self):
        self.run_cli("split", FIXTURE_CORPUS, "--out", self.test_dir)
        code, _ = self.run_cli("build-probes", FIXTURE_CORPUS, "--solution-bank", FIXTURE_SOLUTIONS,
                               "--split", "test", "--splits", self.path("splits.json"),
                               "--out", self.path("probes.jsonl"))
        self.assertEqual(code, 0)
        test_ids = set(read_json(self.path("splits.json"))["test"])
        for _, record, _ in read_jsonl(self.path("probes.jsonl")):
            self.assertIn(record["conv_id"], test_ids)

    # --- training and evaluation ------------------------------------------------------

    def test_train_and_evaluate(self):
        sft, lhp, pairs = self.path("sft.json"), self.path("lhp.json"), self.path("pairs.jsonl")
        self.assertEqual(self.run_cli("sft-train", FIXTURE_CORPUS, "--solution-bank", FIXTURE_SOLUTIONS,
                                      "--out", sft)[0], 0)
        self.assertEqual(self.run_cli("build-pairs", FIXTURE_CORPUS, FIXTURE_SFT_STREAM, "--out", pairs)[0], 0)
        self.assertEqual(self.run_cli("lhp-train", pairs, "--init", sft, "--algo", "ipo", "--out", lhp)[0], 0)

        code, out = self.run_cli("eval", FIXTURE_CORPUS, "--policy", f"SFT={sft}", "--policy", f"IPO={lhp}",
                                 "--report", self.path("report.xlsx"), "--plot", self.path("rounds.png"))
        self.assertEqual(code, 0)
        self.assertIn("Gain vs SFT", out)
        self.assertTrue(os.path.exists(self.path("report.xlsx")))
        self.assertTrue(os.path.exists(self.path("rounds.png")))

        probes = self.path("probes.jsonl")
        self.run_cli("build-probes", FIXTURE_CORPUS, "--solution-bank", FIXTURE_SOLUTIONS, "--out", probes)
        code, out = self.run_cli("ppl", probes, "--policy", f"SFT={sft}", "--report", self.path("ppl.csv"))
        self.assertEqual(code, 0)
        self.assertIn("A5-A4", out)
        self.assertTrue(os.path.exists(self.path("ppl.csv")))

    def test_lhp_train_bad_checkpoint(self):
        pairs = self.path("pairs.jsonl")
        self.run_cli("build-pairs", FIXTURE_CORPUS, FIXTURE_SFT_STREAM, "--out", pairs)
        with open(self.path("broken.json"), "w", encoding="utf-8") as f:
            f.write("{}")
        code, _ = self.run_cli("lhp-train", pairs, "--init", self.path("broken.json"), "--out", self.path("lhp.json"))
        self.assertEqual(code, 2)

    def test_eval_predictions(self):
        preds = [FieldPrediction("c1", 1, "b", 6, "y", "b", 6, "y"), FieldPrediction("c1", 2, "a", 4, "x")]
        write_jsonl([prediction_to_record(p) for p in preds], self.path("preds.jsonl"))
        code, out = self.run_cli("eval", "--predictions", self.path("preds.jsonl"), "--report", self.path("r.json"))
        self.assertEqual(code, 0)
        self.assertIn("50 (50, 50, 50)", out)

    def test_sweep_invalid_beta(self):
        self.assertEqual(self.run_cli("sweep-beta", "--betas", "0", "0.1")[0], 1)

    def test_sweep_report_and_plot(self):
        code, out = self.run_cli("sweep-beta", "--betas", "0.1", "--algos", "dpo", "--out", self.path("run"),
                                 "--report", self.path("sweep.csv"), "--plot", self.path("sweep.png"))
        self.assertEqual(code, 0)
        self.assertIn("dpo", out)
        self.assertTrue(os.path.getsize(self.path("sweep.png")) > 0)
        with open(self.path("sweep.csv"), encoding="utf-8") as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], "algo,beta,accuracy,f1")
        self.assertEqual(len(lines), 2)

        code, _ = self.run_cli("sweep-beta", "--from-report", self.path("sweep.csv"),
                               "--report", self.path("sweep.xlsx"), "--plot", self.path("again.png"))
        self.assertEqual(code, 0)
        self.assertTrue(os.path.exists(self.path("sweep.xlsx")))
        self.assertTrue(os.path.exists(self.path("again.png")))

    def test_sweep_from_foreign_table(self):
        with open(self.path("other.csv"), "w", encoding="utf-8") as f:
            f.write("variant,accuracy\nSFT,0.75\n")
        self.assertEqual(self.run_cli("sweep-beta", "--from-report", self.path("other.csv"))[0], 1)
        self.assertEqual(self.run_cli("sweep-beta", "--from-report", self.path("missing.csv"))[0], 2)

    def test_save_config(self):
        saved = self.path("effective.json")
        code, _ = self.run_cli("split", FIXTURE_CORPUS, "--out", self.path("splits"), "--seed", "5",
                               "--save-config", saved)
        self.assertEqual(code, 0)
        config = read_json(saved)
        self.assertEqual(config["split"]["seed"], 5)
        self.assertEqual(config["sft"]["seed"], 5)

    def test_invalid_policy_config(self):
        with open(self.path("config.json"), "w", encoding="utf-8") as f:
            json.dump({"policy": {"n_buckets": "many"}}, f)
        code, _ = self.run_cli("sft-train", FIXTURE_CORPUS, "--config", self.path("config.json"),
                               "--out", self.path("sft.json"))
        self.assertEqual(code, 2)
        self.assertFalse(os.path.exists(self.path("sft.json")))

    def test_pipeline_stop_after(self):
        code, out = self.run_cli("pipeline", "--out", self.path("run"), "--stop-after", "pairs")
        self.assertEqual(code, 0)
        self.assertIn("Stopped after stage 'pairs'", out)
        self.assertTrue(os.path.exists(self.path(os.path.join("run", "pairs.jsonl"))))


if __name__ == '__main__':
    unittest.main()
