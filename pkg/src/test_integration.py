"""
Integration Tests for the linprobit command line

These tests drive `main.main` end to end (configuration loading, the
experiment harness and the output writers) and check exit codes and outputs.
"""

import csv
import io
import json
import math
import os
import sys
import tempfile
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path
from unittest import TestCase, main
from unittest.mock import patch

import numpy as np

import main as cli
from model_core import trial_stream


def run_cli(*argv):
    """Run the CLI and return (exit code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with patch.dict(os.environ, {"LINPROBIT_LOG_DIR": "", "LINPROBIT_LOG_LEVEL": "WARNING"}):
        with redirect_stdout(out), redirect_stderr(err):
            code = cli.main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


class IntegrationTests(TestCase):
    """Integration tests for the sweep, bench, estimate and verify commands."""

    def setUp(self):
        """Set up test environment."""
        # Create temporary directory for test outputs
        self.temp_dir = tempfile.TemporaryDirectory()
        self.output_dir = Path(self.temp_dir.name)
        self.dataset = self._create_dataset(self.output_dir / "toy.csv")
        self.spec = json.dumps({"label_column": "y", "drop_columns": ["id"]})

    def tearDown(self):
        """Clean up after tests."""
        self.temp_dir.cleanup()

    def _create_dataset(self, path):
        """Write a small probit dataset with an id column."""
        rng = trial_stream(11, 0)
        features = rng.standard_normal((60, 3))
        scores = features @ np.array([1.5, -1.0, 0.5]) + rng.standard_normal(60)
        lines = ["id,a,b,c,y"]
        for i, (row, score) in enumerate(zip(features, scores)):
            label = 1 if score > 0 else 0
            lines.append(f"{i}," + ",".join(f"{v:.6f}" for v in row) + f",{label}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def _sweep_args(self, output, threads):
        return [
            "sweep",
            "--configurations", "10x5,20x3",
            "--snr-grid", "-5,5",
            "--trials", "4",
            "--estimators", "lmmse,ls,map,pm",
            "--gibbs-samples", "60",
            "--gibbs-burn-in", "20",
            "--threads", threads,
            "--output", output,
        ]

    def test_sweep_writes_table(self):
        output = self.output_dir / "sweep.csv"
        code, _, err = run_cli(*self._sweep_args(output, 1))
        self.assertEqual(code, 0, err)
        rows = list(csv.DictReader(output.open(encoding="utf-8")))
        # 2 configurations x 2 SNR points x 4 estimators
        self.assertEqual(len(rows), 16)
        self.assertEqual(rows[0]["estimator"], "lmmse")
        self.assertNotEqual(rows[0]["mse_closed_form"], "")
        self.assertEqual(rows[2]["mse_closed_form"], "")

    def test_sweep_is_deterministic_across_threads(self):
        single = self.output_dir / "single.csv"
        multi = self.output_dir / "multi.csv"
        self.assertEqual(run_cli(*self._sweep_args(single, 1))[0], 0)
        self.assertEqual(run_cli(*self._sweep_args(multi, 2))[0], 0)
        self.assertEqual(single.read_bytes(), multi.read_bytes())

    def test_sweep_repeats_for_same_seed(self):
        first = self.output_dir / "first.csv"
        second = self.output_dir / "second.csv"
        other = self.output_dir / "other.csv"
        self.assertEqual(run_cli(*self._sweep_args(first, 1), "--seed", 7)[0], 0)
        self.assertEqual(run_cli(*self._sweep_args(second, 1), "--seed", 7)[0], 0)
        self.assertEqual(run_cli(*self._sweep_args(other, 1), "--seed", 8)[0], 0)
        self.assertEqual(first.read_bytes(), second.read_bytes())
        self.assertNotEqual(first.read_bytes(), other.read_bytes())

    def test_unknown_config_key(self):
        config = self.output_dir / "run.yaml"
        config.write_text("synthetic:\n  folds: 3\n", encoding="utf-8")
        code, _, err = run_cli("sweep", "--config", config)
        self.assertEqual(code, 2)
        self.assertIn("synthetic.folds", err)

    def test_bad_format_rejected_by_parser(self):
        with redirect_stderr(io.StringIO()):
            with self.assertRaises(SystemExit) as context:
                cli.main(["sweep", "--format", "xlsx"])
        self.assertEqual(context.exception.code, 2)

    def _bench_args(self, *files, fmt="csv", output="-"):
        args = ["bench"]
        for f in files:
            args += ["--file", f]
        return args + [
            "--spec", self.spec,
            "--estimators", "lmmse,map",
            "--folds", "3",
            "--partitions", "2",
            "--sigma-grid", "0.1,1,10",
            "--format", fmt,
            "--output", output,
        ]

    def test_bench_json_matches_csv(self):
        csv_path = self.output_dir / "bench.csv"
        json_path = self.output_dir / "bench.json"
        code, _, err = run_cli(*self._bench_args(self.dataset, output=csv_path))
        self.assertEqual(code, 0, err)
        code, _, err = run_cli(*self._bench_args(self.dataset, fmt="json", output=json_path))
        self.assertEqual(code, 0, err)

        rows = list(csv.DictReader(csv_path.open(encoding="utf-8")))
        document = json.loads(json_path.read_text(encoding="utf-8"))["bench"]
        self.assertEqual([r["estimator"] for r in rows], ["lmmse", "map"])
        for csv_row, json_row in zip(rows, document):
            self.assertEqual(csv_row["dataset"], "toy")
            self.assertEqual(float(csv_row["acc_mean"]), json_row["acc_mean"])
            self.assertGreater(json_row["acc_mean"], 0.5)

    def test_bench_partial_failure(self):
        missing = self.output_dir / "missing.csv"
        code, out, err = run_cli(*self._bench_args(self.dataset, missing))
        self.assertEqual(code, 1)
        self.assertIn(str(missing), err)
        rows = list(csv.DictReader(io.StringIO(out)))
        self.assertEqual({r["dataset"] for r in rows}, {"toy"})

    def test_bench_needs_spec_for_files(self):
        code, _, _ = run_cli("bench", "--file", self.dataset)
        self.assertEqual(code, 2)

    def test_estimate_scalar(self):
        design = self.output_dir / "design.csv"
        observations = self.output_dir / "y.csv"
        design.write_text("1\n", encoding="utf-8")
        observations.write_text("1\n", encoding="utf-8")
        code, out, err = run_cli(
            "estimate", "--design", design, "--observations", observations,
            "--estimators", "lmmse,ls",
        )
        self.assertEqual(code, 0, err)
        document = json.loads(out)
        self.assertEqual((document["m"], document["n"]), (1, 1))
        lmmse = document["estimates"]["lmmse"]["estimate"][0]
        ls = document["estimates"]["ls"]["estimate"][0]
        self.assertAlmostEqual(lmmse, 1.0 / math.sqrt(math.pi), places=10)
        self.assertAlmostEqual(ls, math.sqrt(math.pi), places=10)
        self.assertNotIn("elapsed_s", document["estimates"]["lmmse"]["diagnostics"])

    def test_estimate_missing_file(self):
        code, _, err = run_cli(
            "estimate", "--design", self.output_dir / "nope.csv",
            "--observations", self.output_dir / "nope.csv",
        )
        self.assertEqual(code, 3)
        self.assertIn("not found", err)

    def test_verify_passes(self):
        code, out, err = run_cli("verify", "--only", "scalar-anchors,map-scalar-oracle")
        self.assertEqual(code, 0, err)
        self.assertIn("### Verification", out)
        self.assertIn("| scalar-anchors | PASS |", out)

    def test_verify_sabotage_fails(self):
        code, out, _ = run_cli(
            "verify", "--only", "scalar-anchors", "--sabotage", "e-matrix-scale"
        )
        self.assertEqual(code, 4)
        self.assertIn("| scalar-anchors | FAIL |", out)

    def test_verify_unknown_sabotage(self):
        code, _, err = run_cli("verify", "--sabotage", "flip-signs")
        self.assertEqual(code, 2)
        self.assertIn("flip-signs", err)


def run_all_tests():
    """Run all integration tests."""
    print("Running Integration Tests for linprobit...\n")

    # Run tests using unittest
    test_suite = main(module=__name__, exit=False)

    # Return success status
    return test_suite.result.wasSuccessful()


if __name__ == "__main__":
    success = run_all_tests()
    sys.exit(0 if success else 1)
