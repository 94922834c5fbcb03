#!/usr/bin/env python3
"""
Tests for the report writer module.

Tests deterministic YAML rendering and the CSV/.dat files written for
evaluation and benchmark reports.
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import tempfile
import unittest

import numpy as np
import pandas as pd

from affect_types import AffectOutput, UncertaintyTriple, VAPoint
from evaluation import build_frame_table, evaluate, landmark_report
from report_writer import load_report, report_yaml, write_bench_report, write_eval_report
from settings import EvalConfig
from trace_io import ClipLabel, DatasetManifest, ManifestClip, PoseBin, PredictionTrace, Split


def make_report():
    rng = np.random.default_rng(0)
    clips, predictions = [], {}
    for k in range(8):
        clip_id = f"c{k}"
        v, a = rng.uniform(-0.9, 0.9, size=2)
        clips.append(ManifestClip(
            clip_id=clip_id, trace_path=f"{clip_id}.jsonl", split=Split.TEST, subject_id=f"s{k}",
            pose_bin=PoseBin(yaw_deg=30.0 * (k % 2), pitch_deg=0.0), label=ClipLabel(valence=v, arousal=a),
        ))
        records = []
        for t in range(10):
            u = float(rng.uniform(0, 0.5))
            triple = UncertaintyTriple(u / 2, u / 2, u)
            records.append(AffectOutput(VAPoint.clamped(v + rng.normal(0, 0.1), a + rng.normal(0, 0.1)), triple, triple, t))
        predictions[clip_id] = PredictionTrace(clip_id, records)
    table = build_frame_table(predictions, DatasetManifest(clips=clips), Split.TEST)
    return evaluate(table, EvalConfig(grid_res=4)).to_dict()


class TestReportYaml(unittest.TestCase):
    """Tests for YAML rendering."""

    def test_rounding_and_special_values(self):
        """Test float rounding, numpy scalars and non-finite values."""
        text = report_yaml({"a": 1 / 3, "b": np.float64(2.0), "c": float("nan"), "d": -1e-9, "e": np.int64(3)}).decode()
        self.assertEqual(text, "a: 0.333333\nb: 2.0\nc: null\nd: 0.0\ne: 3\n")

    def test_key_order_preserved(self):
        """Test that keys keep their insertion order."""
        text = report_yaml({"z": 1, "a": 2}).decode()
        self.assertEqual(text.splitlines(), ["z: 1", "a: 2"])


class TestEvalReport(unittest.TestCase):
    """Tests for evaluation report files."""

    def test_files_and_determinism(self):
        """Test that the same report gives the same bytes twice."""
        report = make_report()
        with tempfile.TemporaryDirectory() as tmp:
            first = write_eval_report(report, os.path.join(tmp, "a"))
            second = write_eval_report(report, os.path.join(tmp, "b"))
            names = [os.path.basename(p) for p in first]
            for expected in ("report.yaml", "overall.csv", "quadrants.csv", "grid.csv", "pose.csv",
                             "leave_n_in.csv", "leave_n_in_lowest_valence.dat", "grid_mae_v.dat", "grid_counts.dat"):
                self.assertIn(expected, names)
            for a, b in zip(first, second):
                with open(a, "rb") as fa, open(b, "rb") as fb:
                    self.assertEqual(fa.read(), fb.read(), os.path.basename(a))

    def test_yaml_loads_back(self):
        """Test that report.yaml parses and holds the overall block."""
        report = make_report()
        with tempfile.TemporaryDirectory() as tmp:
            write_eval_report(report, tmp)
            loaded = load_report(os.path.join(tmp, "report.yaml"))
            grid = pd.read_csv(os.path.join(tmp, "grid.csv"))
            counts = np.loadtxt(os.path.join(tmp, "grid_counts.dat"))
        self.assertEqual(loaded["overall"]["n_frames"], 80)
        self.assertAlmostEqual(loaded["overall"]["mae_v"], report["overall"]["mae_v"], places=6)
        self.assertEqual(len(grid), 16)
        self.assertEqual(counts.shape, (4, 4))
        self.assertEqual(counts.sum(), 80)


class TestBenchReport(unittest.TestCase):
    """Tests for benchmark report files."""

    def test_files(self):
        """Test the benchmark YAML and CED curve."""
        report = {"landmarks": landmark_report([0.01, 0.03], 0.08, 11), "au_icc": {"01": 0.5, "mean": 0.5},
                  "occlusion_auc": None}
        with tempfile.TemporaryDirectory() as tmp:
            written = [os.path.basename(p) for p in write_bench_report(report, tmp)]
            curve = np.loadtxt(os.path.join(tmp, "ced.dat"))
            loaded = load_report(os.path.join(tmp, "bench.yaml"))
        self.assertEqual(written, ["bench.yaml", "ced.dat", "au_icc.csv"])
        self.assertEqual(curve.shape, (11, 2))
        self.assertEqual(curve[-1, 1], 1.0)
        self.assertIsNone(loaded["occlusion_auc"])


if __name__ == "__main__":
    unittest.main()
