#!/usr/bin/env python3
"""
Tests for the synthetic data module.

Tests VA trajectories, the VA -> AU -> landmark generative map, corruption
spans, simulated annotations and whole-dataset generation.
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import filecmp
import tempfile
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from affect_types import Quadrant, VAPoint
from input_validator import validate_frame
from settings import SimConfig
from simulator import (
    BASELINE_UNCERTAINTY,
    CAPTURE_UNCERTAINTY_MAX,
    OCCLUDED_UNCERTAINTY,
    SELF_OCCLUDED_UNCERTAINTY,
    CorruptionKind,
    CorruptionSpan,
    GenerativeMap,
    SpanOutOfRange,
    assign_splits,
    build_generative_map,
    canonical_face,
    corrupt,
    generate_clip,
    random_invalid_spans,
    sample_va_trajectory,
    simulate_annotations,
    simulate_dataset,
    summarize_labels,
    synthesize_features,
    trajectory_points,
)
from trace_io import PoseBin, Split, load_manifest, read_trace


SMALL = SimConfig(n_clips=8, clip_len_frames=24, clips_per_subject=2)


class TestTrajectories(unittest.TestCase):
    """Tests for OU trajectories."""

    def test_shape_and_range(self):
        """Test that trajectories have one VA row per frame inside [-1, 1]."""
        traj = sample_va_trajectory(SimConfig(clip_len_frames=500, ou_sigma=2.0), np.random.default_rng(0))
        self.assertEqual(traj.shape, (500, 2))
        self.assertTrue(np.all(np.abs(traj) <= 1.0))

    def test_zero_sigma_is_constant(self):
        """Test that without diffusion the walk stays at its mean."""
        traj = sample_va_trajectory(SimConfig(ou_sigma=0.0), np.random.default_rng(3))
        self.assertTrue(np.all(traj == traj[0]))

    def test_deterministic(self):
        """Test that equal seeds give equal trajectories."""
        a = sample_va_trajectory(SimConfig(), np.random.default_rng(11))
        b = sample_va_trajectory(SimConfig(), np.random.default_rng(11))
        np.testing.assert_array_equal(a, b)

    def test_quadrant_coverage(self):
        """Test that 10k default trajectories put at least 5% of their frames in every quadrant."""
        rng = np.random.default_rng(2024)
        cfg = SimConfig()
        counts = dict.fromkeys(Quadrant, 0)
        for _ in range(10_000):
            traj = sample_va_trajectory(cfg, rng)
            pos_v, pos_a = traj[:, 0] >= 0.0, traj[:, 1] >= 0.0
            counts[Quadrant.Q1] += int(np.sum(pos_v & pos_a))
            counts[Quadrant.Q2] += int(np.sum(~pos_v & pos_a))
            counts[Quadrant.Q3] += int(np.sum(~pos_v & ~pos_a))
            counts[Quadrant.Q4] += int(np.sum(pos_v & ~pos_a))
        total = sum(counts.values())
        self.assertEqual(total, 10_000 * cfg.clip_len_frames)
        for quadrant, count in counts.items():
            self.assertGreaterEqual(count / total, 0.05, quadrant)

    def test_points(self):
        """Test conversion of a trajectory to VA points."""
        traj = sample_va_trajectory(SimConfig(clip_len_frames=4), np.random.default_rng(2))
        points = trajectory_points(traj)
        self.assertEqual(len(points), 4)
        self.assertEqual(points[2].as_tuple(), (traj[2, 0], traj[2, 1]))


class TestGenerativeMap(unittest.TestCase):
    """Tests for the VA -> AU -> landmark map."""

    def test_deterministic(self):
        """Test that the map depends only on the seed."""
        a, b = build_generative_map(5), build_generative_map(5)
        np.testing.assert_array_equal(a.au_gains, b.au_gains)
        self.assertFalse(np.array_equal(a.au_gains, build_generative_map(6).au_gains))

    @settings(deadline=None, max_examples=100)
    @given(
        st.integers(min_value=0, max_value=10_000),
        st.floats(min_value=-1.0, max_value=1.0, allow_nan=False),
        st.floats(min_value=-1.0, max_value=1.0, allow_nan=False),
    )
    def test_noise_free_intensities_inside_range(self, seed, v, a):
        """Test that noise-free AU intensities never reach the clipping bounds."""
        aus = build_generative_map(seed).au_pre_clip(np.array([[v, a]]))
        self.assertTrue(np.all(aus > 0.0))
        self.assertTrue(np.all(aus < 5.0))

    def test_noise_free_aus_invert_to_trajectory(self):
        """Test that least squares on the AU gains recovers VA from noise-free intensities."""
        cfg = SimConfig(clip_len_frames=200, noise_std=0.0, occlusion_rate=0.0, invalid_rate=0.0)
        for seed in range(5):
            rng = np.random.default_rng(seed)
            gen_map = build_generative_map(seed)
            traj = sample_va_trajectory(cfg, rng)
            trace = synthesize_features(traj, gen_map, cfg, rng)
            aus = np.stack([frame.au_intensities for frame in trace.frames])
            coeffs, _, rank, _ = np.linalg.lstsq(gen_map.au_gains, aus.T, rcond=None)
            self.assertEqual(rank, 4)
            self.assertLessEqual(np.max(np.abs(coeffs[:2].T - traj)), 1e-6)

    def test_capture_scales_baseline_uncertainty(self):
        """Test that a poor capture raises the baseline with the square root of its factor."""
        cfg = SimConfig(clip_len_frames=4, occlusion_rate=0.0, invalid_rate=0.0)
        gen_map = build_generative_map(0)
        trace = synthesize_features(np.zeros((4, 2)), gen_map, cfg, np.random.default_rng(0), capture=4.0)
        for frame in trace.frames:
            np.testing.assert_allclose(frame.landmark_uncertainties, 2.0 * BASELINE_UNCERTAINTY)
        trace = synthesize_features(np.zeros((4, 2)), gen_map, cfg, np.random.default_rng(0), capture=1e6)
        self.assertTrue(np.all(trace.frames[0].landmark_uncertainties == CAPTURE_UNCERTAINTY_MAX))
        with self.assertRaises(ValueError):
            synthesize_features(np.zeros((4, 2)), gen_map, cfg, np.random.default_rng(0), capture=0.5)

    def test_capture_raises_au_noise(self):
        """Test that AU scatter around the noise-free map grows with the capture factor."""
        cfg = SimConfig(clip_len_frames=400, noise_std=0.05, occlusion_rate=0.0, invalid_rate=0.0)
        gen_map = build_generative_map(1)
        traj = np.zeros((400, 2))
        clean = gen_map.au_pre_clip(traj)

        def scatter(capture):
            trace = synthesize_features(traj, gen_map, cfg, np.random.default_rng(9), capture=capture)
            return np.std(np.stack([f.au_intensities for f in trace.frames]) - clean)

        self.assertGreater(scatter(8.0), 4.0 * scatter(1.0))

    def test_generated_capture_inside_range(self):
        """Test that each clip's capture factor lies in the configured range."""
        gen_map = build_generative_map(SMALL.seed)
        low, high = SMALL.capture_noise_range
        captures = [generate_clip(i, SMALL, gen_map).capture for i in range(20)]
        self.assertTrue(all(low <= c <= high for c in captures))
        self.assertGreater(len(set(captures)), 1)

    def test_zero_gains_reproduce_base_shape(self):
        """Test that without gains or noise the face is the neutral shape."""
        base = build_generative_map(0)
        gen_map = GenerativeMap(base.base_shape, np.zeros((15, 4)), base.au_displacements)
        cfg = SimConfig(clip_len_frames=5, noise_std=0.0, occlusion_rate=0.0, invalid_rate=0.0)
        trace = synthesize_features(np.zeros((5, 2)), gen_map, cfg, np.random.default_rng(0))
        for frame in trace.frames:
            self.assertTrue(frame.valid)
            np.testing.assert_array_equal(frame.au_intensities, np.zeros(15))
            np.testing.assert_allclose(frame.landmarks.points, canonical_face().points)
            np.testing.assert_array_equal(frame.landmark_uncertainties, np.full(68, BASELINE_UNCERTAINTY))

    def test_frames_satisfy_contract(self):
        """Test that generated frames pass validation unchanged."""
        cfg = SimConfig(clip_len_frames=60, noise_std=1.0, occlusion_rate=0.5)
        rng = np.random.default_rng(1)
        trace = synthesize_features(sample_va_trajectory(cfg, rng), build_generative_map(1), cfg, rng)
        for frame in trace.frames:
            self.assertIs(validate_frame(frame), frame)

    def test_occlusion_raises_uncertainty(self):
        """Test that occluded regions carry high uncertainty."""
        cfg = SimConfig(clip_len_frames=40, occlusion_rate=1.0)
        rng = np.random.default_rng(2)
        trace = synthesize_features(sample_va_trajectory(cfg, rng), build_generative_map(2), cfg, rng)
        for frame in trace.frames:
            self.assertGreaterEqual(frame.landmark_uncertainties.max(), 0.9)

    def test_profile_pose_self_occlusion(self):
        """Test that a 60 degree yaw marks the far jaw as uncertain."""
        cfg = SimConfig(clip_len_frames=3, occlusion_rate=0.0)
        rng = np.random.default_rng(4)
        trace = synthesize_features(np.zeros((3, 2)), build_generative_map(4), cfg, rng,
                                    pose=PoseBin(yaw_deg=60.0, pitch_deg=0.0))
        u = trace.frames[0].landmark_uncertainties
        self.assertTrue(np.all(u[11:17] == SELF_OCCLUDED_UNCERTAINTY))
        self.assertTrue(np.all(u[0:6] == BASELINE_UNCERTAINTY))


class TestCorruption(unittest.TestCase):
    """Tests for corruption spans."""

    def setUp(self):
        cfg = SimConfig(clip_len_frames=20, invalid_rate=0.0, occlusion_rate=0.0)
        rng = np.random.default_rng(0)
        self.trace = synthesize_features(sample_va_trajectory(cfg, rng), build_generative_map(0), cfg, rng)

    def test_invalid_span(self):
        """Test that only frames inside the span become invalid."""
        out = corrupt(self.trace, [CorruptionSpan(5, 9)])
        self.assertEqual([t for t, f in enumerate(out.frames) if not f.valid], [5, 6, 7, 8])
        self.assertTrue(all(f.valid for f in self.trace.frames))

    def test_occlusion_span(self):
        """Test that occlusion raises only the listed landmarks."""
        out = corrupt(self.trace, [CorruptionSpan(0, 2, CorruptionKind.OCCLUDE, (48, 49))])
        u = out.frames[1].landmark_uncertainties
        self.assertGreaterEqual(u[48], OCCLUDED_UNCERTAINTY)
        self.assertEqual(u[50], BASELINE_UNCERTAINTY)
        self.assertEqual(out.frames[2], self.trace.frames[2])

    def test_span_out_of_range(self):
        """Test that spans past the end are rejected."""
        with self.assertRaises(SpanOutOfRange):
            corrupt(self.trace, [CorruptionSpan(15, 25)])

    def test_random_invalid_spans(self):
        """Test that the requested fraction of frames is corrupted."""
        spans = random_invalid_spans(100, 0.3, np.random.default_rng(0))
        self.assertEqual(len(spans), 30)
        self.assertEqual(len({s.start for s in spans}), 30)


class TestAnnotations(unittest.TestCase):
    """Tests for simulated rater labels."""

    def test_one_label_per_rater(self):
        """Test that each rater gives one label around the ground truth."""
        annotations = simulate_annotations("c1", VAPoint(0.2, -0.3), [0.0, 0.1, 0.2], np.random.default_rng(0))
        self.assertEqual([a.rater_id for a in annotations], ["r1", "r2", "r3"])
        self.assertEqual(annotations[0].va, VAPoint(0.2, -0.3))

    def test_labels_are_clamped(self):
        """Test that noisy labels stay inside the VA plane."""
        annotations = simulate_annotations("c1", VAPoint(1.0, -1.0), [5.0] * 20, np.random.default_rng(1))
        for a in annotations:
            self.assertTrue(-1.0 <= a.va.valence <= 1.0)


class TestDataset(unittest.TestCase):
    """Tests for whole-dataset generation."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def assertSameTree(self, left, right):
        comparison = filecmp.dircmp(left, right)
        self.assertEqual(comparison.left_only, [])
        self.assertEqual(comparison.right_only, [])
        for name in comparison.common_files:
            self.assertTrue(filecmp.cmp(os.path.join(left, name), os.path.join(right, name), shallow=False), name)
        for sub in comparison.common_dirs:
            self.assertSameTree(os.path.join(left, sub), os.path.join(right, sub))

    def test_byte_identical_across_runs_and_threads(self):
        """Test that generation depends only on the configuration."""
        a, b = os.path.join(self.tmp.name, "a"), os.path.join(self.tmp.name, "b")
        simulate_dataset(SMALL, a, threads=1)
        simulate_dataset(SMALL, b, threads=3)
        self.assertSameTree(a, b)

    def test_outputs(self):
        """Test that traces, manifest and annotations are written consistently."""
        out = os.path.join(self.tmp.name, "ds")
        manifest, summary = simulate_dataset(SMALL, out)
        self.assertEqual(len(manifest.clips), 8)
        self.assertTrue(os.path.isfile(os.path.join(out, "annotations.csv")))
        loaded = load_manifest(os.path.join(out, "manifest.yaml"))
        self.assertEqual(loaded.clips, manifest.clips)
        trace = read_trace(os.path.join(out, loaded.clips[0].trace_path))
        self.assertEqual(len(trace), 24)
        self.assertEqual(trace.clip_id, loaded.clips[0].clip_id)
        self.assertEqual(sum(summary.split_counts.values()), 8)
        self.assertEqual(sum(summary.quadrant_counts.values()), 8)

    def test_label_is_trajectory_mean(self):
        """Test that the clip label is the mean of its trajectory."""
        gen_map = build_generative_map(SMALL.seed)
        clip = generate_clip(3, SMALL, gen_map)
        mean = clip.trajectory.mean(axis=0)
        self.assertAlmostEqual(clip.label.valence, mean[0], places=6)
        self.assertAlmostEqual(clip.label.arousal, mean[1], places=6)
        self.assertEqual(len(clip.annotations), SMALL.n_raters)

    def test_clip_independent_of_dataset_size(self):
        """Test that clip k is the same whatever the number of clips."""
        gen_map = build_generative_map(SMALL.seed)
        bigger = SMALL.model_copy(update={"n_clips": 50})
        self.assertEqual(generate_clip(2, SMALL, gen_map).trace, generate_clip(2, bigger, gen_map).trace)

    def test_subject_independent_splits(self):
        """Test that every subject lands in exactly one split."""
        splits = assign_splits(20, (0.7, 0.1, 0.2), seed=1)
        self.assertEqual(splits.count(Split.TRAIN), 14)
        self.assertEqual(splits.count(Split.VAL), 2)
        self.assertEqual(splits.count(Split.TEST), 4)

    def test_summary_quadrants(self):
        """Test that quadrant coverage counts each labelled clip once."""
        out = os.path.join(self.tmp.name, "ds")
        manifest, _ = simulate_dataset(SMALL, out)
        summary = summarize_labels(manifest)
        self.assertEqual(summary.n_clips, 8)
        self.assertTrue(any(line.startswith("quadrant coverage") for line in summary.lines()))


if __name__ == "__main__":
    unittest.main()
