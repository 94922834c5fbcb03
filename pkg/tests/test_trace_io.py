#!/usr/bin/env python3
"""
Tests for the trace I/O module.

Tests parsing and canonical writing of feature traces, annotation CSVs,
dataset manifests and prediction CSVs.
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import json
import tempfile
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from affect_types import AffectOutput, FrameFeatures, Landmarks68, UncertaintyTriple, VAPoint
from input_validator import RangeError
from simulator import canonical_face
from trace_io import (
    ArityError,
    ClipAnnotation,
    ClipLabel,
    DatasetManifest,
    DuplicateAnnotation,
    FeatureTrace,
    ManifestClip,
    ManifestError,
    NonMonotoneFrameIndex,
    ParseError,
    PoseBin,
    PredictionTrace,
    Split,
    fmt,
    group_by_clip,
    parse_annotations,
    parse_manifest,
    parse_predictions,
    parse_trace,
    read_predictions,
    read_trace,
    resolve_trace_path,
    save_predictions,
    save_trace,
    write_annotations,
    write_manifest,
    write_predictions,
    write_trace,
)


def frame_record(i, valid=1, n_points=68, lmu=0.05, au=1.0):
    points = canonical_face().points[:n_points].tolist()
    return {"i": i, "valid": valid, "lm": points, "lmu": [lmu] * 68, "au": [au] * 15}


def trace_text(records, header=True):
    lines = [json.dumps({"clip_id": "c1", "fps": 25.0})] if header else []
    lines += [json.dumps(r) for r in records]
    return "\n".join(lines) + "\n"


def make_output(v, a, frame):
    return AffectOutput(
        va=VAPoint(v, a),
        uncertainty_valence=UncertaintyTriple(0.1, 0.2, 0.3),
        uncertainty_arousal=UncertaintyTriple(0.4, 0.5, 0.6),
        frame_index=frame,
    )


class TestFormatting(unittest.TestCase):
    """Tests for canonical number rendering."""

    def test_six_digits(self):
        """Test that numbers are printed with 6 fractional digits."""
        self.assertEqual(fmt(0.5), "0.500000")
        self.assertEqual(fmt(1 / 3), "0.333333")

    def test_negative_zero(self):
        """Test that negative zero is written as zero."""
        self.assertEqual(fmt(-0.0), "0.000000")
        self.assertEqual(fmt(-1e-9), "0.000000")


class TestFeatureTrace(unittest.TestCase):
    """Tests for feature trace parsing and writing."""

    def test_parse_header_and_frames(self):
        """Test that the header line sets clip metadata."""
        trace = parse_trace(trace_text([frame_record(0), frame_record(1, valid=0)]))
        self.assertEqual(trace.clip_id, "c1")
        self.assertEqual(trace.fps, 25.0)
        self.assertEqual(len(trace), 2)
        self.assertFalse(trace.frames[1].valid)

    def test_write_is_a_fixpoint(self):
        """Test that writing a parsed trace reproduces its bytes."""
        data = write_trace(parse_trace(trace_text([frame_record(0), frame_record(1, au=2.123456789)])))
        self.assertEqual(write_trace(parse_trace(data)), data)

    def test_values_are_clipped_on_parse(self):
        """Test that parsed frames go through validation."""
        trace = parse_trace(trace_text([frame_record(0, lmu=1.5, au=6.0)]))
        self.assertEqual(trace.frames[0].landmark_uncertainties.max(), 1.0)
        self.assertEqual(trace.frames[0].au_intensities.max(), 5.0)

    def test_wrong_landmark_count(self):
        """Test that 67 landmarks is an arity error with the line number."""
        with self.assertRaises(ArityError) as ctx:
            parse_trace(trace_text([frame_record(0), frame_record(1, n_points=67)]))
        self.assertEqual(ctx.exception.line, 3)

    def test_frames_must_start_at_zero(self):
        """Test that the first frame index is 0."""
        with self.assertRaises(NonMonotoneFrameIndex):
            parse_trace(trace_text([frame_record(1)]))

    def test_frames_must_increase(self):
        """Test that repeated frame indices are rejected."""
        with self.assertRaises(NonMonotoneFrameIndex):
            parse_trace(trace_text([frame_record(0), frame_record(2), frame_record(2)]))

    def test_gaps_allowed(self):
        """Test that frame indices may skip values."""
        trace = parse_trace(trace_text([frame_record(0), frame_record(5)]))
        self.assertEqual([f.frame_index for f in trace.frames], [0, 5])

    def test_bad_json(self):
        """Test that malformed lines are parse errors."""
        with self.assertRaises(ParseError) as ctx:
            parse_trace("{not json}\n")
        self.assertEqual(ctx.exception.line, 1)

    def test_nan_is_parse_error(self):
        """Test that non-finite values surface as parse errors."""
        record = frame_record(0)
        record["au"][3] = float("nan")
        with self.assertRaises(ParseError):
            parse_trace(trace_text([record]))

    def test_missing_field(self):
        """Test that records need every field."""
        record = frame_record(0)
        del record["lmu"]
        with self.assertRaises(ParseError):
            parse_trace(trace_text([record]))

    def test_read_uses_stem_without_header(self):
        """Test that a headerless file takes its clip id from the file name."""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "clip42.jsonl")
            with open(path, "w") as fh:
                fh.write(trace_text([frame_record(0)], header=False))
            self.assertEqual(read_trace(path).clip_id, "clip42")

    def test_fractional_frame_index(self):
        """Test that a non-integral frame index is rejected rather than truncated."""
        with self.assertRaises(ParseError) as ctx:
            parse_trace(trace_text([frame_record(0), frame_record(1.5)]))
        self.assertEqual(ctx.exception.line, 3)

    def test_integral_float_frame_index(self):
        """Test that 2.0 is read as frame 2."""
        trace = parse_trace(trace_text([frame_record(0), frame_record(2.0)]))
        self.assertEqual(trace.frames[1].frame_index, 2)

    def test_non_numeric_frame_index(self):
        """Test that boolean and string frame indices are rejected."""
        for index in (True, "1"):
            with self.assertRaises(ParseError):
                parse_trace(trace_text([frame_record(0), frame_record(index)]))

    def test_invalid_utf8(self):
        """Test that undecodable bytes are a parse error at their line and offset."""
        with self.assertRaises(ParseError) as ctx:
            parse_trace(b'{"clip_id":"c\xff","fps":30}\n')
        self.assertEqual(ctx.exception.line, 1)
        self.assertIn("byte offset 13", str(ctx.exception))

    def test_invalid_utf8_after_first_line(self):
        """Test that the reported line counts the newlines before the bad byte."""
        data = trace_text([frame_record(0)]).encode("utf-8") + b'{"i":1,"valid":\xfe}\n'
        with self.assertRaises(ParseError) as ctx:
            parse_trace(data)
        self.assertEqual(ctx.exception.line, 3)

    def test_save_and_read(self):
        """Test that a saved trace reads back equal."""
        frame = FrameFeatures(0, True, canonical_face(), np.full(68, 0.25), np.linspace(0, 5, 15))
        trace = FeatureTrace("clip7", 30.0, [frame])
        with tempfile.TemporaryDirectory() as tmp:
            path = save_trace(trace, os.path.join(tmp, "traces", "clip7.jsonl"))
            self.assertEqual(read_trace(path), parse_trace(write_trace(trace)))


class TestAnnotations(unittest.TestCase):
    """Tests for annotation CSVs."""

    HEADER = "clip_id,rater_id,valence,arousal\n"

    def test_parse(self):
        """Test a well-formed annotation file."""
        annotations = parse_annotations(self.HEADER + "c1,r1,0.5,-0.25\nc1,r2,0.4,-0.2\nc2,r1,0,0\n")
        self.assertEqual(len(annotations), 3)
        self.assertEqual(annotations[0].va, VAPoint(0.5, -0.25))
        grouped = group_by_clip(annotations)
        self.assertEqual(list(grouped), ["c1", "c2"])
        self.assertEqual(len(grouped["c1"]), 2)

    def test_out_of_range(self):
        """Test that a value above 1 is a range error."""
        with self.assertRaises(RangeError):
            parse_annotations(self.HEADER + "c1,r1,1.5,0.0\n")

    def test_duplicate(self):
        """Test that a repeated (clip, rater) pair is rejected."""
        with self.assertRaises(DuplicateAnnotation) as ctx:
            parse_annotations(self.HEADER + "c1,r1,0.1,0.1\nc1,r1,0.2,0.2\n")
        self.assertEqual(ctx.exception.line, 3)

    def test_missing_header(self):
        """Test that the header is required."""
        with self.assertRaises(ParseError):
            parse_annotations("c1,r1,0.1,0.1\n")

    def test_invalid_utf8(self):
        """Test that undecodable bytes in an annotation file are a parse error."""
        with self.assertRaises(ParseError) as ctx:
            parse_annotations(self.HEADER.encode("utf-8") + b"c\xff,r1,0.1,0.1\n")
        self.assertEqual(ctx.exception.line, 2)

    def test_write_is_a_fixpoint(self):
        """Test that writing parsed annotations reproduces the bytes."""
        data = write_annotations([ClipAnnotation("c1", "r1", VAPoint(0.1234567, -0.5))])
        self.assertEqual(write_annotations(parse_annotations(data)), data)


class TestManifest(unittest.TestCase):
    """Tests for dataset manifests."""

    def make_manifest(self):
        return DatasetManifest(clips=[
            ManifestClip(clip_id="a", trace_path="traces/a.jsonl", split=Split.TRAIN, subject_id="s1",
                         pose_bin=PoseBin(yaw_deg=30.0, pitch_deg=0.0), label=ClipLabel(valence=0.5, arousal=-0.5)),
            ManifestClip(clip_id="b", trace_path="traces/b.jsonl", split=Split.TEST, subject_id="s2"),
        ])

    def test_round_trip(self):
        """Test that a written manifest parses back to the same clips."""
        manifest = self.make_manifest()
        parsed = parse_manifest(write_manifest(manifest))
        self.assertEqual(parsed.clips, manifest.clips)
        self.assertEqual(write_manifest(parsed), write_manifest(manifest))

    def test_subject_in_two_splits(self):
        """Test that subject-independent splits are enforced."""
        text = (
            "clips:\n"
            "- {clip_id: a, trace_path: a.jsonl, split: train, subject_id: s1}\n"
            "- {clip_id: b, trace_path: b.jsonl, split: test, subject_id: s1}\n"
        )
        with self.assertRaises(ManifestError):
            parse_manifest(text)

    def test_duplicate_clip(self):
        """Test that clip ids are unique."""
        text = (
            "clips:\n"
            "- {clip_id: a, trace_path: a.jsonl, split: train, subject_id: s1}\n"
            "- {clip_id: a, trace_path: b.jsonl, split: train, subject_id: s1}\n"
        )
        with self.assertRaises(ManifestError):
            parse_manifest(text)

    def test_label_range(self):
        """Test that labels outside [-1, 1] are rejected."""
        text = "clips:\n- {clip_id: a, trace_path: a.jsonl, split: train, subject_id: s1, label: {valence: 2, arousal: 0}}\n"
        with self.assertRaises(ManifestError):
            parse_manifest(text)

    def test_in_split_and_pose_name(self):
        """Test split filtering and pose bin naming."""
        manifest = self.make_manifest()
        self.assertEqual([c.clip_id for c in manifest.in_split("test")], ["b"])
        self.assertEqual(manifest.clips[0].pose_bin.name, "yaw+30_pitch+0")
        self.assertEqual(PoseBin(yaw_deg=0, pitch_deg=0).name, "frontal")

    def test_relative_trace_path(self):
        """Test that trace paths resolve against the manifest directory."""
        clip = self.make_manifest().clips[0]
        path = resolve_trace_path("/data/set/manifest.yaml", clip)
        self.assertEqual(path, os.path.join("/data/set", "traces/a.jsonl"))


class TestPredictions(unittest.TestCase):
    """Tests for prediction CSVs."""

    def test_header_and_rows(self):
        """Test the column layout of a prediction file."""
        data = write_predictions(PredictionTrace("c1", [make_output(0.5, -0.25, 0), make_output(0.0, 0.0, 1)]))
        lines = data.decode().splitlines()
        self.assertEqual(lines[0], "frame,valence,arousal,u_epi_v,u_ale_v,u_cum_v,u_epi_a,u_ale_a,u_cum_a")
        self.assertEqual(lines[1], "0,0.500000,-0.250000,0.100000,0.200000,0.300000,0.400000,0.500000,0.600000")
        self.assertEqual(len(lines), 3)

    def test_write_is_a_fixpoint(self):
        """Test that writing parsed predictions reproduces the bytes."""
        data = write_predictions(PredictionTrace("c1", [make_output(1 / 3, -2 / 3, 0), make_output(0.1, 0.2, 4)]))
        self.assertEqual(write_predictions(parse_predictions(data)), data)

    def test_as_array(self):
        """Test the numeric view of a prediction trace."""
        trace = PredictionTrace("c1", [make_output(0.5, -0.25, 0)])
        np.testing.assert_allclose(trace.as_array(), [[0.5, -0.25, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6]])

    def test_out_of_range_value(self):
        """Test that an uncertainty above 1 is a parse error."""
        data = "frame,valence,arousal,u_epi_v,u_ale_v,u_cum_v,u_epi_a,u_ale_a,u_cum_a\n0,0,0,2,0,0,0,0,0\n"
        with self.assertRaises(ParseError):
            parse_predictions(data)

    def test_save_and_read(self):
        """Test that the clip id comes from the file name."""
        with tempfile.TemporaryDirectory() as tmp:
            path = save_predictions(PredictionTrace("c9", [make_output(0.1, 0.1, 0)]), os.path.join(tmp, "c9.csv"))
            trace = read_predictions(path)
            self.assertEqual(trace.clip_id, "c9")
            self.assertEqual(len(trace), 1)


CLIP_IDS = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789_-", min_size=1, max_size=12)
FRAME_STEPS = st.lists(st.integers(min_value=1, max_value=4), min_size=0, max_size=6)
UNIT = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)


class TestRoundTrip(unittest.TestCase):
    """Write-then-parse over generated traces and predictions."""

    @settings(deadline=None, max_examples=50)
    @given(CLIP_IDS, st.sampled_from([25.0, 29.97, 30.0, 60.0]), FRAME_STEPS, st.integers(0, 2**32 - 1))
    def test_trace(self, clip_id, fps, steps, seed):
        """Test that a written trace parses back to its values at 6 digits."""
        rng = np.random.default_rng(seed)
        indices = np.concatenate([[0], np.cumsum(steps)]).astype(int)
        frames = [
            FrameFeatures(int(t), bool(rng.random() < 0.8),
                          Landmarks68(canonical_face().points + rng.normal(0.0, 5.0, size=(68, 2))),
                          rng.uniform(0.0, 1.0, size=68), rng.uniform(0.0, 5.0, size=15))
            for t in indices
        ]
        trace = FeatureTrace(clip_id, fps, frames)
        data = write_trace(trace)
        parsed = parse_trace(data)
        self.assertEqual(parsed.clip_id, clip_id)
        self.assertEqual(parsed.fps, fps)
        self.assertEqual([f.frame_index for f in parsed.frames], list(indices))
        self.assertEqual([f.valid for f in parsed.frames], [f.valid for f in frames])
        for got, want in zip(parsed.frames, frames):
            np.testing.assert_allclose(got.landmarks.points, want.landmarks.points, atol=5.1e-7)
            np.testing.assert_allclose(got.landmark_uncertainties, want.landmark_uncertainties, atol=5.1e-7)
            np.testing.assert_allclose(got.au_intensities, want.au_intensities, atol=5.1e-7)
        self.assertEqual(write_trace(parsed), data)

    @settings(deadline=None, max_examples=50)
    @given(CLIP_IDS, st.lists(st.tuples(
        st.floats(min_value=-1.0, max_value=1.0, allow_nan=False),
        st.floats(min_value=-1.0, max_value=1.0, allow_nan=False),
        st.tuples(UNIT, UNIT, UNIT),
        st.tuples(UNIT, UNIT, UNIT),
    ), min_size=1, max_size=8))
    def test_predictions(self, clip_id, rows):
        """Test that written predictions parse back to their values at 6 digits."""
        records = [
            AffectOutput(VAPoint(v, a), UncertaintyTriple(*uv), UncertaintyTriple(*ua), frame_index=t)
            for t, (v, a, uv, ua) in enumerate(rows)
        ]
        data = write_predictions(PredictionTrace(clip_id, records))
        parsed = parse_predictions(data, clip_id=clip_id)
        self.assertEqual(parsed.clip_id, clip_id)
        self.assertEqual([r.frame_index for r in parsed.records], list(range(len(rows))))
        np.testing.assert_allclose(parsed.as_array(), PredictionTrace(clip_id, records).as_array(), atol=5.1e-7)
        self.assertEqual(write_predictions(parsed), data)


if __name__ == "__main__":
    unittest.main()
