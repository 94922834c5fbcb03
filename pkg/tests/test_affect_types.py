#!/usr/bin/env python3
"""
Tests for the affect domain types.

Covers VA point construction, uncertainty triples, frame equality and the
VA-plane geometry helpers (quadrants and grid bins).
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from affect_types import (
    FEATURE_DIM,
    FrameFeatures,
    GridBin,
    Landmarks68,
    Quadrant,
    UncertaintyTriple,
    VAPoint,
    axis_bin,
    bin_edges,
    grid_bin_of,
    quadrant_of,
    quadrant_of_bin,
)


def make_frame(index=0, valid=True):
    points = np.column_stack([np.linspace(0, 67, 68), np.linspace(10, 77, 68)])
    return FrameFeatures(index, valid, Landmarks68(points), np.full(68, 0.05), np.full(15, 1.0))


class TestVAPoint(unittest.TestCase):
    """Tests for VAPoint."""

    def test_feature_dimension(self):
        """Test that a frame vector holds 136 coordinates, 68 uncertainties and 15 AUs."""
        self.assertEqual(FEATURE_DIM, 219)

    def test_out_of_range_rejected(self):
        """Test that components outside [-1, 1] are rejected."""
        with self.assertRaises(ValueError):
            VAPoint(1.2, 0.0)
        with self.assertRaises(ValueError):
            VAPoint(0.0, float("nan"))

    def test_clamped(self):
        """Test that clamped construction saturates at the plane boundary."""
        point = VAPoint.clamped(1.7, -3.0)
        self.assertEqual(point.as_tuple(), (1.0, -1.0))

    def test_boundaries_accepted(self):
        """Test that the plane corners are valid points."""
        self.assertEqual(VAPoint(-1.0, 1.0).as_tuple(), (-1.0, 1.0))


class TestUncertaintyTriple(unittest.TestCase):
    """Tests for UncertaintyTriple."""

    def test_range(self):
        """Test that values outside [0, 1] are rejected."""
        with self.assertRaises(ValueError):
            UncertaintyTriple(-0.1, 0.2, 0.3)
        with self.assertRaises(ValueError):
            UncertaintyTriple(0.1, 0.2, 1.5)

    def test_values_stored_as_float(self):
        """Test that components are coerced to float."""
        triple = UncertaintyTriple(0, 1, 1)
        self.assertIsInstance(triple.epistemic, float)


class TestFrameFeatures(unittest.TestCase):
    """Tests for FrameFeatures."""

    def test_equality_by_value(self):
        """Test that frames compare by content."""
        self.assertEqual(make_frame(), make_frame())
        self.assertNotEqual(make_frame(), make_frame(valid=False))

    def test_arrays_are_read_only(self):
        """Test that a frame's arrays cannot be changed in place."""
        frame = make_frame()
        with self.assertRaises(ValueError):
            frame.au_intensities[0] = 3.0
        with self.assertRaises(ValueError):
            frame.landmarks.points[0, 0] = 3.0

    def test_replace(self):
        """Test that replace returns a modified copy."""
        frame = make_frame()
        other = frame.replace(valid=False)
        self.assertTrue(frame.valid)
        self.assertFalse(other.valid)
        self.assertEqual(other.landmarks, frame.landmarks)

    def test_inter_ocular(self):
        """Test the outer eye corner distance."""
        points = np.zeros((68, 2))
        points[36] = (100.0, 50.0)
        points[45] = (160.0, 50.0)
        self.assertAlmostEqual(Landmarks68(points).inter_ocular, 60.0)


class TestQuadrants(unittest.TestCase):
    """Tests for quadrant assignment."""

    def test_signs(self):
        """Test each quadrant by the signs of valence and arousal."""
        self.assertEqual(quadrant_of(VAPoint(0.5, 0.5)), Quadrant.Q1)
        self.assertEqual(quadrant_of(VAPoint(-0.5, 0.5)), Quadrant.Q2)
        self.assertEqual(quadrant_of(VAPoint(-0.5, -0.5)), Quadrant.Q3)
        self.assertEqual(quadrant_of(VAPoint(0.5, -0.5)), Quadrant.Q4)

    def test_zero_counts_as_positive(self):
        """Test that the origin belongs to Q1."""
        self.assertEqual(quadrant_of(VAPoint(0.0, 0.0)), Quadrant.Q1)
        self.assertEqual(quadrant_of(VAPoint(0.0, -0.1)), Quadrant.Q4)

    def test_two_by_two_grid_matches_quadrants(self):
        """Test that the 2 x 2 grid cells cover the quadrants."""
        for v in (-0.9, -0.1, 0.0, 0.4, 1.0):
            for a in (-1.0, -0.3, 0.0, 0.6):
                point = VAPoint(v, a)
                self.assertEqual(quadrant_of_bin(grid_bin_of(point, 2)), quadrant_of(point))


class TestGridBins(unittest.TestCase):
    """Tests for the uniform grid."""

    def test_half_open_bins(self):
        """Test that bins are half-open and 1.0 falls into the last bin."""
        self.assertEqual(axis_bin(-1.0, 8), 0)
        self.assertEqual(axis_bin(-0.75, 8), 1)
        self.assertEqual(axis_bin(0.0, 8), 4)
        self.assertEqual(axis_bin(1.0, 8), 7)

    def test_row_is_arousal(self):
        """Test that rows index arousal and columns valence."""
        self.assertEqual(grid_bin_of(VAPoint(0.9, -0.9), 4), GridBin(row=0, col=3))

    def test_invalid_resolution(self):
        """Test that a zero resolution is rejected."""
        with self.assertRaises(ValueError):
            axis_bin(0.0, 0)

    def test_edges(self):
        """Test the grid edges."""
        np.testing.assert_allclose(bin_edges(4), [-1.0, -0.5, 0.0, 0.5, 1.0])

    @settings(deadline=None, max_examples=200)
    @given(
        st.floats(min_value=-1.0, max_value=1.0, allow_nan=False),
        st.integers(min_value=1, max_value=32),
    )
    def test_value_inside_its_bin(self, value, resolution):
        """Test that every value lies inside the edges of its bin."""
        index = axis_bin(value, resolution)
        self.assertTrue(0 <= index < resolution)
        edges = bin_edges(resolution)
        self.assertGreaterEqual(value, edges[index] - 1e-12)
        self.assertLessEqual(value, edges[index + 1] + 1e-12)


if __name__ == "__main__":
    unittest.main()
