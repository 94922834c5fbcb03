"""
Input Validation Module

Provides validation utilities for the affect pipeline to ensure the per-frame
descriptors and user-supplied values respect their range contracts before they
reach normalization, training or evaluation.
"""
from typing import Iterable, List, Optional, Sequence
import math
import os

import numpy as np

from affect_types import (
    AU_MAX,
    N_AUS,
    N_LANDMARKS,
    FrameFeatures,
    Landmarks68,
)


class ValidationError(Exception):
    """Custom exception for validation errors."""
    pass


class NonFiniteValue(ValidationError):
    """A NaN or infinite value was found in a frame field."""

    def __init__(self, field: str, index: int) -> None:
        self.field = field
        self.index = index
        super().__init__(f"Non-finite value in '{field}' at index {index}")


class WrongArity(ValidationError):
    """A frame field has the wrong number of values."""

    def __init__(self, field: str, expected: int, got: int) -> None:
        self.field = field
        self.expected = expected
        self.got = got
        super().__init__(f"Field '{field}' expects {expected} values, got {got}")


class RangeError(ValidationError):
    """A value lies outside its permitted interval."""
    pass


class InputValidator:
    """Validates frames, value ranges and output locations."""

    # Range contracts of the tracker outputs
    MIN_UNCERTAINTY = 0.0
    MAX_UNCERTAINTY = 1.0
    MIN_AU = 0.0
    MAX_AU = AU_MAX

    @staticmethod
    def _check_finite(field: str, values: np.ndarray) -> None:
        bad = np.flatnonzero(~np.isfinite(values.ravel()))
        if bad.size:
            index = int(bad[0])
            # report the point index for landmark pairs
            if field == "landmarks":
                index //= 2
            raise NonFiniteValue(field, index)

    @staticmethod
    def validate_frame(raw: FrameFeatures) -> FrameFeatures:
        """
        Validate one frame of descriptors.

        Args:
            raw: Frame as delivered by a tracker or a parser

        Returns:
            Frame with AU intensities clipped to [0, 5] and landmark
            uncertainties clipped to [0, 1]

        Raises:
            WrongArity: If a field has the wrong number of values
            NonFiniteValue: If any value is NaN or infinite
        """
        points = np.asarray(raw.landmarks.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2:
            raise WrongArity("landmarks", N_LANDMARKS, points.size // 2 if points.ndim else 0)
        if points.shape[0] != N_LANDMARKS:
            raise WrongArity("landmarks", N_LANDMARKS, points.shape[0])

        uncertainties = np.asarray(raw.landmark_uncertainties, dtype=np.float64).ravel()
        if uncertainties.size != N_LANDMARKS:
            raise WrongArity("landmark_uncertainties", N_LANDMARKS, uncertainties.size)

        aus = np.asarray(raw.au_intensities, dtype=np.float64).ravel()
        if aus.size != N_AUS:
            raise WrongArity("au_intensities", N_AUS, aus.size)

        if raw.frame_index < 0:
            raise RangeError(f"Frame index cannot be negative: {raw.frame_index}")

        InputValidator._check_finite("landmarks", points)
        InputValidator._check_finite("landmark_uncertainties", uncertainties)
        InputValidator._check_finite("au_intensities", aus)

        clipped_u = np.clip(uncertainties, InputValidator.MIN_UNCERTAINTY, InputValidator.MAX_UNCERTAINTY)
        clipped_au = np.clip(aus, InputValidator.MIN_AU, InputValidator.MAX_AU)

        # unchanged frames are returned as-is so validation stays idempotent and cheap
        if np.array_equal(clipped_u, raw.landmark_uncertainties) and np.array_equal(clipped_au, raw.au_intensities):
            return raw

        return FrameFeatures(
            frame_index=raw.frame_index,
            valid=raw.valid,
            landmarks=Landmarks68(points),
            landmark_uncertainties=clipped_u,
            au_intensities=clipped_au,
        )

    @staticmethod
    def validate_va_value(name: str, value: float) -> float:
        """Check that a valence or arousal value lies in [-1, 1]."""
        value = float(value)
        if not math.isfinite(value) or not -1.0 <= value <= 1.0:
            raise RangeError(f"{name} must be in [-1, 1], got {value}")
        return value

    @staticmethod
    def validate_percentages(values: Iterable[float]) -> List[float]:
        """
        Validate leave-N-in percentages.

        Args:
            values: Percentages, each in (0, 100]

        Returns:
            Percentages as floats, in the given order

        Raises:
            ValidationError: If the list is empty or a value is out of range
        """
        result = [float(v) for v in values]
        if not result:
            raise ValidationError("At least one percentage is required")
        for v in result:
            if not 0.0 < v <= 100.0:
                raise RangeError(f"Percentage must be in (0, 100], got {v}")
        return result

    @staticmethod
    def parse_int_list(text: str) -> List[int]:
        """Parse a comma-separated list of integers such as '25,50,75,100'."""
        try:
            return [int(part) for part in text.split(",") if part.strip()]
        except ValueError:
            raise ValidationError(f"Expected a comma-separated list of integers, got '{text}'")

    @staticmethod
    def validate_output_dir(path: str) -> str:
        """
        Validate an output directory and create it when missing.

        Raises:
            ValidationError: If the path is empty or names an existing file
        """
        if not path or not isinstance(path, str):
            raise ValidationError("Output path must be a non-empty string")
        normalized_path = os.path.normpath(path)
        if os.path.exists(normalized_path) and not os.path.isdir(normalized_path):
            raise ValidationError(f"Output path is not a directory: {normalized_path}")
        os.makedirs(normalized_path, exist_ok=True)
        return normalized_path

    @staticmethod
    def validate_existing_file(path: str, suffixes: Optional[Sequence[str]] = None) -> str:
        """Check that ``path`` exists and, optionally, has one of ``suffixes``."""
        if not path or not os.path.isfile(path):
            raise FileNotFoundError(f"File not found: {path}")
        if suffixes:
            _, ext = os.path.splitext(path.lower())
            if ext not in suffixes:
                raise ValidationError(f"Invalid file extension: {ext}. Allowed: {', '.join(suffixes)}")
        return os.path.normpath(path)


# Global validator instance
validator = InputValidator()

validate_frame = validator.validate_frame
