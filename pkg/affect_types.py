"""
Affect Domain Types

Value types shared by every stage of the affect pipeline: per-frame facial
low-level descriptors, valence/arousal points, uncertainty triples and the
per-frame affect output, plus the geometry of the VA plane (quadrants and
uniform grid bins).

Constructors only coerce shapes and dtypes. Range checking and clipping of raw
frames is done by ``input_validator.validate_frame``.
"""
from typing import Optional, Tuple
from dataclasses import dataclass
from enum import Enum
import math

import numpy as np


N_LANDMARKS = 68
N_AUS = 15
FEATURE_DIM = 2 * N_LANDMARKS + N_LANDMARKS + N_AUS  # 219

AU_MAX = 5.0

# FACS codes of the 15 AU intensity channels, in channel order
AU_CODES: Tuple[str, ...] = (
    "01", "02", "04", "05", "06", "07", "09", "10",
    "12", "14", "15", "17", "23", "25", "45",
)

# iBUG-68 outer eye corners (points 37 and 46, 1-indexed)
LEFT_EYE_OUTER = 36
RIGHT_EYE_OUTER = 45


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Landmarks68:
    """68 iBUG landmark points in pixel coordinates, shape (68, 2)."""
    points: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", _frozen_array(self.points))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Landmarks68):
            return NotImplemented
        return np.array_equal(self.points, other.points)

    __hash__ = None  # type: ignore[assignment]

    @property
    def inter_ocular(self) -> float:
        """Distance between the outer eye corners."""
        return float(np.linalg.norm(self.points[LEFT_EYE_OUTER] - self.points[RIGHT_EYE_OUTER]))


@dataclass(frozen=True, eq=False)
class FrameFeatures:
    """One frame of low-level descriptors as produced by the face tracker."""
    frame_index: int
    valid: bool
    landmarks: Landmarks68
    landmark_uncertainties: np.ndarray
    au_intensities: np.ndarray

    def __post_init__(self) -> None:
        if not isinstance(self.landmarks, Landmarks68):
            object.__setattr__(self, "landmarks", Landmarks68(self.landmarks))
        object.__setattr__(self, "frame_index", int(self.frame_index))
        object.__setattr__(self, "valid", bool(self.valid))
        object.__setattr__(self, "landmark_uncertainties", _frozen_array(self.landmark_uncertainties))
        object.__setattr__(self, "au_intensities", _frozen_array(self.au_intensities))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FrameFeatures):
            return NotImplemented
        return (
            self.frame_index == other.frame_index
            and self.valid == other.valid
            and self.landmarks == other.landmarks
            and np.array_equal(self.landmark_uncertainties, other.landmark_uncertainties)
            and np.array_equal(self.au_intensities, other.au_intensities)
        )

    __hash__ = None  # type: ignore[assignment]

    def replace(self, **changes) -> "FrameFeatures":
        """Return a copy with the given fields replaced."""
        fields = {
            "frame_index": self.frame_index,
            "valid": self.valid,
            "landmarks": self.landmarks,
            "landmark_uncertainties": self.landmark_uncertainties,
            "au_intensities": self.au_intensities,
        }
        fields.update(changes)
        return FrameFeatures(**fields)


@dataclass(frozen=True)
class VAPoint:
    """A point in the valence/arousal plane, both components in [-1, 1]."""
    valence: float
    arousal: float

    def __post_init__(self) -> None:
        for name in ("valence", "arousal"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or not -1.0 <= value <= 1.0:
                raise ValueError(f"{name} must be a finite value in [-1, 1], got {value}")
            object.__setattr__(self, name, value)

    @classmethod
    def clamped(cls, valence: float, arousal: float) -> "VAPoint":
        """Build a point, clamping each component into [-1, 1]."""
        return cls(_clamp(valence, -1.0, 1.0), _clamp(arousal, -1.0, 1.0))

    def as_tuple(self) -> Tuple[float, float]:
        return (self.valence, self.arousal)


@dataclass(frozen=True)
class UncertaintyTriple:
    """Squashed epistemic, aleatoric and cumulative uncertainty, each in [0, 1]."""
    epistemic: float
    aleatoric: float
    cumulative: float

    def __post_init__(self) -> None:
        for name in ("epistemic", "aleatoric", "cumulative"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} uncertainty must be in [0, 1], got {value}")
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class AffectOutput:
    """Per-frame VA prediction with one uncertainty triple per dimension."""
    va: VAPoint
    uncertainty_valence: UncertaintyTriple
    uncertainty_arousal: UncertaintyTriple
    frame_index: Optional[int] = None


class Quadrant(str, Enum):
    """Emotion quadrants of the VA plane."""
    Q1 = "Q1"  # +V +A
    Q2 = "Q2"  # -V +A
    Q3 = "Q3"  # -V -A
    Q4 = "Q4"  # +V -A


@dataclass(frozen=True)
class GridBin:
    """Cell of a uniform R x R grid over [-1, 1]^2; row indexes arousal, col valence."""
    row: int
    col: int


def _clamp(value: float, low: float, high: float) -> float:
    return min(high, max(low, float(value)))


def quadrant_of(point: VAPoint) -> Quadrant:
    """Sign-based quadrant; zero counts as positive on both axes."""
    positive_v = point.valence >= 0.0
    positive_a = point.arousal >= 0.0
    if positive_a:
        return Quadrant.Q1 if positive_v else Quadrant.Q2
    return Quadrant.Q4 if positive_v else Quadrant.Q3


def axis_bin(value: float, resolution: int) -> int:
    """Half-open bin index of ``value`` in [-1, 1]; 1.0 falls into the last bin."""
    if resolution < 1:
        raise ValueError(f"Grid resolution must be >= 1, got {resolution}")
    index = int(math.floor((float(value) + 1.0) / 2.0 * resolution))
    return min(max(index, 0), resolution - 1)


def grid_bin_of(point: VAPoint, resolution: int) -> GridBin:
    """Map a VA point to its cell in the uniform ``resolution`` x ``resolution`` grid."""
    return GridBin(row=axis_bin(point.arousal, resolution), col=axis_bin(point.valence, resolution))


def quadrant_of_bin(cell: GridBin) -> Quadrant:
    """Quadrant covered by a cell of the 2 x 2 grid."""
    return quadrant_of(VAPoint(0.5 if cell.col == 1 else -0.5, 0.5 if cell.row == 1 else -0.5))


def bin_edges(resolution: int) -> np.ndarray:
    """The ``resolution + 1`` edges of the uniform partition of [-1, 1]."""
    return np.linspace(-1.0, 1.0, resolution + 1)
