"""
Streaming Affect Pipeline

Turns a stream of per-frame descriptors into per-frame valence/arousal with
uncertainty: validity gating, landmark/AU normalization, a sliding window of
the last N feature vectors and one regressor evaluation per frame.

One ``PipelineState`` per stream. A model can be shared by any number of
pipelines; inference never mutates it.
"""
from typing import Callable, Deque, List, Optional
from collections import deque
from dataclasses import dataclass, field
import logging
import time

import numpy as np

from affect_types import AU_MAX, FEATURE_DIM, N_LANDMARKS, AffectOutput, FrameFeatures, Landmarks68
from input_validator import validate_frame
from performance_optimizer import performance_monitor
from regressor import TemporalRegressor, output_from_row
from settings import PipelineConfig, WarmupMode
from trace_io import FeatureTrace, PredictionTrace

logger = logging.getLogger(__name__)

InputTap = Callable[[int, np.ndarray], None]


class PipelineError(Exception):
    """Base class for pipeline errors."""
    pass


class DegenerateShape(PipelineError):
    """All landmarks coincide, so no bounding box exists."""
    pass


class OutOfOrderFrame(PipelineError):
    """A frame arrived with an index not greater than its predecessor's."""
    pass


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0])

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.x_max - self.x_min, self.y_max - self.y_min))

    def contains_points(self, points: np.ndarray) -> bool:
        points = np.asarray(points)
        return bool(
            np.all(points[:, 0] >= self.x_min) and np.all(points[:, 0] <= self.x_max)
            and np.all(points[:, 1] >= self.y_min) and np.all(points[:, 1] <= self.y_max)
        )

    def contains_box(self, other: "BBox") -> bool:
        return (self.x_min <= other.x_min and self.y_min <= other.y_min
                and self.x_max >= other.x_max and self.y_max >= other.y_max)


def compute_bbox(lm: Landmarks68, expand: float = 0.0) -> BBox:
    """
    Tight axis-aligned box around the landmarks, widened on every side by
    ``expand / 2`` of its diagonal.

    Raises:
        DegenerateShape: If every landmark sits on the same point
    """
    if expand < 0:
        raise ValueError(f"expand must be >= 0, got {expand}")
    points = lm.points if isinstance(lm, Landmarks68) else np.asarray(lm, dtype=np.float64)
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    diagonal = float(np.hypot(*(hi - lo)))
    if diagonal == 0.0:
        raise DegenerateShape("All landmarks coincide")
    margin = expand * diagonal / 2.0
    return BBox(float(lo[0] - margin), float(lo[1] - margin), float(hi[0] + margin), float(hi[1] + margin))


def normalize_frame(frame: FrameFeatures) -> np.ndarray:
    """
    The 219-d model input for one frame.

    Invalid frames are gated to all zeros. Otherwise: 136 landmark
    coordinates (x0, y0, x1, y1, ...) centred on the frame's landmark box and
    divided by its diagonal, then the 68 landmark uncertainties, then the 15
    AU intensities divided by 5.

    Raises:
        DegenerateShape: If a valid frame's landmarks all coincide
    """
    vector = np.zeros(FEATURE_DIM)
    if not frame.valid:
        return vector
    box = compute_bbox(frame.landmarks)
    coords = (frame.landmarks.points - box.center) / box.diagonal
    vector[:2 * N_LANDMARKS] = coords.ravel()
    vector[2 * N_LANDMARKS:3 * N_LANDMARKS] = frame.landmark_uncertainties
    vector[3 * N_LANDMARKS:] = frame.au_intensities / AU_MAX
    return vector


@dataclass
class PipelineState:
    """Per-stream state: the feature window and tracking bookkeeping."""
    window_len: int
    buffer: Deque[np.ndarray] = field(default_factory=deque)
    frame_indices: Deque[int] = field(default_factory=deque)
    last_valid_landmarks: Optional[Landmarks68] = None
    tracking_bbox: Optional[BBox] = None
    frames_seen: int = 0
    outputs_emitted: int = 0
    last_frame_index: int = -1
    first_vector: Optional[np.ndarray] = None
    warmup_done: bool = False
    pending: List[AffectOutput] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.buffer = deque(self.buffer, maxlen=self.window_len)
        self.frame_indices = deque(self.frame_indices, maxlen=self.window_len)


def replicate_first_window(vectors: List[np.ndarray], first: np.ndarray, window_len: int) -> np.ndarray:
    """Stack ``vectors``, left-padding with ``first`` up to ``window_len`` rows."""
    missing = window_len - len(vectors)
    rows = [first] * missing + list(vectors) if missing > 0 else list(vectors)
    return np.array(rows)


class AffectPipeline:
    """Per-frame VA estimation over a stream of frame descriptors."""

    def __init__(
        self,
        model: TemporalRegressor,
        config: Optional[PipelineConfig] = None,
        input_tap: Optional[InputTap] = None,
    ) -> None:
        self.model = model
        self.config = config or PipelineConfig()
        self.input_tap = input_tap

    @property
    def warmup(self) -> WarmupMode:
        return WarmupMode(self.config.warmup)

    def new_state(self) -> PipelineState:
        return PipelineState(window_len=self.config.window_len)

    def _features(self, state: PipelineState, frame: FrameFeatures) -> np.ndarray:
        if frame.valid:
            state.last_valid_landmarks = frame.landmarks
            state.tracking_bbox = compute_bbox(frame.landmarks, self.config.bbox_expand)
        else:
            state.tracking_bbox = None
        vector = normalize_frame(frame)
        if self.input_tap is not None:
            self.input_tap(frame.frame_index, vector)
        return vector

    def push_frame(self, state: PipelineState, frame: FrameFeatures) -> List[AffectOutput]:
        """
        Feed one frame; returns the outputs it releases (zero or one).

        ``state`` is updated in place.

        Raises:
            OutOfOrderFrame: If the frame index does not increase
            ValidationError: If the frame violates the descriptor contract
        """
        if frame.frame_index <= state.last_frame_index:
            raise OutOfOrderFrame(f"Frame {frame.frame_index} arrived after frame {state.last_frame_index}")
        frame = validate_frame(frame)
        vector = self._features(state, frame)
        state.last_frame_index = frame.frame_index
        state.frames_seen += 1
        if state.first_vector is None:
            state.first_vector = vector
        state.buffer.append(vector)
        state.frame_indices.append(frame.frame_index)

        n = self.config.window_len
        if self.warmup is WarmupMode.REPLICATE_FIRST:
            window = replicate_first_window(list(state.buffer), state.first_vector, n)
        else:
            if len(state.buffer) < n:
                return []
            window = np.array(state.buffer)
            if not state.warmup_done:
                state.pending = self._warmup_outputs(window, list(state.frame_indices)[:n - 1])
                state.warmup_done = True

        output = output_from_row(self.model.predict_last(window), frame.frame_index)
        state.outputs_emitted += 1
        return [output]

    def _warmup_outputs(self, window: np.ndarray, indices: List[int]) -> List[AffectOutput]:
        if not indices:
            return []
        params = self.model.predict_sequence(window)
        return [output_from_row(params[pos], idx) for pos, idx in enumerate(indices)]

    def flush(self, state: PipelineState) -> List[AffectOutput]:
        """
        Release outputs still held back at the end of the stream.

        Nothing is held under replicate_first. Under emit_after_fill these are
        the warm-up frames, computed from the first full window, or every
        buffered frame when the window never filled.
        """
        if self.warmup is WarmupMode.REPLICATE_FIRST:
            return []
        if not state.warmup_done and state.buffer:
            window = np.array(state.buffer)
            state.pending = self._warmup_outputs(window, list(state.frame_indices))
            state.warmup_done = True
        released, state.pending = state.pending, []
        state.outputs_emitted += len(released)
        return released

    def stream_trace(self, trace: FeatureTrace) -> PredictionTrace:
        """Push every frame of ``trace`` one by one, then flush."""
        state = self.new_state()
        records: List[AffectOutput] = []
        for frame in trace.frames:
            records.extend(self.push_frame(state, frame))
        records.extend(self.flush(state))
        records.sort(key=lambda r: r.frame_index)
        return PredictionTrace(clip_id=trace.clip_id, records=records)

    @performance_monitor.track_operation("process_trace")
    def process_trace(self, trace: FeatureTrace) -> PredictionTrace:
        """
        Batch inference over a whole trace.

        Gives the same outputs, bit for bit, as ``stream_trace``: every
        position is evaluated on the same window the streaming path sees.
        """
        start = time.perf_counter()
        state = self.new_state()
        frames = [validate_frame(f) for f in trace.frames]
        for prev, cur in zip(frames, frames[1:]):
            if cur.frame_index <= prev.frame_index:
                raise OutOfOrderFrame(f"Frame {cur.frame_index} arrived after frame {prev.frame_index}")
        vectors = [self._features(state, f) for f in frames]
        indices = [f.frame_index for f in frames]
        n = self.config.window_len
        records: List[AffectOutput] = []

        if self.warmup is WarmupMode.REPLICATE_FIRST:
            for t, idx in enumerate(indices):
                window = replicate_first_window(vectors[max(0, t - n + 1):t + 1], vectors[0], n)
                records.append(output_from_row(self.model.predict_last(window), idx))
        elif len(vectors) < n:
            if vectors:
                window = np.array(vectors)
                records = self._warmup_outputs(window, indices)
        else:
            first = np.array(vectors[:n])
            records = self._warmup_outputs(first, indices[:n - 1])
            for t in range(n - 1, len(vectors)):
                window = np.array(vectors[t - n + 1:t + 1])
                records.append(output_from_row(self.model.predict_last(window), indices[t]))

        performance_monitor.record_throughput("infer_frames", len(records), time.perf_counter() - start)
        return PredictionTrace(clip_id=trace.clip_id, records=records)
