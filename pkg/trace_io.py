"""
Trace I/O Module

File formats of the affect pipeline:

- feature traces: one JSON object per line, fields ``i`` (frame index),
  ``valid`` (0/1), ``lm`` (68 x 2), ``lmu`` (68) and ``au`` (15)
- annotations: CSV with header ``clip_id,rater_id,valence,arousal``
- dataset manifest: YAML list of clips with split, subject, optional pose bin
  and optional single-point label
- predictions: CSV with header
  ``frame,valence,arousal,u_epi_v,u_ale_v,u_cum_v,u_epi_a,u_ale_a,u_cum_a``

Writers are deterministic: stable field order and every real number printed
with 6 fractional digits, so writing a parsed file reproduces it byte for byte.
"""
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
import csv
import io
import json
import logging
import os

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, model_validator

from affect_types import (
    N_AUS,
    N_LANDMARKS,
    AffectOutput,
    FrameFeatures,
    Landmarks68,
    UncertaintyTriple,
    VAPoint,
)
from input_validator import NonFiniteValue, ValidationError, WrongArity, validate_frame, validator

logger = logging.getLogger(__name__)

ANNOTATION_HEADER = ("clip_id", "rater_id", "valence", "arousal")
PREDICTION_HEADER = (
    "frame", "valence", "arousal",
    "u_epi_v", "u_ale_v", "u_cum_v",
    "u_epi_a", "u_ale_a", "u_cum_a",
)
MANIFEST_VERSION = 1


class ParseError(ValidationError):
    """A file could not be parsed."""

    def __init__(self, line: int, reason: str) -> None:
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class ArityError(ParseError):
    """A record field has the wrong number of values."""
    pass


class NonMonotoneFrameIndex(ParseError):
    """Frame indices do not start at 0 or do not strictly increase."""
    pass


class DuplicateAnnotation(ParseError):
    """The same (clip, rater) pair appears twice."""
    pass


class ManifestError(ValidationError):
    """A dataset manifest violates its invariants."""
    pass


# ============================================================================
# NUMBER FORMATTING
# ============================================================================

def fmt(value: float) -> str:
    """Canonical 6-digit rendering; negative zero is written as zero."""
    text = f"{float(value):.6f}"
    return "0.000000" if text == "-0.000000" else text


def _fmt_list(values: Iterable[float]) -> str:
    return ",".join(fmt(v) for v in values)


# ============================================================================
# FEATURE TRACES
# ============================================================================

@dataclass(eq=False)
class FeatureTrace:
    """Time-ordered frames of one clip."""
    clip_id: str
    fps: float
    frames: List[FrameFeatures] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureTrace):
            return NotImplemented
        return (
            self.clip_id == other.clip_id
            and self.fps == other.fps
            and len(self.frames) == len(other.frames)
            and all(a == b for a, b in zip(self.frames, other.frames))
        )

    __hash__ = None  # type: ignore[assignment]


def _as_text(data: Union[bytes, str]) -> str:
    """UTF-8 text of ``data``; undecodable bytes are a ParseError at their line."""
    if not isinstance(data, (bytes, bytearray)):
        return data
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseError(data.count(b"\n", 0, e.start) + 1, f"invalid UTF-8 at byte offset {e.start}")


def _trace_header(clip_id: str, fps: float) -> str:
    return json.dumps({"clip_id": clip_id, "fps": float(fps)}, separators=(",", ":"))


def _frame_from_record(record: dict, line_no: int) -> FrameFeatures:
    for key in ("i", "valid", "lm", "lmu", "au"):
        if key not in record:
            raise ParseError(line_no, f"missing field '{key}'")
    lm = record["lm"]
    if not isinstance(lm, list) or len(lm) != N_LANDMARKS or any(
        not isinstance(p, list) or len(p) != 2 for p in lm
    ):
        got = len(lm) if isinstance(lm, list) else 0
        raise ArityError(line_no, f"'lm' must hold {N_LANDMARKS} (x, y) pairs, got {got}")
    if not isinstance(record["lmu"], list) or len(record["lmu"]) != N_LANDMARKS:
        raise ArityError(line_no, f"'lmu' must hold {N_LANDMARKS} values")
    if not isinstance(record["au"], list) or len(record["au"]) != N_AUS:
        raise ArityError(line_no, f"'au' must hold {N_AUS} values")
    if record["valid"] not in (0, 1, True, False):
        raise ParseError(line_no, f"'valid' must be 0 or 1, got {record['valid']!r}")
    index = record["i"]
    if isinstance(index, bool) or not isinstance(index, (int, float)) or (isinstance(index, float) and not index.is_integer()):
        raise ParseError(line_no, f"'i' must be an integer, got {index!r}")
    try:
        frame = FrameFeatures(
            frame_index=int(index),
            valid=bool(record["valid"]),
            landmarks=Landmarks68(np.asarray(lm, dtype=np.float64)),
            landmark_uncertainties=np.asarray(record["lmu"], dtype=np.float64),
            au_intensities=np.asarray(record["au"], dtype=np.float64),
        )
    except (TypeError, ValueError) as e:
        raise ParseError(line_no, f"non-numeric value: {e}")
    try:
        return validate_frame(frame)
    except NonFiniteValue as e:
        raise ParseError(line_no, str(e))
    except WrongArity as e:
        raise ArityError(line_no, str(e))


def parse_trace(data: Union[bytes, str], clip_id: Optional[str] = None, fps: float = 30.0) -> FeatureTrace:
    """
    Parse a line-delimited feature trace.

    An optional first line ``{"clip_id": ..., "fps": ...}`` carries clip
    metadata; otherwise ``clip_id``/``fps`` arguments are used.

    Raises:
        ParseError: On malformed JSON or non-numeric values
        ArityError: On a wrong number of landmarks, uncertainties or AUs
        NonMonotoneFrameIndex: If indices do not start at 0 and strictly increase
    """
    frames: List[FrameFeatures] = []
    trace_id = clip_id or ""
    trace_fps = float(fps)
    previous = -1
    for line_no, line in enumerate(_as_text(data).splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(line_no, f"invalid JSON: {e.msg}")
        if not isinstance(record, dict):
            raise ParseError(line_no, "record must be a JSON object")
        if "i" not in record and "clip_id" in record:
            if frames:
                raise ParseError(line_no, "trace header must come first")
            trace_id = clip_id or str(record["clip_id"])
            trace_fps = float(record.get("fps", trace_fps))
            continue
        frame = _frame_from_record(record, line_no)
        if (previous < 0 and frame.frame_index != 0) or frame.frame_index <= previous:
            raise NonMonotoneFrameIndex(line_no, f"frame index {frame.frame_index} after {previous}")
        previous = frame.frame_index
        frames.append(frame)
    if not np.isfinite(trace_fps) or trace_fps <= 0:
        raise ParseError(1, f"fps must be finite and positive, got {trace_fps}")
    return FeatureTrace(clip_id=trace_id, fps=trace_fps, frames=frames)


def write_trace(trace: FeatureTrace) -> bytes:
    """Serialize a trace in canonical form (header line + one frame per line)."""
    lines = [_trace_header(trace.clip_id, trace.fps)]
    for frame in trace.frames:
        lm = ",".join(f"[{fmt(x)},{fmt(y)}]" for x, y in frame.landmarks.points)
        lines.append(
            f'{{"i":{frame.frame_index},"valid":{int(frame.valid)},'
            f'"lm":[{lm}],"lmu":[{_fmt_list(frame.landmark_uncertainties)}],'
            f'"au":[{_fmt_list(frame.au_intensities)}]}}'
        )
    return ("\n".join(lines) + "\n").encode("utf-8")


def read_trace(path: str) -> FeatureTrace:
    """Parse a trace file; the clip id defaults to the file stem."""
    with open(path, "rb") as fh:
        data = fh.read()
    stem = os.path.splitext(os.path.basename(path))[0]
    trace = parse_trace(data)
    if not trace.clip_id:
        trace.clip_id = stem
    return trace


def save_trace(trace: FeatureTrace, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(write_trace(trace))
    return path


# ============================================================================
# ANNOTATIONS
# ============================================================================

@dataclass(frozen=True)
class ClipAnnotation:
    """A single rater's single-point VA label for one clip."""
    clip_id: str
    rater_id: str
    va: VAPoint


def parse_annotations(data: Union[bytes, str]) -> List[ClipAnnotation]:
    """
    Parse an annotation CSV.

    Raises:
        ParseError: If the header is missing or a row is malformed
        RangeError: If a valence/arousal value is outside [-1, 1]
        DuplicateAnnotation: If a (clip_id, rater_id) pair repeats
    """
    reader = csv.reader(io.StringIO(_as_text(data)))
    rows = list(reader)
    if not rows or tuple(c.strip() for c in rows[0]) != ANNOTATION_HEADER:
        raise ParseError(1, f"expected header {','.join(ANNOTATION_HEADER)}")
    seen = set()
    annotations: List[ClipAnnotation] = []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) != len(ANNOTATION_HEADER):
            raise ParseError(line_no, f"expected {len(ANNOTATION_HEADER)} columns, got {len(row)}")
        clip_id, rater_id = row[0].strip(), row[1].strip()
        try:
            valence, arousal = float(row[2]), float(row[3])
        except ValueError:
            raise ParseError(line_no, "valence and arousal must be numeric")
        valence = validator.validate_va_value("valence", valence)
        arousal = validator.validate_va_value("arousal", arousal)
        key = (clip_id, rater_id)
        if key in seen:
            raise DuplicateAnnotation(line_no, f"duplicate annotation for clip '{clip_id}' by rater '{rater_id}'")
        seen.add(key)
        annotations.append(ClipAnnotation(clip_id, rater_id, VAPoint(valence, arousal)))
    return annotations


def write_annotations(annotations: Sequence[ClipAnnotation]) -> bytes:
    lines = [",".join(ANNOTATION_HEADER)]
    for ann in annotations:
        lines.append(f"{ann.clip_id},{ann.rater_id},{fmt(ann.va.valence)},{fmt(ann.va.arousal)}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def group_by_clip(annotations: Iterable[ClipAnnotation]) -> "OrderedDict[str, List[ClipAnnotation]]":
    """Group annotations by clip id, preserving first-seen clip order."""
    grouped: "OrderedDict[str, List[ClipAnnotation]]" = OrderedDict()
    for ann in annotations:
        grouped.setdefault(ann.clip_id, []).append(ann)
    return grouped


# ============================================================================
# DATASET MANIFEST
# ============================================================================

class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class PoseBin(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    yaw_deg: float
    pitch_deg: float

    @property
    def name(self) -> str:
        if self.yaw_deg == 0 and self.pitch_deg == 0:
            return "frontal"
        return f"yaw{self.yaw_deg:+g}_pitch{self.pitch_deg:+g}"


class ClipLabel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    valence: float = Field(ge=-1.0, le=1.0)
    arousal: float = Field(ge=-1.0, le=1.0)

    def to_point(self) -> VAPoint:
        return VAPoint(self.valence, self.arousal)


class ManifestClip(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    clip_id: str
    trace_path: str
    split: Split
    subject_id: str
    pose_bin: Optional[PoseBin] = None
    label: Optional[ClipLabel] = None


class DatasetManifest(BaseModel):
    """Clip list of a dataset; splits are subject-independent."""
    model_config = ConfigDict(extra="forbid")

    version: int = MANIFEST_VERSION
    clips: List[ManifestClip] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_invariants(self) -> "DatasetManifest":
        seen = set()
        subject_split: Dict[str, Split] = {}
        for clip in self.clips:
            if clip.clip_id in seen:
                raise ValueError(f"duplicate clip_id '{clip.clip_id}'")
            seen.add(clip.clip_id)
            other = subject_split.setdefault(clip.subject_id, clip.split)
            if other != clip.split:
                raise ValueError(
                    f"subject '{clip.subject_id}' appears in splits '{other.value}' and '{clip.split.value}'"
                )
        return self

    def in_split(self, split: Union[Split, str]) -> List[ManifestClip]:
        split = Split(split)
        return [c for c in self.clips if c.split == split]

    def by_id(self) -> Dict[str, ManifestClip]:
        return {c.clip_id: c for c in self.clips}


def parse_manifest(data: Union[bytes, str]) -> DatasetManifest:
    """
    Parse a YAML manifest.

    Raises:
        ManifestError: On malformed YAML, duplicate clip ids or a subject
            appearing in two splits
    """
    try:
        loaded = yaml.safe_load(_as_text(data)) or {}
    except yaml.YAMLError as e:
        raise ManifestError(f"invalid manifest YAML: {e}")
    try:
        return DatasetManifest.model_validate(loaded)
    except PydanticValidationError as e:
        raise ManifestError(f"invalid manifest: {e}")


def write_manifest(manifest: DatasetManifest) -> bytes:
    clips = []
    for clip in manifest.clips:
        entry = {
            "clip_id": clip.clip_id,
            "trace_path": clip.trace_path,
            "split": clip.split.value,
            "subject_id": clip.subject_id,
        }
        if clip.pose_bin is not None:
            entry["pose_bin"] = {"yaw_deg": clip.pose_bin.yaw_deg, "pitch_deg": clip.pose_bin.pitch_deg}
        if clip.label is not None:
            entry["label"] = {"valence": round(clip.label.valence, 6), "arousal": round(clip.label.arousal, 6)}
        clips.append(entry)
    text = yaml.safe_dump({"version": manifest.version, "clips": clips}, sort_keys=False)
    return text.encode("utf-8")


def load_manifest(path: str) -> DatasetManifest:
    with open(path, "rb") as fh:
        return parse_manifest(fh.read())


def resolve_trace_path(manifest_path: str, clip: ManifestClip) -> str:
    """Trace paths in a manifest are relative to the manifest's directory."""
    if os.path.isabs(clip.trace_path):
        return clip.trace_path
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), clip.trace_path)


# ============================================================================
# PREDICTIONS
# ============================================================================

@dataclass
class PredictionTrace:
    """Per-frame predictions of one clip, one record per input frame."""
    clip_id: str
    records: List[AffectOutput] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def as_array(self) -> np.ndarray:
        """Rows of (valence, arousal, u_epi_v, u_ale_v, u_cum_v, u_epi_a, u_ale_a, u_cum_a)."""
        rows = [_prediction_values(r) for r in self.records]
        return np.asarray(rows, dtype=np.float64).reshape(len(rows), 8)


def _prediction_values(record: AffectOutput) -> Tuple[float, ...]:
    uv, ua = record.uncertainty_valence, record.uncertainty_arousal
    return (
        record.va.valence, record.va.arousal,
        uv.epistemic, uv.aleatoric, uv.cumulative,
        ua.epistemic, ua.aleatoric, ua.cumulative,
    )


def write_predictions(trace: PredictionTrace) -> bytes:
    """Serialize predictions; identical input always gives identical bytes."""
    lines = [",".join(PREDICTION_HEADER)]
    for position, record in enumerate(trace.records):
        frame = position if record.frame_index is None else record.frame_index
        lines.append(f"{frame}," + _fmt_list(_prediction_values(record)))
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_predictions(data: Union[bytes, str], clip_id: str = "") -> PredictionTrace:
    """
    Parse a prediction CSV.

    Raises:
        ParseError: On a wrong header, malformed row, out-of-range value or
            non-increasing frame index
    """
    rows = list(csv.reader(io.StringIO(_as_text(data))))
    if not rows or tuple(c.strip() for c in rows[0]) != PREDICTION_HEADER:
        raise ParseError(1, f"expected header {','.join(PREDICTION_HEADER)}")
    records: List[AffectOutput] = []
    previous = -1
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(PREDICTION_HEADER):
            raise ArityError(line_no, f"expected {len(PREDICTION_HEADER)} columns, got {len(row)}")
        try:
            frame = int(row[0])
            v, a, ev, av, cv, ea, aa, ca = (float(x) for x in row[1:])
            record = AffectOutput(
                va=VAPoint(v, a),
                uncertainty_valence=UncertaintyTriple(ev, av, cv),
                uncertainty_arousal=UncertaintyTriple(ea, aa, ca),
                frame_index=frame,
            )
        except ValueError as e:
            raise ParseError(line_no, str(e))
        if frame <= previous:
            raise NonMonotoneFrameIndex(line_no, f"frame index {frame} after {previous}")
        previous = frame
        records.append(record)
    return PredictionTrace(clip_id=clip_id, records=records)


def save_predictions(trace: PredictionTrace, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(write_predictions(trace))
    return path


def read_predictions(path: str) -> PredictionTrace:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_predictions(data, clip_id=os.path.splitext(os.path.basename(path))[0])
