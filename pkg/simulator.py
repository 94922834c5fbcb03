"""
Synthetic Data Module

Generates feature traces with known valence/arousal ground truth so the
regressor and every evaluation protocol can be exercised without video data.

Each clip follows a mean-reverting Ornstein-Uhlenbeck walk in the VA plane.
VA drives AU intensities through a fixed linear map on [v, a, v*a, 1]; AU
intensities in turn move the landmarks of a canonical 68-point face. Noise,
occlusions, invalid frames and head pose are layered on top.

Generation is a pure function of the configuration: clip ``k`` draws from
``numpy.random.default_rng(seed + k)``.
"""
from typing import Dict, List, Optional, Sequence, Tuple
from dataclasses import dataclass, field
from enum import Enum
import logging
import math
import os

import numpy as np

from affect_types import (
    AU_CODES,
    AU_MAX,
    N_AUS,
    N_LANDMARKS,
    FrameFeatures,
    Landmarks68,
    Quadrant,
    VAPoint,
    quadrant_of,
)
from performance_optimizer import ClipBatchProcessor, performance_monitor
from settings import SimConfig
from trace_io import (
    ClipAnnotation,
    ClipLabel,
    DatasetManifest,
    FeatureTrace,
    ManifestClip,
    PoseBin,
    Split,
    save_trace,
    write_annotations,
    write_manifest,
)

logger = logging.getLogger(__name__)

BASELINE_UNCERTAINTY = 0.05
OCCLUDED_UNCERTAINTY = 0.95
SELF_OCCLUDED_UNCERTAINTY = 0.7
# ceiling of the capture-quality baseline, below the self-occlusion level
CAPTURE_UNCERTAINTY_MAX = 0.5

FACE_CENTER = (320.0, 240.0)

# non-frontal bins of the head-pose protocol: yaw sweep at level pitch, pitch sweep at zero yaw
NON_FRONTAL_POSES: Tuple[Tuple[float, float], ...] = (
    (60.0, 0.0), (30.0, 0.0), (-30.0, 0.0), (-60.0, 0.0),
    (0.0, 25.0), (0.0, -25.0),
)

OCCLUSION_REGIONS: Dict[str, Tuple[int, ...]] = {
    "left_eye": tuple(range(17, 22)) + tuple(range(36, 42)),
    "right_eye": tuple(range(22, 27)) + tuple(range(42, 48)),
    "mouth": tuple(range(48, 68)),
    "jaw_left": tuple(range(0, 6)),
    "jaw_right": tuple(range(11, 17)),
}


class SpanOutOfRange(ValueError):
    """A corruption span does not fit inside the trace."""
    pass


class CorruptionKind(str, Enum):
    INVALID = "invalid"
    OCCLUDE = "occlude"


@dataclass(frozen=True)
class CorruptionSpan:
    """Frames ``[start, end)`` to corrupt; ``indices`` are landmarks for occlusion."""
    start: int
    end: int
    kind: CorruptionKind = CorruptionKind.INVALID
    indices: Tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class GenerativeMap:
    """VA -> AU -> landmark map of the synthetic face."""
    base_shape: Landmarks68
    au_gains: np.ndarray          # (15, 4) over [v, a, v*a, 1]
    au_displacements: np.ndarray  # (15, 68, 2) pixel offsets at intensity 5

    def au_pre_clip(self, va: np.ndarray) -> np.ndarray:
        """Noise-free AU intensities for VA rows of shape (T, 2), before clipping."""
        return va_design(va) @ self.au_gains.T

    def landmarks_for(self, aus: np.ndarray) -> np.ndarray:
        """Landmarks (T, 68, 2) displaced by AU intensities (T, 15)."""
        return self.base_shape.points[None] + np.einsum("tk,kij->tij", aus / AU_MAX, self.au_displacements)


def va_design(va: np.ndarray) -> np.ndarray:
    """Design rows [v, a, v*a, 1] for VA rows of shape (T, 2)."""
    va = np.atleast_2d(np.asarray(va, dtype=np.float64))
    v, a = va[:, 0], va[:, 1]
    return np.column_stack([v, a, v * a, np.ones_like(v)])


# ============================================================================
# CANONICAL FACE
# ============================================================================

def canonical_face(center: Tuple[float, float] = FACE_CENTER) -> Landmarks68:
    """A neutral frontal iBUG-68 face about 190 px wide."""
    cx, cy = center
    pts = np.zeros((N_LANDMARKS, 2))

    t = np.linspace(0.0, math.pi, 17)
    pts[0:17] = np.column_stack([cx - 95.0 * np.cos(t), cy - 10.0 + 105.0 * np.sin(t)])

    arc = np.sin(np.linspace(0.0, math.pi, 5))
    pts[17:22] = np.column_stack([np.linspace(cx - 75.0, cx - 15.0, 5), cy - 60.0 - 10.0 * arc])
    pts[22:27] = np.column_stack([np.linspace(cx + 15.0, cx + 75.0, 5), cy - 60.0 - 10.0 * arc])

    pts[27:31] = np.column_stack([np.full(4, cx), np.linspace(cy - 45.0, cy - 6.0, 4)])
    pts[31:36] = np.column_stack([np.linspace(cx - 20.0, cx + 20.0, 5), cy + 8.0 + 4.0 * np.sin(np.linspace(0.0, math.pi, 5))])

    eye_angles = np.array([math.pi, 2 * math.pi / 3, math.pi / 3, 0.0, -math.pi / 3, -2 * math.pi / 3])
    for start, ex in ((36, cx - 40.0), (42, cx + 40.0)):
        pts[start:start + 6] = np.column_stack([ex + 15.0 * np.cos(eye_angles), cy - 35.0 - 5.0 * np.sin(eye_angles)])

    outer = math.pi - np.arange(12) * (2 * math.pi / 12)
    pts[48:60] = np.column_stack([cx + 25.0 * np.cos(outer), cy + 40.0 - 12.0 * np.sin(outer)])
    inner = math.pi - np.arange(8) * (2 * math.pi / 8)
    pts[60:68] = np.column_stack([cx + 18.0 * np.cos(inner), cy + 40.0 - 5.0 * np.sin(inner)])
    return Landmarks68(pts)


# (indices, dx, dy) in pixels at full intensity
_AU_MOTIONS: Dict[str, List[Tuple[Tuple[int, ...], float, float]]] = {
    "01": [((19, 20, 21, 22, 23, 24), 0.0, -6.0)],
    "02": [((17, 18, 25, 26), 0.0, -6.0)],
    "04": [(tuple(range(17, 27)), 0.0, 5.0), ((20, 21), 3.0, 0.0), ((22, 23), -3.0, 0.0)],
    "05": [((37, 38, 43, 44), 0.0, -3.0)],
    "06": [((40, 41, 46, 47), 0.0, -2.0), ((48, 54), 0.0, -2.0)],
    "07": [((37, 38, 43, 44), 0.0, 2.0), ((40, 41, 46, 47), 0.0, -2.0)],
    "09": [((31, 32, 33, 34, 35), 0.0, -3.0), ((27, 28, 29, 30), 0.0, -1.0)],
    "10": [((49, 50, 51, 52, 53, 61, 62, 63), 0.0, -4.0)],
    "12": [((48,), -6.0, -4.0), ((54,), 6.0, -4.0), ((60,), -4.0, -3.0), ((64,), 4.0, -3.0)],
    "14": [((48, 60), -3.0, 0.0), ((54, 64), 3.0, 0.0)],
    "15": [((48, 54, 60, 64), 0.0, 5.0)],
    "17": [((7, 8, 9), 0.0, -4.0), ((55, 56, 57, 58, 59), 0.0, -3.0)],
    "23": [((48, 60), 3.0, 0.0), ((54, 64), -3.0, 0.0), ((55, 56, 57, 58, 59), 0.0, -1.0)],
    "25": [((55, 56, 57, 58, 59, 65, 66, 67), 0.0, 5.0), ((61, 62, 63), 0.0, -1.0)],
    "45": [((37, 38, 43, 44), 0.0, 5.0), ((40, 41, 46, 47), 0.0, -2.0)],
}

# rows follow AU_CODES; columns are [v, a, v*a, 1]
_BASE_GAINS = np.array([
    [-0.3, 1.0, 0.0, 2.5],
    [0.1, 1.0, 0.2, 2.5],
    [-1.2, 0.3, 0.0, 2.5],
    [0.0, 1.2, 0.0, 2.5],
    [1.2, 0.3, 0.3, 2.5],
    [-0.6, 0.5, -0.3, 2.5],
    [-1.0, 0.4, 0.0, 2.5],
    [-0.8, 0.5, 0.0, 2.5],
    [1.5, 0.2, 0.3, 2.5],
    [0.4, -0.3, 0.0, 2.5],
    [-1.0, -0.5, 0.0, 2.5],
    [-0.5, -0.4, 0.2, 2.5],
    [-0.5, 0.6, -0.2, 2.5],
    [0.3, 1.1, 0.0, 2.5],
    [0.0, -1.2, 0.0, 2.5],
])

# keeps every noise-free intensity inside (0, 5) so clipping never binds
_MAX_GAIN_L1 = 2.4


def build_generative_map(seed: int) -> GenerativeMap:
    """Deterministic generative map; the seed perturbs the VA gains."""
    rng = np.random.default_rng(seed)
    gains = _BASE_GAINS.copy()
    gains[:, :3] += rng.uniform(-0.2, 0.2, size=(N_AUS, 3))
    l1 = np.abs(gains[:, :3]).sum(axis=1)
    gains[:, :3] *= np.minimum(1.0, _MAX_GAIN_L1 / l1)[:, None]

    displacements = np.zeros((N_AUS, N_LANDMARKS, 2))
    for k, code in enumerate(AU_CODES):
        for indices, dx, dy in _AU_MOTIONS[code]:
            displacements[k, list(indices)] += (dx, dy)
    return GenerativeMap(base_shape=canonical_face(), au_gains=gains, au_displacements=displacements)


# ============================================================================
# TRAJECTORIES AND FEATURES
# ============================================================================

def sample_va_trajectory(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Ornstein-Uhlenbeck walk per dimension, clipped to [-1, 1].

    The clip's long-run mean is drawn uniformly from the square of half-width
    ``ou_mean_range`` and the walk starts there.

    Returns:
        Array of shape (clip_len_frames, 2) with columns (valence, arousal)
    """
    dt = 1.0 / cfg.fps
    mu = rng.uniform(-cfg.ou_mean_range, cfg.ou_mean_range, size=2)
    shocks = rng.normal(0.0, 1.0, size=(cfg.clip_len_frames, 2))
    traj = np.empty((cfg.clip_len_frames, 2))
    x = mu.copy()
    traj[0] = x
    for t in range(1, cfg.clip_len_frames):
        x = x + cfg.ou_theta * (mu - x) * dt + cfg.ou_sigma * math.sqrt(dt) * shocks[t]
        x = np.clip(x, -1.0, 1.0)
        traj[t] = x
    return traj


def trajectory_points(traj: np.ndarray) -> List[VAPoint]:
    return [VAPoint.clamped(v, a) for v, a in traj]


def _apply_pose(points: np.ndarray, pose: Optional[PoseBin]) -> np.ndarray:
    if pose is None or (pose.yaw_deg == 0 and pose.pitch_deg == 0):
        return points
    cx, cy = FACE_CENTER
    yaw, pitch = math.radians(pose.yaw_deg), math.radians(pose.pitch_deg)
    posed = points.copy()
    posed[..., 0] = cx + (points[..., 0] - cx) * math.cos(yaw)
    posed[..., 1] = cy + (points[..., 1] - cy) * math.cos(pitch)
    # the nose swings toward the turn
    posed[..., 27:36, 0] += 15.0 * math.sin(yaw)
    posed[..., 27:36, 1] += 10.0 * math.sin(pitch)
    return posed


def _correlated_noise(shocks: np.ndarray, rho: float) -> np.ndarray:
    """Unit-variance AR(1) filter of white ``shocks`` along the first axis."""
    out = np.empty_like(shocks)
    if len(shocks) == 0:
        return out
    out[0] = shocks[0]
    innovation = math.sqrt(1.0 - rho * rho)
    for t in range(1, len(shocks)):
        out[t] = rho * out[t - 1] + innovation * shocks[t]
    return out


def synthesize_features(
    traj: np.ndarray,
    gen_map: GenerativeMap,
    cfg: SimConfig,
    rng: np.random.Generator,
    pose: Optional[PoseBin] = None,
    clip_id: str = "",
    capture: float = 1.0,
) -> FeatureTrace:
    """
    Render a VA trajectory into a feature trace.

    Per frame: AU = clip(gains . [v, a, va, 1] + noise, 0, 5); landmarks =
    base shape + sum_k (AU_k / 5) * displacement_k + jitter; uncertainties at
    the 0.05 baseline, raised on occluded and self-occluded landmarks; the
    valid flag drops with probability ``invalid_rate``.

    ``capture`` (>= 1) scales the AU noise and the landmark jitter of the whole
    clip, and the baseline uncertainty with its square root, the way a
    tracker reports lower confidence on a blurry or low-resolution face. The
    AU noise is an AR(1) series with lag-one correlation ``noise_corr``.
    """
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[0] == 0:
        raise ValueError("Trajectory must be a non-empty (T, 2) array")
    if capture < 1.0:
        raise ValueError(f"capture must be >= 1, got {capture}")
    n_frames = traj.shape[0]

    noise_std = cfg.noise_std * capture
    au_noise = _correlated_noise(rng.normal(0.0, 1.0, size=(n_frames, N_AUS)), cfg.noise_corr)
    aus = gen_map.au_pre_clip(traj) + au_noise * noise_std
    aus = np.clip(aus, 0.0, AU_MAX)

    jitter_std = noise_std * cfg.jitter_px
    landmarks = gen_map.landmarks_for(aus) + rng.normal(0.0, 1.0, size=(n_frames, N_LANDMARKS, 2)) * jitter_std
    landmarks = _apply_pose(landmarks, pose)

    uncertainties = np.full((n_frames, N_LANDMARKS), min(CAPTURE_UNCERTAINTY_MAX, BASELINE_UNCERTAINTY * math.sqrt(capture)))
    if pose is not None and abs(pose.yaw_deg) >= 60:
        far_side = OCCLUSION_REGIONS["jaw_right"] if pose.yaw_deg > 0 else OCCLUSION_REGIONS["jaw_left"]
        uncertainties[:, list(far_side)] = SELF_OCCLUDED_UNCERTAINTY

    occluded = rng.random(n_frames) < cfg.occlusion_rate
    region_names = sorted(OCCLUSION_REGIONS)
    region_choice = rng.integers(0, len(region_names), size=n_frames)
    occlusion_level = rng.uniform(0.9, 1.0, size=n_frames)
    for t in np.flatnonzero(occluded):
        indices = list(OCCLUSION_REGIONS[region_names[region_choice[t]]])
        uncertainties[t, indices] = occlusion_level[t]
        landmarks[t, indices] += rng.normal(0.0, 3.0 * max(jitter_std, 1.0), size=(len(indices), 2))

    valid = rng.random(n_frames) >= cfg.invalid_rate

    frames = [
        FrameFeatures(
            frame_index=t,
            valid=bool(valid[t]),
            landmarks=Landmarks68(landmarks[t]),
            landmark_uncertainties=uncertainties[t],
            au_intensities=aus[t],
        )
        for t in range(n_frames)
    ]
    return FeatureTrace(clip_id=clip_id, fps=cfg.fps, frames=frames)


def corrupt(trace: FeatureTrace, spans: Sequence[CorruptionSpan]) -> FeatureTrace:
    """
    Apply invalid or occlusion spans to a copy of ``trace``.

    ``invalid`` clears the valid flag on ``[start, end)``; ``occlude`` raises the
    listed landmark uncertainties to at least 0.95 there.

    Raises:
        SpanOutOfRange: If a span does not lie inside the trace
    """
    frames = list(trace.frames)
    for span in spans:
        if not 0 <= span.start <= span.end <= len(frames):
            raise SpanOutOfRange(f"Span [{span.start}, {span.end}) outside trace of length {len(frames)}")
        kind = CorruptionKind(span.kind)
        for t in range(span.start, span.end):
            frame = frames[t]
            if kind is CorruptionKind.INVALID:
                frames[t] = frame.replace(valid=False)
            else:
                if any(not 0 <= i < N_LANDMARKS for i in span.indices):
                    raise SpanOutOfRange(f"Landmark indices out of range: {span.indices}")
                u = np.array(frame.landmark_uncertainties)
                idx = list(span.indices)
                u[idx] = np.maximum(u[idx], OCCLUDED_UNCERTAINTY)
                frames[t] = frame.replace(landmark_uncertainties=u)
    return FeatureTrace(clip_id=trace.clip_id, fps=trace.fps, frames=frames)


def random_invalid_spans(n_frames: int, fraction: float, rng: np.random.Generator) -> List[CorruptionSpan]:
    """Single-frame invalid spans covering ``round(fraction * n_frames)`` random frames."""
    count = int(round(fraction * n_frames))
    chosen = np.sort(rng.choice(n_frames, size=count, replace=False)) if count else []
    return [CorruptionSpan(int(t), int(t) + 1, CorruptionKind.INVALID) for t in chosen]


# ============================================================================
# ANNOTATIONS
# ============================================================================

def simulate_annotations(
    clip_id: str,
    label: VAPoint,
    noise: Sequence[float],
    rng: np.random.Generator,
) -> List[ClipAnnotation]:
    """One noisy single-point label per rater (``r1``, ``r2``, ...)."""
    annotations = []
    for r, sigma in enumerate(noise, start=1):
        v, a = np.array(label.as_tuple()) + rng.normal(0.0, 1.0, size=2) * sigma
        annotations.append(ClipAnnotation(clip_id, f"r{r}", VAPoint.clamped(round(v, 6), round(a, 6))))
    return annotations


def calibrate_rater_noise(
    target_wmae: float,
    n_clips: int = 400,
    n_raters: int = 3,
    seed: int = 0,
    iterations: int = 40,
) -> float:
    """
    Find the per-rater noise level whose simulated annotations reach ``target_wmae``.

    Every trial level reuses the same random draws, so WMAE grows monotonically with
    the noise level and bisection on [0, 1] converges.
    """
    from metrics import annotator_reliability, wmae

    rng = np.random.default_rng(seed)
    labels = rng.uniform(-0.8, 0.8, size=(n_clips, 2))
    shocks = rng.normal(0.0, 1.0, size=(n_clips, n_raters, 2))

    def wmae_at(sigma: float) -> float:
        grouped = {}
        for c in range(n_clips):
            clip_id = f"c{c:05d}"
            values = np.clip(labels[c] + shocks[c] * sigma, -1.0, 1.0)
            grouped[clip_id] = [
                ClipAnnotation(clip_id, f"r{r + 1}", VAPoint(float(values[r, 0]), float(values[r, 1])))
                for r in range(n_raters)
            ]
        weights = annotator_reliability(grouped)
        wv, wa = wmae(grouped, weights)
        return 0.5 * (wv + wa)

    low, high = 0.0, 1.0
    for _ in range(iterations):
        mid = 0.5 * (low + high)
        if wmae_at(mid) < target_wmae:
            low = mid
        else:
            high = mid
    return 0.5 * (low + high)


# ============================================================================
# DATASETS
# ============================================================================

@dataclass
class SimulatedClip:
    clip_id: str
    trace: FeatureTrace
    trajectory: np.ndarray
    label: VAPoint
    pose: PoseBin
    annotations: List[ClipAnnotation] = field(default_factory=list)
    capture: float = 1.0


def _clip_id(index: int) -> str:
    return f"clip{index:05d}"


def generate_clip(index: int, cfg: SimConfig, gen_map: GenerativeMap) -> SimulatedClip:
    """Generate clip ``index`` from its own seed ``cfg.seed + index``."""
    rng = np.random.default_rng(cfg.seed + index)
    clip_id = _clip_id(index)
    traj = sample_va_trajectory(cfg, rng)

    if rng.random() < cfg.pose_rate:
        yaw, pitch = NON_FRONTAL_POSES[int(rng.integers(0, len(NON_FRONTAL_POSES)))]
    else:
        yaw, pitch = 0.0, 0.0
    pose = PoseBin(yaw_deg=yaw, pitch_deg=pitch)

    low, high = cfg.capture_noise_range
    capture = math.exp(rng.uniform(math.log(low), math.log(high)))
    trace = synthesize_features(traj, gen_map, cfg, rng, pose=pose, clip_id=clip_id, capture=capture)

    if rng.random() < cfg.invalid_span_rate and len(trace) > 1:
        length = int(rng.integers(8, 25))
        length = min(length, len(trace))
        start = int(rng.integers(0, len(trace) - length + 1))
        trace = corrupt(trace, [CorruptionSpan(start, start + length, CorruptionKind.INVALID)])

    mean = traj.mean(axis=0)
    label = VAPoint.clamped(round(float(mean[0]), 6), round(float(mean[1]), 6))
    noise = [cfg.noise_of_rater(r) for r in range(cfg.n_raters)]
    annotations = simulate_annotations(clip_id, label, noise, rng) if cfg.n_raters else []
    return SimulatedClip(clip_id, trace, traj, label, pose, annotations, capture)


def assign_splits(n_subjects: int, fractions: Tuple[float, float, float], seed: int) -> List[Split]:
    """Subject-level split assignment from a seeded permutation."""
    order = np.random.default_rng(seed).permutation(n_subjects)
    n_train = int(round(fractions[0] * n_subjects))
    n_val = int(round(fractions[1] * n_subjects))
    splits = [Split.TEST] * n_subjects
    for rank, subject in enumerate(order):
        if rank < n_train:
            splits[subject] = Split.TRAIN
        elif rank < n_train + n_val:
            splits[subject] = Split.VAL
    return splits


@dataclass
class DatasetSummary:
    n_clips: int
    split_counts: Dict[str, int]
    quadrant_counts: Dict[str, int]

    def lines(self) -> List[str]:
        total = max(1, self.n_clips)
        out = [f"clips: {self.n_clips}"]
        out += [f"  {name}: {count}" for name, count in self.split_counts.items()]
        out.append("quadrant coverage:")
        out += [f"  {q}: {c} ({100.0 * c / total:.1f}%)" for q, c in self.quadrant_counts.items()]
        return out


@performance_monitor.track_operation("simulate_dataset")
def simulate_dataset(cfg: SimConfig, out_dir: str, threads: int = 1) -> Tuple[DatasetManifest, DatasetSummary]:
    """
    Write a full synthetic dataset: ``traces/*.jsonl``, ``manifest.yaml`` and
    ``annotations.csv``. Output is identical for identical configurations,
    whatever the thread count.
    """
    gen_map = build_generative_map(cfg.seed)
    n_subjects = int(math.ceil(cfg.n_clips / cfg.clips_per_subject))
    splits = assign_splits(n_subjects, cfg.split_fractions, cfg.seed)
    trace_dir = os.path.join(out_dir, "traces")
    os.makedirs(trace_dir, exist_ok=True)

    def produce(index: int) -> SimulatedClip:
        clip = generate_clip(index, cfg, gen_map)
        save_trace(clip.trace, os.path.join(trace_dir, f"{clip.clip_id}.jsonl"))
        return clip

    clips = ClipBatchProcessor(threads).map(produce, range(cfg.n_clips))

    entries = []
    annotations: List[ClipAnnotation] = []
    for index, clip in enumerate(clips):
        subject = index // cfg.clips_per_subject
        entries.append(ManifestClip(
            clip_id=clip.clip_id,
            trace_path=f"traces/{clip.clip_id}.jsonl",
            split=splits[subject],
            subject_id=f"subj{subject:04d}",
            pose_bin=clip.pose,
            label=ClipLabel(valence=clip.label.valence, arousal=clip.label.arousal),
        ))
        annotations.extend(clip.annotations)
    manifest = DatasetManifest(clips=entries)

    with open(os.path.join(out_dir, "manifest.yaml"), "wb") as fh:
        fh.write(write_manifest(manifest))
    if annotations:
        with open(os.path.join(out_dir, "annotations.csv"), "wb") as fh:
            fh.write(write_annotations(annotations))

    summary = summarize_labels(manifest)
    logger.info(f"Wrote {cfg.n_clips} clips to {out_dir}")
    return manifest, summary


def summarize_labels(manifest: DatasetManifest) -> DatasetSummary:
    """Clip counts per split and per label quadrant."""
    split_counts = {s.value: len(manifest.in_split(s)) for s in Split}
    quadrant_counts = {q.value: 0 for q in Quadrant}
    for clip in manifest.clips:
        if clip.label is not None:
            quadrant_counts[quadrant_of(clip.label.to_point()).value] += 1
    return DatasetSummary(len(manifest.clips), split_counts, quadrant_counts)
