"""
Evaluation Module

Benchmark protocols over per-frame predictions: overall CCC/MAE, quadrant
and fine-grained grid breakdowns, head-pose bins, leave-N-in uncertainty
filtering, inter-rater WMAE, and the landmark/AU feature benchmark.

Per-frame predictions and labels are held in one pandas table sorted by
(clip_id, frame). Every metric is computed on rows in that order, so
subsets that keep all rows reproduce the overall numbers exactly.
"""
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple
from collections import OrderedDict
from dataclasses import dataclass, field
import logging
import math

import numpy as np
import pandas as pd

from affect_types import Quadrant
from metrics import (
    InsufficientOverlap,
    annotator_reliability,
    au_icc_table,
    ccc,
    ced_auc,
    ced_curve,
    failure_rate,
    mae,
    nme,
    occlusion_auc,
    spearman,
    wmae,
)
from performance_optimizer import performance_monitor
from settings import EvalConfig, FilterMode, WmaeWeighting
from trace_io import ClipAnnotation, DatasetManifest, FeatureTrace, PredictionTrace, Split, group_by_clip

logger = logging.getLogger(__name__)

FRAME_COLUMNS = ["clip_id", "frame", "pred_v", "pred_a", "gt_v", "gt_a", "u_cum_v", "u_cum_a", "yaw", "pitch"]
DIMENSIONS = (("valence", "v"), ("arousal", "a"))

# head-pose bins in report order
POSE_ORDER: Tuple[Tuple[float, float], ...] = (
    (60.0, 0.0), (30.0, 0.0), (0.0, 0.0), (-30.0, 0.0), (-60.0, 0.0), (0.0, 25.0), (0.0, -25.0),
)

OCCLUDED_THRESHOLD = 0.9


class Misalignment(Exception):
    """Predictions and labels do not describe the same frames."""
    pass


# ============================================================================
# FRAME TABLE
# ============================================================================

def build_frame_table(
    predictions: Mapping[str, PredictionTrace],
    manifest: DatasetManifest,
    split: Optional[Split] = None,
) -> pd.DataFrame:
    """
    Join per-frame predictions with clip labels and pose metadata.

    Every labelled clip of ``split`` (all splits when None) must have
    predictions and every prediction must belong to such a clip.

    Raises:
        Misalignment: On missing, extra or empty prediction traces
    """
    clips = manifest.clips if split is None else manifest.in_split(split)
    labelled = {c.clip_id: c for c in clips if c.label is not None}
    missing = sorted(set(labelled) - set(predictions))
    extra = sorted(set(predictions) - set(labelled))
    if missing:
        raise Misalignment(f"No predictions for {len(missing)} labelled clips, e.g. '{missing[0]}'")
    if extra:
        raise Misalignment(f"Predictions for {len(extra)} clips without labels, e.g. '{extra[0]}'")

    parts = []
    for clip_id in sorted(labelled):
        trace = predictions[clip_id]
        if len(trace) == 0:
            raise Misalignment(f"Prediction trace for '{clip_id}' is empty")
        entry = labelled[clip_id]
        values = trace.as_array()
        n = values.shape[0]
        pose = entry.pose_bin
        parts.append(pd.DataFrame({
            "clip_id": [clip_id] * n,
            "frame": [r.frame_index if r.frame_index is not None else i for i, r in enumerate(trace.records)],
            "pred_v": values[:, 0],
            "pred_a": values[:, 1],
            "gt_v": np.full(n, entry.label.valence),
            "gt_a": np.full(n, entry.label.arousal),
            "u_cum_v": values[:, 4],
            "u_cum_a": values[:, 7],
            "yaw": np.full(n, np.nan if pose is None else pose.yaw_deg),
            "pitch": np.full(n, np.nan if pose is None else pose.pitch_deg),
        }))
    if not parts:
        raise Misalignment("No labelled clips to evaluate")
    table = pd.concat(parts, ignore_index=True)
    return table.sort_values(["clip_id", "frame"], kind="mergesort").reset_index(drop=True)[FRAME_COLUMNS]


def _arrays(table: pd.DataFrame) -> Tuple[np.ndarray, np.ndarray]:
    return table[["pred_v", "pred_a"]].to_numpy(), table[["gt_v", "gt_a"]].to_numpy()


def _check_aligned(preds: np.ndarray, gts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 2)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    if preds.shape != gts.shape:
        raise Misalignment(f"{preds.shape[0]} predictions for {gts.shape[0]} labels")
    return preds, gts


def _block(preds: np.ndarray, gts: np.ndarray) -> "OrderedDict[str, Any]":
    """count/ccc/mae for aligned rows; CCC needs two rows and a non-zero denominator."""
    block: "OrderedDict[str, Any]" = OrderedDict(count=int(preds.shape[0]))
    too_short = preds.shape[0] < 2
    degenerate = too_short
    for col, (_, short) in enumerate(DIMENSIONS):
        if preds.shape[0] == 0:
            block[f"ccc_{short}"] = None
        elif too_short:
            block[f"ccc_{short}"] = 0.0
        else:
            x, y = preds[:, col], gts[:, col]
            denom = x.var() + y.var() + (x.mean() - y.mean()) ** 2
            degenerate = degenerate or denom <= 0.0
            block[f"ccc_{short}"] = ccc(x, y)
    for col, (_, short) in enumerate(DIMENSIONS):
        block[f"mae_{short}"] = mae(preds[:, col], gts[:, col]) if preds.shape[0] else None
    block["degenerate"] = bool(degenerate) and preds.shape[0] > 0
    return block


# ============================================================================
# PROTOCOLS
# ============================================================================

def overall_eval(preds: np.ndarray, gts: np.ndarray) -> "OrderedDict[str, Any]":
    """
    Pooled per-frame CCC and MAE.

    Raises:
        Misalignment: If the arrays differ in length or are empty
    """
    preds, gts = _check_aligned(preds, gts)
    if preds.shape[0] == 0:
        raise Misalignment("Nothing to evaluate")
    block = _block(preds, gts)
    return OrderedDict(
        ccc_v=block["ccc_v"], ccc_a=block["ccc_a"],
        mae_v=block["mae_v"], mae_a=block["mae_a"],
        n_frames=block["count"],
    )


def quadrant_report(preds: np.ndarray, gts: np.ndarray) -> "OrderedDict[str, Any]":
    """Metrics per emotion quadrant of the ground-truth VA."""
    preds, gts = _check_aligned(preds, gts)
    pos_v = gts[:, 0] >= 0.0
    pos_a = gts[:, 1] >= 0.0
    membership = {
        Quadrant.Q1: pos_v & pos_a,
        Quadrant.Q2: ~pos_v & pos_a,
        Quadrant.Q3: ~pos_v & ~pos_a,
        Quadrant.Q4: pos_v & ~pos_a,
    }
    report: "OrderedDict[str, Any]" = OrderedDict()
    for quadrant, mask in membership.items():
        block = _block(preds[mask], gts[mask])
        block["empty"] = block["count"] == 0
        if block["empty"]:
            logger.warning(f"Quadrant {quadrant.value} has no frames")
        report[quadrant.value] = block
    return report


def grid_bins(values: np.ndarray, resolution: int) -> np.ndarray:
    """Vectorized ``affect_types.axis_bin``."""
    index = np.floor((np.asarray(values, dtype=np.float64) + 1.0) / 2.0 * resolution).astype(int)
    return np.clip(index, 0, resolution - 1)


def grid_report(
    preds: np.ndarray,
    gts: np.ndarray,
    resolution: int,
    thresholds: Tuple[float, float] = (0.17, 0.19),
) -> "OrderedDict[str, Any]":
    """
    Per-cell MAE on an R x R grid of ground-truth VA, flagged against the
    human disagreement thresholds.

    A non-empty cell is ``below_human`` when mae_v <= thresholds[0] and
    mae_a <= thresholds[1], ``above_human`` otherwise.
    """
    if resolution < 1:
        raise ValueError(f"Grid resolution must be >= 1, got {resolution}")
    preds, gts = _check_aligned(preds, gts)
    rows = grid_bins(gts[:, 1], resolution)
    cols = grid_bins(gts[:, 0], resolution)
    cells = []
    counts = OrderedDict(below_human=0, above_human=0, empty=0)
    for row in range(resolution):
        for col in range(resolution):
            mask = (rows == row) & (cols == col)
            n = int(mask.sum())
            cell: "OrderedDict[str, Any]" = OrderedDict(row=row, col=col, count=n, mae_v=None, mae_a=None)
            if n == 0:
                flag = "empty"
            else:
                cell["mae_v"] = mae(preds[mask, 0], gts[mask, 0])
                cell["mae_a"] = mae(preds[mask, 1], gts[mask, 1])
                below = cell["mae_v"] <= thresholds[0] and cell["mae_a"] <= thresholds[1]
                flag = "below_human" if below else "above_human"
            cell["flag"] = flag
            counts[flag] += 1
            cells.append(cell)
    return OrderedDict(
        resolution=resolution,
        thresholds=list(thresholds),
        counts=counts,
        cells=cells,
    )


def pose_report(table: pd.DataFrame) -> "OrderedDict[str, Any]":
    """Metrics per head-pose bin; clips without pose metadata are excluded and counted."""
    has_pose = table["yaw"].notna() & table["pitch"].notna()
    excluded = int(table.loc[~has_pose, "clip_id"].nunique())
    if excluded:
        logger.warning(f"{excluded} clips have no pose metadata and are excluded from the pose report")
    posed = table[has_pose]
    present = sorted({(float(y), float(p)) for y, p in zip(posed["yaw"], posed["pitch"])})
    order = [b for b in POSE_ORDER if b in present] + [b for b in present if b not in POSE_ORDER]

    bins: "OrderedDict[str, Any]" = OrderedDict()
    for yaw, pitch in order:
        subset = posed[(posed["yaw"] == yaw) & (posed["pitch"] == pitch)]
        preds, gts = _arrays(subset)
        block = _block(preds, gts)
        name = "frontal" if yaw == 0 and pitch == 0 else f"yaw{yaw:+g}_pitch{pitch:+g}"
        bins[name] = OrderedDict(yaw_deg=yaw, pitch_deg=pitch, clips=int(subset["clip_id"].nunique()), **block)
    return OrderedDict(bins=bins, excluded_clips=excluded)


def kept_count(percent: float, total: int) -> int:
    """ceil(percent% of total), robust to float noise in the percentage."""
    return int(math.ceil(round(percent * total / 100.0, 9)))


def leave_n_in_mask(uncertainty: np.ndarray, percent: float, mode: FilterMode) -> np.ndarray:
    """
    Rows kept at ``percent``: the lowest (or highest) uncertainties, ties
    broken by row order.
    """
    u = np.asarray(uncertainty, dtype=np.float64)
    position = np.arange(u.size)
    primary = u if FilterMode(mode) is FilterMode.LOWEST else -u
    order = np.lexsort((position, primary))
    mask = np.zeros(u.size, dtype=bool)
    mask[order[:kept_count(percent, u.size)]] = True
    return mask


def leave_n_in(
    preds: np.ndarray,
    cumulative_uncerts: np.ndarray,
    gts: np.ndarray,
    ns: Sequence[float] = (25, 50, 75, 100),
    mode: FilterMode = FilterMode.LOWEST,
) -> "OrderedDict[str, List[Dict[str, Any]]]":
    """
    CCC and MAE on the N% of frames with the lowest (or highest) cumulative
    uncertainty, per dimension, using that dimension's uncertainty.

    Rows must already be in (clip_id, frame) order.
    """
    preds, gts = _check_aligned(preds, gts)
    uncerts = np.asarray(cumulative_uncerts, dtype=np.float64).reshape(-1, 2)
    if uncerts.shape != preds.shape:
        raise Misalignment(f"{uncerts.shape[0]} uncertainties for {preds.shape[0]} predictions")
    curves: "OrderedDict[str, List[Dict[str, Any]]]" = OrderedDict()
    for col, (name, short) in enumerate(DIMENSIONS):
        rows = []
        for n in ns:
            mask = leave_n_in_mask(uncerts[:, col], n, mode)
            x, y = preds[mask, col], gts[mask, col]
            rows.append(OrderedDict(
                n=n,
                kept=int(mask.sum()),
                ccc=ccc(x, y) if x.size >= 2 else 0.0,
                mae=mae(x, y),
            ))
        curves[name] = rows
    return curves


def uncertainty_error_correlation(preds: np.ndarray, cumulative_uncerts: np.ndarray, gts: np.ndarray) -> "OrderedDict[str, float]":
    """Spearman correlation of cumulative uncertainty with absolute error, per dimension."""
    preds, gts = _check_aligned(preds, gts)
    uncerts = np.asarray(cumulative_uncerts, dtype=np.float64).reshape(-1, 2)
    return OrderedDict(
        (name, spearman(uncerts[:, col], np.abs(preds[:, col] - gts[:, col])) if preds.shape[0] >= 2 else 0.0)
        for col, (name, _) in enumerate(DIMENSIONS)
    )


def rater_report(
    annotations: Sequence[ClipAnnotation],
    weighting: WmaeWeighting = WmaeWeighting.RELIABILITY,
) -> Optional["OrderedDict[str, Any]"]:
    """
    Annotator reliabilities and dataset WMAE.

    Returns None when no clip has two raters or some rater shares fewer
    than two multi-rater clips with the others, as happens on small splits;
    the report then has no rater block.
    """
    grouped = group_by_clip(annotations)
    multi = OrderedDict((k, v) for k, v in grouped.items() if len(v) >= 2)
    if len(multi) < len(grouped):
        logger.warning(f"{len(grouped) - len(multi)} clips have a single rater and are left out of WMAE")
    if not multi:
        logger.warning("No clip has two or more raters; skipping rater statistics")
        return None
    try:
        reliabilities = annotator_reliability(multi)
    except InsufficientOverlap as e:
        logger.warning(f"Skipping rater statistics: {e}")
        return None
    wv, wa = wmae(multi, reliabilities, weighting)
    return OrderedDict(
        weighting=WmaeWeighting(weighting).value,
        clips=len(multi),
        reliabilities=OrderedDict(sorted(reliabilities.items())),
        wmae_v=wv,
        wmae_a=wa,
    )


# ============================================================================
# REPORT
# ============================================================================

@dataclass
class EvalReport:
    overall: "OrderedDict[str, Any]"
    quadrants: "OrderedDict[str, Any]"
    grid: "OrderedDict[str, Any]"
    pose: Optional["OrderedDict[str, Any]"] = None
    leave_n_in: "OrderedDict[str, Any]" = field(default_factory=OrderedDict)
    raters: Optional["OrderedDict[str, Any]"] = None

    def to_dict(self) -> "OrderedDict[str, Any]":
        out: "OrderedDict[str, Any]" = OrderedDict(
            overall=self.overall,
            quadrants=self.quadrants,
            grid=self.grid,
        )
        if self.pose is not None:
            out["pose"] = self.pose
        out["leave_n_in"] = self.leave_n_in
        if self.raters is not None:
            out["raters"] = self.raters
        return out


@performance_monitor.track_operation("evaluate")
def evaluate(
    table: pd.DataFrame,
    cfg: EvalConfig,
    annotations: Optional[Sequence[ClipAnnotation]] = None,
) -> EvalReport:
    """Run every protocol over a frame table built by ``build_frame_table``."""
    preds, gts = _arrays(table)
    uncerts = table[["u_cum_v", "u_cum_a"]].to_numpy()

    leave: "OrderedDict[str, Any]" = OrderedDict()
    for mode in cfg.filters:
        leave[FilterMode(mode).value] = leave_n_in(preds, uncerts, gts, cfg.leave_n, mode)
    leave["spearman"] = uncertainty_error_correlation(preds, uncerts, gts)

    has_pose = bool((table["yaw"].notna() & table["pitch"].notna()).any())
    report = EvalReport(
        overall=overall_eval(preds, gts),
        quadrants=quadrant_report(preds, gts),
        grid=grid_report(preds, gts, cfg.grid_res, cfg.thresholds),
        pose=pose_report(table) if has_pose else None,
        leave_n_in=leave,
    )
    if annotations:
        report.raters = rater_report(annotations, cfg.wmae_weighting)
    logger.info(
        f"Evaluated {report.overall['n_frames']} frames: "
        f"CCC ({report.overall['ccc_v']:.3f}, {report.overall['ccc_a']:.3f}), "
        f"MAE ({report.overall['mae_v']:.3f}, {report.overall['mae_a']:.3f})"
    )
    return report


# ============================================================================
# FEATURE BENCHMARK
# ============================================================================

def landmark_report(nmes: Sequence[float], threshold: float = 0.08, steps: int = 1001) -> "OrderedDict[str, Any]":
    """NME summary, failure rate and CED curve of per-image landmark errors."""
    values = [float(v) for v in nmes]
    errors, curve = ced_curve(values, threshold, steps)
    return OrderedDict(
        n_images=len(values),
        nme_mean=float(np.mean(values)) if values else None,
        failure_threshold=threshold,
        failure_rate=failure_rate(values, threshold),
        ced_auc=ced_auc(values, threshold, steps),
        ced=OrderedDict(error=errors.tolist(), fraction=curve.tolist()),
        nme=values,
    )


def feature_benchmark(
    pairs: Sequence[Tuple[FeatureTrace, FeatureTrace]],
    threshold: float = 0.08,
    steps: int = 1001,
) -> "OrderedDict[str, Any]":
    """
    Compare predicted descriptor traces with reference traces.

    Only frames valid in both traces count. Reference landmarks with
    uncertainty >= 0.9 are treated as occluded when scoring the predicted
    uncertainties.

    Raises:
        Misalignment: If paired traces differ in length or frame indices
    """
    nmes: List[float] = []
    pred_aus: List[np.ndarray] = []
    ref_aus: List[np.ndarray] = []
    pred_u: List[np.ndarray] = []
    occluded: List[np.ndarray] = []
    for predicted, reference in pairs:
        if [f.frame_index for f in predicted.frames] != [f.frame_index for f in reference.frames]:
            raise Misalignment(f"Traces of '{reference.clip_id}' cover different frames")
        for p, r in zip(predicted.frames, reference.frames):
            if not (p.valid and r.valid):
                continue
            nmes.append(nme(p.landmarks, r.landmarks))
            pred_aus.append(p.au_intensities)
            ref_aus.append(r.au_intensities)
            pred_u.append(p.landmark_uncertainties)
            occluded.append(r.landmark_uncertainties >= OCCLUDED_THRESHOLD)

    report: "OrderedDict[str, Any]" = OrderedDict(landmarks=landmark_report(nmes, threshold, steps))
    report["au_icc"] = au_icc_table(np.array(pred_aus), np.array(ref_aus)) if len(pred_aus) >= 2 else None
    flags = np.concatenate(occluded) if occluded else np.zeros(0, dtype=bool)
    if flags.any() and not flags.all():
        report["occlusion_auc"] = occlusion_auc(np.concatenate(pred_u), flags)
    else:
        report["occlusion_auc"] = None
    return report
