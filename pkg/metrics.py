"""
Metrics Module

Agreement and error measures used by the benchmark reports: CCC and MAE for
valence/arousal, ICC(3,1) for AU intensities and annotator reliability, NME
and CED-AUC for landmarks, WMAE for inter-rater disagreement, plus the ROC-AUC
of landmark uncertainty against occlusion.

All functions are pure.
"""
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple
from collections import OrderedDict
import itertools
import logging
import math

import numpy as np
from scipy import stats
from scipy.integrate import trapezoid

from affect_types import AU_CODES, Landmarks68
from settings import WmaeWeighting
from trace_io import ClipAnnotation

logger = logging.getLogger(__name__)

RELIABILITY_FLOOR = 1e-3
INVERSE_DISTANCE_OFFSET = 1e-2


class MetricError(Exception):
    """Base class for metric input errors."""
    pass


class LengthMismatch(MetricError):
    pass


class TooShort(MetricError):
    pass


class DegenerateAnova(MetricError):
    """ICC denominator is zero."""
    pass


class ZeroInterOcular(MetricError):
    pass


class InsufficientOverlap(MetricError):
    def __init__(self, rater: str) -> None:
        self.rater = rater
        super().__init__(f"Rater '{rater}' shares fewer than 2 clips with other raters")


class SingleRaterClip(MetricError):
    def __init__(self, clip_id: str) -> None:
        self.clip_id = clip_id
        super().__init__(f"Clip '{clip_id}' has fewer than 2 raters")


def _pair(x: Sequence[float], y: Sequence[float], minimum: int) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise LengthMismatch(f"Sequences differ in length: {x.size} vs {y.size}")
    if x.size < minimum:
        raise TooShort(f"Need at least {minimum} values, got {x.size}")
    return x, y


# ============================================================================
# VALENCE / AROUSAL
# ============================================================================

def ccc(x: Sequence[float], y: Sequence[float]) -> float:
    """
    Lin's concordance correlation coefficient with population moments.

    Returns 0 when the denominator vanishes (both sequences constant and equal).

    Raises:
        LengthMismatch: If the sequences differ in length
        TooShort: If fewer than 2 values are given
    """
    x, y = _pair(x, y, 2)
    mx, my = x.mean(), y.mean()
    cov = np.mean((x - mx) * (y - my))
    denom = x.var() + y.var() + (mx - my) ** 2
    if denom <= 0.0:
        return 0.0
    return float(2.0 * cov / denom)


def mae(x: Sequence[float], y: Sequence[float]) -> float:
    """Mean absolute deviation between two equal-length sequences."""
    x, y = _pair(x, y, 1)
    return float(np.mean(np.abs(x - y)))


def mae_pooled(per_clip_errors: Iterable[Sequence[float]]) -> float:
    """Mean of the absolute per-frame errors of all clips taken together."""
    pooled = [np.abs(np.asarray(e, dtype=np.float64).ravel()) for e in per_clip_errors]
    pooled = np.concatenate(pooled) if pooled else np.zeros(0)
    if pooled.size == 0:
        raise TooShort("No frame errors given")
    return float(pooled.mean())


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation; 0 when either sequence is constant."""
    x, y = _pair(x, y, 2)
    if np.all(x == x[0]) or np.all(y == y[0]):
        return 0.0
    return float(stats.spearmanr(x, y)[0])


# ============================================================================
# INTRACLASS CORRELATION
# ============================================================================

def icc31(ratings: np.ndarray) -> float:
    """
    ICC(3,1), two-way mixed consistency, single rater.

    Args:
        ratings: Matrix of n targets (rows) by k raters (columns)

    Returns:
        (BMS - EMS) / (BMS + (k - 1) EMS)

    Raises:
        TooShort: If there are fewer than 2 targets or 2 raters
        DegenerateAnova: If the denominator is zero
    """
    m = np.asarray(ratings, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2 or m.shape[1] < 2:
        raise TooShort(f"ICC needs an n x k matrix with n, k >= 2, got shape {m.shape}")
    n, k = m.shape
    grand = m.mean()
    row_means = m.mean(axis=1)
    col_means = m.mean(axis=0)
    ss_rows = k * np.sum((row_means - grand) ** 2)
    residual = m - row_means[:, None] - col_means[None, :] + grand
    ss_error = np.sum(residual ** 2)
    bms = ss_rows / (n - 1)
    ems = ss_error / ((n - 1) * (k - 1))
    denom = bms + (k - 1) * ems
    if denom <= 0.0:
        raise DegenerateAnova("Ratings have no between-target or residual variance")
    return float((bms - ems) / denom)


def au_icc_table(predicted: np.ndarray, reference: np.ndarray) -> "OrderedDict[str, float]":
    """
    Per-AU ICC(3,1) between predicted and reference intensities.

    Args:
        predicted: (n, 15) AU intensities
        reference: (n, 15) AU intensities

    Returns:
        Mapping of AU code to ICC, plus ``mean`` over the 15 AUs. AUs without
        variance score 0.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if predicted.shape != reference.shape:
        raise LengthMismatch(f"AU arrays differ in shape: {predicted.shape} vs {reference.shape}")
    table: "OrderedDict[str, float]" = OrderedDict()
    for k, code in enumerate(AU_CODES):
        try:
            table[code] = icc31(np.column_stack([predicted[:, k], reference[:, k]]))
        except DegenerateAnova:
            logger.warning(f"AU{code} has no variance; ICC reported as 0")
            table[code] = 0.0
    table["mean"] = float(np.mean([table[c] for c in AU_CODES]))
    return table


# ============================================================================
# LANDMARKS
# ============================================================================

def nme(pred: Landmarks68, gt: Landmarks68) -> float:
    """
    Mean point-to-point distance normalized by the reference inter-ocular distance.

    Raises:
        ZeroInterOcular: If the reference outer eye corners coincide
    """
    d_io = gt.inter_ocular
    if d_io == 0.0:
        raise ZeroInterOcular("Reference outer eye corners coincide")
    return float(np.mean(np.linalg.norm(pred.points - gt.points, axis=1)) / d_io)


def ced_curve(nmes: Sequence[float], threshold: float, steps: int) -> Tuple[np.ndarray, np.ndarray]:
    """Error grid on [0, threshold] and the fraction of NMEs at or below each value."""
    if threshold <= 0:
        raise ValueError(f"threshold must be > 0, got {threshold}")
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    errors = np.linspace(0.0, threshold, steps)
    values = np.asarray(nmes, dtype=np.float64).ravel()
    if values.size == 0:
        return errors, np.zeros(steps)
    return errors, (values[:, None] <= errors[None, :]).mean(axis=0)


def ced_auc(nmes: Sequence[float], threshold: float, steps: int) -> float:
    """Area under the CED curve up to ``threshold``, as a percentage."""
    errors, curve = ced_curve(nmes, threshold, steps)
    return float(trapezoid(curve, errors) / threshold * 100.0)


def failure_rate(nmes: Sequence[float], threshold: float) -> float:
    values = np.asarray(nmes, dtype=np.float64).ravel()
    return float(np.mean(values > threshold)) if values.size else 0.0


def occlusion_auc(uncertainties: Sequence[float], occluded: Sequence[bool]) -> float:
    """
    ROC-AUC of landmark uncertainty as a detector of occluded landmarks,
    from the Mann-Whitney U statistic (ties count one half).

    Raises:
        TooShort: If either class is empty
    """
    u = np.asarray(uncertainties, dtype=np.float64).ravel()
    occ = np.asarray(occluded, dtype=bool).ravel()
    if u.size != occ.size:
        raise LengthMismatch(f"{u.size} uncertainties for {occ.size} occlusion flags")
    positives, negatives = u[occ], u[~occ]
    if positives.size == 0 or negatives.size == 0:
        raise TooShort("Occlusion AUC needs both occluded and visible landmarks")
    statistic = stats.mannwhitneyu(positives, negatives, alternative="two-sided").statistic
    return float(statistic / (positives.size * negatives.size))


# ============================================================================
# INTER-RATER DISAGREEMENT
# ============================================================================

def annotator_reliability(
    grouped: Mapping[str, Sequence[ClipAnnotation]],
    eps: float = RELIABILITY_FLOOR,
) -> Dict[str, float]:
    """
    Reliability weight of every rater.

    Each rater's valence and arousal values are paired with the mean of the
    other raters on every clip they share; the ICC(3,1) of those pairs is
    floored at ``eps`` and the weights are scaled so the largest is 1.

    Valence and arousal rows are pooled into one ICC, so a rater gets a
    single weight for both dimensions and each shared clip contributes two
    targets.

    Raises:
        InsufficientOverlap: If a rater shares fewer than 2 clips with others
    """
    raters = sorted({a.rater_id for annotations in grouped.values() for a in annotations})
    raw: Dict[str, float] = {}
    for rater in raters:
        rows: List[Tuple[float, float]] = []
        shared = 0
        for clip_id in sorted(grouped):
            annotations = grouped[clip_id]
            own = [a for a in annotations if a.rater_id == rater]
            others = [a for a in annotations if a.rater_id != rater]
            if not own or not others:
                continue
            shared += 1
            rows.append((own[0].va.valence, float(np.mean([a.va.valence for a in others]))))
            rows.append((own[0].va.arousal, float(np.mean([a.va.arousal for a in others]))))
        if shared < 2:
            raise InsufficientOverlap(rater)
        try:
            value = icc31(np.array(rows))
        except DegenerateAnova:
            value = eps
        raw[rater] = max(value, eps)
    top = max(raw.values()) if raw else 1.0
    return {rater: raw[rater] / top for rater in raters}


def _clip_wmae(annotations: Sequence[ClipAnnotation], reliabilities: Optional[Mapping[str, float]],
               weighting: WmaeWeighting) -> Tuple[float, float]:
    result = []
    for dim in ("valence", "arousal"):
        num = 0.0
        den = 0.0
        for ai, aj in itertools.combinations(annotations, 2):
            if weighting is WmaeWeighting.INVERSE_DISTANCE:
                distance = math.hypot(ai.va.valence - aj.va.valence, ai.va.arousal - aj.va.arousal)
                w = 1.0 / (distance + INVERSE_DISTANCE_OFFSET)
            elif reliabilities is None:
                w = 1.0
            else:
                w = reliabilities[ai.rater_id] * reliabilities[aj.rater_id]
            num += w * abs(getattr(ai.va, dim) - getattr(aj.va, dim))
            den += w
        result.append(num / den)
    return result[0], result[1]


def wmae(
    grouped: Mapping[str, Sequence[ClipAnnotation]],
    reliabilities: Optional[Mapping[str, float]] = None,
    weighting: WmaeWeighting = WmaeWeighting.RELIABILITY,
) -> Tuple[float, float]:
    """
    Weighted mean absolute error between raters, averaged over clips.

    Per clip and dimension: sum_{i<j} w_ij |a_i - a_j| / sum_{i<j} w_ij, with
    w_ij = r_i r_j (reliability weighting, equal weights when
    ``reliabilities`` is None) or 1 / (d_ij + 0.01) where d_ij is the distance
    between the two raters' VA points.

    Raises:
        SingleRaterClip: If a clip has fewer than 2 raters
    """
    weighting = WmaeWeighting(weighting)
    per_clip = []
    for clip_id in sorted(grouped):
        annotations = grouped[clip_id]
        if len(annotations) < 2:
            raise SingleRaterClip(clip_id)
        per_clip.append(_clip_wmae(annotations, reliabilities, weighting))
    if not per_clip:
        raise TooShort("No annotated clips")
    values = np.array(per_clip)
    return float(values[:, 0].mean()), float(values[:, 1].mean())
