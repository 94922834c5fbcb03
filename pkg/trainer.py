"""
Training Module

Loss, optimizer, training loop and gradient verification for the temporal
regressor.

Loss per dimension (valence, arousal), averaged over the two:
    evidential NLL + lambda_reg * |y - gamma| * (2 nu + alpha) + lambda_ccc * (1 - CCC)
where the first two terms are averaged over the supervised frames of the
batch and CCC is computed over the same frames.
"""
from typing import List, Optional, Sequence, Tuple
from dataclasses import dataclass
import logging
import math

import numpy as np
from scipy.special import digamma, gammaln

from pipeline import normalize_frame
from performance_optimizer import ClipBatchProcessor, performance_monitor
from regressor import EmptyTrainSet, EvidentialParams, NonFiniteLoss, TemporalRegressor
from settings import TrainConfig
from trace_io import Split, load_manifest, read_trace, resolve_trace_path

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# denominator floor of the relative error; below it errors are absolute
GRAD_CHECK_FLOOR = 1e-5


@dataclass
class LabelledClip:
    """Normalized features of one clip with its (valence, arousal) label."""
    clip_id: str
    features: np.ndarray  # (T, 219)
    label: np.ndarray     # (2,)


@dataclass
class TrainingBatch:
    x: np.ndarray     # (B, L, F)
    y: np.ndarray     # (B, L, 2)
    mask: np.ndarray  # (B, L) bool, True on supervised frames


# ============================================================================
# LOSS
# ============================================================================

def _ccc_and_grad(x: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    m = x.size
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    cov = float(np.mean(dx * dy))
    denom = float(np.mean(dx * dx) + np.mean(dy * dy) + (mx - my) ** 2)
    if denom < 1e-12:
        return 0.0, np.zeros_like(x)
    ccc = 2.0 * cov / denom
    grad = 2.0 * dy / (m * denom) - 2.0 * cov / denom ** 2 * (2.0 * dx + 2.0 * (mx - my)) / m
    return ccc, grad


def evidential_loss(
    params: EvidentialParams,
    y: np.ndarray,
    mask: np.ndarray,
    tc: TrainConfig,
) -> Tuple[float, EvidentialParams]:
    """
    Scalar training loss and its gradient w.r.t. the evidential parameters.

    Args:
        params: Model outputs, arrays of shape (B, L, 2)
        y: Targets, shape (B, L, 2)
        mask: Supervised positions, shape (B, L)
        tc: Loss weights

    Returns:
        (loss, gradients shaped like ``params``)

    Raises:
        NonFiniteLoss: If the loss is NaN or infinite
    """
    mask = np.asarray(mask, dtype=bool)
    n_frames = int(mask.sum())
    if n_frames == 0:
        raise EmptyTrainSet("Batch has no supervised frames")
    gamma, nu, alpha, beta = params.gamma, params.nu, params.alpha, params.beta
    r = y - gamma
    omega = 2.0 * beta * (1.0 + nu)
    s = r * r * nu + omega

    nll = (0.5 * np.log(np.pi / nu) - alpha * np.log(omega) + (alpha + 0.5) * np.log(s)
           + gammaln(alpha) - gammaln(alpha + 0.5))
    reg = np.abs(r) * (2.0 * nu + alpha)

    m = mask[..., None]
    scale = 1.0 / (n_frames * gamma.shape[-1])
    loss = float(np.sum(np.where(m, nll + tc.lambda_reg * reg, 0.0)) * scale)

    d_gamma = -(alpha + 0.5) * 2.0 * r * nu / s - tc.lambda_reg * np.sign(r) * (2.0 * nu + alpha)
    d_nu = -0.5 / nu - 2.0 * alpha * beta / omega + (alpha + 0.5) * (r * r + 2.0 * beta) / s + tc.lambda_reg * 2.0 * np.abs(r)
    d_alpha = -np.log(omega) + np.log(s) + digamma(alpha) - digamma(alpha + 0.5) + tc.lambda_reg * np.abs(r)
    d_beta = -alpha / beta + (alpha + 0.5) * 2.0 * (1.0 + nu) / s
    grads = EvidentialParams(
        gamma=np.where(m, d_gamma, 0.0) * scale,
        nu=np.where(m, d_nu, 0.0) * scale,
        alpha=np.where(m, d_alpha, 0.0) * scale,
        beta=np.where(m, d_beta, 0.0) * scale,
    )

    if tc.lambda_ccc:
        n_dims = gamma.shape[-1]
        for dim in range(n_dims):
            ccc, d_ccc = _ccc_and_grad(gamma[..., dim][mask], y[..., dim][mask])
            loss += tc.lambda_ccc * (1.0 - ccc) / n_dims
            grads.gamma[..., dim][mask] -= tc.lambda_ccc * d_ccc / n_dims

    if not math.isfinite(loss):
        raise NonFiniteLoss(f"Loss became {loss}")
    return loss, grads


class RegressorObjective:
    """Flat-parameter view of the model loss, as used by the optimizer and grad_check."""

    def __init__(self, model: TemporalRegressor, tc: TrainConfig) -> None:
        self.model = model
        self.tc = tc

    def get_flat_params(self) -> np.ndarray:
        return self.model.get_flat_params()

    def set_flat_params(self, flat: np.ndarray) -> None:
        self.model.set_flat_params(flat)

    def loss_and_grad(self, batch: TrainingBatch) -> Tuple[float, np.ndarray]:
        params, cache = self.model.forward(batch.x, keep_cache=True)
        loss, d_params = evidential_loss(params, batch.y, batch.mask, self.tc)
        grads = self.model.backward(cache, d_params)
        return loss, self.model.flatten_grads(grads)


def grad_check(
    objective,
    sample,
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Largest relative error between analytic and central-difference gradients.

    ``objective`` exposes ``get_flat_params``, ``set_flat_params`` and
    ``loss_and_grad(sample)``. With ``max_coords`` set, a seeded random subset
    of that many coordinates (at least 200) is checked instead of all.
    Parameters are restored afterwards.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    theta = np.array(objective.get_flat_params(), dtype=np.float64)
    _, analytic = objective.loss_and_grad(sample)
    coords = np.arange(theta.size)
    if max_coords is not None and theta.size > max(max_coords, 200):
        coords = np.sort(np.random.default_rng(seed).choice(theta.size, size=max(max_coords, 200), replace=False))

    worst = 0.0
    try:
        for i in coords:
            bumped = theta.copy()
            bumped[i] = theta[i] + eps
            objective.set_flat_params(bumped)
            plus, _ = objective.loss_and_grad(sample)
            bumped[i] = theta[i] - eps
            objective.set_flat_params(bumped)
            minus, _ = objective.loss_and_grad(sample)
            numeric = (plus - minus) / (2.0 * eps)
            a = float(analytic[i])
            error = abs(a - numeric) / max(abs(a), abs(numeric), GRAD_CHECK_FLOOR)
            worst = max(worst, error)
    finally:
        objective.set_flat_params(theta)
    logger.debug(f"Gradient check over {coords.size} coordinates: max relative error {worst:.3e}")
    return worst


# ============================================================================
# OPTIMIZER
# ============================================================================

class AdamOptimizer:
    """Adam over a flat parameter vector, with global-norm gradient clipping."""

    def __init__(self, n_params: int, learning_rate: float, clip_norm: Optional[float] = None) -> None:
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.step_count = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.clip_norm is not None:
            norm = float(np.linalg.norm(grad))
            if norm > self.clip_norm:
                grad = grad * (self.clip_norm / norm)
        self.step_count += 1
        self.m = ADAM_BETA1 * self.m + (1.0 - ADAM_BETA1) * grad
        self.v = ADAM_BETA2 * self.v + (1.0 - ADAM_BETA2) * grad * grad
        m_hat = self.m / (1.0 - ADAM_BETA1 ** self.step_count)
        v_hat = self.v / (1.0 - ADAM_BETA2 ** self.step_count)
        return theta - self.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# ============================================================================
# DATA
# ============================================================================

def clip_features(trace) -> np.ndarray:
    """Gated, normalized (T, 219) features of a whole trace."""
    return np.array([normalize_frame(f) for f in trace.frames])


@performance_monitor.track_operation("load_training_clips")
def load_training_clips(manifest_path: str, split: Split = Split.TRAIN, threads: int = 1) -> List[LabelledClip]:
    """Read and normalize every labelled clip of ``split``."""
    manifest = load_manifest(manifest_path)
    entries = [c for c in manifest.in_split(split) if c.label is not None]

    def load(entry) -> LabelledClip:
        trace = read_trace(resolve_trace_path(manifest_path, entry))
        label = np.array([entry.label.valence, entry.label.arousal])
        return LabelledClip(entry.clip_id, clip_features(trace), label)

    clips = ClipBatchProcessor(threads).map(load, entries)
    logger.info(f"Loaded {len(clips)} labelled {Split(split).value} clips")
    return clips


def make_batch(clips: Sequence[LabelledClip], receptive_field: int) -> TrainingBatch:
    """
    Stack clips into a batch.

    Each clip is left-padded with ``receptive_field - 1`` copies of its first
    frame, matching the streaming window warm-up, and right-padded with zeros
    to the longest clip. Only the real frames are supervised, each with the
    clip label.
    """
    lead = receptive_field - 1
    length = lead + max(c.features.shape[0] for c in clips)
    n_features = clips[0].features.shape[1]
    x = np.zeros((len(clips), length, n_features))
    y = np.zeros((len(clips), length, 2))
    mask = np.zeros((len(clips), length), dtype=bool)
    for b, clip in enumerate(clips):
        t = clip.features.shape[0]
        x[b, :lead] = clip.features[0]
        x[b, lead:lead + t] = clip.features
        y[b, lead:lead + t] = clip.label
        mask[b, lead:lead + t] = True
    return TrainingBatch(x, y, mask)


# ============================================================================
# TRAINING LOOP
# ============================================================================

@performance_monitor.track_operation("train")
def train(
    model: TemporalRegressor,
    clips: Sequence[LabelledClip],
    tc: TrainConfig,
) -> Tuple[TemporalRegressor, List[float]]:
    """
    Train ``model`` in place with Adam.

    Clip order per epoch comes from a generator seeded with ``tc.seed``, so
    identical inputs give identical parameters and loss history.

    Returns:
        The model and the mean batch loss of every epoch

    Raises:
        EmptyTrainSet: If ``clips`` is empty
        NonFiniteLoss: If the loss diverges
    """
    clips = [c for c in clips if c.features.shape[0] > 0]
    if not clips:
        raise EmptyTrainSet("No labelled training clips")

    objective = RegressorObjective(model, tc)
    optimizer = AdamOptimizer(model.n_parameters, tc.learning_rate, tc.clip_norm)
    rng = np.random.default_rng(tc.seed)
    history: List[float] = []
    theta = model.get_flat_params()

    for epoch in range(tc.epochs):
        order = rng.permutation(len(clips))
        losses = []
        for start in range(0, len(clips), tc.batch_size):
            batch = make_batch([clips[i] for i in order[start:start + tc.batch_size]], model.receptive_field)
            loss, grad = objective.loss_and_grad(batch)
            theta = optimizer.step(theta, grad)
            model.set_flat_params(theta)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        logger.info(f"Epoch {epoch + 1}/{tc.epochs}: loss {history[-1]:.6f}")
    return model, history


def write_loss_history(history: Sequence[float], path: str) -> str:
    """One ``epoch,loss`` row per epoch."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(history, start=1):
            fh.write(f"{epoch},{loss:.6f}\n")
    return path
