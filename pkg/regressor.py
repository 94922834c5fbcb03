"""
Temporal Regressor Module

A causal temporal-convolution network in plain numpy that maps windows of
219-d frame features to per-frame valence/arousal, each with a
Normal-Inverse-Gamma evidential head so that epistemic and aleatoric
uncertainty come out of a single forward pass.

Architecture (all weights float64):
    h0 = tanh(x W_in + b_in)
    h_l = h_{l-1} + tanh(causal_conv_l(h_{l-1}))     kernel K, dilation 2^l
    o  = h_L W_out + b_out                           8 outputs per frame
    per dimension: gamma = o, nu = softplus(o) + eps, alpha = 1 + softplus(o) + eps,
                   beta = softplus(o) + eps

Gradients are hand-derived; ``trainer.grad_check`` verifies them.
"""
from typing import Dict, List, Optional, Tuple
from dataclasses import dataclass
import json
import logging
import os
import struct

import numpy as np
from scipy.special import expit

from affect_types import AffectOutput, UncertaintyTriple, VAPoint
from settings import ModelConfig, PipelineConfig

logger = logging.getLogger(__name__)

N_DIMS = 2  # valence, arousal
N_HEAD_OUTPUTS = 4 * N_DIMS
POSITIVE_EPS = 1e-6

CHECKPOINT_MAGIC = b"AFTRCKPT"
CHECKPOINT_VERSION = 1


class RegressorError(Exception):
    """Base class for model errors."""
    pass


class ShapeMismatch(RegressorError):
    """Input does not match the model's feature dimension."""
    pass


class CheckpointError(RegressorError):
    """A checkpoint is malformed or does not match the expected configuration."""
    pass


class NonFiniteLoss(RegressorError):
    """Training produced a NaN or infinite loss."""
    pass


class EmptyTrainSet(RegressorError):
    """No labelled clips are available for training."""
    pass


@dataclass
class EvidentialParams:
    """NIG parameters; the last axis indexes the dimension (valence, arousal)."""
    gamma: np.ndarray
    nu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def at(self, *index) -> "EvidentialParams":
        return EvidentialParams(self.gamma[index], self.nu[index], self.alpha[index], self.beta[index])


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def squash(u):
    """Monotone map of [0, inf) onto [0, 1): u / (1 + u)."""
    return 1.0 - 1.0 / (1.0 + u)


def moments(p: EvidentialParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (mean, aleatoric_raw, epistemic_raw) of NIG parameters."""
    aleatoric = p.beta / (p.alpha - 1.0)
    epistemic = p.beta / (p.nu * (p.alpha - 1.0))
    return p.gamma, aleatoric, epistemic


def to_affect_output(
    moments_v: Tuple[float, float, float],
    moments_a: Tuple[float, float, float],
    frame_index: Optional[int] = None,
) -> AffectOutput:
    """Clamp the means and squash raw variances into the output ranges."""
    triples = []
    for _, aleatoric, epistemic in (moments_v, moments_a):
        e, a = float(epistemic), float(aleatoric)
        triples.append(UncertaintyTriple(
            epistemic=min(1.0, max(0.0, squash(e))),
            aleatoric=min(1.0, max(0.0, squash(a))),
            cumulative=min(1.0, max(0.0, squash(e + a))),
        ))
    return AffectOutput(
        va=VAPoint.clamped(float(moments_v[0]), float(moments_a[0])),
        uncertainty_valence=triples[0],
        uncertainty_arousal=triples[1],
        frame_index=frame_index,
    )


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count of a model built from ``config``."""
    f, h, k = config.input_dim, config.hidden_dim, config.kernel_size
    return f * h + h + config.temporal_layers * (k * h * h + h) + h * N_HEAD_OUTPUTS + N_HEAD_OUTPUTS


class TemporalRegressor:
    """Causal dilated-convolution regressor with evidential VA heads."""

    def __init__(self, config: ModelConfig, params: Optional[Dict[str, np.ndarray]] = None) -> None:
        self.config = config
        self.params: Dict[str, np.ndarray] = params if params is not None else self._initial_params()
        for name, shape in self.param_shapes().items():
            if self.params[name].shape != shape:
                raise ShapeMismatch(f"Parameter {name} has shape {self.params[name].shape}, expected {shape}")

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        cfg = self.config
        h = cfg.hidden_dim
        shapes: Dict[str, Tuple[int, ...]] = {"W_in": (cfg.input_dim, h), "b_in": (h,)}
        for layer in range(cfg.temporal_layers):
            shapes[f"conv{layer}_W"] = (cfg.kernel_size, h, h)
            shapes[f"conv{layer}_b"] = (h,)
        shapes["W_out"] = (h, N_HEAD_OUTPUTS)
        shapes["b_out"] = (N_HEAD_OUTPUTS,)
        return shapes

    def _initial_params(self) -> Dict[str, np.ndarray]:
        rng = np.random.default_rng(self.config.seed)
        params = {}
        for name, shape in self.param_shapes().items():
            if len(shape) == 1:
                params[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[:-1]))
                bound = 1.0 / np.sqrt(fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape)
        return params

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def receptive_field(self) -> int:
        return self.config.receptive_field

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[name].ravel() for name in self.param_shapes()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_parameters:
            raise ShapeMismatch(f"Expected {self.n_parameters} parameters, got {flat.size}")
        offset = 0
        for name, shape in self.param_shapes().items():
            size = int(np.prod(shape))
            self.params[name] = flat[offset:offset + size].reshape(shape).copy()
            offset += size

    def flatten_grads(self, grads: Dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[name].ravel() for name in self.param_shapes()])

    # ------------------------------------------------------------------
    # forward / backward
    # ------------------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[-1] != self.config.input_dim or x.shape[1] == 0:
            raise ShapeMismatch(f"Expected window of shape (N, {self.config.input_dim}), got {x.shape}")
        return x

    def forward(self, x: np.ndarray, keep_cache: bool = False):
        """
        Run the model over one window (N, F) or a batch (B, N, F).

        Args:
            x: Window(s) of normalized frame features
            keep_cache: Also return the activations needed by ``backward``

        Returns:
            EvidentialParams with arrays of shape (B, N, 2), plus the cache
            when ``keep_cache`` is set

        Raises:
            ShapeMismatch: If the feature dimension is wrong
        """
        x = self._check_input(x)
        p = self.params
        k_size = self.config.kernel_size
        length = x.shape[1]

        h = np.tanh(x @ p["W_in"] + p["b_in"])
        cache = {"x": x, "h0": h, "blocks": []}
        for layer, dilation in enumerate(self.config.dilations):
            pad = (k_size - 1) * dilation
            hp = np.concatenate([np.zeros((h.shape[0], pad, h.shape[2])), h], axis=1)
            w = p[f"conv{layer}_W"]
            u = np.broadcast_to(p[f"conv{layer}_b"], h.shape).copy()
            for k in range(k_size):
                start = (k_size - 1 - k) * dilation
                u += hp[:, start:start + length] @ w[k]
            a = np.tanh(u)
            cache["blocks"].append((hp, a))
            h = h + a

        o = h @ p["W_out"] + p["b_out"]
        cache["h_last"] = h
        cache["o"] = o
        o4 = o.reshape(o.shape[0], length, N_DIMS, 4)
        params = EvidentialParams(
            gamma=o4[..., 0],
            nu=softplus(o4[..., 1]) + POSITIVE_EPS,
            alpha=1.0 + softplus(o4[..., 2]) + POSITIVE_EPS,
            beta=softplus(o4[..., 3]) + POSITIVE_EPS,
        )
        if keep_cache:
            return params, cache
        return params

    def backward(self, cache: dict, d_params: EvidentialParams) -> Dict[str, np.ndarray]:
        """
        Backpropagate gradients w.r.t. the evidential parameters to the weights.

        Args:
            cache: Cache from ``forward(..., keep_cache=True)``
            d_params: dLoss/d(gamma, nu, alpha, beta), each shaped (B, N, 2)

        Returns:
            Gradient for every named parameter
        """
        p = self.params
        hidden = self.config.hidden_dim
        k_size = self.config.kernel_size
        o4 = cache["o"].reshape(*d_params.gamma.shape, 4)

        do4 = np.empty_like(o4)
        do4[..., 0] = d_params.gamma
        do4[..., 1] = d_params.nu * expit(o4[..., 1])
        do4[..., 2] = d_params.alpha * expit(o4[..., 2])
        do4[..., 3] = d_params.beta * expit(o4[..., 3])
        do = do4.reshape(cache["o"].shape)

        grads: Dict[str, np.ndarray] = {}
        h_last = cache["h_last"]
        grads["W_out"] = h_last.reshape(-1, hidden).T @ do.reshape(-1, N_HEAD_OUTPUTS)
        grads["b_out"] = do.sum(axis=(0, 1))
        dh = do @ p["W_out"].T

        length = dh.shape[1]
        for layer in reversed(range(self.config.temporal_layers)):
            dilation = self.config.dilations[layer]
            hp, a = cache["blocks"][layer]
            w = p[f"conv{layer}_W"]
            du = dh * (1.0 - a * a)
            du2 = du.reshape(-1, hidden)
            grads[f"conv{layer}_b"] = du2.sum(axis=0)
            dw = np.empty_like(w)
            dhp = np.zeros_like(hp)
            for k in range(k_size):
                start = (k_size - 1 - k) * dilation
                dw[k] = hp[:, start:start + length].reshape(-1, hidden).T @ du2
                dhp[:, start:start + length] += du @ w[k].T
            grads[f"conv{layer}_W"] = dw
            pad = (k_size - 1) * dilation
            dh = dh + dhp[:, pad:]

        h0 = cache["h0"]
        dz = dh * (1.0 - h0 * h0)
        x = cache["x"]
        grads["W_in"] = x.reshape(-1, x.shape[2]).T @ dz.reshape(-1, hidden)
        grads["b_in"] = dz.sum(axis=(0, 1))
        return grads

    # ------------------------------------------------------------------
    # inference
    # ------------------------------------------------------------------

    def predict_last(self, window: np.ndarray) -> np.ndarray:
        """
        Evidential parameters of the window's final position.

        Only the last ``receptive_field`` rows can influence that position,
        so only they are evaluated.

        Returns:
            Array (2, 4) of (gamma, nu, alpha, beta) for valence and arousal
        """
        window = np.asarray(window, dtype=np.float64)
        rows = min(window.shape[0], self.receptive_field)
        params = self.forward(window[-rows:])
        return stack_params(params.at(0, -1))

    def predict_sequence(self, window: np.ndarray) -> np.ndarray:
        """Evidential parameters for every position of one window, shape (N, 2, 4)."""
        params = self.forward(window)
        return stack_params(params.at(0))


def stack_params(p: EvidentialParams) -> np.ndarray:
    """Pack (..., 2) parameter arrays into (..., 2, 4)."""
    return np.stack([p.gamma, p.nu, p.alpha, p.beta], axis=-1)


def output_from_row(row: np.ndarray, frame_index: Optional[int] = None) -> AffectOutput:
    """AffectOutput from one (2, 4) block of evidential parameters."""
    p = EvidentialParams(row[:, 0], row[:, 1], row[:, 2], row[:, 3])
    mean, aleatoric, epistemic = moments(p)
    return to_affect_output(
        (mean[0], aleatoric[0], epistemic[0]),
        (mean[1], aleatoric[1], epistemic[1]),
        frame_index=frame_index,
    )


def init_model(config: ModelConfig) -> TemporalRegressor:
    """Deterministically initialized model for ``config``."""
    model = TemporalRegressor(config)
    logger.debug(f"Initialized regressor with {model.n_parameters} parameters")
    return model


# ============================================================================
# CHECKPOINTS
# ============================================================================
#
# Layout (little-endian):
#   8 bytes   magic "AFTRCKPT"
#   uint32    format version
#   uint32    header length in bytes
#   header    UTF-8 JSON: model config, pipeline config, parameter names and shapes
#   payload   float64 parameters, concatenated in header order

def checkpoint_bytes(model: TemporalRegressor, pipeline: Optional[PipelineConfig] = None) -> bytes:
    header = {
        "model": model.config.model_dump(mode="json"),
        "pipeline": (pipeline or PipelineConfig()).model_dump(mode="json"),
        "params": [[name, list(shape)] for name, shape in model.param_shapes().items()],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = model.get_flat_params().astype("<f8").tobytes()
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + payload


def save_checkpoint(model: TemporalRegressor, path: str, pipeline: Optional[PipelineConfig] = None) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, pipeline))
    logger.info(f"Saved checkpoint to {path}")
    return path


def parse_checkpoint(data: bytes) -> Tuple[TemporalRegressor, PipelineConfig]:
    """
    Rebuild a model and its pipeline configuration from checkpoint bytes.

    Raises:
        CheckpointError: On a bad magic, unsupported version, malformed header
            or a payload that does not match the declared shapes
    """
    prefix = len(CHECKPOINT_MAGIC) + 8
    if len(data) < prefix or data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("Not a checkpoint file")
    version, header_len = struct.unpack("<II", data[len(CHECKPOINT_MAGIC):prefix])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")
    try:
        header = json.loads(data[prefix:prefix + header_len].decode("utf-8"))
        config = ModelConfig(**header["model"])
        pipeline = PipelineConfig(**header["pipeline"])
    except Exception as e:
        raise CheckpointError(f"Malformed checkpoint header: {e}")

    model = TemporalRegressor(config)
    declared = [(name, tuple(shape)) for name, shape in header.get("params", [])]
    if declared != list(model.param_shapes().items()):
        raise CheckpointError("Checkpoint parameter layout does not match its model config")
    payload = data[prefix + header_len:]
    if len(payload) != 8 * model.n_parameters:
        raise CheckpointError(f"Expected {8 * model.n_parameters} payload bytes, got {len(payload)}")
    model.set_flat_params(np.frombuffer(payload, dtype="<f8").astype(np.float64))
    return model, pipeline


def load_checkpoint(path: str) -> Tuple[TemporalRegressor, PipelineConfig]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def check_compatible(model: TemporalRegressor, expected: ModelConfig) -> None:
    """Raise CheckpointError when a loaded model differs from the requested architecture."""
    mine = model.config.model_dump(exclude={"seed"})
    theirs = expected.model_dump(exclude={"seed"})
    if mine != theirs:
        diffs: List[str] = [f"{k}: {mine[k]} != {theirs[k]}" for k in mine if mine[k] != theirs[k]]
        raise CheckpointError("Checkpoint does not match model config (" + ", ".join(diffs) + ")")
