"""Training losses with analytic gradients w.r.t. their probability inputs.

Every loss returns ``(value, grad)`` where ``grad`` has the shape of the
probability (or prediction) grid. Gradients flow back through the softmax
separately via :func:`panolabel.heads.softmax_backward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .grids import VOID_ID, ProbMap, SemanticMap

_LOG_FLOOR = 1e-12
_BINARY_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    """Knobs for the bootstrapped losses.

    top_fraction selects the hardest ceil(fraction * N) pixels. When
    hard_threshold is set, the selection instead keeps every pixel whose
    posterior falls below that fixed cutoff (the alternative reading of
    the bootstrapping rule).
    """

    top_fraction: float = 0.2
    small_instance_weight: float = 3.0
    small_instance_area: int = 64 * 64
    hard_threshold: float | None = None

    def __post_init__(self):
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValidationError("top_fraction must lie in (0, 1]")
        if self.small_instance_weight < 1.0:
            raise ValidationError("small_instance_weight must be >= 1")


@dataclass(frozen=True)
class LossWeights:
    lambda_sem: float = 1.0
    lambda_cen: float = 200.0
    lambda_off: float = 0.01

    def __post_init__(self):
        if min(self.lambda_sem, self.lambda_cen, self.lambda_off) < 0:
            raise ValidationError("loss weights must be nonnegative")


@dataclass(frozen=True)
class PixelWeightMap:
    """Per-pixel loss weights, >= 1 everywhere."""

    weights: np.ndarray  # (height, width) float32

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float32))
        if arr.ndim != 2:
            raise ValidationError("PixelWeightMap must be 2-D")
        if arr.size and arr.min() < 1.0:
            raise ValidationError("pixel weights must be >= 1")
        object.__setattr__(self, "weights", arr)


def _probs_array(probs) -> np.ndarray:
    return probs.data if isinstance(probs, ProbMap) else np.asarray(probs)


def _target_array(target) -> np.ndarray:
    return target.ids if isinstance(target, SemanticMap) else np.asarray(target)


def _gather_true_class(p: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Posteriors of each pixel's labeled class over the non-void pixels."""
    if p.shape[:2] != y.shape:
        raise ValidationError(f"probability grid {p.shape[:2]} vs target {y.shape}")
    flat_y = y.reshape(-1)
    valid = np.flatnonzero(flat_y != VOID_ID)
    if valid.size == 0:
        raise ValidationError("no non-void pixels to supervise")
    cls = flat_y[valid].astype(np.intp)
    if cls.max() >= p.shape[2]:
        raise ValidationError("target contains class ids beyond the probability channels")
    p_true = p.reshape(-1, p.shape[2])[valid, cls].astype(np.float64)
    return p_true, valid, cls


def _scatter_grad(shape, valid, cls, values) -> np.ndarray:
    grad = np.zeros((shape[0] * shape[1], shape[2]), dtype=np.float64)
    grad[valid, cls] = values
    return grad.reshape(shape)


def bootstrapped_ce(probs, target, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """Cross-entropy over the hardest top-K pixels (smallest true-class posterior).

    Ties at the K-th posterior break toward the smaller pixel index. Void
    pixels never participate.
    """
    p = _probs_array(probs)
    y = _target_array(target)
    p_true, valid, cls = _gather_true_class(p, y)

    if cfg.hard_threshold is not None:
        chosen = np.flatnonzero(p_true < cfg.hard_threshold)
        if chosen.size == 0:
            return 0.0, np.zeros(p.shape, dtype=np.float64)
    else:
        k = int(np.ceil(cfg.top_fraction * p_true.size))
        order = np.argsort(p_true, kind="stable")
        chosen = np.sort(order[:k])

    k = chosen.size
    clamped = np.maximum(p_true[chosen], _LOG_FLOOR)
    loss = -float(np.log(clamped).sum(dtype=np.float64)) / k

    grad_vals = np.zeros(p_true.size, dtype=np.float64)
    live = p_true[chosen] >= _LOG_FLOOR
    grad_vals[chosen[live]] = -1.0 / (k * p_true[chosen[live]])
    return loss, _scatter_grad(p.shape, valid, cls, grad_vals)


def weighted_bootstrapped_ce(
    probs, target, weights: PixelWeightMap, cfg: LossConfig = LossConfig()
) -> tuple[float, np.ndarray]:
    """Bootstrapped cross-entropy where selection and loss use per-pixel weights.

    The hardest pixels are the ones with the largest weighted negative
    log-posterior; with unit weights this reduces exactly to
    :func:`bootstrapped_ce`.
    """
    p = _probs_array(probs)
    y = _target_array(target)
    w_map = weights.weights if isinstance(weights, PixelWeightMap) else np.asarray(weights)
    if w_map.shape != y.shape:
        raise ValidationError("weight map shape does not match the target")
    p_true, valid, cls = _gather_true_class(p, y)
    w = w_map.reshape(-1)[valid].astype(np.float64)
    nll = -np.log(np.maximum(p_true, _LOG_FLOOR))
    weighted = w * nll

    if cfg.hard_threshold is not None:
        chosen = np.flatnonzero(p_true < cfg.hard_threshold)
        if chosen.size == 0:
            return 0.0, np.zeros(p.shape, dtype=np.float64)
    else:
        k = int(np.ceil(cfg.top_fraction * p_true.size))
        order = np.argsort(-weighted, kind="stable")
        chosen = np.sort(order[:k])

    k = chosen.size
    loss = float(weighted[chosen].sum(dtype=np.float64)) / k

    grad_vals = np.zeros(p_true.size, dtype=np.float64)
    live = p_true[chosen] >= _LOG_FLOOR
    sel = chosen[live]
    grad_vals[sel] = -w[sel] / (k * p_true[sel])
    return loss, _scatter_grad(p.shape, valid, cls, grad_vals)


def binary_ce(probs, target) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on the boundary channel (channel 1).

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logarithms;
    the gradient is zero wherever the clamp is active.
    """
    p = _probs_array(probs)
    bits = target.bits if hasattr(target, "bits") else np.asarray(target)
    if p.shape[:2] != bits.shape:
        raise ValidationError(f"probability grid {p.shape[:2]} vs boundary target {bits.shape}")
    y = bits.astype(np.float64)
    raw = p[:, :, 1].astype(np.float64)
    pc = np.clip(raw, _BINARY_CLAMP, 1.0 - _BINARY_CLAMP)
    n = y.size
    loss = -float((y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).sum(dtype=np.float64)) / n

    grad = np.zeros(p.shape, dtype=np.float64)
    inside = (raw > _BINARY_CLAMP) & (raw < 1.0 - _BINARY_CLAMP)
    grad[:, :, 1] = np.where(inside, -(y / pc - (1.0 - y) / (1.0 - pc)) / n, 0.0)
    return loss, grad


def mse_center(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over every element of a center heatmap."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValidationError(f"center shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float((diff * diff).sum(dtype=np.float64)) / diff.size
    return loss, 2.0 * diff / diff.size


def l1_offset(pred: np.ndarray, target: np.ndarray, valid_mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error over the valid (thing) pixels of an offset field.

    The subgradient at an exactly zero residual is zero. An empty mask
    yields loss 0 with a zero gradient.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    mask = np.asarray(valid_mask, dtype=bool)
    if pred.shape != target.shape:
        raise ValidationError(f"offset shapes differ: {pred.shape} vs {target.shape}")
    if mask.shape != pred.shape[:2]:
        raise ValidationError("valid mask must match the spatial shape")
    channels = 1 if pred.ndim == 2 else pred.shape[2]
    count = int(mask.sum()) * channels
    if count == 0:
        return 0.0, np.zeros(pred.shape, dtype=np.float64)
    diff = pred.astype(np.float64) - target.astype(np.float64)
    mask_b = mask if pred.ndim == 2 else mask[:, :, None]
    loss = float(np.abs(diff * mask_b).sum(dtype=np.float64)) / count
    grad = np.sign(diff) * mask_b / count
    return loss, grad


def total_loss(parts: tuple[float, float, float], lw: LossWeights = LossWeights()) -> float:
    """Weighted sum of the semantic, center, and offset loss values."""
    sem, cen, off = parts
    return lw.lambda_sem * sem + lw.lambda_cen * cen + lw.lambda_off * off
