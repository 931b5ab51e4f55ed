"""Per-pixel MLP heads: manual forward/backward and optimizer steps.

A head is four affine layers with rectifier activations on the hidden ones.
The first layer runs at patch resolution and its output is bilinearly
upsampled before the nonlinearity; because both the upsampling and the
affine map are linear this is exactly equivalent to upsampling the features
first, but it never materializes the upsampled feature tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .grids import FeatureMap, apply_separable, apply_separable_adjoint, interp_matrix


@dataclass
class MlpHead:
    """Parameters of a 4-layer per-pixel classifier plus its upsampling factor."""

    layer_dims: tuple[int, ...]  # (channels, h1, h2, h3, classes)
    weights: list[np.ndarray]  # weights[i]: (layer_dims[i], layer_dims[i+1])
    biases: list[np.ndarray]
    upsample_factor: int

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) != 5:
            raise ValidationError("a head has exactly 4 affine layers (5 layer dims)")
        if len(self.weights) != 4 or len(self.biases) != 4:
            raise ValidationError("expected 4 weight matrices and 4 bias vectors")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != expect or b.shape != (expect[1],):
                raise ValidationError(f"layer {i}: parameter shapes do not match layer_dims")
        if self.upsample_factor < 1:
            raise ValidationError("upsample_factor must be >= 1")

    @property
    def in_channels(self) -> int:
        return self.layer_dims[0]

    @property
    def out_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def dtype(self):
        return self.weights[0].dtype


@dataclass
class HeadGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def init_head(
    channels: int,
    hidden_dims: tuple[int, int, int],
    num_classes: int,
    upsample_factor: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> MlpHead:
    """Fan-in-scaled uniform initialization for all four layers."""
    if len(hidden_dims) != 3:
        raise ValidationError("need exactly 3 hidden widths for a 4-layer head")
    dims = (channels, *hidden_dims, num_classes)
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(d_in)
        weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype))
        biases.append(rng.uniform(-bound, bound, size=d_out).astype(dtype))
    return MlpHead(layer_dims=dims, weights=weights, biases=biases, upsample_factor=upsample_factor)


def _as_features(feats) -> np.ndarray:
    arr = feats.data if isinstance(feats, FeatureMap) else np.asarray(feats)
    if arr.ndim != 3:
        raise ValidationError(f"features must be (h, w, c), got shape {arr.shape}")
    return arr


class _ForwardCache:
    __slots__ = ("x", "mh", "mw", "up_mask", "a0", "masks", "acts")

    def __init__(self, x, mh, mw, up_mask, a0, masks, acts):
        self.x = x
        self.mh = mh
        self.mw = mw
        self.up_mask = up_mask
        self.a0 = a0
        self.masks = masks
        self.acts = acts


def _forward(head: MlpHead, feats) -> tuple[np.ndarray, _ForwardCache]:
    x = _as_features(feats)
    if x.shape[2] != head.in_channels:
        raise ValidationError(
            f"feature channels {x.shape[2]} do not match head input {head.in_channels}"
        )
    x = x.astype(head.dtype, copy=False)
    w, b = head.weights, head.biases
    f = head.upsample_factor

    z = x @ w[0] + b[0]
    if f == 1:
        mh = mw = None
        zu = z
    else:
        hp, wp = x.shape[:2]
        mh = interp_matrix(hp, hp * f)
        mw = interp_matrix(wp, wp * f)
        zu = apply_separable(mh, mw, z)
    up_mask = zu > 0
    a0 = zu * up_mask

    masks, acts = [], [a0]
    a = a0
    for i in (1, 2):
        zi = a @ w[i] + b[i]
        mask = zi > 0
        a = zi * mask
        masks.append(mask)
        acts.append(a)
    logits = a @ w[3] + b[3]
    return logits, _ForwardCache(x, mh, mw, up_mask, a0, masks, acts)


def head_forward(head: MlpHead, feats) -> np.ndarray:
    """Logit grid at (h_patches * factor, w_patches * factor, classes)."""
    logits, _ = _forward(head, feats)
    return logits


def head_backward(head: MlpHead, feats, grad_logits: np.ndarray, cache: _ForwardCache | None = None) -> HeadGrads:
    """Parameter gradients for `head_forward` under the upstream logit gradient."""
    if cache is None:
        _, cache = _forward(head, feats)
    w = head.weights
    g = np.asarray(grad_logits, dtype=head.dtype)
    if g.shape != cache.acts[-1].shape[:2] + (head.out_classes,):
        raise ValidationError("upstream gradient shape does not match head output")

    grads_w = [None] * 4
    grads_b = [None] * 4

    def affine_grads(idx: int, act: np.ndarray, gz: np.ndarray) -> None:
        d_in, d_out = w[idx].shape
        grads_w[idx] = act.reshape(-1, d_in).T @ gz.reshape(-1, d_out)
        grads_b[idx] = gz.sum(axis=(0, 1))

    affine_grads(3, cache.acts[2], g)
    g = (g @ w[3].T) * cache.masks[1]
    affine_grads(2, cache.acts[1], g)
    g = (g @ w[2].T) * cache.masks[0]
    affine_grads(1, cache.acts[0], g)
    g = (g @ w[1].T) * cache.up_mask
    if cache.mh is not None:
        g = apply_separable_adjoint(cache.mh, cache.mw, g)
    affine_grads(0, cache.x, g)
    return HeadGrads(grads_w, grads_b)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. probabilities back through the channel softmax."""
    p = np.asarray(probs)
    g = np.asarray(grad_probs)
    inner = (g * p).sum(axis=-1, keepdims=True)
    return p * (g - inner)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    step_count: int = 0

    @classmethod
    def for_head(cls, head: MlpHead) -> "AdamState":
        zeros = lambda arrs: [np.zeros(a.shape, dtype=np.float64) for a in arrs]
        return cls(zeros(head.weights), zeros(head.weights), zeros(head.biases), zeros(head.biases))


def adam_step(
    head: MlpHead,
    grads: HeadGrads,
    state: AdamState,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[MlpHead, AdamState]:
    """One bias-corrected moment update; returns a new head and state."""
    t = state.step_count + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t

    def update(param, grad, m, v):
        g = grad.astype(np.float64, copy=False)
        m_new = beta1 * m + (1.0 - beta1) * g
        v_new = beta2 * v + (1.0 - beta2) * g * g
        step = learning_rate * (m_new / c1) / (np.sqrt(v_new / c2) + eps)
        return (param.astype(np.float64) - step).astype(param.dtype), m_new, v_new

    new_w, new_b = [], []
    new_state = AdamState([], [], [], [], step_count=t)
    for i in range(4):
        p, m, v = update(head.weights[i], grads.weights[i], state.m_w[i], state.v_w[i])
        new_w.append(p)
        new_state.m_w.append(m)
        new_state.v_w.append(v)
        p, m, v = update(head.biases[i], grads.biases[i], state.m_b[i], state.v_b[i])
        new_b.append(p)
        new_state.m_b.append(m)
        new_state.v_b.append(v)
    new_head = MlpHead(head.layer_dims, new_w, new_b, head.upsample_factor)
    return new_head, new_state


def sgd_step(head: MlpHead, grads: HeadGrads, learning_rate: float) -> MlpHead:
    new_w = [
        (w.astype(np.float64) - learning_rate * g.astype(np.float64)).astype(w.dtype)
        for w, g in zip(head.weights, grads.weights)
    ]
    new_b = [
        (b.astype(np.float64) - learning_rate * g.astype(np.float64)).astype(b.dtype)
        for b, g in zip(head.biases, grads.biases)
    ]
    return MlpHead(head.layer_dims, new_w, new_b, head.upsample_factor)
