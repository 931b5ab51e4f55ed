"""Few-shot training loop for the semantic and boundary heads.

Training runs on cached patch features. Random cropping happens in patch
units (labels crop at patch_size alignment), horizontal flips apply to both
features and targets, and color-jitter style augmentation arrives as
precomputed feature variants that the sampler picks between. Everything is
driven by a single seeded generator, so a fixed seed reproduces the
parameter trajectory bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boundaries import gt_boundary
from .errors import ValidationError
from .grids import FeatureMap, InstanceMap, SemanticMap, maxpool_to, softmax_array
from .heads import (
    AdamState,
    HeadGrads,
    MlpHead,
    _forward,
    adam_step,
    head_backward,
    init_head,
    sgd_step,
    softmax_backward,
)
from .losses import LossConfig, binary_ce, bootstrapped_ce

SEMANTIC = "semantic"
BOUNDARY = "boundary"

_BOUNDARY_CROP_RETRIES = 10


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 600
    batch_size: int = 1
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    crop_patches: tuple[int, int] | None = (32, 32)
    flip_prob: float = 0.5
    hidden_dims: tuple[int, int, int] = (256, 256, 256)
    upsample_factor: int | None = None  # None: patch_size (semantic) / 4 (boundary)
    optimizer: str = "adam"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValidationError("flip_prob must lie in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError("optimizer must be 'adam' or 'sgd'")


@dataclass(frozen=True)
class TrainSample:
    """Features (possibly several augmentation variants) plus pixel-level labels."""

    features: tuple[FeatureMap, ...]
    semantic: SemanticMap | None = None
    instances: InstanceMap | None = None

    @classmethod
    def build(cls, features, semantic=None, instances=None) -> "TrainSample":
        variants = (features,) if isinstance(features, FeatureMap) else tuple(features)
        if not variants:
            raise ValidationError("a training sample needs at least one feature variant")
        return cls(variants, semantic, instances)


@dataclass(frozen=True)
class BatchSpec:
    """Mixed batch: n-1 pseudo-labeled members plus exactly one ground-truth member."""

    pseudo_samples: tuple[int, ...]
    gt_sample: int


def build_mixed_batch(pseudo_pool, gt_pool, n: int, rng: np.random.Generator) -> BatchSpec:
    """Draw n-1 distinct pseudo members and one uniform ground-truth member."""
    if n < 1:
        raise ValidationError("batch size must be >= 1")
    if len(gt_pool) == 0:
        raise ValidationError("ground-truth pool is empty")
    if n - 1 > len(pseudo_pool):
        raise ValidationError(f"cannot draw {n - 1} pseudo samples from a pool of {len(pseudo_pool)}")
    pseudo = tuple(int(i) for i in rng.choice(len(pseudo_pool), size=n - 1, replace=False)) if n > 1 else ()
    gt = int(rng.integers(0, len(gt_pool)))
    return BatchSpec(pseudo_samples=pseudo, gt_sample=gt)


def _check_semantic_sample(sample: TrainSample, patch_size: int) -> None:
    if sample.semantic is None:
        raise ValidationError("semantic training needs a SemanticMap per sample")
    fm = sample.features[0]
    want = (fm.height_patches * patch_size, fm.width_patches * patch_size)
    if (sample.semantic.height, sample.semantic.width) != want:
        raise ValidationError(
            f"label size {sample.semantic.ids.shape} does not match patch grid * patch_size {want}"
        )


def _crop_origin(rng, hp, wp, crop):
    ch = min(crop[0], hp)
    cw = min(crop[1], wp)
    r0 = int(rng.integers(0, hp - ch + 1)) if ch < hp else 0
    c0 = int(rng.integers(0, wp - cw + 1)) if cw < wp else 0
    return r0, c0, ch, cw


def _pick_variant(rng, sample: TrainSample) -> FeatureMap:
    if len(sample.features) == 1:
        return sample.features[0]
    return sample.features[int(rng.integers(0, len(sample.features)))]


def train_few_shot(
    samples: list[TrainSample],
    kind: str,
    num_classes: int,
    cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
) -> tuple[MlpHead, list[tuple[int, float]]]:
    """Train one head on k annotated samples; returns the head and its loss trace."""
    if kind not in (SEMANTIC, BOUNDARY):
        raise ValidationError(f"unknown head kind {kind!r}")
    if not samples:
        raise ValidationError("need at least one training sample")
    first = samples[0].features[0]
    patch_size = first.patch_size
    channels = first.channels
    for s in samples:
        for fm in s.features:
            if fm.channels != channels:
                raise ValidationError("all samples must share the feature channel count")

    if kind == SEMANTIC:
        factor = cfg.upsample_factor if cfg.upsample_factor is not None else patch_size
        if factor != patch_size:
            raise ValidationError(
                "semantic head upsampling must equal patch_size so logits align with labels"
            )
        out_classes = num_classes
        for s in samples:
            _check_semantic_sample(s, patch_size)
    else:
        factor = cfg.upsample_factor if cfg.upsample_factor is not None else 4
        if factor > patch_size:
            raise ValidationError(
                "boundary head upsampling beyond patch_size would need target enlargement"
            )
        out_classes = 2
        for s in samples:
            if s.instances is None:
                raise ValidationError("boundary training needs an InstanceMap per sample")
            want = (
                s.features[0].height_patches * patch_size,
                s.features[0].width_patches * patch_size,
            )
            if (s.instances.height, s.instances.width) != want:
                raise ValidationError(
                    f"instance map size {s.instances.ids.shape} does not match pixel grid {want}"
                )

    rng = np.random.default_rng(cfg.seed)
    head = init_head(channels, cfg.hidden_dims, out_classes, factor, rng)
    state = AdamState.for_head(head)

    # Boundary ground truth is computed once per sample at full pixel
    # resolution; crops slice it and max-pool down to the head's output grid.
    boundary_full = []
    if kind == BOUNDARY:
        for s in samples:
            boundary_full.append(gt_boundary(s.instances).bits)

    trace: list[tuple[int, float]] = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            acc_w = [np.zeros(p.shape, dtype=np.float64) for p in head.weights]
            acc_b = [np.zeros(p.shape, dtype=np.float64) for p in head.biases]
            batch_loss = 0.0
            for idx in batch:
                sample = samples[int(idx)]
                fm = _pick_variant(rng, sample)
                hp, wp = fm.height_patches, fm.width_patches
                crop = cfg.crop_patches or (hp, wp)

                if kind == SEMANTIC:
                    r0, c0, ch, cw = _crop_origin(rng, hp, wp, crop)
                    feats = fm.data[r0 : r0 + ch, c0 : c0 + cw]
                    target = sample.semantic.ids[
                        r0 * patch_size : (r0 + ch) * patch_size,
                        c0 * patch_size : (c0 + cw) * patch_size,
                    ]
                else:
                    inst = sample.instances.ids
                    for attempt in range(_BOUNDARY_CROP_RETRIES + 1):
                        r0, c0, ch, cw = _crop_origin(rng, hp, wp, crop)
                        px = (
                            slice(r0 * patch_size, (r0 + ch) * patch_size),
                            slice(c0 * patch_size, (c0 + cw) * patch_size),
                        )
                        if inst[px].any() or attempt == _BOUNDARY_CROP_RETRIES:
                            break
                    feats = fm.data[r0 : r0 + ch, c0 : c0 + cw]
                    bits = boundary_full[int(idx)][px]
                    target = maxpool_to(bits, ch * factor, cw * factor)

                if rng.random() < cfg.flip_prob:
                    feats = feats[:, ::-1]
                    target = target[:, ::-1]
                feats = np.ascontiguousarray(feats)
                target = np.ascontiguousarray(target)

                logits, cache = _forward(head, feats)
                probs = softmax_array(logits)
                if kind == SEMANTIC:
                    loss, dprobs = bootstrapped_ce(probs, target, loss_cfg)
                else:
                    loss, dprobs = binary_ce(probs, target)
                grad_logits = softmax_backward(probs, dprobs).astype(head.dtype)
                grads = head_backward(head, feats, grad_logits, cache)
                for i in range(4):
                    acc_w[i] += grads.weights[i]
                    acc_b[i] += grads.biases[i]
                batch_loss += loss

            scale = 1.0 / len(batch)
            mean_grads = HeadGrads(
                weights=[g * scale for g in acc_w], biases=[g * scale for g in acc_b]
            )
            if cfg.optimizer == "adam":
                head, state = adam_step(
                    head, mean_grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps
                )
            else:
                head = sgd_step(head, mean_grads, cfg.learning_rate)
            trace.append((step, batch_loss / len(batch)))
            step += 1
    return head, trace
