"""Scikit-learn style estimators wrapping the functional pipeline.

``FewShotHead`` trains one per-pixel head on a handful of annotated feature
maps; ``PanopticLabelGenerator`` composes the semantic and boundary heads
with multi-scale ensembling and panoptic fusion into a fit/predict object.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .boundaries import binarize
from .errors import ValidationError
from .fusion import FusionConfig, fuse
from .grids import ClassCatalog, FeatureMap, PanopticMap, ProbMap, SemanticMap
from .losses import LossConfig
from .tta import BOUNDARY_SCALES, SEMANTIC_SCALES, ScaleSet, predict_multiscale
from .training import BOUNDARY, SEMANTIC, TrainConfig, TrainSample, train_few_shot


def _as_sample_list(X) -> list:
    if isinstance(X, (FeatureMap, TrainSample)):
        return [X]
    return list(X)


def generate_pseudo_label(
    sem_head,
    bnd_head,
    fm: FeatureMap,
    catalog: ClassCatalog,
    sem_scales=SEMANTIC_SCALES,
    bnd_scales=BOUNDARY_SCALES,
    fusion_cfg: FusionConfig = FusionConfig(),
    void_mask: np.ndarray | None = None,
) -> PanopticMap:
    """Full inference path: multi-scale heads, argmax, binarize, fuse."""
    out_h = fm.height_patches * fm.patch_size
    out_w = fm.width_patches * fm.patch_size
    sem_probs = predict_multiscale(sem_head, fm, ScaleSet(tuple(sem_scales)), out_h, out_w)
    bnd_probs = predict_multiscale(bnd_head, fm, ScaleSet(tuple(bnd_scales)), out_h, out_w)
    sem_ids = np.argmax(sem_probs.data, axis=2).astype(np.uint16)
    if void_mask is not None:
        if void_mask.shape != sem_ids.shape:
            raise ValidationError("static void mask shape does not match the output")
        sem_ids[void_mask.astype(bool)] = catalog.void_id
    boundary = binarize(bnd_probs, out_h, out_w)
    return fuse(SemanticMap(sem_ids), boundary, catalog, fusion_cfg)


class FewShotHead(BaseEstimator):
    """One trainable head (semantic or boundary) with a fit/predict_proba API."""

    def __init__(
        self,
        kind: str = SEMANTIC,
        num_classes: int | None = None,
        hidden_dims: tuple[int, int, int] = (256, 256, 256),
        epochs: int = 600,
        batch_size: int = 1,
        learning_rate: float = 0.001,
        seed: int = 0,
        crop_patches: tuple[int, int] | None = (32, 32),
        flip_prob: float = 0.5,
        top_fraction: float = 0.2,
        upsample_factor: int | None = None,
        optimizer: str = "adam",
    ):
        self.kind = kind
        self.num_classes = num_classes
        self.hidden_dims = hidden_dims
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.crop_patches = crop_patches
        self.flip_prob = flip_prob
        self.top_fraction = top_fraction
        self.upsample_factor = upsample_factor
        self.optimizer = optimizer

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
            crop_patches=self.crop_patches,
            flip_prob=self.flip_prob,
            hidden_dims=tuple(self.hidden_dims),
            upsample_factor=self.upsample_factor,
            optimizer=self.optimizer,
        )

    def fit(self, X, y=None):
        """X: TrainSamples, or FeatureMaps with y giving the matching label maps."""
        samples = []
        for i, item in enumerate(_as_sample_list(X)):
            if isinstance(item, TrainSample):
                samples.append(item)
            else:
                label = y[i]
                if self.kind == SEMANTIC:
                    samples.append(TrainSample.build(item, semantic=label))
                else:
                    samples.append(TrainSample.build(item, instances=label))
        if self.kind == SEMANTIC and self.num_classes is None:
            raise ValidationError("num_classes is required for the semantic head")
        n = self.num_classes if self.kind == SEMANTIC else 2
        self.head_, self.loss_trace_ = train_few_shot(
            samples, self.kind, n, self._train_config(), LossConfig(top_fraction=self.top_fraction)
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "head_"):
            raise NotFittedError("this head has not been fitted yet")

    def predict_proba(self, feats: FeatureMap, scales=None, out_hw=None) -> ProbMap:
        self._check_fitted()
        if scales is None:
            scales = SEMANTIC_SCALES if self.kind == SEMANTIC else BOUNDARY_SCALES
        if out_hw is None:
            out_hw = (
                feats.height_patches * feats.patch_size,
                feats.width_patches * feats.patch_size,
            )
        return predict_multiscale(self.head_, feats, ScaleSet(tuple(scales)), *out_hw)


class PanopticLabelGenerator(BaseEstimator):
    """Few-shot panoptic pseudo-label generator: fit on k pairs, predict labels."""

    def __init__(
        self,
        catalog: ClassCatalog,
        hidden_dims: tuple[int, int, int] = (256, 256, 256),
        epochs: int = 600,
        batch_size: int = 1,
        learning_rate: float = 0.001,
        seed: int = 0,
        crop_patches: tuple[int, int] | None = (32, 32),
        flip_prob: float = 0.5,
        top_fraction: float = 0.2,
        boundary_upsample: int | None = None,
        sem_scales: tuple[int, ...] = SEMANTIC_SCALES,
        bnd_scales: tuple[int, ...] = BOUNDARY_SCALES,
        min_blob_area: int = 200,
        min_instance_area: int = 100,
    ):
        self.catalog = catalog
        self.hidden_dims = hidden_dims
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.crop_patches = crop_patches
        self.flip_prob = flip_prob
        self.top_fraction = top_fraction
        self.boundary_upsample = boundary_upsample
        self.sem_scales = sem_scales
        self.bnd_scales = bnd_scales
        self.min_blob_area = min_blob_area
        self.min_instance_area = min_instance_area

    def _head(self, kind: str, upsample) -> FewShotHead:
        return FewShotHead(
            kind=kind,
            num_classes=self.catalog.num_classes if kind == SEMANTIC else None,
            hidden_dims=self.hidden_dims,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
            crop_patches=self.crop_patches,
            flip_prob=self.flip_prob,
            top_fraction=self.top_fraction,
            upsample_factor=upsample,
        )

    def fit(self, X: Sequence[FeatureMap], y: Sequence[PanopticMap]):
        """Train both heads from feature maps paired with panoptic annotations."""
        X = _as_sample_list(X)
        if len(X) != len(y):
            raise ValidationError("need one panoptic map per feature map")
        sem_samples, bnd_samples = [], []
        for fm, pan in zip(X, y):
            sem, inst = pan.split()
            sem_samples.append(TrainSample.build(fm, semantic=sem))
            bnd_samples.append(TrainSample.build(fm, instances=inst))
        self.semantic_head_ = self._head(SEMANTIC, None).fit(sem_samples)
        self.boundary_head_ = self._head(BOUNDARY, self.boundary_upsample).fit(bnd_samples)
        return self

    def _check_fitted(self):
        if not hasattr(self, "semantic_head_"):
            raise NotFittedError("fit must run before predict")

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(
            min_blob_area=self.min_blob_area, min_instance_area=self.min_instance_area
        )

    def predict(self, X, void_mask: np.ndarray | None = None):
        """Pseudo-label one FeatureMap (or a list of them)."""
        self._check_fitted()
        single = isinstance(X, FeatureMap)
        out = [self._predict_one(fm, void_mask) for fm in _as_sample_list(X)]
        return out[0] if single else out

    def _predict_one(self, fm: FeatureMap, void_mask) -> PanopticMap:
        return generate_pseudo_label(
            self.semantic_head_.head_,
            self.boundary_head_.head_,
            fm,
            self.catalog,
            self.sem_scales,
            self.bnd_scales,
            self.fusion_config(),
            void_mask,
        )
