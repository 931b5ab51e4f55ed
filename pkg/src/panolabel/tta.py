"""Multi-scale test-time ensembling over the patch-feature grid.

At scale s the grid splits into s x s tiles; each tile is bilinearly blown
back up to the full grid size, run through the head, and its class
probabilities are pasted into the tile's footprint at output resolution.
The per-scale maps are then averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .grids import FeatureMap, ProbMap, resample_array, softmax_array
from .heads import MlpHead, head_forward

SEMANTIC_SCALES = (1, 2, 3)
BOUNDARY_SCALES = (3, 4, 5)


@dataclass(frozen=True)
class ScaleSet:
    scales: tuple[int, ...]

    def __post_init__(self):
        scales = tuple(int(s) for s in self.scales)
        if not scales:
            raise ValidationError("scale set must not be empty")
        if any(s < 1 for s in scales):
            raise ValidationError("scales must be >= 1")
        if len(set(scales)) != len(scales):
            raise ValidationError("scales must be distinct")
        object.__setattr__(self, "scales", scales)


@dataclass(frozen=True)
class Tile:
    """One tile of the patch grid: half-open patch ranges plus the features."""

    row0: int
    row1: int
    col0: int
    col1: int
    features: FeatureMap


def _edges(dim: int, s: int) -> list[int]:
    # Equal tiles of dim // s patches; the remainder goes to the last tile.
    base = dim // s
    return [i * base for i in range(s)] + [dim]


def tile_split(feats: FeatureMap, s: int) -> list[Tile]:
    """Partition the patch grid into s x s tiles, raster order."""
    if s < 1:
        raise ValidationError("scale must be >= 1")
    hp, wp = feats.height_patches, feats.width_patches
    if s > hp or s > wp:
        raise ValidationError(f"scale {s} exceeds the {hp}x{wp} patch grid")
    row_edges = _edges(hp, s)
    col_edges = _edges(wp, s)
    tiles = []
    for i in range(s):
        for j in range(s):
            r0, r1 = row_edges[i], row_edges[i + 1]
            c0, c1 = col_edges[j], col_edges[j + 1]
            sub = FeatureMap(feats.data[r0:r1, c0:c1].copy(), patch_size=feats.patch_size)
            tiles.append(Tile(r0, r1, c0, c1, sub))
    return tiles


def scale_fuse(per_scale: list[ProbMap]) -> ProbMap:
    """Arithmetic mean of probability maps, accumulated in float64."""
    if not per_scale:
        raise ValidationError("scale_fuse needs at least one probability map")
    shape = per_scale[0].data.shape
    acc = np.zeros(shape, dtype=np.float64)
    for pm in per_scale:
        if pm.data.shape != shape:
            raise ValidationError("probability maps disagree on shape")
        acc += pm.data
    return ProbMap.from_floats(acc / len(per_scale))


def predict_single(head: MlpHead, feats: FeatureMap, out_h: int, out_w: int) -> ProbMap:
    """One plain forward pass, resampled to the requested output size."""
    probs = softmax_array(head_forward(head, feats))
    return ProbMap.from_floats(resample_array(probs.astype(np.float32), out_h, out_w))


def predict_multiscale(
    head: MlpHead,
    feats: FeatureMap,
    scales: ScaleSet,
    out_h: int,
    out_w: int,
) -> ProbMap:
    """Tile, predict, reassemble per scale, then average across scales."""
    if isinstance(scales, (tuple, list)):
        scales = ScaleSet(tuple(scales))
    hp, wp = feats.height_patches, feats.width_patches
    if out_h < hp or out_w < wp:
        raise ValidationError("output size must be at least the patch grid size")
    per_scale = []
    for s in scales.scales:
        canvas = np.zeros((out_h, out_w, head.out_classes), dtype=np.float32)
        for tile in tile_split(feats, s):
            blown = resample_array(tile.features.data, hp, wp)
            probs = softmax_array(head_forward(head, blown))
            pr0 = tile.row0 * out_h // hp
            pr1 = tile.row1 * out_h // hp
            pc0 = tile.col0 * out_w // wp
            pc1 = tile.col1 * out_w // wp
            canvas[pr0:pr1, pc0:pc1] = resample_array(
                probs.astype(np.float32), pr1 - pr0, pc1 - pc0
            )
        per_scale.append(ProbMap.from_floats(canvas))
    return scale_fuse(per_scale)
