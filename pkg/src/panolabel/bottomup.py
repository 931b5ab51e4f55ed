"""Center/offset target encoding and bottom-up panoptic fusion.

Instances are represented by a Gaussian bump at their mass centroid plus a
per-pixel 2-D offset pointing at that centroid. Inference reverses the
encoding: peaks come out of the heatmap, pixels group to the nearest
shifted center, and each group takes its majority semantic class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .fusion import relabel_panoptic
from .grids import (
    PANOPTIC_DIVISOR,
    ClassCatalog,
    InstanceMap,
    PanopticMap,
    SemanticMap,
)
from .losses import LossConfig, PixelWeightMap


@dataclass(frozen=True)
class CenterHeatmap:
    values: np.ndarray  # (height, width) float32 in [0, 1]

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.values, dtype=np.float32))
        if arr.ndim != 2:
            raise ValidationError("CenterHeatmap must be 2-D")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValidationError("CenterHeatmap values must lie in [0, 1]")
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class OffsetField:
    offsets: np.ndarray  # (height, width, 2) float32, (dy, dx) in pixels

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.offsets, dtype=np.float32))
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ValidationError("OffsetField must be (h, w, 2)")
        object.__setattr__(self, "offsets", arr)


def encode_targets(
    pan: PanopticMap,
    catalog: ClassCatalog,
    sigma: float = 8.0,
    weight_cfg: LossConfig = LossConfig(),
) -> tuple[CenterHeatmap, OffsetField, np.ndarray, PixelWeightMap]:
    """Targets for the center/offset heads plus the small-instance weight map.

    Each instance stamps a Gaussian (truncated at 3 sigma, max-combined,
    peak exactly 1 at the rounded centroid pixel); offsets point from every
    thing pixel to its instance's exact mass centroid.
    """
    sem, inst = pan.split()
    h, w = sem.ids.shape
    heat = np.zeros((h, w), dtype=np.float32)
    offsets = np.zeros((h, w, 2), dtype=np.float32)
    weights = np.ones((h, w), dtype=np.float32)
    thing_lookup = np.zeros(65536, dtype=bool)
    for cid in catalog.thing_ids():
        thing_lookup[cid] = True
    valid_mask = thing_lookup[sem.ids] & (inst.ids != 0)

    radius = int(np.ceil(3.0 * sigma))
    flat_valid = np.flatnonzero(valid_mask.reshape(-1))
    if flat_valid.size:
        keys = (
            sem.ids.reshape(-1)[flat_valid].astype(np.int64) * PANOPTIC_DIVISOR
            + inst.ids.reshape(-1)[flat_valid]
        )
        order = np.argsort(keys, kind="stable")
        sorted_pix = flat_valid[order]
        sorted_keys = keys[order]
        bounds = np.flatnonzero(np.diff(sorted_keys)) + 1
        for segment in np.split(sorted_pix, bounds):
            rows, cols = np.divmod(segment, w)
            cr, cc = float(rows.mean()), float(cols.mean())
            offsets[rows, cols, 0] = cr - rows
            offsets[rows, cols, 1] = cc - cols
            if segment.size < weight_cfg.small_instance_area:
                weights[rows, cols] = weight_cfg.small_instance_weight

            pr, pc = int(np.floor(cr + 0.5)), int(np.floor(cc + 0.5))
            r0, r1 = max(pr - radius, 0), min(pr + radius + 1, h)
            c0, c1 = max(pc - radius, 0), min(pc + radius + 1, w)
            yy = np.arange(r0, r1, dtype=np.float64)[:, None] - pr
            xx = np.arange(c0, c1, dtype=np.float64)[None, :] - pc
            d2 = yy * yy + xx * xx
            bump = np.exp(-d2 / (2.0 * sigma * sigma))
            bump[d2 > (3.0 * sigma) ** 2] = 0.0
            region = heat[r0:r1, c0:c1]
            np.maximum(region, bump.astype(np.float32), out=region)

    return CenterHeatmap(heat), OffsetField(offsets), valid_mask, PixelWeightMap(weights)


def _window_max(values: np.ndarray, radius: int) -> np.ndarray:
    """Max over a (2r+1)^2 neighborhood, clipped at the image border."""

    def axis_max(a, axis):
        out = a.copy()
        for shift in range(1, radius + 1):
            shifted = np.full_like(a, -np.inf)
            src = [slice(None)] * a.ndim
            dst = [slice(None)] * a.ndim
            src[axis] = slice(shift, None)
            dst[axis] = slice(None, -shift)
            shifted[tuple(dst)] = a[tuple(src)]
            np.maximum(out, shifted, out=out)
            shifted = np.full_like(a, -np.inf)
            src[axis] = slice(None, -shift)
            dst[axis] = slice(shift, None)
            shifted[tuple(dst)] = a[tuple(src)]
            np.maximum(out, shifted, out=out)
        return out

    return axis_max(axis_max(values.astype(np.float64), 0), 1)


def extract_centers(
    heat: CenterHeatmap,
    threshold: float = 0.1,
    nms_window: int = 7,
    max_centers: int = 200,
) -> list[tuple[int, int, float]]:
    """Local maxima above a score threshold, windowed NMS, score-sorted.

    A pixel survives iff its score is the maximum of its window; equal
    scores within a window keep only the raster-first pixel.
    """
    if nms_window < 1 or nms_window % 2 == 0:
        raise ValidationError("nms_window must be a positive odd number")
    if max_centers < 1:
        raise ValidationError("max_centers must be >= 1")
    values = heat.values if isinstance(heat, CenterHeatmap) else np.asarray(heat)
    radius = nms_window // 2
    win = _window_max(values, radius)
    v64 = values.astype(np.float64)
    cand = np.argwhere((v64 >= threshold) & (v64 == win))
    h, w = values.shape
    centers = []
    for r, c in cand:
        score = v64[r, c]
        r0, r1 = max(r - radius, 0), min(r + radius + 1, h)
        c0, c1 = max(c - radius, 0), min(c + radius + 1, w)
        window = v64[r0:r1, c0:c1]
        ties = np.argwhere(window == score)
        first = ties[0]
        if (r0 + first[0]) * w + (c0 + first[1]) < r * w + c:
            continue
        centers.append((int(r), int(c), float(score)))
    centers.sort(key=lambda rc: (-rc[2], rc[0] * w + rc[1]))
    return centers[:max_centers]


def group_pixels(
    centers: list[tuple[int, int, float]],
    offsets: OffsetField,
    thing_mask: np.ndarray,
) -> InstanceMap:
    """Assign each thing pixel to the center nearest to pixel + offset.

    Instance ids run 1..n over the centers in raster order; distance ties
    also resolve toward the raster-first center. No centers means no
    instances.
    """
    off = offsets.offsets if isinstance(offsets, OffsetField) else np.asarray(offsets)
    mask = np.asarray(thing_mask, dtype=bool)
    if mask.shape != off.shape[:2]:
        raise ValidationError("thing mask and offset field disagree on shape")
    h, w = mask.shape
    ids = np.zeros((h, w), dtype=np.uint16)
    if not centers or not mask.any():
        return InstanceMap(ids)

    ordered = sorted(centers, key=lambda rc: (rc[0], rc[1]))
    cy = np.array([c[0] for c in ordered], dtype=np.float64)
    cx = np.array([c[1] for c in ordered], dtype=np.float64)
    rows, cols = np.nonzero(mask)
    ty = rows + off[rows, cols, 0].astype(np.float64)
    tx = cols + off[rows, cols, 1].astype(np.float64)
    d2 = (ty[:, None] - cy[None, :]) ** 2 + (tx[:, None] - cx[None, :]) ** 2
    ids[rows, cols] = np.argmin(d2, axis=1).astype(np.uint16) + 1
    return InstanceMap(ids)


def majority_vote(sem: SemanticMap, inst: InstanceMap, catalog: ClassCatalog) -> PanopticMap:
    """Give each instance its most frequent class; stuff-majority instances dissolve.

    Ties go to the smaller class id. Dissolved instances keep their
    per-pixel semantics with instance id 0. The result is canonically
    relabeled per class.
    """
    if sem.ids.shape != inst.ids.shape:
        raise ValidationError("semantic and instance maps disagree on shape")
    out_sem = sem.ids.copy()
    out_inst = np.zeros(inst.ids.shape, dtype=np.uint16)
    flat_sem = sem.ids.reshape(-1)
    flat_inst = inst.ids.reshape(-1)
    per_class_count: dict[int, int] = {}
    for inst_id in np.unique(flat_inst):
        if inst_id == 0:
            continue
        pixels = np.flatnonzero(flat_inst == inst_id)
        counts = np.bincount(flat_sem[pixels])
        winner = int(np.argmax(counts))
        if winner >= catalog.num_classes or not catalog.is_thing(winner):
            continue
        per_class_count[winner] = per_class_count.get(winner, 0) + 1
        rows, cols = np.divmod(pixels, sem.ids.shape[1])
        out_sem[rows, cols] = winner
        out_inst[rows, cols] = per_class_count[winner]
    pan = PanopticMap.from_parts(SemanticMap(out_sem), InstanceMap(out_inst))
    return relabel_panoptic(pan)
