"""Boundary targets from instance maps, and probability-to-mask binarization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .grids import InstanceMap, ProbMap, resample_array
from .validation import check_ndim, check_nonempty

_NEIGHBOR_OFFSETS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


@dataclass(frozen=True)
class BoundaryMap:
    """Binary per-pixel boundary mask."""

    bits: np.ndarray  # (height, width) uint8 in {0, 1}

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.bits))
        check_ndim("BoundaryMap.bits", arr, 2)
        check_nonempty("BoundaryMap.bits", arr)
        if not np.isin(arr, (0, 1)).all():
            raise ValidationError("BoundaryMap values must be exactly 0 or 1")
        object.__setattr__(self, "bits", arr.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


def gt_boundary(instances: InstanceMap) -> BoundaryMap:
    """Mark every pixel whose instance id differs from any of its 8 neighbors.

    Out-of-image neighbors are ignored, so a uniform map has no boundary.
    """
    ids = instances.ids if isinstance(instances, InstanceMap) else np.asarray(instances)
    h, w = ids.shape
    out = np.zeros((h, w), dtype=bool)
    for dr, dc in _NEIGHBOR_OFFSETS:
        r0, r1 = max(dr, 0), h + min(dr, 0)
        c0, c1 = max(dc, 0), w + min(dc, 0)
        center = ids[r0:r1, c0:c1]
        neighbor = ids[r0 - dr : r1 - dr, c0 - dc : c1 - dc]
        out[r0:r1, c0:c1] |= center != neighbor
    return BoundaryMap(out.astype(np.uint8))


def binarize(probs: ProbMap, out_h: int, out_w: int) -> BoundaryMap:
    """Resample the boundary-class channel to full size and threshold it.

    The threshold is a strict > 0.5, so exact ties stay non-boundary.
    """
    arr = probs.data if isinstance(probs, ProbMap) else np.asarray(probs)
    if arr.ndim != 3 or arr.shape[2] < 2:
        raise ValidationError("binarize expects a probability grid with >= 2 channels")
    channel = resample_array(arr[:, :, 1].astype(np.float32), out_h, out_w)
    return BoundaryMap((channel > 0.5).astype(np.uint8))
