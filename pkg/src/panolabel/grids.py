"""Dense grid types and the resampling primitives every other module shares.

All label maps use the same conventions: class id 255 is the reserved void
label, instance id 0 means "no instance", and panoptic entries are encoded
as ``semantic_id * 1000 + instance_id``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .validation import (
    as_int_grid,
    check_finite,
    check_ndim,
    check_nonempty,
)

VOID_ID = 255
PANOPTIC_DIVISOR = 1000
MAX_INSTANCES_PER_CLASS = PANOPTIC_DIVISOR - 1

DEFAULT_PATCH_SIZE = 14


@dataclass(frozen=True)
class ClassCatalog:
    """The class universe: contiguous ids, each either a thing or a stuff class."""

    entries: tuple[tuple[int, str, bool], ...]
    void_id: int = VOID_ID

    def __post_init__(self):
        ids = [cid for cid, _, _ in self.entries]
        if ids != list(range(len(ids))):
            raise ValidationError(f"catalog ids must be contiguous from 0, got {ids}")
        flags = [thing for _, _, thing in self.entries]
        if not any(flags) or all(flags):
            raise ValidationError("catalog needs at least one thing and one stuff class")
        if self.void_id < len(ids):
            raise ValidationError("void id collides with a catalog class id")

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    def is_thing(self, class_id: int) -> bool:
        return self.entries[class_id][2]

    def thing_ids(self) -> list[int]:
        return [cid for cid, _, thing in self.entries if thing]

    def stuff_ids(self) -> list[int]:
        return [cid for cid, _, thing in self.entries if not thing]

    def name(self, class_id: int) -> str:
        return self.entries[class_id][1]


@dataclass(frozen=True)
class FeatureMap:
    """Patch-grid of C-dimensional float32 backbone features, row-major."""

    data: np.ndarray  # (height_patches, width_patches, channels)
    patch_size: int = DEFAULT_PATCH_SIZE

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float32))
        check_ndim("FeatureMap.data", arr, 3)
        check_nonempty("FeatureMap.data", arr)
        check_finite("FeatureMap.data", arr)
        if self.patch_size < 1:
            raise ValidationError("patch_size must be >= 1")
        object.__setattr__(self, "data", arr)

    @property
    def height_patches(self) -> int:
        return self.data.shape[0]

    @property
    def width_patches(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel class probabilities; each pixel's vector sums to 1."""

    data: np.ndarray  # (height, width, classes) float32 in [0, 1]

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float32))
        check_ndim("ProbMap.data", arr, 3)
        check_nonempty("ProbMap.data", arr)
        if arr.shape[2] < 2:
            raise ValidationError("ProbMap needs at least 2 classes")
        check_finite("ProbMap.data", arr)
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("ProbMap values must lie in [0, 1]")
        sums = arr.sum(axis=2, dtype=np.float64)
        if np.abs(sums - 1.0).max() > 1e-4:
            raise ValidationError("ProbMap pixel vectors must sum to 1 within 1e-4")
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_floats(cls, arr: np.ndarray) -> "ProbMap":
        """Build a ProbMap from float data, absorbing sub-ulp range excursions."""
        return cls(np.clip(np.asarray(arr, dtype=np.float32), 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def classes(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class SemanticMap:
    """Per-pixel class ids; 255 is void."""

    ids: np.ndarray  # (height, width) uint16

    def __post_init__(self):
        arr = as_int_grid("SemanticMap.ids", self.ids, np.uint16)
        check_ndim("SemanticMap.ids", arr, 2)
        check_nonempty("SemanticMap.ids", arr)
        object.__setattr__(self, "ids", arr)

    def validate_against(self, catalog: ClassCatalog) -> None:
        nonvoid = self.ids[self.ids != catalog.void_id]
        if nonvoid.size and int(nonvoid.max()) >= catalog.num_classes:
            raise ValidationError("SemanticMap contains ids outside the catalog")

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]


@dataclass(frozen=True)
class InstanceMap:
    """Per-pixel instance ids; 0 means no instance."""

    ids: np.ndarray  # (height, width) uint16

    def __post_init__(self):
        arr = as_int_grid("InstanceMap.ids", self.ids, np.uint16)
        check_ndim("InstanceMap.ids", arr, 2)
        check_nonempty("InstanceMap.ids", arr)
        object.__setattr__(self, "ids", arr)

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]


@dataclass(frozen=True)
class PanopticMap:
    """Joint labeling encoded as ``semantic_id * 1000 + instance_id`` per pixel."""

    entries: np.ndarray  # (height, width) uint32

    def __post_init__(self):
        arr = as_int_grid("PanopticMap.entries", self.entries, np.uint32)
        check_ndim("PanopticMap.entries", arr, 2)
        check_nonempty("PanopticMap.entries", arr)
        object.__setattr__(self, "entries", arr)

    @classmethod
    def from_parts(cls, sem: SemanticMap, inst: InstanceMap) -> "PanopticMap":
        if sem.ids.shape != inst.ids.shape:
            raise ValidationError("semantic and instance maps disagree on shape")
        entries = sem.ids.astype(np.uint32) * PANOPTIC_DIVISOR + inst.ids.astype(np.uint32)
        return cls(entries)

    def split(self) -> tuple[SemanticMap, InstanceMap]:
        sem = (self.entries // PANOPTIC_DIVISOR).astype(np.uint16)
        inst = (self.entries % PANOPTIC_DIVISOR).astype(np.uint16)
        return SemanticMap(sem), InstanceMap(inst)

    def validate_against(self, catalog: ClassCatalog) -> None:
        sem, inst = self.split()
        sem.validate_against(catalog)
        stuffish = np.isin(sem.ids, catalog.stuff_ids()) | (sem.ids == catalog.void_id)
        if (inst.ids[stuffish] != 0).any():
            raise ValidationError("stuff or void pixels carry a nonzero instance id")

    @property
    def height(self) -> int:
        return self.entries.shape[0]

    @property
    def width(self) -> int:
        return self.entries.shape[1]


# ---------------------------------------------------------------------------
# Resampling and per-pixel primitives
# ---------------------------------------------------------------------------


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D bilinear interpolation weights (align-corners=false), shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    m[rows, lo] += 1.0 - frac
    m[rows, hi] += frac
    return m


def resample_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resample (h, w) or (h, w, c) data; exact copy at unchanged size."""
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"zero-size resample request: {out_h}x{out_w}")
    arr = np.asarray(arr)
    if arr.ndim not in (2, 3):
        raise ValidationError(f"resample expects 2-D or 3-D data, got shape {arr.shape}")
    check_nonempty("resample input", arr)
    if arr.shape[:2] == (out_h, out_w):
        return arr.copy()
    mh = interp_matrix(arr.shape[0], out_h)
    mw = interp_matrix(arr.shape[1], out_w)
    return apply_separable(mh, mw, arr)


def apply_separable(mh: np.ndarray, mw: np.ndarray, arr: np.ndarray) -> np.ndarray:
    """Apply row/column interpolation matrices; output keeps the input dtype."""
    squeeze = arr.ndim == 2
    a = arr[:, :, None] if squeeze else arr
    tmp = np.tensordot(mh, a.astype(np.float64, copy=False), axes=(1, 0))
    out = np.moveaxis(np.tensordot(tmp, mw, axes=(1, 1)), 2, 1)
    out = out.astype(arr.dtype, copy=False)
    return out[:, :, 0] if squeeze else np.ascontiguousarray(out)


def apply_separable_adjoint(mh: np.ndarray, mw: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Adjoint of apply_separable, for backpropagation through the upsampling."""
    tmp = np.tensordot(mh.T, grad.astype(np.float64, copy=False), axes=(1, 0))
    out = np.moveaxis(np.tensordot(tmp, mw.T, axes=(1, 1)), 2, 1)
    return np.ascontiguousarray(out.astype(grad.dtype, copy=False))


def bilinear_resample(src, out_h: int, out_w: int):
    """Resample a FeatureMap, ProbMap, or raw array to (out_h, out_w)."""
    if isinstance(src, FeatureMap):
        return FeatureMap(resample_array(src.data, out_h, out_w), patch_size=src.patch_size)
    if isinstance(src, ProbMap):
        return ProbMap.from_floats(resample_array(src.data, out_h, out_w))
    return resample_array(src, out_h, out_w)


def softmax_array(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted channel softmax; preserves the input float dtype."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_channels(logits) -> ProbMap:
    """Turn a (h, w, c) logit grid into a ProbMap."""
    arr = np.asarray(logits)
    check_ndim("logits", arr, 3)
    if arr.shape[2] < 2:
        raise ValidationError("softmax needs at least 2 classes")
    return ProbMap.from_floats(softmax_array(arr.astype(np.float64, copy=False)))


def hflip(grid):
    """Reverse the column order of any grid type or raw array; an involution."""
    if isinstance(grid, np.ndarray):
        return np.ascontiguousarray(grid[:, ::-1])
    for f in dataclasses.fields(grid):
        value = getattr(grid, f.name)
        if isinstance(value, np.ndarray) and value.ndim >= 2:
            flipped = np.ascontiguousarray(value[:, ::-1])
            return dataclasses.replace(grid, **{f.name: flipped})
    raise TypeError(f"cannot hflip object of type {type(grid).__name__}")


def maxpool_to(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Downsample a 2-D grid by taking the max over each output cell's footprint.

    Footprints follow the floor-partition rule, so positives one pixel wide
    survive any integer or fractional reduction.
    """
    arr = np.asarray(arr)
    check_ndim("maxpool input", arr, 2)
    h, w = arr.shape
    if out_h < 1 or out_w < 1:
        raise ValidationError("zero-size maxpool request")
    if out_h > h or out_w > w:
        raise ValidationError("maxpool_to only reduces; use bilinear_resample to enlarge")
    row_starts = (np.arange(out_h) * h) // out_h
    col_starts = (np.arange(out_w) * w) // out_w
    pooled = np.maximum.reduceat(arr, row_starts, axis=0)
    return np.ascontiguousarray(np.maximum.reduceat(pooled, col_starts, axis=1))
