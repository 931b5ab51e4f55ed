"""Bit-exact file I/O: feature tensors, label maps, catalogs, checkpoints, manifests.

Binary layouts (all integers unsigned 32-bit little-endian):

* tensor  (.spnt): "SPNT", version=1, dtype=1 (float32), ndim=3, h, w, c,
  then h*w*c little-endian float32 values in row-major (row, col, channel) order.
* labels  (.spnl): "SPNL", version=1, h, w, then h*w encoded panoptic entries.
* model   (.spnm): "SPNM", version=1, upsample_factor, n_layers, n_layers+1
  layer dims, then per layer the weight matrix (in x out, row-major) and bias,
  as little-endian float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DimensionOverflowError,
    FileFormatError,
    TruncatedFileError,
    UnsupportedVersionError,
    ValidationError,
)
from .grids import ClassCatalog, FeatureMap, PanopticMap

TENSOR_MAGIC = b"SPNT"
LABEL_MAGIC = b"SPNL"
MODEL_MAGIC = b"SPNM"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 1

# Sanity cap: no grid used here comes anywhere near 2**32 elements.
_MAX_ELEMENTS = 2**32


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"{self.path}: file ends inside a {n}-byte field")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def expect_magic(self, magic: bytes) -> None:
        got = self.take(len(magic))
        if got != magic:
            raise BadMagicError(f"{self.path}: expected magic {magic!r}, found {got!r}")

    def expect_version(self) -> None:
        version = self.u32()
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"{self.path}: unsupported format version {version}")

    def dims(self, n: int) -> tuple[int, ...]:
        out = tuple(self.u32() for _ in range(n))
        if any(d == 0 for d in out):
            raise DimensionOverflowError(f"{self.path}: zero-sized dimension in {out}")
        total = 1
        for d in out:
            total *= d
        if total > _MAX_ELEMENTS:
            raise DimensionOverflowError(f"{self.path}: dimensions {out} overflow the sanity cap")
        return out

    def payload(self, count: int, dtype) -> np.ndarray:
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).copy()

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FileFormatError(f"{self.path}: {len(self.data) - self.pos} trailing bytes")


def write_tensor(tensor, path) -> None:
    """Write a FeatureMap (or raw (h, w, c) float array) as a .spnt file."""
    arr = tensor.data if isinstance(tensor, FeatureMap) else np.asarray(tensor)
    if arr.ndim != 3:
        raise ValidationError(f"tensor files hold 3-D data, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<IIIIII", FORMAT_VERSION, DTYPE_FLOAT32, 3, h, w, c))
        f.write(arr.tobytes())


def read_array(path) -> np.ndarray:
    """Read a .spnt payload as a (h, w, c) float32 array."""
    r = _Reader(Path(path).read_bytes(), path)
    r.expect_magic(TENSOR_MAGIC)
    r.expect_version()
    dtype_code = r.u32()
    if dtype_code != DTYPE_FLOAT32:
        raise FileFormatError(f"{path}: unknown dtype code {dtype_code}")
    ndim = r.u32()
    if ndim != 3:
        raise FileFormatError(f"{path}: tensor files are 3-D, file declares ndim={ndim}")
    h, w, c = r.dims(3)
    data = r.payload(h * w * c, "<f4").reshape(h, w, c)
    r.done()
    return data.astype(np.float32)


def read_tensor(path, patch_size: int = 14) -> FeatureMap:
    return FeatureMap(read_array(path), patch_size=patch_size)


def write_labels(labels: PanopticMap, path) -> None:
    arr = np.ascontiguousarray(labels.entries, dtype="<u4")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, h, w))
        f.write(arr.tobytes())


def read_labels(path) -> PanopticMap:
    r = _Reader(Path(path).read_bytes(), path)
    r.expect_magic(LABEL_MAGIC)
    r.expect_version()
    h, w = r.dims(2)
    entries = r.payload(h * w, "<u4").reshape(h, w)
    r.done()
    return PanopticMap(entries.astype(np.uint32))


def write_catalog(catalog: ClassCatalog, path) -> None:
    lines = [f"{cid}\t{name}\t{'thing' if thing else 'stuff'}" for cid, name, thing in catalog.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_catalog(path) -> ClassCatalog:
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("thing", "stuff"):
            raise FileFormatError(f"{path}:{lineno}: expected 'id<TAB>name<TAB>thing|stuff'")
        try:
            cid = int(parts[0])
        except ValueError as exc:
            raise FileFormatError(f"{path}:{lineno}: bad class id {parts[0]!r}") from exc
        entries.append((cid, parts[1], parts[2] == "thing"))
    try:
        return ClassCatalog(tuple(entries))
    except ValidationError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc


def write_checkpoint(head, path) -> None:
    """Serialize an MlpHead as a .spnm file."""
    dims = head.layer_dims
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, head.upsample_factor, len(head.weights)))
        f.write(struct.pack(f"<{len(dims)}I", *dims))
        for w, b in zip(head.weights, head.biases):
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def read_checkpoint(path):
    from .heads import MlpHead  # local import to avoid a cycle

    r = _Reader(Path(path).read_bytes(), path)
    r.expect_magic(MODEL_MAGIC)
    r.expect_version()
    upsample = r.u32()
    n_layers = r.u32()
    if n_layers == 0 or n_layers > 64:
        raise DimensionOverflowError(f"{path}: implausible layer count {n_layers}")
    dims = r.dims(n_layers + 1)
    weights, biases = [], []
    for i in range(n_layers):
        weights.append(r.payload(dims[i] * dims[i + 1], "<f4").reshape(dims[i], dims[i + 1]).astype(np.float32))
        biases.append(r.payload(dims[i + 1], "<f4").astype(np.float32))
    r.done()
    return MlpHead(layer_dims=dims, weights=weights, biases=biases, upsample_factor=upsample)


# ---------------------------------------------------------------------------
# Manifests and CSV outputs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRow:
    """One dataset entry: a role tag plus feature/label paths and a source id.

    Rows sharing a source id are augmentation variants of the same image.
    """

    role: str
    feature_path: Path | None
    label_path: Path | None
    source: str | None = None


def read_manifest(path) -> list[ManifestRow]:
    """Parse a line-oriented manifest; relative paths resolve against its directory."""
    base = Path(path).parent
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            raise FileFormatError(f"{path}:{lineno}: expected 'role<TAB>features<TAB>labels[<TAB>source]'")

        def resolve(token: str) -> Path | None:
            if token == "-":
                return None
            p = Path(token)
            return p if p.is_absolute() else base / p

        source = parts[3] if len(parts) > 3 and parts[3] != "-" else None
        rows.append(ManifestRow(parts[0], resolve(parts[1]), resolve(parts[2]), source))
    return rows


def write_manifest(path, rows: list[ManifestRow]) -> None:
    base = Path(path).parent

    def token(p: Path | None) -> str:
        if p is None:
            return "-"
        try:
            return Path(p).relative_to(base).as_posix()
        except ValueError:
            return Path(p).as_posix()

    lines = [f"{r.role}\t{token(r.feature_path)}\t{token(r.label_path)}\t{r.source or '-'}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_loss_trace(path, trace: list[tuple[int, float]]) -> None:
    lines = ["step,loss"] + [f"{step},{loss!r}" for step, loss in trace]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
