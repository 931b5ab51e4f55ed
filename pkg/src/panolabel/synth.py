"""Deterministic synthetic scenes: correlated feature/label pairs for testing.

A scene is drawn at patch granularity (stuff bands plus rectangular or
elliptical thing instances) and upsampled to pixel resolution, so labels
align exactly with the patch grid. Features are per-class orthogonal
prototype vectors plus isotropic noise, which makes expected classifier
behavior a function of the noise level alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PackingError, ValidationError
from .fusion import relabel_panoptic
from .grids import ClassCatalog, FeatureMap, InstanceMap, PanopticMap, SemanticMap
from .io import ManifestRow, write_catalog, write_labels, write_manifest, write_tensor


@dataclass(frozen=True)
class SceneParams:
    instance_count: tuple[int, int] = (2, 5)
    noise_sigma: float = 0.5
    signal: float = 3.0
    patch_size: int = 4
    min_extent: int = 5  # patch units, per axis
    max_extent: int = 12
    min_separation: int = 1  # patch units; 0 allows direct adjacency
    thing_prob: float = 0.7
    max_place_tries: int = 50

    def __post_init__(self):
        lo, hi = self.instance_count
        if lo < 0 or hi < lo:
            raise ValidationError("bad instance count range")
        if self.min_extent < 1 or self.max_extent < self.min_extent:
            raise ValidationError("bad extent range")
        if self.noise_sigma < 0:
            raise ValidationError("noise sigma must be >= 0")


def default_catalog() -> ClassCatalog:
    return ClassCatalog(
        (
            (0, "ground", False),
            (1, "sky", False),
            (2, "foliage", False),
            (3, "box", True),
            (4, "disc", True),
            (5, "crate", True),
            (6, "blob", True),
        )
    )


def _stuff_background(rng, hp, wp, stuff_ids) -> np.ndarray:
    n_bands = int(rng.integers(2, 4))
    n_bands = min(n_bands, len(stuff_ids))
    classes = rng.choice(stuff_ids, size=n_bands, replace=False)
    horizontal = bool(rng.integers(0, 2))
    length = hp if horizontal else wp
    cuts = np.sort(rng.choice(np.arange(1, length), size=n_bands - 1, replace=False))
    edges = np.concatenate(([0], cuts, [length]))
    sem = np.zeros((hp, wp), dtype=np.uint16)
    for band, cls in enumerate(classes):
        lo, hi = edges[band], edges[band + 1]
        if horizontal:
            sem[lo:hi, :] = cls
        else:
            sem[:, lo:hi] = cls
    return sem


def _shape_mask(rng, hp, wp, params: SceneParams):
    eh = int(rng.integers(params.min_extent, params.max_extent + 1))
    ew = int(rng.integers(params.min_extent, params.max_extent + 1))
    eh, ew = min(eh, hp), min(ew, wp)
    r0 = int(rng.integers(0, hp - eh + 1))
    c0 = int(rng.integers(0, wp - ew + 1))
    mask = np.zeros((hp, wp), dtype=bool)
    if rng.integers(0, 2) == 0:
        mask[r0 : r0 + eh, c0 : c0 + ew] = True
    else:
        rr = np.arange(hp)[:, None] - (r0 + (eh - 1) / 2.0)
        cc = np.arange(wp)[None, :] - (c0 + (ew - 1) / 2.0)
        mask = (rr / (eh / 2.0)) ** 2 + (cc / (ew / 2.0)) ** 2 <= 1.0
    return mask


def _dilate_chebyshev(mask: np.ndarray, radius: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(radius):
        grown = out.copy()
        grown[1:] |= out[:-1]
        grown[:-1] |= out[1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        grown[1:, 1:] |= out[:-1, :-1]
        grown[1:, :-1] |= out[:-1, 1:]
        grown[:-1, 1:] |= out[1:, :-1]
        grown[:-1, :-1] |= out[1:, 1:]
        out = grown
    return out


def gen_scene(
    seed,
    h_patches: int,
    w_patches: int,
    channels: int,
    catalog: ClassCatalog | None = None,
    params: SceneParams = SceneParams(),
) -> tuple[FeatureMap, PanopticMap]:
    """One seeded scene: patch features plus a pixel-resolution panoptic map."""
    catalog = catalog or default_catalog()
    if channels < catalog.num_classes:
        raise ValidationError("need at least one feature channel per class")
    rng = np.random.default_rng(seed)
    hp, wp = h_patches, w_patches

    sem = _stuff_background(rng, hp, wp, catalog.stuff_ids())
    inst = np.zeros((hp, wp), dtype=np.uint16)

    thing_ids = np.asarray(catalog.thing_ids())
    active = thing_ids[rng.random(thing_ids.size) < params.thing_prob]
    if active.size == 0:
        active = thing_ids[[int(rng.integers(0, thing_ids.size))]]

    lo, hi = params.instance_count
    wanted = int(rng.integers(lo, hi + 1))
    placed = 0
    occupied = np.zeros((hp, wp), dtype=bool)
    for k in range(wanted):
        cls = int(active[int(rng.integers(0, active.size))])
        for attempt in range(params.max_place_tries):
            mask = _shape_mask(rng, hp, wp, params)
            blocked = occupied if params.min_separation == 0 else _dilate_chebyshev(
                occupied, params.min_separation
            )
            if not (mask & blocked).any():
                sem[mask] = cls
                inst[mask] = placed + 1
                occupied |= mask
                placed += 1
                break
        else:
            if placed < lo:
                raise PackingError(
                    f"placed {placed} of at least {lo} instances after bounded retries"
                )
            break

    ps = params.patch_size
    sem_px = np.repeat(np.repeat(sem, ps, axis=0), ps, axis=1)
    inst_px = np.repeat(np.repeat(inst, ps, axis=0), ps, axis=1)
    pan = relabel_panoptic(PanopticMap.from_parts(SemanticMap(sem_px), InstanceMap(inst_px)))

    prototypes = np.zeros((catalog.num_classes, channels), dtype=np.float64)
    prototypes[np.arange(catalog.num_classes), np.arange(catalog.num_classes)] = params.signal
    feats = prototypes[sem]
    if params.noise_sigma > 0:
        feats = feats + params.noise_sigma * rng.standard_normal((hp, wp, channels))
    return FeatureMap(feats.astype(np.float32), patch_size=ps), pan


def write_dataset(
    out_dir,
    seed: int,
    num_gt: int,
    num_unlabeled: int,
    num_holdout: int,
    h_patches: int,
    w_patches: int,
    channels: int,
    catalog: ClassCatalog | None = None,
    params: SceneParams = SceneParams(),
) -> Path:
    """Write scenes, labels, catalog, and a role-tagged manifest; returns its path."""
    catalog = catalog or default_catalog()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_catalog(catalog, out / "catalog.txt")

    roles = ["gt"] * num_gt + ["unlabeled"] * num_unlabeled + ["holdout"] * num_holdout
    rows = []
    for i, role in enumerate(roles):
        fm, pan = gen_scene(
            np.random.SeedSequence((seed, i)), h_patches, w_patches, channels, catalog, params
        )
        feat_path = out / f"scene{i:04d}.spnt"
        label_path = out / f"scene{i:04d}.spnl"
        write_tensor(fm, feat_path)
        write_labels(pan, label_path)
        rows.append(ManifestRow(role, feat_path, label_path, source=f"scene{i:04d}"))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, rows)
    return manifest
