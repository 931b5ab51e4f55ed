"""Command-line orchestration of the pseudo-label workflow.

Exit codes: 0 success, 1 usage error, 2 I/O or file-format error,
3 validation error (bad shapes, inconsistent manifests, infeasible scenes).
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io as pio
from .bottomup import (
    CenterHeatmap,
    OffsetField,
    encode_targets,
    extract_centers,
    group_pixels,
    majority_vote,
)
from .errors import FileFormatError, PackingError, ValidationError
from .estimators import generate_pseudo_label
from .fusion import FusionConfig
from .grids import InstanceMap, SemanticMap
from .losses import LossConfig
from .metrics import ConfusionMatrix, PqAccumulator
from .synth import SceneParams, write_dataset
from .training import BOUNDARY, SEMANTIC, TrainConfig, TrainSample, train_few_shot


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _scale_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in text.split(",") if tok)
    except ValueError:
        raise _UsageError(f"bad scale list {text!r}; expected e.g. 1,2,3")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="panolabel", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="emit a synthetic feature/label dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    p.add_argument("--gt", type=int, default=10, help="annotated scenes (default 10)")
    p.add_argument("--unlabeled", type=int, default=50, help="unlabeled scenes (default 50)")
    p.add_argument("--holdout", type=int, default=20, help="holdout scenes (default 20)")
    p.add_argument("--patches", type=int, nargs=2, default=(64, 64), metavar=("H", "W"),
                   help="patch grid size (default 64 64)")
    p.add_argument("--channels", type=int, default=32, help="feature channels (default 32)")
    p.add_argument("--patch-size", type=int, default=4, help="pixels per patch edge (default 4)")
    p.add_argument("--noise-sigma", type=float, default=0.5, help="feature noise (default 0.5)")
    p.add_argument("--signal", type=float, default=3.0, help="class signal strength (default 3.0)")
    p.add_argument("--instances", type=int, nargs=2, default=(2, 5), metavar=("LO", "HI"),
                   help="instance count range (default 2 5)")
    p.add_argument("--separation", type=int, default=1,
                   help="min instance separation in patches; 0 allows adjacency (default 1)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train-heads", help="train a semantic or boundary head")
    p.add_argument("--manifest", required=True, help="dataset manifest (gt rows are used)")
    p.add_argument("--kind", choices=(SEMANTIC, BOUNDARY), required=True, help="head kind")
    p.add_argument("--catalog", help="class catalog file (required for semantic)")
    p.add_argument("--out", required=True, help="checkpoint output path (.spnm)")
    p.add_argument("--loss-csv", help="write the loss trace here")
    p.add_argument("--epochs", type=int, default=600, help="epochs over the k samples (default 600)")
    p.add_argument("--lr", type=float, default=0.001, help="learning rate (default 0.001)")
    p.add_argument("--batch-size", type=int, default=1, help="batch size (default 1)")
    p.add_argument("--seed", type=int, default=0, help="training seed (default 0)")
    p.add_argument("--crop", type=int, nargs=2, default=(32, 32), metavar=("H", "W"),
                   help="crop size in patches; 0 0 disables cropping (default 32 32)")
    p.add_argument("--flip-prob", type=float, default=0.5, help="hflip probability (default 0.5)")
    p.add_argument("--hidden", type=int, nargs=3, default=(256, 256, 256), metavar=("D1", "D2", "D3"),
                   help="hidden layer widths (default 256 256 256)")
    p.add_argument("--upsample", type=int, default=None,
                   help="head upsampling factor (default: patch size for semantic, 4 for boundary)")
    p.add_argument("--top-fraction", type=float, default=0.2,
                   help="bootstrapped CE hard fraction (default 0.2)")
    p.set_defaults(func=_cmd_train_heads)

    p = sub.add_parser("gen-labels", help="generate panoptic pseudo-labels")
    p.add_argument("--manifest", required=True, help="dataset manifest")
    p.add_argument("--sem-head", required=True, help="semantic head checkpoint")
    p.add_argument("--bnd-head", required=True, help="boundary head checkpoint")
    p.add_argument("--catalog", required=True, help="class catalog file")
    p.add_argument("--out-dir", required=True, help="directory for .spnl outputs")
    p.add_argument("--sem-scales", type=_scale_list, default=(1, 2, 3),
                   help="semantic ensembling scales (default 1,2,3)")
    p.add_argument("--bnd-scales", type=_scale_list, default=(3, 4, 5),
                   help="boundary ensembling scales (default 3,4,5)")
    p.add_argument("--min-blob", type=int, default=200,
                   help="below this area a blob turns void (default 200)")
    p.add_argument("--min-instance", type=int, default=100,
                   help="below this area an instance merges away (default 100)")
    p.add_argument("--mask", help="static void mask (.spnt, nonzero = masked)")
    p.add_argument("--roles", default="unlabeled,holdout",
                   help="comma-separated manifest roles to label (default unlabeled,holdout)")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers (default 1)")
    p.set_defaults(func=_cmd_gen_labels)

    p = sub.add_parser("encode-targets", help="encode center/offset/weight targets")
    p.add_argument("--manifest", required=True, help="manifest of labeled images")
    p.add_argument("--catalog", required=True, help="class catalog file")
    p.add_argument("--out-dir", required=True, help="directory for target .spnt files")
    p.add_argument("--sigma", type=float, default=8.0, help="center Gaussian sigma (default 8)")
    p.add_argument("--small-weight", type=float, default=3.0,
                   help="loss weight for small instances (default 3)")
    p.add_argument("--small-area", type=int, default=4096,
                   help="area threshold for small instances (default 4096)")
    p.add_argument("--roles", default="gt,pseudo",
                   help="manifest roles to encode (default gt,pseudo)")
    p.set_defaults(func=_cmd_encode_targets)

    p = sub.add_parser("eval", help="evaluate predicted labels against ground truth")
    p.add_argument("--pred", required=True, help="manifest of predicted labels")
    p.add_argument("--gt", required=True, help="manifest of ground-truth labels")
    p.add_argument("--catalog", required=True, help="class catalog file")
    p.add_argument("--pred-roles", default=None, help="roles to evaluate from the pred manifest")
    p.add_argument("--gt-roles", default=None, help="roles to evaluate from the gt manifest")
    p.add_argument("--csv", help="also write the report as CSV")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("fuse-bottomup", help="fuse semantic probs + centers + offsets")
    p.add_argument("--sem-probs", required=True, help="semantic probabilities (.spnt, h x w x c)")
    p.add_argument("--centers", required=True, help="center heatmap (.spnt, h x w x 1)")
    p.add_argument("--offsets", required=True, help="offset field (.spnt, h x w x 2)")
    p.add_argument("--catalog", required=True, help="class catalog file")
    p.add_argument("--out", required=True, help="output panoptic labels (.spnl)")
    p.add_argument("--threshold", type=float, default=0.1, help="center score cutoff (default 0.1)")
    p.add_argument("--nms-window", type=int, default=7, help="center NMS window (default 7)")
    p.add_argument("--max-centers", type=int, default=200, help="center cap (default 200)")
    p.set_defaults(func=_cmd_fuse_bottomup)
    return parser


def _cmd_synth(args) -> int:
    params = SceneParams(
        instance_count=tuple(args.instances),
        noise_sigma=args.noise_sigma,
        signal=args.signal,
        patch_size=args.patch_size,
        min_separation=args.separation,
    )
    manifest = write_dataset(
        args.out,
        args.seed,
        args.gt,
        args.unlabeled,
        args.holdout,
        args.patches[0],
        args.patches[1],
        args.channels,
        params=params,
    )
    print(manifest)
    return 0


def _infer_patch_size(fm_shape, label_shape) -> int:
    ps = label_shape[0] // fm_shape[0]
    if ps < 1 or label_shape != (fm_shape[0] * ps, fm_shape[1] * ps):
        raise ValidationError(
            f"label size {label_shape} is not an integer multiple of the patch grid {fm_shape}"
        )
    return ps


def _load_train_samples(manifest_path, kind: str) -> list[TrainSample]:
    rows = [r for r in pio.read_manifest(manifest_path) if r.role == "gt"]
    if not rows:
        raise ValidationError(f"{manifest_path}: no gt rows")
    by_source: dict[str, list] = {}
    order: list[str] = []
    for i, row in enumerate(rows):
        key = row.source or f"row{i}"
        if key not in by_source:
            by_source[key] = []
            order.append(key)
        by_source[key].append(row)

    samples = []
    for key in order:
        group = by_source[key]
        label_row = group[0]
        if label_row.label_path is None:
            raise ValidationError(f"gt row {key} has no label file")
        pan = pio.read_labels(label_row.label_path)
        raw = [pio.read_array(r.feature_path) for r in group]
        ps = _infer_patch_size(raw[0].shape[:2], pan.entries.shape)
        feats = tuple(pio.read_tensor(r.feature_path, patch_size=ps) for r in group)
        sem, inst = pan.split()
        if kind == SEMANTIC:
            samples.append(TrainSample(feats, semantic=sem))
        else:
            samples.append(TrainSample(feats, instances=inst))
    return samples


def _cmd_train_heads(args) -> int:
    if args.kind == SEMANTIC:
        if not args.catalog:
            raise _UsageError("--catalog is required for the semantic head")
        catalog = pio.read_catalog(args.catalog)
        num_classes = catalog.num_classes
    else:
        num_classes = 2
    samples = _load_train_samples(args.manifest, args.kind)
    crop = None if tuple(args.crop) == (0, 0) else tuple(args.crop)
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
        crop_patches=crop,
        flip_prob=args.flip_prob,
        hidden_dims=tuple(args.hidden),
        upsample_factor=args.upsample,
    )
    head, trace = train_few_shot(
        samples, args.kind, num_classes, cfg, LossConfig(top_fraction=args.top_fraction)
    )
    pio.write_checkpoint(head, args.out)
    if args.loss_csv:
        pio.write_loss_trace(args.loss_csv, trace)
    print(f"wrote {args.out} ({len(trace)} steps, final loss {trace[-1][1]:.6f})")
    return 0


def _gen_one(task) -> str:
    (feat_path, out_path, sem_path, bnd_path, catalog_path, sem_scales, bnd_scales,
     min_blob, min_instance, mask_path) = task
    sem_head = pio.read_checkpoint(sem_path)
    bnd_head = pio.read_checkpoint(bnd_path)
    catalog = pio.read_catalog(catalog_path)
    fm = pio.read_tensor(feat_path, patch_size=sem_head.upsample_factor)
    void_mask = None
    if mask_path:
        void_mask = pio.read_array(mask_path)[:, :, 0] != 0
    pan = generate_pseudo_label(
        sem_head,
        bnd_head,
        fm,
        catalog,
        sem_scales,
        bnd_scales,
        FusionConfig(min_blob_area=min_blob, min_instance_area=min_instance),
        void_mask,
    )
    pio.write_labels(pan, out_path)
    return str(out_path)


def _cmd_gen_labels(args) -> int:
    roles = set(args.roles.split(","))
    rows = [r for r in pio.read_manifest(args.manifest) if r.role in roles]
    if not rows:
        raise ValidationError(f"{args.manifest}: no rows with roles {sorted(roles)}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = []
    out_rows = []
    for row in rows:
        if row.feature_path is None:
            raise ValidationError("a selected manifest row has no feature file")
        out_path = out_dir / (Path(row.feature_path).stem + ".spnl")
        tasks.append(
            (row.feature_path, out_path, args.sem_head, args.bnd_head, args.catalog,
             args.sem_scales, args.bnd_scales, args.min_blob, args.min_instance, args.mask)
        )
        out_rows.append(pio.ManifestRow("pseudo", row.feature_path, out_path, row.source))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(_gen_one, tasks))
    else:
        for task in tasks:
            _gen_one(task)
    manifest_out = out_dir / "pseudo-manifest.tsv"
    pio.write_manifest(manifest_out, out_rows)
    print(manifest_out)
    return 0


def _cmd_encode_targets(args) -> int:
    roles = set(args.roles.split(","))
    catalog = pio.read_catalog(args.catalog)
    rows = [r for r in pio.read_manifest(args.manifest) if r.role in roles and r.label_path]
    if not rows:
        raise ValidationError(f"{args.manifest}: no labeled rows with roles {sorted(roles)}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weight_cfg = LossConfig(
        small_instance_weight=args.small_weight, small_instance_area=args.small_area
    )
    for row in rows:
        pan = pio.read_labels(row.label_path)
        heat, offsets, valid, weights = encode_targets(pan, catalog, args.sigma, weight_cfg)
        stem = Path(row.label_path).stem
        pio.write_tensor(heat.values[:, :, None], out_dir / f"{stem}.center.spnt")
        pio.write_tensor(offsets.offsets, out_dir / f"{stem}.offset.spnt")
        pio.write_tensor(weights.weights[:, :, None], out_dir / f"{stem}.weight.spnt")
        pio.write_tensor(valid.astype(np.float32)[:, :, None], out_dir / f"{stem}.valid.spnt")
    print(f"encoded {len(rows)} label maps into {out_dir}")
    return 0


def _select_labeled(manifest_path, roles_text):
    rows = pio.read_manifest(manifest_path)
    if roles_text:
        roles = set(roles_text.split(","))
        rows = [r for r in rows if r.role in roles]
    rows = [r for r in rows if r.label_path is not None]
    if not rows:
        raise ValidationError(f"{manifest_path}: no labeled rows selected")
    return rows


def _cmd_eval(args) -> int:
    catalog = pio.read_catalog(args.catalog)
    pred_rows = _select_labeled(args.pred, args.pred_roles)
    gt_rows = _select_labeled(args.gt, args.gt_roles)
    if len(pred_rows) != len(gt_rows):
        raise ValidationError(
            f"manifest length mismatch: {len(pred_rows)} predictions vs {len(gt_rows)} references"
        )
    cm = ConfusionMatrix(catalog.num_classes)
    pq_acc = PqAccumulator(catalog)
    for pred_row, gt_row in zip(pred_rows, gt_rows):
        if pred_row.source and gt_row.source and pred_row.source != gt_row.source:
            raise ValidationError(
                f"manifest rows out of order: {pred_row.source} vs {gt_row.source}"
            )
        pred = pio.read_labels(pred_row.label_path)
        gt = pio.read_labels(gt_row.label_path)
        cm.accumulate(pred.split()[0], gt.split()[0], catalog.void_id)
        pq_acc.accumulate(pred, gt)
    report = pq_acc.report()

    accuracy = cm.accuracy()
    mean_iou = cm.mean_iou()
    print(f"images evaluated : {len(pred_rows)}")
    print(f"pixel accuracy   : {accuracy:.4f}")
    print(f"mean IoU         : {mean_iou:.4f}")
    print(f"PQ {report.pq:.4f}  SQ {report.sq:.4f}  RQ {report.rq:.4f}")
    print(f"{'class':<12}{'PQ':>8}{'SQ':>8}{'RQ':>8}{'TP':>6}{'FP':>6}{'FN':>6}")
    for cid in sorted(report.per_class):
        s = report.per_class[cid]
        print(
            f"{catalog.name(cid):<12}{s.pq:>8.4f}{s.sq:>8.4f}{s.rq:>8.4f}"
            f"{s.tp:>6}{s.fp:>6}{s.fn:>6}"
        )
    if args.csv:
        lines = report.csv_rows(catalog)
        lines.append(f"acc,{accuracy!r},,,,,")
        lines.append(f"miou,{mean_iou!r},,,,,")
        Path(args.csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def _cmd_fuse_bottomup(args) -> int:
    catalog = pio.read_catalog(args.catalog)
    sem_probs = pio.read_array(args.sem_probs)
    centers_arr = pio.read_array(args.centers)
    offsets_arr = pio.read_array(args.offsets)
    if centers_arr.shape[2] != 1:
        raise ValidationError("center heatmap file must have exactly one channel")
    sem_ids = np.argmax(sem_probs, axis=2).astype(np.uint16)
    sem = SemanticMap(sem_ids)
    thing_lookup = np.zeros(catalog.num_classes, dtype=bool)
    for cid in catalog.thing_ids():
        thing_lookup[cid] = True
    thing_mask = thing_lookup[sem_ids]
    centers = extract_centers(
        CenterHeatmap(np.clip(centers_arr[:, :, 0], 0.0, 1.0)),
        args.threshold,
        args.nms_window,
        args.max_centers,
    )
    inst = group_pixels(centers, OffsetField(offsets_arr), thing_mask)
    pan = majority_vote(sem, inst, catalog)
    pio.write_labels(pan, args.out)
    print(args.out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args) or 0
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (OSError, FileFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, PackingError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
