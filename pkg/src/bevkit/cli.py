"""Batch command surface: build-db, pseudo-ingest, augment, occupancy,
distill-loss, collision-stats.

Every command is deterministic under a fixed config (seed included):
re-runs produce byte-identical artifacts, and ``--workers`` changes wall
time only, never output bytes. Configuration comes from one TOML file;
flags override it.

Expected dataset layout under ``dataset_root`` (KITTI-style)::

    velodyne/<id>.bin   calib/<id>.txt   image_2/<id>.png
    label_2/<id>.txt    (labelled scenes)
    pseudo_label/<id>.txt   (ingested detections for unlabelled scenes)
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .cmaug import (
    Scene,
    audit_scene,
    augment,
    build_gt_database,
    ingest_pseudo_labels,
    scene_rng,
)
from .config import RunConfig, load_config
from .distill import PredictionMaps, feat_kd_loss, resp_kd_loss, total_kd_loss
from .geometry import box3d_from_label
from .occupancy import GridConfigError, build_occupancy_mask, smooth_mask
from .scene_io import (
    FormatError,
    load_database,
    read_calib,
    read_image,
    read_labels,
    read_point_cloud,
    read_tensor,
    save_database,
    write_image,
    write_labels,
    write_pgm,
    write_point_cloud,
    write_tensor,
)
from .stats import run_scene_stats, run_synthetic_stats

logger = logging.getLogger(__name__)

_AUDIT_STREAM = 0xA0D17  # rng substream tag for the post-augment audit


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Dataset plumbing
# ---------------------------------------------------------------------------

def read_split(path) -> list[str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read split file {path}: {exc}") from exc
    return [line.strip() for line in text.splitlines() if line.strip()]


def load_scene(cfg: RunConfig, scene_id: str, need_image: bool = True) -> Scene:
    """Load one scene's inputs, wrapping failures with the scene id."""
    root = cfg.dataset_root
    try:
        cloud = read_point_cloud(root / "velodyne" / f"{scene_id}.bin")
        calib = read_calib(root / "calib" / f"{scene_id}.txt")
        image = (
            read_image(root / "image_2" / f"{scene_id}.png")
            if need_image
            else np.zeros((1, 1, 3), dtype=np.uint8)
        )
        label_path = root / "label_2" / f"{scene_id}.txt"
        labels = read_labels(label_path) if label_path.is_file() else None
        pseudo = []
        if labels is None:
            pseudo_path = root / "pseudo_label" / f"{scene_id}.txt"
            if pseudo_path.is_file():
                raw = read_labels(pseudo_path, expect_score=True)
                pseudo = ingest_pseudo_labels(
                    {scene_id: raw}, cfg.aug.pseudo_score_min
                )[scene_id]
    except (FormatError, OSError) as exc:
        raise CliError(f"scene {scene_id}: {exc}") from exc
    return Scene(
        scene_id=scene_id,
        cloud=cloud,
        calib=calib,
        image=image,
        labels=labels,
        pseudo_labels=pseudo,
    )


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_build_db(cfg: RunConfig, args) -> int:
    if cfg.split is None:
        raise CliError("build-db needs a split file (config key 'split')")
    ids = read_split(cfg.split)
    errors: list[str] = []

    def scenes():
        for scene_id in ids:
            try:
                yield load_scene(cfg, scene_id)
            except CliError as exc:
                errors.append(str(exc))

    db = build_gt_database(scenes(), cfg.aug.min_points)
    if errors:
        for message in errors:
            print(f"error: {message}", file=sys.stderr)
        print("database not written due to scene errors", file=sys.stderr)
        return 1
    out_dir = Path(args.db) if args.db else cfg.output_root / "gt_database"
    save_database(db, out_dir)
    for class_name in sorted(db.entries):
        samples = db.entries[class_name]
        mean_pts = float(np.mean([s.num_points for s in samples]))
        print(f"{class_name}: {len(samples)} objects, mean points {mean_pts:.1f}")
    print(f"saved {db.total()} objects to {out_dir}")
    return 0


def cmd_pseudo_ingest(cfg: RunConfig, args) -> int:
    pred_dir = Path(args.pred_dir)
    score_min = args.score_min if args.score_min is not None else cfg.aug.pseudo_score_min
    out_dir = Path(args.out) if args.out else cfg.dataset_root / "pseudo_label"
    out_dir.mkdir(parents=True, exist_ok=True)
    files = sorted(pred_dir.glob("*.txt"))
    summary = {}
    for path in files:
        scene_id = path.stem
        records = read_labels(path, expect_score=True)
        kept = ingest_pseudo_labels({scene_id: records}, score_min)[scene_id]
        write_labels(kept, out_dir / f"{scene_id}.txt")
        summary[scene_id] = {"read": len(records), "kept": len(kept)}
    _write_json(out_dir / "ingest_summary.json", {"score_min": score_min, "scenes": summary})
    print(f"ingested {len(files)} prediction files into {out_dir}")
    return 0


def cmd_augment(cfg: RunConfig, args) -> int:
    if cfg.split is None:
        raise CliError("augment needs a split file (config key 'split')")
    db_dir = Path(args.db) if args.db else cfg.output_root / "gt_database"
    db = load_database(db_dir)
    ids = read_split(cfg.split)
    out_root = Path(args.out) if args.out else cfg.output_root / "augmented"
    for sub in ("velodyne", "image_2", "label_2", "provenance"):
        (out_root / sub).mkdir(parents=True, exist_ok=True)
    write_pseudo = args.write_pseudo_labels

    def process(scene_id: str) -> dict:
        scene = load_scene(cfg, scene_id)
        aug = augment(scene, db, cfg.aug)
        existing = [box3d_from_label(r) for r in scene.collision_records()]
        violations = audit_scene(
            aug,
            existing,
            scene.calib,
            scene.image_size,
            cfg.aug,
            scene_rng(cfg.aug.seed, scene_id, _AUDIT_STREAM),
        )
        if violations:
            raise CliError(
                f"scene {scene_id}: augmentation audit failed (engine bug): "
                + "; ".join(violations)
            )
        labels_out = aug.labels
        if scene.labels is None and write_pseudo:
            stripped = [replace(r, score=None) for r in scene.pseudo_labels]
            labels_out = stripped + labels_out
        write_point_cloud(aug.cloud, out_root / "velodyne" / f"{scene_id}.bin")
        write_image(aug.image, out_root / "image_2" / f"{scene_id}.png")
        write_labels(labels_out, out_root / "label_2" / f"{scene_id}.txt")
        _write_json(out_root / "provenance" / f"{scene_id}.json", aug.provenance)
        return {
            "scene": scene_id,
            "pasted": len(aug.pasted),
            "rejected": len(aug.provenance["rejected"]),
        }

    results: dict[str, dict] = {}
    errors: list[str] = []
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        futures = {pool.submit(process, scene_id): scene_id for scene_id in ids}
        for future, scene_id in futures.items():
            try:
                results[scene_id] = future.result()
            except (CliError, FormatError, OSError) as exc:
                errors.append(f"scene {scene_id}: {exc}")
    summary = {
        "seed": cfg.aug.seed,
        "scenes": [results[i] for i in ids if i in results],
        "errors": sorted(errors),
    }
    _write_json(out_root / "summary.json", summary)
    for message in errors:
        print(f"error: {message}", file=sys.stderr)
    pasted = sum(r["pasted"] for r in results.values())
    print(f"augmented {len(results)}/{len(ids)} scenes, pasted {pasted} objects")
    return 1 if errors else 0


def cmd_occupancy(cfg: RunConfig, args) -> int:
    scene = load_scene(cfg, args.scene, need_image=False)
    mask = build_occupancy_mask(scene.cloud, cfg.grid)
    if args.smooth:
        mask = smooth_mask(mask, cfg.smoothing)
    out_root = Path(args.out) if args.out else cfg.output_root / "occupancy"
    out_root.mkdir(parents=True, exist_ok=True)
    npy_path = out_root / f"{args.scene}.npy"
    write_tensor(mask, npy_path)
    if args.pgm:
        write_pgm(mask, out_root / f"{args.scene}.pgm")
    active = int(np.count_nonzero(mask))
    print(f"{npy_path}: shape {mask.shape}, {active} active cells")
    return 0


_TENSOR_FLAGS = (
    "student_feat", "teacher_feat", "student_cls", "teacher_cls",
    "student_loc", "teacher_loc", "student_dir", "teacher_dir",
)


def cmd_distill_loss(cfg: RunConfig, args) -> int:
    tensors = {name: read_tensor(getattr(args, name)) for name in _TENSOR_FLAGS}
    mask = read_tensor(args.mask)
    if mask.ndim != 2:
        raise CliError(f"mask must be 2-D, got shape {mask.shape}")

    def check(a_name, b_name, same_channels=True):
        a, b = tensors[a_name], tensors[b_name]
        mismatch = a.shape != b.shape if same_channels else a.shape[:2] != b.shape[:2]
        if mismatch:
            raise CliError(
                f"shape mismatch: {a_name} {a.shape} vs {b_name} {b.shape}"
            )

    for head in ("feat", "cls", "loc", "dir"):
        check(f"student_{head}", f"teacher_{head}")
    for name, tensor in tensors.items():
        if tensor.shape[:2] != mask.shape:
            raise CliError(
                f"shape mismatch: {name} {tensor.shape} vs mask {mask.shape}"
            )
    feat = feat_kd_loss(
        tensors["student_feat"], tensors["teacher_feat"], mask, cfg.smoothing, cfg.loss
    )
    student = PredictionMaps(
        cls=tensors["student_cls"], loc=tensors["student_loc"], dir=tensors["student_dir"]
    )
    teacher = PredictionMaps(
        cls=tensors["teacher_cls"], loc=tensors["teacher_loc"], dir=tensors["teacher_dir"]
    )
    resp, heads = resp_kd_loss(student, teacher, mask, cfg.smoothing, cfg.loss)
    record = {
        "feat_kd": feat,
        "cls_kd": heads["cls_kd"],
        "loc_kd": heads["loc_kd"],
        "dir_kd": heads["dir_kd"],
        "resp_kd": resp,
        "total": total_kd_loss(feat, resp, cfg.loss),
    }
    text = json.dumps(record, sort_keys=True, indent=2)
    print(text)
    if args.out:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(text + "\n")
    return 0


def cmd_collision_stats(cfg: RunConfig, args) -> int:
    threshold = args.threshold if args.threshold is not None else cfg.aug.oais_threshold
    if args.mode == "synthetic":
        report = run_synthetic_stats(
            args.criterion, threshold, args.trials, seed=cfg.aug.seed
        )
    else:
        if cfg.split is None:
            raise CliError("dataset mode needs a split file (config key 'split')")
        db_dir = Path(args.db) if args.db else cfg.output_root / "gt_database"
        db = load_database(db_dir)
        scenes = [load_scene(cfg, scene_id) for scene_id in read_split(cfg.split)]
        report = run_scene_stats(
            scenes, db, cfg.aug, args.criterion, threshold, args.trials
        )
    out_root = Path(args.out) if args.out else cfg.output_root / "collision_stats"
    out_root.mkdir(parents=True, exist_ok=True)
    stem = f"stats_{args.criterion}"
    _write_json(out_root / f"{stem}.json", report.to_json())
    (out_root / f"{stem}.csv").write_text(report.to_csv())
    agg = report.aggregate
    print(
        f"criterion={args.criterion} threshold={threshold}: "
        f"kept {agg['kept']}/{agg['candidates']} candidates, "
        f"severe-occlusion admissions {agg['severe_occlusion_admissions']}"
    )
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevkit",
        description="Occupancy masks, distillation losses, and cross-modal "
        "GT-sampling augmentation over KITTI-style scenes.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="override the augmentation seed")
        p.add_argument("--workers", type=int, help="worker count (augment)")
        p.add_argument("--out", help="override the command's output directory")

    p = sub.add_parser("build-db", help="build the GT object database")
    common(p)
    p.add_argument("--db", help="database directory (default <out>/gt_database)")
    p.set_defaults(func=cmd_build_db)

    p = sub.add_parser("pseudo-ingest", help="score-filter prediction files")
    common(p)
    p.add_argument("--pred-dir", required=True, help="directory of 16-field files")
    p.add_argument("--score-min", type=float, help="override pseudo_score_min")
    p.set_defaults(func=cmd_pseudo_ingest)

    p = sub.add_parser("augment", help="paste database objects into scenes")
    common(p)
    p.add_argument("--db", help="database directory (default <out>/gt_database)")
    p.add_argument(
        "--write-pseudo-labels",
        action="store_true",
        help="include gating pseudo-labels (scores stripped) in output labels",
    )
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("occupancy", help="write a scene's BEV occupancy mask")
    common(p)
    p.add_argument("--scene", required=True, help="scene id")
    p.add_argument("--smooth", action="store_true", help="apply Gaussian smoothing")
    p.add_argument("--pgm", action="store_true", help="also write a PGM preview")
    p.set_defaults(func=cmd_occupancy)

    p = sub.add_parser("distill-loss", help="evaluate masked distillation losses")
    common(p)
    for flag in _TENSOR_FLAGS:
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, required=True)
    p.add_argument("--mask", required=True, help="binary occupancy mask NPY")
    p.set_defaults(func=cmd_distill_loss)

    p = sub.add_parser("collision-stats", help="IoU-vs-OAIS admission statistics")
    common(p)
    p.add_argument("--criterion", choices=("iou", "oais"), default="oais")
    p.add_argument("--threshold", type=float, help="PV collision threshold")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--mode", choices=("synthetic", "dataset"), default="synthetic")
    p.add_argument("--db", help="database directory (dataset mode)")
    p.set_defaults(func=cmd_collision_stats)
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg = replace(cfg, aug=replace(cfg.aug, seed=args.seed))
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        return args.func(cfg, args)
    except (CliError, FormatError, GridConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
