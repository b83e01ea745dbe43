"""Cross-modal GT-sampling augmentation.

Builds a database of croppable objects (LiDAR points + image patch + 3D
box) from labelled scenes, then pastes sampled objects into target scenes
subject to two collision gates: rotated-rectangle IoU between footprints
in BEV, and the occlusion-aware intersection score between projected boxes
in the image plane. Kept objects are composited far-to-near so nearer
patches correctly overwrite farther ones in the image.

Pasted objects keep their original pose; the point cloud, image, and label
list stay mutually consistent by construction. Every scene's pipeline is
deterministic given (seed, scene id).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Box3D,
    DepthedBox2D,
    box3d_from_label,
    box3d_to_bev,
    iou_2d,
    iou_bev,
    oais,
    points_in_box3d,
    project_box_to_2d,
    wrap_angle,
)
from .scene_io import CalibMatrices, GtDatabase, LabelRecord, ObjectSample

PV_CRITERIA = ("oais", "iou")


@dataclass(frozen=True)
class AugConfig:
    """Sampling caps, collision thresholds, and filter knobs."""

    samples_per_class: dict[str, int] = field(default_factory=dict)
    oais_threshold: float = 0.5
    bev_iou_threshold: float = 0.0
    min_patch_px: tuple[int, int] = (16, 16)
    min_points: int = 5
    pseudo_score_min: float = 0.3
    remove_swallowed_points: bool = True
    seed: int = 0

    def __post_init__(self):
        for name, value in (
            ("oais_threshold", self.oais_threshold),
            ("bev_iou_threshold", self.bev_iou_threshold),
            ("pseudo_score_min", self.pseudo_score_min),
        ):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.min_points < 0 or min(self.min_patch_px) < 0:
            raise ValueError("counts must be non-negative")
        if any(n < 0 for n in self.samples_per_class.values()):
            raise ValueError("samples_per_class counts must be non-negative")


@dataclass
class Scene:
    """One scene's raw inputs.

    ``labels`` is None for unlabelled scenes, in which case
    ``pseudo_labels`` (score-filtered detections) gate collisions instead.
    """

    scene_id: str
    cloud: np.ndarray
    calib: CalibMatrices
    image: np.ndarray
    labels: list[LabelRecord] | None = None
    pseudo_labels: list[LabelRecord] = field(default_factory=list)

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.image.shape[1], self.image.shape[0])

    def collision_records(self) -> list[LabelRecord]:
        """Records that gate pasting: GT labels when present, else pseudo."""
        records = self.labels if self.labels is not None else self.pseudo_labels
        return [r for r in records if not r.is_dontcare]


@dataclass
class AugmentedScene:
    """Augmentation output plus the pasted samples for post-hoc audits."""

    scene_id: str
    cloud: np.ndarray
    image: np.ndarray
    labels: list[LabelRecord]
    pasted: list[ObjectSample]  # far-to-near order
    provenance: dict


def scene_rng(seed: int, scene_id: str, *extra: int) -> np.random.Generator:
    """Per-scene generator: global seed mixed with a hash of the scene id.

    Adding scenes to a split never perturbs other scenes' draws.
    """
    digest = hashlib.sha256(scene_id.encode("utf-8")).digest()
    words = (
        int.from_bytes(digest[0:4], "little"),
        int.from_bytes(digest[4:8], "little"),
    )
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(*words, *extra))
    return np.random.default_rng(seq)


# ---------------------------------------------------------------------------
# Database construction
# ---------------------------------------------------------------------------

def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _rounded_patch_box(
    proj: DepthedBox2D, image_size: tuple[int, int]
) -> DepthedBox2D | None:
    w_px, h_px = image_size
    x1 = max(0, min(round_half_up(proj.x1), w_px))
    y1 = max(0, min(round_half_up(proj.y1), h_px))
    x2 = max(0, min(round_half_up(proj.x2), w_px))
    y2 = max(0, min(round_half_up(proj.y2), h_px))
    if x1 >= x2 or y1 >= y2:
        return None
    return DepthedBox2D(
        x1=float(x1), y1=float(y1), x2=float(x2), y2=float(y2), depth=proj.depth
    )


def build_gt_database(scenes, min_points: int, image_size=None) -> GtDatabase:
    """Crop every usable labelled object into an in-memory database.

    An object is usable when it is not DontCare, its projected 2D box is
    present and non-empty after rounding, and it contains at least
    ``min_points`` LiDAR points. ``scenes`` is any iterable of
    :class:`Scene`; pass a generator to keep memory bounded.
    """
    db = GtDatabase()
    for scene in scenes:
        size = image_size if image_size is not None else scene.image_size
        for record in scene.labels or []:
            if record.is_dontcare:
                continue
            box = box3d_from_label(record)
            proj = project_box_to_2d(box, scene.calib, size)
            if proj is None:
                continue
            patch_box = _rounded_patch_box(proj, size)
            if patch_box is None:
                continue
            idx = points_in_box3d(scene.cloud, box, scene.calib)
            if len(idx) < min_points:
                continue
            x1, y1 = int(patch_box.x1), int(patch_box.y1)
            x2, y2 = int(patch_box.x2), int(patch_box.y2)
            db.add(
                ObjectSample(
                    class_name=record.class_name,
                    box3d=box,
                    points=np.ascontiguousarray(scene.cloud[idx], dtype=np.float32),
                    patch=scene.image[y1:y2, x1:x2].copy(),
                    patch_box=patch_box,
                    source_scene=scene.scene_id,
                    num_points=len(idx),
                )
            )
    return db


# ---------------------------------------------------------------------------
# Pseudo-label ingestion and candidate filters
# ---------------------------------------------------------------------------

def ingest_pseudo_labels(records_by_scene, pseudo_score_min: float):
    """Filter scored detections down to collision-gating label lists.

    Keeps records with score >= ``pseudo_score_min``. These gate pasting
    for unlabelled scenes; they are not training labels and are only
    written out when explicitly requested.
    """
    kept = {}
    for scene_id, records in records_by_scene.items():
        kept[scene_id] = [
            r for r in records if r.score is not None and r.score >= pseudo_score_min
        ]
    return kept


def pv_size_ok(box: DepthedBox2D, min_patch_px: tuple[int, int]) -> bool:
    return box.width >= min_patch_px[0] and box.height >= min_patch_px[1]


def pv_size_filter(candidates, min_patch_px: tuple[int, int]):
    """Drop projected boxes smaller than the minimum patch size."""
    return [box for box in candidates if pv_size_ok(box, min_patch_px)]


# ---------------------------------------------------------------------------
# Collision testing
# ---------------------------------------------------------------------------

def _pv_score(a, b, criterion: str, rng) -> float:
    if criterion == "oais":
        return oais(a, b, rng)
    if criterion == "iou":
        return iou_2d(a, b)
    raise ValueError(f"unknown PV criterion {criterion!r}")


def collision_filter(
    existing: list[Box3D],
    candidates: list[ObjectSample],
    calib: CalibMatrices,
    image_size: tuple[int, int],
    cfg: AugConfig,
    rng: np.random.Generator,
    pv_criterion: str = "oais",
):
    """Greedy sequential acceptance of candidates against both gates.

    A candidate is kept iff, against every existing box and every
    previously kept candidate, the BEV footprint IoU and the PV score both
    stay at or below their thresholds. Rejected candidates do not
    constrain later ones. Returns ``(kept, rejected)`` where each
    rejection records the failed test and the blocking object.
    """
    obstacles = []  # (name, BevRect, DepthedBox2D | None)
    for n, box in enumerate(existing):
        obstacles.append(
            (
                f"existing[{n}]:{box.class_name or 'object'}",
                box3d_to_bev(box, calib),
                project_box_to_2d(box, calib, image_size),
            )
        )
    kept: list[ObjectSample] = []
    rejected: list[dict] = []
    for cand in candidates:
        bev = box3d_to_bev(cand.box3d, calib)
        proj = project_box_to_2d(cand.box3d, calib, image_size)
        reason = None
        against = None
        if proj is None:
            reason = "projection"
        else:
            for name, other_bev, other_proj in obstacles:
                if iou_bev(bev, other_bev) > cfg.bev_iou_threshold:
                    reason, against = "bev_iou", name
                    break
                if other_proj is not None and (
                    _pv_score(proj, other_proj, pv_criterion, rng)
                    > cfg.oais_threshold
                ):
                    reason, against = pv_criterion, name
                    break
        if reason is None:
            kept.append(cand)
            obstacles.append(
                (f"pasted:{cand.class_name}/{cand.source_scene}", bev, proj)
            )
        else:
            rejected.append(
                {
                    "source": cand.source_scene,
                    "class": cand.class_name,
                    "reason": reason,
                    "against": against,
                }
            )
    return kept, rejected


# ---------------------------------------------------------------------------
# Pasting
# ---------------------------------------------------------------------------

def _pasted_label(sample: ObjectSample) -> LabelRecord:
    box = sample.box3d
    x, _, z = box.location
    pb = sample.patch_box
    return LabelRecord(
        class_name=sample.class_name,
        truncation=0.0,
        occlusion=0,
        alpha=wrap_angle(box.ry - math.atan2(x, z)),
        bbox2d=(pb.x1, pb.y1, pb.x2, pb.y2),
        dims=box.dims,
        location=box.location,
        ry=box.ry,
    )


def _paste_patch(image: np.ndarray, sample: ObjectSample) -> None:
    """Copy a patch into the image at its crop-time rectangle.

    The rectangle is reused verbatim from crop time so patch and box
    dimensions agree by construction; it is re-clipped against the target
    image in case sizes differ between scenes.
    """
    pb = sample.patch_box
    x1, y1, x2, y2 = int(pb.x1), int(pb.y1), int(pb.x2), int(pb.y2)
    ph, pw = sample.patch.shape[:2]
    if (pw, ph) != (x2 - x1, y2 - y1):
        raise RuntimeError(
            f"patch {pw}x{ph} does not match its box {x2 - x1}x{y2 - y1} "
            f"(object from scene {sample.source_scene})"
        )
    h_img, w_img = image.shape[:2]
    tx1, ty1 = max(x1, 0), max(y1, 0)
    tx2, ty2 = min(x2, w_img), min(y2, h_img)
    if tx1 >= tx2 or ty1 >= ty2:
        return
    image[ty1:ty2, tx1:tx2] = sample.patch[
        ty1 - y1 : ty2 - y1, tx1 - x1 : tx2 - x1
    ]


def paste_scene(
    scene: Scene, kept: list[ObjectSample], calib: CalibMatrices, cfg: AugConfig
) -> AugmentedScene:
    """Composite kept objects into the scene, far-to-near.

    Background points swallowed by a pasted box are removed (when
    configured), object points are appended, patches are pasted in
    descending depth order so nearer objects overwrite farther ones, and
    the label list is extended with the pasted objects' records.
    """
    ordered = sorted(kept, key=lambda s: -s.box3d.depth)
    cloud = np.asarray(scene.cloud, dtype=np.float32)
    if ordered and cfg.remove_swallowed_points and len(cloud):
        swallowed = np.zeros(len(cloud), dtype=bool)
        for sample in ordered:
            swallowed[points_in_box3d(cloud, sample.box3d, calib)] = True
        cloud = cloud[~swallowed]
    parts = [cloud] + [s.points for s in ordered]
    new_cloud = np.ascontiguousarray(np.vstack(parts), dtype=np.float32)
    image = scene.image.copy()
    for sample in ordered:
        _paste_patch(image, sample)
    base_labels = list(scene.labels) if scene.labels is not None else []
    labels = base_labels + [_pasted_label(s) for s in ordered]
    provenance = {
        "scene": scene.scene_id,
        "pasted": [
            {
                "source": s.source_scene,
                "class": s.class_name,
                "depth": s.box3d.depth,
                "order": i,
            }
            for i, s in enumerate(ordered)
        ],
    }
    return AugmentedScene(
        scene_id=scene.scene_id,
        cloud=new_cloud,
        image=image,
        labels=labels,
        pasted=ordered,
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def sample_candidates(
    db: GtDatabase, cfg: AugConfig, rng: np.random.Generator
) -> list[ObjectSample]:
    """Draw up to the per-class cap uniformly without replacement.

    Classes are visited in sorted order so the candidate sequence is a
    pure function of the rng state.
    """
    candidates = []
    for class_name in sorted(cfg.samples_per_class):
        cap = cfg.samples_per_class[class_name]
        pool = db.entries.get(class_name, [])
        count = min(cap, len(pool))
        if count > 0:
            chosen = rng.choice(len(pool), size=count, replace=False)
            candidates.extend(pool[int(i)] for i in chosen)
    return candidates


def augment(
    scene: Scene, db: GtDatabase, cfg: AugConfig, pv_criterion: str = "oais"
) -> AugmentedScene:
    """Run the full per-scene pipeline: sample, filter, collide, paste.

    Deterministic given (cfg.seed, scene.scene_id). Collision gating uses
    GT labels for labelled scenes and ingested pseudo-labels otherwise.
    """
    rng = scene_rng(cfg.seed, scene.scene_id)
    candidates = sample_candidates(db, cfg, rng)
    size = scene.image_size
    survivors = []
    rejected = []
    for cand in candidates:
        proj = project_box_to_2d(cand.box3d, scene.calib, size)
        if proj is None:
            rejected.append(
                {
                    "source": cand.source_scene,
                    "class": cand.class_name,
                    "reason": "projection",
                    "against": None,
                }
            )
        elif not pv_size_ok(proj, cfg.min_patch_px):
            rejected.append(
                {
                    "source": cand.source_scene,
                    "class": cand.class_name,
                    "reason": "pv_size",
                    "against": None,
                }
            )
        else:
            survivors.append(cand)
    existing = [box3d_from_label(r) for r in scene.collision_records()]
    kept, collision_rejects = collision_filter(
        existing, survivors, scene.calib, size, cfg, rng, pv_criterion
    )
    rejected.extend(collision_rejects)
    out = paste_scene(scene, kept, scene.calib, cfg)
    out.provenance["rejected"] = rejected
    out.provenance["num_candidates"] = len(candidates)
    out.provenance["num_existing"] = len(existing)
    out.provenance["criterion"] = pv_criterion
    return out


def audit_scene(
    aug: AugmentedScene,
    existing: list[Box3D],
    calib: CalibMatrices,
    image_size: tuple[int, int],
    cfg: AugConfig,
    rng: np.random.Generator,
) -> list[str]:
    """Re-check every pair involving a pasted object against both gates.

    Returns human-readable violation descriptions; an engine bug is the
    only way this can be non-empty for a scene produced by
    :func:`augment` with the same thresholds.
    """
    entries = []
    for n, box in enumerate(existing):
        entries.append(
            (f"existing[{n}]", False, box3d_to_bev(box, calib),
             project_box_to_2d(box, calib, image_size))
        )
    for n, sample in enumerate(aug.pasted):
        entries.append(
            (f"pasted[{n}]:{sample.class_name}", True,
             box3d_to_bev(sample.box3d, calib),
             project_box_to_2d(sample.box3d, calib, image_size))
        )
    violations = []
    for i in range(len(entries)):
        for j in range(i + 1, len(entries)):
            name_i, pasted_i, bev_i, proj_i = entries[i]
            name_j, pasted_j, bev_j, proj_j = entries[j]
            if not (pasted_i or pasted_j):
                continue
            bev = iou_bev(bev_i, bev_j)
            if bev > cfg.bev_iou_threshold:
                violations.append(
                    f"{name_i} vs {name_j}: iou_bev {bev:.4f} > {cfg.bev_iou_threshold}"
                )
            if proj_i is not None and proj_j is not None:
                score = oais(proj_i, proj_j, rng)
                if score > cfg.oais_threshold:
                    violations.append(
                        f"{name_i} vs {name_j}: oais {score:.4f} > {cfg.oais_threshold}"
                    )
    return violations
