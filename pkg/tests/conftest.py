"""Shared fixtures: calibrations, synthetic scenes, and a disk dataset."""

import math

import numpy as np
import pytest

from bevkit.cmaug import Scene
from bevkit.geometry import Box3D, camera_to_lidar, project_box_to_2d
from bevkit.scene_io import CalibMatrices, LabelRecord

IMAGE_SIZE = (1242, 375)

# Canonical ideal rig: axes permuted LiDAR->camera, no rectification skew.
CANONICAL_TR = np.array(
    [[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]]
)
CANONICAL_P2 = np.array(
    [[700.0, 0.0, 621.0, 0.0], [0.0, 700.0, 187.5, 0.0], [0.0, 0.0, 1.0, 0.0]]
)

# Real KITTI rig values (rounded file precision, slightly non-orthonormal).
KITTI_P2 = np.array(
    [
        [7.215377e02, 0.0, 6.095593e02, 4.485728e01],
        [0.0, 7.215377e02, 1.728540e02, 2.163791e-01],
        [0.0, 0.0, 1.0, 2.745884e-03],
    ]
)
KITTI_R0 = np.array(
    [
        [9.999239e-01, 9.837760e-03, -7.445048e-03],
        [-9.869795e-03, 9.999421e-01, -4.278459e-03],
        [7.402527e-03, 4.351614e-03, 9.999631e-01],
    ]
)
KITTI_TR = np.array(
    [
        [7.533745e-03, -9.999714e-01, -6.166020e-04, -4.069766e-03],
        [1.480249e-02, 7.280733e-04, -9.998902e-01, -7.631618e-02],
        [9.998621e-01, 7.523790e-03, 1.480755e-02, -2.717806e-01],
    ]
)


@pytest.fixture
def canonical_calib():
    return CalibMatrices(p2=CANONICAL_P2, r0=np.eye(3), tr_velo_to_cam=CANONICAL_TR)


@pytest.fixture
def kitti_calib():
    return CalibMatrices(p2=KITTI_P2, r0=KITTI_R0, tr_velo_to_cam=KITTI_TR)


def identity_calib():
    """LiDAR frame == camera frame; projection drops the z division only."""
    return CalibMatrices(
        p2=np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, 0]]),
        r0=np.eye(3),
        tr_velo_to_cam=np.hstack([np.eye(3), np.zeros((3, 1))]),
    )


def points_inside_box(box: Box3D, n: int, rng, margin=0.9) -> np.ndarray:
    """Camera-frame points strictly inside the box (shrunk by ``margin``)."""
    h, w, l = box.dims
    lx = rng.uniform(-l / 2 * margin, l / 2 * margin, n)
    ly = rng.uniform(-h * 0.5 * (1 + margin), -h * 0.5 * (1 - margin), n)
    lz = rng.uniform(-w / 2 * margin, w / 2 * margin, n)
    c, s = math.cos(box.ry), math.sin(box.ry)
    x = c * lx + s * lz + box.location[0]
    y = ly + box.location[1]
    z = -s * lx + c * lz + box.location[2]
    return np.stack([x, y, z], axis=1)


def label_for_box(box: Box3D, calib, image_size=IMAGE_SIZE) -> LabelRecord:
    proj = project_box_to_2d(box, calib, image_size)
    bbox = (proj.x1, proj.y1, proj.x2, proj.y2) if proj else (0.0, 0.0, 1.0, 1.0)
    x, _, z = box.location
    return LabelRecord(
        class_name=box.class_name or "Car",
        truncation=0.0,
        occlusion=0,
        alpha=box.ry - math.atan2(x, z),
        bbox2d=bbox,
        dims=box.dims,
        location=box.location,
        ry=box.ry,
    )


def make_scene(
    scene_id: str,
    calib: CalibMatrices,
    boxes,
    rng,
    points_per_box: int = 80,
    ground_points: int = 4000,
    image_size=IMAGE_SIZE,
    labelled: bool = True,
) -> Scene:
    """Synthetic scene: textured image, ground-plane cloud, object points."""
    w_px, h_px = image_size
    xv = np.linspace(0, 255, w_px, dtype=np.float64)
    yv = np.linspace(0, 255, h_px, dtype=np.float64)
    image = np.stack(
        [
            np.tile(xv, (h_px, 1)),
            np.tile(yv[:, None], (1, w_px)),
            np.full((h_px, w_px), 64.0),
        ],
        axis=2,
    ).astype(np.uint8)

    ground = np.empty((ground_points, 4), dtype=np.float32)
    ground[:, 0] = rng.uniform(3.0, 45.0, ground_points)
    ground[:, 1] = rng.uniform(-20.0, 20.0, ground_points)
    ground[:, 2] = rng.uniform(-1.75, -1.6, ground_points)
    ground[:, 3] = rng.uniform(0.0, 1.0, ground_points)

    clouds = [ground]
    labels = []
    for box in boxes:
        cam_pts = points_inside_box(box, points_per_box, rng)
        lidar = camera_to_lidar(cam_pts, calib)
        part = np.empty((points_per_box, 4), dtype=np.float32)
        part[:, :3] = lidar
        part[:, 3] = rng.uniform(0.0, 1.0, points_per_box)
        clouds.append(part)
        labels.append(label_for_box(box, calib, image_size))
    cloud = np.ascontiguousarray(np.vstack(clouds), dtype=np.float32)
    return Scene(
        scene_id=scene_id,
        cloud=cloud,
        calib=calib,
        image=image,
        labels=labels if labelled else None,
    )


def ground_y_cam() -> float:
    """Camera-frame y of the synthetic ground plane (bottom faces sit here)."""
    return 1.68


def car_box(x, z, ry=0.0, cls="Car") -> Box3D:
    return Box3D(location=(x, ground_y_cam(), z), dims=(1.5, 1.6, 3.9), ry=ry, class_name=cls)


def ped_box(x, z, ry=0.0, cls="Pedestrian") -> Box3D:
    return Box3D(location=(x, ground_y_cam(), z), dims=(1.75, 0.6, 0.8), ry=ry, class_name=cls)


@pytest.fixture
def seeded_rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# On-disk dataset for CLI tests
# ---------------------------------------------------------------------------

LABELLED_IDS = ["000000", "000001", "000002"]
UNLABELLED_ID = "000004"
EMPTY_CLOUD_ID = "000099"

CONFIG_TOML = """\
dataset_root = {root!r}
split = {split!r}
output_root = {out!r}
workers = 1

[aug]
oais_threshold = 0.5
bev_iou_threshold = 0.0
min_patch_px = [8, 8]
min_points = 5
pseudo_score_min = 0.3
seed = 0

[aug.samples_per_class]
Car = 3
Pedestrian = 2
"""


@pytest.fixture(scope="session")
def disk_dataset(tmp_path_factory):
    """KITTI-style directory tree with labelled, unlabelled, and empty scenes."""
    from bevkit.scene_io import write_calib, write_image, write_labels, write_point_cloud

    root = tmp_path_factory.mktemp("dataset")
    for sub in ("velodyne", "calib", "image_2", "label_2", "predictions"):
        (root / sub).mkdir()
    calib = CalibMatrices(p2=CANONICAL_P2, r0=np.eye(3), tr_velo_to_cam=CANONICAL_TR)
    rng = np.random.default_rng(99)
    scene_boxes = {
        "000000": [car_box(-3.0, 14.0, ry=0.1), car_box(4.0, 22.0, ry=-0.2)],
        "000001": [car_box(0.5, 30.0), ped_box(-5.0, 18.0)],
        "000002": [ped_box(5.5, 26.0, ry=0.5), car_box(-7.0, 35.0)],
    }
    for scene_id, boxes in scene_boxes.items():
        scene = make_scene(scene_id, calib, boxes, rng, ground_points=2500)
        write_point_cloud(scene.cloud, root / "velodyne" / f"{scene_id}.bin")
        write_calib(calib, root / "calib" / f"{scene_id}.txt")
        write_image(scene.image, root / "image_2" / f"{scene_id}.png")
        write_labels(scene.labels, root / "label_2" / f"{scene_id}.txt")

    # unlabelled scene: no label file, predictions with mixed scores
    unl = make_scene(UNLABELLED_ID, calib, [car_box(2.0, 20.0)], rng, ground_points=2500)
    write_point_cloud(unl.cloud, root / "velodyne" / f"{UNLABELLED_ID}.bin")
    write_calib(calib, root / "calib" / f"{UNLABELLED_ID}.txt")
    write_image(unl.image, root / "image_2" / f"{UNLABELLED_ID}.png")
    preds = []
    for box, score in [(car_box(2.0, 20.0), 0.9), (car_box(-8.0, 40.0), 0.1)]:
        rec = label_for_box(box, calib)
        preds.append(
            LabelRecord(
                class_name=rec.class_name, truncation=rec.truncation,
                occlusion=rec.occlusion, alpha=rec.alpha, bbox2d=rec.bbox2d,
                dims=rec.dims, location=rec.location, ry=rec.ry, score=score,
            )
        )
    write_labels(preds, root / "predictions" / f"{UNLABELLED_ID}.txt")

    # degenerate scene with an empty cloud (occupancy edge case)
    write_point_cloud(np.empty((0, 4), dtype=np.float32), root / "velodyne" / f"{EMPTY_CLOUD_ID}.bin")
    write_calib(calib, root / "calib" / f"{EMPTY_CLOUD_ID}.txt")
    write_image(
        np.zeros((IMAGE_SIZE[1], IMAGE_SIZE[0], 3), dtype=np.uint8),
        root / "image_2" / f"{EMPTY_CLOUD_ID}.png",
    )

    (root / "train.txt").write_text("".join(i + "\n" for i in LABELLED_IDS))
    (root / "all.txt").write_text(
        "".join(i + "\n" for i in LABELLED_IDS + [UNLABELLED_ID])
    )
    (root / "empty.txt").write_text("")
    (root / "bogus.txt").write_text("777777\n")
    return root


def write_config(path, root, split, out) -> str:
    path.write_text(CONFIG_TOML.format(root=str(root), split=str(split), out=str(out)))
    return str(path)
