"""3D/2D box algebra: frame transforms, corner projection, IoU, OAIS.

Boxes follow the KITTI convention: ``location`` is the bottom-face center
in the camera frame (x right, y down, z forward), ``dims`` is ``(h, w, l)``
with the footprint length ``l`` along the box-local x axis and width ``w``
along the box-local z axis, and ``ry`` rotates about the camera y-axis.
The LiDAR frame is x forward, y left, z up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .scene_io import CalibMatrices

POINT_IN_BOX_TOL = 1e-6  # meters; boundary points count as inside
_AREA_EPS = 1e-12  # zero-area polygon intersections count as disjoint


def wrap_angle(angle: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    wrapped = (angle + math.pi) % (2.0 * math.pi) - math.pi
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box, camera frame, KITTI convention (see module docs)."""

    location: tuple[float, float, float]
    dims: tuple[float, float, float]  # (h, w, l), all > 0
    ry: float
    class_name: str = ""

    def __post_init__(self):
        if min(self.dims) <= 0:
            raise ValueError(f"box dimensions must be positive, got {self.dims}")
        object.__setattr__(self, "ry", wrap_angle(self.ry))

    @property
    def depth(self) -> float:
        return self.location[2]


@dataclass(frozen=True)
class DepthedBox2D:
    """Axis-aligned image-plane box (continuous pixels) with a depth tag."""

    x1: float
    y1: float
    x2: float
    y2: float
    depth: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )
        if self.depth <= 0:
            raise ValueError(f"depth must be positive, got {self.depth}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class BevRect:
    """Rotated rectangle on the LiDAR ground plane: box footprint in BEV."""

    center: tuple[float, float]
    extent: tuple[float, float]  # (l, w), both > 0
    yaw: float

    def __post_init__(self):
        if min(self.extent) <= 0:
            raise ValueError(f"extent must be positive, got {self.extent}")


# ---------------------------------------------------------------------------
# Frame transforms
# ---------------------------------------------------------------------------

def _lidar_to_cam_matrix(calib: CalibMatrices) -> np.ndarray:
    m = np.eye(4)
    m[:3, :4] = calib.tr_velo_to_cam
    r = np.eye(4)
    r[:3, :3] = calib.r0
    return r @ m


def lidar_to_camera(points: np.ndarray, calib: CalibMatrices) -> np.ndarray:
    """Map ``(N, 3)`` LiDAR-frame points to the rectified camera frame."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = _lidar_to_cam_matrix(calib)
    return points @ m[:3, :3].T + m[:3, 3]


def camera_to_lidar(points: np.ndarray, calib: CalibMatrices) -> np.ndarray:
    """Inverse of :func:`lidar_to_camera`; composes to identity within fp."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = np.linalg.inv(_lidar_to_cam_matrix(calib))
    return points @ m[:3, :3].T + m[:3, 3]


# ---------------------------------------------------------------------------
# Corners and projection
# ---------------------------------------------------------------------------

def box3d_corners(box: Box3D) -> np.ndarray:
    """Eight camera-frame corners of the oriented cuboid.

    Bottom face (y = location.y) first, then top face (y = location.y - h);
    within each face the footprint corners run counter-clockwise seen from
    above in box-local coordinates.
    """
    h, w, l = box.dims
    x = np.array([l / 2, l / 2, -l / 2, -l / 2] * 2)
    z = np.array([w / 2, -w / 2, -w / 2, w / 2] * 2)
    y = np.array([0.0] * 4 + [-h] * 4)
    c, s = math.cos(box.ry), math.sin(box.ry)
    rot_x = c * x + s * z
    rot_z = -s * x + c * z
    cx, cy, cz = box.location
    return np.stack([rot_x + cx, y + cy, rot_z + cz], axis=1)


def project_box_to_2d(
    box: Box3D, calib: CalibMatrices, image_size: tuple[int, int] | None
) -> DepthedBox2D | None:
    """Project a 3D box to its axis-aligned image hull, clipped to the image.

    The box depth is the camera-frame depth of the 3D box (location.z), not
    a per-pixel value. Returns ``None`` when any corner projects with
    non-positive depth (conservative behind-camera reject) or when the
    clipped hull is empty. Pass ``image_size=None`` for the raw, unclipped
    hull.
    """
    if box.depth <= 0:
        return None
    corners = box3d_corners(box)
    homog = np.hstack([corners, np.ones((8, 1))])
    uvw = homog @ calib.p2.T
    if np.any(uvw[:, 2] <= 0):
        return None
    u = uvw[:, 0] / uvw[:, 2]
    v = uvw[:, 1] / uvw[:, 2]
    x1, y1 = float(u.min()), float(v.min())
    x2, y2 = float(u.max()), float(v.max())
    if image_size is not None:
        w_px, h_px = image_size
        x1, y1 = max(x1, 0.0), max(y1, 0.0)
        x2, y2 = min(x2, float(w_px)), min(y2, float(h_px))
    if x1 >= x2 or y1 >= y2:
        return None
    return DepthedBox2D(x1=x1, y1=y1, x2=x2, y2=y2, depth=box.depth)


# ---------------------------------------------------------------------------
# 2D overlap scores
# ---------------------------------------------------------------------------

def _intersection_area_2d(a: DepthedBox2D, b: DepthedBox2D) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou_2d(a: DepthedBox2D, b: DepthedBox2D) -> float:
    """Plain intersection over union of two image-plane boxes."""
    inter = _intersection_area_2d(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def oais(a: DepthedBox2D, b: DepthedBox2D, rng: np.random.Generator | None = None) -> float:
    """Occlusion-aware intersection score.

    Intersection area divided by the area of the box with the larger depth
    (the occluded box). Equals 1.0 exactly whenever the deeper box lies
    inside the other, which is precisely the full-occlusion case plain IoU
    under-reports. When depths are equal and the areas differ, the
    denominator box is picked uniformly from ``rng``; pass a seeded
    generator for reproducible results.
    """
    inter = _intersection_area_2d(a, b)
    if a.depth > b.depth:
        denom = a.area
    elif b.depth > a.depth:
        denom = b.area
    elif a.area == b.area:
        denom = a.area
    else:
        if rng is None:
            raise ValueError("equal depths: a tie-break rng is required")
        denom = a.area if rng.random() < 0.5 else b.area
    return inter / denom


# ---------------------------------------------------------------------------
# BEV (rotated rectangle) geometry
# ---------------------------------------------------------------------------

def box3d_to_bev(box: Box3D, calib: CalibMatrices) -> BevRect:
    """Express a camera-frame box footprint on the LiDAR ground plane."""
    center = camera_to_lidar(np.array([box.location]), calib)[0]
    # Heading = box-local +x (length) axis, mapped through the inverse rigid
    # transform's rotation; yaw is its ground-plane angle.
    heading_cam = np.array([math.cos(box.ry), 0.0, -math.sin(box.ry)])
    rot = np.linalg.inv(_lidar_to_cam_matrix(calib))[:3, :3]
    heading = rot @ heading_cam
    h, w, l = box.dims
    return BevRect(
        center=(float(center[0]), float(center[1])),
        extent=(l, w),
        yaw=wrap_angle(math.atan2(heading[1], heading[0])),
    )


def bev_corners(rect: BevRect) -> np.ndarray:
    """Four ground-plane corners, counter-clockwise."""
    l, w = rect.extent
    local = np.array(
        [[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]]
    )
    c, s = math.cos(rect.yaw), math.sin(rect.yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(rect.center)


def _polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    pts = np.asarray(poly)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_polygon(subject, clipper):
    """Sutherland-Hodgman: clip ``subject`` by convex CCW ``clipper``.

    Points on a clip edge count as inside, so coincident rectangles clip
    to themselves exactly.
    """
    output = list(subject)
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        a = clipper[i]
        b = clipper[(i + 1) % n]
        edge = (b[0] - a[0], b[1] - a[1])
        inputs, output = output, []
        prev = inputs[-1]
        prev_side = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0])
        for cur in inputs:
            cur_side = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0])
            if cur_side >= 0.0:  # left of or on the edge
                if prev_side < 0.0:
                    output.append(_edge_intersection(prev, cur, a, b))
                output.append(tuple(cur))
            elif prev_side >= 0.0:
                output.append(_edge_intersection(prev, cur, a, b))
            prev, prev_side = cur, cur_side
    return output


def _edge_intersection(p, q, a, b):
    r = (q[0] - p[0], q[1] - p[1])
    s = (b[0] - a[0], b[1] - a[1])
    denom = r[0] * s[1] - r[1] * s[0]
    t = ((a[0] - p[0]) * s[1] - (a[1] - p[1]) * s[0]) / denom
    return (p[0] + t * r[0], p[1] + t * r[1])


def iou_bev(a: BevRect, b: BevRect) -> float:
    """Rotated-rectangle IoU via convex polygon clipping and shoelace area.

    Touching rectangles (zero-area intersection) count as disjoint. The
    arguments are ordered canonically before clipping so the result is
    exactly symmetric despite clipping's asymmetric rounding.
    """
    if (b.center, b.extent, b.yaw) < (a.center, a.extent, a.yaw):
        a, b = b, a
    ca = [tuple(p) for p in bev_corners(a)]
    cb = [tuple(p) for p in bev_corners(b)]
    inter = _polygon_area(_clip_polygon(ca, cb))
    if inter <= _AREA_EPS:
        return 0.0
    area_a = a.extent[0] * a.extent[1]
    area_b = b.extent[0] * b.extent[1]
    return min(inter / (area_a + area_b - inter), 1.0)


# ---------------------------------------------------------------------------
# Point membership
# ---------------------------------------------------------------------------

def points_in_box3d(
    points: np.ndarray, box: Box3D, calib: CalibMatrices
) -> np.ndarray:
    """Indices of LiDAR-frame points inside the oriented cuboid.

    Boundary points are included (1e-6 m tolerance) so points that land
    exactly on a face after float transforms are handled deterministically.
    ``points`` may be (N, 3) or (N, 4+); only xyz is used.
    """
    points = np.asarray(points)
    if points.size == 0:
        return np.empty(0, dtype=np.int64)
    cam = lidar_to_camera(points[:, :3], calib)
    cx, cy, cz = box.location
    rel = cam - np.array([cx, cy, cz])
    c, s = math.cos(box.ry), math.sin(box.ry)
    # Inverse yaw rotation into box-local axes.
    local_x = c * rel[:, 0] - s * rel[:, 2]
    local_z = s * rel[:, 0] + c * rel[:, 2]
    local_y = rel[:, 1]
    h, w, l = box.dims
    tol = POINT_IN_BOX_TOL
    inside = (
        (np.abs(local_x) <= l / 2 + tol)
        & (np.abs(local_z) <= w / 2 + tol)
        & (local_y <= tol)
        & (local_y >= -h - tol)
    )
    return np.flatnonzero(inside)


def box3d_from_label(record) -> Box3D:
    """Build a :class:`Box3D` from a parsed label record."""
    return Box3D(
        location=tuple(record.location),
        dims=tuple(record.dims),
        ry=record.ry,
        class_name=record.class_name,
    )
