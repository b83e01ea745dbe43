"""Independent brute-force oracles used to cross-check the library.

Everything here deliberately avoids the library's own code paths:
transforms are spelled out per point, grids are materialized at full fine
resolution, convolutions are explicit O(W*H*k^2) loops, overlap areas are
counted on pixel/Monte-Carlo lattices, and loss reductions are single
nested scalar loops. Slow on purpose.
"""

import math
import struct

import numpy as np


# --- scene_io -------------------------------------------------------------

def encode_points_struct(points) -> bytes:
    """Little-endian float32 quadruples via struct, not numpy."""
    out = bytearray()
    for x, y, z, i in points:
        out += struct.pack("<ffff", x, y, z, i)
    return bytes(out)


def reparse_calib_text(text):
    """Second, trivial key:values parser for calib cross-checks."""
    out = {}
    for line in text.splitlines():
        if ":" in line:
            key, rest = line.split(":", 1)
            out[key.strip()] = [float(v) for v in rest.split()]
    return out


def build_npy_v1_header(shape) -> bytes:
    """Hand-assembled NPY v1.0 preamble for a <f4 C-order array."""
    header = "{'descr': '<f4', 'fortran_order': False, 'shape': %r, }" % (tuple(shape),)
    pad = -(6 + 2 + 2 + len(header) + 1) % 64
    header = header + " " * pad + "\n"
    return b"\x93NUMPY" + bytes([1, 0]) + struct.pack("<H", len(header)) + header.encode()


# --- geometry -------------------------------------------------------------

def lidar_to_cam_pointwise(points, calib):
    """Per-point R0 . (Tr . [p;1]) with explicit loops."""
    r0 = np.asarray(calib.r0)
    tr = np.asarray(calib.tr_velo_to_cam)
    out = []
    for p in np.asarray(points, dtype=np.float64):
        q = tr[:, :3] @ p[:3] + tr[:, 3]
        out.append(r0 @ q)
    return np.array(out)


def pixel_count_overlap(a, b):
    """Integer-lattice pixel counts for axis-aligned boxes.

    Exact for integer-coordinate boxes: a pixel (i, j) belongs to a box iff
    its center (i+0.5, j+0.5) lies inside.
    """
    x_lo = int(math.floor(min(a.x1, b.x1)))
    x_hi = int(math.ceil(max(a.x2, b.x2)))
    y_lo = int(math.floor(min(a.y1, b.y1)))
    y_hi = int(math.ceil(max(a.y2, b.y2)))
    count_a = count_b = count_both = 0
    for i in range(x_lo, x_hi):
        for j in range(y_lo, y_hi):
            cx, cy = i + 0.5, j + 0.5
            in_a = a.x1 <= cx <= a.x2 and a.y1 <= cy <= a.y2
            in_b = b.x1 <= cx <= b.x2 and b.y1 <= cy <= b.y2
            count_a += in_a
            count_b += in_b
            count_both += in_a and in_b
    return count_a, count_b, count_both


def mc_rect_overlap(rect_a, rect_b, n, rng):
    """Monte-Carlo estimates of (area_a, area_b, intersection) for BEV rects."""

    def contains(rect, pts):
        rel = pts - np.asarray(rect.center)
        c, s = math.cos(rect.yaw), math.sin(rect.yaw)
        lx = c * rel[:, 0] + s * rel[:, 1]
        ly = -s * rel[:, 0] + c * rel[:, 1]
        l, w = rect.extent
        return (np.abs(lx) <= l / 2) & (np.abs(ly) <= w / 2)

    corners = []
    for rect in (rect_a, rect_b):
        l, w = rect.extent
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) / 2
        c, s = math.cos(rect.yaw), math.sin(rect.yaw)
        rot = np.array([[c, -s], [s, c]])
        corners.append(local @ rot.T + np.asarray(rect.center))
    allc = np.vstack(corners)
    lo, hi = allc.min(axis=0), allc.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n, 2))
    box_area = float(np.prod(hi - lo))
    in_a = contains(rect_a, pts)
    in_b = contains(rect_b, pts)
    return (
        box_area * in_a.mean(),
        box_area * in_b.mean(),
        box_area * (in_a & in_b).mean(),
    )


def points_in_aligned_box_ranges(points_cam, box):
    """Per-coordinate range check for an axis-aligned (ry == 0) box."""
    x, y, z = box.location
    h, w, l = box.dims
    tol = 1e-6
    keep = []
    for n, p in enumerate(np.asarray(points_cam, dtype=np.float64)):
        if (
            x - l / 2 - tol <= p[0] <= x + l / 2 + tol
            and y - h - tol <= p[1] <= y + tol
            and z - w / 2 - tol <= p[2] <= z + w / 2 + tol
        ):
            keep.append(n)
    return np.array(keep, dtype=np.int64)


# --- occupancy ------------------------------------------------------------

def _fine_indices(coords, lo, step):
    # binning arithmetic is defined in IEEE double precision
    return np.floor((np.asarray(coords, dtype=np.float64) - lo) / step).astype(np.int64)


def fine_grid_occupancy(cloud, config, grid=None):
    """Literal build-then-collapse: materialize the full fine voxel grid,
    OR along depth, then OR over each downsample x downsample block.

    ``grid`` may be a preallocated (W, H, D) bool buffer to reuse across
    trials; it is cleared before use.
    """
    span = lambda r, v: int(round((r[1] - r[0]) / v))
    w = span(config.x_range, config.fine_voxel[0])
    h = span(config.y_range, config.fine_voxel[1])
    d = span(config.z_range, config.fine_voxel[2])
    if grid is None:
        grid = np.zeros((w, h, d), dtype=bool)
    else:
        assert grid.shape == (w, h, d)
        grid.fill(False)
    cloud = np.asarray(cloud)
    if cloud.size:
        xi = _fine_indices(cloud[:, 0], config.x_range[0], config.fine_voxel[0])
        yi = _fine_indices(cloud[:, 1], config.y_range[0], config.fine_voxel[1])
        zi = _fine_indices(cloud[:, 2], config.z_range[0], config.fine_voxel[2])
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (zi >= 0) & (zi < d)
        grid[xi[ok], yi[ok], zi[ok]] = True
    column = grid.any(axis=2)
    ds = config.bev_downsample
    collapsed = column.reshape(w // ds, ds, h // ds, ds).any(axis=(1, 3))
    return collapsed.astype(np.float32)


def naive_convolve_same(mask, kernel):
    """Direct O(W*H*k^2) zero-padded 'same' convolution."""
    mask = np.asarray(mask, dtype=np.float64)
    k = kernel.shape[0]
    half = k // 2
    out = np.zeros_like(mask)
    w, h = mask.shape
    for i in range(w):
        for j in range(h):
            acc = 0.0
            for di in range(-half, half + 1):
                for dj in range(-half, half + 1):
                    si, sj = i - di, j - dj
                    if 0 <= si < w and 0 <= sj < h:
                        acc += kernel[di + half, dj + half] * mask[si, sj]
            out[i, j] = acc
    return out


# --- distill --------------------------------------------------------------

EPS = 1e-7


def scalar_qfl(student, teacher, beta):
    y, s = float(teacher), float(student)
    s = min(max(s, EPS), 1.0 - EPS)
    return abs(y - s) ** beta * -((1.0 - y) * math.log(1.0 - s) + y * math.log(s))


def scalar_smooth_l1(student, teacher, beta):
    d = abs(float(student) - float(teacher))
    return 0.5 * d * d / beta if d < beta else d - 0.5 * beta


def scalar_ce_pair(student_logits, teacher_logits):
    def softmax2(a, b):
        m = max(a, b)
        ea, eb = math.exp(a - m), math.exp(b - m)
        return ea / (ea + eb), eb / (ea + eb)

    p = softmax2(*map(float, teacher_logits))
    q = softmax2(*map(float, student_logits))
    return -sum(pi * math.log(max(qi, EPS)) for pi, qi in zip(p, q))


def scalar_mask_reduce(loss_map, mask, mode):
    loss_map = np.asarray(loss_map, dtype=np.float64)
    if loss_map.ndim == 2:
        loss_map = loss_map[:, :, None]
    w, h, c = loss_map.shape
    total = 0.0
    mask_mass = 0.0
    for i in range(w):
        for j in range(h):
            for ch in range(c):
                m = float(mask[i, j]) * float(loss_map[i, j, ch])
                total += m * m if mode == "literal" else m
            mask_mass += float(mask[i, j]) * c
    if mode == "literal":
        return total
    return total / max(mask_mass, EPS)


def scalar_feat_kd(student, teacher, binary_mask, kernel, mode):
    soft = naive_convolve_same(binary_mask, kernel)
    s = np.asarray(student, dtype=np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    loss = np.empty_like(s)
    w, h, c = s.shape
    for i in range(w):
        for j in range(h):
            for ch in range(c):
                d = s[i, j, ch] - t[i, j, ch]
                loss[i, j, ch] = d * d
    return scalar_mask_reduce(loss, soft, mode)


def scalar_resp_kd(student, teacher, binary_mask, kernel, cfg):
    """(total, parts) via single loops over every head element."""
    soft = naive_convolve_same(binary_mask, kernel)
    w, h = soft.shape
    cls_loss = np.empty_like(np.asarray(student.cls, dtype=np.float64))
    for i in range(w):
        for j in range(h):
            for ch in range(student.cls.shape[2]):
                cls_loss[i, j, ch] = scalar_qfl(
                    student.cls[i, j, ch], teacher.cls[i, j, ch], cfg.qfl_beta
                )
    loc_loss = np.empty_like(np.asarray(student.loc, dtype=np.float64))
    for i in range(w):
        for j in range(h):
            for ch in range(student.loc.shape[2]):
                loc_loss[i, j, ch] = scalar_smooth_l1(
                    student.loc[i, j, ch], teacher.loc[i, j, ch], cfg.smooth_l1_beta
                )
    anchors = student.dir.shape[2] // 2
    dir_loss = np.empty((w, h, anchors))
    for i in range(w):
        for j in range(h):
            for a in range(anchors):
                dir_loss[i, j, a] = scalar_ce_pair(
                    student.dir[i, j, 2 * a : 2 * a + 2],
                    teacher.dir[i, j, 2 * a : 2 * a + 2],
                )
    cls_kd = scalar_mask_reduce(cls_loss, soft, cfg.reduction)
    loc_kd = scalar_mask_reduce(loc_loss, soft, cfg.reduction)
    dir_kd = scalar_mask_reduce(dir_loss, soft, cfg.reduction)
    w_cls, w_loc, w_dir = cfg.head_weights
    return (
        w_cls * cls_kd + w_loc * loc_kd + w_dir * dir_kd,
        {"cls_kd": cls_kd, "loc_kd": loc_kd, "dir_kd": dir_kd},
    )
