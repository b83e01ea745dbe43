"""Readers and writers for all on-disk formats.

Covers KITTI-style scene data (velodyne ``.bin`` point clouds, calibration
text files, 15/16-field label files, 8-bit RGB PNG images), NPY v1.0
float32 tensor dumps used to interchange network feature/prediction maps,
and the persisted ground-truth object database.

All read/write pairs are exact inverses on valid inputs: byte-level for
binary formats, value-level (at the printed precision) for text. Malformed
input never escapes as a stray ``struct``/``ValueError``; it is reported as
:class:`FormatError` carrying the offending path and, where meaningful, a
byte offset or line number. Benign out-of-range values (e.g. LiDAR
intensity slightly above 1) are clamped with a warning; structural
corruption fails hard.
"""

from __future__ import annotations

import ast
import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Box3D, DepthedBox2D

logger = logging.getLogger(__name__)

POINT_RECORD_BYTES = 16  # x, y, z, intensity as little-endian float32

_NPY_MAGIC = b"\x93NUMPY"
_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class FormatError(ValueError):
    """Structured parse/serialize failure.

    Attributes:
        path: file the error was raised for.
        offset: byte offset of the offending data, when known.
        line: 1-based line number of the offending line, when known.
    """

    def __init__(self, path, message, *, offset=None, line=None):
        self.path = str(path)
        self.offset = offset
        self.line = line
        where = self.path
        if line is not None:
            where += f":{line}"
        if offset is not None:
            where += f" (byte offset {offset})"
        super().__init__(f"{where}: {message}")


# ---------------------------------------------------------------------------
# Point clouds (KITTI velodyne .bin)
# ---------------------------------------------------------------------------

def read_point_cloud(path) -> np.ndarray:
    """Read a packed float32 point cloud.

    Returns an ``(N, 4)`` float32 array of ``(x, y, z, intensity)`` in the
    LiDAR sensor frame. The file size must be a multiple of 16 bytes.
    Non-finite coordinates are a hard error; intensities outside ``[0, 1]``
    are clamped with a warning.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(path, f"unreadable: {exc}") from exc
    if len(raw) % POINT_RECORD_BYTES != 0:
        raise FormatError(
            path,
            f"size {len(raw)} is not a multiple of {POINT_RECORD_BYTES}",
            offset=len(raw) - len(raw) % POINT_RECORD_BYTES,
        )
    points = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).copy()
    bad = ~np.isfinite(points[:, :3])
    if bad.any():
        idx, comp = np.argwhere(bad)[0]
        raise FormatError(
            path,
            "non-finite coordinate",
            offset=int(idx) * POINT_RECORD_BYTES + int(comp) * 4,
        )
    intensity = points[:, 3]
    out_of_range = ~((intensity >= 0.0) & (intensity <= 1.0))
    if out_of_range.any():
        logger.warning(
            "%s: %d intensities outside [0, 1]; clamping", path, int(out_of_range.sum())
        )
        points[:, 3] = np.nan_to_num(np.clip(intensity, 0.0, 1.0), nan=0.0)
    return points


def write_point_cloud(cloud: np.ndarray, path) -> None:
    """Write an ``(N, 4)`` array as packed little-endian float32 records."""
    cloud = np.asarray(cloud, dtype=np.float32)
    if cloud.ndim != 2 or cloud.shape[1] != 4:
        raise ValueError(f"expected an (N, 4) array, got shape {cloud.shape}")
    path = Path(path)
    try:
        path.write_bytes(np.ascontiguousarray(cloud, dtype="<f4").tobytes())
    except OSError as exc:
        raise FormatError(path, f"unwritable: {exc}") from exc


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibMatrices:
    """KITTI calibration: camera projection plus LiDAR-to-camera transform.

    ``p2`` is the 3x4 camera projection (pixel units), ``r0`` the 3x3
    rectification rotation, ``tr_velo_to_cam`` the 3x4 rigid LiDAR-to-camera
    transform.
    """

    p2: np.ndarray
    r0: np.ndarray
    tr_velo_to_cam: np.ndarray


_CALIB_KEYS = {"P2": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}


def read_calib(path) -> CalibMatrices:
    """Parse a KITTI calibration text file.

    Requires ``P2:``, ``R0_rect:`` and ``Tr_velo_to_cam:`` lines with
    12/9/12 floats respectively; other keys are ignored. Validates that
    ``R0`` is orthonormal within 1e-3 and ``P2[2][2] == 1`` within 1e-6
    (KITTI files carry rounded values).
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(path, f"unreadable: {exc}") from exc
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or ":" not in line:
            continue
        key, rest = line.split(":", 1)
        key = key.strip()
        if key not in _CALIB_KEYS:
            continue
        try:
            floats = [float(tok) for tok in rest.split()]
        except ValueError as exc:
            raise FormatError(path, f"non-numeric value in {key}", line=lineno) from exc
        if len(floats) != _CALIB_KEYS[key]:
            raise FormatError(
                path,
                f"{key} expects {_CALIB_KEYS[key]} floats, got {len(floats)}",
                line=lineno,
            )
        values[key] = np.array(floats, dtype=np.float64)
    for key in _CALIB_KEYS:
        if key not in values:
            raise FormatError(path, f"missing key {key!r}")
    p2 = values["P2"].reshape(3, 4)
    r0 = values["R0_rect"].reshape(3, 3)
    tr = values["Tr_velo_to_cam"].reshape(3, 4)
    if abs(p2[2, 2] - 1.0) > 1e-6:
        raise FormatError(path, f"P2[2][2] = {p2[2, 2]!r}, expected 1")
    if np.max(np.abs(r0.T @ r0 - np.eye(3))) > 1e-3:
        raise FormatError(path, "R0_rect is not orthonormal within 1e-3")
    return CalibMatrices(p2=p2, r0=r0, tr_velo_to_cam=tr)


def write_calib(calib: CalibMatrices, path) -> None:
    """Write the three required calibration lines (for fixtures/round trips)."""
    lines = [
        "P2: " + " ".join(repr(float(v)) for v in calib.p2.ravel()),
        "R0_rect: " + " ".join(repr(float(v)) for v in calib.r0.ravel()),
        "Tr_velo_to_cam: "
        + " ".join(repr(float(v)) for v in calib.tr_velo_to_cam.ravel()),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Labels (KITTI 15/16-field text lines)
# ---------------------------------------------------------------------------

@dataclass
class LabelRecord:
    """One KITTI label line.

    ``location`` is the bottom-face center in the camera frame, ``dims`` is
    ``(h, w, l)`` in meters, ``ry`` the yaw about the camera y-axis.
    ``score`` is present iff the record came from a prediction
    (pseudo-label) file.
    """

    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple[float, float, float, float]
    dims: tuple[float, float, float]
    location: tuple[float, float, float]
    ry: float
    score: float | None = None

    @property
    def is_dontcare(self) -> bool:
        return self.class_name == "DontCare"


def _parse_label_line(path, lineno, line, expect_score):
    fields = line.split()
    want = 16 if expect_score else 15
    if len(fields) != want:
        raise FormatError(
            path, f"expected {want} fields, got {len(fields)}", line=lineno
        )
    try:
        nums = [float(tok) for tok in fields[1:]]
    except ValueError as exc:
        raise FormatError(path, "non-numeric field", line=lineno) from exc
    record = LabelRecord(
        class_name=fields[0],
        truncation=nums[0],
        occlusion=int(nums[1]),
        alpha=nums[2],
        bbox2d=(nums[3], nums[4], nums[5], nums[6]),
        dims=(nums[7], nums[8], nums[9]),
        location=(nums[10], nums[11], nums[12]),
        ry=nums[13],
        score=nums[14] if expect_score else None,
    )
    if not record.is_dontcare and min(record.dims) <= 0:
        raise FormatError(
            path, f"non-positive dimensions {record.dims} for {record.class_name}",
            line=lineno,
        )
    return record


def read_labels(path, expect_score: bool = False) -> list[LabelRecord]:
    """Parse a KITTI label file (15 fields, or 16 when ``expect_score``)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(path, f"unreadable: {exc}") from exc
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            records.append(_parse_label_line(path, lineno, line, expect_score))
    return records


def format_label_line(record: LabelRecord) -> str:
    """Serialize one record: 2 decimals for geometry, 4 for score."""
    parts = [
        record.class_name,
        f"{record.truncation:.2f}",
        f"{record.occlusion:d}",
        f"{record.alpha:.2f}",
        *(f"{v:.2f}" for v in record.bbox2d),
        *(f"{v:.2f}" for v in record.dims),
        *(f"{v:.2f}" for v in record.location),
        f"{record.ry:.2f}",
    ]
    if record.score is not None:
        parts.append(f"{record.score:.4f}")
    return " ".join(parts)


def write_labels(records, path) -> None:
    path = Path(path)
    try:
        path.write_text("".join(format_label_line(r) + "\n" for r in records))
    except OSError as exc:
        raise FormatError(path, f"unwritable: {exc}") from exc


# ---------------------------------------------------------------------------
# Dense tensors (NPY v1.0, little-endian float32, C-order)
# ---------------------------------------------------------------------------

def read_tensor(path) -> np.ndarray:
    """Read an NPY v1.0 file holding a 2-D or 3-D ``<f4`` C-order array.

    The header is parsed explicitly so unsupported variants (other NPY
    versions, other dtypes, Fortran order) are rejected with a clear error
    instead of being silently converted.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(path, f"unreadable: {exc}") from exc
    if len(raw) < 10 or raw[:6] != _NPY_MAGIC:
        raise FormatError(path, "bad NPY magic", offset=0)
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise FormatError(path, f"unsupported NPY version {major}.{minor}", offset=6)
    (header_len,) = struct.unpack("<H", raw[8:10])
    header_end = 10 + header_len
    if len(raw) < header_end:
        raise FormatError(path, "truncated NPY header", offset=len(raw))
    try:
        header = ast.literal_eval(raw[10:header_end].decode("latin1"))
        descr = header["descr"]
        fortran = header["fortran_order"]
        shape = tuple(header["shape"])
    except (ValueError, SyntaxError, KeyError, TypeError) as exc:
        raise FormatError(path, f"malformed NPY header: {exc}", offset=10) from exc
    if descr != "<f4":
        raise FormatError(path, f"dtype {descr!r} not supported, expected '<f4'")
    if fortran:
        raise FormatError(path, "Fortran-order arrays not supported")
    if len(shape) not in (2, 3) or not all(isinstance(d, int) and d >= 0 for d in shape):
        raise FormatError(path, f"expected a 2-D or 3-D shape, got {shape}")
    count = int(np.prod(shape, dtype=np.int64))
    payload = raw[header_end:]
    if len(payload) != count * 4:
        raise FormatError(
            path,
            f"payload holds {len(payload)} bytes, shape {shape} needs {count * 4}",
            offset=header_end,
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def write_tensor(tensor: np.ndarray, path) -> None:
    """Write a 2-D or 3-D float32 array as NPY v1.0 (C-order, ``<f4``)."""
    tensor = np.ascontiguousarray(tensor, dtype="<f4")
    if tensor.ndim not in (2, 3):
        raise ValueError(f"expected a 2-D or 3-D array, got shape {tensor.shape}")
    header = (
        "{'descr': '<f4', 'fortran_order': False, "
        f"'shape': {tensor.shape!r}, }}"
    )
    # Pad with spaces so magic + version + length + header is 64-byte aligned.
    unpadded = len(_NPY_MAGIC) + 2 + 2 + len(header) + 1
    header = header + " " * (-unpadded % 64) + "\n"
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(_NPY_MAGIC)
            fh.write(bytes([1, 0]))
            fh.write(struct.pack("<H", len(header)))
            fh.write(header.encode("latin1"))
            fh.write(tensor.tobytes())
    except OSError as exc:
        raise FormatError(path, f"unwritable: {exc}") from exc


# ---------------------------------------------------------------------------
# Images (PNG, 8-bit RGB)
# ---------------------------------------------------------------------------

def _check_png_header(path, raw):
    if len(raw) < 33 or raw[:8] != _PNG_SIGNATURE:
        raise FormatError(path, "not a PNG file", offset=0)
    if raw[12:16] != b"IHDR":
        raise FormatError(path, "first chunk is not IHDR", offset=12)
    bit_depth = raw[24]
    color_type = raw[25]
    if bit_depth != 8 or color_type != 2:
        raise FormatError(
            path,
            f"unsupported PNG format (bit depth {bit_depth}, colour type "
            f"{color_type}); only 8-bit RGB is supported",
        )


def read_image(path) -> np.ndarray:
    """Read an 8-bit RGB PNG into an ``(H, W, 3)`` uint8 array."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(path, f"unreadable: {exc}") from exc
    _check_png_header(path, raw)
    with Image.open(io.BytesIO(raw)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def write_image(pixels: np.ndarray, path) -> None:
    """Write an ``(H, W, 3)`` uint8 array as an 8-bit RGB PNG (lossless)."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError(
            f"expected an (H, W, 3) uint8 array, got {pixels.shape} {pixels.dtype}"
        )
    path = Path(path)
    try:
        Image.fromarray(pixels, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise FormatError(path, f"unwritable: {exc}") from exc


def write_pgm(values: np.ndarray, path) -> None:
    """Write a 2-D array of [0, 1] floats as a binary PGM (values x255)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {values.shape}")
    gray = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{values.shape[1]} {values.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + gray.tobytes())


# ---------------------------------------------------------------------------
# GT object database
# ---------------------------------------------------------------------------

@dataclass
class ObjectSample:
    """A croppable object unit: LiDAR points + image patch + 3D box.

    ``points`` are the object's LiDAR-frame returns (``(N, 4)`` float32),
    ``patch`` the RGB pixels cropped at the object's projected 2D box in
    its source image, and ``patch_box`` that (integer-rounded) box in
    source-image coordinates with the 3D box depth attached.
    """

    class_name: str
    box3d: Box3D
    points: np.ndarray
    patch: np.ndarray
    patch_box: DepthedBox2D
    source_scene: str
    num_points: int

    def __post_init__(self):
        if self.num_points != len(self.points):
            raise ValueError(
                f"num_points {self.num_points} != stored points {len(self.points)}"
            )
        ph, pw = self.patch.shape[:2]
        want_w = int(round(self.patch_box.x2 - self.patch_box.x1))
        want_h = int(round(self.patch_box.y2 - self.patch_box.y1))
        if (pw, ph) != (want_w, want_h):
            raise ValueError(
                f"patch is {pw}x{ph} px but patch_box spans {want_w}x{want_h}"
            )


@dataclass
class GtDatabase:
    """Object samples grouped by class, as built from labelled scenes."""

    entries: dict[str, list[ObjectSample]] = field(default_factory=dict)

    def add(self, sample: ObjectSample) -> None:
        self.entries.setdefault(sample.class_name, []).append(sample)

    def total(self) -> int:
        return sum(len(v) for v in self.entries.values())


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_database(db: GtDatabase, directory) -> None:
    """Persist a database: one .bin + .png per object plus a JSON manifest.

    Layout is one subdirectory per class with ``<scene>_<n>.bin`` point
    files and ``<scene>_<n>.png`` patches; ``manifest.json`` carries boxes,
    provenance, and content checksums so a later load can detect dangling
    or modified files.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"version": 1, "objects": []}
    for class_name in sorted(db.entries):
        class_dir = directory / class_name
        class_dir.mkdir(exist_ok=True)
        for n, sample in enumerate(db.entries[class_name]):
            stem = f"{sample.source_scene}_{n:04d}"
            points_rel = f"{class_name}/{stem}.bin"
            patch_rel = f"{class_name}/{stem}.png"
            write_point_cloud(sample.points, directory / points_rel)
            write_image(sample.patch, directory / patch_rel)
            box = sample.box3d
            pb = sample.patch_box
            manifest["objects"].append(
                {
                    "class_name": class_name,
                    "source_scene": sample.source_scene,
                    "num_points": sample.num_points,
                    "points_file": points_rel,
                    "patch_file": patch_rel,
                    "points_sha256": _sha256((directory / points_rel).read_bytes()),
                    "patch_sha256": _sha256((directory / patch_rel).read_bytes()),
                    "box3d": {
                        "location": list(box.location),
                        "dims": list(box.dims),
                        "ry": box.ry,
                    },
                    "patch_box": {
                        "x1": pb.x1, "y1": pb.y1, "x2": pb.x2, "y2": pb.y2,
                        "depth": pb.depth,
                    },
                }
            )
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )


def load_database(directory) -> GtDatabase:
    """Load a persisted database, verifying paths and checksums."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FormatError(manifest_path, "manifest.json not found")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(manifest_path, f"unreadable manifest: {exc}") from exc
    db = GtDatabase()
    for entry in manifest.get("objects", []):
        name = f"{entry['class_name']} from scene {entry['source_scene']}"
        points_path = directory / entry["points_file"]
        patch_path = directory / entry["patch_file"]
        for p, key in ((points_path, "points_sha256"), (patch_path, "patch_sha256")):
            if not p.is_file():
                raise FormatError(p, f"dangling path for entry ({name})")
            if _sha256(p.read_bytes()) != entry[key]:
                raise FormatError(p, f"checksum mismatch for entry ({name})")
        points = read_point_cloud(points_path)
        if len(points) != entry["num_points"]:
            raise FormatError(
                points_path,
                f"entry ({name}) declares {entry['num_points']} points, "
                f"file holds {len(points)}",
            )
        box = entry["box3d"]
        pb = entry["patch_box"]
        db.add(
            ObjectSample(
                class_name=entry["class_name"],
                box3d=Box3D(
                    location=tuple(box["location"]),
                    dims=tuple(box["dims"]),
                    ry=box["ry"],
                    class_name=entry["class_name"],
                ),
                points=points,
                patch=read_image(patch_path),
                patch_box=DepthedBox2D(
                    x1=pb["x1"], y1=pb["y1"], x2=pb["x2"], y2=pb["y2"],
                    depth=pb["depth"],
                ),
                source_scene=entry["source_scene"],
                num_points=entry["num_points"],
            )
        )
    return db
