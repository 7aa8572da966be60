"""Readers and writers for scans, calibration, poses, rasters, scenes and sequences.

All text formats are line oriented; parse errors name the offending line.
Rasters go through OpenCV: masks and images as 8-bit PNG, confidence maps
as 16-bit PNG.
"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any

import cv2
import numpy as np
from pydantic import ValidationError

from obsfusion.config import (
    SCENE_SCHEMA_FILE,
    SCHEMA_DIR,
    ConfigError,
    load_data,
    load_schema,
    validate_document,
)
from obsfusion.errors import DataFormatError
from obsfusion.models import (
    VLP16_RING_ANGLES,
    CameraModel,
    ExtrinsicsSE3,
    LidarModel,
    Pose,
    SceneSpec,
)
from obsfusion.projection import ConfidenceMap
from obsfusion.ring_geometry import (
    MAX_RINGS,
    ObstacleSegment,
    Ring,
    RingScan,
    format_segment_report,
)

logger = logging.getLogger(__name__)

SCAN_HEADER = "#VLP16-SCAN v1"
RING_ANGLES_TAG = "#ring-angles"
RANGE_TOLERANCE = 1e-3
CONFIDENCE_SCALE = 65535
MASK_LABELS = (0, 1, 2)

FRAMES_FILE = "frames.txt"
CALIB_FILE = "calib.txt"
POSES_FILE = "poses.txt"
IMAGE_PATTERN = "image_{:06d}.png"
SCAN_PATTERN = "scan_{:06d}.txt"
MASK_PATTERN = "mask_{:06d}.png"

CALIBRATION_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "xi")


class ScanHeaderError(DataFormatError):
    pass


class ScanLineError(DataFormatError):
    pass


class RingIndexError(DataFormatError):
    pass


class NonFiniteRangeError(DataFormatError):
    pass


class AzimuthOrderError(DataFormatError):
    pass


class RangeMismatchError(DataFormatError):
    pass


class CalibrationError(DataFormatError):
    def __init__(
        self, message: str, key: str | None = None, line: int | None = None
    ) -> None:
        self.key = key
        super().__init__(message, line)


class PoseFormatError(DataFormatError):
    pass


class MaskFormatError(DataFormatError):
    pass


class ConfidenceMapError(DataFormatError):
    pass


class SceneFormatError(DataFormatError):
    pass


class ManifestError(DataFormatError):
    def __init__(
        self, message: str, frame_id: int | None = None, line: int | None = None
    ) -> None:
        self.frame_id = frame_id
        if frame_id is not None:
            message = f"frame {frame_id}: {message}"
        super().__init__(message, line)


# ── Scans ──


def load_scan(path: str | Path) -> RingScan:
    with open(path, "rt") as fh:
        lines = fh.read().splitlines()

    if not lines or lines[0].strip() != SCAN_HEADER:
        raise ScanHeaderError(f"expected header {SCAN_HEADER!r}", line=1)
    ring_angles = VLP16_RING_ANGLES
    body_start = 1
    if len(lines) > 1 and lines[1].startswith(RING_ANGLES_TAG):
        try:
            angles = tuple(float(a) for a in lines[1].split()[1:])
            ring_angles = LidarModel(ring_angles=angles).ring_angles
        except (ValueError, ValidationError) as e:
            raise ScanHeaderError(f"bad ring angle table: {e}", line=2) from e
        body_start = 2

    buckets: list[list[tuple[float, float, float, float, float, int]]] = [
        [] for _ in ring_angles
    ]
    for lineno, text in enumerate(lines[body_start:], start=body_start + 1):
        fields = text.split()
        if not fields:
            continue
        if len(fields) != 6:
            raise ScanLineError(f"expected 6 fields, found {len(fields)}", line=lineno)
        try:
            ring = int(fields[0])
            az, rng, x, y, z = (float(v) for v in fields[1:])
        except ValueError as e:
            raise ScanLineError(f"not a number: {e}", line=lineno) from e
        if not 0 <= ring < min(MAX_RINGS, len(ring_angles)):
            raise RingIndexError(f"ring index {ring} out of range", line=lineno)
        if not all(math.isfinite(v) for v in (az, rng, x, y, z)):
            raise NonFiniteRangeError("non-finite value", line=lineno)
        if rng <= 0:
            raise ScanLineError(f"range {rng} is not positive", line=lineno)
        if not 0 <= az < 360:
            raise AzimuthOrderError(f"azimuth {az} outside [0, 360)", line=lineno)
        if abs(math.hypot(x, y, z) - rng) > RANGE_TOLERANCE:
            raise RangeMismatchError(
                f"|xyz|={math.hypot(x, y, z):.6f} differs from range {rng:.6f}",
                line=lineno,
            )
        buckets[ring].append((az, rng, x, y, z, lineno))

    rings = []
    for bucket in buckets:
        bucket.sort()
        for previous, current in zip(bucket, bucket[1:]):
            if current[0] <= previous[0]:
                raise AzimuthOrderError(
                    f"azimuth {current[0]} repeats within its ring", line=current[5]
                )
        data = np.array([b[:5] for b in bucket], dtype=float).reshape(-1, 5)
        rings.append(Ring(data[:, 0], data[:, 1], data[:, 2:5]))
    return RingScan(tuple(rings), ring_angles)


def save_scan(scan: RingScan, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "wt") as fh:
        fh.write(SCAN_HEADER + "\n")
        angles = [f"{a:g}" for a in scan.ring_angles]
        fh.write(" ".join([RING_ANGLES_TAG] + angles) + "\n")
        for index, ring in enumerate(scan.rings):
            for az, rng, (x, y, z) in zip(ring.azimuth, ring.range, ring.position):
                fh.write(f"{index} {az:.9f} {rng:.9f} {x:.9f} {y:.9f} {z:.9f}\n")
    return path


# ── Calibration ──


def load_calibration(path: str | Path) -> tuple[CameraModel, ExtrinsicsSE3]:
    values: dict[str, str] = {}
    with open(path, "rt") as fh:
        for lineno, text in enumerate(fh, start=1):
            text = text.strip()
            if not text or text.startswith("#"):
                continue
            key, sep, value = (part.strip() for part in text.partition("="))
            if not sep:
                raise CalibrationError("expected key=value", line=lineno)
            if key not in CALIBRATION_KEYS:
                raise CalibrationError(f"unknown key {key!r}", key=key, line=lineno)
            if key in values:
                raise CalibrationError(f"duplicate key {key!r}", key=key, line=lineno)
            values[key] = value

    for key in CALIBRATION_KEYS:
        if key not in values:
            raise CalibrationError(f"missing key {key!r}", key=key)

    try:
        xi_values = [float(v) for v in values["xi"].split()]
        if len(xi_values) != 6:
            raise CalibrationError(
                f"xi needs 6 values, found {len(xi_values)}", key="xi"
            )
        camera = CameraModel(
            fx=float(values["fx"]),
            fy=float(values["fy"]),
            cx=float(values["cx"]),
            cy=float(values["cy"]),
            width=int(values["width"]),
            height=int(values["height"]),
        )
        xi = ExtrinsicsSE3.from_vector(xi_values)
    except ValueError as e:
        # pydantic's ValidationError is a ValueError
        raise CalibrationError(f"bad or out of range value: {e}") from e
    return camera, xi


def save_calibration(camera: CameraModel, xi: ExtrinsicsSE3, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "wt") as fh:
        for key in ("fx", "fy", "cx", "cy"):
            fh.write(f"{key}={getattr(camera, key)!r}\n")
        fh.write(f"width={camera.width}\nheight={camera.height}\n")
        fh.write("xi=" + " ".join(repr(float(v)) for v in xi.vector()) + "\n")
    return path


# ── Poses ──


def load_poses(path: str | Path, frame_ids: list[int] | None = None) -> list[Pose]:
    poses = []
    with open(path, "rt") as fh:
        for lineno, text in enumerate(fh, start=1):
            fields = text.split()
            if not fields:
                continue
            if len(fields) != 12:
                raise PoseFormatError(
                    f"expected 12 values, found {len(fields)}", line=lineno
                )
            if frame_ids is not None and len(poses) >= len(frame_ids):
                raise PoseFormatError("more poses than frames", line=lineno)
            frame_id = len(poses) if frame_ids is None else frame_ids[len(poses)]
            try:
                m = np.array([float(v) for v in fields]).reshape(3, 4)
                poses.append(Pose.from_matrix(m, frame_id))
            except ValueError as e:
                raise PoseFormatError(str(e), line=lineno) from e
    return poses


def save_poses(poses: list[Pose], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "wt") as fh:
        for pose in poses:
            row = pose.matrix()[:3].ravel()
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    return path


# ── Rasters ──


def _read_raster(path: str | Path, flags: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No such raster: {path}")
    raster = cv2.imread(str(path), flags)
    if raster is None:
        raise DataFormatError(f"{path} is not a readable image")
    return np.asarray(raster)


def _write_raster(path: str | Path, raster: np.ndarray) -> Path:
    path = Path(path)
    if not cv2.imwrite(str(path), raster):
        raise OSError(f"Unable to write {path}")
    return path


def check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise MaskFormatError(f"mask must be single channel, got shape {mask.shape}")
    if not np.isin(mask, MASK_LABELS).all():
        bad = sorted(set(np.unique(mask).tolist()) - set(MASK_LABELS))
        raise MaskFormatError(f"mask holds labels {bad} outside {{0, 1, 2}}")
    return mask.astype(np.uint8)


def load_mask(path: str | Path) -> np.ndarray:
    raster = _read_raster(path, cv2.IMREAD_UNCHANGED)
    if raster.dtype != np.uint8:
        raise MaskFormatError(f"{path}: mask must be 8-bit, got {raster.dtype}")
    try:
        return check_mask(raster)
    except MaskFormatError as e:
        raise MaskFormatError(f"{path}: {e}") from e


def save_mask(mask: np.ndarray, path: str | Path) -> Path:
    return _write_raster(path, check_mask(mask))


def load_image(path: str | Path) -> np.ndarray:
    """8-bit image; grayscale stays 2-D, colour comes back as RGB."""
    raster = _read_raster(path, cv2.IMREAD_UNCHANGED)
    if raster.dtype != np.uint8:
        raise DataFormatError(f"{path}: image must be 8-bit, got {raster.dtype}")
    if raster.ndim == 3:
        code = cv2.COLOR_BGRA2RGB if raster.shape[2] == 4 else cv2.COLOR_BGR2RGB
        raster = cv2.cvtColor(raster, code)
    return raster


def save_image(image: np.ndarray, path: str | Path) -> Path:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim == 3:
        image = cv2.cvtColor(image, cv2.COLOR_RGB2BGR)
    return _write_raster(path, image)


def save_confidence_map(
    confidence: ConfidenceMap | np.ndarray, path: str | Path
) -> Path:
    try:
        values = (
            confidence.values
            if isinstance(confidence, ConfidenceMap)
            else ConfidenceMap(confidence).values
        )
    except ValueError as e:
        raise ConfidenceMapError(str(e)) from e
    quantized = np.rint(values * CONFIDENCE_SCALE).astype(np.uint16)
    return _write_raster(path, quantized)


def load_confidence_map(path: str | Path) -> ConfidenceMap:
    raster = _read_raster(path, cv2.IMREAD_UNCHANGED)
    if raster.dtype != np.uint16 or raster.ndim != 2:
        raise ConfidenceMapError(
            f"{path}: expected single channel 16-bit, got {raster.dtype} {raster.shape}"
        )
    return ConfidenceMap(raster.astype(np.float64) / CONFIDENCE_SCALE)


# ── Segments ──


def save_segments(
    segments: list[ObstacleSegment], path: str | Path, header: list[str] | None = None
) -> Path:
    path = Path(path)
    with open(path, "wt") as fh:
        for line in header or []:
            fh.write(f"# {line}\n")
        fh.write("# ring azA azB n_points spread_deg min_range\n")
        for line in format_segment_report(segments):
            fh.write(line + "\n")
    return path


# ── Scenes ──


def _floats(value: str, count: int, key: str, lineno: int) -> list[float]:
    try:
        numbers = [float(v) for v in value.split()]
    except ValueError as e:
        raise SceneFormatError(f"{key}: not a number", line=lineno) from e
    if len(numbers) != count:
        raise SceneFormatError(
            f"{key} needs {count} values, found {len(numbers)}", line=lineno
        )
    return numbers


def parse_scene_text(text: str) -> dict[str, Any]:
    """Turn key=value scene lines into the document shape of schema/scene.json."""
    doc: dict[str, Any] = {"boxes": [], "curbs": []}
    lidar: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (p.strip() for p in line.partition("="))
        if not sep:
            raise SceneFormatError("expected key=value", line=lineno)
        match key:
            case "box":
                v = _floats(value, 6, key, lineno)
                doc["boxes"].append({"center": v[:3], "size": v[3:]})
            case "curb":
                offset, height = _floats(value, 2, key, lineno)
                doc["curbs"].append({"offset": offset, "height": height})
            case "sensor_height" | "range_noise" | "image_noise":
                doc[key] = _floats(value, 1, key, lineno)[0]
            case "seed":
                doc[key] = int(_floats(value, 1, key, lineno)[0])
            case "azimuth_resolution" | "max_range":
                lidar[key] = _floats(value, 1, key, lineno)[0]
            case "ring_angles":
                lidar[key] = _floats(value, len(value.split()), key, lineno)
            case "camera":
                fx, fy, cx, cy, w, h = _floats(value, 6, key, lineno)
                doc[key] = {
                    "fx": fx,
                    "fy": fy,
                    "cx": cx,
                    "cy": cy,
                    "width": int(w),
                    "height": int(h),
                }
            case "camera_xi":
                doc[key] = _floats(value, 6, key, lineno)
            case "trajectory":
                kind, *rest = value.split() or [""]
                numbers = _floats(" ".join(rest), len(rest), key, lineno)
                if kind != "straight" or not 2 <= len(numbers) <= 4:
                    raise SceneFormatError(
                        "trajectory=straight n step [lateral_step [start]]", line=lineno
                    )
                doc[key] = dict(
                    zip(["n", "step", "lateral_step", "start"], numbers), kind=kind
                )
                doc[key]["n"] = int(doc[key]["n"])
            case _:
                raise SceneFormatError(f"unknown scene key {key!r}", line=lineno)
    if lidar:
        doc["lidar"] = lidar
    return doc


def load_scene(path: str | Path, schemas: str | Path = SCHEMA_DIR) -> SceneSpec:
    path = Path(path)
    if path.suffix.lower() == ".txt":
        document = parse_scene_text(path.read_text())
    else:
        try:
            document = load_data(path)
            schema = load_schema(SCENE_SCHEMA_FILE, schemas)
            validate_document(document, schema, path.name)
        except ConfigError as e:
            raise SceneFormatError(str(e)) from e
    try:
        return SceneSpec.model_validate(document)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "scene"
        raise SceneFormatError(f"{path.name}: {where}: {first['msg']}") from e


# ── Sequences ──


@dataclass(frozen=True)
class FrameRecord:
    """One frame of a sequence; rasters and scans load on access."""

    frame_id: int
    scan_path: Path
    image_path: Path
    mask_path: Path | None
    pose: Pose

    def load_scan(self) -> RingScan:
        return load_scan(self.scan_path)

    def load_image(self) -> np.ndarray:
        return load_image(self.image_path)

    def load_mask(self) -> np.ndarray | None:
        return None if self.mask_path is None else load_mask(self.mask_path)


@dataclass(frozen=True)
class SequenceManifest:
    root: Path
    frames: tuple[FrameRecord, ...]
    calibration_path: Path

    @property
    def frame_ids(self) -> list[int]:
        return [f.frame_id for f in self.frames]

    @cached_property
    def calibration(self) -> tuple[CameraModel, ExtrinsicsSE3]:
        return load_calibration(self.calibration_path)

    @property
    def has_masks(self) -> bool:
        return bool(self.frames) and all(f.mask_path is not None for f in self.frames)

    def frame(self, frame_id: int) -> FrameRecord:
        for record in self.frames:
            if record.frame_id == frame_id:
                return record
        raise ManifestError("not in this sequence", frame_id=frame_id)


def load_sequence(manifest_path: str | Path) -> SequenceManifest:
    path = Path(manifest_path)
    root = path if path.is_dir() else path.parent
    frames_file = root / FRAMES_FILE if path.is_dir() else path
    if not frames_file.exists():
        raise FileNotFoundError(f"No frame list at {frames_file}")

    frame_ids: list[int] = []
    with open(frames_file, "rt") as fh:
        for lineno, text in enumerate(fh, start=1):
            text = text.strip()
            if not text:
                continue
            try:
                frame_id = int(text)
            except ValueError as e:
                raise ManifestError(f"bad frame id {text!r}", line=lineno) from e
            if frame_ids and frame_id <= frame_ids[-1]:
                raise ManifestError(
                    f"ids must be strictly increasing (after {frame_ids[-1]})",
                    frame_id=frame_id,
                    line=lineno,
                )
            frame_ids.append(frame_id)

    for name in (CALIB_FILE, POSES_FILE):
        if not (root / name).exists():
            raise ManifestError(f"sequence file {name} is missing")
    poses = load_poses(root / POSES_FILE, frame_ids)
    if len(poses) != len(frame_ids):
        raise ManifestError(f"{len(frame_ids)} frames but {len(poses)} poses")

    records = []
    for frame_id, pose in zip(frame_ids, poses):
        scan_path = root / SCAN_PATTERN.format(frame_id)
        image_path = root / IMAGE_PATTERN.format(frame_id)
        mask_path = root / MASK_PATTERN.format(frame_id)
        for required in (scan_path, image_path):
            if not required.exists():
                raise ManifestError(f"missing {required.name}", frame_id=frame_id)
        records.append(
            FrameRecord(
                frame_id,
                scan_path,
                image_path,
                mask_path if mask_path.exists() else None,
                pose,
            )
        )
    logger.debug(f"Sequence {root}: {len(records)} frames")
    return SequenceManifest(root, tuple(records), root / CALIB_FILE)


def save_manifest(root: str | Path, frame_ids: list[int]) -> Path:
    path = Path(root) / FRAMES_FILE
    with open(path, "wt") as fh:
        for frame_id in frame_ids:
            fh.write(f"{frame_id}\n")
    return path
