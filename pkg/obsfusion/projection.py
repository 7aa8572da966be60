"""Rotation maps, pinhole projection and Gaussian confidence maps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from obsfusion.models import CameraModel, ExtrinsicsSE3

logger = logging.getLogger(__name__)

Z_MIN = 0.1
SMALL_ANGLE = 1e-8
TRUNCATE_SIGMAS = 3.0


# ── SO(3) / SE(3) ──


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula; a second order series below SMALL_ANGLE."""
    w = np.asarray(omega, dtype=float).reshape(3)
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    return (
        np.eye(3)
        + (math.sin(theta) / theta) * K
        + ((1.0 - math.cos(theta)) / theta**2) * (K @ K)
    )


def log_so3(rotation: np.ndarray) -> np.ndarray:
    R = np.asarray(rotation, dtype=float).reshape(3, 3)
    cos_theta = float(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0))
    theta = math.acos(cos_theta)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < SMALL_ANGLE:
        return vee / 2.0
    if math.pi - theta < 1e-6:
        # sin(theta) vanishes; recover the axis from the symmetric part
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.linalg.norm(B[:, k])
        if vee @ axis < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * math.sin(theta)) * vee


def se3_matrix(xi: ExtrinsicsSE3) -> np.ndarray:
    """Homogeneous 4x4 [R | nu] with R = exp_so3(omega)."""
    m = np.eye(4)
    m[:3, :3] = exp_so3(np.asarray(xi.omega))
    m[:3, 3] = xi.nu
    return m


def geodesic_angle(r1: np.ndarray, r2: np.ndarray) -> float:
    """Angle in radians of the rotation taking r1 to r2."""
    relative = np.asarray(r1).T @ np.asarray(r2)
    return float(np.linalg.norm(log_so3(relative)))


# ── Projection ──


class PixelPoint(NamedTuple):
    x: float
    y: float
    source: int
    inside: bool


@dataclass(frozen=True, eq=False)
class Projection:
    """Pixels of the points in front of the camera.

    Attributes:
        pixels: (M, 2) continuous (x, y) coordinates.
        inside: (M,) whether each pixel cell lies within the image.
        index: (M,) position of each pixel's point in the input array.
        source: (M,) segment id per pixel.
        culled: number of input points at or behind the near plane.
    """

    pixels: np.ndarray
    inside: np.ndarray
    index: np.ndarray
    source: np.ndarray
    culled: int

    def __len__(self) -> int:
        return len(self.pixels)

    def __iter__(self) -> Iterator[PixelPoint]:
        for (x, y), src, ok in zip(self.pixels, self.source, self.inside):
            yield PixelPoint(float(x), float(y), int(src), bool(ok))


def transform_points(points: np.ndarray, xi: ExtrinsicsSE3) -> np.ndarray:
    """LiDAR-frame points into the camera frame."""
    R = exp_so3(np.asarray(xi.omega))
    return np.asarray(points, dtype=float).reshape(-1, 3) @ R.T + np.asarray(xi.nu)


def project_camera_points(
    p_cam: np.ndarray, camera: CameraModel, z_min: float = Z_MIN
) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole pixels of camera-frame points and the mask of points kept."""
    p_cam = np.asarray(p_cam, dtype=float).reshape(-1, 3)
    front = p_cam[:, 2] > z_min
    z = np.where(front, p_cam[:, 2], 1.0)
    pixels = np.stack(
        [
            camera.fx * p_cam[:, 0] / z + camera.cx,
            camera.fy * p_cam[:, 1] / z + camera.cy,
        ],
        axis=1,
    )
    return pixels, front


def project_points(
    points: np.ndarray,
    camera: CameraModel,
    xi: ExtrinsicsSE3,
    source: np.ndarray | int = 0,
    z_min: float = Z_MIN,
) -> Projection:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    pixels, front = project_camera_points(transform_points(points, xi), camera, z_min)
    sources = np.broadcast_to(np.asarray(source, dtype=np.int64), (len(points),))
    culled = int((~front).sum())
    if culled:
        logger.debug(f"culled {culled} points behind the near plane")
    kept = pixels[front]
    return Projection(
        pixels=kept,
        inside=camera.contains(kept),
        index=np.flatnonzero(front),
        source=sources[front].copy(),
        culled=culled,
    )


# ── Confidence maps ──


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("confidence map must be two dimensional")
        if values.size and (np.nanmin(values) < 0 or np.nanmax(values) > 1):
            raise ValueError("confidence values must lie in [0, 1]")
        if np.isnan(values).any():
            raise ValueError("confidence values must be finite")
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, camera: CameraModel) -> ConfidenceMap:
        return cls(np.zeros(camera.shape))

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    def maximum(self, other: ConfidenceMap) -> ConfidenceMap:
        return ConfidenceMap(np.maximum(self.values, other.values))


def splat_gaussians(
    values: np.ndarray, anchors: np.ndarray, sigma: float
) -> np.ndarray:
    """Max-compose truncated Gaussians centred on the anchors' pixels, in place."""
    height, width = values.shape
    radius = int(math.ceil(TRUNCATE_SIGMAS * sigma))
    cutoff = (TRUNCATE_SIGMAS * sigma) ** 2
    snapped = np.floor(np.asarray(anchors, dtype=float).reshape(-1, 2) + 0.5)
    for ax, ay in np.unique(snapped.astype(np.int64), axis=0):
        r0, r1 = max(0, ay - radius), min(height, ay + radius + 1)
        c0, c1 = max(0, ax - radius), min(width, ax + radius + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        dy = (np.arange(r0, r1) - ay)[:, None]
        dx = (np.arange(c0, c1) - ax)[None, :]
        d2 = (dx * dx + dy * dy).astype(float)
        g = np.where(d2 <= cutoff, np.exp(-d2 / (2.0 * sigma * sigma)), 0.0)
        np.maximum(values[r0:r1, c0:c1], g, out=values[r0:r1, c0:c1])
    return values


def render_confidence_map(
    anchors: np.ndarray | Projection, sigma: float, camera: CameraModel
) -> ConfidenceMap:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    pixels = anchors.pixels if isinstance(anchors, Projection) else anchors
    values = np.zeros(camera.shape)
    splat_gaussians(values, np.asarray(pixels, dtype=float), sigma)
    return ConfidenceMap(values)


def fuse_channels(image: np.ndarray, confidence: ConfidenceMap) -> np.ndarray:
    """Stack an image and its confidence map into an H x W x (C+1) float array."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[:2] != confidence.values.shape:
        raise ValueError(
            f"image {image.shape[:2]} and confidence map "
            f"{confidence.values.shape} differ in size"
        )
    scaled = image.astype(np.float32)
    if np.issubdtype(image.dtype, np.integer):
        scaled /= np.iinfo(image.dtype).max
    return np.concatenate(
        [scaled, confidence.values.astype(np.float32)[:, :, None]], axis=2
    )
