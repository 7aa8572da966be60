"""Pydantic models for sensors, scenes and reports, plus the rigid Pose."""

from __future__ import annotations

import math
from dataclasses import dataclass
import sys
from typing import Literal

if sys.version_info >= (3, 11):
    from typing import Self
else:  # pragma: no cover - Python 3.10 fallback
    from typing_extensions import Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

VLP16_RING_ANGLES: tuple[float, ...] = tuple(float(a) for a in range(-15, 16, 2))

# LiDAR (x right, y forward, z up) to camera (x right, y down, z forward)
# with the camera 0.25 m below and 0.2 m ahead of the LiDAR origin.
DEFAULT_CAMERA_XI: tuple[float, ...] = (0.0, -0.25, -0.2, math.pi / 2, 0.0, 0.0)

# ── Sensors ──


class CameraModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float
    width: int = Field(gt=0)
    height: int = Field(gt=0)

    @model_validator(mode="after")
    def check_principal_point(self) -> Self:
        if not 0 <= self.cx < self.width:
            raise ValueError(f"cx={self.cx} outside [0, {self.width})")
        if not 0 <= self.cy < self.height:
            raise ValueError(f"cy={self.cy} outside [0, {self.height})")
        return self

    @property
    def shape(self) -> tuple[int, int]:
        """Image shape as (rows, columns)."""
        return self.height, self.width

    def pixel_index(self, pixels: np.ndarray) -> np.ndarray:
        """Integer (column, row) of the pixel cell containing each point."""
        return np.floor(np.asarray(pixels, dtype=float) + 0.5).astype(np.int64)

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        idx = self.pixel_index(pixels).reshape(-1, 2)
        return (
            (idx[:, 0] >= 0)
            & (idx[:, 0] < self.width)
            & (idx[:, 1] >= 0)
            & (idx[:, 1] < self.height)
        )


class ExtrinsicsSE3(BaseModel):
    """LiDAR to camera transform as xi = (nu, omega) in se(3)."""

    model_config = ConfigDict(frozen=True)

    nu: tuple[float, float, float] = (0.0, 0.0, 0.0)
    omega: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @model_validator(mode="after")
    def check_canonical(self) -> Self:
        values = self.nu + self.omega
        if not all(math.isfinite(v) for v in values):
            raise ValueError("extrinsics must be finite")
        if math.hypot(*self.omega) >= math.pi:
            raise ValueError(
                f"|omega|={math.hypot(*self.omega):.6f} is not below pi"
            )
        return self

    @classmethod
    def from_vector(cls, vector: np.ndarray | list[float]) -> ExtrinsicsSE3:
        v = [float(x) for x in np.asarray(vector, dtype=float).reshape(6)]
        return cls(nu=(v[0], v[1], v[2]), omega=(v[3], v[4], v[5]))

    def vector(self) -> np.ndarray:
        return np.array(self.nu + self.omega, dtype=float)


class LidarModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    ring_angles: tuple[float, ...] = VLP16_RING_ANGLES
    azimuth_resolution: float = Field(default=0.2, gt=0, le=10)
    max_range: float = Field(default=100.0, gt=0)

    @field_validator("ring_angles")
    @classmethod
    def check_ring_angles(cls, angles: tuple[float, ...]) -> tuple[float, ...]:
        if not 1 <= len(angles) <= 16:
            raise ValueError(f"expected 1 to 16 ring angles, got {len(angles)}")
        if list(angles) != sorted(angles):
            raise ValueError("ring angles must be sorted ascending")
        if any(not -15.0 <= a <= 15.0 for a in angles):
            raise ValueError("ring angles must lie within [-15, 15] degrees")
        return angles


# ── Rigid poses ──


@dataclass(frozen=True, eq=False)
class Pose:
    """World-from-sensor rigid transform of one frame."""

    rotation: np.ndarray
    translation: np.ndarray
    frame_id: int = 0

    def __post_init__(self) -> None:
        rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(rotation)) or not np.all(np.isfinite(translation)):
            raise ValueError("pose must be finite")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > 1e-9:
            raise ValueError("pose rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > 1e-9:
            raise ValueError("pose rotation must have determinant +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls, frame_id: int = 0) -> Pose:
        return cls(np.eye(3), np.zeros(3), frame_id)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, frame_id: int = 0) -> Pose:
        m = np.asarray(matrix, dtype=float)
        return cls(m[:3, :3], m[:3, 3], frame_id)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map sensor-frame points into the world frame."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other: Pose) -> Pose:
        """self ∘ other, keeping this pose's frame id."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            self.frame_id,
        )

    def inverse(self) -> Pose:
        return Pose(self.rotation.T, -self.rotation.T @ self.translation, self.frame_id)


# ── Scenes ──


class Box(BaseModel):
    model_config = ConfigDict(frozen=True)

    center: tuple[float, float, float]
    size: tuple[float, float, float]

    @field_validator("size")
    @classmethod
    def check_size(cls, size: tuple[float, float, float]) -> tuple[float, float, float]:
        if min(size) <= 0:
            raise ValueError(f"box sizes must be positive, got {size}")
        return size

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.size) / 2

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.size) / 2


class Curb(BaseModel):
    """Raised kerb occupying the half-space beyond a lateral offset."""

    model_config = ConfigDict(frozen=True)

    offset: float
    height: float = Field(gt=0)

    @field_validator("offset")
    @classmethod
    def check_offset(cls, offset: float) -> float:
        if offset == 0:
            raise ValueError("curb offset must be non-zero")
        return offset


class Trajectory(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["straight"] = "straight"
    n: int = Field(default=1, ge=1)
    step: float = 1.0
    lateral_step: float = 0.0
    start: float = 0.0


class SceneSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    boxes: tuple[Box, ...] = ()
    curbs: tuple[Curb, ...] = ()
    sensor_height: float = Field(default=1.75, gt=0)
    camera: CameraModel = CameraModel(
        fx=700, fy=700, cx=640, cy=360, width=1280, height=720
    )
    camera_xi: ExtrinsicsSE3 = ExtrinsicsSE3.from_vector(list(DEFAULT_CAMERA_XI))
    lidar: LidarModel = LidarModel()
    trajectory: Trajectory = Trajectory()
    range_noise: float = Field(default=0.0, ge=0)
    image_noise: float = Field(default=0.0, ge=0)
    seed: int = 0

    @field_validator("camera_xi", mode="before")
    @classmethod
    def accept_vector(cls, value: object) -> object:
        if isinstance(value, (list, tuple)) and len(value) == 6:
            return {"nu": list(value[:3]), "omega": list(value[3:])}
        return value

    @model_validator(mode="after")
    def check_heights(self) -> Self:
        for box in self.boxes:
            top = box.center[2] + box.size[2] / 2
            if top >= self.sensor_height:
                raise ValueError(
                    f"box top {top:.3f} m is not below the sensor at "
                    f"{self.sensor_height:.3f} m"
                )
        for curb in self.curbs:
            if curb.height >= self.sensor_height:
                raise ValueError("curb must be lower than the sensor")
        return self


# ── Module parameters ──


class CurbParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    forward_azimuth: float = Field(default=90.0, ge=0, lt=360)
    fov_half_width: float = Field(default=90.0, gt=0, le=180)
    height_jump: float = Field(default=0.08, gt=0)
    min_curb_span: float = Field(default=3.0, gt=0)
    seed_window: float = Field(default=5.0, gt=0)


class TemporalSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    k: int = Field(default=4, ge=1)
    template_size: int = Field(default=32, ge=3)
    search_radius: int = Field(default=48, ge=1)
    ncc_threshold: float = Field(default=0.6, ge=-1, le=1)
    merge_radius: float = Field(default=10.0, ge=0)
    method: Literal["template", "forward", "none"] = "template"
    channel: Literal["luma", "red", "green", "blue"] = "luma"


# ── Reports ──


class RefinementReport(BaseModel):
    initial_xi: ExtrinsicsSE3
    final_xi: ExtrinsicsSE3
    initial_loss: float
    final_loss: float
    loss_trace: list[float] = Field(min_length=1)
    objective_trace: list[float] = Field(min_length=1)
    best_iteration: int = Field(ge=0)
    iterations: int
    converged: bool
    stop_reason: Literal["tolerance", "stalled", "max_iters", "error"]


class MetricsReport(BaseModel):
    idr: float
    ifdr: float
    pdr: float
    miou: float
    class_iou: tuple[float, float, float]
    true_positive_instances: int
    false_positive_instances: int
    predicted_instances: int
    detected_instances: int
    total_instances: int
    tpx: tuple[int, int, int]
    fpx: tuple[int, int, int]
    fnx: tuple[int, int, int]
    frames: int
    undefined: list[str] = Field(default_factory=list)
