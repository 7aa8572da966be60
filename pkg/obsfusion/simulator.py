"""
Synthetic road scenes seen by a 16-ring LiDAR and a pinhole camera.

World frame: z up, road plane at z = 0, the vehicle drives along +y.
The LiDAR frame is x right, y forward, z up (azimuth 90 deg looks forward)
and the camera frame x right, y down, z forward. Every intersection is
analytic, so scans and masks are exact oracles for the detection,
projection and calibration stages.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from obsfusion.models import CameraModel, ExtrinsicsSE3, LidarModel, Pose, SceneSpec
from obsfusion.projection import exp_so3
from obsfusion.ring_geometry import Ring, RingScan
from obsfusion.scene_io import (
    CALIB_FILE,
    IMAGE_PATTERN,
    MASK_PATTERN,
    POSES_FILE,
    SCAN_PATTERN,
    SequenceManifest,
    load_sequence,
    save_calibration,
    save_image,
    save_manifest,
    save_mask,
    save_poses,
    save_scan,
)

logger = logging.getLogger(__name__)

OFF_ROAD, ROAD, OBSTACLE = 0, 1, 2
GRAY_LEVELS = np.array([64, 128, 255], dtype=np.uint8)

MISS, GROUND, CURB, BOX = 0, 1, 2, 3


@dataclass(frozen=True, eq=False)
class RayHits:
    """Nearest intersection per ray.

    Attributes:
        t: distance along each (unit or not) direction, inf on a miss.
        kind: MISS, GROUND, CURB or BOX.
        index: curb or box index within the scene, -1 otherwise.
    """

    t: np.ndarray
    kind: np.ndarray
    index: np.ndarray


@dataclass(frozen=True)
class BoxCrossing:
    """A run of consecutive returns of one ring landing on one box."""

    ring: int
    box: int
    first_azimuth: float
    last_azimuth: float
    n_points: int
    entry_jump: float
    exit_jump: float
    spread: float

    def detectable(self, d_th: float = 0.4, max_spread: float = 2.0) -> bool:
        return (
            self.entry_jump >= d_th
            and self.exit_jump >= d_th
            and self.spread <= max_spread
        )


# ── Ray casting ──


def _slab_entry(
    origin: np.ndarray, dirs: np.ndarray, lower: np.ndarray, upper: np.ndarray
) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lower - origin) / dirs
        t2 = (upper - origin) / dirs
    parallel = dirs == 0
    inside = (origin >= lower) & (origin <= upper)
    t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    near = t_lo.max(axis=1)
    far = t_hi.min(axis=1)
    return np.where((near <= far) & (near > 0), near, np.inf)


def curb_bounds(offset: float, height: float) -> tuple[np.ndarray, np.ndarray]:
    """A curb is the solid beyond its lateral offset, up to its height."""
    if offset > 0:
        return np.array([offset, -np.inf, -np.inf]), np.array([np.inf, np.inf, height])
    return np.array([-np.inf, -np.inf, -np.inf]), np.array([offset, np.inf, height])


def cast_rays(
    scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray, max_range: float = np.inf
) -> RayHits:
    origin = np.asarray(origin, dtype=float).reshape(3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        ground = np.where(dirs[:, 2] < 0, -origin[2] / dirs[:, 2], np.inf)
    candidates = [ground]
    kinds = [GROUND]
    indices = [-1]
    for i, curb in enumerate(scene.curbs):
        lower, upper = curb_bounds(curb.offset, curb.height)
        candidates.append(_slab_entry(origin, dirs, lower, upper))
        kinds.append(CURB)
        indices.append(i)
    for i, box in enumerate(scene.boxes):
        candidates.append(_slab_entry(origin, dirs, box.lower, box.upper))
        kinds.append(BOX)
        indices.append(i)

    stacked = np.stack(candidates, axis=1)
    nearest = np.argmin(stacked, axis=1)
    t = stacked[np.arange(len(dirs)), nearest]
    hit = np.isfinite(t) & (t <= max_range * np.linalg.norm(dirs, axis=1))
    return RayHits(
        t=np.where(hit, t, np.inf),
        kind=np.where(hit, np.asarray(kinds)[nearest], MISS),
        index=np.where(hit, np.asarray(indices)[nearest], -1),
    )


def ring_directions(lidar: LidarModel) -> tuple[np.ndarray, np.ndarray]:
    """Azimuths (deg) and unit LiDAR-frame directions, shape (rings, n_azimuth, 3)."""
    n_azimuth = int(math.ceil(360.0 / lidar.azimuth_resolution - 1e-9))
    azimuth = np.arange(n_azimuth) * lidar.azimuth_resolution
    phi = np.radians(azimuth)[None, :]
    alpha = np.radians(np.asarray(lidar.ring_angles))[:, None]
    dirs = np.stack(
        [
            np.cos(alpha) * np.cos(phi),
            np.cos(alpha) * np.sin(phi),
            np.sin(alpha) * np.ones_like(phi),
        ],
        axis=2,
    )
    return azimuth, dirs


def _lidar_hits(
    scene: SceneSpec, pose: Pose, lidar: LidarModel
) -> tuple[np.ndarray, np.ndarray, RayHits]:
    azimuth, dirs = ring_directions(lidar)
    world_dirs = dirs.reshape(-1, 3) @ pose.rotation.T
    hits = cast_rays(scene, pose.translation, world_dirs, lidar.max_range)
    return azimuth, dirs, hits


def raycast_scan(
    scene: SceneSpec,
    pose: Pose,
    lidar: LidarModel | None = None,
    rng: np.random.Generator | None = None,
) -> RingScan:
    lidar = lidar or scene.lidar
    azimuth, dirs, hits = _lidar_hits(scene, pose, lidar)
    n_rings, n_azimuth = dirs.shape[:2]
    ranges = hits.t.reshape(n_rings, n_azimuth)
    if scene.range_noise > 0:
        rng = rng or np.random.default_rng(scene.seed)
        noisy = ranges + rng.normal(0.0, scene.range_noise, ranges.shape)
        ranges = np.where(np.isfinite(ranges), np.maximum(noisy, 1e-3), ranges)

    rings = []
    for r in range(n_rings):
        keep = np.isfinite(ranges[r])
        rings.append(
            Ring(
                azimuth[keep],
                ranges[r, keep],
                dirs[r, keep] * ranges[r, keep, None],
            )
        )
    return RingScan(tuple(rings), lidar.ring_angles)


def enumerate_crossings(
    scene: SceneSpec, pose: Pose, lidar: LidarModel | None = None
) -> list[BoxCrossing]:
    """Analytic list of every ring run that lands on a box, with its range jumps."""
    lidar = lidar or scene.lidar
    azimuth, dirs, hits = _lidar_hits(scene, pose, lidar)
    n_rings, n_azimuth = dirs.shape[:2]
    t = hits.t.reshape(n_rings, n_azimuth)
    on_box = np.where(hits.kind == BOX, hits.index, -1).reshape(n_rings, n_azimuth)

    crossings = []
    for r in range(n_rings):
        returned = np.flatnonzero(np.isfinite(t[r]))
        labels = on_box[r, returned]
        k = 0
        while k < len(returned):
            box = int(labels[k])
            if box < 0:
                k += 1
                continue
            j = k
            while j + 1 < len(returned) and labels[j + 1] == box:
                j += 1
            first, last = returned[k], returned[j]
            before = returned[k - 1] if k > 0 else None
            after = returned[j + 1] if j + 1 < len(returned) else None
            crossings.append(
                BoxCrossing(
                    ring=r,
                    box=box,
                    first_azimuth=float(azimuth[first]),
                    last_azimuth=float(azimuth[last]),
                    n_points=j - k + 1,
                    entry_jump=(
                        float(t[r, before] - t[r, first])
                        if before is not None
                        else -np.inf
                    ),
                    exit_jump=(
                        float(t[r, after] - t[r, last])
                        if after is not None
                        else -np.inf
                    ),
                    spread=(
                        float(azimuth[after] - azimuth[first])
                        if after is not None
                        else np.inf
                    ),
                )
            )
            k = j + 1
    return crossings


# ── Camera ──


def camera_pose(lidar_pose: Pose, xi: ExtrinsicsSE3) -> Pose:
    """World-from-camera pose given the LiDAR pose and LiDAR-to-camera xi."""
    camera_from_lidar = Pose(exp_so3(np.asarray(xi.omega)), np.asarray(xi.nu))
    return lidar_pose.compose(camera_from_lidar.inverse())


def render_ground_truth(
    scene: SceneSpec, cam_pose: Pose, camera: CameraModel
) -> np.ndarray:
    cols, rows = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    rays = np.stack(
        [
            (cols - camera.cx) / camera.fx,
            (rows - camera.cy) / camera.fy,
            np.ones(cols.shape),
        ],
        axis=2,
    ).reshape(-1, 3)
    hits = cast_rays(scene, cam_pose.translation, rays @ cam_pose.rotation.T)
    labels = np.full(len(rays), OFF_ROAD, dtype=np.uint8)
    labels[hits.kind == GROUND] = ROAD
    labels[hits.kind == BOX] = OBSTACLE
    return labels.reshape(camera.shape)


def gray_image(
    mask: np.ndarray, noise: float = 0.0, rng: np.random.Generator | None = None
) -> np.ndarray:
    image = GRAY_LEVELS[np.asarray(mask)]
    if noise > 0:
        rng = rng or np.random.default_rng(0)
        noisy = image.astype(float) + rng.normal(0.0, noise, image.shape)
        image = np.clip(np.rint(noisy), 0, 255).astype(np.uint8)
    return image


# ── Sequences ──


def lidar_poses(scene: SceneSpec) -> list[Pose]:
    trajectory = scene.trajectory
    return [
        Pose(
            np.eye(3),
            np.array(
                [
                    i * trajectory.lateral_step,
                    trajectory.start + i * trajectory.step,
                    scene.sensor_height,
                ]
            ),
            frame_id=i,
        )
        for i in range(trajectory.n)
    ]


def simulate_sequence(scene: SceneSpec, out_dir: str | Path) -> SequenceManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    poses = lidar_poses(scene)
    for pose in poses:
        # one generator per frame keeps frames independent of generation order
        rng = np.random.default_rng([scene.seed, pose.frame_id])
        scan = raycast_scan(scene, pose, scene.lidar, rng)
        mask = render_ground_truth(
            scene, camera_pose(pose, scene.camera_xi), scene.camera
        )
        save_scan(scan, out / SCAN_PATTERN.format(pose.frame_id))
        save_mask(mask, out / MASK_PATTERN.format(pose.frame_id))
        save_image(
            gray_image(mask, scene.image_noise, rng),
            out / IMAGE_PATTERN.format(pose.frame_id),
        )
        logger.debug(f"frame {pose.frame_id}: {scan.n_points} returns")
    save_poses(poses, out / POSES_FILE)
    save_calibration(scene.camera, scene.camera_xi, out / CALIB_FILE)
    save_manifest(out, [p.frame_id for p in poses])
    return load_sequence(out)
