"""Carry past detections into the current frame.

Obstacles seen in the last ``k`` frames are forward projected with the
odometry poses and, in template mode, re-localised by zero-mean normalised
cross-correlation around that seed. Accepted matches are splatted into the
current confidence map with pixelwise max.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator

import cv2
import numpy as np
from scipy.signal import fftconvolve

from obsfusion.errors import NumericalError
from obsfusion.models import CameraModel, ExtrinsicsSE3, Pose, TemporalSettings
from obsfusion.projection import (
    ConfidenceMap,
    Projection,
    project_points,
    splat_gaussians,
)
from obsfusion.ring_geometry import ObstacleSegment

logger = logging.getLogger(__name__)

VARIANCE_EPS = 1e-9
CHANNELS = {"red": 0, "green": 1, "blue": 2}


class DegenerateMatchError(NumericalError):
    pass


@dataclass(frozen=True, eq=False)
class TrackedObstacle:
    """
    One detection kept in memory.

    Attributes:
        points: segment member points, LiDAR frame of the frame it was seen in.
        centroid: mean of the obstacle points (closing breakpoint excluded).
        pixel: projected centroid, None when behind the camera.
        template: grayscale patch centred on ``pixel``, None near the border.
    """

    points: np.ndarray
    centroid: np.ndarray
    pixel: np.ndarray | None
    template: np.ndarray | None


@dataclass(frozen=True, eq=False)
class MemoryEntry:
    frame_id: int
    pose: Pose | None
    obstacles: tuple[TrackedObstacle, ...]


class DetectionMemory:
    """Ring buffer of the last ``k`` frames' detections, oldest first."""

    def __init__(self, k: int = 4) -> None:
        if k < 1:
            raise ValueError("memory must hold at least one frame")
        self.k = k
        self._entries: deque[MemoryEntry] = deque(maxlen=k)

    def append(self, entry: MemoryEntry) -> None:
        if self._entries and entry.frame_id <= self._entries[-1].frame_id:
            raise ValueError(
                f"frame {entry.frame_id} does not follow {self._entries[-1].frame_id}"
            )
        self._entries.append(entry)

    @property
    def frame_ids(self) -> list[int]:
        return [e.frame_id for e in self._entries]

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[MemoryEntry]:
        return iter(self._entries)


@dataclass(frozen=True)
class MatchResult:
    center: tuple[float, float]
    score: float
    accepted: bool

    def __post_init__(self) -> None:
        if not np.isfinite(self.score):
            raise ValueError("match score must be finite")


@dataclass
class TemporalDiagnostics:
    skipped_entries: int = 0
    redetected: int = 0
    degenerate_matches: int = 0
    rejected_matches: int = 0
    accepted_matches: int = 0
    forward_splats: int = 0
    scores: list[float] = field(default_factory=list)


def to_gray(image: np.ndarray, channel: str = "luma") -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.float64)
    if channel == "luma":
        return cv2.cvtColor(image[:, :, :3], cv2.COLOR_RGB2GRAY).astype(np.float64)
    return image[:, :, CHANNELS[channel]].astype(np.float64)


def _relative_pose(current_pose: Pose, past_pose: Pose) -> Pose:
    return current_pose.inverse().compose(past_pose)


def forward_project(
    memory: DetectionMemory,
    current_pose: Pose,
    camera: CameraModel,
    xi: ExtrinsicsSE3,
    diagnostics: TemporalDiagnostics | None = None,
) -> Projection:
    points = []
    sources = []
    skipped = 0
    for entry in memory:
        if entry.pose is None:
            skipped += 1
            continue
        motion = _relative_pose(current_pose, entry.pose)
        for obstacle in entry.obstacles:
            points.append(motion.apply(obstacle.points))
            sources.append(np.full(len(obstacle.points), entry.frame_id))
    if skipped:
        logger.warning(f"{skipped} memory entries have no pose and were skipped")
        if diagnostics is not None:
            diagnostics.skipped_entries += skipped
    if not points:
        return project_points(np.empty((0, 3)), camera, xi)
    return project_points(
        np.concatenate(points), camera, xi, source=np.concatenate(sources)
    )


def _window_sums(image: np.ndarray, th: int, tw: int) -> tuple[np.ndarray, np.ndarray]:
    """Sum and sum of squares over every th x tw placement, via integral images."""

    def box_sum(values: np.ndarray) -> np.ndarray:
        ii = np.zeros((values.shape[0] + 1, values.shape[1] + 1))
        ii[1:, 1:] = values.cumsum(axis=0).cumsum(axis=1)
        return ii[th:, tw:] - ii[:-th, tw:] - ii[th:, :-tw] + ii[:-th, :-tw]

    return box_sum(image), box_sum(image * image)


def template_match(
    template: np.ndarray,
    image: np.ndarray,
    search_center: tuple[float, float] | np.ndarray,
    search_radius: int,
    threshold: float = 0.6,
) -> MatchResult:
    """Best zero-mean NCC placement whose centre lies within the search radius.

    Centres and ``search_center`` are (x, y) pixel coordinates; a template's
    centre is its top-left corner plus half its size (integer division).
    """
    template = np.asarray(template, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    th, tw = template.shape
    n = th * tw
    t0 = template - template.mean()
    t_norm = float(np.sqrt((t0 * t0).sum()))
    if t_norm <= VARIANCE_EPS:
        raise DegenerateMatchError("template has zero variance")

    cx, cy = (int(np.floor(v + 0.5)) for v in search_center)
    height, width = image.shape
    r0 = max(0, cy - search_radius - th // 2)
    c0 = max(0, cx - search_radius - tw // 2)
    r1 = min(height, cy + search_radius - th // 2 + th)
    c1 = min(width, cx + search_radius - tw // 2 + tw)
    if r1 - r0 < th or c1 - c0 < tw:
        raise DegenerateMatchError(
            f"search window at ({cx}, {cy}) is smaller than the template"
        )
    window = image[r0:r1, c0:c1]
    if window.max() - window.min() <= 0:
        raise DegenerateMatchError("search window has zero variance")

    numerator = fftconvolve(window, t0[::-1, ::-1], mode="valid")
    sums, squares = _window_sums(window, th, tw)
    variance = np.maximum(squares - sums * sums / n, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = numerator / (np.sqrt(variance) * t_norm)
    scores = np.where(variance > VARIANCE_EPS * n, np.clip(scores, -1.0, 1.0), 0.0)

    i, j = np.unravel_index(int(np.argmax(scores)), scores.shape)
    score = float(scores[i, j])
    center = (float(c0 + j + tw // 2), float(r0 + i + th // 2))
    return MatchResult(center=center, score=score, accepted=score >= threshold)


def cut_template(gray: np.ndarray, pixel: np.ndarray, size: int) -> np.ndarray | None:
    cx, cy = (int(np.floor(v + 0.5)) for v in pixel)
    top, left = cy - size // 2, cx - size // 2
    if top < 0 or left < 0 or top + size > gray.shape[0] or left + size > gray.shape[1]:
        return None
    return gray[top : top + size, left : left + size].copy()


def update_memory(
    memory: DetectionMemory,
    segments: list[ObstacleSegment],
    image: np.ndarray,
    pose: Pose | None,
    frame_id: int,
    camera: CameraModel,
    xi: ExtrinsicsSE3,
    settings: TemporalSettings = TemporalSettings(),
) -> DetectionMemory:
    gray = to_gray(image, settings.channel)
    obstacles = []
    for segment in segments:
        centroid = segment.centroid
        projection = project_points(centroid[None, :], camera, xi)
        pixel = projection.pixels[0] if len(projection) else None
        template = (
            cut_template(gray, pixel, settings.template_size)
            if pixel is not None
            else None
        )
        obstacles.append(
            TrackedObstacle(segment.points.position.copy(), centroid, pixel, template)
        )
    memory.append(MemoryEntry(frame_id, pose, tuple(obstacles)))
    return memory


def propagate_and_aggregate(
    current_map: ConfidenceMap,
    memory: DetectionMemory,
    current_image: np.ndarray,
    current_pose: Pose | None,
    camera: CameraModel,
    xi: ExtrinsicsSE3,
    sigma: float,
    settings: TemporalSettings = TemporalSettings(),
    current_anchors: np.ndarray | None = None,
    diagnostics: TemporalDiagnostics | None = None,
) -> ConfidenceMap:
    if settings.method == "none" or len(memory) == 0:
        return current_map
    diagnostics = diagnostics if diagnostics is not None else TemporalDiagnostics()
    if current_pose is None:
        logger.warning("current frame has no pose; temporal aggregation skipped")
        diagnostics.skipped_entries += len(memory)
        return current_map

    anchors = (
        np.empty((0, 2))
        if current_anchors is None
        else np.asarray(current_anchors, dtype=float).reshape(-1, 2)
    )
    gray = to_gray(current_image, settings.channel)
    values = current_map.values.copy()

    for entry in memory:
        if entry.pose is None:
            diagnostics.skipped_entries += 1
            continue
        motion = _relative_pose(current_pose, entry.pose)
        for obstacle in entry.obstacles:
            seed = project_points(motion.apply(obstacle.centroid[None, :]), camera, xi)
            if len(seed) == 0:
                continue
            seed_pixel = seed.pixels[0]
            if len(anchors) and (
                np.min(np.linalg.norm(anchors - seed_pixel, axis=1))
                <= settings.merge_radius
            ):
                diagnostics.redetected += 1
                continue

            if settings.method == "forward" or obstacle.template is None:
                moved = project_points(motion.apply(obstacle.points), camera, xi)
                splat_gaussians(values, moved.pixels, sigma)
                diagnostics.forward_splats += 1
                continue

            try:
                match = template_match(
                    obstacle.template,
                    gray,
                    seed_pixel,
                    settings.search_radius,
                    settings.ncc_threshold,
                )
            except DegenerateMatchError as e:
                logger.debug(f"frame {entry.frame_id}: {e}")
                diagnostics.degenerate_matches += 1
                continue
            diagnostics.scores.append(match.score)
            if not match.accepted:
                diagnostics.rejected_matches += 1
                continue
            diagnostics.accepted_matches += 1
            splat_gaussians(values, np.array([match.center]), sigma)

    if diagnostics.degenerate_matches:
        logger.debug(f"{diagnostics.degenerate_matches} degenerate template matches")
    return ConfidenceMap(np.maximum(values, current_map.values))
