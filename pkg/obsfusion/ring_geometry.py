"""Breakpoint detection and small obstacle segment isolation on LiDAR rings.

A ring is processed as a linear sequence ordered by azimuth. For every
consecutive triplet the first two returns predict the range of the third
under the assumption that all three lie on one straight surface; a return
deviating from that prediction by at least ``d_th`` is a breakpoint. A
(negative, positive) breakpoint pair that is narrow in azimuth brackets an
obstacle standing in front of its background.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from obsfusion.config import ConfigError
from obsfusion.errors import NumericalError
from obsfusion.models import (
    VLP16_RING_ANGLES,
    CameraModel,
    CurbParams,
    ExtrinsicsSE3,
)
from obsfusion.projection import project_points

logger = logging.getLogger(__name__)

MAX_RINGS = 16
DENOMINATOR_EPS = 1e-6
ROAD_LABELS = (1, 2)


class DegenerateGeometryError(NumericalError):
    pass


# ── Scan containers ──


@dataclass(frozen=True, eq=False)
class Ring:
    """Returns of one laser channel, sorted by strictly increasing azimuth."""

    azimuth: np.ndarray
    range: np.ndarray
    position: np.ndarray

    def __post_init__(self) -> None:
        azimuth = np.asarray(self.azimuth, dtype=float).reshape(-1)
        ranges = np.asarray(self.range, dtype=float).reshape(-1)
        position = np.asarray(self.position, dtype=float).reshape(-1, 3)
        if not len(azimuth) == len(ranges) == len(position):
            raise ValueError("ring arrays differ in length")
        if np.any(np.diff(azimuth) <= 0):
            raise ValueError("ring azimuths must be strictly increasing")
        if np.any(~np.isfinite(ranges)) or np.any(ranges <= 0):
            raise ValueError("ring ranges must be finite and positive")
        object.__setattr__(self, "azimuth", azimuth)
        object.__setattr__(self, "range", ranges)
        object.__setattr__(self, "position", position)

    @classmethod
    def empty(cls) -> Ring:
        return cls(np.empty(0), np.empty(0), np.empty((0, 3)))

    def __len__(self) -> int:
        return len(self.azimuth)

    def slice(self, start: int, stop: int) -> Ring:
        return Ring(
            self.azimuth[start:stop], self.range[start:stop], self.position[start:stop]
        )


@dataclass(frozen=True, eq=False)
class RingScan:
    rings: tuple[Ring, ...]
    ring_angles: tuple[float, ...] = VLP16_RING_ANGLES

    def __post_init__(self) -> None:
        if len(self.rings) > MAX_RINGS:
            raise ValueError(f"a scan holds at most {MAX_RINGS} rings")
        if len(self.ring_angles) != len(self.rings):
            raise ValueError("one vertical angle is required per ring")

    @classmethod
    def empty(cls, ring_angles: tuple[float, ...] = VLP16_RING_ANGLES) -> RingScan:
        return cls(tuple(Ring.empty() for _ in ring_angles), ring_angles)

    @property
    def n_points(self) -> int:
        return sum(len(r) for r in self.rings)


@dataclass(frozen=True)
class Breakpoint:
    ring: int
    index: int
    azimuth: float
    gradient_sign: int
    range: float
    predicted: float

    def __post_init__(self) -> None:
        if self.gradient_sign not in (-1, 1):
            raise ValueError("gradient sign must be -1 or +1")


@dataclass(frozen=True, eq=False)
class ObstacleSegment:
    """Ring returns from breakpoint A to breakpoint B inclusive."""

    ring: int
    start: Breakpoint
    end: Breakpoint
    points: Ring

    def __post_init__(self) -> None:
        if self.start.gradient_sign != -1 or self.end.gradient_sign != 1:
            raise ValueError("a segment opens on G=-1 and closes on G=+1")
        if self.spread <= 0:
            raise ValueError("segment spread must be positive")

    @property
    def spread(self) -> float:
        return self.end.azimuth - self.start.azimuth

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def min_range(self) -> float:
        return float(self.points.range.min())

    @property
    def obstacle_points(self) -> np.ndarray:
        """Returns on the obstacle itself; B is the first background return."""
        return self.points.position[:-1]

    @property
    def centroid(self) -> np.ndarray:
        return np.asarray(self.obstacle_points.mean(axis=0))


@dataclass
class BreakpointDiagnostics:
    degenerate: int = 0
    echoes: int = 0
    per_ring: dict[int, tuple[int, int]] = field(default_factory=dict)

    def add(self, ring: int, degenerate: int, echoes: int) -> None:
        self.degenerate += degenerate
        self.echoes += echoes
        self.per_ring[ring] = (degenerate, echoes)


# ── Road regions ──


@dataclass(frozen=True)
class AzimuthRoadRegion:
    bands: dict[int, tuple[float, float]]

    def __post_init__(self) -> None:
        for ring, (lo, hi) in self.bands.items():
            if not 0 <= lo <= hi < 360:
                raise ValueError(
                    f"ring {ring} band ({lo}, {hi}) is not within [0, 360)"
                )


@dataclass(frozen=True)
class CurbRoadRegion:
    params: CurbParams = CurbParams()

    def bands_for(self, scan: RingScan) -> AzimuthRoadRegion:
        bands = {
            i: detect_road_band(ring, self.params) for i, ring in enumerate(scan.rings)
        }
        return AzimuthRoadRegion(bands)


@dataclass(frozen=True, eq=False)
class MaskRoadRegion:
    """Image-space road labels (0 off-road, 1 road, 2 small obstacle)."""

    mask: np.ndarray

    def __post_init__(self) -> None:
        mask = np.asarray(self.mask)
        if mask.ndim != 2:
            raise ValueError("road mask must be a single channel raster")
        if not np.isin(mask, (0, 1, 2)).all():
            raise ValueError("road mask labels must be 0, 1 or 2")
        object.__setattr__(self, "mask", mask)


RoadRegion = AzimuthRoadRegion | CurbRoadRegion | MaskRoadRegion


# ── Breakpoints ──


def predict_range(
    d_i: float, d_i1: float, theta: float, theta_next: float | None = None
) -> float:
    """Range expected at the third return if all three lie on one line.

    ``theta`` is the azimuth step (radians) between the first two returns and
    ``theta_next`` the step to the third; equal steps reduce to
    d_i * d_i1 / (2 * d_i * cos(theta) - d_i1).
    """
    if d_i <= 0 or d_i1 <= 0:
        raise DegenerateGeometryError(f"ranges must be positive, got {d_i}, {d_i1}")
    if theta_next is None:
        theta_next = theta
    denominator = _denominator(
        np.array([d_i]), np.array([d_i1]), np.array([theta]), np.array([theta_next])
    )[0]
    if not denominator > DENOMINATOR_EPS:
        raise DegenerateGeometryError(
            f"ray nearly tangent to the surface (denominator {denominator:.3g})"
        )
    return float(d_i * d_i1 / denominator)


def _denominator(
    d0: np.ndarray, d1: np.ndarray, t1: np.ndarray, t2: np.ndarray
) -> np.ndarray:
    equal = np.isclose(t1, t2, rtol=1e-12, atol=1e-15)
    with np.errstate(divide="ignore", invalid="ignore"):
        general = (d0 * np.sin(t1 + t2) - d1 * np.sin(t2)) / np.sin(t1)
    # the extrapolated line cannot be trusted across half a turn
    general = np.where((t1 > 0) & (t1 + t2 < np.pi), general, -np.inf)
    return np.where(equal, 2.0 * d0 * np.cos(t1) - d1, general)


def detect_breakpoints(
    ring: Ring,
    d_th: float,
    ring_index: int = 0,
    diagnostics: BreakpointDiagnostics | None = None,
) -> list[Breakpoint]:
    """Range discontinuities of one ring, ordered by azimuth.

    Every triplet is evaluated twice: forwards, predicting a return from the
    two before it, and backwards, predicting it from the two after it. A
    discontinuity sits in the gap between two returns and is reported on the
    return after the gap, with sign -1 when that return is closer than the
    surface it breaks away from and +1 when it is farther. The backward pass
    catches obstacle exits whose last returns lie on a receding side face,
    where the forward line extrapolates past the background. ``predicted``
    holds the forward prediction of the reported return (NaN for the first
    two).
    """
    if d_th <= 0:
        raise ValueError("d_th must be positive")
    n = len(ring)
    if n < 3:
        return []
    az, d = ring.azimuth, ring.range
    step = np.radians(np.diff(az))

    forward = _triplet_deviation(d[:-2], d[1:-1], step[:-1], step[1:], d[2:])
    backward = _triplet_deviation(d[2:], d[1:-1], step[1:], step[:-1], d[:-2])

    # gap g lies between returns g - 1 and g
    fwd_dev = np.full(n, np.nan)
    fwd_dev[2:] = forward
    bwd_dev = np.full(n, np.nan)
    bwd_dev[1:-1] = backward
    fwd_flag = np.abs(fwd_dev) >= d_th
    bwd_flag = np.abs(bwd_dev) >= d_th
    flagged = fwd_flag | bwd_flag

    # A gap without a real jump was only flagged because its predicting pair
    # straddled the neighbouring discontinuity.
    smooth = np.zeros(n, dtype=bool)
    smooth[1:] = np.abs(np.diff(d)) < d_th
    fwd_echo = np.zeros(n, dtype=bool)
    fwd_echo[1:] = fwd_flag[1:] & flagged[:-1] & smooth[1:]
    bwd_echo = np.zeros(n, dtype=bool)
    bwd_echo[:-1] = bwd_flag[:-1] & flagged[1:] & smooth[:-1]
    fwd_kept = fwd_flag & ~fwd_echo
    bwd_kept = bwd_flag & ~bwd_echo
    emitted = fwd_kept | bwd_kept
    sign = np.where(fwd_kept, np.sign(fwd_dev), -np.sign(bwd_dev))

    n_degenerate = int(np.isnan(forward).sum() + np.isnan(backward).sum())
    n_echo = int((flagged & ~emitted).sum())
    if diagnostics is not None:
        diagnostics.add(ring_index, n_degenerate, n_echo)
    if n_degenerate:
        logger.debug(f"ring {ring_index}: skipped {n_degenerate} degenerate triplets")

    return [
        Breakpoint(
            ring=ring_index,
            index=int(k),
            azimuth=float(az[k]),
            gradient_sign=int(sign[k]),
            range=float(d[k]),
            predicted=float(d[k] - fwd_dev[k]),
        )
        for k in np.flatnonzero(emitted)
    ]


def _triplet_deviation(
    d0: np.ndarray, d1: np.ndarray, t1: np.ndarray, t2: np.ndarray, d2: np.ndarray
) -> np.ndarray:
    """Observed minus predicted third range; NaN where the triplet is degenerate."""
    den = _denominator(d0, d1, t1, t2)
    degenerate = ~(den > DENOMINATOR_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(degenerate, np.nan, d2 - d0 * d1 / den)


def isolate_obstacle_segments(
    breakpoints: list[Breakpoint], ring: Ring, max_spread_deg: float
) -> list[ObstacleSegment]:
    segments = []
    opening: Breakpoint | None = None
    for bp in breakpoints:
        if bp.gradient_sign < 0:
            opening = bp
            continue
        if opening is None:
            continue
        if bp.azimuth - opening.azimuth <= max_spread_deg:
            segments.append(
                ObstacleSegment(
                    ring=opening.ring,
                    start=opening,
                    end=bp,
                    points=ring.slice(opening.index, bp.index + 1),
                )
            )
        opening = None
    return segments


# ── Road isolation ──


def detect_road_band(ring: Ring, curb_params: CurbParams) -> tuple[float, float]:
    """Azimuth interval of road around the forward direction, bounded by curbs.

    A curb is a run of returns raised at least ``height_jump`` above the road
    seen around the forward azimuth that persists for ``min_curb_span``
    degrees; shorter raised runs are obstacles standing on the road.
    """
    p = curb_params
    fov_lo = max(0.0, p.forward_azimuth - p.fov_half_width)
    fov_hi = min(np.nextafter(360.0, 0.0), p.forward_azimuth + p.fov_half_width)
    in_fov = (ring.azimuth >= fov_lo) & (ring.azimuth <= fov_hi)
    az = ring.azimuth[in_fov]
    z = ring.position[in_fov, 2]
    if len(az) == 0:
        return fov_lo, fov_hi

    seed = int(np.argmin(np.abs(az - p.forward_azimuth)))
    window = np.abs(az - p.forward_azimuth) <= p.seed_window
    road_height = float(np.median(z[window])) if window.any() else float(z[seed])
    elevated = z - road_height >= p.height_jump

    right = _curb_edge(az, elevated, seed, -1, p.min_curb_span)
    left = _curb_edge(az, elevated, seed, 1, p.min_curb_span)
    lo = fov_lo if right is None else float(az[min(right + 1, seed)])
    hi = fov_hi if left is None else float(az[max(left - 1, seed)])
    return lo, hi


def _curb_edge(
    az: np.ndarray, elevated: np.ndarray, seed: int, step: int, min_span: float
) -> int | None:
    n = len(az)
    k = seed
    while 0 <= k < n:
        if not elevated[k]:
            k += step
            continue
        j = k
        while 0 <= j + step < n and elevated[j + step]:
            j += step
        at_edge = not 0 <= j + step < n
        if at_edge or abs(az[j] - az[k]) >= min_span:
            return k
        k = j + step
    return None


def filter_segments_by_road(
    segments: list[ObstacleSegment],
    road: RoadRegion,
    camera: CameraModel | None = None,
    xi: ExtrinsicsSE3 | None = None,
) -> list[ObstacleSegment]:
    if isinstance(road, CurbRoadRegion):
        raise ConfigError("curb road regions must be resolved against a scan first")
    if isinstance(road, AzimuthRoadRegion):
        kept = []
        for seg in segments:
            band = road.bands.get(seg.ring)
            if band and band[0] <= seg.start.azimuth and seg.end.azimuth <= band[1]:
                kept.append(seg)
        return kept

    if camera is None or xi is None:
        raise ConfigError("mask road filtering needs camera intrinsics and extrinsics")
    if road.mask.shape != camera.shape:
        raise ConfigError(
            f"road mask {road.mask.shape} does not match camera {camera.shape}"
        )
    kept = []
    for seg in segments:
        projection = project_points(seg.points.position, camera, xi)
        cols, rows = camera.pixel_index(projection.pixels[projection.inside]).T
        on_road = np.isin(road.mask[rows, cols], ROAD_LABELS).sum()
        if 2 * on_road >= seg.n_points:
            kept.append(seg)
    return kept


def detect_scan(
    scan: RingScan,
    d_th: float = 0.4,
    max_spread: float = 2.0,
    road: RoadRegion | None = None,
    camera: CameraModel | None = None,
    xi: ExtrinsicsSE3 | None = None,
    diagnostics: BreakpointDiagnostics | None = None,
) -> list[ObstacleSegment]:
    if isinstance(road, CurbRoadRegion):
        road = road.bands_for(scan)
    segments = []
    for ring_index, ring in enumerate(scan.rings):
        breakpoints = detect_breakpoints(ring, d_th, ring_index, diagnostics)
        ring_segments = isolate_obstacle_segments(breakpoints, ring, max_spread)
        if road is not None:
            ring_segments = filter_segments_by_road(ring_segments, road, camera, xi)
        segments.extend(ring_segments)
    logger.debug(f"{len(segments)} obstacle segments over {len(scan.rings)} rings")
    return segments


# ── Reports ──


def format_segment_report(segments: list[ObstacleSegment]) -> list[str]:
    return [
        f"{s.ring} {s.start.azimuth:.4f} {s.end.azimuth:.4f} {s.n_points} "
        f"{s.spread:.4f} {s.min_range:.4f}"
        for s in segments
    ]

