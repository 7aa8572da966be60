"""Extrinsic refinement against annotated obstacle pixels.

The loss of a frame is the directed Hausdorff distance from the projected
obstacle points to the labelled obstacle pixels, each pixel taken as its
unit cell. Frames are averaged and the 6-vector xi is refined with Adam on
central-difference gradients of the signed continuation of that loss.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import distance

from obsfusion.errors import NumericalError
from obsfusion.models import CameraModel, ExtrinsicsSE3, RefinementReport
from obsfusion.projection import Z_MIN, exp_so3, geodesic_angle
from obsfusion.ring_geometry import RingScan, detect_scan

logger = logging.getLogger(__name__)

DEFAULT_STEPS = np.array([1e-4, 1e-4, 1e-4, 1e-5, 1e-5, 1e-5])
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
OBSTACLE_LABEL = 2

_NEIGHBOURS = np.array([(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)])


class EmptySetError(NumericalError):
    pass


class FrameDegenerateError(NumericalError):
    def __init__(self, frame_id: int) -> None:
        self.frame_id = frame_id
        super().__init__(f"frame {frame_id}: every obstacle point is behind the camera")


class GradientError(NumericalError):
    def __init__(self, coordinate: int) -> None:
        self.coordinate = coordinate
        super().__init__(f"non-finite loss probing xi[{coordinate}]")


class RefinementAborted(NumericalError):
    """Raised with the trace gathered before a frame or gradient failure."""

    def __init__(self, cause: NumericalError, report: RefinementReport) -> None:
        self.report = report
        super().__init__(
            f"refinement aborted after {report.iterations} iterations: {cause}"
        )


@dataclass(frozen=True, eq=False)
class CalibrationFrame:
    """
    Attributes:
        points: (n, 3) obstacle points in the LiDAR frame.
        pixels: (m, 2) integer (column, row) of labelled obstacle pixels.
        shape: (rows, columns) of the annotated image.
    """

    points: np.ndarray
    pixels: np.ndarray
    shape: tuple[int, int]
    frame_id: int = 0

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        if len(points) == 0 or len(pixels) == 0:
            raise EmptySetError(
                f"frame {self.frame_id}: needs obstacle points and labelled pixels"
            )
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "pixels", pixels)

    @classmethod
    def from_mask(
        cls, points: np.ndarray, mask: np.ndarray, frame_id: int = 0
    ) -> "CalibrationFrame":
        rows, cols = np.nonzero(np.asarray(mask) == OBSTACLE_LABEL)
        return cls(points, np.stack([cols, rows], axis=1), mask.shape, frame_id)

    def label_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[self.pixels[:, 1], self.pixels[:, 0]] = True
        return mask


def directed_hausdorff(p1: np.ndarray, p2: np.ndarray) -> float:
    p1 = np.asarray(p1, dtype=float).reshape(-1, 2)
    p2 = np.asarray(p2, dtype=float).reshape(-1, 2)
    if len(p1) == 0 or len(p2) == 0:
        raise EmptySetError("directed Hausdorff distance of an empty set")
    return float(distance.directed_hausdorff(p1, p2)[0])


class HausdorffObjective:
    """Mean directed Hausdorff loss over frames, for many xi at once.

    Each frame's labelled cells are indexed once through a Euclidean
    distance transform that stores, per pixel, its nearest labelled pixel.
    A projected point is scored against the nearest labelled pixels of the
    3 x 3 pixels around it, measuring the distance to each labelled unit
    cell, so a point inside a labelled pixel scores exactly 0.

    The unlabelled cells are indexed the same way, which gives every point
    inside the labels its clearance. ``signed_losses`` continues a frame's
    loss below zero once all of its points are contained, as minus the
    smallest clearance; above zero it equals the Hausdorff loss.
    """

    def __init__(
        self, frames: list[CalibrationFrame], camera: CameraModel, z_min: float = Z_MIN
    ) -> None:
        if not frames:
            raise EmptySetError("no calibration frames")
        for frame in frames:
            if frame.shape != camera.shape:
                raise ValueError(
                    f"frame {frame.frame_id} mask {frame.shape} does not match "
                    f"camera {camera.shape}"
                )
        self.camera = camera
        self.z_min = z_min
        self.frame_ids = [f.frame_id for f in frames]
        self.points = np.concatenate([f.points for f in frames])
        counts = np.array([len(f.points) for f in frames])
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

        # grids carry a one pixel unlabelled border so clearance stops at the edge
        height, width = camera.shape
        self.grid_width = width + 2
        grid_size = (height + 2) * self.grid_width
        self.offset = np.repeat(np.arange(len(frames)) * grid_size, counts)
        tables: dict[bool, list[np.ndarray]] = {True: [], False: []}
        for frame in frames:
            labelled = np.pad(frame.label_mask(), 1)
            for target in (True, False):
                _, indices = ndimage.distance_transform_edt(
                    labelled != target, return_indices=True
                )
                tables[target].append(indices.reshape(2, -1) - 1)
        self.labelled = np.concatenate(tables[True], axis=1)
        self.unlabelled = np.concatenate(tables[False], axis=1)

    def evaluate(self, xis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Hausdorff losses and signed losses of each row of ``xis``."""
        xis = np.asarray(xis, dtype=float).reshape(-1, 6)
        rotations = np.stack([exp_so3(x[3:]) for x in xis])
        p_cam = np.einsum("kij,nj->kni", rotations, self.points) + xis[:, None, :3]
        front = p_cam[:, :, 2] > self.z_min

        in_front = np.add.reduceat(front.astype(np.int64), self.starts, axis=1)
        if (in_front == 0).any():
            _, f = np.argwhere(in_front == 0)[0]
            raise FrameDegenerateError(self.frame_ids[f])

        cam = self.camera
        z = np.where(front, p_cam[:, :, 2], 1.0)
        px = cam.fx * p_cam[:, :, 0] / z + cam.cx
        py = cam.fy * p_cam[:, :, 1] / z + cam.cy
        outside, clearance = self._cell_distance(px, py)
        outside = np.maximum.reduceat(
            np.where(front, outside, 0.0), self.starts, axis=1
        )
        clearance = np.minimum.reduceat(
            np.where(front, clearance, np.inf), self.starts, axis=1
        )
        signed = np.where(outside > 0.0, outside, -clearance)
        return outside.mean(axis=1), signed.mean(axis=1)

    def losses(self, xis: np.ndarray) -> np.ndarray:
        return self.evaluate(xis)[0]

    def signed_losses(self, xis: np.ndarray) -> np.ndarray:
        return self.evaluate(xis)[1]

    def _cell_distance(
        self, px: np.ndarray, py: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Distance to the nearest labelled and to the nearest unlabelled cell."""
        height, width = self.camera.shape
        finite = np.isfinite(px) & np.isfinite(py)
        px = np.where(finite, px, np.inf)
        py = np.where(finite, py, np.inf)
        col = np.floor(np.clip(px, -1.0, width) + 0.5).astype(np.int64)
        row = np.floor(np.clip(py, -1.0, height) + 0.5).astype(np.int64)

        outside = np.full(px.shape, np.inf)
        clearance = np.full(px.shape, np.inf)
        for dr, dc in _NEIGHBOURS:
            r = np.clip(row + dr, -1, height)
            c = np.clip(col + dc, -1, width)
            cell = self.offset + (r + 1) * self.grid_width + (c + 1)
            for table, best in ((self.labelled, outside), (self.unlabelled, clearance)):
                qr = np.take(table[0], cell)
                qc = np.take(table[1], cell)
                dx = np.maximum(np.abs(px - qc) - 0.5, 0.0)
                dy = np.maximum(np.abs(py - qr) - 0.5, 0.0)
                np.minimum(best, np.hypot(dx, dy), out=best)
        return outside, clearance

    def loss(self, xi: ExtrinsicsSE3 | np.ndarray) -> float:
        vector = xi.vector() if isinstance(xi, ExtrinsicsSE3) else xi
        return float(self.losses(vector)[0])


def hausdorff_loss(
    xi: ExtrinsicsSE3,
    frames: list[CalibrationFrame],
    camera: CameraModel,
    z_min: float = Z_MIN,
) -> float:
    return HausdorffObjective(frames, camera, z_min).loss(xi)


def _stencil(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    steps = np.diag(h)
    return np.vstack([x[None, :], x + steps, x - steps])


def _central_difference(values: np.ndarray, h: np.ndarray) -> np.ndarray:
    for i in range(6):
        if not (np.isfinite(values[1 + i]) and np.isfinite(values[7 + i])):
            raise GradientError(i)
    return (values[1:7] - values[7:13]) / (2.0 * h)


def numeric_gradient(
    xi: ExtrinsicsSE3,
    frames: list[CalibrationFrame],
    camera: CameraModel,
    h: np.ndarray = DEFAULT_STEPS,
    z_min: float = Z_MIN,
) -> np.ndarray:
    objective = HausdorffObjective(frames, camera, z_min)
    h = np.asarray(h, dtype=float)
    return _central_difference(objective.losses(_stencil(xi.vector(), h)), h)


def refine_extrinsics(
    xi0: ExtrinsicsSE3,
    frames: list[CalibrationFrame],
    camera: CameraModel,
    lr: float = 1e-5,
    max_iters: int = 20000,
    tol: float = 1e-9,
    stall_window: int = 50,
    stall_delta: float = 1e-9,
    h: np.ndarray = DEFAULT_STEPS,
    z_min: float = Z_MIN,
) -> RefinementReport:
    """Adam on the signed Hausdorff loss; returns the best iterate.

    Refinement stops once the Hausdorff loss falls below ``tol``, that is
    when every frame's points are contained in its labels. Until then frames
    that are already contained keep pulling their points away from the label
    boundary, so the estimate settles inside the region of xi consistent
    with every frame rather than on its rim.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    objective = HausdorffObjective(frames, camera, z_min)
    h = np.asarray(h, dtype=float)
    x = xi0.vector()
    m = np.zeros(6)
    v = np.zeros(6)
    trace: list[float] = []
    signed_trace: list[float] = []
    best_trace: list[float] = []
    best_x = x.copy()
    best_iteration = 0
    stop_reason = "max_iters"
    iteration = 0

    def report(reason: str) -> RefinementReport:
        initial = trace[0] if trace else float("nan")
        final = trace[best_iteration - 1] if best_iteration else float("nan")
        return RefinementReport(
            initial_xi=xi0,
            final_xi=ExtrinsicsSE3.from_vector(best_x),
            initial_loss=initial,
            final_loss=final,
            loss_trace=trace or [float("nan")],
            objective_trace=signed_trace or [float("nan")],
            best_iteration=best_iteration,
            iterations=iteration,
            converged=reason in ("tolerance", "stalled") and final <= initial,
            stop_reason=reason,
        )

    try:
        for iteration in range(1, max_iters + 1):
            losses, signed = objective.evaluate(_stencil(x, h))
            grad = _central_difference(signed, h)
            loss, value = float(losses[0]), float(signed[0])
            trace.append(loss)
            signed_trace.append(value)
            if not best_trace or value < best_trace[-1]:
                best_x = x.copy()
                best_iteration = iteration
                best_trace.append(value)
            else:
                best_trace.append(best_trace[-1])

            if loss < tol:
                stop_reason = "tolerance"
                break
            if (
                iteration > stall_window
                and best_trace[-stall_window - 1] - best_trace[-1] < stall_delta
            ):
                stop_reason = "stalled"
                break

            m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * grad
            v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * grad * grad
            m_hat = m / (1 - ADAM_BETA1**iteration)
            v_hat = v / (1 - ADAM_BETA2**iteration)
            x = x - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
            if iteration % 1000 == 0:
                logger.debug(
                    f"iteration {iteration}: loss {loss:.6f} signed {value:.6f}"
                )
    except (FrameDegenerateError, GradientError) as e:
        raise RefinementAborted(e, report("error")) from e

    result = report(stop_reason)
    logger.info(
        f"Refinement stopped ({stop_reason}) after {iteration} iterations: "
        f"loss {result.initial_loss:.4f} -> {result.final_loss:.4f}"
    )
    return result


def build_calibration_frames(
    scans: list[RingScan],
    masks: list[np.ndarray],
    frame_ids: list[int] | None = None,
    d_th: float = 0.4,
    max_spread: float = 2.0,
) -> list[CalibrationFrame]:
    """Pair detected obstacle points with the label-2 pixels of each frame."""
    frame_ids = frame_ids if frame_ids is not None else list(range(len(scans)))
    frames = []
    for frame_id, scan, mask in zip(frame_ids, scans, masks, strict=True):
        segments = detect_scan(scan, d_th, max_spread)
        if not segments or not (np.asarray(mask) == OBSTACLE_LABEL).any():
            logger.info(f"frame {frame_id}: no obstacle points or pixels, skipped")
            continue
        points = np.concatenate([s.obstacle_points for s in segments])
        frames.append(CalibrationFrame.from_mask(points, mask, frame_id))
    return frames


def rotation_error_deg(a: ExtrinsicsSE3, b: ExtrinsicsSE3) -> float:
    return float(
        np.degrees(
            geodesic_angle(exp_so3(np.asarray(a.omega)), exp_so3(np.asarray(b.omega)))
        )
    )


def translation_error(a: ExtrinsicsSE3, b: ExtrinsicsSE3) -> float:
    return float(np.linalg.norm(np.asarray(a.nu) - np.asarray(b.nu)))


def write_refinement_log(
    report: RefinementReport, path: str | Path, header: list[str] | None = None
) -> Path:
    """Iteration, Hausdorff loss and signed loss per line, after ``#`` headers."""
    path = Path(path)
    initial = " ".join(repr(float(v)) for v in report.initial_xi.vector())
    final = " ".join(repr(float(v)) for v in report.final_xi.vector())
    with open(path, "wt") as fh:
        for line in header or []:
            fh.write(f"# {line}\n")
        fh.write(f"# stop_reason={report.stop_reason} converged={report.converged}\n")
        fh.write(f"# initial_xi={initial}\n")
        fh.write(f"# final_xi={final}\n")
        fh.write(f"# best_iteration={report.best_iteration}\n")
        fh.write("# iteration loss signed\n")
        rows = zip(report.loss_trace, report.objective_trace)
        for i, (loss, signed) in enumerate(rows, start=1):
            fh.write(f"{i} {loss:.9f} {signed:.9f}\n")
    return path
