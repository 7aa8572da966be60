import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from obsfusion.config import ConfigError, RunConfig
from obsfusion.metrics import evaluate, prediction_from_confidence, write_report
from obsfusion.models import CameraModel, ExtrinsicsSE3
from obsfusion.projection import (
    ConfidenceMap,
    Projection,
    project_points,
    render_confidence_map,
)
from obsfusion.ring_geometry import (
    BreakpointDiagnostics,
    CurbRoadRegion,
    MaskRoadRegion,
    ObstacleSegment,
    RingScan,
    RoadRegion,
    detect_scan,
)
from obsfusion.scene_io import (
    FrameRecord,
    SequenceManifest,
    save_confidence_map,
    save_mask,
    save_segments,
)
from obsfusion.temporal import (
    DetectionMemory,
    TemporalDiagnostics,
    propagate_and_aggregate,
    update_memory,
)

logger = logging.getLogger(__name__)

SEGMENTS_PATTERN = "segments_{:06d}.txt"
CONFMAP_PATTERN = "confmap_{:06d}.png"
PRED_PATTERN = "pred_{:06d}.png"
METRICS_FILE = "metrics.txt"
HEADER_FILE = "run_header.txt"


@dataclass(frozen=True, eq=False)
class FrameDetection:
    frame_id: int
    segments: list[ObstacleSegment]
    anchors: Projection
    confidence: ConfidenceMap


def resolve_road(
    config: RunConfig,
    road_mask: np.ndarray | None,
    camera: CameraModel | None,
    xi: ExtrinsicsSE3 | None,
) -> RoadRegion | None:
    """Pick the road region a run filters segments with."""
    match config.road:
        case "none":
            return None
        case "curb":
            return CurbRoadRegion(config.curb_params())
        case "mask":
            if road_mask is None or camera is None or xi is None:
                raise ConfigError("road=mask needs a road mask and a calibration")
            return MaskRoadRegion(road_mask)
        case _:
            if road_mask is not None and camera is not None and xi is not None:
                return MaskRoadRegion(road_mask)
            return CurbRoadRegion(config.curb_params())


def segment_anchors(
    segments: list[ObstacleSegment],
    camera: CameraModel,
    xi: ExtrinsicsSE3,
    z_min: float = 0.1,
) -> Projection:
    if not segments:
        return project_points(np.empty((0, 3)), camera, xi, z_min=z_min)
    points = np.concatenate([s.points.position for s in segments])
    source = np.concatenate([np.full(s.n_points, i) for i, s in enumerate(segments)])
    return project_points(points, camera, xi, source=source, z_min=z_min)


def detect_frame(
    scan: RingScan,
    config: RunConfig,
    camera: CameraModel,
    xi: ExtrinsicsSE3,
    road_mask: np.ndarray | None = None,
    frame_id: int = 0,
) -> FrameDetection:
    """Segments, their projected anchors and the frame's own confidence map."""
    diagnostics = BreakpointDiagnostics()
    segments = detect_scan(
        scan,
        config.d_th,
        config.max_spread,
        resolve_road(config, road_mask, camera, xi),
        camera,
        xi,
        diagnostics,
    )
    anchors = segment_anchors(segments, camera, xi, config.z_min)
    logger.debug(
        f"frame {frame_id}: {len(segments)} segments, {diagnostics.degenerate} "
        f"degenerate triplets, {diagnostics.echoes} echoes, {anchors.culled} culled"
    )
    return FrameDetection(
        frame_id,
        segments,
        anchors,
        render_confidence_map(anchors, config.sigma, camera),
    )


class PipelineProcessor:
    """Runs detection, confidence maps, temporal aggregation and scoring over a
    sequence, writing one set of artifacts per frame.

    Detection is independent per frame and runs on ``config.jobs`` threads;
    temporal aggregation needs the frames in order and runs on the caller's
    thread. Artifacts are keyed by frame id so the thread count never
    changes what is written.

    Attributes:
        - manifest: SequenceManifest of the input sequence
        - config: RunConfig with every tunable
        - out_dir: Path where artifacts are written
        - header: list[str] reproducibility lines written at the top of reports
    """

    def __init__(
        self,
        manifest: SequenceManifest,
        config: RunConfig,
        out_dir: Path,
        header: list[str],
    ):
        self.manifest = manifest
        self.config = config
        self.out_dir = out_dir
        self.header = header
        self.camera, self.xi = manifest.calibration

    def run(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / HEADER_FILE, "wt") as fh:
            fh.writelines(line + "\n" for line in self.header)

        n_frames = len(self.manifest.frames)
        logger.info(f"Stage 1: Detecting obstacles in {n_frames} frames")
        with ThreadPoolExecutor(max_workers=self.config.jobs) as pool:
            detections = list(pool.map(self.detect, self.manifest.frames))

        logger.info(f"Stage 2: Temporal aggregation ({self.config.temporal_method})")
        confidences = self.aggregate(detections)

        if not self.manifest.has_masks:
            logger.info("Stage 3: No ground-truth masks, skipping evaluation")
            return
        logger.info("Stage 3: Scoring predictions")
        self.score(confidences)

    def detect(self, record: FrameRecord) -> FrameDetection:
        detection = detect_frame(
            record.load_scan(),
            self.config,
            self.camera,
            self.xi,
            record.load_mask(),
            record.frame_id,
        )
        save_segments(
            detection.segments,
            self.out_dir / SEGMENTS_PATTERN.format(record.frame_id),
            self.header + [f"frame={record.frame_id}"],
        )
        return detection

    def aggregate(self, detections: list[FrameDetection]) -> list[ConfidenceMap]:
        settings = self.config.temporal_settings()
        memory = DetectionMemory(settings.k)
        diagnostics = TemporalDiagnostics()
        confidences = []
        for record, detection in zip(self.manifest.frames, detections, strict=True):
            image = record.load_image()
            confidence = propagate_and_aggregate(
                detection.confidence,
                memory,
                image,
                record.pose,
                self.camera,
                self.xi,
                self.config.sigma,
                settings,
                current_anchors=detection.anchors.pixels,
                diagnostics=diagnostics,
            )
            update_memory(
                memory,
                detection.segments,
                image,
                record.pose,
                record.frame_id,
                self.camera,
                self.xi,
                settings,
            )
            save_confidence_map(
                confidence, self.out_dir / CONFMAP_PATTERN.format(record.frame_id)
            )
            confidences.append(confidence)
        logger.info(
            f"Temporal: {diagnostics.accepted_matches} accepted, "
            f"{diagnostics.rejected_matches} rejected, "
            f"{diagnostics.degenerate_matches} degenerate matches, "
            f"{diagnostics.forward_splats} forward splats, "
            f"{diagnostics.redetected} re-detected"
        )
        return confidences

    def score(self, confidences: list[ConfidenceMap]) -> None:
        preds, gts = [], []
        for record, confidence in zip(self.manifest.frames, confidences, strict=True):
            gt = record.load_mask()
            assert gt is not None
            pred = prediction_from_confidence(
                confidence, gt, self.config.confidence_threshold
            )
            save_mask(pred, self.out_dir / PRED_PATTERN.format(record.frame_id))
            preds.append(pred)
            gts.append(gt)
        report = evaluate(
            preds, gts, self.config.min_area, self.config.overlap_threshold
        )
        write_report(report, self.out_dir / METRICS_FILE, self.header)
