import argparse
import logging
import re
import sys
from collections.abc import Callable
from pathlib import Path

from obsfusion.calibration import (
    RefinementAborted,
    build_calibration_frames,
    refine_extrinsics,
    rotation_error_deg,
    translation_error,
    write_refinement_log,
)
from obsfusion.cli import get_cli_args
from obsfusion.config import ConfigError, RunConfig, build_run_config, header_lines
from obsfusion.errors import DataFormatError, ObsFusionError
from obsfusion.metrics import evaluate, write_report
from obsfusion.pipeline import HEADER_FILE, PipelineProcessor, detect_frame
from obsfusion.scene_io import (
    load_calibration,
    load_mask,
    load_scan,
    load_scene,
    load_sequence,
    save_calibration,
    save_confidence_map,
    save_segments,
)
from obsfusion.simulator import simulate_sequence

logger = logging.getLogger(__name__)

IO_EXIT_CODE = 3
INPUT_ARGS = ("scene", "scan", "calib", "mask", "seq", "frames", "pred", "gt")
MASK_ID = re.compile(r"(\d+)\.png$")


def _header(cli: argparse.Namespace, config: RunConfig) -> list[str]:
    inputs = {
        name: str(getattr(cli, name)) if getattr(cli, name, None) is not None else None
        for name in INPUT_ARGS
    }
    return header_lines(config, cli.command, inputs)


def _write_header(directory: Path, header: list[str]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / HEADER_FILE, "wt") as fh:
        fh.writelines(line + "\n" for line in header)


def run_simulate(cli: argparse.Namespace, config: RunConfig) -> None:
    logger.info("Stage 1: Loading scene")
    scene = load_scene(cli.scene, cli.schema)
    logger.info(f"Stage 2: Simulating {scene.trajectory.n} frames into {cli.out}")
    manifest = simulate_sequence(scene, cli.out)
    _write_header(manifest.root, _header(cli, config))


def run_detect(cli: argparse.Namespace, config: RunConfig) -> None:
    logger.info("Stage 1: Loading inputs")
    scan = load_scan(cli.scan)
    camera, xi = load_calibration(cli.calib) if cli.calib else (None, None)
    mask = load_mask(cli.mask) if cli.mask else None
    if mask is not None and camera is None:
        raise ConfigError("--mask needs --calib to project segments")

    logger.info("Stage 2: Detecting obstacle segments")
    if camera is None or xi is None:
        from obsfusion.ring_geometry import CurbRoadRegion, detect_scan

        road = None if config.road == "none" else CurbRoadRegion(config.curb_params())
        if config.road == "mask":
            raise ConfigError("road=mask needs --mask and --calib")
        segments = detect_scan(scan, config.d_th, config.max_spread, road)
    else:
        segments = detect_frame(scan, config, camera, xi, mask).segments

    out = Path(cli.out)
    save_segments(segments, out, _header(cli, config))
    logger.info(f"Stage 3: Wrote {len(segments)} segments to {out}")


def run_confmap(cli: argparse.Namespace, config: RunConfig) -> None:
    logger.info("Stage 1: Loading inputs")
    scan = load_scan(cli.scan)
    camera, xi = load_calibration(cli.calib)
    mask = load_mask(cli.mask) if cli.mask else None

    logger.info("Stage 2: Detecting and rendering")
    detection = detect_frame(scan, config, camera, xi, mask)
    out = Path(cli.out)
    save_confidence_map(detection.confidence, out)
    _write_header(out.parent, _header(cli, config))
    logger.info(
        f"Stage 3: Wrote {out} from {len(detection.segments)} segments, "
        f"{len(detection.anchors)} anchors"
    )


def run_calibrate(cli: argparse.Namespace, config: RunConfig) -> None:
    logger.info("Stage 1: Loading sequence")
    manifest = load_sequence(cli.seq)
    camera, xi0 = manifest.calibration
    frame_ids = cli.frames or manifest.frame_ids
    records = [manifest.frame(i) for i in frame_ids]
    masks = [r.load_mask() for r in records]
    missing = [r.frame_id for r, m in zip(records, masks) if m is None]
    if missing:
        raise DataFormatError(f"frames {missing} have no annotation mask")

    logger.info(f"Stage 2: Building calibration sets from {len(records)} frames")
    frames = build_calibration_frames(
        [r.load_scan() for r in records],
        [m for m in masks if m is not None],
        frame_ids,
        config.d_th,
        config.max_spread,
    )

    logger.info(f"Stage 3: Refining extrinsics on {len(frames)} frames")
    header = _header(cli, config)
    try:
        report = refine_extrinsics(
            xi0,
            frames,
            camera,
            lr=config.lr,
            max_iters=config.max_iters,
            tol=config.tol,
            stall_window=config.stall_window,
            stall_delta=config.stall_delta,
            z_min=config.z_min,
        )
    except RefinementAborted as e:
        write_refinement_log(e.report, cli.report, header)
        raise

    save_calibration(camera, report.final_xi, cli.out)
    write_refinement_log(report, cli.report, header)
    logger.info(
        f"Stage 4: Moved {rotation_error_deg(xi0, report.final_xi):.4f} deg, "
        f"{translation_error(xi0, report.final_xi):.4f} m; wrote {cli.out}"
    )


def _masks_by_id(directory: str) -> dict[int, Path]:
    found: dict[int, Path] = {}
    for path in sorted(Path(directory).glob("*.png")):
        match = MASK_ID.search(path.name)
        if match:
            found[int(match.group(1))] = path
    if not Path(directory).is_dir():
        raise FileNotFoundError(f"No such directory: {directory}")
    return found


def run_evaluate(cli: argparse.Namespace, config: RunConfig) -> None:
    logger.info("Stage 1: Pairing masks")
    preds = _masks_by_id(cli.pred)
    gts = _masks_by_id(cli.gt)
    if set(preds) != set(gts):
        unpaired = sorted(set(preds) ^ set(gts))
        raise DataFormatError(f"frames {unpaired} lack a prediction or ground truth")
    ids = sorted(gts)

    logger.info(f"Stage 2: Scoring {len(ids)} frames")
    report = evaluate(
        [load_mask(preds[i]) for i in ids],
        [load_mask(gts[i]) for i in ids],
        config.min_area,
        config.overlap_threshold,
    )
    write_report(report, cli.report, _header(cli, config))
    logger.info(f"Stage 3: IDR {report.idr:.4f} mIoU {report.miou:.4f}")


def run_pipeline(cli: argparse.Namespace, config: RunConfig) -> None:
    manifest = load_sequence(cli.seq)
    PipelineProcessor(manifest, config, Path(cli.out), _header(cli, config)).run()


COMMANDS: dict[str, Callable[[argparse.Namespace, RunConfig], None]] = {
    "simulate": run_simulate,
    "detect": run_detect,
    "confmap": run_confmap,
    "calibrate": run_calibrate,
    "evaluate": run_evaluate,
    "pipeline": run_pipeline,
}


def run(argv: list[str] | None = None) -> int:
    try:
        cli = get_cli_args().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if cli.verbose:
        logging.basicConfig(level=logging.DEBUG)
    else:
        logging.basicConfig(level=logging.INFO)

    try:
        config = build_run_config(cli, cli.schema)
        COMMANDS[cli.command](cli, config)
    except ObsFusionError as e:
        logger.error(f"{cli.command}: {type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"{cli.command}: {type(e).__name__}: {e}")
        return IO_EXIT_CODE
    return 0


def run_cli() -> None:
    sys.exit(run(sys.argv[1:]))
