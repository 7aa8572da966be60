import argparse

from obsfusion.config import SCHEMA_DIR, defaults_table

DESCRIPTION = (
    "Small road obstacle detection from 16-ring LiDAR scans, fused into camera "
    "confidence maps, with extrinsic refinement and segmentation metrics"
)

EXIT_CODES = """exit codes:
  0  success
  2  usage or configuration error
  3  I/O error
  4  malformed input data
  5  numerical or degenerate geometry error"""


def _add_common(cli: argparse.ArgumentParser) -> None:
    cli.add_argument(
        "-c",
        "--config",
        help="Run configuration file (JSON, JSON5, or YAML); flags override it",
    )
    cli.add_argument(
        "--schema",
        default=str(SCHEMA_DIR),
        help="JSON Schema directory to validate input",
    )
    cli.add_argument("-v", "--verbose", action="store_true", help="Be chatty")
    cli.add_argument("--jobs", type=int, help="Worker threads for per-frame work")


def _add_detection(cli: argparse.ArgumentParser) -> None:
    group = cli.add_argument_group("detection")
    group.add_argument(
        "--d-th", dest="d_th", type=float, help="Breakpoint threshold (m)"
    )
    group.add_argument(
        "--max-spread", dest="max_spread", type=float, help="Max segment spread (deg)"
    )
    group.add_argument(
        "--road", choices=["auto", "curb", "mask", "none"], help="Road filter"
    )
    group.add_argument(
        "--curb-jump", dest="curb_jump", type=float, help="Curb height jump (m)"
    )
    group.add_argument(
        "--forward-azimuth", dest="forward_azimuth", type=float, help="Forward azimuth"
    )
    group.add_argument("--sigma", type=float, help="Gaussian sigma (px)")


def _add_temporal(cli: argparse.ArgumentParser) -> None:
    group = cli.add_argument_group("temporal")
    group.add_argument(
        "--temporal-method",
        dest="temporal_method",
        choices=["template", "forward", "none"],
        help="How past detections are carried forward",
    )
    group.add_argument("--temporal-k", dest="temporal_k", type=int, help="Frames kept")
    group.add_argument(
        "--template-size", dest="template_size", type=int, help="Template side (px)"
    )
    group.add_argument(
        "--search-radius", dest="search_radius", type=int, help="Search radius (px)"
    )
    group.add_argument(
        "--ncc-threshold", dest="ncc_threshold", type=float, help="NCC acceptance"
    )
    group.add_argument(
        "--merge-radius", dest="merge_radius", type=float, help="Merge radius (px)"
    )
    group.add_argument(
        "--channel", choices=["luma", "red", "green", "blue"], help="Matching channel"
    )


def _add_evaluation(cli: argparse.ArgumentParser) -> None:
    group = cli.add_argument_group("evaluation")
    group.add_argument(
        "--min-area", dest="min_area", type=int, help="Min instance area"
    )
    group.add_argument(
        "--overlap-threshold", dest="overlap_threshold", type=float, help="TP overlap"
    )
    group.add_argument(
        "--confidence-threshold",
        dest="confidence_threshold",
        type=float,
        help="Confidence marking a pixel as obstacle",
    )


def _frame_ids(value: str) -> list[int]:
    try:
        return [int(v) for v in value.replace(",", " ").split()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(
            f"frame ids must be integers: {value!r}"
        ) from e


def get_cli_args() -> argparse.ArgumentParser:
    """
    CLI arguments object
    """
    cli = argparse.ArgumentParser(
        prog="obsfusion",
        description=DESCRIPTION,
        epilog=f"{defaults_table()}\n\n{EXIT_CODES}",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    commands = cli.add_subparsers(dest="command", required=True, metavar="command")

    def command(name: str, help: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(
            name,
            help=help,
            description=help,
            epilog=f"{defaults_table()}\n\n{EXIT_CODES}",
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        _add_common(sub)
        return sub

    simulate = command("simulate", "Ray-cast a synthetic sequence from a scene file")
    simulate.add_argument(
        "--scene", required=True, help="Scene (txt, JSON, JSON5, YAML)"
    )
    simulate.add_argument("--out", required=True, help="Output sequence directory")

    detect = command("detect", "Write the obstacle segments of one scan")
    detect.add_argument("--scan", required=True, help="SCAN v1 file")
    detect.add_argument("--calib", help="Calibration file (needed for mask filtering)")
    detect.add_argument("--mask", help="Road mask PNG for image-space road filtering")
    detect.add_argument("--out", default="segments.txt", help="Segment report path")
    _add_detection(detect)

    confmap = command("confmap", "Render the confidence map of one scan")
    confmap.add_argument("--scan", required=True, help="SCAN v1 file")
    confmap.add_argument("--calib", required=True, help="Calibration file")
    confmap.add_argument("--mask", help="Road mask PNG for image-space road filtering")
    confmap.add_argument("--out", default="confmap.png", help="16-bit PNG path")
    _add_detection(confmap)

    calibrate = command("calibrate", "Refine LiDAR-camera extrinsics on a sequence")
    calibrate.add_argument("--seq", required=True, help="Sequence directory")
    calibrate.add_argument(
        "--frames", type=_frame_ids, help="Frame ids to use, e.g. 0,3,7 (default all)"
    )
    calibrate.add_argument(
        "--out", default="refined_calib.txt", help="Refined calibration"
    )
    calibrate.add_argument(
        "--report", default="refinement.txt", help="Iteration/loss log"
    )
    calibrate.add_argument("--lr", type=float, help="Adam learning rate")
    calibrate.add_argument(
        "--max-iters", dest="max_iters", type=int, help="Iteration cap"
    )
    calibrate.add_argument("--tol", type=float, help="Loss tolerance (px)")
    _add_detection(calibrate)

    evaluate = command("evaluate", "Score predicted masks against ground truth")
    evaluate.add_argument("--pred", required=True, help="Directory of predicted masks")
    evaluate.add_argument("--gt", required=True, help="Directory of ground-truth masks")
    evaluate.add_argument("--report", default="report.txt", help="Metrics report path")
    _add_evaluation(evaluate)

    pipeline = command("pipeline", "Detect, fuse, aggregate and score a sequence")
    pipeline.add_argument("--seq", required=True, help="Sequence directory")
    pipeline.add_argument("--out", required=True, help="Output directory")
    _add_detection(pipeline)
    _add_temporal(pipeline)
    _add_evaluation(pipeline)

    return cli
