"""Instance and pixel metrics for 3-class road masks.

IDR   detected ground-truth obstacle instances / ground-truth instances
iFDR  predicted instances touching no ground-truth obstacle / predictions
PDR   correctly predicted obstacle pixels / ground-truth obstacle pixels
mIoU  mean over classes of TPX / (TPX + FPX + FNX)

Every count is pooled over the whole dataset before dividing.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from obsfusion.errors import DataFormatError
from obsfusion.models import MetricsReport
from obsfusion.projection import ConfidenceMap

logger = logging.getLogger(__name__)

CLASSES = (0, 1, 2)
CLASS_NAMES = ("off_road", "road", "obstacle")
OBSTACLE = 2
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class InstanceSet:
    """
    Connected components of one class.

    Attributes:
        labels: raster of instance ids, 0 outside every instance; ids follow
            the row-major order of each instance's first pixel.
        class_pixels: every pixel of the class, including dropped blobs.
    """

    labels: np.ndarray
    class_pixels: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape  # type: ignore[return-value]

    def __len__(self) -> int:
        return int(self.labels.max(initial=0))

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=len(self) + 1)[1:]

    def instances(self) -> list[set[tuple[int, int]]]:
        """Pixel (row, column) sets, one per instance."""
        out: list[set[tuple[int, int]]] = [set() for _ in range(len(self))]
        for r, c in zip(*np.nonzero(self.labels)):
            out[self.labels[r, c] - 1].add((int(r), int(c)))
        return out


@dataclass(frozen=True)
class InstanceMatch:
    true_positives: int
    false_positives: int
    detected: np.ndarray


def extract_instances(
    mask: np.ndarray, class_label: int = OBSTACLE, min_area: int = 3
) -> InstanceSet:
    class_pixels = np.asarray(mask) == class_label
    labeled, n = ndimage.label(class_pixels, structure=EIGHT_CONNECTED)
    sizes = np.bincount(labeled.ravel(), minlength=n + 1)
    keep = sizes >= min_area
    keep[0] = False
    new_ids = np.cumsum(keep) * keep
    return InstanceSet(new_ids[labeled].astype(np.int32), class_pixels)


def match_instances(
    pred: InstanceSet, gt: InstanceSet, overlap_threshold: float = 0.2
) -> InstanceMatch:
    if pred.shape != gt.shape:
        raise DataFormatError(f"mask sizes differ: {pred.shape} vs {gt.shape}")
    n_pred, n_gt = len(pred), len(gt)
    joint = np.bincount(
        (pred.labels.astype(np.int64) * (n_gt + 1) + gt.labels).ravel(),
        minlength=(n_pred + 1) * (n_gt + 1),
    ).reshape(n_pred + 1, n_gt + 1)[1:, 1:]
    touches_gt = np.bincount(
        pred.labels[gt.class_pixels], minlength=n_pred + 1
    )[1:]

    sizes = pred.sizes
    ratios = joint / np.maximum(sizes, 1)[:, None]
    is_tp = (ratios > overlap_threshold).any(axis=1) if n_gt else np.zeros(n_pred, bool)
    is_fp = touches_gt == 0
    detected = ((joint > 0) & is_tp[:, None]).any(axis=0)
    return InstanceMatch(int(is_tp.sum()), int(is_fp.sum()), detected)


def _fraction(num: int, den: int) -> float:
    return num / den if den else float("nan")


def evaluate(
    pred_masks: list[np.ndarray],
    gt_masks: list[np.ndarray],
    min_area: int = 3,
    overlap_threshold: float = 0.2,
) -> MetricsReport:
    if len(pred_masks) != len(gt_masks):
        raise DataFormatError(
            f"{len(pred_masks)} predictions for {len(gt_masks)} ground-truth masks"
        )
    tp = fp = predicted = detected = total = 0
    tpx = np.zeros(3, dtype=np.int64)
    fpx = np.zeros(3, dtype=np.int64)
    fnx = np.zeros(3, dtype=np.int64)

    for index, (pred, gt) in enumerate(zip(pred_masks, gt_masks)):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise DataFormatError(
                f"pair {index}: prediction {pred.shape} vs ground truth {gt.shape}"
            )
        pred_instances = extract_instances(pred, OBSTACLE, min_area)
        gt_instances = extract_instances(gt, OBSTACLE, min_area)
        match = match_instances(pred_instances, gt_instances, overlap_threshold)
        tp += match.true_positives
        fp += match.false_positives
        predicted += len(pred_instances)
        detected += int(match.detected.sum())
        total += len(gt_instances)
        for c in CLASSES:
            p, g = pred == c, gt == c
            tpx[c] += int((p & g).sum())
            fpx[c] += int((p & ~g).sum())
            fnx[c] += int((~p & g).sum())

    undefined = []
    idr = _fraction(detected, total)
    if math.isnan(idr):
        undefined.append("idr: no ground-truth obstacle instances")
    ifdr = _fraction(fp, predicted)
    if math.isnan(ifdr):
        undefined.append("ifdr: no predicted obstacle instances")
    pdr = _fraction(int(tpx[OBSTACLE]), int(tpx[OBSTACLE] + fnx[OBSTACLE]))
    if math.isnan(pdr):
        undefined.append("pdr: no ground-truth obstacle pixels")
    ious = []
    for c in CLASSES:
        iou = _fraction(int(tpx[c]), int(tpx[c] + fpx[c] + fnx[c]))
        if math.isnan(iou):
            undefined.append(f"iou_{CLASS_NAMES[c]}: class absent everywhere")
        ious.append(iou)
    defined = [v for v in ious if not math.isnan(v)]
    miou = sum(defined) / len(defined) if defined else float("nan")
    if not defined:
        undefined.append("miou: no class present")

    return MetricsReport(
        idr=idr,
        ifdr=ifdr,
        pdr=pdr,
        miou=miou,
        class_iou=(ious[0], ious[1], ious[2]),
        true_positive_instances=tp,
        false_positive_instances=fp,
        predicted_instances=predicted,
        detected_instances=detected,
        total_instances=total,
        tpx=(int(tpx[0]), int(tpx[1]), int(tpx[2])),
        fpx=(int(fpx[0]), int(fpx[1]), int(fpx[2])),
        fnx=(int(fnx[0]), int(fnx[1]), int(fnx[2])),
        frames=len(pred_masks),
        undefined=undefined,
    )


def prediction_from_confidence(
    confidence: ConfidenceMap, road_mask: np.ndarray, threshold: float = 0.5
) -> np.ndarray:
    """Road labels from the road mask; obstacle where confidence reaches threshold."""
    road_mask = np.asarray(road_mask)
    if road_mask.shape != confidence.values.shape:
        raise DataFormatError(
            f"road mask {road_mask.shape} vs confidence {confidence.values.shape}"
        )
    pred = np.where(road_mask == OBSTACLE, 1, road_mask).astype(np.uint8)
    pred[confidence.values >= threshold] = OBSTACLE
    return pred


def format_report(report: MetricsReport) -> list[str]:
    def fmt(value: float) -> str:
        return "nan" if math.isnan(value) else f"{value:.6f}"

    rows = [
        ("idr", fmt(report.idr)),
        ("ifdr", fmt(report.ifdr)),
        ("pdr", fmt(report.pdr)),
        ("miou", fmt(report.miou)),
    ]
    rows += [(f"iou_{n}", fmt(v)) for n, v in zip(CLASS_NAMES, report.class_iou)]
    rows += [
        ("true_positive_instances", str(report.true_positive_instances)),
        ("false_positive_instances", str(report.false_positive_instances)),
        ("predicted_instances", str(report.predicted_instances)),
        ("detected_instances", str(report.detected_instances)),
        ("total_instances", str(report.total_instances)),
    ]
    for name, triple in (("tpx", report.tpx), ("fpx", report.fpx), ("fnx", report.fnx)):
        rows += [(f"{name}_{n}", str(v)) for n, v in zip(CLASS_NAMES, triple)]
    rows.append(("frames", str(report.frames)))
    lines = [f"{key:<26}{value}" for key, value in rows]
    lines += [f"# undefined {reason}" for reason in report.undefined]
    return lines


def write_report(
    report: MetricsReport, path: str | Path, header: list[str] | None = None
) -> Path:
    path = Path(path)
    with open(path, "wt") as fh:
        for line in header or []:
            fh.write(f"# {line}\n")
        for line in format_report(report):
            fh.write(line + "\n")
    return path
