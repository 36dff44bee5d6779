"""
Occupancy metrics: binary IoU, semantic mIoU and per-horizon reports
"""

import csv
import io
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..core.config import FREE_CLASS
from ..core.errors import ContractError, DatasetError

logger = logging.getLogger(__name__)


def _check_extents(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction extent {pred.shape} differs from ground truth {gt.shape}")
    return pred, gt


def iou_binary(pred, gt):
    """Occupied-vs-free IoU; an empty union counts as a perfect match."""
    pred, gt = _check_extents(pred, gt)
    occupied_pred, occupied_gt = pred != FREE_CLASS, gt != FREE_CLASS
    union = np.count_nonzero(occupied_pred | occupied_gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(occupied_pred & occupied_gt) / union


def class_counts(pred, gt, num_classes):
    """Per-class (intersection, union) voxel counts, free class included at index 0."""
    pred, gt = _check_extents(pred, gt)
    pred, gt = pred.ravel().astype(np.int64), gt.ravel().astype(np.int64)
    if pred.size and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= num_classes):
        raise ContractError(f"class ids outside [0, {num_classes})")
    hits = np.bincount(pred[pred == gt], minlength=num_classes)
    union = np.bincount(pred, minlength=num_classes) + np.bincount(gt, minlength=num_classes) - hits
    return hits, union


def per_class_iou(intersection, union):
    """IoU per non-free class; classes with an empty union map to None."""
    return {c: (intersection[c] / union[c] if union[c] else None)
            for c in range(len(union)) if c != FREE_CLASS}


def miou(pred, gt, num_classes):
    """Mean IoU over non-free classes present in the prediction or the ground truth."""
    values = [v for v in per_class_iou(*class_counts(pred, gt, num_classes)).values() if v is not None]
    # Nothing but free space on both sides
    if not values:
        return 1.0
    return float(np.mean(values))


def percent(value):
    return None if value is None else round(100.0 * value, 2)


def horizon_label(horizon):
    return f"{horizon:g}s"


@dataclass
class HorizonCounts:
    """Pooled counts of one horizon over every evaluated scene."""

    num_classes: int
    intersection: np.ndarray = None
    union: np.ndarray = None
    occupied_hits: int = 0
    occupied_union: int = 0
    predicted_voxels: np.ndarray = None

    def __post_init__(self):
        self.intersection = np.zeros(self.num_classes, dtype=np.int64)
        self.union = np.zeros(self.num_classes, dtype=np.int64)
        self.predicted_voxels = np.zeros(self.num_classes, dtype=np.int64)

    def add(self, pred, gt):
        hits, union = class_counts(pred, gt, self.num_classes)
        self.intersection += hits
        self.union += union
        occupied_pred, occupied_gt = np.asarray(pred) != FREE_CLASS, np.asarray(gt) != FREE_CLASS
        self.occupied_hits += int(np.count_nonzero(occupied_pred & occupied_gt))
        self.occupied_union += int(np.count_nonzero(occupied_pred | occupied_gt))
        self.predicted_voxels += np.bincount(np.asarray(pred, dtype=np.int64).ravel(), minlength=self.num_classes)

    @property
    def iou(self):
        return self.occupied_hits / self.occupied_union if self.occupied_union else 1.0

    @property
    def per_class(self):
        return per_class_iou(self.intersection, self.union)

    @property
    def miou(self):
        values = [v for v in self.per_class.values() if v is not None]
        return float(np.mean(values)) if values else 1.0


@dataclass
class HorizonReport:
    """Percentages per horizon (ascending) with Avg. columns and per-scene rows."""

    horizons: Tuple[float, ...]
    iou: List[float]
    miou: List[float]
    per_class: Dict[int, List[Optional[float]]]
    voxel_counts: Dict[int, int]
    scene_rows: List[dict] = field(default_factory=list)

    @property
    def avg_iou(self):
        return round(float(np.mean(self.iou)), 2)

    @property
    def avg_miou(self):
        return round(float(np.mean(self.miou)), 2)

    def csv_rows(self):
        class_ids = sorted(self.per_class)
        rows = list(self.scene_rows)
        for index, horizon in enumerate(self.horizons):
            row = {"scene": "all", "horizon_s": horizon, "iou": self.iou[index], "miou": self.miou[index]}
            row.update({f"iou_{c}": self.per_class[c][index] for c in class_ids})
            rows.append(row)
        avg = {"scene": "all", "horizon_s": "avg", "iou": self.avg_iou, "miou": self.avg_miou}
        for c in class_ids:
            present = [v for v in self.per_class[c] if v is not None]
            avg[f"iou_{c}"] = round(float(np.mean(present)), 2) if present else None
        rows.append(avg)
        return rows

    def to_csv(self):
        columns = ["scene", "horizon_s", "iou", "miou"] + [f"iou_{c}" for c in sorted(self.per_class)]
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in self.csv_rows():
            writer.writerow({key: _cell(row.get(key)) for key in columns})
        return buffer.getvalue()

    def to_table(self, title="ForecastOcc"):
        labels = [horizon_label(h) for h in self.horizons] + ["Avg."]
        header = f"{'Method':<16}" + "".join(f" | {label:>13}" for label in labels)
        sub = f"{'':<16}" + "".join(f" | {'mIoU':>6} {'IoU':>6}" for _ in labels)
        values = list(zip(self.miou, self.iou)) + [(self.avg_miou, self.avg_iou)]
        line = f"{title:<16}" + "".join(f" | {m:>6.2f} {i:>6.2f}" for m, i in values)
        return "\n".join([header, sub, "-" * len(header), line]) + "\n"

    def write(self, directory, stem="report"):
        os.makedirs(directory, exist_ok=True)
        paths = (os.path.join(directory, f"{stem}.csv"), os.path.join(directory, f"{stem}.txt"))
        try:
            for path, text in zip(paths, (self.to_csv(), self.to_table())):
                with open(path, "w", encoding="utf-8") as handle:
                    handle.write(text)
        except OSError as exc:
            raise DatasetError(f"cannot write report to {directory}: {exc}") from exc
        logger.info("Wrote %s and %s", *paths)
        return paths


def _cell(value):
    if value is None:
        return "nan"
    if isinstance(value, float):
        return f"{value:.2f}"
    return value


class MetricAccumulator:
    """Collects (scene, horizon, prediction, ground truth) and pools counts per horizon."""

    def __init__(self, horizons, num_classes):
        self.horizons = tuple(sorted(horizons))
        self.num_classes = num_classes
        self.counts = {h: HorizonCounts(num_classes) for h in self.horizons}
        self.scene_rows = []

    def add(self, scene, horizon, pred, gt):
        if horizon not in self.counts:
            raise ContractError(f"horizon {horizon} is not one of {self.horizons}")
        hits, union = class_counts(pred, gt, self.num_classes)
        self.counts[horizon].add(pred, gt)
        row = {"scene": scene, "horizon_s": horizon, "iou": percent(iou_binary(pred, gt)),
               "miou": percent(miou(pred, gt, self.num_classes))}
        row.update({f"iou_{c}": percent(v) for c, v in per_class_iou(hits, union).items()})
        self.scene_rows.append(row)

    def report(self):
        per_class = {c: [] for c in range(self.num_classes) if c != FREE_CLASS}
        for horizon in self.horizons:
            for c, value in self.counts[horizon].per_class.items():
                per_class[c].append(percent(value))
        voxels = sum(self.counts[h].predicted_voxels for h in self.horizons)
        rows = sorted(self.scene_rows, key=lambda row: (str(row["scene"]), row["horizon_s"]))
        return HorizonReport(
            horizons=self.horizons,
            iou=[percent(self.counts[h].iou) for h in self.horizons],
            miou=[percent(self.counts[h].miou) for h in self.horizons],
            per_class=per_class,
            voxel_counts={c: int(n) for c, n in enumerate(voxels)},
            scene_rows=rows,
        )


def horizon_report(preds, gts, horizons, num_classes, scene=0):
    """Report for one scene: preds[k] and gts[k] are the grids at horizons[k]."""
    if not len(preds) == len(gts) == len(horizons):
        raise ContractError(f"need one prediction and one target per horizon, got "
                            f"{len(preds)}/{len(gts)}/{len(horizons)}")
    accumulator = MetricAccumulator(horizons, num_classes)
    for horizon, pred, gt in zip(horizons, preds, gts):
        accumulator.add(scene, horizon, pred, gt)
    return accumulator.report()
