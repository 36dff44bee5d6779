"""
Prediction export: class grids, logits and a per-class voxel summary
"""

import logging
import os

import numpy as np

from ..core.config import class_table
from ..core.errors import ContractError, DatasetError
from ..world import io
from .metrics import horizon_label

logger = logging.getLogger(__name__)


def prediction_labels(horizons):
    return ["current"] + [horizon_label(h) for h in horizons]


def occupancy_summary(grids, labels, num_classes):
    """Text table of voxel counts per class for every exported grid."""
    names = [spec.name for spec in class_table(num_classes)]
    lines = [f"{'class':<14}" + "".join(f"{label:>10}" for label in labels)]
    counts = [np.bincount(np.asarray(grid, dtype=np.int64).ravel(), minlength=num_classes) for grid in grids]
    for class_id, name in enumerate(names):
        lines.append(f"{class_id:>2} {name:<11}" + "".join(f"{int(c[class_id]):>10}" for c in counts))
    free = [c[0] / max(c.sum(), 1) for c in counts]
    lines.append(f"{'free fraction':<14}" + "".join(f"{f:>10.3f}" for f in free))
    return "\n".join(lines) + "\n"


def export_predictions(prediction, directory, horizons, num_classes):
    """Write `<label>.occ` and `<label>.lgt` per predicted grid plus summary.txt.

    `prediction` is the dict returned by ForecastOccNetwork.predict.
    """
    labels = prediction_labels(horizons)
    if len(prediction["classes"]) != len(labels):
        raise ContractError(f"expected {len(labels)} predicted grids, got {len(prediction['classes'])}")
    written = []
    for label, grid, logits in zip(labels, prediction["classes"], prediction["logits"]):
        occ_path = os.path.join(directory, f"{label}.occ")
        io.write_occupancy(occ_path, grid)
        io.write_logits(os.path.join(directory, f"{label}.lgt"), logits)
        written.append(occ_path)
    summary = occupancy_summary(prediction["classes"], labels, num_classes)
    try:
        with open(os.path.join(directory, "summary.txt"), "w", encoding="utf-8") as handle:
            handle.write(summary)
    except OSError as exc:
        raise DatasetError(f"cannot write summary in {directory}: {exc}") from exc
    logger.info("Exported %d grids to %s", len(written), directory)
    return written


def load_export(directory, horizons):
    """Read exported grids and logits back, keyed by label."""
    return {label: (io.read_occupancy(os.path.join(directory, f"{label}.occ")),
                    io.read_logits(os.path.join(directory, f"{label}.lgt")))
            for label in prediction_labels(horizons)}
