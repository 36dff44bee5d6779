"""
Ablation rows as RunConfig overrides, the results-table skeleton and a
runner that fills it with seed means.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..autograd import nn
from ..evaluation.metrics import horizon_label
from .config import apply_overrides
from .errors import ConfigurationError
from .trainer import Trainer, evaluate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationRow:
    group: str
    name: str
    overrides: Dict[str, object]


@dataclass
class AblationResult:
    row: AblationRow
    miou: List[float]  # per horizon, seed mean
    iou: List[float]
    seeds: List[int] = field(default_factory=list)

    @property
    def avg_miou(self):
        return round(float(np.mean(self.miou)), 2)

    @property
    def avg_iou(self):
        return round(float(np.mean(self.iou)), 2)


def _embedding_row(temporal, scale, camera):
    tags = "+".join(tag for tag, on in (("T", temporal), ("S", scale), ("C", camera)) if on) or "none"
    return AblationRow("embeddings", tags, {"model.use_time_embedding": temporal,
                                            "model.use_scale_embedding": scale,
                                            "model.use_camera_embedding": camera})


ABLATION_ROWS = (
    AblationRow("loss", "task", {"loss.use_task": True, "loss.use_fsa": False}),
    AblationRow("loss", "fsa", {"loss.use_task": False, "loss.use_fsa": True}),
    AblationRow("loss", "task+fsa", {"loss.use_task": True, "loss.use_fsa": True}),
    AblationRow("fsa_terms", "huber", {"loss.use_huber": True, "loss.use_cosine": False}),
    AblationRow("fsa_terms", "cosine", {"loss.use_huber": False, "loss.use_cosine": True}),
    AblationRow("fsa_terms", "huber+cosine", {"loss.use_huber": True, "loss.use_cosine": True}),
    AblationRow("query_init", "learned", {"model.query_init": "learned"}),
    AblationRow("query_init", "current_frame", {"model.query_init": "current_frame"}),
    _embedding_row(False, False, False),
    _embedding_row(True, False, False),
    _embedding_row(False, True, False),
    _embedding_row(False, False, True),
    _embedding_row(True, False, True),
    _embedding_row(False, True, True),
    _embedding_row(True, True, True),
    *(AblationRow("layers", f"L={n}", {"model.num_layers": n}) for n in (1, 2, 3, 4)),
    AblationRow("forecaster", "naive", {"model.forecaster": "naive"}),
    AblationRow("forecaster", "forecastocc", {"model.forecaster": "forecastocc"}),
)

GROUPS = tuple(dict.fromkeys(row.group for row in ABLATION_ROWS))


def select_rows(groups=None):
    if not groups:
        return list(ABLATION_ROWS)
    unknown = set(groups) - set(GROUPS)
    if unknown:
        raise ConfigurationError(f"unknown ablation groups {sorted(unknown)}; expected {GROUPS}")
    return [row for row in ABLATION_ROWS if row.group in groups]


def row_configs(base_config, rows=None):
    """Validated RunConfig per ablation row."""
    return [(row, apply_overrides(base_config, row.overrides).validate()) for row in (rows or ABLATION_ROWS)]


def format_table(rows, horizons, results: Optional[Dict[str, AblationResult]] = None):
    """Results table; rows without results show dashes."""
    results = results or {}
    labels = [horizon_label(h) for h in horizons]
    header = f"{'group':<12} {'row':<14}" + "".join(f" {label:>7}" for label in labels) + \
        f" {'Avg.':>7} {'IoU':>7}"
    lines = [header, "-" * len(header)]
    for row in rows:
        result = results.get(f"{row.group}/{row.name}")
        if result is None:
            cells = ["-"] * (len(labels) + 2)
        else:
            cells = [f"{v:.2f}" for v in result.miou] + [f"{result.avg_miou:.2f}", f"{result.avg_iou:.2f}"]
        lines.append(f"{row.group:<12} {row.name:<14}" + "".join(f" {cell:>7}" for cell in cells))
    return "\n".join(lines) + "\n"


def run_ablations(base_config, train_samples, eval_samples, seeds=(0, 1, 2), rows=None):
    """Train and evaluate every row for each seed; pretraining is shared per seed."""
    rows = list(rows or ABLATION_ROWS)
    pretrained = {}
    results = {}
    for row, config in row_configs(base_config, rows):
        mious, ious = [], []
        for seed in seeds:
            seeded = apply_overrides(config, {"train.seed": seed})
            if seed not in pretrained:
                warmup = Trainer(apply_overrides(base_config, {"train.seed": seed}), train_samples)
                warmup.pretrain()
                pretrained[seed] = warmup.network.pretrained_state()
            trainer = Trainer(seeded, train_samples)
            trainer.network.load_pretrained(pretrained[seed])
            nn.cast_parameters(trainer.network)
            trainer.train_forecast()
            _, report = evaluate(trainer.network, eval_samples, seeded)
            mious.append(report.miou)
            ious.append(report.iou)
            logger.info("Ablation %s/%s seed %d: Avg. mIoU %.2f", row.group, row.name, seed, report.avg_miou)
        results[f"{row.group}/{row.name}"] = AblationResult(
            row=row,
            miou=[round(v, 2) for v in np.mean(mious, axis=0)],
            iou=[round(v, 2) for v in np.mean(ious, axis=0)],
            seeds=list(seeds),
        )
    return results
