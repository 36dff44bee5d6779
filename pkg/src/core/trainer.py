"""
Two-phase training loop: current-frame pretraining, then forecasting with a
frozen encoder; plus evaluation over held-out scenes.
"""

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..autograd import nn
from ..autograd.checkpoint import save_checkpoint
from ..autograd.optim import AdamW
from ..autograd.tensor import set_default_dtype
from ..evaluation.metrics import MetricAccumulator
from ..models.network import ForecastOccNetwork, encoder_checksum, set_stat_updates
from .errors import CheckpointError, ContractError, DatasetError, NumericError

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("total", "task", "fsa_huber", "fsa_cosine", "depth")


@dataclass
class StepRecord:
    phase: str
    epoch: int
    step: int
    total: float
    task: Optional[float] = None
    fsa_huber: Optional[float] = None
    fsa_cosine: Optional[float] = None
    depth: Optional[float] = None
    learning_rates: Dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0


class TrainLog:
    """Append-only record of per-step losses and per-epoch metrics."""

    def __init__(self):
        self.steps: List[StepRecord] = []
        self.epochs: List[dict] = []

    def append(self, record):
        if self.steps and record.step <= self.steps[-1].step:
            raise ContractError(f"step index must increase, got {record.step} after {self.steps[-1].step}")
        self.steps.append(record)

    def add_epoch_metrics(self, phase, epoch, metrics):
        self.epochs.append({"phase": phase, "epoch": epoch, **metrics})

    def column(self, name, phase=None):
        return [getattr(r, name) for r in self.steps if phase is None or r.phase == phase]

    def learning_rate_history(self, group):
        return [(r.epoch, r.learning_rates.get(group)) for r in self.steps]

    def write_csv(self, path):
        groups = sorted({g for r in self.steps for g in r.learning_rates})
        columns = ["phase", "epoch", "step", *LOSS_COLUMNS, *(f"lr_{g}" for g in groups), "wall_time"]
        try:
            os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="") as handle:
                writer = csv.DictWriter(handle, fieldnames=columns, lineterminator="\n")
                writer.writeheader()
                for record in self.steps:
                    row = {k: v for k, v in asdict(record).items() if k in columns}
                    row.update({f"lr_{g}": record.learning_rates.get(g) for g in groups})
                    row.update({k: ("" if row[k] is None else repr(row[k])) for k in LOSS_COLUMNS})
                    writer.writerow(row)
        except OSError as exc:
            raise DatasetError(f"cannot write training log {path}: {exc}") from exc
        return path


class Trainer:
    """Owns the network, the optimiser of the active phase and the TrainLog."""

    def __init__(self, run_config, samples, network=None):
        self.config = run_config.validate()
        self.samples = list(samples)
        train = run_config.train
        set_default_dtype(train.dtype)
        nn.manual_seed(train.seed)
        self.network = network or ForecastOccNetwork(run_config)
        nn.cast_parameters(self.network)
        self.log = TrainLog()
        self.global_step = 0
        self.start_time = time.perf_counter()
        logger.info("Network parameters: %s", self.network.summary())

    # ------------------------------------------------------------ helpers
    def batches(self, epoch):
        """Scene batches of one epoch, shuffled by (seed, epoch)."""
        if not self.samples:
            raise DatasetError("no training scenes")
        order = np.random.default_rng(self.config.train.seed + epoch).permutation(len(self.samples))
        size = self.config.train.batch_size
        return [[self.samples[i] for i in order[start:start + size]] for start in range(0, len(order), size)]

    def _forward(self, sample, phase):
        if phase == "pretrain":
            outputs = self.network.forward_current(sample)
        else:
            outputs = self.network.forward_forecast(sample, with_observed=self.config.loss.use_fsa)
        return self.network.compute_losses(outputs, self.config.loss, phase)

    def train_step(self, optimizer, batch, phase, epoch):
        """Mean loss over the batch, one backward per scene, one optimiser step."""
        optimizer.zero_grad()
        self.network.zero_grad()
        sums = dict.fromkeys(LOSS_COLUMNS)
        scale = 1.0 / len(batch)
        for sample in batch:
            terms = self._forward(sample, phase)
            values = terms.values()
            if not math.isfinite(values["total"]):
                raise NumericError(f"non-finite {phase} loss {values['total']} at step {self.global_step + 1} "
                                   f"(epoch {epoch}, scene {sample.seed})")
            (terms.total * scale).backward()
            for key, value in values.items():
                if value is not None:
                    sums[key] = (sums[key] or 0.0) + value * scale
        optimizer.step()
        self.global_step += 1
        record = StepRecord(phase=phase, epoch=epoch, step=self.global_step,
                            learning_rates=optimizer.learning_rates(),
                            wall_time=time.perf_counter() - self.start_time, **sums)
        self.log.append(record)
        if self.global_step % self.config.train.log_every == 0:
            terms = " ".join(f"{k}={v:.5f}" for k, v in sums.items() if v is not None)
            logger.info("%s epoch %d step %d %s lr=%s", phase, epoch, self.global_step, terms,
                        record.learning_rates)
        return record

    def _budget_left(self, taken):
        return not self.config.train.max_steps or taken < self.config.train.max_steps

    # -------------------------------------------------------------- phase 1
    def pretrain(self):
        """Current-frame occupancy with depth supervision; trains encoder, lifting and 3D layers."""
        train = self.config.train
        params = [p for name, p in self.network.named_parameters() if not name.startswith("forecaster.")]
        optimizer = AdamW([{"params": params, "name": "pretrain"}], lr=train.pretrain_lr,
                          weight_decay=train.weight_decay)
        self.network.train()
        taken = 0
        logger.info("Pretraining for %d epochs over %d scenes", train.pretrain_epochs, len(self.samples))
        for epoch in range(train.pretrain_epochs):
            for batch in self.batches(epoch):
                if not self._budget_left(taken):
                    break
                self.train_step(optimizer, batch, "pretrain", epoch)
                taken += 1
        self.network.encoder.loaded_from_checkpoint = True
        return self.log

    # -------------------------------------------------------------- phase 2
    def train_forecast(self, eval_samples=None):
        """Forecasting phase on top of pretrained weights; the encoder stays frozen."""
        network, train, loss = self.network, self.config.train, self.config.loss
        if not network.encoder.loaded_from_checkpoint:
            raise CheckpointError("forecast training needs pretrained encoder weights")
        network.encoder.freeze()
        frozen = [network.view_transformer, network.decoder] if not loss.use_task else []
        for module in frozen:
            # Without the task loss only the forecasting module learns
            module.freeze()
            set_stat_updates(module, False)
        before = encoder_checksum(network)
        optimizer = AdamW([
            {"params": network.forecasting_parameters(), "name": "forecasting", "lr": train.forecast_lr},
            {"params": network.base_parameters(), "name": "base", "lr": train.base_lr},
        ], weight_decay=train.weight_decay)
        network.train()
        drop_epoch = train.epochs // 2
        taken = 0
        logger.info("Forecast training for %d epochs (LR drop at epoch %d)", train.epochs, drop_epoch)
        for epoch in range(train.epochs):
            if epoch == drop_epoch and drop_epoch > 0:
                lr = train.forecast_lr * train.lr_drop_factor
                optimizer.set_lr("forecasting", lr)
                logger.info("Epoch %d: forecasting learning rate dropped to %g", epoch, lr)
            for batch in self.batches(epoch):
                if not self._budget_left(taken):
                    break
                self.train_step(optimizer, batch, "forecast", epoch)
                taken += 1
            if eval_samples:
                current, horizons = self.evaluate(eval_samples)
                self.log.add_epoch_metrics("forecast", epoch, {
                    "current_miou": current.miou[0], "avg_miou": horizons.avg_miou, "avg_iou": horizons.avg_iou})
                network.train()
        after = encoder_checksum(network)
        if after != before:
            raise ContractError(f"frozen encoder changed during forecast training ({before[:12]} -> {after[:12]})")
        logger.info("Encoder checksum unchanged: %s", after)
        return self.log

    # ----------------------------------------------------------- evaluation
    def evaluate(self, samples):
        return evaluate(self.network, samples, self.config)

    def save(self, path, phase):
        meta = {"preset": self.config.preset, "phase": phase, "forecaster": self.config.model.forecaster,
                "encoder_sha256": encoder_checksum(self.network), "steps": self.global_step}
        return save_checkpoint(path, self.network.state_dict(), meta)


def evaluate(network, samples, run_config, predictions=None):
    """(current-frame report, forecast-horizon report) pooled over `samples`."""
    scene = run_config.scene
    network.eval()
    current = MetricAccumulator((0.0,), scene.num_classes)
    horizons = MetricAccumulator(scene.horizons, scene.num_classes)
    for sample in samples:
        prediction = network.predict(sample)
        if predictions is not None:
            predictions[sample.seed] = prediction
        grids, targets = prediction["classes"], prediction["targets"]
        current.add(sample.seed, 0.0, grids[0], targets[0])
        for horizon, grid, target in zip(scene.horizons, grids[1:], targets[1:]):
            horizons.add(sample.seed, horizon, grid, target)
    return current.report(), horizons.report()
