"""
Assembled forecasting network: encoder -> forecaster -> view transformer ->
occupancy decoder, plus the loss wiring of both training phases.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ..autograd import nn
from ..autograd.gradcheck import END_TO_END_STEP, finite_diff_check
from ..autograd.tensor import Tensor, no_grad
from ..core.config import FEATURE_STRIDE
from ..core.errors import CheckpointError, ConfigurationError, ContractError
from ..graphics.camera import invert_rigid
from ..world.world import depth_bin_edges, depth_to_bins
from .encoder import ImageEncoder
from .forecasting import ForecastingModule
from .losses import AlignmentPair, fsa_loss, total_loss
from .naive import NaiveForecaster
from .occupancy import OccupancyDecoder, task_loss
from .view_transformer import ViewTransformer, depth_loss

logger = logging.getLogger(__name__)

PRETRAINED_MODULES = ("encoder", "view_transformer", "decoder")


@dataclass
class ForwardOutputs:
    """Logits and targets over {T} followed by every horizon, plus alignment pairs."""

    logits: List[Tensor]
    targets: List[np.ndarray]
    pairs: List[AlignmentPair] = field(default_factory=list)
    depth_terms: List[tuple] = field(default_factory=list)
    horizons: tuple = ()


@dataclass
class LossTerms:
    total: Tensor
    task: Optional[Tensor] = None
    fsa_huber: Optional[Tensor] = None
    fsa_cosine: Optional[Tensor] = None
    depth: Optional[Tensor] = None

    def values(self):
        return {name: (None if value is None else value.item())
                for name, value in (("total", self.total), ("task", self.task), ("fsa_huber", self.fsa_huber),
                                    ("fsa_cosine", self.fsa_cosine), ("depth", self.depth))}


def build_forecaster(run_config):
    scene, model = run_config.scene, run_config.model
    if model.forecaster == "naive":
        return NaiveForecaster(model, scene.past_frames, len(scene.horizons))
    if model.forecaster == "forecastocc":
        return ForecastingModule(model, scene.num_cameras, scene.feature_size, scene.past_frames,
                                 len(scene.horizons))
    raise ConfigurationError(f"unknown forecaster {model.forecaster!r}")


class ForecastOccNetwork(nn.Module):
    def __init__(self, run_config):
        super().__init__()
        self.config = run_config
        self.encoder = ImageEncoder(run_config.model)
        self.view_transformer = ViewTransformer(run_config)
        self.decoder = OccupancyDecoder(run_config)
        self.forecaster = build_forecaster(run_config)
        self.bin_edges = depth_bin_edges(run_config.depth_range, run_config.model.depth_bins)

    # ------------------------------------------------------------ geometry
    def _relative_pose(self, sample, source_t, target_t):
        return invert_rigid(sample.poses[target_t]) @ sample.poses[source_t]

    def _depth_target(self, sample, t):
        return depth_to_bins(sample.depths[t], self.bin_edges, stride=FEATURE_STRIDE)

    def lift(self, features, sample, ref_from_ego=None):
        return self.view_transformer(features, sample.intrinsics, sample.extrinsics, ref_from_ego)

    def future_pose(self, sample, horizon_t):
        if self.config.model.future_pose_mode == "ground_truth":
            return self._relative_pose(sample, horizon_t, self.config.scene.current_index), "ego_T"
        return None, "ego_t"

    # ------------------------------------------------------------- phases
    def forward_current(self, sample):
        """Phase-1 forward: occupancy at T from frames T and T-1, with depth supervision."""
        current = self.config.scene.current_index
        previous = current - 1
        feat_t = self.encoder(sample.images[current])
        feat_p = self.encoder(sample.images[previous])
        _, depth_t, volume_t = self.lift(feat_t, sample)
        _, depth_p, volume_p = self.lift(feat_p, sample, self._relative_pose(sample, previous, current))
        logits = self.decoder(volume_t, volume_p)
        return ForwardOutputs(
            logits=[logits],
            targets=[sample.occupancy["ego_t"][current]],
            depth_terms=[(depth_t, self._depth_target(sample, current)),
                         (depth_p, self._depth_target(sample, previous))],
        )

    def encode_past(self, sample, frozen=True):
        frames = range(self.config.scene.past_frames)
        encode = self.encoder.encode_frozen if frozen else self.encoder
        return [encode(sample.images[t]) for t in frames]

    def forward_forecast(self, sample, frozen_encoder=True, with_observed=True):
        """Phase-2 forward: logits at T and every horizon, and FSA pairs when future frames exist."""
        scene = self.config.scene
        current = scene.current_index
        past = self.encode_past(sample, frozen=frozen_encoder)
        forecasts = self.forecaster.synthesize_future(past)

        _, _, volume_t = self.lift(past[current], sample)
        _, _, volume_p = self.lift(past[current - 1], sample, self._relative_pose(sample, current - 1, current))
        logits = [self.decoder(volume_t, volume_p)]
        targets = [sample.occupancy["ego_t"][current]]

        pairs = []
        for index, (horizon, forecast) in enumerate(zip(scene.horizons, forecasts)):
            horizon_t = current + 1 + index
            ref_from_ego, frame = self.future_pose(sample, horizon_t)
            _, _, volume_k = self.lift(forecast, sample, ref_from_ego)
            logits.append(self.decoder(volume_k, volume_t))
            targets.append(sample.occupancy[frame][horizon_t])
            if with_observed:
                observed = self.encoder.encode_frozen(sample.images[horizon_t])
                pairs.append(AlignmentPair(forecast, observed, horizon))
        return ForwardOutputs(logits=logits, targets=targets, pairs=pairs, horizons=tuple(scene.horizons))

    def compute_losses(self, outputs, loss_config, phase):
        if phase == "pretrain":
            task = task_loss(outputs.logits, outputs.targets, loss_config.class_weighting)
            depth = None
            for probs, target in outputs.depth_terms:
                term = depth_loss(probs, target)
                depth = term if depth is None else depth + term
            depth = depth * (1.0 / len(outputs.depth_terms))
            return LossTerms(total=task + depth * loss_config.depth_weight, task=task, depth=depth)
        if phase != "forecast":
            raise ContractError(f"unknown training phase {phase!r}")
        task = task_loss(outputs.logits, outputs.targets, loss_config.class_weighting) if loss_config.use_task else None
        fsa = huber = cosine = None
        if loss_config.use_fsa:
            fsa, huber, cosine = fsa_loss(outputs.pairs, loss_config.delta, loss_config.use_huber,
                                          loss_config.use_cosine, loss_config.huber_granularity)
        return LossTerms(total=total_loss(task, fsa, loss_config.alpha), task=task, fsa_huber=huber,
                         fsa_cosine=cosine)

    def predict(self, sample):
        """Class-id grids and logits at T and every horizon, without gradients."""
        with no_grad():
            outputs = self.forward_forecast(sample, with_observed=False)
        logits = [volume.data for volume in outputs.logits]
        return {
            "logits": logits,
            "classes": [np.argmax(volume, axis=0).astype(np.uint8) for volume in logits],
            "targets": outputs.targets,
        }

    # ----------------------------------------------------------- parameters
    def forecasting_parameters(self):
        return [p for p in self.forecaster.parameters() if p.requires_grad]

    def base_parameters(self):
        forecasting = {id(p) for p in self.forecaster.parameters()}
        return [p for p in self.parameters() if p.requires_grad and id(p) not in forecasting]

    def pretrained_state(self):
        return {name: value for name, value in self.state_dict().items()
                if name.split(".", 1)[0] in PRETRAINED_MODULES}

    def load_pretrained(self, state):
        """Load encoder, view transformer and decoder weights from a phase-1 checkpoint."""
        for prefix in PRETRAINED_MODULES:
            subset = {name[len(prefix) + 1:]: value for name, value in state.items()
                      if name.startswith(prefix + ".")}
            if not subset:
                raise CheckpointError(f"checkpoint has no {prefix} records")
            getattr(self, prefix).load_state_dict(subset)
        self.encoder.loaded_from_checkpoint = True
        return self

    def load_full(self, state):
        self.load_state_dict(state)
        self.encoder.loaded_from_checkpoint = True
        return self

    def summary(self):
        """Parameter counts per top-level submodule."""
        counts = {name: module.num_parameters() for name, module in self._modules.items()}
        counts["total"] = self.num_parameters()
        return counts


def encoder_checksum(network):
    """SHA-256 over the encoder parameter and buffer bytes."""
    digest = hashlib.sha256()
    for name, value in sorted(network.encoder.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(value).tobytes())
    return digest.hexdigest()


def set_stat_updates(network, enabled):
    """Toggle running-statistic updates of every BatchNorm layer."""
    for _, module in network.named_modules():
        if isinstance(module, nn.BatchNorm):
            module.freeze_stats = not enabled


def end_to_end_grad_check(network, sample, loss_config, parameter_names=None, per_parameter=3):
    """Finite-difference check of the phase-2 loss through the whole pipeline (float64).

    Returns {parameter name: max relative error}, probing the largest-gradient entries.
    """
    params = dict(network.named_parameters())
    names = parameter_names or default_check_parameters(network)
    network.encoder.loaded_from_checkpoint = True
    set_stat_updates(network, False)

    def loss(_=None):
        outputs = network.forward_forecast(sample, frozen_encoder=False)
        return network.compute_losses(outputs, loss_config, "forecast").total

    network.zero_grad()
    loss().backward()
    results = {}
    for name in names:
        param = params[name]
        order = np.argsort(-np.abs(param.grad.reshape(-1)), kind="stable")[:per_parameter]
        results[name] = finite_diff_check(loss, param, h=END_TO_END_STEP, indices=order.tolist())
        logger.info("end-to-end grad-check %-48s max rel err %.3e", name, results[name])
    set_stat_updates(network, True)
    return results


def default_check_parameters(network):
    names = [name for name, _ in network.named_parameters()]
    wanted = ["encoder.backbone.stage4", "view_transformer.depth_head", "view_transformer.context_net",
              "decoder.head.fc2", "decoder.fusion"]
    if isinstance(network.forecaster, ForecastingModule):
        wanted += ["forecaster.synthesizer.fc1", "forecaster.embeddings.E_time",
                   "forecaster.layers.0.cross_attn.q_proj"]
    else:
        wanted += ["forecaster.fuse", "forecaster.deproject"]
    chosen = []
    for prefix in wanted:
        match = next((n for n in names if (n.startswith(prefix) and n.endswith("weight")) or n == prefix), None)
        if match:
            chosen.append(match)
    return chosen


def infer_shapes(run_config, real_encoder=True):
    """Shape contract of every stage; the encoder, 2D heads and queries run for real."""
    network = ForecastOccNetwork(run_config)
    scene, model = run_config.scene, run_config.model
    height, width = scene.image_size
    shapes = {"feature_2d": network.encoder.output_shape(scene.num_cameras, scene.image_size)}
    if real_encoder:
        with no_grad():
            images = np.zeros((scene.num_cameras, 3, height, width))
            features = network.encoder(images)
            shapes["feature_2d"] = features.shape
            shapes["context"] = network.view_transformer.context(features).shape
            shapes["depth"] = network.view_transformer.depth_net(features).shape
            if isinstance(network.forecaster, ForecastingModule):
                shapes["queries"] = network.forecaster.init_queries(features, 0).shape
    else:
        vt = network.view_transformer.output_shapes(scene.num_cameras, scene.feature_size, model.context_channels)
        shapes["context"], shapes["depth"] = vt["context"], vt["depth"]
        if isinstance(network.forecaster, ForecastingModule):
            shapes["queries"] = network.forecaster.query_shape(scene.num_cameras)
    shapes["forecast"] = tuple(shapes["feature_2d"])
    nx, ny, nz = scene.grid_size
    shapes["lifted"] = network.view_transformer.output_shapes(
        scene.num_cameras, scene.feature_size, model.context_channels)["volume"]
    decoder = network.decoder.output_shapes((nz, ny, nx), scene.num_classes)
    shapes["fused"] = decoder["fused"]
    shapes["stages"] = decoder["stages"]
    shapes["volume_3d"] = decoder["volume"]
    shapes["logits"] = decoder["logits"]
    return {name: (tuple(value) if not isinstance(value, list) else [tuple(v) for v in value])
            for name, value in shapes.items()}, network.summary()
