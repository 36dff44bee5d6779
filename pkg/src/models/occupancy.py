"""
Occupancy encoder and semantic head.

Volumes travel through this module batched as [1, C, Z, Y, X]; the public
entry points accept and return unbatched [C, Z, Y, X] volumes.
"""

import logging

import numpy as np

from ..autograd import functional as F
from ..autograd import nn
from ..autograd.tensor import as_tensor, cat
from ..core.errors import ConfigurationError, DimensionError

logger = logging.getLogger(__name__)


def _batched(volume):
    volume = as_tensor(volume)
    return volume.reshape((1,) + volume.shape) if volume.ndim == 4 else volume


class Bottleneck3D(nn.Module):
    """1x1x1 reduce, 3x3x3, 1x1x1 expand (each BN), residual add, ReLU."""

    def __init__(self, in_channels, out_channels, stride=1, zero_init_last=False, freeze_stats=False):
        super().__init__()
        mid = max(out_channels // 4, 1)
        self.stride = stride
        self.conv1 = nn.Conv3d(in_channels, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm3d(mid, freeze_stats=freeze_stats)
        self.conv2 = nn.Conv3d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(mid, freeze_stats=freeze_stats)
        self.conv3 = nn.Conv3d(mid, out_channels, 1, bias=False)
        self.bn3 = nn.BatchNorm3d(out_channels, freeze_stats=freeze_stats)
        if zero_init_last:
            self.bn3.weight.data[...] = 0.0
        self.downsample = None
        if in_channels != out_channels or stride != 1:
            self.downsample = nn.Sequential(nn.Conv3d(in_channels, out_channels, 1, stride=stride, bias=False),
                                            nn.BatchNorm3d(out_channels, freeze_stats=freeze_stats))

    def forward(self, x):
        residual = x
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        if self.downsample is not None:
            residual = self.downsample(x)
        return F.relu(out + residual)


class TemporalFusion(nn.Module):
    """One shared bottleneck per input, then channel concatenation: C_ctx, C_ctx -> 2C."""

    def __init__(self, in_channels, channels, freeze_stats=False):
        super().__init__()
        self.block = Bottleneck3D(in_channels, channels, freeze_stats=freeze_stats)

    def forward(self, current, previous):
        current, previous = _batched(current), _batched(previous)
        if current.shape != previous.shape:
            raise DimensionError("temporal fusion needs equally shaped volumes", current.shape, previous.shape)
        return cat([self.block(current), self.block(previous)], axis=1)


class OccupancyBackbone(nn.Module):
    """Three stages: one block at stride 1, then two blocks each halving extents and doubling width."""

    def __init__(self, in_channels, channels, freeze_stats=False):
        super().__init__()
        self.stage_channels = (channels, 2 * channels, 4 * channels)
        c1, c2, c3 = self.stage_channels
        self.stage1 = Bottleneck3D(in_channels, c1, freeze_stats=freeze_stats)
        self.stage2 = nn.Sequential(Bottleneck3D(c1, c2, stride=2, freeze_stats=freeze_stats),
                                    Bottleneck3D(c2, c2, freeze_stats=freeze_stats))
        self.stage3 = nn.Sequential(Bottleneck3D(c2, c3, stride=2, freeze_stats=freeze_stats),
                                    Bottleneck3D(c3, c3, freeze_stats=freeze_stats))

    def forward(self, fused):
        fused = _batched(fused)
        if any(n % 4 for n in fused.shape[2:]):
            raise ConfigurationError(f"grid extents {fused.shape[2:]} must be divisible by 4")
        s1 = self.stage1(fused)
        s2 = self.stage2(s1)
        s3 = self.stage3(s2)
        return [s1, s2, s3]

    def output_shapes(self, grid_zyx):
        if any(n % 4 for n in grid_zyx):
            raise ConfigurationError(f"grid extents {grid_zyx} must be divisible by 4")
        return [(c,) + tuple(n // s for n in grid_zyx) for c, s in zip(self.stage_channels, (1, 2, 4))]


class FPN3D(nn.Module):
    """Trilinear upsampling of stages 2-3 to stage 1, concat, 3x3x3 conv + BN + ReLU."""

    def __init__(self, stage_channels, out_channels, freeze_stats=False):
        super().__init__()
        self.fuse = nn.conv_bn_relu(sum(stage_channels), out_channels, 3, padding=1, dims=3,
                                    freeze_stats=freeze_stats)
        self.out_channels = out_channels

    def forward(self, stages):
        base = stages[0].shape[2:]
        upsampled = [stages[0]] + [F.resize_linear(stage, base) for stage in stages[1:]]
        return self.fuse(cat(upsampled, axis=1))


class SemanticHead(nn.Module):
    """3x3x3 conv + BN + ReLU, then a per-voxel linear -> softplus -> linear MLP to class logits."""

    def __init__(self, in_channels, channels, hidden, num_classes, freeze_stats=False):
        super().__init__()
        self.conv = nn.conv_bn_relu(in_channels, channels, 3, padding=1, dims=3, freeze_stats=freeze_stats)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)
        self.num_classes = num_classes

    def mlp(self, voxel_features):
        """Per-voxel logits from features [..., channels]."""
        return self.fc2(F.softplus(self.fc1(voxel_features)))

    def forward(self, volume):
        features = self.conv(_batched(volume))[0]
        channels, depth, height, width = features.shape
        per_voxel = features.permute(1, 2, 3, 0).reshape(depth * height * width, channels)
        logits = self.mlp(per_voxel)
        return logits.reshape(depth, height, width, self.num_classes).permute(3, 0, 1, 2)


class OccupancyDecoder(nn.Module):
    """Fuse two lifted volumes and decode them to semantic logits [C_cls, Z, Y, X]."""

    def __init__(self, run_config):
        super().__init__()
        model = run_config.model
        freeze = model.bn_freeze_stats
        self.fusion = TemporalFusion(model.context_channels, model.occ_channels, freeze)
        self.backbone = OccupancyBackbone(2 * model.occ_channels, model.occ_channels, freeze)
        self.neck = FPN3D(self.backbone.stage_channels, model.occ_channels, freeze)
        self.head = SemanticHead(model.occ_channels, model.head_channels, model.mlp_hidden,
                                 run_config.scene.num_classes, freeze)

    def encode(self, current, previous):
        """Fused F3D volume [C_occ, Z, Y, X] before the head."""
        return self.neck(self.backbone(self.fusion(current, previous)))[0]

    def forward(self, current, previous):
        return self.head(self.encode(current, previous))

    def output_shapes(self, grid_zyx, num_classes):
        channels = self.neck.out_channels
        return {
            "fused": (2 * self.fusion.block.bn3.channels,) + tuple(grid_zyx),
            "stages": self.backbone.output_shapes(grid_zyx),
            "volume": (channels,) + tuple(grid_zyx),
            "logits": (num_classes,) + tuple(grid_zyx),
        }


def class_weights_from(targets, num_classes):
    """Inverse-frequency class weights normalised to mean 1 over present classes."""
    counts = np.bincount(np.concatenate([np.asarray(t).ravel() for t in targets]), minlength=num_classes)
    weights = np.ones(num_classes)
    present = counts > 0
    weights[present] = counts.sum() / (present.sum() * counts[present])
    return weights


def task_loss(logits, targets, class_weighting="none"):
    """Sum over grids of the mean voxel-wise cross entropy."""
    if len(logits) != len(targets):
        raise DimensionError("one target grid per logit volume is required", (len(logits),), (len(targets),))
    weights = None
    if class_weighting == "inverse_frequency":
        weights = class_weights_from(targets, logits[0].shape[0])
    total = None
    for volume, target in zip(logits, targets):
        term = F.cross_entropy(volume, np.asarray(target, dtype=np.int64), class_weights=weights)
        total = term if total is None else total + term
    return total
