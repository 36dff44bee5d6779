"""
Lift-splat view transformer: context and depth heads, frustum lifting and
sum pooling of the weighted points into the ego voxel grid.
"""

import logging

import numpy as np

from ..autograd import functional as F
from ..autograd import nn
from ..core.config import FEATURE_STRIDE
from ..core.errors import ConfigurationError, DimensionError
from ..graphics.camera import check_intrinsics, transform_points
from ..world.world import depth_bin_centers

logger = logging.getLogger(__name__)


def frustum_points(intrinsics, extrinsics, bin_centers, feature_size, stride=FEATURE_STRIDE, ref_from_ego=None):
    """Ego-frame positions [M, D, h, w, 3] of every (feature cell, depth bin).

    Cell (i, j) sits at image pixel centre ((j + 0.5) * stride, (i + 0.5) * stride).
    """
    intrinsics = np.asarray(intrinsics, dtype=np.float64)
    extrinsics = np.asarray(extrinsics, dtype=np.float64)
    height, width = feature_size
    depth = np.asarray(bin_centers, dtype=np.float64)
    v, u = np.meshgrid((np.arange(height) + 0.5) * stride, (np.arange(width) + 0.5) * stride, indexing="ij")
    points = []
    for K, ego_from_camera in zip(intrinsics, extrinsics):
        inverse = np.linalg.inv(check_intrinsics(K))
        pixels = np.stack([u[None] * depth[:, None, None], v[None] * depth[:, None, None],
                           np.broadcast_to(depth[:, None, None], (len(depth), height, width))], axis=-1)
        camera = pixels @ inverse.T
        points.append(transform_points(ego_from_camera, camera))
    points = np.stack(points)
    if ref_from_ego is not None:
        points = transform_points(np.asarray(ref_from_ego, dtype=np.float64), points)
    return points


def voxel_indices(positions, scene_config):
    """Flat voxel index per point (z-major over [Z, Y, X]); -1 outside the grid."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    nx, ny, nz = scene_config.grid_size
    if min(nx, ny, nz) <= 0 or scene_config.voxel_size <= 0:
        raise ConfigurationError(f"invalid voxel grid {scene_config.grid_size} @ {scene_config.voxel_size}")
    cell = np.floor((positions - np.asarray(scene_config.grid_origin)) / scene_config.voxel_size).astype(np.int64)
    inside = np.all((cell >= 0) & (cell < np.array([nx, ny, nz])), axis=1)
    flat = (cell[:, 2] * ny + cell[:, 1]) * nx + cell[:, 0]
    return np.where(inside, flat, -1)


def voxel_pool(positions, features, scene_config):
    """Sum point features [P, C] into a volume [C, Z, Y, X]; out-of-grid points are dropped."""
    nx, ny, nz = scene_config.grid_size
    index = voxel_indices(positions, scene_config)
    pooled = F.scatter_add(features, index, nx * ny * nz)
    channels = features.shape[1]
    return pooled.reshape(nz, ny, nx, channels).permute(3, 0, 1, 2)


def depth_loss(probs, target, mask=None):
    """Per-bin BCE between predicted [M, D, h, w] and one-hot targets, averaged over unmasked cells."""
    target = np.asarray(target)
    if mask is None:
        mask = target.sum(axis=1) > 0
    return F.binary_cross_entropy(probs, target, mask, axis=1)


class ViewTransformer(nn.Module):
    """F2D [M, C, h, w] -> (context, depth distribution, voxel volume [C_ctx, Z, Y, X])."""

    def __init__(self, run_config):
        super().__init__()
        model = run_config.model
        channels = model.feature_channels
        freeze = model.bn_freeze_stats
        self.scene = run_config.scene
        self.depth_bins = model.depth_bins
        self.bin_centers = depth_bin_centers(run_config.depth_range, model.depth_bins)
        self.context_net = nn.Sequential(nn.conv_bn_relu(channels, channels, 3, padding=1, freeze_stats=freeze),
                                         nn.Conv2d(channels, model.context_channels, 1))
        self.depth_head = nn.Sequential(nn.conv_bn_relu(channels, channels, 3, padding=1, freeze_stats=freeze),
                                        nn.Conv2d(channels, model.depth_bins, 1))

    def context(self, features):
        return self.context_net(features)

    def depth_net(self, features):
        return F.softmax(self.depth_head(features), axis=1)

    def lift(self, context, depth, intrinsics, extrinsics, ref_from_ego=None):
        """(positions [P, 3], features [P, C_ctx]) with P = M * D * h * w."""
        cameras, ctx_channels, height, width = context.shape
        if depth.shape != (cameras, self.depth_bins, height, width):
            raise DimensionError("depth distribution does not match context", depth.shape, context.shape)
        positions = frustum_points(intrinsics, extrinsics, self.bin_centers, (height, width),
                                   stride=self.scene.image_size[0] // height, ref_from_ego=ref_from_ego)
        weighted = context.reshape(cameras, 1, ctx_channels, height, width) * \
            depth.reshape(cameras, self.depth_bins, 1, height, width)
        points = weighted.permute(0, 1, 3, 4, 2).reshape(-1, ctx_channels)
        return positions.reshape(-1, 3), points

    def forward(self, features, intrinsics, extrinsics, ref_from_ego=None):
        context = self.context(features)
        depth = self.depth_net(features)
        positions, points = self.lift(context, depth, intrinsics, extrinsics, ref_from_ego)
        return context, depth, voxel_pool(positions, points, self.scene)

    def output_shapes(self, num_cameras, feature_size, context_channels):
        height, width = feature_size
        nx, ny, nz = self.scene.grid_size
        return {
            "context": (num_cameras, context_channels, height, width),
            "depth": (num_cameras, self.depth_bins, height, width),
            "volume": (context_channels, nz, ny, nx),
        }
