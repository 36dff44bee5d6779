"""
Synthetic scene generation, occupancy rasterization and depth binning
"""

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from ..core.config import (DEPTH_SENTINEL, FEATURE_STRIDE, FREE_CLASS, GENERATION_RETRIES, GROUND_CLASS,
                           class_table)
from ..core.errors import ContractError, GenerationError
from ..entities.actors import SceneObject
from ..entities.ego import EgoVehicle
from ..graphics.camera import invert_rigid, transform_points

logger = logging.getLogger(__name__)

FRAMES = ("ego_T", "ego_t")
PLACEMENT_MARGIN = 0.5
EGO_CLEARANCE = 2.0


@dataclass
class SceneSequence:
    """Objects, ego motion and timing of one synthetic scene."""

    config: object
    objects: List[SceneObject]
    ego: EgoVehicle
    times: Tuple[float, ...] = field(default=())
    seed: int = 0

    def __post_init__(self):
        if not self.times:
            self.times = tuple(self.config.timesteps)

    @property
    def current_index(self):
        return self.config.current_index

    def __len__(self):
        return len(self.times)

    def time_of(self, t):
        if not 0 <= t < len(self.times):
            raise ContractError(f"timestep index {t} outside sequence of {len(self.times)}")
        return self.times[t]

    def ego_pose(self, t):
        """World-from-ego transform at timestep index t."""
        return self.ego.pose_at(self.time_of(t))

    def boxes(self, t):
        """(class_ids [B], lows [B, 3], highs [B, 3]) in the world frame at timestep t."""
        time = self.time_of(t)
        if not self.objects:
            return np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3))
        lows, highs = zip(*(obj.box_at(time) for obj in self.objects))
        return np.array([obj.class_id for obj in self.objects]), np.array(lows), np.array(highs)

    def signature(self):
        """Deterministic fingerprint of the whole sequence."""
        parts = [np.asarray(self.times, dtype=np.float64).tobytes()]
        for obj in self.objects:
            parts.append(np.concatenate([[obj.class_id], obj.center, obj.size, obj.velocity]).tobytes())
        parts.append(self.ego.velocity.tobytes())
        return b"".join(parts)


def build_sequence(config, objects, ego_speed=None, seed=0):
    """SceneSequence from explicit objects (used by tests and the dataset loader)."""
    if ego_speed is None:
        ego_speed = config.ego_speed if config.ego_motion else 0.0
    return SceneSequence(config, list(objects), EgoVehicle(config, ego_speed), seed=seed)


def generate_scene(config, seed=None):
    """Random scene fully determined by (config, seed)."""
    config.validate()
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    specs = [spec for spec in class_table(config.num_classes) if spec.size_range is not None]
    low, high = config.object_count
    count = int(rng.integers(low, high + 1)) if high > 0 else 0
    if count and not specs:
        raise GenerationError(f"no object classes available with {config.num_classes} classes")

    x0, y0, _ = config.grid_origin
    x_extent, y_extent, _ = config.grid_extent
    objects = []
    for index in range(count):
        for _ in range(GENERATION_RETRIES):
            spec = specs[int(rng.integers(len(specs)))]
            size_low, size_high = (np.asarray(s) for s in spec.size_range)
            size = rng.uniform(size_low, size_high)
            half = size[:2] / 2.0 + PLACEMENT_MARGIN
            if np.any(2 * half >= (x_extent, y_extent)):
                continue
            xy = rng.uniform((x0 + half[0], y0 + half[1]), (x0 + x_extent - half[0], y0 + y_extent - half[1]))
            candidate = SceneObject(spec.id, (xy[0], xy[1], size[2] / 2.0), size, dynamic=spec.dynamic)
            if np.all(np.abs(candidate.center[:2]) - size[:2] / 2.0 < EGO_CLEARANCE):
                continue
            if any(candidate.overlaps(other, PLACEMENT_MARGIN) for other in objects):
                continue
            if spec.dynamic:
                speed = rng.uniform(*config.speed_range)
                heading = rng.uniform(0.0, 2 * np.pi)
                candidate.velocity = np.array([speed * np.cos(heading), speed * np.sin(heading), 0.0])
            objects.append(candidate)
            break
        else:
            raise GenerationError(
                f"could not place object {index + 1} of {count} after {GENERATION_RETRIES} attempts "
                f"in a {x_extent:.1f} x {y_extent:.1f} m grid")

    ego_speed = config.ego_speed if config.ego_motion else 0.0
    logger.debug("Generated scene seed=%d with %d objects", seed, len(objects))
    return SceneSequence(config, objects, EgoVehicle(config, ego_speed), seed=seed)


def voxel_centers(config):
    """Ego-frame voxel centres, [Z, Y, X, 3] as (x, y, z)."""
    nx, ny, nz = config.grid_size
    x0, y0, z0 = config.grid_origin
    size = config.voxel_size
    z, y, x = np.meshgrid(z0 + (np.arange(nz) + 0.5) * size,
                          y0 + (np.arange(ny) + 0.5) * size,
                          x0 + (np.arange(nx) + 0.5) * size, indexing="ij")
    return np.stack([x, y, z], axis=-1)


def rasterize_occupancy(seq, t, frame="ego_t", config=None):
    """Class-id grid [Z, Y, X] of timestep t expressed in the ego frame of T or of t."""
    config = config or seq.config
    if frame not in FRAMES:
        raise ContractError(f"frame must be one of {FRAMES}, got {frame!r}")
    reference = seq.current_index if frame == "ego_T" else t
    centers = transform_points(seq.ego_pose(reference), voxel_centers(config))

    labels = np.full(centers.shape[:3], FREE_CLASS, dtype=np.uint8)
    ground = (centers[..., 2] >= -config.voxel_size) & (centers[..., 2] < 0.0)
    labels[ground] = GROUND_CLASS

    class_ids, lows, highs = seq.boxes(t)
    for class_id, low, high in sorted(zip(class_ids, lows, highs), key=lambda item: item[0]):
        inside = np.all((centers >= low) & (centers < high), axis=-1)
        labels[inside] = np.maximum(labels[inside], class_id)
    return labels


def ego_transform(seq, source_t, target_t):
    """Transform mapping points in ego-at-source coordinates into ego-at-target coordinates."""
    return invert_rigid(seq.ego_pose(target_t)) @ seq.ego_pose(source_t)


def depth_bin_edges(depth_range, num_bins):
    low, high = depth_range
    return np.linspace(low, high, num_bins + 1)


def depth_bin_centers(depth_range, num_bins):
    edges = depth_bin_edges(depth_range, num_bins)
    return (edges[:-1] + edges[1:]) / 2.0


def depth_to_bins(depth, bin_edges, stride=FEATURE_STRIDE):
    """One-hot depth targets [M, D, H/stride, W/stride] from metric depth maps [M, H, W].

    Each patch keeps its nearest valid depth; a depth on an edge belongs to the
    lower bin. Sentinel patches and depths outside the edges give all-zero targets.
    """
    depth = np.asarray(depth, dtype=np.float64)
    edges = np.asarray(bin_edges, dtype=np.float64)
    if np.any(np.diff(edges) <= 0):
        raise ContractError("depth bin edges must be strictly increasing")
    cameras, height, width = depth.shape
    if height % stride or width % stride:
        raise ContractError(f"depth map {depth.shape[1:]} not divisible by stride {stride}")
    valid = np.where(depth == DEPTH_SENTINEL, np.inf, depth)
    valid = np.where(depth < 0, np.inf, valid)
    patches = valid.reshape(cameras, height // stride, stride, width // stride, stride).min(axis=(2, 4))

    num_bins = len(edges) - 1
    index = np.searchsorted(edges, patches, side="left") - 1
    in_range = np.isfinite(patches) & (index >= 0) & (index < num_bins)
    one_hot = np.zeros((cameras, num_bins) + patches.shape[1:])
    cam, row, col = np.nonzero(in_range)
    one_hot[cam, index[in_range], row, col] = 1.0
    return one_hot
