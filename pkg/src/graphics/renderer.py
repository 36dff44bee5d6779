"""
Analytic ray-cast renderer for the synthetic world
"""

import logging

import numpy as np

from ..core.config import DEPTH_SENTINEL, GROUND_CLASS, SKY_COLOR, class_table
from .camera import transform_points

logger = logging.getLogger(__name__)

BACKGROUND = -1


class Renderer:
    """Ray-casts ground plane and semantic boxes for every camera of a rig."""

    def __init__(self, scene_config):
        self.config = scene_config
        self.class_colors = np.array([spec.color for spec in class_table(scene_config.num_classes)])
        self.sky_color = np.asarray(SKY_COLOR)

    def render(self, seq, t):
        """Images [M, 3, H, W] in [0, 1], optical-axis depths [M, H, W] and class ids [M, H, W]."""
        world_from_ego = seq.ego_pose(t)
        class_ids, lows, highs = seq.boxes(t)
        images, depths, labels = [], [], []
        for camera in seq.ego.cameras:
            origin = transform_points(world_from_ego, camera.position)
            directions = camera.pixel_rays() @ world_from_ego[:3, :3].T
            depth, label = self.cast(origin, directions, class_ids, lows, highs)
            images.append(self.colorize(label))
            depths.append(depth)
            labels.append(label)
        return np.stack(images), np.stack(depths), np.stack(labels)

    def cast(self, origin, directions, class_ids, lows, highs):
        """Nearest hit parameter and class per ray; directions are scaled so t equals depth."""
        shape = directions.shape[:-1]
        best = np.full(shape, np.inf)
        label = np.full(shape, BACKGROUND, dtype=np.int64)

        dz = directions[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_ground = np.where(dz < 0, -origin[2] / dz, np.inf)
        hit = t_ground > 0
        best = np.where(hit, t_ground, best)
        label = np.where(hit, GROUND_CLASS, label)

        for class_id, low, high in zip(class_ids, lows, highs):
            t_box = ray_box_intersection(origin, directions, low, high)
            closer = np.isfinite(t_box) & ((t_box < best) | ((t_box == best) & (class_id > label)))
            best = np.where(closer, t_box, best)
            label = np.where(closer, class_id, label)

        depth = np.where(np.isfinite(best), best, DEPTH_SENTINEL)
        return depth, label

    def colorize(self, label):
        colors = np.where(label[..., None] >= 0, self.class_colors[np.clip(label, 0, None)], self.sky_color)
        return np.moveaxis(colors, -1, 0)


def ray_box_intersection(origin, directions, low, high):
    """Slab test; returns the entry parameter (>0) per ray or inf on a miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inverse = 1.0 / directions
        t1 = (low - origin) * inverse
        t2 = (high - origin) * inverse
    # Rays parallel to a slab: inside the slab spans everything, outside spans nothing
    parallel = directions == 0
    inside = (origin >= low) & (origin <= high)
    t_near = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    t_far = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    entry = t_near.max(axis=-1)
    exit_ = t_far.min(axis=-1)
    hit = (exit_ >= entry) & (entry > 0)
    return np.where(hit, entry, np.inf)


def render_views(seq, t, config=None):
    """(images [M, 3, H, W], depths [M, H, W]) of timestep t."""
    images, depths, _ = Renderer(config or seq.config).render(seq, t)
    return images, depths
