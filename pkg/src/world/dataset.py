"""
Scene samples in memory and on disk.

Layout under a dataset root:
    manifest.json
    scene_<seed>/scene.json
    scene_<seed>/t<idx>/cam<i>.ppm, depth<i>.f32, occ_ego_T.occ, occ_ego_t.occ
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from ..core.config import config_to_dict
from ..core.errors import DatasetError
from ..entities.actors import SceneObject
from ..graphics.renderer import Renderer
from . import io
from .world import FRAMES, build_sequence, generate_scene, rasterize_occupancy

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SCENE_FILE = "scene.json"


@dataclass
class SceneSample:
    """Everything training and evaluation read from one scene."""

    seed: int
    times: Tuple[float, ...]
    images: np.ndarray  # [T, M, 3, H, W]
    depths: np.ndarray  # [T, M, H, W]
    occupancy: Dict[str, np.ndarray]  # frame -> [T, Z, Y, X]
    intrinsics: np.ndarray  # [M, 3, 3]
    extrinsics: np.ndarray  # [M, 4, 4] camera-to-ego
    poses: np.ndarray  # [T, 4, 4] world-from-ego

    @property
    def num_timesteps(self):
        return len(self.times)


def render_sample(seq):
    """Render every timestep of a sequence into a SceneSample."""
    renderer = Renderer(seq.config)
    images, depths = [], []
    for t in range(len(seq)):
        image, depth, _ = renderer.render(seq, t)
        images.append(image)
        depths.append(depth)
    occupancy = {frame: np.stack([rasterize_occupancy(seq, t, frame) for t in range(len(seq))])
                 for frame in FRAMES}
    return SceneSample(
        seed=seq.seed,
        times=tuple(seq.times),
        images=np.stack(images),
        depths=np.stack(depths),
        occupancy=occupancy,
        intrinsics=seq.ego.intrinsics(),
        extrinsics=seq.ego.extrinsics(),
        poses=np.stack([seq.ego_pose(t) for t in range(len(seq))]),
    )


def make_samples(scene_config, count, base_seed=None, workers=1):
    """Generate and render `count` scenes with seeds base_seed, base_seed + 1, ..."""
    base_seed = scene_config.seed if base_seed is None else base_seed
    seeds = [base_seed + i for i in range(count)]

    def build(seed):
        return render_sample(generate_scene(scene_config, seed=seed))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(build, seeds))
    return [build(seed) for seed in seeds]


def scene_dir(root, seed):
    return os.path.join(root, f"scene_{seed}")


def write_scene(root, seq, sample, run_config):
    directory = scene_dir(root, sample.seed)
    for t in range(sample.num_timesteps):
        step_dir = os.path.join(directory, f"t{t}")
        for cam in range(sample.images.shape[1]):
            io.write_ppm(os.path.join(step_dir, f"cam{cam}.ppm"), sample.images[t, cam])
            io.write_depth(os.path.join(step_dir, f"depth{cam}.f32"), sample.depths[t, cam])
        for frame in FRAMES:
            io.write_occupancy(os.path.join(step_dir, f"occ_{frame}.occ"), sample.occupancy[frame][t])
    record = {
        "seed": sample.seed,
        "preset": run_config.preset,
        "times": list(sample.times),
        "image_size": list(run_config.scene.image_size),
        "grid_size": list(run_config.scene.grid_size),
        "num_cameras": int(sample.images.shape[1]),
        "objects": [obj.to_dict() for obj in seq.objects],
        "ego_speed": float(seq.ego.speed),
        "poses": sample.poses.tolist(),
        "intrinsics": sample.intrinsics.tolist(),
        "extrinsics": sample.extrinsics.tolist(),
    }
    _write_json(os.path.join(directory, SCENE_FILE), record)
    return directory


def _write_json(path, payload):
    try:
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, indent=2, sort_keys=True)
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc


def _read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from exc


def write_dataset(root, run_config, count, workers=1):
    """Generate `count` scenes under `root`; returns the manifest."""
    scene_config = run_config.scene
    seeds = [scene_config.seed + i for i in range(count)]

    def build(seed):
        seq = generate_scene(scene_config, seed=seed)
        write_scene(root, seq, render_sample(seq), run_config)
        return seed

    if workers > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            written = list(pool.map(build, seeds))
    else:
        written = [build(seed) for seed in seeds]

    config_echo = config_to_dict(run_config)
    config_echo.pop("output_dir", None)
    manifest = {
        "preset": run_config.preset,
        "scenes": [f"scene_{seed}" for seed in written],
        "config": config_echo,
    }
    _write_json(os.path.join(root, MANIFEST), manifest)
    logger.info("Wrote %d scenes to %s", len(written), root)
    return manifest


def read_manifest(root):
    path = os.path.join(root, MANIFEST)
    if not os.path.exists(path):
        raise DatasetError(f"dataset manifest not found: {path}")
    return _read_json(path)


def load_scene(directory, scene_config):
    """Read one scene directory back into a SceneSample."""
    record = _read_json(os.path.join(directory, SCENE_FILE))
    times = tuple(record["times"])
    cameras = int(record["num_cameras"])
    height, width = record["image_size"]
    nx, ny, nz = record["grid_size"]
    if tuple(record["grid_size"]) != tuple(scene_config.grid_size) or cameras != scene_config.num_cameras:
        raise DatasetError(f"{directory}: scene geometry does not match the configured preset")

    images, depths = [], []
    occupancy = {frame: [] for frame in FRAMES}
    for t in range(len(times)):
        step_dir = os.path.join(directory, f"t{t}")
        images.append([io.read_ppm(os.path.join(step_dir, f"cam{c}.ppm")) for c in range(cameras)])
        depths.append([io.read_depth(os.path.join(step_dir, f"depth{c}.f32"), (height, width))
                       for c in range(cameras)])
        for frame in FRAMES:
            grid = io.read_occupancy(os.path.join(step_dir, f"occ_{frame}.occ"))
            if grid.shape != (nz, ny, nx):
                raise DatasetError(f"{step_dir}: occupancy grid {grid.shape} != {(nz, ny, nx)}")
            occupancy[frame].append(grid)
    return SceneSample(
        seed=int(record["seed"]),
        times=times,
        images=np.asarray(images),
        depths=np.asarray(depths),
        occupancy={frame: np.stack(grids) for frame, grids in occupancy.items()},
        intrinsics=np.asarray(record["intrinsics"]),
        extrinsics=np.asarray(record["extrinsics"]),
        poses=np.asarray(record["poses"]),
    )


def load_sequence(directory, scene_config):
    """Rebuild the SceneSequence of a stored scene from its object records."""
    record = _read_json(os.path.join(directory, SCENE_FILE))
    objects = [SceneObject.from_dict(obj) for obj in record["objects"]]
    return build_sequence(scene_config, objects, ego_speed=record["ego_speed"], seed=int(record["seed"]))


def load_dataset(root, scene_config, limit=None):
    manifest = read_manifest(root)
    names = manifest["scenes"][:limit] if limit else manifest["scenes"]
    if not names:
        logger.warning("Dataset %s contains no scenes", root)
    return [load_scene(os.path.join(root, name), scene_config) for name in names]
