"""
Pipeline constants, presets and run configuration
"""

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from .errors import ConfigurationError

# Forecasting protocol
PAST_FRAMES = 4
HORIZONS = (1.0, 2.0, 3.0)
FRAME_INTERVAL = 1.0
FSA_WEIGHT = 30.0
HUBER_DELTA = 2.0
NUM_INTERACTION_LAYERS = 3

# Optimiser settings
PRETRAIN_LR = 1e-4
FORECAST_LR = 1e-3
BASE_LR = 1e-5
WEIGHT_DECAY = 0.01
LR_DROP_FACTOR = 0.1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Numerics
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5
COSINE_EPS = 1e-8
PROB_EPS = 1e-7
DEPTH_SENTINEL = -1.0
FEATURE_STRIDE = 16
NUM_SCALES = 4

# Labels
FREE_CLASS = 0
GROUND_CLASS = 1
SKY_COLOR = (0.4, 0.6, 1.0)

# Trainer
LOG_EVERY = 10
GENERATION_RETRIES = 200

# Semantic classes: name, colour, dynamic, (min size, max size) in metres
CLASS_TABLE = {
    0: ("free", (0.0, 0.0, 0.0), False, None),
    1: ("ground", (0.5, 0.5, 0.5), False, None),
    2: ("car", (0.9, 0.2, 0.2), True, ((1.5, 1.0, 1.0), (2.5, 1.5, 1.5))),
    3: ("pedestrian", (0.9, 0.8, 0.2), True, ((0.5, 0.5, 1.0), (0.8, 0.8, 1.5))),
    4: ("building", (0.3, 0.0, 0.6), False, ((2.0, 2.0, 2.0), (3.0, 3.0, 3.0))),
}

PRESETS = ("toy", "paper-shape", "kitti-shape", "micro")
FORECASTERS = ("forecastocc", "naive")
QUERY_INIT_MODES = ("current_frame", "learned")
FUTURE_POSE_MODES = ("current", "ground_truth")
HUBER_GRANULARITIES = ("location", "tensor")
CLASS_WEIGHTINGS = ("none", "inverse_frequency")
DTYPES = ("float64", "float32")


@dataclass(frozen=True)
class ClassSpec:
    """One semantic class of the synthetic world."""

    id: int
    name: str
    color: Tuple[float, float, float]
    dynamic: bool
    size_range: Optional[Tuple[Tuple[float, float, float], Tuple[float, float, float]]]


def class_table(num_classes):
    """Class specs for ids 0..num_classes-1, extending CLASS_TABLE cyclically."""
    specs = []
    for class_id in range(num_classes):
        if class_id in CLASS_TABLE:
            name, color, dynamic, sizes = CLASS_TABLE[class_id]
        else:
            # Reuse the object classes' shapes with a distinct colour per id
            base = 2 + (class_id - 2) % 3
            _, _, dynamic, sizes = CLASS_TABLE[base]
            hue = (class_id * 0.618034) % 1.0
            color = (0.5 + 0.5 * math.cos(2 * math.pi * hue),
                     0.5 + 0.5 * math.cos(2 * math.pi * (hue + 1 / 3)),
                     0.5 + 0.5 * math.cos(2 * math.pi * (hue + 2 / 3)))
            name = f"class_{class_id}"
        specs.append(ClassSpec(class_id, name, tuple(color), dynamic, sizes))
    return specs


@dataclass(frozen=True)
class CameraSpec:
    """Pinhole camera mounted on the ego vehicle."""

    name: str
    position: Tuple[float, float, float]
    yaw_deg: float
    pitch_deg: float = 0.0
    focal: float = 32.0


@dataclass
class SceneConfig:
    """Synthetic world, camera rig and timing."""

    grid_size: Tuple[int, int, int] = (32, 32, 8)  # X, Y, Z voxels
    voxel_size: float = 0.5
    grid_origin: Tuple[float, float, float] = (0.0, -8.0, -1.0)
    num_classes: int = 5
    image_size: Tuple[int, int] = (64, 64)  # H, W
    cameras: Tuple[CameraSpec, ...] = (
        CameraSpec("front_left", (0.0, 0.3, 1.5), 30.0, 0.0, 32.0),
        CameraSpec("front_right", (0.0, -0.3, 1.5), -30.0, 0.0, 32.0),
    )
    past_frames: int = PAST_FRAMES
    horizons: Tuple[float, ...] = HORIZONS
    frame_interval: float = FRAME_INTERVAL
    object_count: Tuple[int, int] = (2, 5)
    speed_range: Tuple[float, float] = (0.5, 2.0)
    ego_motion: bool = False
    ego_speed: float = 1.0
    seed: int = 0

    @property
    def num_cameras(self):
        return len(self.cameras)

    @property
    def feature_size(self):
        height, width = self.image_size
        return height // FEATURE_STRIDE, width // FEATURE_STRIDE

    @property
    def timesteps(self):
        """Relative times in seconds: past/current frames then horizons."""
        past = [-(self.past_frames - 1 - i) * self.frame_interval for i in range(self.past_frames)]
        return tuple(past) + tuple(self.horizons)

    @property
    def current_index(self):
        return self.past_frames - 1

    @property
    def grid_extent(self):
        return tuple(n * self.voxel_size for n in self.grid_size)

    @property
    def grid_diagonal(self):
        return math.sqrt(sum(e * e for e in self.grid_extent))

    def validate(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(n <= 0 for n in self.grid_size) or self.voxel_size <= 0:
            raise ConfigurationError(f"grid extents must be positive: {self.grid_size}, {self.voxel_size}")
        if any(n <= 0 for n in self.image_size):
            raise ConfigurationError(f"image size must be positive: {self.image_size}")
        if not self.cameras:
            raise ConfigurationError("at least one camera is required")
        if self.past_frames < 2:
            raise ConfigurationError("past_frames must be >= 2 (temporal fusion needs T-1)")
        if not self.horizons or any(h <= 0 for h in self.horizons):
            raise ConfigurationError(f"horizons must be positive: {self.horizons}")
        if list(self.horizons) != sorted(self.horizons) or len(set(self.horizons)) != len(self.horizons):
            raise ConfigurationError(f"horizons must be strictly increasing: {self.horizons}")
        if self.frame_interval <= 0:
            raise ConfigurationError("frame_interval must be positive")
        low, high = self.object_count
        if low < 0 or high < low:
            raise ConfigurationError(f"invalid object count range {self.object_count}")
        if self.speed_range[0] < 0 or self.speed_range[1] < self.speed_range[0]:
            raise ConfigurationError(f"invalid speed range {self.speed_range}")
        return self


@dataclass
class ModelConfig:
    """Network widths and forecasting-module switches."""

    backbone_widths: Tuple[int, int, int, int] = (8, 12, 34, 96)
    neck_widths: Tuple[int, int, int, int] = (4, 6, 16, 38)
    num_heads: int = 4
    ffn_hidden: int = 256
    num_layers: int = NUM_INTERACTION_LAYERS
    context_channels: int = 16
    depth_bins: int = 16
    depth_range: Optional[Tuple[float, float]] = None  # defaults to (1 m, grid diagonal)
    occ_channels: int = 16
    head_channels: int = 16
    mlp_hidden: int = 32
    forecaster: str = "forecastocc"
    query_init: str = "current_frame"
    use_scale_embedding: bool = True
    use_camera_embedding: bool = True
    use_time_embedding: bool = True
    future_pose_mode: str = "current"
    bn_freeze_stats: bool = False

    @property
    def feature_channels(self):
        return sum(self.neck_widths)

    def validate(self):
        if len(self.backbone_widths) != NUM_SCALES or len(self.neck_widths) != NUM_SCALES:
            raise ConfigurationError("backbone and neck need exactly four scale widths")
        if any(w <= 0 for w in self.backbone_widths + self.neck_widths):
            raise ConfigurationError("channel widths must be positive")
        if self.num_heads < 1 or self.feature_channels % self.num_heads:
            raise ConfigurationError(
                f"feature width {self.feature_channels} not divisible by {self.num_heads} heads")
        if self.num_layers < 1:
            raise ConfigurationError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.depth_bins < 1:
            raise ConfigurationError("depth_bins must be >= 1")
        if self.depth_range is not None and not 0 < self.depth_range[0] < self.depth_range[1]:
            raise ConfigurationError(f"invalid depth range {self.depth_range}")
        _check_choice("forecaster", self.forecaster, FORECASTERS)
        _check_choice("query_init", self.query_init, QUERY_INIT_MODES)
        _check_choice("future_pose_mode", self.future_pose_mode, FUTURE_POSE_MODES)
        return self


@dataclass
class LossConfig:
    """Loss switches and weights of the total objective."""

    use_task: bool = True
    use_fsa: bool = True
    use_huber: bool = True
    use_cosine: bool = True
    alpha: float = FSA_WEIGHT
    delta: float = HUBER_DELTA
    huber_granularity: str = "location"
    class_weighting: str = "none"
    depth_weight: float = 1.0

    def validate(self):
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.delta <= 0:
            raise ConfigurationError(f"delta must be > 0, got {self.delta}")
        if not (self.use_task or self.use_fsa):
            raise ConfigurationError("at least one of use_task / use_fsa must be enabled")
        if self.use_fsa and not (self.use_huber or self.use_cosine):
            raise ConfigurationError("FSA loss needs the Huber or the cosine term")
        _check_choice("huber_granularity", self.huber_granularity, HUBER_GRANULARITIES)
        _check_choice("class_weighting", self.class_weighting, CLASS_WEIGHTINGS)
        return self


@dataclass
class TrainConfig:
    """Optimisation schedule for both training phases."""

    epochs: int = 40
    pretrain_epochs: int = 40
    batch_size: int = 2
    num_scenes: int = 16
    pretrain_lr: float = PRETRAIN_LR
    forecast_lr: float = FORECAST_LR
    base_lr: float = BASE_LR
    weight_decay: float = WEIGHT_DECAY
    lr_drop_factor: float = LR_DROP_FACTOR
    max_steps: int = 0  # 0 = run every epoch in full
    seed: int = 0
    dtype: str = "float64"
    log_every: int = LOG_EVERY
    workers: int = 1

    def validate(self):
        if self.epochs < 1 or self.pretrain_epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")
        if self.num_scenes < 0 or self.max_steps < 0 or self.workers < 1:
            raise ConfigurationError("num_scenes/max_steps must be >= 0 and workers >= 1")
        if min(self.pretrain_lr, self.forecast_lr, self.base_lr) < 0 or self.weight_decay < 0:
            raise ConfigurationError("learning rates and weight decay must be non-negative")
        _check_choice("dtype", self.dtype, DTYPES)
        return self


@dataclass
class RunConfig:
    """Everything one CLI invocation needs."""

    preset: str = "toy"
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"

    @property
    def depth_range(self):
        if self.model.depth_range is not None:
            return tuple(self.model.depth_range)
        return (1.0, self.scene.grid_diagonal)

    def validate(self):
        _check_choice("preset", self.preset, PRESETS)
        self.scene.validate()
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        height, width = self.scene.image_size
        if height % 32 or width % 32:
            raise ConfigurationError(f"image size {self.scene.image_size} must be a multiple of 32")
        if any(n % 4 for n in self.scene.grid_size):
            raise ConfigurationError(f"grid {self.scene.grid_size} must be divisible by 4")
        return self


def _check_choice(name, value, choices):
    if value not in choices:
        raise ConfigurationError(f"{name} must be one of {choices}, got {value!r}")


def _ring_cameras(count, focal, height=1.5):
    yaws = [0.0, 55.0, 110.0, 180.0, -110.0, -55.0][:count]
    names = ["front", "front_left", "back_left", "back", "back_right", "front_right"]
    return tuple(CameraSpec(names[i], (0.0, 0.0, height), yaw, 0.0, focal) for i, yaw in enumerate(yaws))


def make_preset(name):
    """Build the RunConfig of a named preset."""
    if name == "toy":
        return RunConfig(preset="toy")
    if name == "paper-shape":
        return RunConfig(
            preset=name,
            scene=SceneConfig(grid_size=(200, 200, 16), voxel_size=0.4, grid_origin=(-40.0, -40.0, -1.0),
                              num_classes=17, image_size=(256, 704), cameras=_ring_cameras(6, 560.0),
                              object_count=(10, 30)),
            model=ModelConfig(backbone_widths=(32, 48, 136, 1536), neck_widths=(16, 24, 64, 152),
                              num_heads=16, ffn_hidden=1024, context_channels=64, depth_bins=88,
                              depth_range=(1.0, 45.0), occ_channels=64, head_channels=64, mlp_hidden=128),
            train=TrainConfig(epochs=24, pretrain_epochs=24, batch_size=4, num_scenes=700, dtype="float32"),
        )
    if name == "kitti-shape":
        return RunConfig(
            preset=name,
            scene=SceneConfig(grid_size=(256, 256, 32), voxel_size=0.2, grid_origin=(0.0, -25.6, -2.0),
                              num_classes=20, image_size=(192, 640),
                              cameras=(CameraSpec("front", (0.0, 0.0, 1.7), 0.0, 0.0, 370.0),),
                              object_count=(5, 15)),
            model=ModelConfig(backbone_widths=(32, 48, 136, 1536), neck_widths=(16, 24, 64, 152),
                              num_heads=16, ffn_hidden=1024, context_channels=64, depth_bins=88,
                              depth_range=(1.0, 45.0), occ_channels=64, head_channels=64, mlp_hidden=128),
            train=TrainConfig(epochs=24, pretrain_epochs=24, batch_size=4, num_scenes=3834, dtype="float32"),
        )
    if name == "micro":
        return RunConfig(
            preset=name,
            scene=SceneConfig(grid_size=(8, 8, 4), voxel_size=1.0, grid_origin=(0.0, -4.0, -1.0),
                              image_size=(32, 32),
                              cameras=(CameraSpec("front_left", (0.0, 0.3, 1.5), 30.0, 0.0, 16.0),
                                       CameraSpec("front_right", (0.0, -0.3, 1.5), -30.0, 0.0, 16.0)),
                              past_frames=2, horizons=(1.0, 2.0), object_count=(1, 2)),
            model=ModelConfig(backbone_widths=(4, 4, 8, 8), neck_widths=(2, 2, 2, 2), num_heads=2,
                              ffn_hidden=16, num_layers=2, context_channels=4, depth_bins=4,
                              depth_range=(1.0, 12.0), occ_channels=4, head_channels=4, mlp_hidden=8),
            train=TrainConfig(epochs=2, pretrain_epochs=2, batch_size=1, num_scenes=2),
        )
    raise ConfigurationError(f"unknown preset {name!r}; expected one of {PRESETS}")


SECTIONS = {"scene": "scene", "model": "model", "loss": "loss", "train": "train"}


def _parse_value(key, text, current):
    text = text.strip()
    try:
        if isinstance(current, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple) or current is None:
            if current and isinstance(current[0], CameraSpec):
                raise ConfigurationError(f"{key} is preset-only and cannot be set from a config file")
            if current is None and text.lower() in ("", "none", "auto"):
                return None
            parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
            if current:
                kind = type(current[0])
            else:
                kind = float
            return tuple(kind(p.strip()) for p in parts)
        return text
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse {key} = {text!r}: {exc}") from exc


def set_option(config, dotted_key, value):
    """Set `section.field` on a RunConfig from a raw string or a typed value."""
    section_name, _, name = dotted_key.partition(".")
    if section_name not in SECTIONS or not name:
        raise ConfigurationError(f"unknown config key {dotted_key!r}")
    section = getattr(config, SECTIONS[section_name])
    if name not in {f.name for f in dataclasses.fields(section)}:
        raise ConfigurationError(f"unknown config key {dotted_key!r}")
    current = getattr(section, name)
    if isinstance(value, str) and not isinstance(current, str):
        value = _parse_value(dotted_key, value, current)
    setattr(section, name, value)


def apply_overrides(config, overrides: Dict[str, object]):
    """Return a copy of `config` with dotted-key overrides applied."""
    updated = copy_config(config)
    for key, value in overrides.items():
        set_option(updated, key, value)
    return updated


def copy_config(config):
    return RunConfig(
        preset=config.preset,
        scene=dataclasses.replace(config.scene),
        model=dataclasses.replace(config.model),
        loss=dataclasses.replace(config.loss),
        train=dataclasses.replace(config.train),
        output_dir=config.output_dir,
    )


def load_run_config(path=None, preset=None, seed=None, output_dir=None):
    """Load an INI config file on top of its preset, then apply CLI overrides."""
    parser = configparser.ConfigParser()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                parser.read_file(handle)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config {path}: {exc}") from exc

    file_preset = parser.get("run", "preset", fallback=None)
    config = make_preset(preset or file_preset or "toy")

    for section in parser.sections():
        if section == "run":
            for key, text in parser.items("run"):
                if key == "preset":
                    continue
                if key == "output_dir":
                    config.output_dir = text
                elif key == "seed":
                    config.scene.seed = config.train.seed = _parse_value("run.seed", text, 0)
                else:
                    raise ConfigurationError(f"unknown config key 'run.{key}'")
            continue
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key, text in parser.items(section):
            set_option(config, f"{section}.{key}", text)

    if seed is not None:
        config.scene.seed = config.train.seed = int(seed)
    if output_dir is not None:
        config.output_dir = str(output_dir)
    return config.validate()


def _format_value(value):
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def dump_run_config(config):
    """Render a RunConfig as INI text (camera rigs stay preset-defined)."""
    lines = ["[run]", f"preset = {config.preset}", f"output_dir = {config.output_dir}", ""]
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for f in dataclasses.fields(getattr(config, section)):
            value = getattr(getattr(config, section), f.name)
            if f.name == "cameras":
                continue
            lines.append(f"{f.name} = {'none' if value is None else _format_value(value)}")
        lines.append("")
    return "\n".join(lines)


def config_to_dict(config):
    return dataclasses.asdict(config)
