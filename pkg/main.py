"""
ForecastOcc desk-scale pipeline
Synthetic multi-camera scenes, image-feature forecasting and semantic occupancy
"""

import argparse
import logging
import os
import sys

# Add src to path for imports
sys.path.append(os.path.join(os.path.dirname(__file__), 'src'))

from src.autograd import nn
from src.autograd.checkpoint import load_checkpoint
from src.autograd.gradcheck import END_TO_END_TOLERANCE, GRAD_TOLERANCE, run_op_suite
from src.autograd.tensor import set_default_dtype
from src.core.ablation import GROUPS, format_table, run_ablations, select_rows
from src.core.config import apply_overrides, dump_run_config, load_run_config, make_preset
from src.core.errors import ConfigurationError, ForecastOccError, NumericError
from src.core.trainer import Trainer, evaluate
from src.evaluation.export import export_predictions
from src.models.network import ForecastOccNetwork, end_to_end_grad_check, infer_shapes
from src.world.dataset import load_dataset, load_scene, make_samples, write_dataset

logger = logging.getLogger("forecastocc")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def build_parser():
    parser = argparse.ArgumentParser(prog="forecastocc", description=__doc__.strip().splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--preset", choices=("toy", "paper-shape", "kitti-shape", "micro"))
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="run output directory")
    common.add_argument("--log-level", default="INFO")

    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    gen.add_argument("--count", type=int, help="number of scenes (default: train.num_scenes)")
    gen.add_argument("--data", help="dataset directory (default: <out>/data)")

    pre = sub.add_parser("pretrain", parents=[common], help="phase 1: current-frame occupancy")
    pre.add_argument("--data")

    fc = sub.add_parser("train-forecast", parents=[common], help="phase 2: forecasting")
    fc.add_argument("--data")
    fc.add_argument("--checkpoint", help="pretrained checkpoint (default: <out>/pretrain.ckpt)")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on held-out scenes")
    ev.add_argument("--data")
    ev.add_argument("--checkpoint", help="default: <out>/forecast.ckpt")

    ex = sub.add_parser("export", parents=[common], help="export predictions of one scene")
    ex.add_argument("--scene", required=True, help="scene directory")
    ex.add_argument("--checkpoint", help="default: <out>/forecast.ckpt")

    sub.add_parser("grad-check", parents=[common], help="finite-difference gradient checks")
    sub.add_parser("shape-check", parents=[common], help="shape contract of every stage")

    ab = sub.add_parser("ablations", parents=[common], help="ablation table (skeleton or --run)")
    ab.add_argument("--groups", nargs="*", choices=GROUPS)
    ab.add_argument("--run", action="store_true", help="train and evaluate every row")
    ab.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ab.add_argument("--eval-count", type=int, default=4)
    return parser


def _data_dir(args, config):
    return args.data or os.path.join(config.output_dir, "data")


def _write_text(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(text)
    return path


def _load_network(config, path):
    set_default_dtype(config.train.dtype)
    state, meta = load_checkpoint(path, expected_preset=config.preset)
    if meta.get("forecaster") not in (None, config.model.forecaster):
        raise ConfigurationError(f"checkpoint {path} holds a {meta['forecaster']} forecaster, "
                                 f"config asks for {config.model.forecaster}")
    network = ForecastOccNetwork(config)
    return network.load_full(state)


def cmd_gen_data(args, config):
    count = config.train.num_scenes if args.count is None else args.count
    if count < 0:
        raise ConfigurationError(f"--count must be >= 0, got {count}")
    write_dataset(_data_dir(args, config), config, count, workers=config.train.workers)
    return 0


def cmd_pretrain(args, config):
    trainer = Trainer(config, load_dataset(_data_dir(args, config), config.scene))
    trainer.pretrain()
    trainer.log.write_csv(os.path.join(config.output_dir, "pretrain_log.csv"))
    trainer.save(os.path.join(config.output_dir, "pretrain.ckpt"), "pretrain")
    return 0


def cmd_train_forecast(args, config):
    path = args.checkpoint or os.path.join(config.output_dir, "pretrain.ckpt")
    set_default_dtype(config.train.dtype)
    state, _ = load_checkpoint(path, expected_preset=config.preset)
    trainer = Trainer(config, load_dataset(_data_dir(args, config), config.scene))
    trainer.network.load_pretrained(state)
    trainer.train_forecast()
    trainer.log.write_csv(os.path.join(config.output_dir, "train_log.csv"))
    trainer.save(os.path.join(config.output_dir, "forecast.ckpt"), "forecast")
    return 0


def cmd_eval(args, config):
    network = _load_network(config, args.checkpoint or os.path.join(config.output_dir, "forecast.ckpt"))
    samples = load_dataset(_data_dir(args, config), config.scene)
    predictions = {}
    current, horizons = evaluate(network, samples, config, predictions)
    current.write(config.output_dir, "current")
    horizons.write(config.output_dir, "report")
    for seed, prediction in predictions.items():
        export_predictions(prediction, os.path.join(config.output_dir, "predictions", f"scene_{seed}"),
                           config.scene.horizons, config.scene.num_classes)
    print(horizons.to_table())
    return 0


def cmd_export(args, config):
    network = _load_network(config, args.checkpoint or os.path.join(config.output_dir, "forecast.ckpt"))
    sample = load_scene(args.scene, config.scene)
    network.eval()
    export_predictions(network.predict(sample), os.path.join(config.output_dir, "export", f"scene_{sample.seed}"),
                       config.scene.horizons, config.scene.num_classes)
    return 0


def cmd_grad_check(args, config):
    set_default_dtype("float64")
    results = run_op_suite()
    failed = {name: err for name, err in results.items() if err >= GRAD_TOLERANCE}

    micro = config if config.preset == "micro" else apply_overrides(make_preset("micro"), {})
    micro.train.dtype = "float64"
    nn.manual_seed(micro.train.seed)
    sample = make_samples(micro.scene, 1, base_seed=micro.scene.seed)[0]
    network = ForecastOccNetwork(micro)
    network.train()
    for name, err in end_to_end_grad_check(network, sample, micro.loss).items():
        if err >= END_TO_END_TOLERANCE:
            failed[f"end-to-end {name}"] = err
    if failed:
        raise NumericError("gradient check failed: " + ", ".join(f"{k}={v:.2e}" for k, v in failed.items()))
    logger.info("All %d op checks and the end-to-end check passed", len(results))
    return 0


def cmd_shape_check(args, config):
    shapes, summary = infer_shapes(config)
    scene, model = config.scene, config.model
    nx, ny, nz = scene.grid_size
    height, width = scene.feature_size
    cameras, channels = scene.num_cameras, model.feature_channels
    expected = {
        "feature_2d": (cameras, channels, height, width),
        "context": (cameras, model.context_channels, height, width),
        "depth": (cameras, model.depth_bins, height, width),
        "volume_3d": (model.occ_channels, nz, ny, nx),
        "logits": (scene.num_classes, nz, ny, nx),
    }
    if "queries" in shapes:
        expected["queries"] = (height * width, cameras, channels)
    lines = [f"{name:<12} {shape}" for name, shape in shapes.items()]
    lines += [f"params {name:<20} {count}" for name, count in summary.items()]
    print("\n".join(lines))
    wrong = {name: (shapes[name], shape) for name, shape in expected.items() if tuple(shapes[name]) != shape}
    if wrong:
        raise NumericError(f"shape contract violated: {wrong}")
    return 0


def cmd_ablations(args, config):
    rows = select_rows(args.groups)
    results = None
    if args.run:
        train = make_samples(config.scene, config.train.num_scenes, base_seed=config.scene.seed,
                             workers=config.train.workers)
        held_out = make_samples(config.scene, args.eval_count, base_seed=config.scene.seed + 100000,
                                workers=config.train.workers)
        results = run_ablations(config, train, held_out, seeds=tuple(args.seeds), rows=rows)
    table = format_table(rows, config.scene.horizons, results)
    _write_text(os.path.join(config.output_dir, "ablations.txt"), table)
    print(table)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-forecast": cmd_train_forecast,
    "eval": cmd_eval,
    "export": cmd_export,
    "grad-check": cmd_grad_check,
    "shape-check": cmd_shape_check,
    "ablations": cmd_ablations,
}


def main(argv=None):
    """Main entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format=LOG_FORMAT)
    try:
        config = load_run_config(args.config, preset=args.preset, seed=args.seed, output_dir=args.out)
        logger.debug("Run configuration:\n%s", dump_run_config(config))
        return COMMANDS[args.command](args, config)
    except ConfigurationError as exc:
        logger.error("configuration error: %s", exc)
        return 2
    except NumericError as exc:
        logger.error("numeric failure: %s", exc)
        return 3
    except ForecastOccError as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
