"""
Network wiring, both training phases, checkpoints and the end-to-end gradient check
"""

import numpy as np
import pytest

from src.autograd.checkpoint import load_checkpoint
from src.autograd.gradcheck import END_TO_END_TOLERANCE
from src.core.ablation import ABLATION_ROWS, run_ablations
from src.core.config import apply_overrides, make_preset
from src.core.errors import CheckpointError, ContractError, NumericError
from src.core.trainer import StepRecord, TrainLog, Trainer, evaluate
from src.models.network import (ForecastOccNetwork, default_check_parameters, encoder_checksum,
                                end_to_end_grad_check, infer_shapes, set_stat_updates)
from src.world.dataset import make_samples


def loss_value(network, sample, config, phase="pretrain"):
    if phase == "pretrain":
        outputs = network.forward_current(sample)
    else:
        outputs = network.forward_forecast(sample)
    return network.compute_losses(outputs, config.loss, phase)


class TestNetwork:
    def test_current_frame_forward(self, micro_config, micro_sample):
        network = ForecastOccNetwork(micro_config)
        outputs = network.forward_current(micro_sample)
        assert len(outputs.logits) == 1 and outputs.logits[0].shape == (5, 4, 8, 8)
        assert len(outputs.depth_terms) == 2
        terms = network.compute_losses(outputs, micro_config.loss, "pretrain")
        values = terms.values()
        assert values["total"] == pytest.approx(values["task"] + values["depth"], rel=1e-12)
        assert values["fsa_huber"] is None and values["fsa_cosine"] is None

    def test_forecast_needs_pretrained_encoder(self, micro_config, micro_sample):
        with pytest.raises(CheckpointError):
            ForecastOccNetwork(micro_config).forward_forecast(micro_sample)

    def test_forecast_forward(self, micro_config, micro_sample):
        network = ForecastOccNetwork(micro_config)
        network.encoder.loaded_from_checkpoint = True
        outputs = network.forward_forecast(micro_sample)
        assert len(outputs.logits) == len(outputs.targets) == 3
        assert [pair.horizon for pair in outputs.pairs] == [1.0, 2.0]
        assert all(pair.predicted.shape == (2, 8, 2, 2) for pair in outputs.pairs)
        np.testing.assert_array_equal(outputs.targets[2], micro_sample.occupancy["ego_t"][3])
        terms = network.compute_losses(outputs, micro_config.loss, "forecast").values()
        expected = terms["task"] + 30.0 * (terms["fsa_huber"] + terms["fsa_cosine"])
        assert terms["total"] == pytest.approx(expected, rel=1e-12)
        assert terms["depth"] is None

    def test_ground_truth_pose_targets_current_frame(self, micro_config, micro_sample):
        config = apply_overrides(micro_config, {"model.future_pose_mode": "ground_truth"})
        network = ForecastOccNetwork(config)
        network.encoder.loaded_from_checkpoint = True
        ref, frame = network.future_pose(micro_sample, 2)
        assert frame == "ego_T" and ref.shape == (4, 4)
        outputs = network.forward_forecast(micro_sample, with_observed=False)
        assert outputs.pairs == []
        np.testing.assert_array_equal(outputs.targets[1], micro_sample.occupancy["ego_T"][2])

    def test_unknown_phase(self, micro_config, micro_sample):
        network = ForecastOccNetwork(micro_config)
        with pytest.raises(ContractError):
            network.compute_losses(network.forward_current(micro_sample), micro_config.loss, "finetune")

    def test_parameter_groups_partition_trainable_weights(self, micro_config):
        network = ForecastOccNetwork(micro_config)
        network.encoder.freeze()
        forecasting = {id(p) for p in network.forecasting_parameters()}
        base = {id(p) for p in network.base_parameters()}
        encoder = {id(p) for p in network.encoder.parameters()}
        assert not forecasting & base and not encoder & (forecasting | base)
        assert len(forecasting | base | encoder) == len(network.parameters())

    def test_predict(self, micro_config, micro_sample):
        network = ForecastOccNetwork(micro_config)
        network.encoder.loaded_from_checkpoint = True
        network.eval()
        prediction = network.predict(micro_sample)
        assert len(prediction["classes"]) == 3
        assert all(grid.shape == (4, 8, 8) and grid.dtype == np.uint8 for grid in prediction["classes"])
        np.testing.assert_array_equal(prediction["classes"][1], np.argmax(prediction["logits"][1], axis=0))

    def test_pretrained_state_round_trip(self, micro_config):
        source = ForecastOccNetwork(micro_config)
        target = ForecastOccNetwork(micro_config)
        target.load_pretrained(source.pretrained_state())
        assert target.encoder.loaded_from_checkpoint
        assert encoder_checksum(target) == encoder_checksum(source)
        assert not any(name.startswith("forecaster.") for name in source.pretrained_state())
        with pytest.raises(CheckpointError):
            target.load_pretrained({k: v for k, v in source.pretrained_state().items()
                                    if not k.startswith("decoder.")})

    def test_stat_updates_toggle(self, micro_config, micro_sample):
        network = ForecastOccNetwork(micro_config)
        set_stat_updates(network, False)
        before = encoder_checksum(network)
        network.forward_current(micro_sample)
        assert encoder_checksum(network) == before
        set_stat_updates(network, True)
        network.forward_current(micro_sample)
        assert encoder_checksum(network) != before

    def test_micro_shapes(self, micro_config):
        shapes, summary = infer_shapes(micro_config)
        assert shapes["feature_2d"] == (2, 8, 2, 2)
        assert shapes["queries"] == (4, 2, 8)
        assert shapes["lifted"] == (4, 4, 8, 8)
        assert shapes["logits"] == (5, 4, 8, 8)
        assert summary["total"] == sum(v for k, v in summary.items() if k != "total")

    def test_paper_shapes(self):
        shapes, _ = infer_shapes(make_preset("paper-shape"), real_encoder=False)
        assert shapes["feature_2d"] == (6, 256, 16, 44)
        assert shapes["depth"] == (6, 88, 16, 44)
        assert shapes["context"] == (6, 64, 16, 44)
        assert shapes["queries"] == (16 * 44, 6, 256)
        assert shapes["volume_3d"] == (64, 16, 200, 200)
        assert shapes["logits"] == (17, 16, 200, 200)

    def test_checked_parameters_are_weights(self, micro_config):
        names = default_check_parameters(ForecastOccNetwork(micro_config))
        assert "decoder.head.fc2.weight" in names
        assert "forecaster.synthesizer.fc1.weight" in names
        assert "forecaster.embeddings.E_time" in names
        assert not any(name.endswith("bias") for name in names)


class TestTrainLog:
    def test_steps_must_increase(self):
        log = TrainLog()
        log.append(StepRecord("pretrain", 0, 1, total=1.0))
        with pytest.raises(ContractError):
            log.append(StepRecord("pretrain", 0, 1, total=0.5))

    def test_csv(self, tmp_path):
        log = TrainLog()
        log.append(StepRecord("forecast", 0, 1, total=1.0, task=0.5, learning_rates={"base": 1e-5}))
        lines = open(log.write_csv(tmp_path / "log.csv")).read().splitlines()
        assert lines[0] == "phase,epoch,step,total,task,fsa_huber,fsa_cosine,depth,lr_base,wall_time"
        assert lines[1].startswith("forecast,0,1,1.0,0.5,,,,1e-05,")


class TestTrainer:
    def test_pretrain_respects_step_budget(self, micro_config, micro_samples):
        config = apply_overrides(micro_config, {"train.max_steps": 2})
        trainer = Trainer(config, micro_samples)
        trainer.pretrain()
        assert trainer.log.column("step") == [1, 2]
        assert all(d is not None for d in trainer.log.column("depth"))
        assert trainer.network.encoder.loaded_from_checkpoint

    def test_forecast_needs_pretraining(self, micro_config, micro_samples):
        with pytest.raises(CheckpointError):
            Trainer(micro_config, micro_samples).train_forecast()

    def test_non_finite_loss_aborts(self, micro_config, micro_samples):
        trainer = Trainer(micro_config, micro_samples)
        trainer.network.decoder.head.fc2.bias.data[:] = np.nan
        with pytest.raises(NumericError, match="step 1"):
            trainer.pretrain()

    @pytest.mark.slow
    def test_forecast_phase(self, micro_config, micro_samples):
        trainer = Trainer(micro_config, micro_samples)
        trainer.pretrain()
        before = encoder_checksum(trainer.network)
        trainer.train_forecast()
        assert encoder_checksum(trainer.network) == before

        history = [(epoch, lr) for epoch, lr in trainer.log.learning_rate_history("forecasting") if lr is not None]
        assert [epoch for epoch, _ in history] == [0, 0, 1, 1]
        assert [lr for _, lr in history] == pytest.approx([1e-3, 1e-3, 1e-4, 1e-4])
        assert set(lr for _, lr in trainer.log.learning_rate_history("base") if lr is not None) == {1e-5}
        assert trainer.log.column("phase")[-1] == "forecast"

    @pytest.mark.slow
    def test_fsa_only_keeps_downstream_layers(self, micro_config, micro_samples):
        config = apply_overrides(micro_config, {"loss.use_task": False, "train.max_steps": 1})
        trainer = Trainer(config, micro_samples)
        trainer.pretrain()
        downstream = [trainer.network.view_transformer, trainer.network.decoder]
        before = [{k: v.copy() for k, v in module.state_dict().items()} for module in downstream]
        trainer.train_forecast()
        for module, state in zip(downstream, before):
            after = module.state_dict()
            assert any(k.endswith("running_mean") for k in after)
            for key, value in state.items():
                np.testing.assert_array_equal(after[key], value, err_msg=key)
        assert all(task is None for task in trainer.log.column("task", phase="forecast"))

    @pytest.mark.slow
    def test_runs_are_deterministic(self, micro_config, micro_samples):
        config = apply_overrides(micro_config, {"train.max_steps": 2})
        first, second = Trainer(config, micro_samples), Trainer(config, micro_samples)
        first.pretrain()
        second.pretrain()
        assert first.log.column("total") == second.log.column("total")

    @pytest.mark.slow
    def test_pretraining_reduces_loss_on_one_scene(self, micro_config, micro_samples):
        config = apply_overrides(micro_config, {"train.pretrain_lr": 1e-2, "train.pretrain_epochs": 20})
        trainer = Trainer(config, micro_samples[:1])
        trainer.pretrain()
        totals = trainer.log.column("total")
        assert np.mean(totals[-3:]) < np.mean(totals[:3])

    @pytest.mark.slow
    def test_checkpoint_round_trip(self, tmp_path, micro_config, micro_samples):
        config = apply_overrides(micro_config, {"train.max_steps": 1})
        trainer = Trainer(config, micro_samples)
        trainer.pretrain()
        path = trainer.save(tmp_path / "pretrain.ckpt", "pretrain")
        state, meta = load_checkpoint(path, expected_preset="micro")
        assert meta["phase"] == "pretrain" and meta["encoder_sha256"] == encoder_checksum(trainer.network)
        restored = ForecastOccNetwork(config).load_full(state)
        trainer.network.eval()
        restored.eval()
        sample = micro_samples[0]
        assert loss_value(restored, sample, config).values() == loss_value(trainer.network, sample, config).values()

    @pytest.mark.slow
    def test_forecast_runs_are_deterministic(self, micro_config, micro_samples):
        config = apply_overrides(micro_config, {"train.max_steps": 2})
        runs = [Trainer(config, micro_samples) for _ in range(2)]
        for trainer in runs:
            trainer.pretrain()
            trainer.train_forecast()
        first, second = (trainer.log.column("total", phase="forecast") for trainer in runs)
        assert len(first) == 2 and first == second

    @pytest.mark.slow
    def test_forecast_checkpoint_round_trip(self, tmp_path, micro_config, micro_samples):
        config = apply_overrides(micro_config, {"train.max_steps": 1})
        trainer = Trainer(config, micro_samples)
        trainer.pretrain()
        trainer.train_forecast()
        state, meta = load_checkpoint(trainer.save(tmp_path / "forecast.ckpt", "forecast"), expected_preset="micro")
        assert meta["phase"] == "forecast" and meta["forecaster"] == "forecastocc"
        restored = ForecastOccNetwork(config).load_full(state)
        trainer.network.eval()
        restored.eval()
        sample = micro_samples[1]
        expected = loss_value(trainer.network, sample, config, "forecast").values()
        assert loss_value(restored, sample, config, "forecast").values() == expected

    @pytest.mark.slow
    def test_evaluate_reports(self, micro_config, micro_samples):
        network = ForecastOccNetwork(micro_config)
        network.encoder.loaded_from_checkpoint = True
        predictions = {}
        current, horizons = evaluate(network, micro_samples, micro_config, predictions)
        assert current.horizons == (0.0,) and horizons.horizons == (1.0, 2.0)
        assert sorted(predictions) == sorted(sample.seed for sample in micro_samples)
        assert all(0.0 <= v <= 100.0 for v in horizons.iou + horizons.miou)


@pytest.mark.slow
class TestEndToEndGradients:
    def test_forecastocc_pipeline(self, micro_config, micro_sample):
        network = ForecastOccNetwork(micro_config)
        network.train()
        errors = end_to_end_grad_check(network, micro_sample, micro_config.loss)
        assert errors and max(errors.values()) < END_TO_END_TOLERANCE
        assert any(name.startswith("encoder.") for name in errors)
        assert any(name.startswith("forecaster.") for name in errors)

    def test_naive_pipeline(self, micro_config, micro_sample):
        config = apply_overrides(micro_config, {"model.forecaster": "naive"})
        network = ForecastOccNetwork(config)
        network.train()
        errors = end_to_end_grad_check(network, micro_sample, config.loss)
        assert max(errors.values()) < END_TO_END_TOLERANCE


@pytest.mark.slow
class TestToyTraining:
    def test_overfits_one_scene(self, toy_config):
        samples = make_samples(toy_config.scene, 1, base_seed=0)
        config = apply_overrides(toy_config, {"train.pretrain_lr": 1e-3, "train.pretrain_epochs": 300,
                                              "train.max_steps": 300, "train.batch_size": 1})
        trainer = Trainer(config, samples)
        trainer.pretrain()
        totals = trainer.log.column("total")
        assert len(totals) == 300
        assert totals[-1] <= 0.1 * totals[4]
        current, _ = evaluate(trainer.network, samples, config)
        assert current.miou[0] >= 80.0


ORDERED_ROWS = {"loss/task", "loss/fsa", "loss/task+fsa", "query_init/learned", "query_init/current_frame",
                "embeddings/none", "embeddings/T+S+C", "forecaster/naive", "forecaster/forecastocc"}


@pytest.fixture(scope="module")
def ablation_results():
    config = make_preset("toy")
    rows = [row for row in ABLATION_ROWS if f"{row.group}/{row.name}" in ORDERED_ROWS]
    train_samples = make_samples(config.scene, 16, base_seed=100)
    eval_samples = make_samples(config.scene, 4, base_seed=200)
    results = run_ablations(config, train_samples, eval_samples, seeds=(0, 1, 2), rows=rows)
    return {key: result.avg_miou for key, result in results.items()}


@pytest.mark.slow
@pytest.mark.parametrize("better, worse", [
    ("loss/task+fsa", "loss/fsa"),
    ("loss/fsa", "loss/task"),
    ("query_init/current_frame", "query_init/learned"),
    ("embeddings/T+S+C", "embeddings/none"),
    ("forecaster/forecastocc", "forecaster/naive"),
])
def test_ablation_ordering(ablation_results, better, worse):
    assert ablation_results[better] >= ablation_results[worse]
