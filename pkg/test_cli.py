"""
Command-line harness and ablation rows
"""

import os

import pytest

from main import build_parser, main
from src.core.ablation import (ABLATION_ROWS, GROUPS, AblationResult, format_table, row_configs, run_ablations,
                               select_rows)
from src.core.config import make_preset
from src.core.errors import ConfigurationError
from src.world.dataset import read_manifest


def run(*argv):
    return main(list(argv) + ["--log-level", "WARNING"])


class TestParser:
    def test_subcommands(self):
        parser = build_parser()
        for command in ("gen-data", "pretrain", "train-forecast", "eval", "export", "grad-check", "shape-check",
                        "ablations"):
            extra = ["--scene", "x"] if command == "export" else []
            assert parser.parse_args([command] + extra).command == command

    def test_unknown_preset(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["shape-check", "--preset", "huge"])


class TestCommands:
    def test_gen_data_without_scenes(self, tmp_path):
        assert run("gen-data", "--preset", "micro", "--count", "0", "--out", str(tmp_path)) == 0
        assert os.listdir(tmp_path / "data") == ["manifest.json"]
        assert read_manifest(tmp_path / "data")["scenes"] == []

    def test_gen_data_writes_scenes(self, tmp_path):
        assert run("gen-data", "--preset", "micro", "--count", "1", "--seed", "7", "--out", str(tmp_path)) == 0
        assert read_manifest(tmp_path / "data")["scenes"] == ["scene_7"]

    def test_negative_count(self, tmp_path):
        assert run("gen-data", "--preset", "micro", "--count", "-1", "--out", str(tmp_path)) == 2

    def test_missing_config_file(self, tmp_path):
        assert run("shape-check", "--config", str(tmp_path / "absent.ini")) == 2

    def test_invalid_config_value(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[loss]\ndelta = -2\n")
        assert run("shape-check", "--config", str(path)) == 2

    def test_shape_check(self, tmp_path, capsys):
        assert run("shape-check", "--preset", "micro", "--out", str(tmp_path)) == 0
        assert "logits" in capsys.readouterr().out

    def test_missing_checkpoint(self, tmp_path):
        assert run("train-forecast", "--preset", "micro", "--out", str(tmp_path)) == 1
        assert run("eval", "--preset", "micro", "--out", str(tmp_path)) == 1

    def test_ablation_skeleton(self, tmp_path):
        assert run("ablations", "--preset", "micro", "--groups", "layers", "--out", str(tmp_path)) == 0
        table = (tmp_path / "ablations.txt").read_text().splitlines()
        assert len(table) == 2 + 4
        assert table[2].split()[:2] == ["layers", "L=1"] and table[2].split()[2] == "-"

    @pytest.mark.slow
    def test_pipeline(self, tmp_path):
        config = tmp_path / "run.ini"
        config.write_text(f"[run]\npreset = micro\noutput_dir = {tmp_path / 'run'}\n\n[train]\nmax_steps = 1\n")
        assert run("gen-data", "--config", str(config), "--count", "2") == 0
        assert run("pretrain", "--config", str(config)) == 0
        assert run("train-forecast", "--config", str(config)) == 0
        assert run("eval", "--config", str(config)) == 0
        assert run("export", "--config", str(config), "--scene", str(tmp_path / "run" / "data" / "scene_0")) == 0
        out = tmp_path / "run"
        for name in ("pretrain.ckpt", "forecast.ckpt", "pretrain_log.csv", "train_log.csv", "report.csv",
                     "report.txt", "current.csv"):
            assert (out / name).exists(), name
        assert sorted(os.listdir(out / "export" / "scene_0")) == ["1s.lgt", "1s.occ", "2s.lgt", "2s.occ",
                                                                  "current.lgt", "current.occ", "summary.txt"]
        assert (out / "predictions" / "scene_1" / "2s.occ").exists()

    @pytest.mark.slow
    def test_checkpoint_preset_mismatch(self, tmp_path):
        config = tmp_path / "run.ini"
        config.write_text(f"[run]\npreset = micro\noutput_dir = {tmp_path}\n\n[train]\nmax_steps = 1\n")
        assert run("gen-data", "--config", str(config), "--count", "1") == 0
        assert run("pretrain", "--config", str(config)) == 0
        os.replace(tmp_path / "pretrain.ckpt", tmp_path / "forecast.ckpt")
        assert run("eval", "--preset", "toy", "--out", str(tmp_path)) == 2

    @pytest.mark.slow
    def test_grad_check(self, tmp_path):
        assert run("grad-check", "--preset", "micro", "--out", str(tmp_path)) == 0


class TestAblations:
    def test_row_groups(self):
        assert GROUPS == ("loss", "fsa_terms", "query_init", "embeddings", "layers", "forecaster")
        assert len(select_rows(["embeddings"])) == 7
        assert [row.name for row in select_rows(["layers"])] == ["L=1", "L=2", "L=3", "L=4"]
        assert len(select_rows()) == len(ABLATION_ROWS)
        with pytest.raises(ConfigurationError):
            select_rows(["depth"])

    def test_every_row_is_a_valid_config(self):
        configs = dict((f"{row.group}/{row.name}", config) for row, config in row_configs(make_preset("toy")))
        assert configs["loss/fsa"].loss.use_task is False
        assert configs["embeddings/T+C"].model.use_scale_embedding is False
        assert configs["layers/L=4"].model.num_layers == 4
        assert configs["forecaster/naive"].model.forecaster == "naive"

    def test_table_with_results(self):
        rows = select_rows(["query_init"])
        result = AblationResult(rows[0], miou=[30.0, 20.0], iou=[40.0, 35.0], seeds=[0])
        table = format_table(rows, (1.0, 2.0), {"query_init/learned": result}).splitlines()
        assert table[0].split() == ["group", "row", "1s", "2s", "Avg.", "IoU"]
        assert table[2].split()[2:] == ["30.00", "20.00", "25.00", "37.50"]
        assert table[3].split()[2:] == ["-"] * 4

    @pytest.mark.slow
    def test_run_one_row(self, micro_config, micro_samples):
        config = micro_config
        config.train.max_steps = 1
        rows = select_rows(["layers"])[:1]
        results = run_ablations(config, micro_samples, micro_samples[:1], seeds=(0,), rows=rows)
        result = results["layers/L=1"]
        assert len(result.miou) == 2 and result.seeds == [0]
