"""Command-line surface: subcommands, config files, exit codes."""

import json

import numpy as np
import pytest

from demetric.cli import build_configs, main, parse_config_file
from demetric.errors import ConfigError


@pytest.fixture()
def data_dir(tmp_path):
    out = tmp_path / "data"
    code = main(["gen-data", str(out), "--per-class", "4", "--seed", "1"])
    assert code == 0
    return out


def _write_config(path, **overrides):
    base = {"I": 1, "J": 2, "d": 16, "base_lr": "1e-3", "iterations": 2,
            "m": 3, "k": 2, "seed": 0}
    base.update(overrides)
    path.write_text("".join(f"{k}={v}\n" for k, v in base.items()))
    return path


class TestConfigParsing:
    def test_key_value_lines_with_comments(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("# full line comment\nI=2\nJ = 3  # trailing comment\n\nd=36\n")
        entries = parse_config_file(cfg)
        assert entries == {"I": "2", "J": "3", "d": "36"}

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="lr_schedule"):
            build_configs({"lr_schedule": "cosine"})

    def test_resolves_both_configs(self):
        model_cfg, train_cfg = build_configs(
            {"I": "2", "J": "2", "d": "32", "T": "5", "use_cam": "false",
             "lambda1": "0.02", "m": "3", "k": "2"})
        assert model_cfg.I == 2 and model_cfg.use_cam is False
        assert model_cfg.walk_steps == 5 and train_cfg.T == 5
        assert train_cfg.lambda1 == 0.02

    def test_malformed_line_rejected(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("just words\n")
        with pytest.raises(ConfigError):
            parse_config_file(cfg)

    def test_bad_boolean_rejected(self):
        with pytest.raises(ConfigError):
            build_configs({"use_cam": "maybe"})


class TestGenData:
    def test_writes_images_labels_split_manifest(self, data_dir):
        assert (data_dir / "labels.csv").exists()
        assert (data_dir / "split.csv").exists()
        manifest = json.loads((data_dir / "manifest.json").read_text())
        assert manifest["command"] == "gen-data"
        assert manifest["seed"] == 1
        assert len(list(data_dir.glob("*.pgm"))) == manifest["images"]

    def test_split_file_marks_roles(self, data_dir):
        lines = (data_dir / "split.csv").read_text().strip().splitlines()
        assert lines[0] == "class_id,split"
        roles = {line.split(",")[1] for line in lines[1:]}
        assert roles == {"seen", "unseen"}


class TestTrain:
    def test_zero_iterations_writes_initial_checkpoint(self, tmp_path, data_dir):
        cfg = _write_config(tmp_path / "cfg.txt", iterations=0)
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--data", str(data_dir),
                     "--out", str(out)]) == 0
        assert (out / "model.ckpt").exists()
        assert (out / "manifest.json").exists()

    def test_training_writes_log_and_manifest(self, tmp_path, data_dir):
        cfg = _write_config(tmp_path / "cfg.txt")
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--data", str(data_dir),
                     "--out", str(out)]) == 0
        log = (out / "training_log.csv").read_text().strip().splitlines()
        assert log[0] == "step,L_metric,L_act,L_ntri,L_adv"
        assert len(log) == 3
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["iterations"] == 2

    def test_unknown_config_key_is_usage_error(self, tmp_path, data_dir, capsys):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("momentum=0.9\n")
        code = main(["train", "--config", str(cfg), "--data", str(data_dir),
                     "--out", str(tmp_path / "run")])
        assert code == 1
        assert "momentum" in capsys.readouterr().err

    def test_missing_config_file_is_usage_error(self, tmp_path, data_dir):
        code = main(["train", "--config", str(tmp_path / "absent.txt"),
                     "--data", str(data_dir), "--out", str(tmp_path / "run")])
        assert code == 1

    def test_missing_subcommand_is_usage_error(self):
        assert main([]) == 1


class TestEval:
    def test_emits_one_row_per_k(self, tmp_path, data_dir, capsys):
        cfg = _write_config(tmp_path / "cfg.txt", iterations=0)
        run = tmp_path / "run"
        main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(run)])
        capsys.readouterr()
        code = main(["eval", "--checkpoint", str(run / "model.ckpt"),
                     "--data", str(data_dir), "--ks", "1,2,4,8",
                     "--out", str(tmp_path / "ev")])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "K,recall"
        assert len(lines) == 5
        recalls = [float(line.split(",")[1]) for line in lines[1:]]
        assert recalls == sorted(recalls)
        assert (tmp_path / "ev" / "recall.csv").exists()
        assert (tmp_path / "ev" / "manifest.json").exists()


class TestAttend:
    def test_writes_proposals_and_gates(self, tmp_path, data_dir, capsys):
        cfg = _write_config(tmp_path / "cfg.txt", iterations=0, I=2, J=2, d=16)
        run = tmp_path / "run"
        main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(run)])
        image = sorted(data_dir.glob("*.pgm"))[0]
        out = tmp_path / "att"
        code = main(["attend", "--checkpoint", str(run / "model.ckpt"),
                     "--image", str(image), "--out", str(out)])
        assert code == 0
        assert (out / "proposal_scale0.pgm").exists()
        assert (out / "proposal_scale1.pgm").exists()
        gates = (out / "gates.csv").read_text().strip().splitlines()
        assert gates[0] == "scale,branch,channel,gate"
        # 2 scales x 2 branches x 32 channels
        assert len(gates) == 1 + 2 * 2 * 32
        values = np.array([float(line.split(",")[3]) for line in gates[1:]])
        assert np.all((values > 0.0) & (values < 1.0))


class TestGradcheckCommand:
    def test_exits_zero_and_reports_per_op(self, tmp_path, capsys):
        code = main(["gradcheck", "--out", str(tmp_path)])
        assert code == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert out[0] == "operation,max_rel_err,tolerance,status"
        assert all(line.endswith(",ok") for line in out[1:])
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["failures"] == 0
