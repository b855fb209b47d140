import json

import numpy as np
import pytest
import yaml

from hazemeta import ConfigError, NumericalError
from hazemeta.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from hazemeta.config import SEED_ENV, parse_config
from hazemeta.datagen import load_image, save_image

TINY = ["--train.crop_size=32", "--train.scene_size=40", "--train.scene_bank_size=8",
        "--train.samples_per_task=2", "--train.max_steps=2", "--train.checkpoint_every=0"]
TINY_EVAL = ["--eval.n_images=1", "--eval.image_size=24"]


class TestParseConfig:
    def test_empty_file_defaults(self, tmp_path):
        (tmp_path / "c.yaml").write_text("")
        cfg = parse_config(tmp_path / "c.yaml", env={})
        t = cfg.train
        assert (t.lambda1, t.lambda2, t.lambda3, t.lambda4) == (0.5, 0.1, 1.0, 0.5)
        assert t.lr == 2e-4 and cfg.data.heldout_domains == [2]

    def test_override(self):
        assert parse_config(None, ["train.lr=1e-3"], env={}).train.lr == 1e-3

    def test_file_scientific_notation(self, tmp_path):
        (tmp_path / "c.yaml").write_text("train:\n  lr: 1e-3\n")
        assert parse_config(tmp_path / "c.yaml", env={}).train.lr == 1e-3

    def test_unknown_key_suggests(self):
        with pytest.raises(ConfigError, match="train.lr"):
            parse_config(None, ["trian.lr=1e-3"], env={})

    def test_unknown_key_in_file(self, tmp_path):
        (tmp_path / "c.yaml").write_text("train:\n  max_step: 5\n")
        with pytest.raises(ConfigError, match="train.max_steps"):
            parse_config(tmp_path / "c.yaml", env={})

    @pytest.mark.parametrize("override", ["train.max_steps=abc", "train.dcr_enabled=3", "train.lr=-1",
                                          "eval.dark_channel_patch=4", "data.heldout_domains=[0]",
                                          "ablation.variants=[bogus]"])
    def test_schema_violation(self, override):
        with pytest.raises(ConfigError):
            parse_config(None, [override], env={})

    def test_seed_precedence(self, tmp_path):
        (tmp_path / "c.yaml").write_text("train:\n  seed: 1\n")
        assert parse_config(tmp_path / "c.yaml", env={}).train.seed == 1
        assert parse_config(tmp_path / "c.yaml", env={SEED_ENV: "7"}).train.seed == 7
        assert parse_config(tmp_path / "c.yaml", ["train.seed=9"], env={SEED_ENV: "7"}).train.seed == 9

    def test_bad_seed_env(self):
        with pytest.raises(ConfigError):
            parse_config(None, env={SEED_ENV: "x"})

    def test_dump_round_trip(self, tmp_path):
        cfg = parse_config(None, ["train.lr=1e-3", "eval.n_images=3"], env={})
        again = parse_config(cfg.dump(tmp_path / "r.yaml"), env={})
        assert again.to_dict() == cfg.to_dict()


class TestExitCodes:
    def test_bad_key(self, tmp_path, capsys):
        assert main(["--workdir", str(tmp_path), "train", "--trian.lr=1"]) == EXIT_CONFIG
        assert "train.lr" in capsys.readouterr().err

    def test_stray_argument(self, tmp_path):
        assert main(["--workdir", str(tmp_path), "train", "oops"]) == EXIT_CONFIG

    def test_missing_checkpoint(self, tmp_path):
        assert main(["--workdir", str(tmp_path), "eval", "--checkpoint", "nope.pt"]) == EXIT_IO

    def test_missing_input(self, tmp_path):
        args = ["--workdir", str(tmp_path), "dehaze", "--checkpoint", "x.pt", "--input", "no.png", "--output", "o.png"]
        assert main(args) == EXIT_IO

    def test_numeric_failure(self, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise NumericalError("loss is nan", snapshot={"pixel": float("nan")})

        monkeypatch.setattr("hazemeta.trainer.fit", boom)
        assert main(["--workdir", str(tmp_path), "train", *TINY]) == EXIT_NUMERIC


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 5


def test_synth_data(tmp_path):
    args = ["--workdir", str(tmp_path), "synth-data", "--data.synth_n_per_domain=1", "--data.synth_size=24"]
    assert main(args) == EXIT_OK
    assert len((tmp_path / "data" / "train.jsonl").read_text().splitlines()) == 2
    assert (tmp_path / "data" / "resolved_config.yaml").exists()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    wd = tmp_path_factory.mktemp("cli")
    assert main(["--workdir", str(wd), "train", "--out", "run", *TINY]) == EXIT_OK
    return wd


class TestTrainEvalDehaze:
    def test_train_outputs(self, trained):
        run = trained / "run"
        assert (run / "checkpoints" / "final.pt").exists()
        assert (run / "loss_curves.png").exists() and (run / "loss_curves.svg").exists()
        cfg = yaml.safe_load((run / "resolved_config.yaml").read_text())
        assert cfg["train"]["max_steps"] == 2

    def test_rerun_from_resolved_config(self, trained):
        args = ["--workdir", str(trained), "--config", "run/resolved_config.yaml", "train", "--out", "rerun"]
        assert main(args) == EXIT_OK
        assert (trained / "rerun" / "metrics.jsonl").read_bytes() == (trained / "run" / "metrics.jsonl").read_bytes()

    def test_eval(self, trained, capsys):
        args = ["--workdir", str(trained), "eval", "--checkpoint", "run/checkpoints/final.pt", *TINY_EVAL]
        assert main(args) == EXIT_OK
        report = json.loads((trained / "eval" / "report.json").read_text())
        assert set(report["domains"]) == {"0", "1", "2"}
        assert (trained / "eval" / "report.csv").read_text().startswith("domain,psnr_mean")
        assert (trained / "eval" / "eval.png").exists()

    def test_eval_unknown_domain(self, trained):
        args = ["--workdir", str(trained), "eval", "--checkpoint", "run/checkpoints/final.pt",
                "--eval.domains=[5]", *TINY_EVAL]
        assert main(args) == EXIT_CONFIG

    def test_dehaze_with_context(self, trained, rng):
        save_image(rng.uniform(0, 1, (24, 28, 3)), trained / "in.png")
        for i in range(3):
            save_image(rng.uniform(0, 1, (24, 28, 3)), trained / "ctx" / f"c{i}.png")
        args = ["--workdir", str(trained), "dehaze", "--checkpoint", "run/checkpoints/final.pt",
                "--input", "in.png", "--output", "out.png", "--context", "ctx"]
        assert main(args) == EXIT_OK
        out = load_image(trained / "out.png")
        assert out.shape == (24, 28, 3) and np.all((out >= 0) & (out <= 1))
