import numpy as np
import pytest

from lvm.cli import main, read_metrics_csv, reconstruct_frames
from lvm.replay import read_episode_file
from lvm.trainer import Trainer

TINY_ARGS = [
    "--set", "env.img_size=8", "--set", "env.max_steps=60",
    "--set", "model.deter_size=16", "--set", "model.stoch_size=8",
    "--set", "model.embed_size=16", "--set", "model.hidden_size=16",
    "--set", "model.base_channels=4",
    "--set", "train.seed_episodes=2", "--set", "train.max_epochs=2",
    "--set", "train.train_freq=2", "--set", "train.batch_size=4",
    "--set", "train.seq_len=8", "--set", "train.horizon=4",
    "--set", "train.traj_num=2", "--set", "train.pretrain_updates=2",
    "--set", "train.eval_episodes=2", "--set", "train.eval_every=2",
]


def run_tiny_train(out_dir, seed=0, extra=()):
    rc = main(["train", "--seed", str(seed), "--out", str(out_dir),
               *TINY_ARGS, *extra])
    assert rc == 0
    return out_dir


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_tiny_train(out)


class TestTrain:
    def test_identical_seed_and_config_give_identical_metrics(self, tmp_path):
        run_tiny_train(tmp_path / "a", seed=7)
        run_tiny_train(tmp_path / "b", seed=7)
        assert ((tmp_path / "a" / "metrics.csv").read_text()
                == (tmp_path / "b" / "metrics.csv").read_text())

    def test_outputs_exist(self, trained_run):
        assert (trained_run / "metrics.csv").is_file()
        assert (trained_run / "eval_report.txt").is_file()
        assert (trained_run / "checkpoint" / "trainer.ckpt").is_file()
        report = (trained_run / "eval_report.txt").read_text()
        assert "mean_return=" in report and "mean_abs_lateral_error=" in report

    def test_missing_config_file_fails_and_names_the_path(self, tmp_path, capsys):
        rc = main(["train", "--config", str(tmp_path / "nope.cfg")])
        assert rc != 0
        assert "nope.cfg" in capsys.readouterr().err

    def test_unknown_config_key_fails_without_side_effects(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("train.warp_speed=9\n")
        out = tmp_path / "out"
        rc = main(["train", "--config", str(cfg), "--out", str(out)])
        assert rc != 0
        assert "warp_speed" in capsys.readouterr().err
        assert not out.exists()

    def test_invalid_value_fails_without_side_effects(self, tmp_path, capsys):
        out = tmp_path / "out"
        rc = main(["train", "--out", str(out), "--set", "train.gamma=1.5"])
        assert rc != 0
        assert "gamma" in capsys.readouterr().err
        assert not out.exists()

    def test_single_critic_flag_is_echoed_in_the_csv_header(self, tmp_path):
        run_tiny_train(tmp_path / "run", extra=["--single-critic"])
        text = (tmp_path / "run" / "metrics.csv").read_text()
        assert "# train.single_critic=True" in text

    def test_precedence_defaults_then_file_then_flags(self, tmp_path):
        from lvm.config import TrainerConfig, load_run_config
        assert TrainerConfig().batch_size == 50  # layer 1: defaults
        cfg_file = tmp_path / "own.cfg"
        cfg_file.write_text("train.batch_size=16\nseed=3\n")
        file_only = load_run_config(str(cfg_file))
        assert file_only.train.batch_size == 16 and file_only.seed == 3
        both = load_run_config(str(cfg_file), {"train.batch_size": "8", "seed": "4"})
        assert both.train.batch_size == 8 and both.seed == 4

    def test_lvm_out_env_var_is_the_default_output_root(self, monkeypatch, tmp_path):
        from lvm.config import RunConfig
        monkeypatch.setenv("LVM_OUT", str(tmp_path / "envroot"))
        assert RunConfig().resolved_out_dir() == str(tmp_path / "envroot")
        assert RunConfig(out_dir="explicit").resolved_out_dir() == "explicit"
        monkeypatch.delenv("LVM_OUT")
        assert RunConfig().resolved_out_dir() == "runs"

    def test_shipped_config_files_parse_and_validate(self):
        from pathlib import Path
        from lvm.config import load_run_config
        root = Path(__file__).resolve().parent.parent / "configs"
        desk = load_run_config(str(root / "desk.cfg"))
        assert desk.env.img_size == 16 and desk.model.deter_size == 64
        paper = load_run_config(str(root / "paper.cfg"))
        assert paper.env.img_size == 64 and paper.model.stoch_size == 60


class TestEval:
    def test_cli_default_episode_count_is_twenty(self):
        from lvm.cli import build_parser
        args = build_parser().parse_args(["eval", "--checkpoint", "x"])
        assert args.episodes == 20

    def test_eval_writes_one_row_per_episode(self, trained_run, tmp_path, capsys):
        out_csv = tmp_path / "episodes.csv"
        rc = main(["eval", "--checkpoint", str(trained_run / "checkpoint"),
                   "--episodes", "3", "--out", str(out_csv)])
        assert rc == 0
        lines = out_csv.read_text().splitlines()
        assert lines[0].startswith("episode,")
        assert len(lines) == 1 + 3
        assert "mean_return=" in capsys.readouterr().out

    def test_same_checkpoint_and_seed_give_identical_reports(self, trained_run, tmp_path, capsys):
        outputs = []
        for name in ("a.csv", "b.csv"):
            rc = main(["eval", "--checkpoint", str(trained_run / "checkpoint"),
                       "--episodes", "2", "--out", str(tmp_path / name)])
            assert rc == 0
            outputs.append(capsys.readouterr().out)
        assert outputs[0] == outputs[1]
        assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()

    def test_corrupt_checkpoint_fails(self, trained_run, tmp_path, capsys):
        broken = tmp_path / "broken"
        broken.mkdir()
        blob = bytearray((trained_run / "checkpoint" / "trainer.ckpt").read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        (broken / "trainer.ckpt").write_bytes(bytes(blob))
        rc = main(["eval", "--checkpoint", str(broken)])
        assert rc != 0
        assert "corrupt" in capsys.readouterr().err


class TestReconstruct:
    def test_grid_has_two_rows_and_reported_mse_is_consistent(self, trained_run,
                                                              tmp_path, capsys):
        trainer = Trainer.from_checkpoint(trained_run / "checkpoint")
        episode_file = sorted((trained_run / "checkpoint" / "episodes").glob("*.bin"))[0]
        out_png = tmp_path / "grid.png"
        rc = main(["reconstruct", "--checkpoint", str(trained_run / "checkpoint"),
                   "--episode", str(episode_file), "--out", str(out_png),
                   "--frames", "5"])
        assert rc == 0
        assert out_png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        printed = capsys.readouterr().out
        episode = read_episode_file(episode_file)
        real, recon, mse = reconstruct_frames(trainer.model, episode, 5)
        assert real.shape == recon.shape and real.shape[0] == len(mse) == 5
        recomputed = ((real - recon) ** 2).reshape(len(mse), -1).mean(axis=1)
        assert np.allclose(mse, recomputed)
        for i, value in enumerate(mse):
            assert f"frame={i} mse={float(value)!r}" in printed

    def test_shape_mismatch_fails(self, trained_run, tmp_path, capsys):
        from lvm.replay import ReplayBuffer
        buf = ReplayBuffer(100)
        rng = np.random.default_rng(0)
        for k in range(6):
            buf.append_step(rng.random((1, 16, 16)).astype(np.float32),
                            np.zeros(2, dtype=np.float32), 0.0, k == 5,
                            final_obs=rng.random((1, 16, 16)).astype(np.float32)
                            if k == 5 else None)
        buf.save(tmp_path / "eps")
        bad_episode = sorted((tmp_path / "eps").glob("*.bin"))[0]
        rc = main(["reconstruct", "--checkpoint", str(trained_run / "checkpoint"),
                   "--episode", str(bad_episode), "--out", str(tmp_path / "g.png")])
        assert rc != 0
        assert "does not match" in capsys.readouterr().err


class TestPlot:
    def test_one_csv_gives_one_curve(self, trained_run, tmp_path):
        out_svg = tmp_path / "curve.svg"
        rc = main(["plot", str(trained_run / "metrics.csv"), "--out", str(out_svg)])
        assert rc == 0
        svg = out_svg.read_text()
        assert svg.count("<polyline") == 1
        assert "<polygon" not in svg

    def test_five_seed_csvs_with_one_label_give_one_band(self, tmp_path):
        header = "epoch,env_steps,eval_return\n"
        for seed in range(5):
            rows = "".join(f"{e},{100 * e},{-50.0 - seed - e}\n" for e in range(1, 5))
            (tmp_path / f"s{seed}.csv").write_text(header + rows)
        out_svg = tmp_path / "band.svg"
        rc = main(["plot", *(str(tmp_path / f"s{seed}.csv") for seed in range(5)),
                   "--label", "desk", "--out", str(out_svg)])
        assert rc == 0
        svg = out_svg.read_text()
        assert svg.count("<polygon") == 1
        assert svg.count("<polyline") == 1
        assert ">desk</text>" in svg

    def test_malformed_row_fails_and_names_it(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("epoch,env_steps,eval_return\n1,100,-1.0\n2,200\n")
        rc = main(["plot", str(bad), "--out", str(tmp_path / "x.svg")])
        assert rc != 0
        assert "bad.csv:3" in capsys.readouterr().err

    def test_empty_eval_return_column_fails(self, tmp_path, capsys):
        empty = tmp_path / "empty.csv"
        empty.write_text("epoch,env_steps,eval_return\n1,100,\n2,200,\n")
        rc = main(["plot", str(empty), "--out", str(tmp_path / "x.svg")])
        assert rc != 0
        assert "eval_return column is empty" in capsys.readouterr().err

    def test_metrics_reader_skips_blank_eval_cells(self, tmp_path):
        csv = tmp_path / "m.csv"
        csv.write_text("# seed=0\nepoch,env_steps,eval_return\n"
                       "1,100,\n2,200,-3.5\n3,300,\n4,400,-2.0\n")
        steps, values = read_metrics_csv(str(csv))
        assert steps.tolist() == [200.0, 400.0]
        assert values.tolist() == [-3.5, -2.0]
