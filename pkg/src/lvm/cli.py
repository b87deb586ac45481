"""Command-line entry points: train, eval, reconstruct, plot.

Configuration precedence is defaults < config file < command-line flags; a
config failure exits nonzero before any output directory is created.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, load_run_config
from .replay import SequenceBatch, read_episode_file
from .trainer import Trainer, summarize_eval
from .viz import image_grid, write_learning_curves_svg, write_png


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 2


def _collect_overrides(args: argparse.Namespace) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for item in args.set or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "single_critic", False):
        overrides["train.single_critic"] = "true"
    if args.out is not None:
        overrides["out_dir"] = args.out
    return overrides


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    try:
        cfg = load_run_config(args.config, _collect_overrides(args))
    except ConfigError as exc:
        return _fail(str(exc))
    out_dir = Path(cfg.resolved_out_dir())
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    metrics_path.unlink(missing_ok=True)
    trainer = Trainer(cfg, metrics_path=metrics_path)
    report = trainer.train(checkpoint_dir=out_dir / "checkpoint")
    if report is None:
        report = trainer.evaluate()
    lines = [
        f"epochs={trainer.epoch}",
        f"env_steps={trainer.env_steps}",
        f"mean_return={report.mean_return!r}",
        f"std_return={report.std_return!r}",
        f"mean_abs_lateral_error={report.mean_abs_lateral_error!r}",
        f"mean_episode_length={report.mean_episode_length!r}",
        f"episodes={report.episodes}",
    ]
    (out_dir / "eval_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


# ----------------------------------------------------------------------
# eval
# ----------------------------------------------------------------------

def cmd_eval(args: argparse.Namespace) -> int:
    try:
        trainer = Trainer.from_checkpoint(args.checkpoint)
    except (ValueError, OSError) as exc:
        return _fail(str(exc))
    if args.seed is not None:
        trainer.cfg.seed = args.seed
    stats = trainer.evaluate_episodes(args.episodes)
    report = summarize_eval(stats)
    out_csv = Path(args.out) if args.out else Path(args.checkpoint) / "eval_episodes.csv"
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", encoding="utf-8") as fh:
        fh.write("episode,return,length,mean_abs_lateral_error,max_abs_lateral_error\n")
        for i, s in enumerate(stats):
            fh.write(f"{i},{s.ep_return!r},{s.steps},{s.mean_abs_y!r},{s.max_abs_y!r}\n")
    print(f"episodes={report.episodes}")
    print(f"mean_return={report.mean_return!r}")
    print(f"std_return={report.std_return!r}")
    print(f"mean_abs_lateral_error={report.mean_abs_lateral_error!r}")
    print(f"mean_episode_length={report.mean_episode_length!r}")
    return 0


# ----------------------------------------------------------------------
# reconstruct
# ----------------------------------------------------------------------

def reconstruct_frames(model, episode, num_frames: int):
    """Filter an episode with the posterior mean and decode selected frames.

    Returns (real [N,C,H,W], reconstructed [N,C,H,W], per-frame MSE [N]).
    """
    length = episode.rewards.shape[0]
    obs = episode.observations[:length][None]
    actions = np.zeros((1, length) + episode.actions.shape[1:], dtype=np.float32)
    actions[0, 1:] = episode.actions[:length - 1]
    batch = SequenceBatch(observations=obs, actions=actions,
                          rewards=np.zeros((1, length), dtype=np.float32))
    with torch.no_grad():
        states, _, _ = model.observe_sequence(batch, sample=False)
        decoded = model.decode_obs(states)[0].numpy()
    picks = np.unique(np.round(np.linspace(0, length - 1, num_frames)).astype(int))
    real = episode.observations[picks]
    recon = np.clip(decoded[picks], 0.0, 1.0).astype(np.float32)
    mse = ((real - recon) ** 2).reshape(len(picks), -1).mean(axis=1)
    return real, recon, mse


def cmd_reconstruct(args: argparse.Namespace) -> int:
    try:
        trainer = Trainer.from_checkpoint(args.checkpoint)
        episode = read_episode_file(args.episode)
    except (ValueError, OSError) as exc:
        return _fail(str(exc))
    if tuple(episode.observations.shape[1:]) != trainer.model.obs_shape:
        return _fail(
            f"episode observation shape {tuple(episode.observations.shape[1:])} "
            f"does not match checkpoint {trainer.model.obs_shape}")
    real, recon, mse = reconstruct_frames(trainer.model, episode, args.frames)
    write_png(args.out, image_grid([real, recon]))
    for i, value in enumerate(mse):
        print(f"frame={i} mse={float(value)!r}")
    print(f"mean_mse={float(mse.mean())!r}")
    return 0


# ----------------------------------------------------------------------
# plot
# ----------------------------------------------------------------------

def read_metrics_csv(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Extract (env_steps, eval_return) rows from a metrics CSV."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    rows = [(i + 1, line) for i, line in enumerate(lines)
            if line and not line.startswith("#")]
    if not rows:
        raise ValueError(f"{path}: no header row")
    header = rows[0][1].split(",")
    try:
        step_col = header.index("env_steps")
        ret_col = header.index("eval_return")
    except ValueError:
        raise ValueError(f"{path}: missing env_steps/eval_return columns") from None
    steps, values = [], []
    for lineno, line in rows[1:]:
        cells = line.split(",")
        if len(cells) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} cells, got {len(cells)}")
        if cells[ret_col] == "":
            continue
        try:
            steps.append(float(cells[step_col]))
            values.append(float(cells[ret_col]))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric cell") from None
    if not values:
        raise ValueError(f"{path}: eval_return column is empty")
    return np.asarray(steps), np.asarray(values)


def cmd_plot(args: argparse.Namespace) -> int:
    groups: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    try:
        for path in args.csvs:
            label = args.label if args.label else Path(path).stem
            groups.setdefault(label, []).append(read_metrics_csv(path))
        write_learning_curves_svg(args.out, groups)
    except (ValueError, OSError) as exc:
        return _fail(str(exc))
    return 0


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lvm",
        description="Latent virtual-memory lane-keeping agent")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run pretraining and the full training loop")
    train.add_argument("--config", default=None, help="key=value config file")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--single-critic", action="store_true", dest="single_critic")
    train.add_argument("--out", default=None, help="output directory")
    train.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--episodes", type=int, default=20)
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--out", default=None, help="per-episode CSV path")
    ev.set_defaults(func=cmd_eval)

    rec = sub.add_parser("reconstruct",
                         help="dump a real-vs-reconstructed frame grid from an episode file")
    rec.add_argument("--checkpoint", required=True)
    rec.add_argument("--episode", required=True)
    rec.add_argument("--out", required=True, help="output PNG path")
    rec.add_argument("--frames", type=int, default=8)
    rec.set_defaults(func=cmd_reconstruct)

    plot = sub.add_parser("plot", help="learning curves from metrics CSVs")
    plot.add_argument("csvs", nargs="+")
    plot.add_argument("--out", required=True, help="output SVG path")
    plot.add_argument("--label", default=None,
                      help="group all CSVs under one label (mean with min-max band)")
    plot.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
