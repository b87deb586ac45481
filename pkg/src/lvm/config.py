"""Configuration objects and the flat ``section.key=value`` config-file format.

Precedence is strictly: dataclass defaults < config file < explicit overrides.
Every config is fully validated before anything touches the filesystem.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields
from typing import Any


class ConfigError(ValueError):
    """Raised for invalid, unknown, or inconsistent configuration values."""


@dataclass
class EnvConfig:
    """Geometry, dynamics, and reward settings of the ring-road simulator."""

    road_radius: float = 30.0       # centerline radius [m]
    lane_half_width: float = 1.75   # half width of the tracked lane [m]
    dt: float = 0.05                # integration step [s]
    v0: float = 5.0                 # target longitudinal speed [m/s]
    # quadratic penalty coefficients for (y, phi_err, omega, beta, v-v0, steer, accel)
    c: tuple = (-1.0, -0.5, -0.1, -0.1, -0.05, -0.1, -0.05)
    a_min: float = -3.0             # acceleration limits [m/s^2]
    a_max: float = 3.0
    steer_max: float = 0.5          # front steering limit [rad]
    v_max: float = 10.0             # hard speed cap [m/s]
    img_channels: int = 1
    img_size: int = 16
    max_steps: int = 500
    lf: float = 1.3                 # CoG to front axle [m]
    lr: float = 1.5                 # CoG to rear axle [m]
    offroad_threshold: float = 2.25  # |y| beyond this terminates the episode [m]

    def validate(self) -> None:
        if not self.dt > 0:
            raise ConfigError("env.dt must be > 0")
        if self.img_size < 8 or self.img_size & (self.img_size - 1):
            raise ConfigError("env.img_size must be a power of two >= 8")
        if self.img_channels not in (1, 3):
            raise ConfigError("env.img_channels must be 1 or 3")
        if len(self.c) != 7:
            raise ConfigError("env.c must have exactly 7 coefficients")
        if any(ci > 0 for ci in self.c):
            raise ConfigError("env.c coefficients must all be <= 0")
        if self.offroad_threshold > 2 * self.lane_half_width:
            raise ConfigError("env.offroad_threshold must be <= 2 * lane_half_width")
        if not (self.a_min < self.a_max and self.steer_max > 0):
            raise ConfigError("env action limits are inconsistent")
        if not (0 < self.v0 <= self.v_max):
            raise ConfigError("env.v0 must lie in (0, v_max]")
        if self.lf <= 0 or self.lr <= 0:
            raise ConfigError("env wheelbase lengths must be > 0")
        if self.max_steps < 1:
            raise ConfigError("env.max_steps must be >= 1")
        if self.road_radius <= 4 * self.lane_half_width:
            raise ConfigError("env.road_radius too small for the lane geometry")


@dataclass
class ModelConfig:
    """Latent dynamics model sizes and regularization."""

    deter_size: int = 256     # recurrent deterministic state width
    stoch_size: int = 60      # stochastic state width
    embed_size: int = 256     # image embedding width
    hidden_size: int = 256    # width of the feed-forward heads
    base_channels: int = 32   # channels of the first conv stage
    min_std: float = 0.1      # floor on every predicted standard deviation
    free_nats: float = 3.0    # per-step KL below this contributes no gradient
    reward_variance: float = 1.0  # fixed variance of the reward likelihood

    def validate(self) -> None:
        for name in ("deter_size", "stoch_size", "embed_size", "hidden_size", "base_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if not self.min_std > 0:
            raise ConfigError("model.min_std must be > 0")
        if self.free_nats < 0:
            raise ConfigError("model.free_nats must be >= 0")
        if not self.reward_variance > 0:
            raise ConfigError("model.reward_variance must be > 0")


@dataclass
class TrainerConfig:
    """Training-loop schedule, optimization, and evaluation settings."""

    seed_episodes: int = 5        # random-policy episodes collected before training
    max_epochs: int = 300
    train_freq: int = 100         # gradient rounds per epoch
    data_collect_freq: int = 1    # episodes collected per epoch
    batch_size: int = 50
    seq_len: int = 50
    horizon: int = 15             # imagination rollout length
    traj_num: int = 3             # imagined rollouts per starting state
    gamma: float = 0.99
    lam: float = 0.95             # TD(lambda) mixing weight
    sigma: float = 0.3            # exploration noise std during collection
    model_lr: float = 1e-3
    critic_lr: float = 1e-4
    actor_lr: float = 1e-4
    grad_clip: float = 100.0
    pretrain_updates: int = 100   # model updates on the seed dataset
    buffer_capacity: int = 1_000_000
    eval_episodes: int = 20
    eval_every: int = 10          # epochs between evaluation reports (0 = never)
    checkpoint_every: int = 0     # epochs between checkpoints (0 = final only)
    single_critic: bool = False   # ablation: drop the second critic
    actor_horizon_sum: bool = True  # actor objective sums targets over the horizon
    max_env_steps: int = 0        # stop training once this many env steps seen (0 = no cap)

    def validate(self) -> None:
        for name in ("seed_episodes", "max_epochs", "train_freq", "data_collect_freq",
                     "batch_size", "seq_len", "horizon", "traj_num", "buffer_capacity",
                     "eval_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        for name in ("gamma", "lam"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"train.{name} must lie in [0, 1]")
        # Zero rates are tolerated so a frozen agent can be probed for invariance.
        for name in ("model_lr", "critic_lr", "actor_lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0")
        if self.sigma < 0:
            raise ConfigError("train.sigma must be >= 0")
        if self.grad_clip <= 0:
            raise ConfigError("train.grad_clip must be > 0")
        for name in ("pretrain_updates", "eval_every", "checkpoint_every", "max_env_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0")


@dataclass
class RunConfig:
    """Everything a run needs: environment, model, trainer, seed, output root."""

    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainerConfig = field(default_factory=TrainerConfig)
    seed: int = 0
    out_dir: str = ""

    def validate(self) -> None:
        self.env.validate()
        self.model.validate()
        self.train.validate()
        if self.train.seq_len > self.env.max_steps:
            raise ConfigError("train.seq_len cannot exceed env.max_steps")

    def resolved_out_dir(self) -> str:
        if self.out_dir:
            return self.out_dir
        return os.environ.get("LVM_OUT", "runs")


_SECTIONS = {"env": EnvConfig, "model": ModelConfig, "train": TrainerConfig}
_TOP_LEVEL = {"seed": int, "out_dir": str}


def _coerce(raw: str, target_type: type, key: str) -> Any:
    raw = raw.strip()
    if target_type is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"invalid boolean for {key}: {raw!r}")
    if target_type is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"invalid integer for {key}: {raw!r}") from None
    if target_type is float:
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError(f"invalid float for {key}: {raw!r}") from None
        if not math.isfinite(value):
            raise ConfigError(f"non-finite value for {key}: {raw!r}")
        return value
    if target_type is tuple:
        try:
            return tuple(float(part) for part in raw.split(","))
        except ValueError:
            raise ConfigError(f"invalid float list for {key}: {raw!r}") from None
    return raw


def set_config_value(cfg: RunConfig, key: str, raw: str) -> None:
    """Apply one dotted ``section.key`` (or top-level) assignment to ``cfg``."""
    if "." in key:
        section, _, name = key.partition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section: {section!r} (in key {key!r})")
        sub = getattr(cfg, section)
        try:
            fld = {f.name: f for f in fields(sub)}[name]
        except KeyError:
            raise ConfigError(f"unknown config key: {key!r}") from None
        target_type = fld.type if isinstance(fld.type, type) else type(getattr(sub, name))
        setattr(sub, name, _coerce(raw, target_type, key))
    elif key in _TOP_LEVEL:
        setattr(cfg, key, _coerce(raw, _TOP_LEVEL[key], key))
    else:
        raise ConfigError(f"unknown config key: {key!r}")


def parse_config_file(path: str, cfg: RunConfig) -> None:
    """Apply ``key=value`` lines from ``path`` onto ``cfg``. Rejects unknown keys."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        try:
            set_config_value(cfg, key.strip(), raw)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None


def load_run_config(config_path: str | None = None,
                    overrides: dict[str, str] | None = None) -> RunConfig:
    """Build a validated RunConfig from defaults, an optional file, and overrides."""
    cfg = RunConfig()
    if config_path is not None:
        parse_config_file(config_path, cfg)
    for key, raw in (overrides or {}).items():
        set_config_value(cfg, key, raw)
    cfg.validate()
    return cfg


def config_to_flat_dict(cfg: RunConfig) -> dict[str, str]:
    """Flatten a RunConfig to dotted string keys; lossless with the parser above.

    ``out_dir`` is deliberately omitted: it is a runtime output location, not
    part of the run's identity, and must not leak into config echoes."""
    flat: dict[str, str] = {"seed": str(cfg.seed)}
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in fields(sub):
            value = getattr(sub, f.name)
            if isinstance(value, tuple):
                flat[f"{section}.{f.name}"] = ",".join(repr(v) for v in value)
            else:
                flat[f"{section}.{f.name}"] = repr(value) if isinstance(value, float) else str(value)
    return flat


def config_from_flat_dict(flat: dict[str, str]) -> RunConfig:
    cfg = RunConfig()
    for key, raw in flat.items():
        set_config_value(cfg, key, raw)
    cfg.validate()
    return cfg


def desk_config() -> RunConfig:
    """Small configuration that trains in minutes on a single CPU core."""
    cfg = RunConfig()
    # Slower target speed and heavier centering/steering penalties than the
    # full-size setup: a 16x16 observation cannot resolve lateral offsets
    # finely enough for tight control at 5 m/s.
    cfg.env.v0 = 3.0
    cfg.env.c = (-2.0, -1.0, -0.1, -0.1, -0.05, -0.3, -0.05)
    # A tight reward likelihood (variance 0.1) weights the one reward value
    # against the 256 pixel dimensions; with the default 1.0 the small desk
    # model learns a sloppy reward surface that the actor then exploits by
    # settling into off-center orbits.
    cfg.model = ModelConfig(deter_size=64, stoch_size=16, embed_size=64,
                            hidden_size=64, base_channels=16,
                            reward_variance=0.1)
    cfg.train = TrainerConfig(
        seed_episodes=6,
        max_epochs=60,
        train_freq=60,
        data_collect_freq=1,
        batch_size=16,
        seq_len=16,
        horizon=10,
        traj_num=2,
        # Short value horizon and faster critics: with gamma near 1 the
        # min-of-two bootstrap amplifies the inter-critic gap by 1/(1-gamma)
        # and small desk critics drift badly before they converge.
        gamma=0.9,
        critic_lr=3e-4,
        sigma=0.2,
        pretrain_updates=200,
        eval_every=10,
        max_env_steps=30_000,
    )
    cfg.validate()
    return cfg


def paper_shape_config() -> RunConfig:
    """Full-size configuration: 3x64x64 observations and the large latent model."""
    cfg = RunConfig()
    cfg.env.img_channels = 3
    cfg.env.img_size = 64
    cfg.validate()
    return cfg
