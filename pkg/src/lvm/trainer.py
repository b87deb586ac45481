"""Training orchestration: pretraining, alternating model/policy updates and
data collection, evaluation, metrics logging, and bit-exact checkpointing.

Every source of randomness is owned by the trainer (one numpy generator for
environment seeds, random actions, and replay sampling; one torch generator
for latent and exploration noise) and both are checkpointed, so a run is a
deterministic function of (seed, config) and a resumed run continues the
uninterrupted metric log exactly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.nn.utils import clip_grad_norm_

from .agent import Agent
from .checkpoint import read_checkpoint, write_checkpoint
from .config import RunConfig, config_from_flat_dict, config_to_flat_dict
from .imagination import imagine
from .lane_sim import LaneKeepingEnv
from .latent_model import LatentModel, LatentState
from .replay import ReplayBuffer

CSV_COLUMNS = ("epoch", "env_steps", "J_RSSM", "J_o", "J_r", "J_D",
               "J_V1", "J_V2", "J_pi", "collect_return", "eval_return", "eval_lat_err")

# Config fields that must agree between a checkpoint and the trainer loading it.
_STRUCTURAL_KEYS = (
    "env.img_channels", "env.img_size",
    "model.deter_size", "model.stoch_size", "model.embed_size",
    "model.hidden_size", "model.base_channels",
    "train.single_critic",
)


@dataclass
class EvalReport:
    """Aggregate statistics over a set of noise-free evaluation episodes."""

    mean_return: float
    std_return: float
    mean_abs_lateral_error: float
    mean_episode_length: float
    episodes: int


@dataclass
class EpisodeStats:
    ep_return: float
    steps: int
    abs_y_sum: float
    max_abs_y: float

    @property
    def mean_abs_y(self) -> float:
        return self.abs_y_sum / self.steps if self.steps else 0.0


def summarize_eval(stats: list[EpisodeStats]) -> EvalReport:
    """Fold per-episode statistics into an EvalReport.

    The lateral error is averaged over every step of every episode, not over
    per-episode means."""
    if not stats:
        raise ValueError("need at least one episode")
    returns = np.array([s.ep_return for s in stats], dtype=np.float64)
    total_steps = sum(s.steps for s in stats)
    return EvalReport(
        mean_return=float(returns.mean()),
        std_return=float(returns.std()),
        mean_abs_lateral_error=float(sum(s.abs_y_sum for s in stats) / total_steps),
        mean_episode_length=float(np.mean([s.steps for s in stats])),
        episodes=len(stats),
    )


def _derived_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


class Trainer:
    """Runs the full loop on one environment instance, single-threaded."""

    def __init__(self, cfg: RunConfig, metrics_path: str | os.PathLike | None = None):
        cfg.validate()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.env = LaneKeepingEnv(cfg.env, seed=cfg.seed)
        self.model = LatentModel(cfg.model, self.env.obs_shape, action_dim=2)
        feature_dim = cfg.model.deter_size + cfg.model.stoch_size
        self.agent = Agent(feature_dim, cfg.model.hidden_size,
                           self.env.action_low, self.env.action_high,
                           gamma=cfg.train.gamma, lam=cfg.train.lam,
                           single_critic=cfg.train.single_critic,
                           horizon_sum=cfg.train.actor_horizon_sum)
        self.buffer = ReplayBuffer(cfg.train.buffer_capacity)

        t = cfg.train
        self.model_opt = torch.optim.Adam(self.model.parameters(), lr=t.model_lr)
        self.actor_opt = torch.optim.Adam(self.agent.actor.parameters(), lr=t.actor_lr)
        self.critic_opts = [torch.optim.Adam(c.parameters(), lr=t.critic_lr)
                            for c in self.agent.critics]

        self.np_rng = np.random.default_rng(cfg.seed)
        self.noise_gen = torch.Generator()
        self.noise_gen.manual_seed(_derived_seed(cfg.seed, 0x10153))

        self.epoch = 0
        self.env_steps = 0
        self.pretrained = False
        self.metrics_path = Path(metrics_path) if metrics_path is not None else None

    # ------------------------------------------------------------------
    # Episode execution
    # ------------------------------------------------------------------

    def _run_episode(self, env: LaneKeepingEnv, env_seed: int, sigma: float,
                     noise_gen: torch.Generator, random_policy: bool = False,
                     action_rng: np.random.Generator | None = None,
                     record: bool = False, collect_latents: bool = False):
        """Roll one full episode; optionally record transitions into the buffer.

        The agent path filters the latent state online (encode, posterior
        sample, act) carrying it across steps; the latent noise comes from
        ``noise_gen``. Returns (EpisodeStats, per_step_features, rewards).
        """
        obs, _ = env.reset(seed=env_seed)
        z = self.model.initial_state(1)
        a_prev = torch.zeros(1, 2, dtype=self.model.dtype)
        ep_return = 0.0
        abs_y_sum = 0.0
        max_abs_y = 0.0
        steps = 0
        features: list[torch.Tensor] = []
        rewards: list[float] = []
        done = False
        while not done:
            if random_policy:
                rng = action_rng if action_rng is not None else self.np_rng
                a_np = rng.uniform(env.action_low, env.action_high).astype(np.float32)
            else:
                with torch.no_grad():
                    obs_t = torch.as_tensor(obs, dtype=self.model.dtype).unsqueeze(0)
                    # Exploration rollouts sample the posterior (matching the
                    # training-time filter); noise-free deployment carries the
                    # posterior mean so the greedy policy sees a steady state.
                    z, _, _ = self.model.filter_step(z, a_prev, obs_t,
                                                     generator=noise_gen,
                                                     sample=sigma > 0)
                    if collect_latents:
                        features.append(z.feature.squeeze(0))
                    if sigma > 0:
                        a = self.agent.explore_action(z, sigma, noise_gen)
                    else:
                        a = self.agent.act(z)
                a_np = a.squeeze(0).numpy().astype(np.float32)
                a_prev = torch.as_tensor(a_np, dtype=self.model.dtype).unsqueeze(0)
            next_obs, reward, done, state = env.step(a_np)
            if record:
                self.buffer.append_step(obs, a_np, reward, done,
                                        final_obs=next_obs if done else None)
                self.env_steps += 1
            ep_return += reward
            rewards.append(reward)
            abs_y_sum += abs(state.y)
            max_abs_y = max(max_abs_y, abs(state.y))
            steps += 1
            obs = next_obs
        stats = EpisodeStats(ep_return=ep_return, steps=steps,
                             abs_y_sum=abs_y_sum, max_abs_y=max_abs_y)
        return stats, features, rewards

    # ------------------------------------------------------------------
    # Training phases
    # ------------------------------------------------------------------

    def pretrain(self, episodes: int | None = None) -> dict[str, float]:
        """Seed the buffer with uniform-random episodes, then fit the model on them."""
        t = self.cfg.train
        count = t.seed_episodes if episodes is None else episodes
        for _ in range(count):
            seed = int(self.np_rng.integers(0, 2 ** 31 - 1))
            self._run_episode(self.env, seed, sigma=0.0, noise_gen=self.noise_gen,
                              random_policy=True, record=True)
        comps: dict[str, float] = {}
        for _ in range(t.pretrain_updates):
            batch = self.buffer.sample_sequences(t.batch_size, t.seq_len, rng=self.np_rng)
            comps = self._model_update(batch)
        self.pretrained = True
        return comps

    def _model_update(self, batch) -> dict[str, float]:
        self.model_opt.zero_grad()
        objective, comps = self.model.elbo_loss(batch, generator=self.noise_gen)
        (-objective).backward()
        clip_grad_norm_(self.model.parameters(), self.cfg.train.grad_clip)
        self.model_opt.step()
        comps["J_RSSM"] = float(objective.detach())
        return comps

    def train_iteration(self) -> dict[str, float]:
        """One epoch: train_freq gradient rounds, then data collection.

        Each round follows the fixed order: model ascent on the evidence
        bound, fresh posterior pass for imagination starts, imagined rollouts,
        min-of-critics targets, one descent step per critic, one ascent step
        on the actor objective.
        """
        t = self.cfg.train
        sums = {key: 0.0 for key in ("J_RSSM", "J_o", "J_r", "J_D", "J_V1", "J_V2", "J_pi")}
        for _ in range(t.train_freq):
            batch = self.buffer.sample_sequences(t.batch_size, t.seq_len, rng=self.np_rng)
            comps = self._model_update(batch)

            with torch.no_grad():
                states, _, _ = self.model.observe_sequence(batch, generator=self.noise_gen)
            starts = LatentState(
                h=states.h[:, :-1].reshape(-1, states.h.shape[-1]),
                s=states.s[:, :-1].reshape(-1, states.s.shape[-1]))
            traj = imagine(self.model, self.agent, starts, t.horizon, t.traj_num,
                           generator=self.noise_gen)
            targets = self.agent.value_target(traj)
            jv1, jv2 = self.agent.critic_loss(traj, targets)
            for loss, opt, critic in zip([jv1, jv2], self.critic_opts, self.agent.critics):
                opt.zero_grad()
                loss.backward()
                clip_grad_norm_(critic.parameters(), t.grad_clip)
                opt.step()

            self.actor_opt.zero_grad()
            j_pi = self.agent.actor_loss(traj)
            (-j_pi).backward()
            clip_grad_norm_(self.agent.actor.parameters(), t.grad_clip)
            self.actor_opt.step()

            sums["J_RSSM"] += comps["J_RSSM"]
            sums["J_o"] += comps["J_o"]
            sums["J_r"] += comps["J_r"]
            sums["J_D"] += comps["J_D"]
            sums["J_V1"] += float(jv1.detach())
            sums["J_V2"] += float(jv2.detach()) if jv2 is not None else 0.0
            sums["J_pi"] += float(j_pi.detach())

        collect = self.collect_data(t.data_collect_freq, t.sigma)
        row = {key: value / t.train_freq for key, value in sums.items()}
        if self.agent.critic2 is None:
            row["J_V2"] = math.nan  # rendered blank in the CSV
        row["collect_return"] = collect["mean_return"]
        row["env_steps"] = float(self.env_steps)
        return row

    def collect_data(self, episodes: int | None = None, sigma: float | None = None
                     ) -> dict[str, float]:
        """Run full episodes with exploration noise, appending them to the buffer."""
        t = self.cfg.train
        count = t.data_collect_freq if episodes is None else episodes
        noise = t.sigma if sigma is None else sigma
        returns, steps = [], 0
        for _ in range(count):
            seed = int(self.np_rng.integers(0, 2 ** 31 - 1))
            stats, _, _ = self._run_episode(self.env, seed, sigma=noise,
                                            noise_gen=self.noise_gen, record=True)
            returns.append(stats.ep_return)
            steps += stats.steps
        return {"episodes": float(count), "steps": float(steps),
                "mean_return": float(np.mean(returns))}

    # ------------------------------------------------------------------
    # Evaluation
    # ------------------------------------------------------------------

    def _eval_episode_stats(self, index: int, random_policy: bool = False) -> EpisodeStats:
        # Evaluation must not perturb the training RNG streams: seeds are a
        # fixed function of (config seed, episode index) only.
        env = LaneKeepingEnv(self.cfg.env)
        env_seed = _derived_seed(self.cfg.seed, 0xE7A1, index)
        gen = torch.Generator()
        gen.manual_seed(_derived_seed(self.cfg.seed, 0xE7A2, index))
        rng = np.random.default_rng(_derived_seed(self.cfg.seed, 0xE7A3, index))
        stats, _, _ = self._run_episode(env, env_seed, sigma=0.0, noise_gen=gen,
                                        random_policy=random_policy, action_rng=rng)
        return stats

    def evaluate_episodes(self, episodes: int | None = None) -> list[EpisodeStats]:
        """Per-episode statistics of noise-free episodes on fixed fresh seeds."""
        count = self.cfg.train.eval_episodes if episodes is None else episodes
        return [self._eval_episode_stats(i) for i in range(count)]

    def evaluate(self, episodes: int | None = None) -> EvalReport:
        """Noise-free episodes on a fixed set of fresh seeds."""
        return summarize_eval(self.evaluate_episodes(episodes))

    def evaluate_random(self, episodes: int | None = None) -> EvalReport:
        """Uniform-random-policy baseline on the same evaluation seeds."""
        count = self.cfg.train.eval_episodes if episodes is None else episodes
        return summarize_eval([self._eval_episode_stats(i, random_policy=True)
                               for i in range(count)])

    def value_bias(self, episodes: int = 10) -> float:
        """Mean signed critic bias on fresh greedy rollouts.

        For every visited latent state, compares the critic estimate (minimum
        over the trained critics) against the empirical discounted return of
        the remainder of the episode; positive values mean overestimation.
        """
        gamma = self.cfg.train.gamma
        diffs: list[float] = []
        for i in range(episodes):
            env = LaneKeepingEnv(self.cfg.env)
            env_seed = _derived_seed(self.cfg.seed, 0xB1A5, i)
            gen = torch.Generator()
            gen.manual_seed(_derived_seed(self.cfg.seed, 0xB1A6, i))
            _, features, rewards = self._run_episode(
                env, env_seed, sigma=0.0, noise_gen=gen, collect_latents=True)
            with torch.no_grad():
                feats = torch.stack(features)
                estimates = self.agent.critics[0](feats)
                for critic in self.agent.critics[1:]:
                    estimates = torch.minimum(estimates, critic(feats))
            empirical = np.zeros(len(rewards))
            acc = 0.0
            for k in range(len(rewards) - 1, -1, -1):
                acc = rewards[k] + gamma * acc
                empirical[k] = acc
            diffs.extend((estimates.numpy() - empirical).tolist())
        return float(np.mean(diffs))

    # ------------------------------------------------------------------
    # Full run with metrics logging
    # ------------------------------------------------------------------

    def train(self, checkpoint_dir: str | os.PathLike | None = None) -> EvalReport | None:
        """Pretrain, then run epochs until max_epochs or the env-step cap."""
        t = self.cfg.train
        if not self.pretrained:
            self.pretrain()
        last_eval: EvalReport | None = None
        while self.epoch < t.max_epochs:
            if t.max_env_steps and self.env_steps >= t.max_env_steps:
                break
            row = self.train_iteration()
            self.epoch += 1
            row["epoch"] = float(self.epoch)
            if t.eval_every and self.epoch % t.eval_every == 0:
                last_eval = self.evaluate()
                row["eval_return"] = last_eval.mean_return
                row["eval_lat_err"] = last_eval.mean_abs_lateral_error
            self._write_row(row)
            if checkpoint_dir is not None and t.checkpoint_every \
                    and self.epoch % t.checkpoint_every == 0:
                self.save_checkpoint(checkpoint_dir)
        if checkpoint_dir is not None:
            self.save_checkpoint(checkpoint_dir)
        return last_eval

    def _write_row(self, row: dict[str, float]) -> None:
        if self.metrics_path is None:
            return
        new_file = not self.metrics_path.exists()
        with open(self.metrics_path, "a", encoding="utf-8") as fh:
            if new_file:
                for key, value in config_to_flat_dict(self.cfg).items():
                    fh.write(f"# {key}={value}\n")
                fh.write(",".join(CSV_COLUMNS) + "\n")
            cells = []
            for col in CSV_COLUMNS:
                value = row.get(col)
                if value is None or (isinstance(value, float) and math.isnan(value)):
                    cells.append("")
                elif col in ("epoch", "env_steps"):
                    cells.append(str(int(value)))
                else:
                    cells.append(repr(float(value)))
            fh.write(",".join(cells) + "\n")

    # ------------------------------------------------------------------
    # Checkpointing
    # ------------------------------------------------------------------

    def _named_modules(self) -> list[tuple[str, torch.nn.Module]]:
        named = [("model", self.model), ("actor", self.agent.actor),
                 ("critic1", self.agent.critic1)]
        if self.agent.critic2 is not None:
            named.append(("critic2", self.agent.critic2))
        return named

    def _named_opts(self) -> list[tuple[str, torch.optim.Optimizer]]:
        named = [("model", self.model_opt), ("actor", self.actor_opt),
                 ("critic1", self.critic_opts[0])]
        if len(self.critic_opts) > 1:
            named.append(("critic2", self.critic_opts[1]))
        return named

    def save_checkpoint(self, path: str | os.PathLike) -> None:
        """Write parameters, optimizer state, RNG streams, and the buffer."""
        root = Path(path)
        meta: dict[str, str] = {
            "kind": "trainer",
            "epoch": str(self.epoch),
            "env_steps": str(self.env_steps),
            "pretrained": str(self.pretrained),
            "np_rng": json.dumps(self.np_rng.bit_generator.state,
                                 sort_keys=True, separators=(",", ":")),
        }
        for key, value in config_to_flat_dict(self.cfg).items():
            meta[f"config.{key}"] = value
        arrays: dict[str, np.ndarray] = {}
        for name, module in self._named_modules():
            for pname, tensor in module.state_dict().items():
                arrays[f"{name}.{pname}"] = tensor.detach().cpu().numpy()
        for oname, opt in self._named_opts():
            state = opt.state_dict()["state"]
            for idx in sorted(state):
                for key, value in state[idx].items():
                    if isinstance(value, torch.Tensor):
                        arrays[f"opt.{oname}.{idx}.{key}"] = value.detach().cpu().numpy()
                    else:
                        arrays[f"opt.{oname}.{idx}.{key}"] = np.asarray(value, dtype=np.float32)
        arrays["rng.torch"] = self.noise_gen.get_state().numpy()
        write_checkpoint(root / "trainer.ckpt", meta, arrays)
        self.buffer.save(root / "episodes")

    def load_checkpoint(self, path: str | os.PathLike) -> None:
        """Restore a checkpoint saved by :meth:`save_checkpoint`.

        The stored config must structurally match this trainer's config;
        a mismatch raises an error naming the offending field.
        """
        root = Path(path)
        meta, arrays = read_checkpoint(root / "trainer.ckpt")
        ours = config_to_flat_dict(self.cfg)
        for key in _STRUCTURAL_KEYS:
            stored = meta.get(f"config.{key}")
            if stored is not None and stored != ours[key]:
                raise ValueError(
                    f"checkpoint config mismatch: {key} is {stored}, expected {ours[key]}")
        for name, module in self._named_modules():
            prefix = f"{name}."
            state = {pname[len(prefix):]: torch.from_numpy(arr.copy())
                     for pname, arr in arrays.items()
                     if pname.startswith(prefix) and not pname.startswith("opt.")}
            module.load_state_dict(state)
        for oname, opt in self._named_opts():
            prefix = f"opt.{oname}."
            state: dict[int, dict[str, torch.Tensor]] = {}
            for pname, arr in arrays.items():
                if not pname.startswith(prefix):
                    continue
                idx_s, key = pname[len(prefix):].split(".", 1)
                state.setdefault(int(idx_s), {})[key] = torch.from_numpy(arr.copy())
            if state:
                sd = opt.state_dict()
                sd["state"] = state
                opt.load_state_dict(sd)
        self.np_rng.bit_generator.state = json.loads(meta["np_rng"])
        self.noise_gen.set_state(torch.from_numpy(arrays["rng.torch"].copy()))
        self.epoch = int(meta["epoch"])
        self.env_steps = int(meta["env_steps"])
        self.pretrained = meta.get("pretrained") == "True"
        episodes_dir = root / "episodes"
        if episodes_dir.is_dir():
            self.buffer.load(episodes_dir)

    @classmethod
    def from_checkpoint(cls, path: str | os.PathLike,
                        metrics_path: str | os.PathLike | None = None) -> "Trainer":
        """Rebuild a trainer purely from a checkpoint's embedded config."""
        meta, _ = read_checkpoint(Path(path) / "trainer.ckpt")
        flat = {key[len("config."):]: value for key, value in meta.items()
                if key.startswith("config.")}
        cfg = config_from_flat_dict(flat)
        trainer = cls(cfg, metrics_path=metrics_path)
        trainer.load_checkpoint(path)
        return trainer
