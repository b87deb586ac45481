"""Episodic replay buffer with fixed-length sequence sampling and disk persistence.

Episodes store T+1 observations alongside T actions and rewards, where
``actions[i]`` produced ``observations[i+1]`` and earned ``rewards[i]``.
Sampled sequences are re-aligned so that ``actions[k]`` / ``rewards[k]`` are
the action and reward that *led to* ``observations[k]`` (zeros at the episode
head), which is exactly what the latent filter consumes.

Each sealed episode persists as one file: an ASCII header (shapes, id, reward
sum, CRC) followed by flat little-endian float32 arrays in declared order.
The round trip is bit-exact.
"""

from __future__ import annotations

import os
import re
import zlib
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_MAGIC = "LVMEP1"


@dataclass
class Episode:
    """One complete environment episode."""

    observations: np.ndarray  # [T+1, C, H, W] float32 in [0, 1]
    actions: np.ndarray       # [T, action_dim] float32
    rewards: np.ndarray       # [T] float32
    done: bool
    episode_id: int

    @property
    def length(self) -> int:
        return self.rewards.shape[0]


@dataclass
class SequenceBatch:
    """Time-aligned training slices; every row is contiguous within one episode."""

    observations: np.ndarray  # [B, L, C, H, W]
    actions: np.ndarray       # [B, L, action_dim], actions[b, k] led to observations[b, k]
    rewards: np.ndarray       # [B, L], rewards[b, k] was received on reaching observations[b, k]


class ReplayBuffer:
    """FIFO episode store; capacity is counted in environment steps."""

    def __init__(self, capacity: int = 1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.episodes: deque[Episode] = deque()
        self._next_id = 0
        self._steps = 0
        self._open_obs: list[np.ndarray] = []
        self._open_actions: list[np.ndarray] = []
        self._open_rewards: list[float] = []

    # ------------------------------------------------------------------
    # Ingestion
    # ------------------------------------------------------------------

    def append_step(self, obs, action, reward, done: bool, final_obs=None) -> None:
        """Record one transition; ``obs`` is the observation the action was taken from.

        The terminal call (``done=True``) must pass ``final_obs``, the
        observation produced by that last action, which seals the episode.
        """
        obs = np.asarray(obs, dtype=np.float32)
        action = np.asarray(action, dtype=np.float32).reshape(-1)
        reward = float(reward)
        if not (np.isfinite(obs).all() and np.isfinite(action).all() and np.isfinite(reward)):
            raise ValueError("invalid transition: non-finite value")
        self._open_obs.append(obs)
        self._open_actions.append(action)
        self._open_rewards.append(reward)
        if done:
            if final_obs is None:
                raise ValueError("invalid transition: terminal step requires final_obs")
            final_obs = np.asarray(final_obs, dtype=np.float32)
            if not np.isfinite(final_obs).all():
                raise ValueError("invalid transition: non-finite value")
            self._seal(final_obs)

    def _seal(self, final_obs: np.ndarray) -> None:
        episode = Episode(
            observations=np.stack(self._open_obs + [final_obs]),
            actions=np.stack(self._open_actions),
            rewards=np.asarray(self._open_rewards, dtype=np.float32),
            done=True,
            episode_id=self._next_id,
        )
        self._next_id += 1
        self._open_obs, self._open_actions, self._open_rewards = [], [], []
        self.episodes.append(episode)
        self._steps += episode.length
        while self._steps > self.capacity and len(self.episodes) > 1:
            evicted = self.episodes.popleft()
            self._steps -= evicted.length

    # ------------------------------------------------------------------
    # Sampling
    # ------------------------------------------------------------------

    def sample_sequences(self, batch_size: int = 50, seq_len: int = 50,
                         rng: np.random.Generator | None = None) -> SequenceBatch:
        """Draw ``batch_size`` length-``seq_len`` windows uniformly over all
        valid (episode, offset) pairs."""
        if batch_size < 1 or seq_len < 1:
            raise ValueError("batch_size and seq_len must be >= 1")
        rng = rng if rng is not None else np.random.default_rng()
        eligible = [ep for ep in self.episodes if ep.length >= seq_len]
        if not eligible:
            raise ValueError(
                f"insufficient data: no episode with length >= {seq_len}")
        counts = np.array([ep.length - seq_len + 1 for ep in eligible])
        cum = np.cumsum(counts)
        picks = rng.integers(0, cum[-1], size=batch_size)
        obs_rows, act_rows, rew_rows = [], [], []
        for pick in picks:
            ep_idx = int(np.searchsorted(cum, pick, side="right"))
            offset = int(pick - (cum[ep_idx - 1] if ep_idx else 0))
            ep = eligible[ep_idx]
            obs_rows.append(ep.observations[offset:offset + seq_len])
            act = np.zeros((seq_len,) + ep.actions.shape[1:], dtype=np.float32)
            rew = np.zeros(seq_len, dtype=np.float32)
            if offset > 0:
                act[0] = ep.actions[offset - 1]
                rew[0] = ep.rewards[offset - 1]
            act[1:] = ep.actions[offset:offset + seq_len - 1]
            rew[1:] = ep.rewards[offset:offset + seq_len - 1]
            act_rows.append(act)
            rew_rows.append(rew)
        return SequenceBatch(
            observations=np.stack(obs_rows),
            actions=np.stack(act_rows),
            rewards=np.stack(rew_rows),
        )

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------

    def save(self, path: str | os.PathLike) -> None:
        """Write every sealed episode to ``path`` as ``episodes/ep_<id>.bin``."""
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        for ep in self.episodes:
            write_episode_file(root / f"ep_{ep.episode_id:06d}.bin", ep)

    def load(self, path: str | os.PathLike) -> None:
        """Replace buffer contents with the episodes stored under ``path``."""
        root = Path(path)
        files = sorted(root.glob("ep_*.bin")) if root.is_dir() else []
        self.episodes.clear()
        self._steps = 0
        self._open_obs, self._open_actions, self._open_rewards = [], [], []
        for file in files:
            ep = read_episode_file(file)
            self.episodes.append(ep)
            self._steps += ep.length
        self.episodes = deque(sorted(self.episodes, key=lambda e: e.episode_id))
        self._next_id = (self.episodes[-1].episode_id + 1) if self.episodes else 0
        while self._steps > self.capacity and len(self.episodes) > 1:
            evicted = self.episodes.popleft()
            self._steps -= evicted.length

    # ------------------------------------------------------------------

    @property
    def num_steps(self) -> int:
        return self._steps

    @property
    def num_episodes(self) -> int:
        return len(self.episodes)


# ----------------------------------------------------------------------
# Episode file format
# ----------------------------------------------------------------------

def _episode_header(ep: Episode) -> str:
    arrays = "|".join(
        f"{name}:f4:{','.join(str(d) for d in arr.shape)}"
        for name, arr in (("observations", ep.observations),
                          ("actions", ep.actions),
                          ("rewards", ep.rewards)))
    return (f"{_MAGIC}\n"
            f"id={ep.episode_id}\n"
            f"steps={ep.length}\n"
            f"reward_sum={float(ep.rewards.sum())!r}\n"
            f"arrays={arrays}\n")


def write_episode_file(path: str | os.PathLike, ep: Episode) -> None:
    payload = b"".join(arr.astype("<f4", copy=False).tobytes()
                       for arr in (ep.observations, ep.actions, ep.rewards))
    header = _episode_header(ep)
    crc = zlib.crc32(header.encode("ascii") + payload)
    blob = header.encode("ascii") + f"crc={crc}\n\n".encode("ascii") + payload
    with open(path, "wb") as fh:
        fh.write(blob)


def read_episode_file(path: str | os.PathLike) -> Episode:
    path = os.fspath(path)

    def corrupt(reason: str) -> ValueError:
        return ValueError(f"corrupt episode file {path}: {reason}")

    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise corrupt("missing header terminator")
    header_bytes, payload = blob[:sep + 1], blob[sep + 2:]
    try:
        lines = header_bytes.decode("ascii").splitlines()
    except UnicodeDecodeError:
        raise corrupt("header is not ASCII") from None
    if not lines or lines[0] != _MAGIC:
        raise corrupt("bad magic")
    kv = {}
    for line in lines[1:]:
        key, eq, value = line.partition("=")
        if not eq:
            raise corrupt(f"malformed header line {line!r}")
        kv[key] = value
    for required in ("id", "steps", "reward_sum", "arrays", "crc"):
        if required not in kv:
            raise corrupt(f"missing header field {required!r}")
    without_crc = "\n".join(line for line in lines if not line.startswith("crc=")) + "\n"
    try:
        stored_crc = int(kv["crc"])
    except ValueError:
        raise corrupt("non-integer crc") from None
    if zlib.crc32(without_crc.encode("ascii") + payload) != stored_crc:
        raise corrupt("checksum mismatch")
    arrays: dict[str, np.ndarray] = {}
    cursor = 0
    for decl in kv["arrays"].split("|"):
        match = re.fullmatch(r"(\w+):f4:([\d,]+)", decl)
        if not match:
            raise corrupt(f"malformed array declaration {decl!r}")
        name = match.group(1)
        shape = tuple(int(d) for d in match.group(2).split(","))
        nbytes = int(np.prod(shape)) * 4
        if cursor + nbytes > len(payload):
            raise corrupt("payload shorter than declared arrays")
        arrays[name] = np.frombuffer(
            payload[cursor:cursor + nbytes], dtype="<f4").reshape(shape).copy()
        cursor += nbytes
    if cursor != len(payload):
        raise corrupt("payload longer than declared arrays")
    try:
        ep = Episode(observations=arrays["observations"], actions=arrays["actions"],
                     rewards=arrays["rewards"], done=True, episode_id=int(kv["id"]))
    except KeyError as exc:
        raise corrupt(f"missing array {exc}") from None
    if ep.observations.shape[0] != ep.length + 1 or ep.actions.shape[0] != ep.length:
        raise corrupt("inconsistent array lengths")
    if int(kv["steps"]) != ep.length:
        raise corrupt("steps field disagrees with arrays")
    return ep
