"""Virtual rollouts: unroll the learned prior under the current policy.

Starting from posterior latent states of real sequences, the prior transition
is applied for a fixed horizon with reparameterized stochastic-state noise.
The rollout keeps its autograd graph so value estimates computed on it can be
differentiated back to the policy parameters through the learned dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .latent_model import LatentModel, LatentState


@dataclass
class ImaginedTrajectory:
    """A batch of imagined rollouts, stacked along the trajectory axis M.

    ``latents`` holds H+1 states (index 0 is the real start state), ``actions``
    and ``rewards`` hold the H transitions; ``rewards[k]`` is the decoded
    reward for arriving at ``latents[k+1]``. ``start_ids[m]`` indexes the start
    state trajectory ``m`` was rolled out from.
    """

    latents: LatentState  # h: [H+1, M, deter], s: [H+1, M, stoch]
    actions: Tensor       # [H, M, action_dim]
    rewards: Tensor       # [H, M]
    start_ids: Tensor     # [M] long

    def __len__(self) -> int:
        return self.actions.shape[1]

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


def imagine(model: LatentModel, policy, starts: LatentState, horizon: int,
            traj_num: int = 1, generator: torch.Generator | None = None,
            sample: bool = True) -> ImaginedTrajectory:
    """Roll ``traj_num`` stochastic trajectories of length ``horizon`` from each start.

    ``policy`` must expose ``act(z: LatentState) -> Tensor`` (deterministic,
    batched). Starts are detached: no gradient flows back into how they were
    produced. With ``sample=False`` the stochastic state takes its prior mean,
    which makes all replicas of a start identical.
    """
    if horizon < 1 or traj_num < 1:
        raise ValueError("horizon and traj_num must be >= 1")
    n = starts.h.shape[0]
    z = LatentState(h=starts.h.detach().repeat_interleave(traj_num, dim=0),
                    s=starts.s.detach().repeat_interleave(traj_num, dim=0))
    start_ids = torch.arange(n).repeat_interleave(traj_num)

    hs, ss = [z.h], [z.s]
    actions, rewards = [], []
    for step in range(horizon):
        a = policy.act(z)
        h, prior = model.prior_step(z, a)
        if sample:
            eps = torch.randn(prior.mean.shape, generator=generator,
                              dtype=prior.mean.dtype, device=prior.mean.device)
            s = prior.mean + prior.std * eps
        else:
            s = prior.mean
        z = LatentState(h=h, s=s)
        if not (torch.isfinite(h).all() and torch.isfinite(s).all()):
            raise RuntimeError(f"diverged imagination at step {step}")
        hs.append(h)
        ss.append(s)
        actions.append(a)
        rewards.append(model.decode_reward(z))
    return ImaginedTrajectory(
        latents=LatentState(h=torch.stack(hs), s=torch.stack(ss)),
        actions=torch.stack(actions),
        rewards=torch.stack(rewards),
        start_ids=start_ids,
    )
