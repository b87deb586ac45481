"""Actor and twin critics operating on latent states.

The actor is a deterministic tanh-squashed network; the critics are two
independently initialized value networks. Value targets are TD(lambda)
returns computed separately with each critic's own bootstraps and combined
by an elementwise minimum, which counteracts the upward value bias that a
single learned critic accumulates on model-generated data.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from .imagination import ImaginedTrajectory
from .latent_model import LatentState


def lambda_return(rewards: Tensor, boot_values: Tensor, gamma: float, lam: float) -> Tensor:
    """TD(lambda) returns along the leading (time) axis.

    ``boot_values[k]`` is the critic value of the state reached k+1 steps
    ahead of the start, matching ``rewards[k]`` earned on the way there. The
    returns are computed by the backward recursion

        V[H-1] = r[H-1] + gamma * boot[H-1]
        V[t]   = r[t] + gamma * ((1 - lam) * boot[t] + lam * V[t+1]),

    which is algebraically the exponentially weighted mixture of n-step
    bootstrapped returns. lam=0 gives one-step targets, lam=1 the full
    horizon return.
    """
    if rewards.shape != boot_values.shape:
        raise ValueError(
            f"length mismatch: rewards {tuple(rewards.shape)} vs boot {tuple(boot_values.shape)}")
    if rewards.shape[0] < 1:
        raise ValueError("need at least one step")
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma and lam must lie in [0, 1]")
    horizon = rewards.shape[0]
    out = [rewards[-1] + gamma * boot_values[-1]]
    for t in range(horizon - 2, -1, -1):
        blended = (1.0 - lam) * boot_values[t] + lam * out[-1]
        out.append(rewards[t] + gamma * blended)
    out.reverse()
    return torch.stack(out)


class Actor(nn.Module):
    """Deterministic policy network with tanh squashing to the action box."""

    def __init__(self, feature_dim: int, hidden: int, action_low, action_high):
        super().__init__()
        low = torch.as_tensor(np.asarray(action_low), dtype=torch.float32)
        high = torch.as_tensor(np.asarray(action_high), dtype=torch.float32)
        self.net = nn.Sequential(
            nn.Linear(feature_dim, hidden), nn.ELU(),
            nn.Linear(hidden, hidden), nn.ELU(),
            nn.Linear(hidden, low.shape[0]),
        )
        self.register_buffer("mid", (high + low) / 2.0)
        self.register_buffer("half_range", (high - low) / 2.0)

    def forward(self, feature: Tensor) -> Tensor:
        return self.mid + self.half_range * torch.tanh(self.net(feature))


class Critic(nn.Module):
    """Scalar state-value network on the latent feature."""

    def __init__(self, feature_dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(feature_dim, hidden), nn.ELU(),
            nn.Linear(hidden, hidden), nn.ELU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, feature: Tensor) -> Tensor:
        return self.net(feature).squeeze(-1)


class Agent:
    """Policy plus one or two critics, with their losses.

    The two critics are initialized independently and never tied; disabling
    the second (``single_critic=True``) reduces every min-of-two target to the
    first critic's TD(lambda) return.
    """

    def __init__(self, feature_dim: int, hidden: int, action_low, action_high,
                 gamma: float = 0.99, lam: float = 0.95,
                 single_critic: bool = False, horizon_sum: bool = True):
        self.gamma = gamma
        self.lam = lam
        self.horizon_sum = horizon_sum
        self.actor = Actor(feature_dim, hidden, action_low, action_high)
        self.critic1 = Critic(feature_dim, hidden)
        self.critic2 = None if single_critic else Critic(feature_dim, hidden)

    @property
    def critics(self) -> list[nn.Module]:
        return [self.critic1] if self.critic2 is None else [self.critic1, self.critic2]

    def modules(self) -> list[nn.Module]:
        return [self.actor] + self.critics

    def to_dtype(self, dtype: torch.dtype) -> "Agent":
        for module in self.modules():
            module.to(dtype)
        return self

    # ------------------------------------------------------------------
    # Acting
    # ------------------------------------------------------------------

    def act(self, z: LatentState) -> Tensor:
        """Deterministic action for a latent state; within limits by construction."""
        return self.actor(z.feature)

    def explore_action(self, z: LatentState, sigma: float,
                       generator: torch.Generator | None = None) -> Tensor:
        """Greedy action plus isotropic Gaussian noise, clamped to the limits."""
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        a = self.act(z)
        if sigma > 0:
            noise = sigma * torch.randn(a.shape, generator=generator,
                                        dtype=a.dtype, device=a.device)
            a = a + noise
        low = self.actor.mid - self.actor.half_range
        high = self.actor.mid + self.actor.half_range
        return torch.clamp(a, low, high)

    # ------------------------------------------------------------------
    # Targets and losses on imagined trajectories
    # ------------------------------------------------------------------

    def _per_critic_returns(self, traj: ImaginedTrajectory) -> list[Tensor]:
        feature = traj.latents.feature[1:]  # bootstrap states z_1 .. z_H
        return [lambda_return(traj.rewards, critic(feature), self.gamma, self.lam)
                for critic in self.critics]

    def value_target(self, traj: ImaginedTrajectory) -> Tensor:
        """Elementwise minimum of the per-critic TD(lambda) returns, detached."""
        with torch.no_grad():
            returns = self._per_critic_returns(traj)
            target = returns[0]
            for other in returns[1:]:
                target = torch.minimum(target, other)
            return target

    def critic_loss(self, traj: ImaginedTrajectory, targets: Tensor
                    ) -> tuple[Tensor, Tensor | None]:
        """Independent half-MSE regressions of each critic onto the fixed targets."""
        feature = traj.latents.feature[:-1].detach()  # states z_0 .. z_{H-1}
        targets = targets.detach()
        losses = [0.5 * ((critic(feature) - targets) ** 2).mean() for critic in self.critics]
        return (losses[0], losses[1]) if len(losses) == 2 else (losses[0], None)

    def actor_loss(self, traj: ImaginedTrajectory) -> Tensor:
        """Expected-return objective for the policy (to be ascended).

        Recomputes the min-of-critics TD(lambda) targets *through* the rollout
        graph, so the gradient flows into the policy via the learned dynamics
        and reward model; model and critic parameters are held fixed by the
        optimizer split, not by detaching.
        """
        returns = self._per_critic_returns(traj)
        target = returns[0]
        for other in returns[1:]:
            target = torch.minimum(target, other)
        if self.horizon_sum:
            return target.sum(0).mean()
        return target[0].mean()
