"""Recurrent stochastic latent dynamics model trained by variational inference.

The model carries a deterministic recurrent state ``h`` and a stochastic state
``s``. A gated recurrent cell advances ``h`` from the previous (s, action);
a prior head predicts the distribution of ``s`` from ``h`` alone, and a
posterior head corrects that prediction with the encoded current observation.
Observation and reward decoders are the means of unit-variance Gaussian
likelihoods. Training maximizes the per-step evidence bound

    J = log p(o | h, s) + log p(r | h, s) - KL(posterior || prior),

averaged over batch and time, with an optional free-nats floor on the KL term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .config import ModelConfig

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianDiag:
    """Diagonal Gaussian; ``mean`` and ``std`` share a trailing event dim."""

    mean: Tensor
    std: Tensor


@dataclass
class LatentState:
    """Pair of deterministic (h) and stochastic (s) state tensors."""

    h: Tensor
    s: Tensor

    def detach(self) -> "LatentState":
        return LatentState(self.h.detach(), self.s.detach())

    @property
    def feature(self) -> Tensor:
        """Concatenated (s, h) feature consumed by the actor and critics."""
        return torch.cat([self.s, self.h], dim=-1)


def kl_divergence(q: GaussianDiag, p: GaussianDiag) -> Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over the event dim."""
    if q.mean.shape != p.mean.shape or q.std.shape != p.std.shape:
        raise ValueError(
            f"mismatched Gaussian shapes: {tuple(q.mean.shape)} vs {tuple(p.mean.shape)}")
    var_ratio = (q.std / p.std) ** 2
    mean_term = ((q.mean - p.mean) / p.std) ** 2
    return 0.5 * (var_ratio + mean_term - 1.0 - torch.log(var_ratio)).sum(-1)


def gaussian_log_prob(x: Tensor, mean: Tensor, event_dims: int,
                      variance: float = 1.0) -> Tensor:
    """Log density of a fixed-variance Gaussian, summed over the last ``event_dims`` dims."""
    ll = -0.5 * ((x - mean) ** 2 / variance + _LOG_2PI + math.log(variance))
    if event_dims == 0:
        return ll
    return ll.sum(tuple(range(-event_dims, 0)))


def _mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden), nn.ELU(),
        nn.Linear(hidden, hidden), nn.ELU(),
        nn.Linear(hidden, out_dim),
    )


def _conv_stages(img_size: int) -> int:
    stages = int(math.log2(img_size)) - 2
    if stages < 1 or 2 ** (stages + 2) != img_size:
        raise ValueError(f"img_size {img_size} must be a power of two >= 8")
    return stages


class ImageEncoder(nn.Module):
    """Strided conv stack halving resolution to 4x4, then a linear projection."""

    def __init__(self, obs_shape: tuple[int, int, int], base_channels: int, embed_size: int):
        super().__init__()
        channels, img_size, _ = obs_shape
        stages = _conv_stages(img_size)
        widths = [base_channels * 2 ** i for i in range(stages)]
        layers: list[nn.Module] = []
        prev = channels
        for width in widths:
            layers += [nn.Conv2d(prev, width, kernel_size=4, stride=2, padding=1), nn.ReLU()]
            prev = width
        self.conv = nn.Sequential(*layers)
        self.fc = nn.Linear(widths[-1] * 16, embed_size)
        self.obs_shape = obs_shape

    def forward(self, obs: Tensor) -> Tensor:
        x = self.conv(obs)
        return self.fc(x.flatten(1))


class ImageDecoder(nn.Module):
    """Mirror of the encoder: linear to 4x4 feature map, transposed convs up."""

    def __init__(self, obs_shape: tuple[int, int, int], base_channels: int, feature_dim: int):
        super().__init__()
        channels, img_size, _ = obs_shape
        stages = _conv_stages(img_size)
        widths = [base_channels * 2 ** i for i in range(stages)]
        self.top_width = widths[-1]
        self.fc = nn.Linear(feature_dim, self.top_width * 16)
        layers: list[nn.Module] = []
        rev = list(reversed(widths))
        for i, width in enumerate(rev):
            out = channels if i == stages - 1 else rev[i + 1]
            layers.append(nn.ConvTranspose2d(width, out, kernel_size=4, stride=2, padding=1))
            if i != stages - 1:
                layers.append(nn.ReLU())
        self.deconv = nn.Sequential(*layers)

    def forward(self, feature: Tensor) -> Tensor:
        x = self.fc(feature).reshape(-1, self.top_width, 4, 4)
        return self.deconv(x)


class LatentModel(nn.Module):
    """Encoder, recurrent core, prior/posterior heads, and the two decoders."""

    def __init__(self, cfg: ModelConfig, obs_shape: tuple[int, int, int], action_dim: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.obs_shape = tuple(obs_shape)
        self.action_dim = action_dim
        feature_dim = cfg.deter_size + cfg.stoch_size
        self.encoder = ImageEncoder(self.obs_shape, cfg.base_channels, cfg.embed_size)
        self.rnn_in = nn.Linear(cfg.stoch_size + action_dim, cfg.hidden_size)
        self.rnn = nn.GRUCell(cfg.hidden_size, cfg.deter_size)
        self.prior_head = _mlp(cfg.deter_size, cfg.hidden_size, 2 * cfg.stoch_size)
        self.posterior_head = _mlp(cfg.deter_size + cfg.embed_size, cfg.hidden_size,
                                   2 * cfg.stoch_size)
        self.obs_decoder = ImageDecoder(self.obs_shape, cfg.base_channels, feature_dim)
        self.reward_decoder = _mlp(feature_dim, cfg.hidden_size, 1)

    # ------------------------------------------------------------------
    # Primitives
    # ------------------------------------------------------------------

    @property
    def dtype(self) -> torch.dtype:
        return self.rnn_in.weight.dtype

    def initial_state(self, batch_size: int) -> LatentState:
        kw = dict(dtype=self.dtype, device=self.rnn_in.weight.device)
        return LatentState(h=torch.zeros(batch_size, self.cfg.deter_size, **kw),
                           s=torch.zeros(batch_size, self.cfg.stoch_size, **kw))

    def encode(self, obs: Tensor) -> Tensor:
        """Embed observations; accepts any leading batch dims before [C, H, W]."""
        obs = torch.as_tensor(obs, dtype=self.dtype)
        if tuple(obs.shape[-3:]) != self.obs_shape:
            raise ValueError(
                f"observation shape {tuple(obs.shape[-3:])} does not match model {self.obs_shape}")
        lead = obs.shape[:-3]
        flat = obs.reshape((-1,) + self.obs_shape)
        return self.encoder(flat).reshape(lead + (self.cfg.embed_size,))

    def _stats(self, raw: Tensor) -> GaussianDiag:
        mean, pre_std = raw.chunk(2, dim=-1)
        return GaussianDiag(mean=mean, std=F.softplus(pre_std) + self.cfg.min_std)

    def prior_step(self, prev: LatentState, action: Tensor) -> tuple[Tensor, GaussianDiag]:
        """Advance the deterministic state and predict the next stochastic prior."""
        action = torch.as_tensor(action, dtype=self.dtype)
        x = F.elu(self.rnn_in(torch.cat([prev.s, action], dim=-1)))
        h = self.rnn(x, prev.h)
        return h, self._stats(self.prior_head(h))

    def posterior(self, h: Tensor, embedding: Tensor) -> GaussianDiag:
        """Correct the prior with the current observation's embedding."""
        return self._stats(self.posterior_head(torch.cat([h, embedding], dim=-1)))

    def decode_obs(self, z: LatentState) -> Tensor:
        """Mean of the unit-variance image likelihood, shaped like the observation."""
        feature = z.feature
        lead = feature.shape[:-1]
        out = self.obs_decoder(feature.reshape(-1, feature.shape[-1]))
        return out.reshape(lead + self.obs_shape)

    def decode_reward(self, z: LatentState) -> Tensor:
        """Mean of the unit-variance reward likelihood."""
        return self.reward_decoder(z.feature).squeeze(-1)

    # ------------------------------------------------------------------
    # Sequence operations
    # ------------------------------------------------------------------

    def _filter(self, prev: LatentState, action: Tensor, embedding: Tensor,
                generator: torch.Generator | None, sample: bool
                ) -> tuple[LatentState, GaussianDiag, GaussianDiag]:
        h, prior = self.prior_step(prev, action)
        post = self.posterior(h, embedding)
        if sample:
            eps = torch.randn(post.mean.shape, generator=generator,
                              dtype=post.mean.dtype, device=post.mean.device)
            s = post.mean + post.std * eps
        else:
            s = post.mean
        return LatentState(h=h, s=s), prior, post

    def filter_step(self, prev: LatentState, action: Tensor, obs: Tensor,
                    generator: torch.Generator | None = None, sample: bool = True
                    ) -> tuple[LatentState, GaussianDiag, GaussianDiag]:
        """One online filtering update from a raw observation."""
        return self._filter(prev, action, self.encode(obs), generator, sample)

    def observe_sequence(self, batch, init: LatentState | None = None,
                         generator: torch.Generator | None = None, sample: bool = True
                         ) -> tuple[LatentState, GaussianDiag, GaussianDiag]:
        """Filter a [B, L] sequence batch in time order.

        ``batch.actions[:, k]`` must be the action that led to
        ``batch.observations[:, k]`` (the replay buffer's alignment). Returns
        stacked posterior samples, priors, and posteriors, each with leading
        dims [B, L].
        """
        obs = torch.as_tensor(batch.observations, dtype=self.dtype)
        actions = torch.as_tensor(batch.actions, dtype=self.dtype)
        b, length = obs.shape[0], obs.shape[1]
        embeds = self.encode(obs)
        z = init if init is not None else self.initial_state(b)
        hs, ss, stats = [], [], []
        for k in range(length):
            z, prior, post = self._filter(z, actions[:, k], embeds[:, k], generator, sample)
            hs.append(z.h)
            ss.append(z.s)
            stats.append((prior, post))
        states = LatentState(h=torch.stack(hs, dim=1), s=torch.stack(ss, dim=1))
        priors = GaussianDiag(mean=torch.stack([p.mean for p, _ in stats], dim=1),
                              std=torch.stack([p.std for p, _ in stats], dim=1))
        posts = GaussianDiag(mean=torch.stack([q.mean for _, q in stats], dim=1),
                             std=torch.stack([q.std for _, q in stats], dim=1))
        return states, priors, posts

    def elbo_loss(self, batch, generator: torch.Generator | None = None
                  ) -> tuple[Tensor, dict[str, float]]:
        """Evidence bound of a sequence batch (to be ascended).

        Returns the scalar objective and its per-step components averaged over
        batch and time: observation and reward log-likelihoods and the negated
        (free-nats-floored) KL term.
        """
        obs = torch.as_tensor(batch.observations, dtype=self.dtype)
        rewards = torch.as_tensor(batch.rewards, dtype=self.dtype)
        states, priors, posts = self.observe_sequence(batch, generator=generator)
        j_obs = gaussian_log_prob(obs, self.decode_obs(states), event_dims=3)
        j_rew = gaussian_log_prob(rewards, self.decode_reward(states), event_dims=0,
                                  variance=self.cfg.reward_variance)
        kl = kl_divergence(posts, priors)
        if self.cfg.free_nats > 0:
            j_div = -torch.clamp(kl, min=self.cfg.free_nats)
        else:
            j_div = -kl
        objective = (j_obs + j_rew + j_div).mean()
        components = {
            "J_o": float(j_obs.mean().detach()),
            "J_r": float(j_rew.mean().detach()),
            "J_D": float(j_div.mean().detach()),
            "kl": float(kl.mean().detach()),
        }
        return objective, components
