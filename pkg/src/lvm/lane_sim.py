"""Desk-scale lane-keeping environment on a circular ring road.

The vehicle is a kinematic bicycle tracked in road-aligned coordinates
(arc-length station along the centerline, lateral offset y, heading error).
Observations are small top-down camera-like images rendered from the state;
the reward is a quadratic penalty on deviations and control effort.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import EnvConfig

TAU = 2.0 * math.pi


def wrap_angle(x: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.remainder(x, TAU)
    return w + TAU if w <= -math.pi else w


@dataclass(frozen=True)
class VehicleState:
    """Ground-truth vehicle pose and motion in road-aligned coordinates."""

    y: float        # lateral offset from the lane centerline [m]
    phi_err: float  # heading error w.r.t. the road tangent, in (-pi, pi]
    v: float        # longitudinal speed [m/s], >= 0
    omega: float    # yaw rate [rad/s]
    beta: float     # body side-slip angle [rad]
    station: float  # arc-length progress along the centerline [m], >= 0
    t: int          # episode step index

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in
                   (self.y, self.phi_err, self.v, self.omega, self.beta, self.station))


@dataclass(frozen=True)
class Action:
    """Longitudinal acceleration and front steering angle commands."""

    accel: float  # [m/s^2]
    steer: float  # [rad]


def _as_action(action) -> Action:
    if isinstance(action, Action):
        return action
    arr = np.asarray(action, dtype=np.float64).reshape(-1)
    if arr.shape[0] != 2:
        raise ValueError(f"action must have 2 components, got shape {arr.shape}")
    return Action(accel=float(arr[0]), steer=float(arr[1]))


class LaneKeepingEnv:
    """Single-lane ring-road environment with image observations.

    All randomness lives in `reset`; `step` is a deterministic function of the
    current state and the action, so a full trajectory is reproducible from
    (seed, action sequence). Instances share no mutable state.
    """

    def __init__(self, cfg: EnvConfig, seed: int | None = None):
        cfg.validate()
        self.cfg = cfg
        self._rng = np.random.default_rng(seed)
        self._state: VehicleState | None = None
        self._done = True
        # Lateral half-extent of the rendered window [m]; the near lane
        # boundary stays visible out to the off-road threshold.
        self._view_half = 1.6 * cfg.lane_half_width

    # ------------------------------------------------------------------
    # Episode lifecycle
    # ------------------------------------------------------------------

    def reset(self, seed: int | None = None) -> tuple[np.ndarray, VehicleState]:
        """Start a new episode near the lane center at the target speed."""
        rng = np.random.default_rng(seed) if seed is not None else self._rng
        cfg = self.cfg
        state = VehicleState(
            y=float(rng.uniform(-0.3, 0.3) * cfg.lane_half_width),
            phi_err=float(rng.uniform(-0.1, 0.1)),
            v=cfg.v0,
            omega=0.0,
            beta=0.0,
            station=float(rng.uniform(0.0, TAU * cfg.road_radius)),
            t=0,
        )
        self._state = state
        self._done = False
        return self.render(state), state

    def step(self, action) -> tuple[np.ndarray, float, bool, VehicleState]:
        """Advance one time step; returns (observation, reward, done, state)."""
        if self._state is None or self._done:
            raise RuntimeError("episode done: call reset() before step()")
        cfg = self.cfg
        act = _as_action(action)
        act = Action(
            accel=min(max(act.accel, cfg.a_min), cfg.a_max),
            steer=min(max(act.steer, -cfg.steer_max), cfg.steer_max),
        )
        state = self.dynamics_step(self._state, act, cfg.dt)
        reward = self.compute_reward(state, act)
        done = abs(state.y) > cfg.offroad_threshold or state.t >= cfg.max_steps
        self._state = state
        self._done = done
        return self.render(state), reward, done, state

    # ------------------------------------------------------------------
    # Dynamics and reward
    # ------------------------------------------------------------------

    def dynamics_step(self, state: VehicleState, action: Action, dt: float) -> VehicleState:
        """One explicit-Euler step of the kinematic bicycle in road coordinates.

        Side slip comes from the steering geometry, beta = atan(lr/(lf+lr) tan d),
        the yaw rate is v sin(beta)/lr, and the road tangent rotation (curvature
        times station advance) is subtracted from the heading change.
        """
        if not state.is_finite() or not (math.isfinite(action.accel) and math.isfinite(action.steer)):
            raise ValueError("invalid state: non-finite state or action")
        if not dt > 0:
            raise ValueError("invalid state: dt must be > 0")
        cfg = self.cfg
        if state.v > 0.0:
            beta = math.atan(cfg.lr / (cfg.lf + cfg.lr) * math.tan(action.steer))
        else:
            beta = 0.0
        omega = state.v * math.sin(beta) / cfg.lr
        course = state.phi_err + beta
        ds = state.v * math.cos(course) * dt
        y_new = state.y + state.v * math.sin(course) * dt
        phi_new = wrap_angle(state.phi_err + omega * dt - ds / cfg.road_radius)
        v_new = min(max(state.v + action.accel * dt, 0.0), cfg.v_max)
        return VehicleState(
            y=y_new,
            phi_err=phi_new,
            v=v_new,
            omega=omega,
            beta=beta,
            station=max(state.station + ds, 0.0),
            t=state.t + 1,
        )

    def compute_reward(self, state: VehicleState, action) -> float:
        """Quadratic penalty on deviations and control effort; always <= 0."""
        act = _as_action(action)
        c = self.cfg.c
        return (c[0] * state.y ** 2
                + c[1] * state.phi_err ** 2
                + c[2] * state.omega ** 2
                + c[3] * state.beta ** 2
                + c[4] * (state.v - self.cfg.v0) ** 2
                + c[5] * act.steer ** 2
                + c[6] * act.accel ** 2)

    # ------------------------------------------------------------------
    # Rendering
    # ------------------------------------------------------------------

    def render(self, state: VehicleState) -> np.ndarray:
        """Rasterize a vehicle-centered, heading-aligned top-down window.

        Returns a float32 array of shape [channels, img_size, img_size] with
        values in [0, 1]. The road surface, the two lane boundaries, and a
        dashed centerline are drawn with distinct intensities as smooth
        functions of road-aligned position, so identical states always produce
        identical pixels.
        """
        if not state.is_finite():
            raise ValueError("invalid state: non-finite state")
        cfg = self.cfg
        n = cfg.img_size
        half = self._view_half
        scale = 2.0 * half / n
        # Pixel centers in the vehicle frame: rows front-to-back, columns left-to-right.
        idx = (np.arange(n, dtype=np.float64) + 0.5) - n / 2.0
        fwd = (-idx * scale)[:, None]    # row 0 is farthest ahead
        left = (-idx * scale)[None, :]   # column 0 is leftmost
        sin_p, cos_p = math.sin(state.phi_err), math.cos(state.phi_err)
        lat = state.y + fwd * sin_p + left * cos_p
        sta = state.station + fwd * cos_p - left * sin_p

        w = cfg.lane_half_width
        surface = 0.32 * np.exp(-((lat / (1.05 * w)) ** 4))
        bound = 0.55 * (np.exp(-(((lat - w) / 0.30) ** 2))
                        + np.exp(-(((lat + w) / 0.30) ** 2)))
        dash = 0.5 * (1.0 + np.cos(TAU * sta / 4.0))
        center = 0.45 * dash * np.exp(-((lat / 0.35) ** 2))

        if cfg.img_channels == 1:
            img = 0.10 + surface + bound + center
            pixels = img[None, :, :]
        else:
            pixels = np.stack([
                0.10 + surface + 1.00 * bound + 0.45 * center,
                0.10 + surface + 0.45 * bound + 1.00 * center,
                0.12 + surface + 0.45 * bound + 0.45 * center,
            ])
        return np.clip(pixels, 0.0, 1.0).astype(np.float32)

    # ------------------------------------------------------------------

    @property
    def action_low(self) -> np.ndarray:
        return np.array([self.cfg.a_min, -self.cfg.steer_max], dtype=np.float32)

    @property
    def action_high(self) -> np.ndarray:
        return np.array([self.cfg.a_max, self.cfg.steer_max], dtype=np.float32)

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (self.cfg.img_channels, self.cfg.img_size, self.cfg.img_size)
