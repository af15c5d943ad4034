"""Toy continuous-control environments with exact analytic dynamics.

All environments integrate their ODE with semi-implicit Euler at a fixed
timestep, clip out-of-bounds actions (counting the clips), and are
bit-exact deterministic given state and action.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class EnvSpec:
    name: str
    d_s: int
    d_a: int
    action_low: np.ndarray
    action_high: np.ndarray
    max_episode_steps: int
    dt: float

    def validate(self) -> None:
        if not np.all(self.action_low < self.action_high):
            raise ValueError("action_low must be elementwise below action_high")


def wrap_angle(theta):
    """Wrap to [-pi, pi)."""
    return (theta + np.pi) % (2.0 * np.pi) - np.pi


class Env:
    """Base: subclasses define ``_reset_state``, ``_integrate``, ``_reward``,
    ``_observe`` and optionally ``_terminated``."""

    spec: EnvSpec

    def __init__(self):
        self._state: np.ndarray | None = None
        self._steps = 0
        self.clip_count = 0
        self.failed = False

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._state = self._reset_state(rng)
        self._steps = 0
        self.failed = False
        return self._observe(self._state)

    def step(self, a: np.ndarray) -> tuple[np.ndarray, float, bool]:
        if self._state is None:
            raise RuntimeError("call reset() before step()")
        a = np.asarray(a, dtype=np.float64).reshape(self.spec.d_a)
        clipped = np.clip(a, self.spec.action_low, self.spec.action_high)
        if not np.array_equal(clipped, a):
            self.clip_count += 1
        next_state = self._integrate(self._state, clipped)
        reward = self._reward(self._state, clipped, next_state)
        self._state = next_state
        self._steps += 1
        if not np.all(np.isfinite(next_state)):
            self.failed = True
            return self._observe(np.nan_to_num(next_state)), float(reward), True
        done = self._steps >= self.spec.max_episode_steps or self._terminated(
            next_state
        )
        return self._observe(next_state), float(reward), bool(done)

    @property
    def state(self) -> np.ndarray:
        return self._state.copy()

    def _terminated(self, state: np.ndarray) -> bool:
        return False


class PendulumSwingup(Env):
    """Torque-limited pendulum swing-up.

    The angle ``theta`` is measured from the hanging position, so the ODE is
    ``theta_dd = -(g/l) * sin(theta) + u / (m * l^2)`` and the upright goal
    sits at ``theta = +-pi`` (an unstable fixed point). Observation is
    ``[cos(theta), sin(theta), theta_dot]``. Reward is
    ``-(delta^2 + 0.1 * theta_dot^2 + 0.001 * u^2)`` where ``delta`` is the
    wrapped angular deviation from upright; its range is
    ``[-(pi^2 + 0.1 * 8^2 + 0.001 * u_max^2), 0]``. Resets draw ``theta``
    uniform over [-pi, pi] and ``theta_dot`` uniform over [-1, 1].
    """

    GRAVITY = 10.0
    MASS = 1.0
    LENGTH = 1.0
    MAX_SPEED = 8.0
    MAX_TORQUE = 2.0

    def __init__(self, max_episode_steps: int = 200, dt: float = 0.05):
        super().__init__()
        self.spec = EnvSpec(
            name="pendulum",
            d_s=3,
            d_a=1,
            action_low=np.array([-self.MAX_TORQUE]),
            action_high=np.array([self.MAX_TORQUE]),
            max_episode_steps=max_episode_steps,
            dt=dt,
        )

    def _reset_state(self, rng: np.random.Generator) -> np.ndarray:
        theta = rng.uniform(-np.pi, np.pi)
        theta_dot = rng.uniform(-1.0, 1.0)
        return np.array([theta, theta_dot])

    def _integrate(self, state: np.ndarray, a: np.ndarray) -> np.ndarray:
        theta, theta_dot = state
        u = a[0]
        acc = -(self.GRAVITY / self.LENGTH) * np.sin(theta) + u / (
            self.MASS * self.LENGTH**2
        )
        theta_dot = np.clip(theta_dot + self.spec.dt * acc, -self.MAX_SPEED, self.MAX_SPEED)
        theta = theta + self.spec.dt * theta_dot
        return np.array([theta, theta_dot])

    def _reward(self, state, a, next_state) -> float:
        theta, theta_dot = state
        delta = wrap_angle(theta - np.pi)
        return -(delta**2 + 0.1 * theta_dot**2 + 0.001 * a[0] ** 2)

    def _observe(self, state: np.ndarray) -> np.ndarray:
        theta, theta_dot = state
        return np.array([np.cos(theta), np.sin(theta), theta_dot])

    def energy(self) -> float:
        """Total mechanical energy, zero at the hanging rest state."""
        theta, theta_dot = self._state
        kinetic = 0.5 * self.MASS * (self.LENGTH * theta_dot) ** 2
        potential = self.MASS * self.GRAVITY * self.LENGTH * (1.0 - np.cos(theta))
        return kinetic + potential


class PointMassNavigation(Env):
    """Damped point mass pushed toward the origin goal.

    State is [x, y, vx, vy]; the force ODE is ``v_dot = f - drag * v`` with
    drag 0.1. Reward is ``-||pos|| + bonus`` with a +1 bonus inside the 0.1
    goal radius; positions clip to the [-2, 2]^2 arena so the range is
    [-(2 * sqrt(2)), 1], maximal (=1) at the goal. Resets place the mass
    uniform over [-1.5, 1.5]^2 at rest.
    """

    DRAG = 0.1
    GOAL_RADIUS = 0.1
    GOAL_BONUS = 1.0
    ARENA = 2.0
    MAX_SPEED = 5.0

    def __init__(self, max_episode_steps: int = 100, dt: float = 0.05):
        super().__init__()
        self.spec = EnvSpec(
            name="pointmass",
            d_s=4,
            d_a=2,
            action_low=np.array([-1.0, -1.0]),
            action_high=np.array([1.0, 1.0]),
            max_episode_steps=max_episode_steps,
            dt=dt,
        )

    def _reset_state(self, rng: np.random.Generator) -> np.ndarray:
        pos = rng.uniform(-1.5, 1.5, size=2)
        return np.array([pos[0], pos[1], 0.0, 0.0])

    def _integrate(self, state: np.ndarray, a: np.ndarray) -> np.ndarray:
        pos, vel = state[:2], state[2:]
        vel = vel + self.spec.dt * (a - self.DRAG * vel)
        vel = np.clip(vel, -self.MAX_SPEED, self.MAX_SPEED)
        pos = np.clip(pos + self.spec.dt * vel, -self.ARENA, self.ARENA)
        return np.concatenate([pos, vel])

    def _reward(self, state, a, next_state) -> float:
        dist = float(np.linalg.norm(state[:2]))
        bonus = self.GOAL_BONUS if dist < self.GOAL_RADIUS else 0.0
        return -dist + bonus

    def _observe(self, state: np.ndarray) -> np.ndarray:
        return state.copy()


class CartpoleSwingup(Env):
    """Cart-pole swing-up on a bounded track.

    The pole angle ``theta`` is measured from hanging; with s = sin(theta),
    c = cos(theta), the frictionless dynamics are

        x_dd     = (f + m_p * s * (l * theta_dot^2 + g * c)) / (m_c + m_p * s^2)
        theta_dd = -(g * s + x_dd * c) / l

    Observation is [x, x_dot, cos(theta), sin(theta), theta_dot]. Reward is
    ``cos(theta - pi) - 0.005 * x^2 - 0.001 * f^2`` (range [-1.14, 1], best
    upright at the track center). Episodes terminate when |x| > 2.5 or on
    the step limit. Resets start near hanging rest.
    """

    GRAVITY = 10.0
    CART_MASS = 1.0
    POLE_MASS = 0.1
    LENGTH = 0.5
    MAX_FORCE = 10.0
    TRACK_LIMIT = 2.5

    def __init__(self, max_episode_steps: int = 200, dt: float = 0.05):
        super().__init__()
        self.spec = EnvSpec(
            name="cartpole",
            d_s=5,
            d_a=1,
            action_low=np.array([-self.MAX_FORCE]),
            action_high=np.array([self.MAX_FORCE]),
            max_episode_steps=max_episode_steps,
            dt=dt,
        )

    def _reset_state(self, rng: np.random.Generator) -> np.ndarray:
        x = rng.uniform(-0.05, 0.05)
        theta = rng.uniform(-0.1, 0.1)
        return np.array([x, 0.0, theta, 0.0])

    def _integrate(self, state: np.ndarray, a: np.ndarray) -> np.ndarray:
        x, x_dot, theta, theta_dot = state
        f = a[0]
        s, c = np.sin(theta), np.cos(theta)
        total = self.CART_MASS + self.POLE_MASS * s**2
        x_dd = (
            f + self.POLE_MASS * s * (self.LENGTH * theta_dot**2 + self.GRAVITY * c)
        ) / total
        theta_dd = -(self.GRAVITY * s + x_dd * c) / self.LENGTH
        x_dot = x_dot + self.spec.dt * x_dd
        theta_dot = theta_dot + self.spec.dt * theta_dd
        x = x + self.spec.dt * x_dot
        theta = theta + self.spec.dt * theta_dot
        return np.array([x, x_dot, theta, theta_dot])

    def _terminated(self, state: np.ndarray) -> bool:
        return bool(abs(state[0]) > self.TRACK_LIMIT)

    def _reward(self, state, a, next_state) -> float:
        x, _, theta, _ = state
        return float(np.cos(theta - np.pi) - 0.005 * x**2 - 0.001 * a[0] ** 2)

    def _observe(self, state: np.ndarray) -> np.ndarray:
        x, x_dot, theta, theta_dot = state
        return np.array([x, x_dot, np.cos(theta), np.sin(theta), theta_dot])


ENV_REGISTRY = {
    "pendulum": PendulumSwingup,
    "pointmass": PointMassNavigation,
    "cartpole": CartpoleSwingup,
}


def make_env(name: str, **kwargs) -> Env:
    if name not in ENV_REGISTRY:
        raise ValueError(
            f"unknown environment {name!r}; available: {sorted(ENV_REGISTRY)}"
        )
    return ENV_REGISTRY[name](**kwargs)
