"""Latent-space MPPI planner: sample action sequences, score them with the
H-step return estimate, refit Gaussian moments from exponentially weighted
top-k elites, and act with the first step of the fitted mean."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .world_model import WorldModel, dynamics_np, policy_dist_np, reward_np, value_np


@dataclass
class PlannerConfig:
    horizon: int = 3
    num_samples: int = 512
    num_policy_samples: int = 24
    top_k: int = 64
    temperature: float = 0.5
    iterations: int = 6
    min_std: float = 0.05
    max_std: float = 2.0
    init_std: float = 1.0
    keep_elites: int = 1
    # start every plan() call from init_std rather than the warm-started
    # (already shrunken) sigma; carried sigma starves the candidate pool
    # of diversity at the new state and stalls re-planning
    reset_std_each_plan: bool = True

    def validate(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.top_k < 1 or self.top_k > self.num_samples + self.num_policy_samples:
            raise ValueError(
                f"top_k={self.top_k} must be in [1, num_samples + num_policy_samples]"
            )
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not (0 < self.min_std <= self.max_std):
            raise ValueError("need 0 < min_std <= max_std")


@dataclass
class TrajectoryDistribution:
    """Per-horizon-step Gaussian moments over action sequences."""

    mu: np.ndarray  # (H, d_a)
    sigma: np.ndarray  # (H, d_a)


@dataclass
class ScoredTrajectory:
    actions: np.ndarray  # (H, d_a)
    phi: float


@dataclass
class PlanDiagnostics:
    iterations: int = 0
    elite_phi_max: list[float] = field(default_factory=list)
    elite_phi_mean: list[float] = field(default_factory=list)
    fallback: bool = False

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "elite_phi_max": self.elite_phi_max,
            "elite_phi_mean": self.elite_phi_mean,
            "fallback": self.fallback,
        }


def estimate_returns(
    model: WorldModel, z0: np.ndarray, actions: np.ndarray, gamma: float
) -> np.ndarray:
    """Batched H-step return estimates.

    actions has shape (N, H, d_a); z0 is a single latent, broadcast across
    the batch. Each sequence is scored as
    sum_t gamma^t * reward(z_t, a_t) + gamma^H * Q(z_H, a_H) with the
    terminal bootstrap action a_H taken as the policy mean at z_H.
    Sequences that produce non-finite intermediates score -inf.
    """
    n, horizon, _ = actions.shape
    z = np.broadcast_to(z0, (n, z0.shape[-1])).copy()
    phi = np.zeros(n)
    discount = 1.0
    for t in range(horizon):
        phi += discount * reward_np(model, z, actions[:, t])
        z = dynamics_np(model, z, actions[:, t])
        discount *= gamma
    a_term, _ = policy_dist_np(model, z)
    phi += discount * value_np(model, z, a_term)
    return np.where(np.isfinite(phi), phi, -np.inf)


def estimate_return(
    model: WorldModel, z0: np.ndarray, actions: np.ndarray, gamma: float
) -> float:
    """Return estimate for a single (H, d_a) action sequence."""
    return float(estimate_returns(model, z0, actions[None], gamma)[0])


def compute_moments(
    elites,
    phis=None,
    temperature: float = 0.5,
    min_std: float = 0.05,
    max_std: float = 2.0,
) -> TrajectoryDistribution:
    """Exponentially weighted mean/std of elite action sequences.

    ``elites`` is either a list of ScoredTrajectory or an array of shape
    (k, H, d_a) with ``phis`` of shape (k,). Weights are
    exp(temperature * (phi_i - max_j phi_j)); the max shift keeps the
    exponentials in range and does not change the moments.
    """
    if phis is None:
        if not elites:
            raise ValueError("cannot compute moments of an empty elite set")
        phis = np.array([e.phi for e in elites])
        actions = np.stack([e.actions for e in elites])
    else:
        actions = np.asarray(elites, dtype=np.float64)
        phis = np.asarray(phis, dtype=np.float64)
    if actions.shape[0] == 0:
        raise ValueError("cannot compute moments of an empty elite set")
    if not np.all(np.isfinite(phis)):
        raise ValueError("elite scores must be finite")
    weights = np.exp(temperature * (phis - phis.max()))
    total = weights.sum()
    w = (weights / total)[:, None, None]
    mu = (w * actions).sum(axis=0)
    var = (w * (actions - mu) ** 2).sum(axis=0)
    sigma = np.clip(np.sqrt(var), min_std, max_std)
    return TrajectoryDistribution(mu=mu, sigma=sigma)


def _policy_rollouts(
    model: WorldModel,
    z0: np.ndarray,
    n: int,
    horizon: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sample n action sequences by rolling the policy through the dynamics."""
    z = np.broadcast_to(z0, (n, z0.shape[-1])).copy()
    actions = np.empty((n, horizon, model.cfg.d_a))
    for t in range(horizon):
        mean, log_std = policy_dist_np(model, z)
        actions[:, t] = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        z = dynamics_np(model, z, actions[:, t])
    return actions


def warm_start(
    prev: TrajectoryDistribution, init_std: float
) -> TrajectoryDistribution:
    """Shift the previous plan one step; the new last step gets the prior std."""
    mu = np.empty_like(prev.mu)
    sigma = np.empty_like(prev.sigma)
    mu[:-1] = prev.mu[1:]
    mu[-1] = 0.0
    sigma[:-1] = prev.sigma[1:]
    sigma[-1] = init_std
    return TrajectoryDistribution(mu=mu, sigma=sigma)


def plan(
    model: WorldModel,
    z0: np.ndarray,
    prev_dist: TrajectoryDistribution | None,
    config: PlannerConfig,
    rng: np.random.Generator,
    gamma: float,
    action_low: np.ndarray | None = None,
    action_high: np.ndarray | None = None,
    score_fn=None,
    explore: bool = False,
) -> tuple[np.ndarray, TrajectoryDistribution, PlanDiagnostics]:
    """Refine a trajectory distribution and pick the next action.

    Each iteration draws ``num_samples`` sequences from the current
    (mu, sigma), adds ``num_policy_samples`` policy rollouts and the carried
    elites of the previous iteration, scores everything (``score_fn``
    defaults to the model's return estimator), and refits the moments from
    the top-k. Returns the first-step action of the final mean (plus
    exploration noise when ``explore``), the final distribution for
    warm-starting, and per-iteration elite statistics.
    """
    config.validate()
    d_a = model.cfg.d_a
    horizon = config.horizon
    if prev_dist is not None:
        dist = warm_start(prev_dist, config.init_std)
        if config.reset_std_each_plan:
            dist.sigma[...] = config.init_std
    else:
        dist = TrajectoryDistribution(
            mu=np.zeros((horizon, d_a)),
            sigma=np.full((horizon, d_a), config.init_std),
        )
    if score_fn is None:
        score_fn = lambda acts: estimate_returns(model, z0, acts, gamma)

    diag = PlanDiagnostics()
    carried = np.empty((0, horizon, d_a))
    for _ in range(config.iterations):
        noise = rng.standard_normal((config.num_samples, horizon, d_a))
        samples = dist.mu + dist.sigma * noise
        pools = [samples]
        if config.num_policy_samples > 0:
            pools.append(
                _policy_rollouts(model, z0, config.num_policy_samples, horizon, rng)
            )
        if carried.shape[0]:
            pools.append(carried)
        candidates = np.concatenate(pools, axis=0)
        if action_low is not None or action_high is not None:
            candidates = np.clip(candidates, action_low, action_high)
        phis = np.asarray(score_fn(candidates), dtype=np.float64)
        phis = np.where(np.isfinite(phis), phis, -np.inf)
        if not np.any(np.isfinite(phis)):
            diag.fallback = True
            diag.iterations += 1
            mean, _ = policy_dist_np(model, z0)
            a0 = np.clip(mean, action_low, action_high) if action_low is not None else mean
            return a0, dist, diag
        order = np.argsort(-phis, kind="stable")
        k = min(config.top_k, int(np.isfinite(phis).sum()))
        elite_idx = order[:k]
        elite_actions = candidates[elite_idx]
        elite_phis = phis[elite_idx]
        dist = compute_moments(
            elite_actions,
            elite_phis,
            temperature=config.temperature,
            min_std=config.min_std,
            max_std=config.max_std,
        )
        carried = elite_actions[: config.keep_elites].copy()
        diag.iterations += 1
        diag.elite_phi_max.append(float(elite_phis[0]))
        diag.elite_phi_mean.append(float(elite_phis.mean()))

    a0 = dist.mu[0].copy()
    if explore:
        a0 = a0 + dist.sigma[0] * rng.standard_normal(d_a)
    if action_low is not None or action_high is not None:
        a0 = np.clip(a0, action_low, action_high)
    return a0, dist, diag
