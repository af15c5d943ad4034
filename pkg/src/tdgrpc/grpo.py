"""Group-relative policy optimization under a KL trust region.

Candidate actions are sampled in groups at a shared latent state, clipped
to a standardized band around the planner-derived behavior moments, scored
with the value head, and weighted by softmax advantages. The policy update
maximizes advantage-weighted log-likelihood while a hinged KL penalty keeps
the policy near the behavior prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .world_model import (
    PolicyDistribution,
    WorldModel,
    gaussian,
    gaussian_log_prob,
    policy_distribution,
    policy_dist_np,
    sample_action,
    value_np,
)


@dataclass
class GroupSample:
    """G candidate actions with value scores at one latent state."""

    z: np.ndarray  # (d_z,)
    actions: np.ndarray  # (G, d_a)
    log_probs: np.ndarray  # (G,) sampling-time log densities
    q_values: np.ndarray  # (G,)
    advantages: np.ndarray  # (G,)

    @property
    def group_size(self) -> int:
        return self.actions.shape[0]


@dataclass
class ConstraintConfig:
    beta: float = 0.1
    epsilon: float = 0.1
    epsilon_schedule: str = "fixed"  # "fixed" | "linear-decay"
    action_clip_threshold: float = 3.0
    tau_adv: float = 1.0
    # "kl_hinge" follows the operational training loop; "log_prior" swaps in
    # the behavior-log-likelihood penalty variant.
    constraint_mode: str = "kl_hinge"
    # KL argument order; "current_to_prior" is D(pi || prior).
    kl_direction: str = "current_to_prior"

    def validate(self) -> None:
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.action_clip_threshold <= 0:
            raise ValueError("action_clip_threshold must be positive")
        if self.tau_adv <= 0:
            raise ValueError("tau_adv must be positive")
        if self.epsilon_schedule not in ("fixed", "linear-decay"):
            raise ValueError(f"unknown epsilon schedule {self.epsilon_schedule!r}")
        if self.constraint_mode not in ("kl_hinge", "log_prior"):
            raise ValueError(f"unknown constraint mode {self.constraint_mode!r}")
        if self.kl_direction not in ("current_to_prior", "prior_to_current"):
            raise ValueError(f"unknown kl direction {self.kl_direction!r}")


def effective_epsilon(cfg: ConstraintConfig, progress: float = 0.0) -> float:
    """Trust-region radius at a training progress fraction in [0, 1]."""
    if cfg.epsilon_schedule == "linear-decay":
        # decay to 10% of the initial radius by the end of training
        return cfg.epsilon * max(0.1, 1.0 - progress)
    return cfg.epsilon


@dataclass
class PolicyPrior:
    """Behavior moments (mu, sigma) derived from buffered planner actions."""

    mu: np.ndarray  # (d_a,)
    sigma: np.ndarray  # (d_a,)

    def as_distribution(self) -> PolicyDistribution:
        return gaussian(self.mu, np.log(self.sigma))


def softmax_advantages(q_values: np.ndarray, tau_adv: float = 1.0) -> np.ndarray:
    """Softmax of q / tau over the group; lies in [0, 1] and sums to 1."""
    if tau_adv <= 0:
        raise ValueError("tau_adv must be positive")
    q = np.asarray(q_values, dtype=np.float64)
    if q.size == 0:
        raise ValueError("need at least one q value")
    scaled = q / tau_adv
    shifted = scaled - scaled.max()
    w = np.exp(shifted)
    return w / w.sum()


def std_norm_advantages(q_values: np.ndarray) -> np.ndarray:
    """Standard-normalized scores (q - mean)/(std + 1e-8); diagnostic/ablation."""
    q = np.asarray(q_values, dtype=np.float64)
    if q.size < 2:
        raise ValueError("standard normalization needs a group of size >= 2")
    return (q - q.mean()) / (q.std() + 1e-8)


def threshold_actions(
    actions: np.ndarray, prior: PolicyPrior, clip_threshold: float
) -> np.ndarray:
    """Project actions into the band mu +- c*sigma of the behavior prior.

    Entries whose standardized deviation |a - mu|/sigma exceeds the
    threshold are clipped to the band edge; in-band entries pass through
    unchanged.
    """
    actions = np.asarray(actions, dtype=np.float64)
    dev = (actions - prior.mu) / prior.sigma
    projected = prior.mu + np.clip(dev, -clip_threshold, clip_threshold) * prior.sigma
    # in-band entries pass through bit-identically (no round trip through dev)
    return np.where(np.abs(dev) <= clip_threshold, actions, projected)


def kl_gaussian(p: PolicyDistribution, q: PolicyDistribution) -> Tensor:
    """Closed-form KL(p || q) for diagonal Gaussians, summed over dims.

    Differentiable in ``p``'s tensors; ``q``'s parameters are treated as
    constants of the current update.
    """
    q_mean = q.mean.data
    q_log_std = q.log_std.data
    var_q = np.exp(2.0 * q_log_std)
    var_p = ad.exp(ad.mul(p.log_std, 2.0))
    mean_gap = ad.square(ad.sub(p.mean, q_mean))
    per_dim = ad.add(
        ad.sub(q_log_std, p.log_std),
        ad.sub(ad.div(ad.add(var_p, mean_gap), 2.0 * var_q), 0.5),
    )
    return ad.tsum(per_dim, axis=-1)


def policy_constraint_loss(kl, epsilon: float):
    """Hinge penalty max(kl - epsilon, 0); zero inside the trust region."""
    if isinstance(kl, Tensor):
        return ad.maximum(ad.sub(kl, epsilon), 0.0)
    return max(float(kl) - epsilon, 0.0)


def grpo_loss(dist: PolicyDistribution, group: GroupSample) -> Tensor:
    """Advantage-weighted mean log-likelihood (1/G) sum_i A_i log pi(a_i | z).

    Advantages are constants of the update: gradients flow only through the
    log densities. The training loop minimizes the negation.
    """
    log_probs = gaussian_log_prob(dist, group.actions)  # (G,)
    weighted = ad.mul(log_probs, group.advantages)
    return ad.mul(ad.tsum(weighted), 1.0 / group.group_size)


@dataclass
class PolicyLossBreakdown:
    grpo_terms: list[float]
    kl_terms: list[float]
    raw_kls: list[float]

    @property
    def grpo_mean(self) -> float:
        return float(np.mean(self.grpo_terms))

    @property
    def kl_mean(self) -> float:
        return float(np.mean(self.kl_terms))

    @property
    def raw_kl_mean(self) -> float:
        return float(np.mean(self.raw_kls))


def policy_loss(
    model: WorldModel,
    groups: list[GroupSample],
    priors: list[PolicyPrior],
    cfg: ConstraintConfig,
    epsilon: float | None = None,
) -> tuple[Tensor, PolicyLossBreakdown]:
    """Combined objective over H per-step groups (minimization form).

    mean_i [ -grpo_loss_i + beta * hinge(KL(pi(z_i), prior_i)) ], with the
    raw per-step KL reported in the breakdown. ``epsilon`` overrides the
    configured trust-region radius (used by schedules).
    """
    cfg.validate()
    if len(groups) != len(priors):
        raise ValueError("need one prior per step group")
    eps = cfg.epsilon if epsilon is None else epsilon
    step_losses = []
    grpo_terms, kl_terms, raw_kls = [], [], []
    for i, (group, prior) in enumerate(zip(groups, priors)):
        dist = policy_distribution(model, group.z)
        grpo_term = grpo_loss(dist, group)
        prior_dist = prior.as_distribution()
        if cfg.kl_direction == "current_to_prior":
            kl = kl_gaussian(dist, prior_dist)
        else:
            kl = _kl_constant_to_current(prior_dist, dist)
        if cfg.constraint_mode == "kl_hinge":
            constraint = policy_constraint_loss(kl, eps)
        else:
            prior_lp = gaussian_log_prob(prior_dist, group.actions)
            constraint = ad.mul(ad.tsum(prior_lp), -1.0 / group.group_size)
        step_loss = ad.add(ad.neg(grpo_term), ad.mul(constraint, cfg.beta))
        if not np.isfinite(step_loss.data):
            raise FloatingPointError(f"non-finite policy loss at step {i}")
        step_losses.append(step_loss)
        grpo_terms.append(grpo_term.item())
        kl_terms.append(float(np.asarray(constraint.data)))
        raw_kls.append(float(np.asarray(kl.data)))
    total = step_losses[0]
    for sl in step_losses[1:]:
        total = ad.add(total, sl)
    loss = ad.mul(total, 1.0 / len(groups))
    return loss, PolicyLossBreakdown(grpo_terms, kl_terms, raw_kls)


@dataclass
class StepGroupBatch:
    """Per-step groups stacked across a segment batch."""

    z: np.ndarray  # (B, d_z)
    actions: np.ndarray  # (B, G, d_a)
    log_probs: np.ndarray  # (B, G)
    q_values: np.ndarray  # (B, G)
    advantages: np.ndarray  # (B, G)


def sample_group_batch(
    model: WorldModel,
    z: np.ndarray,
    group_size: int,
    prior: PolicyPrior,
    cfg: ConstraintConfig,
    rng: np.random.Generator,
    use_std_norm: bool = False,
) -> StepGroupBatch:
    """Vectorized group sampling at a batch of latents sharing one prior."""
    from .world_model import gaussian_log_prob_np

    b = z.shape[0]
    mean, log_std = policy_dist_np(model, z)  # (B, d_a)
    noise = rng.standard_normal((b, group_size, mean.shape[-1]))
    actions = mean[:, None, :] + np.exp(log_std)[:, None, :] * noise
    actions = threshold_actions(actions, prior, cfg.action_clip_threshold)
    log_probs = gaussian_log_prob_np(mean[:, None, :], log_std[:, None, :], actions)
    z_rep = np.repeat(z, group_size, axis=0)
    q_values = value_np(model, z_rep, actions.reshape(b * group_size, -1))
    q_values = q_values.reshape(b, group_size)
    if use_std_norm:
        advantages = np.stack([std_norm_advantages(q) for q in q_values])
    else:
        advantages = np.stack([softmax_advantages(q, cfg.tau_adv) for q in q_values])
    return StepGroupBatch(z, actions, log_probs, q_values, advantages)


def policy_loss_batched(
    model: WorldModel,
    step_batches: list[StepGroupBatch],
    priors: list[PolicyPrior],
    cfg: ConstraintConfig,
    epsilon: float | None = None,
) -> tuple[Tensor, PolicyLossBreakdown]:
    """policy_loss over a segment batch in one taped computation.

    Equals the mean over segments of ``policy_loss`` on the per-segment
    groups (exercised as a test invariant); used by the trainer hot path.
    All steps share one policy forward pass on the stacked latents.
    """
    cfg.validate()
    eps = cfg.epsilon if epsilon is None else epsilon
    h = len(step_batches)
    b, g = step_batches[0].advantages.shape
    d_a = step_batches[0].actions.shape[-1]
    z_all = np.concatenate([sb.z for sb in step_batches], axis=0)  # (H*B, d_z)
    actions = np.stack([sb.actions for sb in step_batches])  # (H, B, G, d_a)
    advantages = np.stack([sb.advantages for sb in step_batches])  # (H, B, G)
    prior_mu = np.stack([p.mu for p in priors])[:, None, :]  # (H, 1, d_a)
    prior_sigma = np.stack([p.sigma for p in priors])[:, None, :]
    prior_log_std = np.log(prior_sigma)

    flat = policy_distribution(model, z_all)
    mean = ad.reshape(flat.mean, (h, b, d_a))
    log_std = ad.reshape(flat.log_std, (h, b, d_a))
    dist4 = PolicyDistribution(
        ad.reshape(mean, (h, b, 1, d_a)), ad.reshape(log_std, (h, b, 1, d_a))
    )
    lp = gaussian_log_prob(dist4, actions)  # (H, B, G)
    grpo_all = ad.mul(ad.tsum(ad.mul(lp, advantages), axis=2), 1.0 / g)  # (H, B)

    dist_hb = PolicyDistribution(mean, log_std)
    prior_dist = PolicyDistribution(Tensor(prior_mu), Tensor(prior_log_std))
    if cfg.kl_direction == "current_to_prior":
        kl = kl_gaussian(dist_hb, prior_dist)  # (H, B)
    else:
        kl = _kl_constant_to_current(prior_dist, dist_hb)
    if cfg.constraint_mode == "kl_hinge":
        constraint_all = policy_constraint_loss(kl, eps)  # (H, B)
    else:
        prior4 = PolicyDistribution(
            Tensor(prior_mu[:, None, :, :]), Tensor(prior_log_std[:, None, :, :])
        )
        prior_lp = gaussian_log_prob(prior4, actions)  # (H, B, G)
        constraint_all = ad.mul(ad.tsum(prior_lp, axis=2), -1.0 / g)
    per_step = ad.add(ad.neg(grpo_all), ad.mul(constraint_all, cfg.beta))  # (H, B)
    loss = ad.tmean(per_step)
    if not np.isfinite(loss.data):
        bad = np.nonzero(~np.isfinite(per_step.data.mean(axis=1)))[0]
        raise FloatingPointError(f"non-finite policy loss at step {bad[0]}")

    grpo_np = grpo_all.data.mean(axis=1)
    constraint_np = constraint_all.data.mean(axis=1)
    kl_np = kl.data.mean(axis=1)
    return loss, PolicyLossBreakdown(
        grpo_terms=[float(v) for v in grpo_np],
        kl_terms=[float(v) for v in constraint_np],
        raw_kls=[float(v) for v in kl_np],
    )


def _kl_constant_to_current(p_const: PolicyDistribution, q: PolicyDistribution) -> Tensor:
    """KL(p || q) differentiable in q only (p held constant)."""
    p_mean = p_const.mean.data
    p_log_std = p_const.log_std.data
    var_p = np.exp(2.0 * p_log_std)
    var_q = ad.exp(ad.mul(q.log_std, 2.0))
    mean_gap = ad.square(ad.sub(q.mean, p_mean))
    per_dim = ad.add(
        ad.sub(q.log_std, p_log_std),
        ad.sub(ad.div(ad.add(var_p, mean_gap), ad.mul(var_q, 2.0)), 0.5),
    )
    return ad.tsum(per_dim, axis=-1)


def sample_group(
    model: WorldModel,
    z: np.ndarray,
    group_size: int,
    prior: PolicyPrior,
    cfg: ConstraintConfig,
    rng: np.random.Generator,
    use_std_norm: bool = False,
) -> GroupSample:
    """Draw a group of actions at ``z``, threshold them against the prior,
    score them with the value head, and attach advantage weights."""
    mean, log_std = policy_dist_np(model, z)
    dist = gaussian(np.broadcast_to(mean, (group_size, mean.shape[-1])),
                    np.broadcast_to(log_std, (group_size, log_std.shape[-1])))
    actions, _ = sample_action(dist, rng)
    actions = threshold_actions(actions, prior, cfg.action_clip_threshold)
    from .world_model import gaussian_log_prob_np

    log_probs = gaussian_log_prob_np(mean, log_std, actions)
    z_batch = np.broadcast_to(z, (group_size, z.shape[-1]))
    q_values = value_np(model, z_batch, actions)
    if use_std_norm:
        advantages = std_norm_advantages(q_values)
    else:
        advantages = softmax_advantages(q_values, cfg.tau_adv)
    return GroupSample(
        z=np.asarray(z, dtype=np.float64),
        actions=actions,
        log_probs=log_probs,
        q_values=q_values,
        advantages=advantages,
    )


@dataclass
class VarianceReport:
    """Per-coordinate gradient-estimator variance under the two weightings."""

    num_trials: int
    group_size: int
    var_trace_softmax: float
    var_trace_std_norm: float
    ratio: float

    def to_dict(self) -> dict:
        return {
            "num_trials": self.num_trials,
            "group_size": self.group_size,
            "var_trace_softmax": self.var_trace_softmax,
            "var_trace_std_norm": self.var_trace_std_norm,
            "ratio": self.ratio,
        }


def variance_diagnostic(
    model: WorldModel,
    z: np.ndarray,
    group_size: int,
    num_trials: int,
    rng: np.random.Generator,
    tau_adv: float = 1.0,
    q_sampler=None,
) -> VarianceReport:
    """Monte Carlo variance of the policy-gradient estimator under softmax
    versus standard-normalized advantage weights.

    Each trial samples a fresh group at ``z``, weights the log-likelihood
    gradient with both advantage variants, and accumulates per-coordinate
    variances across trials. ``q_sampler(rng, actions)`` overrides the value
    head as the score source (used for synthetic heavy-tailed studies).
    """
    if num_trials < 2:
        raise ValueError("variance estimation needs at least 2 trials")
    params = model.policy_parameters()
    accum = {"softmax": [], "std_norm": []}
    for _ in range(num_trials):
        mean, log_std = policy_dist_np(model, z)
        dist_const = gaussian(
            np.broadcast_to(mean, (group_size, mean.shape[-1])),
            np.broadcast_to(log_std, (group_size, log_std.shape[-1])),
        )
        actions, _ = sample_action(dist_const, rng)
        if q_sampler is None:
            z_batch = np.broadcast_to(z, (group_size, z.shape[-1]))
            q_values = value_np(model, z_batch, actions)
        else:
            q_values = np.asarray(q_sampler(rng, actions), dtype=np.float64)
        adv_soft = softmax_advantages(q_values, tau_adv)
        adv_std = std_norm_advantages(q_values)
        for variant, adv in (("softmax", adv_soft), ("std_norm", adv_std)):
            with ad.GradTape() as tape:
                dist = policy_distribution(model, z)
                dist_b = PolicyDistribution(
                    ad.reshape(dist.mean, (1, -1)), ad.reshape(dist.log_std, (1, -1))
                )
                lp = gaussian_log_prob(dist_b, actions)
                estimator = ad.mul(ad.tsum(ad.mul(lp, adv)), 1.0 / group_size)
                grads = ad.backward(tape, estimator, params)
            flat = np.concatenate([g.ravel() for g in grads.values()])
            accum[variant].append(flat)

    traces = {}
    for variant, rows in accum.items():
        stacked = np.stack(rows)
        traces[variant] = float(stacked.var(axis=0, ddof=1).sum())
    ratio = traces["softmax"] / traces["std_norm"] if traces["std_norm"] > 0 else np.inf
    return VarianceReport(
        num_trials=num_trials,
        group_size=group_size,
        var_trace_softmax=traces["softmax"],
        var_trace_std_norm=traces["std_norm"],
        ratio=float(ratio),
    )
