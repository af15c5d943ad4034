"""Training orchestration: planner-driven collection interleaved with
gradient steps on the model and policy objectives, plus deterministic
evaluation, metrics persistence, and checkpointing."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import autodiff as ad
from . import nn
from .envs import Env, make_env
from .grpo import (
    ConstraintConfig,
    PolicyPrior,
    effective_epsilon,
    policy_loss_batched,
    sample_group_batch,
)
from .planner import PlannerConfig, TrajectoryDistribution, compute_moments, plan
from .replay import InsufficientDataError, ReplayBuffer, Transition
from .world_model import (
    WorldModel,
    WorldModelConfig,
    compute_td_targets,
    dynamics_np,
    encode_np,
    init_world_model,
    model_arrays,
    model_loss,
    model_meta,
    restore_model_from_arrays,
    update_value_target,
)


@dataclass
class AblationFlags:
    disable_kl: bool = False
    disable_groups: bool = False
    use_std_norm_advantages: bool = False
    use_logmu_constraint: bool = False


@dataclass
class TrainConfig:
    env: str = "pendulum"
    total_steps: int = 30_000
    collect_steps: int = 500  # environment steps per outer iteration (T)
    grad_steps: int = 250  # gradient steps per outer iteration (S)
    horizon: int = 3  # H
    num_groups: int = 3  # G
    gamma: float = 0.995
    learning_rate: float = 3e-4
    buffer_capacity: int = 1_000_000
    seed: int = 0
    warmup_steps: int = 1000
    eval_every: int = 10_000
    eval_episodes: int = 10
    eval_seed: int = 424_242
    checkpoint_every: int = 10_000
    d_z: int = 32
    hidden: tuple[int, ...] = (64, 64)
    latent_activation: str = "tanh"
    normalize_obs: bool = True  # standardize encoder inputs from warmup stats
    target_update_rate: float = 0.005
    use_live_value_target: bool = False
    max_grad_norm: float | None = 10.0
    exploration: bool = True
    # fraction of collection episodes driven by uniform-random actions; keeps
    # feeding diverse-energy transitions after the planner's behavior narrows
    random_episode_prob: float = 0.1
    model_loss_coeffs: tuple[float, float, float] = (1.0, 1.0, 1.0)
    optimizer: str = "adam"
    save_buffer_snapshot: bool = True
    run_dir: str | None = None
    ablations: AblationFlags = field(default_factory=AblationFlags)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    constraint: ConstraintConfig = field(default_factory=ConstraintConfig)

    def validate(self) -> None:
        if self.total_steps < 0 or self.collect_steps <= 0 or self.grad_steps < 0:
            raise ValueError("step counts must be positive (total_steps >= 0)")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")
        if self.horizon < 1 or self.num_groups < 1:
            raise ValueError("horizon and num_groups must be >= 1")
        if self.buffer_capacity < self.horizon + 1:
            raise ValueError("buffer capacity must exceed the horizon")
        if self.ablations.disable_groups and self.ablations.use_std_norm_advantages:
            raise ValueError(
                "use_std_norm_advantages needs groups; disable_groups forces size 1"
            )
        self.planner.validate()
        self.constraint.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        planner = PlannerConfig(**data.pop("planner", {}))
        constraint = ConstraintConfig(**data.pop("constraint", {}))
        ablations = AblationFlags(**data.pop("ablations", {}))
        if "hidden" in data:
            data["hidden"] = tuple(data["hidden"])
        if "model_loss_coeffs" in data:
            data["model_loss_coeffs"] = tuple(data["model_loss_coeffs"])
        cfg = cls(planner=planner, constraint=constraint, ablations=ablations, **data)
        return cfg


def load_config(path) -> TrainConfig:
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    return TrainConfig.from_dict(data)


def save_config(path, cfg: TrainConfig) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)


@dataclass
class MetricsRecord:
    env_step: int
    train_step: int
    episode_return: float | None
    loss_latent: float
    loss_reward: float
    loss_value: float
    model_loss: float
    policy_loss: float
    grpo_term: float
    kl_term: float
    raw_kl: float
    planner_phi_mean: float | None
    planner_phi_max: float | None
    planner_fallbacks: int
    wall_clock: float = 0.0

    METRICS_FIELDS = (
        "env_step",
        "train_step",
        "episode_return",
        "loss_latent",
        "loss_reward",
        "loss_value",
        "model_loss",
        "policy_loss",
        "grpo_term",
        "kl_term",
        "raw_kl",
        "planner_phi_mean",
        "planner_phi_max",
        "planner_fallbacks",
    )

    def to_json_line(self) -> str:
        # wall_clock is intentionally excluded: the metrics stream must be
        # byte-identical across runs with the same seed and config.
        payload = {name: getattr(self, name) for name in self.METRICS_FIELDS}
        return json.dumps(payload)


@dataclass
class CollectStats:
    steps: int = 0
    episodes_completed: int = 0
    episode_returns: list[float] = field(default_factory=list)
    truncated_failures: int = 0
    phi_mean: float | None = None
    phi_max: float | None = None
    fallbacks: int = 0


@dataclass
class RolloutState:
    """Carries the live episode across collect() calls."""

    obs: np.ndarray | None = None
    prev_dist: TrajectoryDistribution | None = None
    episode_return: float = 0.0
    episode_id: int = 0
    last_completed_return: float | None = None
    random_episode: bool = False


def collect(
    env: Env,
    model: WorldModel,
    planner_cfg: PlannerConfig,
    buffer: ReplayBuffer,
    steps: int,
    rng: np.random.Generator,
    gamma: float,
    rollout: RolloutState,
    exploration: bool = True,
    random_episode_prob: float = 0.0,
) -> CollectStats:
    """Run ``steps`` environment steps acting with the latent-space planner.

    Actions come from plan() at the encoded observation; the trajectory
    distribution is warm-started across steps and reset at episode
    boundaries. Transitions are pushed into the buffer. With probability
    ``random_episode_prob`` a whole episode is driven by uniform-random
    actions instead of the planner.
    """
    stats = CollectStats()
    phi_means, phi_maxes = [], []
    for _ in range(steps):
        if rollout.obs is None:
            rollout.obs = env.reset(rng)
            rollout.prev_dist = None
            rollout.episode_return = 0.0
            rollout.random_episode = rng.random() < random_episode_prob
        if rollout.random_episode:
            action = rng.uniform(env.spec.action_low, env.spec.action_high)
            dist, diag = None, None
        else:
            z = encode_np(model, rollout.obs)
            action, dist, diag = plan(
                model,
                z,
                rollout.prev_dist,
                planner_cfg,
                rng,
                gamma,
                action_low=env.spec.action_low,
                action_high=env.spec.action_high,
                explore=exploration,
            )
        obs_next, reward, done = env.step(action)
        stats.steps += 1
        if diag is not None and diag.fallback:
            stats.fallbacks += 1
        if diag is not None and diag.elite_phi_mean:
            phi_means.append(diag.elite_phi_mean[-1])
            phi_maxes.append(diag.elite_phi_max[-1])
        if env.failed:
            stats.truncated_failures += 1
            rollout.obs = None
            rollout.episode_id += 1
            continue
        buffer.push(
            Transition(
                s=rollout.obs,
                a=action,
                r=reward,
                s_next=obs_next,
                done=done,
                episode_id=rollout.episode_id,
            )
        )
        rollout.episode_return += reward
        if done:
            stats.episodes_completed += 1
            stats.episode_returns.append(rollout.episode_return)
            rollout.last_completed_return = rollout.episode_return
            rollout.obs = None
            rollout.episode_id += 1
        else:
            rollout.obs = obs_next
            rollout.prev_dist = dist
    if phi_means:
        stats.phi_mean = float(np.mean(phi_means))
        stats.phi_max = float(np.max(phi_maxes))
    return stats


def collect_random(
    env: Env,
    buffer: ReplayBuffer,
    steps: int,
    rng: np.random.Generator,
    rollout: RolloutState,
) -> CollectStats:
    """Uniform-random warm-up collection."""
    stats = CollectStats()
    for _ in range(steps):
        if rollout.obs is None:
            rollout.obs = env.reset(rng)
            rollout.episode_return = 0.0
        action = rng.uniform(env.spec.action_low, env.spec.action_high)
        obs_next, reward, done = env.step(action)
        stats.steps += 1
        if env.failed:
            stats.truncated_failures += 1
            rollout.obs = None
            rollout.episode_id += 1
            continue
        buffer.push(
            Transition(rollout.obs, action, reward, obs_next, done, rollout.episode_id)
        )
        rollout.episode_return += reward
        if done:
            stats.episodes_completed += 1
            stats.episode_returns.append(rollout.episode_return)
            rollout.last_completed_return = rollout.episode_return
            rollout.obs = None
            rollout.episode_id += 1
        else:
            rollout.obs = obs_next
    return stats


def step_priors(
    segments, min_std: float, max_std: float = 1e6
) -> list[PolicyPrior]:
    """Per-step behavior moments over the G segments' buffered actions."""
    actions = np.stack([seg.actions for seg in segments], axis=1)  # (H, G, d_a)
    priors = []
    for i in range(actions.shape[0]):
        acts = actions[i][:, None, :]  # (G, 1, d_a) single-step sequences
        dist = compute_moments(
            acts, np.zeros(acts.shape[0]), temperature=1.0,
            min_std=min_std, max_std=max_std,
        )
        priors.append(PolicyPrior(mu=dist.mu[0], sigma=dist.sigma[0]))
    return priors


def train_step(
    model: WorldModel,
    buffer: ReplayBuffer,
    cfg: TrainConfig,
    rng: np.random.Generator,
    model_opt: nn.OptimizerState,
    policy_opt: nn.OptimizerState,
    env_step: int = 0,
    train_step_index: int = 0,
    episode_return: float | None = None,
    planner_stats: CollectStats | None = None,
    progress: float = 0.0,
) -> MetricsRecord:
    """One gradient update on the model heads and one on the policy head.

    Samples G segments of length H, derives per-step behavior priors from
    their actions, evaluates the consistency objective over the batched
    latent rollout, builds per-step action groups for the policy objective,
    then applies both optimizer updates and advances the value target.
    """
    t0 = time.perf_counter()
    segments = buffer.sample_segments(cfg.horizon, cfg.num_groups, rng)
    priors = step_priors(segments, min_std=cfg.planner.min_std)

    with ad.GradTape() as tape:
        m_loss, m_break = model_loss(
            model,
            segments,
            cfg.gamma,
            coeffs=cfg.model_loss_coeffs,
            use_live_target=cfg.use_live_value_target,
        )
        model_grads = ad.backward(tape, m_loss, model.model_parameters())

    group_size = 1 if cfg.ablations.disable_groups else cfg.num_groups
    constraint = cfg.constraint
    if cfg.ablations.use_logmu_constraint:
        constraint = dataclasses.replace(constraint, constraint_mode="log_prior")
    beta = 0.0 if cfg.ablations.disable_kl else constraint.beta
    constraint = dataclasses.replace(constraint, beta=beta)
    epsilon = effective_epsilon(constraint, progress)

    zs = encode_np(model, np.stack([seg.states[0] for seg in segments]))
    buffered_actions = np.stack([seg.actions for seg in segments], axis=1)  # (H, B, d_a)
    step_batches = []
    for i in range(cfg.horizon):
        step_batches.append(
            sample_group_batch(
                model,
                zs,
                group_size,
                priors[i],
                constraint,
                rng,
                use_std_norm=cfg.ablations.use_std_norm_advantages,
            )
        )
        zs = dynamics_np(model, zs, buffered_actions[i])
    with ad.GradTape() as tape:
        p_loss, p_break = policy_loss_batched(
            model, step_batches, priors, constraint, epsilon
        )
        policy_grads = ad.backward(tape, p_loss, model.policy_parameters())

    if cfg.max_grad_norm is not None:
        nn.clip_grad_norm(model_grads, cfg.max_grad_norm)
        nn.clip_grad_norm(policy_grads, cfg.max_grad_norm)
    nn.optimizer_step(model_opt, model.model_parameters(), model_grads, "model loss")
    nn.optimizer_step(policy_opt, model.policy_parameters(), policy_grads, "policy loss")
    update_value_target(model, cfg.target_update_rate)

    kl_term_mean = 0.0 if cfg.ablations.disable_kl else p_break.kl_mean
    return MetricsRecord(
        env_step=env_step,
        train_step=train_step_index,
        episode_return=episode_return,
        loss_latent=m_break.latent,
        loss_reward=m_break.reward,
        loss_value=m_break.value,
        model_loss=m_break.total,
        policy_loss=p_loss.item(),
        grpo_term=p_break.grpo_mean,
        kl_term=kl_term_mean,
        raw_kl=p_break.raw_kl_mean,
        planner_phi_mean=planner_stats.phi_mean if planner_stats else None,
        planner_phi_max=planner_stats.phi_max if planner_stats else None,
        planner_fallbacks=planner_stats.fallbacks if planner_stats else 0,
        wall_clock=time.perf_counter() - t0,
    )


def evaluate(
    model: WorldModel,
    env_name: str,
    episodes: int,
    seed: int,
    planner_cfg: PlannerConfig,
    gamma: float,
) -> tuple[float, float, list[float]]:
    """Deterministic evaluation: planner acts with the final mean, no noise."""
    returns = []
    for k in range(episodes):
        env = make_env(env_name)
        rng = np.random.default_rng(seed + k)
        obs = env.reset(rng)
        prev = None
        total = 0.0
        done = False
        while not done:
            z = encode_np(model, obs)
            action, prev, _ = plan(
                model,
                z,
                prev,
                planner_cfg,
                rng,
                gamma,
                action_low=env.spec.action_low,
                action_high=env.spec.action_high,
                explore=False,
            )
            obs, reward, done = env.step(action)
            total += reward
        returns.append(total)
    arr = np.array(returns)
    return float(arr.mean()), float(arr.std()), returns


def random_policy_returns(
    env_name: str, episodes: int, seed: int
) -> tuple[float, float, list[float]]:
    """Uniform-random baseline measured with the same episode protocol."""
    returns = []
    for k in range(episodes):
        env = make_env(env_name)
        rng = np.random.default_rng(seed + k)
        env.reset(rng)
        total = 0.0
        done = False
        while not done:
            action = rng.uniform(env.spec.action_low, env.spec.action_high)
            _, reward, done = env.step(action)
            total += reward
        returns.append(total)
    arr = np.array(returns)
    return float(arr.mean()), float(arr.std()), returns


# ---------------------------------------------------------------------------
# full training runs


def _rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    gen = np.random.default_rng()
    gen.bit_generator.state = state
    return gen


def default_run_dir(cfg: TrainConfig) -> Path:
    return Path("runs") / f"{cfg.env}_s{cfg.seed}"


def run_training(cfg: TrainConfig, resume: bool = False) -> dict:
    """Alternate collection and gradient phases until the step budget.

    Produces a run directory with the config snapshot, an append-only
    metrics stream (one JSON line per gradient step), an evaluation stream,
    checkpoints, and a final report. Two runs with the same (seed, config)
    write byte-identical metrics files.
    """
    cfg.validate()
    run_dir = Path(cfg.run_dir) if cfg.run_dir else default_run_dir(cfg)
    ckpt_dir = run_dir / "checkpoints"
    metrics_path = run_dir / "metrics.jsonl"
    eval_path = run_dir / "eval.jsonl"
    latest_ckpt = ckpt_dir / "latest.npz"

    if run_dir.exists() and not resume and any(run_dir.iterdir()):
        raise FileExistsError(
            f"run directory {run_dir} already exists; pass resume=True to continue"
        )
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir.mkdir(exist_ok=True)
    save_config(run_dir / "config.yaml", cfg)

    env = make_env(cfg.env)
    wm_cfg = WorldModelConfig(
        d_s=env.spec.d_s,
        d_a=env.spec.d_a,
        d_z=cfg.d_z,
        hidden=tuple(cfg.hidden),
        latent_activation=cfg.latent_activation,
    )

    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    init_rng = np.random.default_rng(seeds[0])
    rollout_rng = np.random.default_rng(seeds[1])
    train_rng = np.random.default_rng(seeds[2])

    model = init_world_model(wm_cfg, init_rng)
    model_opt = nn.OptimizerState(learning_rate=cfg.learning_rate, method=cfg.optimizer)
    policy_opt = nn.OptimizerState(learning_rate=cfg.learning_rate, method=cfg.optimizer)
    buffer = ReplayBuffer(cfg.buffer_capacity, env.spec.d_s, env.spec.d_a)
    rollout = RolloutState()

    env_step = 0
    train_step_index = 0
    outer_iterations = 0
    total_pushes = 0
    skipped_updates = 0
    warmup_done = False
    t_start = time.perf_counter()

    if resume and latest_ckpt.exists():
        arrays, meta = nn.load_checkpoint(latest_ckpt)
        model = restore_model_from_arrays(arrays, meta)
        model_opt = nn.restore_optimizer_state("model_opt", meta["model_opt"], arrays)
        policy_opt = nn.restore_optimizer_state(
            "policy_opt", meta["policy_opt"], arrays
        )
        state = meta["train_state"]
        env_step = state["env_step"]
        train_step_index = state["train_step_index"]
        outer_iterations = state["outer_iterations"]
        total_pushes = state["total_pushes"]
        skipped_updates = state["skipped_updates"]
        warmup_done = state["warmup_done"]
        rollout.episode_id = state["episode_id"]
        rollout_rng = _restore_rng(state["rollout_rng"])
        train_rng = _restore_rng(state["train_rng"])
        if cfg.save_buffer_snapshot and "buffer.states" in arrays:
            buffer = ReplayBuffer.from_state_arrays(arrays, cfg.buffer_capacity)

    def save_ckpt() -> None:
        arrays = model_arrays(model)
        arrays.update(nn.optimizer_state_arrays("model_opt", model_opt))
        arrays.update(nn.optimizer_state_arrays("policy_opt", policy_opt))
        if cfg.save_buffer_snapshot:
            arrays.update(buffer.state_arrays())
        meta = {
            "model": model_meta(model),
            "model_opt": nn.optimizer_state_meta(model_opt),
            "policy_opt": nn.optimizer_state_meta(policy_opt),
            "config": cfg.to_dict(),
            "train_state": {
                "env_step": env_step,
                "train_step_index": train_step_index,
                "outer_iterations": outer_iterations,
                "total_pushes": total_pushes,
                "skipped_updates": skipped_updates,
                "warmup_done": warmup_done,
                "episode_id": rollout.episode_id,
                "rollout_rng": _rng_state(rollout_rng),
                "train_rng": _rng_state(train_rng),
            },
        }
        nn.save_checkpoint(latest_ckpt, arrays, meta)
        nn.save_checkpoint(ckpt_dir / f"step{env_step}.npz", arrays, meta)

    def run_eval() -> dict:
        mean, std, returns = evaluate(
            model, cfg.env, cfg.eval_episodes, cfg.eval_seed, cfg.planner, cfg.gamma
        )
        record = {
            "env_step": env_step,
            "mean_return": mean,
            "std_return": std,
            "returns": returns,
        }
        with open(eval_path, "a") as f:
            f.write(json.dumps(record) + "\n")
        return record

    mode = "a" if (resume and metrics_path.exists()) else "w"
    metrics_file = open(metrics_path, mode)
    eval_records = []
    last_eval_at = env_step
    last_ckpt_at = env_step

    try:
        while env_step < cfg.total_steps:
            if not warmup_done and cfg.warmup_steps > 0:
                n = min(cfg.warmup_steps, cfg.total_steps - env_step)
                stats = collect_random(env, buffer, n, rollout_rng, rollout)
                env_step += stats.steps
                total_pushes += stats.steps - stats.truncated_failures
                warmup_done = True
                if cfg.normalize_obs and len(buffer) > 1:
                    states = buffer.stored_states()
                    model.set_obs_normalizer(states.mean(axis=0), states.std(axis=0))
                continue
            n = min(cfg.collect_steps, cfg.total_steps - env_step)
            stats = collect(
                env,
                model,
                cfg.planner,
                buffer,
                n,
                rollout_rng,
                cfg.gamma,
                rollout,
                exploration=cfg.exploration,
                random_episode_prob=cfg.random_episode_prob,
            )
            env_step += stats.steps
            total_pushes += stats.steps - stats.truncated_failures
            outer_iterations += 1
            progress = env_step / max(1, cfg.total_steps)
            for _ in range(cfg.grad_steps):
                try:
                    record = train_step(
                        model,
                        buffer,
                        cfg,
                        train_rng,
                        model_opt,
                        policy_opt,
                        env_step=env_step,
                        train_step_index=train_step_index,
                        episode_return=rollout.last_completed_return,
                        planner_stats=stats,
                        progress=progress,
                    )
                except InsufficientDataError:
                    skipped_updates += 1
                    continue
                train_step_index += 1
                metrics_file.write(record.to_json_line() + "\n")
            metrics_file.flush()
            if env_step - last_eval_at >= cfg.eval_every:
                eval_records.append(run_eval())
                last_eval_at = env_step
            if env_step - last_ckpt_at >= cfg.checkpoint_every:
                save_ckpt()
                last_ckpt_at = env_step
    finally:
        metrics_file.close()

    final_eval = run_eval() if cfg.total_steps > 0 else None
    if final_eval is not None:
        eval_records.append(final_eval)
    save_ckpt()

    report = {
        "env": cfg.env,
        "seed": cfg.seed,
        "env_steps": env_step,
        "train_steps": train_step_index,
        "outer_iterations": outer_iterations,
        "total_pushes": total_pushes,
        "skipped_updates": skipped_updates,
        "final_eval": final_eval,
        "eval_history": eval_records,
        "wall_clock_seconds": time.perf_counter() - t_start,
    }
    with open(run_dir / "report.json", "w") as f:
        json.dump(report, f, indent=2)
    return report


def export_metrics(run_dir, out_path=None, fmt: str = "csv") -> Path:
    """Convert a run's metrics stream to CSV (RFC 4180) or a JSON array."""
    import csv

    run_dir = Path(run_dir)
    metrics_path = run_dir / "metrics.jsonl"
    if not metrics_path.exists():
        raise FileNotFoundError(f"no metrics file at {metrics_path}")
    records = []
    with open(metrics_path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if out_path is None:
        out_path = run_dir / ("metrics.csv" if fmt == "csv" else "metrics.json")
    out_path = Path(out_path)
    if fmt == "csv":
        fields = list(MetricsRecord.METRICS_FIELDS)
        with open(out_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            for rec in records:
                writer.writerow({k: ("" if rec.get(k) is None else rec.get(k)) for k in fields})
    elif fmt == "json":
        with open(out_path, "w") as f:
            json.dump(records, f)
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    return out_path
