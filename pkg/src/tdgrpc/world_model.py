"""Latent world model: encoder, latent dynamics, reward head, value head
(with a delayed target copy), and a diagonal-Gaussian policy head, plus the
three-term consistency objective that trains the non-policy heads."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .nn import MlpParams

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class WorldModelConfig:
    d_s: int
    d_a: int
    d_z: int = 32
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    # "tanh" bounds encoder/dynamics outputs to (-1, 1), which keeps the
    # latent scale stable over long training; "linear" leaves the heads as
    # plain affine-output MLPs (exact linear systems stay representable).
    latent_activation: str = "linear"


@dataclass
class WorldModel:
    """Parameter bundle for the five learned heads.

    ``value_target`` is a delayed copy of ``value``, advanced by
    ``update_value_target`` and used to stabilize TD regression targets.
    ``obs_mean``/``obs_std``, when set, standardize encoder inputs; they are
    data statistics, not trainable parameters.
    """

    cfg: WorldModelConfig
    encoder: MlpParams
    dynamics: MlpParams
    reward: MlpParams
    value: MlpParams
    value_target: MlpParams
    policy: MlpParams
    obs_mean: np.ndarray | None = None
    obs_std: np.ndarray | None = None

    def set_obs_normalizer(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.obs_mean = np.asarray(mean, dtype=np.float64)
        self.obs_std = np.maximum(np.asarray(std, dtype=np.float64), 1e-6)

    def model_parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(nn.param_dict("encoder", self.encoder))
        out.update(nn.param_dict("dynamics", self.dynamics))
        out.update(nn.param_dict("reward", self.reward))
        out.update(nn.param_dict("value", self.value))
        return out

    def policy_parameters(self) -> dict[str, Tensor]:
        return nn.param_dict("policy", self.policy)

    def target_parameters(self) -> dict[str, Tensor]:
        return nn.param_dict("value_target", self.value_target)

    def parameters(self) -> dict[str, Tensor]:
        out = self.model_parameters()
        out.update(self.policy_parameters())
        return out


@dataclass
class PolicyDistribution:
    """Diagonal Gaussian over actions; fields may be batched (..., d_a)."""

    mean: Tensor
    log_std: Tensor

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.data)


def gaussian(mean, log_std) -> PolicyDistribution:
    """Build a constant PolicyDistribution from raw arrays."""
    return PolicyDistribution(ad.as_tensor(mean), ad.as_tensor(log_std))


def init_world_model(cfg: WorldModelConfig, rng: np.random.Generator) -> WorldModel:
    h = list(cfg.hidden)
    enc = nn.mlp_init([cfg.d_s, *h, cfg.d_z], rng, cfg.activation)
    dyn = nn.mlp_init([cfg.d_z + cfg.d_a, *h, cfg.d_z], rng, cfg.activation)
    rew = nn.mlp_init([cfg.d_z + cfg.d_a, *h, 1], rng, cfg.activation)
    val = nn.mlp_init([cfg.d_z + cfg.d_a, *h, 1], rng, cfg.activation)
    pol = nn.mlp_init([cfg.d_z, *h, 2 * cfg.d_a], rng, cfg.activation, final_scale=0.1)
    model = WorldModel(cfg, enc, dyn, rew, val, copy.deepcopy(val), pol)
    return model


def _check_dim(x: np.ndarray, dim: int, what: str) -> None:
    if x.shape[-1] != dim:
        raise ValueError(f"{what} has last dimension {x.shape[-1]}, expected {dim}")


def _squash_latent(model: WorldModel, z: Tensor) -> Tensor:
    if model.cfg.latent_activation == "tanh":
        return ad.tanh(z)
    return z


def encode(model: WorldModel, s) -> Tensor:
    """Deterministic latent embedding of a state (or batch of states)."""
    s = ad.as_tensor(s)
    _check_dim(s.data, model.cfg.d_s, "state")
    if model.obs_mean is not None:
        s = Tensor((s.data - model.obs_mean) / model.obs_std)
    return _squash_latent(model, nn.mlp_forward(model.encoder, s))


def dynamics_step(model: WorldModel, z, a) -> Tensor:
    """Predicted next latent from (z, a); deterministic."""
    z, a = ad.as_tensor(z), ad.as_tensor(a)
    _check_dim(z.data, model.cfg.d_z, "latent")
    _check_dim(a.data, model.cfg.d_a, "action")
    return _squash_latent(
        model, nn.mlp_forward(model.dynamics, ad.concat([z, a], axis=-1))
    )


def predict_reward(model: WorldModel, z, a) -> Tensor:
    z, a = ad.as_tensor(z), ad.as_tensor(a)
    _check_dim(z.data, model.cfg.d_z, "latent")
    _check_dim(a.data, model.cfg.d_a, "action")
    out = nn.mlp_forward(model.reward, ad.concat([z, a], axis=-1))
    return ad.reshape(out, out.data.shape[:-1])


def predict_value(model: WorldModel, z, a, use_target: bool = False) -> Tensor:
    z, a = ad.as_tensor(z), ad.as_tensor(a)
    _check_dim(z.data, model.cfg.d_z, "latent")
    _check_dim(a.data, model.cfg.d_a, "action")
    head = model.value_target if use_target else model.value
    out = nn.mlp_forward(head, ad.concat([z, a], axis=-1))
    return ad.reshape(out, out.data.shape[:-1])


def policy_distribution(model: WorldModel, z) -> PolicyDistribution:
    """Mean / clamped log-std of the policy head at latent ``z``."""
    z = ad.as_tensor(z)
    _check_dim(z.data, model.cfg.d_z, "latent")
    out = nn.mlp_forward(model.policy, z)
    d_a = model.cfg.d_a
    mean = ad.take_columns(out, 0, d_a)
    log_std = ad.clip(
        ad.take_columns(out, d_a, 2 * d_a), model.cfg.log_std_min, model.cfg.log_std_max
    )
    return PolicyDistribution(mean, log_std)


# gradient-free array variants for the planner and rollout hot paths


def encode_np(model: WorldModel, s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    _check_dim(s, model.cfg.d_s, "state")
    if model.obs_mean is not None:
        s = (s - model.obs_mean) / model.obs_std
    out = nn.mlp_forward_np(model.encoder, s)
    return np.tanh(out) if model.cfg.latent_activation == "tanh" else out


def dynamics_np(model: WorldModel, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    out = nn.mlp_forward_np(model.dynamics, np.concatenate([z, a], axis=-1))
    return np.tanh(out) if model.cfg.latent_activation == "tanh" else out


def reward_np(model: WorldModel, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    out = nn.mlp_forward_np(model.reward, np.concatenate([z, a], axis=-1))
    return out[..., 0]


def value_np(
    model: WorldModel, z: np.ndarray, a: np.ndarray, use_target: bool = False
) -> np.ndarray:
    head = model.value_target if use_target else model.value
    out = nn.mlp_forward_np(head, np.concatenate([z, a], axis=-1))
    return out[..., 0]


def policy_dist_np(model: WorldModel, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = nn.mlp_forward_np(model.policy, z)
    d_a = model.cfg.d_a
    mean = out[..., :d_a]
    log_std = np.clip(
        out[..., d_a : 2 * d_a], model.cfg.log_std_min, model.cfg.log_std_max
    )
    return mean, log_std


def sample_action(
    dist: PolicyDistribution,
    rng: np.random.Generator,
    action_low: np.ndarray | None = None,
    action_high: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``a = mean + std * noise`` and clip to the action box.

    The returned log-probability is the diagonal-Gaussian density of the
    pre-clip draw. Works on batched distributions.
    """
    mean = dist.mean.data
    std = dist.std
    noise = rng.standard_normal(mean.shape)
    raw = mean + std * noise
    log_prob = gaussian_log_prob_np(mean, dist.log_std.data, raw)
    a = raw
    if action_low is not None or action_high is not None:
        a = np.clip(raw, action_low, action_high)
    return a, log_prob


def gaussian_log_prob_np(
    mean: np.ndarray, log_std: np.ndarray, actions: np.ndarray
) -> np.ndarray:
    std = np.exp(log_std)
    zscore = (actions - mean) / std
    return -0.5 * np.sum(zscore * zscore + 2.0 * log_std + LOG_2PI, axis=-1)


def gaussian_log_prob(dist: PolicyDistribution, actions) -> Tensor:
    """Differentiable log density of ``actions`` under ``dist`` (sum over dims)."""
    actions = ad.as_tensor(actions)
    std = ad.exp(dist.log_std)
    zscore = ad.div(ad.sub(actions, dist.mean), std)
    terms = ad.add(ad.square(zscore), ad.add(ad.mul(dist.log_std, 2.0), LOG_2PI))
    return ad.mul(ad.tsum(terms, axis=-1), -0.5)


# ---------------------------------------------------------------------------
# model objective


@dataclass
class Segment:
    """H consecutive same-episode transitions as stacked arrays."""

    states: np.ndarray  # (H, d_s)
    actions: np.ndarray  # (H, d_a)
    rewards: np.ndarray  # (H,)
    next_states: np.ndarray  # (H, d_s)

    @property
    def horizon(self) -> int:
        return self.states.shape[0]


@dataclass
class ModelLossBreakdown:
    latent: float
    reward: float
    value: float

    @property
    def total(self) -> float:
        return self.latent + self.reward + self.value


def compute_td_targets(
    model: WorldModel,
    segments: list[Segment],
    gamma: float,
    use_live_target: bool = False,
) -> np.ndarray:
    """Constant TD regression targets r_i + gamma * Q(z_{i+1}, pi(z_{i+1})).

    Latents are rolled out with the dynamics head from the encoded first
    state, matching the rollout the loss itself uses. Shape (H, B).
    """
    H = segments[0].horizon
    states0 = np.stack([seg.states[0] for seg in segments])
    actions = np.stack([seg.actions for seg in segments], axis=1)  # (H, B, d_a)
    rewards = np.stack([seg.rewards for seg in segments], axis=1)  # (H, B)
    z = encode_np(model, states0)
    targets = np.empty((H, len(segments)))
    for i in range(H):
        z_next = dynamics_np(model, z, actions[i])
        a_next, _ = policy_dist_np(model, z_next)
        q_next = value_np(model, z_next, a_next, use_target=not use_live_target)
        targets[i] = rewards[i] + gamma * q_next
        z = z_next
    return targets


def model_loss(
    model: WorldModel,
    segments: Segment | list[Segment],
    gamma: float,
    coeffs: tuple[float, float, float] = (1.0, 1.0, 1.0),
    use_live_target: bool = False,
    td_targets: np.ndarray | None = None,
) -> tuple[Tensor, ModelLossBreakdown]:
    """Three-term consistency objective over an H-step latent rollout.

    Per step i of the rollout z_0 = encoder(s_0), z_{i+1} = dynamics(z_i, a_i):
      latent term  ||dynamics(z_i, a_i) - encoder(s_{i+1})||^2
      reward term  ||reward(z_i, a_i) - r_i||^2
      value term   ||value(z_i, a_i) - (r_i + gamma * Q'(z_{i+1}, pi(z_{i+1})))||^2
    The TD target in the value term is a constant (no gradient through it);
    Q' is the delayed target copy unless ``use_live_target``. Terms are summed
    over the H steps and averaged over the segment batch. Returns the weighted
    total and the per-term breakdown (unweighted sums).
    """
    if isinstance(segments, Segment):
        segments = [segments]
    H = segments[0].horizon
    B = len(segments)
    states = np.stack([seg.states for seg in segments], axis=1)  # (H, B, d_s)
    actions = np.stack([seg.actions for seg in segments], axis=1)
    rewards = np.stack([seg.rewards for seg in segments], axis=1)
    next_states = np.stack([seg.next_states for seg in segments], axis=1)

    if td_targets is None:
        with ad.stop_recording():
            td_targets = compute_td_targets(model, segments, gamma, use_live_target)

    # Latent rollout needs the dynamics head sequentially; the three loss
    # heads then run once each on the step-stacked latents.
    z = encode(model, states[0])
    z_steps = []
    for i in range(H):
        z_steps.append(z)
        if i < H - 1:
            z = dynamics_step(model, z, Tensor(actions[i]))
    z_rollout = ad.concat([ad.reshape(zi, (1, B, -1)) for zi in z_steps], axis=0)
    z_flat = ad.reshape(z_rollout, (H * B, -1))
    a_flat = Tensor(actions.reshape(H * B, -1))

    pred_next = dynamics_step(model, z_flat, a_flat)
    enc_next = encode(model, next_states.reshape(H * B, -1))
    l_latent = ad.mul(ad.tsum(ad.square(ad.sub(pred_next, enc_next))), 1.0 / B)

    r_hat = predict_reward(model, z_flat, a_flat)
    l_reward = ad.mul(
        ad.tsum(ad.square(ad.sub(r_hat, rewards.reshape(H * B)))), 1.0 / B
    )
    q_hat = predict_value(model, z_flat, a_flat)
    l_value = ad.mul(
        ad.tsum(ad.square(ad.sub(q_hat, td_targets.reshape(H * B)))), 1.0 / B
    )
    for tensor, name in ((l_latent, "latent consistency"),
                         (l_reward, "reward consistency"),
                         (l_value, "value consistency")):
        ad.check_finite(tensor, f"model loss term '{name}'")
    loss = ad.add(
        ad.add(ad.mul(l_latent, coeffs[0]), ad.mul(l_reward, coeffs[1])),
        ad.mul(l_value, coeffs[2]),
    )
    breakdown = ModelLossBreakdown(
        latent=l_latent.item(), reward=l_reward.item(), value=l_value.item()
    )
    return loss, breakdown


def hard_sync_target(model: WorldModel) -> None:
    """Copy the live value head into the delayed target copy."""
    for wt, wl in zip(model.value_target.weights, model.value.weights):
        wt.data[...] = wl.data
    for bt, bl in zip(model.value_target.biases, model.value.biases):
        bt.data[...] = bl.data


def update_value_target(model: WorldModel, rate: float) -> None:
    """Advance the target copy: target <- rate * live + (1 - rate) * target."""
    for wt, wl in zip(model.value_target.weights, model.value.weights):
        wt.data *= 1.0 - rate
        wt.data += rate * wl.data
    for bt, bl in zip(model.value_target.biases, model.value.biases):
        bt.data *= 1.0 - rate
        bt.data += rate * bl.data


# ---------------------------------------------------------------------------
# checkpointing


def model_arrays(model: WorldModel) -> dict[str, np.ndarray]:
    arrays = {}
    heads = {
        "encoder": model.encoder,
        "dynamics": model.dynamics,
        "reward": model.reward,
        "value": model.value,
        "value_target": model.value_target,
        "policy": model.policy,
    }
    for prefix, mlp in heads.items():
        for name, tensor in nn.param_dict(prefix, mlp).items():
            arrays[name] = tensor.data
    if model.obs_mean is not None:
        arrays["obs_mean"] = model.obs_mean
        arrays["obs_std"] = model.obs_std
    return arrays


def model_meta(model: WorldModel) -> dict:
    cfg = model.cfg
    return {
        "d_s": cfg.d_s,
        "d_a": cfg.d_a,
        "d_z": cfg.d_z,
        "hidden": list(cfg.hidden),
        "activation": cfg.activation,
        "log_std_min": cfg.log_std_min,
        "log_std_max": cfg.log_std_max,
        "latent_activation": cfg.latent_activation,
        "layer_sizes": {
            "encoder": model.encoder.layer_sizes,
            "dynamics": model.dynamics.layer_sizes,
            "reward": model.reward.layer_sizes,
            "value": model.value.layer_sizes,
            "value_target": model.value_target.layer_sizes,
            "policy": model.policy.layer_sizes,
        },
    }


def save_model(path, model: WorldModel, extra_meta: dict | None = None) -> None:
    meta = {"model": model_meta(model)}
    if extra_meta:
        meta.update(extra_meta)
    nn.save_checkpoint(path, model_arrays(model), meta)


def restore_model_from_arrays(arrays: dict[str, np.ndarray], meta: dict) -> WorldModel:
    m = meta["model"]
    cfg = WorldModelConfig(
        d_s=m["d_s"],
        d_a=m["d_a"],
        d_z=m["d_z"],
        hidden=tuple(m["hidden"]),
        activation=m["activation"],
        log_std_min=m["log_std_min"],
        log_std_max=m["log_std_max"],
        latent_activation=m.get("latent_activation", "linear"),
    )

    def rebuild(prefix: str) -> MlpParams:
        sizes = m["layer_sizes"][prefix]
        weights = [Tensor(arrays[f"{prefix}.w{i}"]) for i in range(len(sizes) - 1)]
        biases = [Tensor(arrays[f"{prefix}.b{i}"]) for i in range(len(sizes) - 1)]
        params = MlpParams(list(sizes), weights, biases, cfg.activation)
        params.validate()
        return params

    model = WorldModel(
        cfg,
        rebuild("encoder"),
        rebuild("dynamics"),
        rebuild("reward"),
        rebuild("value"),
        rebuild("value_target"),
        rebuild("policy"),
    )
    if "obs_mean" in arrays:
        model.set_obs_normalizer(arrays["obs_mean"], arrays["obs_std"])
    return model


def load_model(path) -> tuple[WorldModel, dict]:
    arrays, meta = nn.load_checkpoint(path)
    return restore_model_from_arrays(arrays, meta), meta
