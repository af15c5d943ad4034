"""Small multilayer perceptrons on top of the tape autodiff, plus a
first-order optimizer and bit-exact checkpoint serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_ACTIVATIONS = {
    "tanh": ad.tanh,
    "relu": ad.relu,
}

_ACTIVATIONS_NP = {
    "tanh": np.tanh,
    "relu": lambda x: np.maximum(x, 0.0),
}


@dataclass
class MlpParams:
    """Parameters of a fully connected network.

    ``layer_sizes`` runs input dim first, output dim last; ``weights[i]`` has
    shape (layer_sizes[i+1], layer_sizes[i]) and ``biases[i]`` length
    layer_sizes[i+1]. The activation applies to hidden layers only, so
    ``layer_sizes=[in, out]`` is an exact affine map.
    """

    layer_sizes: list[int]
    weights: list[Tensor]
    biases: list[Tensor]
    activation: str = "tanh"

    def validate(self) -> None:
        if any(n <= 0 for n in self.layer_sizes):
            raise ValueError(f"layer sizes must be positive, got {self.layer_sizes}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != want:
                raise ValueError(f"weight {i} has shape {w.shape}, expected {want}")
            if b.shape != (self.layer_sizes[i + 1],):
                raise ValueError(
                    f"bias {i} has shape {b.shape}, expected ({self.layer_sizes[i + 1]},)"
                )


def mlp_init(
    layer_sizes: list[int],
    rng: np.random.Generator,
    activation: str = "tanh",
    final_scale: float = 1.0,
) -> MlpParams:
    """Gaussian fan-in initialization; ``final_scale`` shrinks the last layer."""
    weights, biases = [], []
    for i in range(len(layer_sizes) - 1):
        fan_in = layer_sizes[i]
        scale = np.sqrt(1.0 / fan_in)
        if i == len(layer_sizes) - 2:
            scale *= final_scale
        weights.append(Tensor(rng.normal(0.0, scale, (layer_sizes[i + 1], fan_in))))
        biases.append(Tensor(np.zeros(layer_sizes[i + 1])))
    params = MlpParams(list(layer_sizes), weights, biases, activation)
    params.validate()
    return params


def mlp_forward(params: MlpParams, x) -> Tensor:
    """Taped forward pass; accepts (n,) or (batch, n) input."""
    x = ad.as_tensor(x)
    squeeze = x.data.ndim == 1
    if squeeze:
        x = ad.reshape(x, (1, -1))
    if x.shape[-1] != params.layer_sizes[0]:
        raise ValueError(
            f"input has last dimension {x.shape[-1]}, "
            f"network expects {params.layer_sizes[0]}"
        )
    act = _ACTIVATIONS[params.activation]
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = ad.linear(x, w, b)
        if i < n_layers - 1:
            x = act(x)
    if squeeze:
        x = ad.reshape(x, (x.shape[-1],))
    return x


def mlp_forward_np(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Gradient-free forward pass on raw arrays (planner hot path)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != params.layer_sizes[0]:
        raise ValueError(
            f"input has last dimension {x.shape[-1]}, "
            f"network expects {params.layer_sizes[0]}"
        )
    act = _ACTIVATIONS_NP[params.activation]
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = x @ w.data.T + b.data
        if i < n_layers - 1:
            x = act(x)
    return x[0] if squeeze else x


def param_dict(prefix: str, params: MlpParams) -> dict[str, Tensor]:
    """Flat name -> Tensor view of an MLP's parameters."""
    out: dict[str, Tensor] = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """First-order optimizer state keyed by parameter name.

    ``method`` is "adam" (adaptive moments, the default) or "sgd".
    """

    learning_rate: float = 3e-4
    method: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    state: OptimizerState,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    context: str = "loss",
) -> dict[str, Tensor]:
    """Update ``params`` in place from ``grads`` (keyed identically).

    Raises FloatingPointError on any non-finite gradient, naming the
    parameter and the loss term being optimized.
    """
    for name in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite gradient for parameter '{name}' while optimizing {context}"
            )
    state.step_count += 1
    lr = state.learning_rate
    if state.method == "sgd":
        for name, p in params.items():
            p.data -= lr * grads[name]
    elif state.method == "adam":
        t = state.step_count
        bc1 = 1.0 - state.beta1**t
        bc2 = 1.0 - state.beta2**t
        for name, p in params.items():
            g = grads[name]
            m = state.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                state.m[name] = m
                state.v[name] = np.zeros_like(p.data)
            v = state.v[name]
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    else:
        raise ValueError(f"unknown optimizer method {state.method!r}")
    return params


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def optimizer_state_arrays(prefix: str, state: OptimizerState) -> dict[str, np.ndarray]:
    arrays = {}
    for name, arr in state.m.items():
        arrays[f"{prefix}.m.{name}"] = arr
    for name, arr in state.v.items():
        arrays[f"{prefix}.v.{name}"] = arr
    return arrays


def optimizer_state_meta(state: OptimizerState) -> dict:
    return {
        "learning_rate": state.learning_rate,
        "method": state.method,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps": state.eps,
        "step_count": state.step_count,
    }


def restore_optimizer_state(
    prefix: str, meta: dict, arrays: dict[str, np.ndarray]
) -> OptimizerState:
    state = OptimizerState(
        learning_rate=meta["learning_rate"],
        method=meta["method"],
        beta1=meta["beta1"],
        beta2=meta["beta2"],
        eps=meta["eps"],
        step_count=meta["step_count"],
    )
    mp, vp = f"{prefix}.m.", f"{prefix}.v."
    for key, arr in arrays.items():
        if key.startswith(mp):
            state.m[key[len(mp):]] = arr.copy()
        elif key.startswith(vp):
            state.v[key[len(vp):]] = arr.copy()
    return state


# ---------------------------------------------------------------------------
# checkpoint container

CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Versioned npz container; float64 arrays round-trip bit-exactly."""
    meta = dict(meta)
    meta["format_version"] = CHECKPOINT_VERSION
    payload = {key: np.asarray(arr) for key, arr in arrays.items()}
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    np.savez(path, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {meta.get('format_version')!r}"
            )
        arrays = {key: data[key].copy() for key in data.files if key != "__meta__"}
    return arrays, meta
