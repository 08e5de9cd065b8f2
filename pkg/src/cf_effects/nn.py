"""Minimal dense-network primitives with hand-written backward passes.

No autodiff: every operation ships its analytic gradient, and
:func:`finite_difference_check` verifies them against central differences.
Parameters live in a flat :class:`ParamStore` (name -> float64 array) whose
gradient arrays mirror the parameter shapes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "MlpSpec",
    "ParamStore",
    "AdamState",
    "init_mlp_params",
    "mlp_forward",
    "mlp_backward",
    "softmax_cross_entropy",
    "softmax",
    "finite_difference_check",
    "adam_step",
    "save_params",
    "load_params",
]


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths of a fully connected net: input -> hidden... -> output.

    ReLU between layers, identity on the output layer.  ``layer_sizes`` of
    length L+1 describes L affine transformations.
    """

    layer_sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.layer_sizes) < 2:
            raise ValueError("MlpSpec needs at least input and output sizes")
        if any(s <= 0 for s in self.layer_sizes):
            raise ValueError("layer sizes must be positive")

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def in_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_size(self) -> int:
        return self.layer_sizes[-1]


class ParamStore:
    """Named parameter tensors with matching gradient tensors.

    Single-writer: training mutates parameters and gradients in place, so
    concurrent trainers need separate stores.
    """

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        value = np.asarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def accumulate(self, prefix: str, grads: Mapping[str, np.ndarray]) -> None:
        for local, g in grads.items():
            name = f"{prefix}/{local}"
            if self.grads[name].shape != g.shape:
                raise ValueError(f"gradient shape mismatch for {name!r}")
            self.grads[name] += g

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """View of parameters under ``prefix/`` keyed by their local names."""
        cut = len(prefix) + 1
        return {
            name[cut:]: value
            for name, value in self.params.items()
            if name.startswith(prefix + "/")
        }


BIAS_INIT = 0.01


def init_mlp_params(spec: MlpSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform weights: {'w0': ..., 'b0': ..., ...}.

    Biases start at a small positive constant so ReLU units are initially
    live and pre-activations sit away from the kink that breaks
    finite-difference probes.
    """
    out: dict[str, np.ndarray] = {}
    for i in range(spec.num_layers):
        fan_in, fan_out = spec.layer_sizes[i], spec.layer_sizes[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        out[f"w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        out[f"b{i}"] = np.full(fan_out, BIAS_INIT)
    return out


def mlp_forward(
    spec: MlpSpec, params: Mapping[str, np.ndarray], x: np.ndarray
) -> tuple[np.ndarray, dict]:
    """Batched forward pass; returns (output, cache for backward).

    ``cache['inputs'][i]`` is the activation entering layer i; the last
    entry is the penultimate activation feeding the output layer.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.in_size:
        raise ValueError(
            f"input shape {x.shape} incompatible with spec input size {spec.in_size}"
        )
    inputs = [x]
    pre_acts = []
    for i in range(spec.num_layers):
        z = inputs[-1] @ params[f"w{i}"] + params[f"b{i}"]
        pre_acts.append(z)
        if i < spec.num_layers - 1:
            inputs.append(np.maximum(z, 0.0))
    return pre_acts[-1], {"inputs": inputs, "pre_acts": pre_acts}


def mlp_backward(
    spec: MlpSpec,
    params: Mapping[str, np.ndarray],
    cache: dict,
    d_out: np.ndarray,
    d_last_hidden: np.ndarray | None = None,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backward pass; returns (parameter grads, gradient w.r.t. the input).

    ``d_last_hidden`` injects an extra gradient at the activation feeding
    the output layer (used by heads that tap the penultimate features).
    ReLU at exactly 0 takes subgradient 0.
    """
    inputs, pre_acts = cache["inputs"], cache["pre_acts"]
    grads: dict[str, np.ndarray] = {}
    d = np.asarray(d_out, dtype=np.float64)
    for i in reversed(range(spec.num_layers)):
        grads[f"w{i}"] = inputs[i].T @ d
        grads[f"b{i}"] = d.sum(axis=0)
        d = d @ params[f"w{i}"].T
        if i == spec.num_layers - 1 and d_last_hidden is not None:
            d = d + d_last_hidden
        if i > 0:
            d = d * (pre_acts[i - 1] > 0.0)
    return grads, d


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(
    logits: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean negative log-softmax of the target class.

    Returns (loss, gradient w.r.t. logits) with gradient
    ``(softmax - one_hot) / batch``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    n, num_classes = logits.shape
    if targets.shape != (n,):
        raise ValueError("targets must be one class index per row")
    if targets.min() < 0 or targets.max() >= num_classes:
        raise ValueError("target index out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    loss = float(-log_probs[np.arange(n), targets].mean())
    grad = softmax(logits)
    grad[np.arange(n), targets] -= 1.0
    return loss, grad / n


def finite_difference_check(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between central differences and analytic grads.

    Relative error per coordinate is ``|fd - an| / max(1, |fd|, |an|)``.
    Mutates each coordinate in place and restores it, so ``f`` may close
    over ``params`` directly.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    worst = 0.0
    for name in sorted(analytic):
        p = params[name]
        an = analytic[name]
        flat_p = p.reshape(-1)
        flat_an = np.asarray(an, dtype=np.float64).reshape(-1)
        for j in range(flat_p.size):
            orig = flat_p[j]
            flat_p[j] = orig + epsilon
            hi = f(params)
            flat_p[j] = orig - epsilon
            lo = f(params)
            flat_p[j] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise ValueError(f"non-finite loss while probing {name!r}")
            fd = (hi - lo) / (2.0 * epsilon)
            err = abs(fd - flat_an[j]) / max(1.0, abs(fd), abs(flat_an[j]))
            worst = max(worst, err)
    return worst


@dataclass
class AdamState:
    """First/second moment estimates and step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def save_params(params: Mapping[str, np.ndarray], path: str | Path) -> None:
    """Checkpoint as JSON {name: {shape, row-major data}}; round-trips bit-exactly."""
    payload = {
        name: {"shape": list(p.shape), "data": p.reshape(-1).tolist()}
        for name, p in params.items()
    }
    Path(path).write_text(json.dumps(payload))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    payload = json.loads(Path(path).read_text())
    return {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload.items()
    }
