"""Minimal differentiable machinery: tanh MLPs with analytic backprop,
a flat-vector Adam optimizer, and a finite-difference gradient checker.

Layers own their parameter arrays and gradient accumulators.  Networks can
share layer objects (the harness shares one first hidden layer across the
policy, value and transition networks); parameter flattening deduplicates
shared layers by identity so the optimizer sees each array exactly once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Linear",
    "Mlp",
    "Parameter",
    "ParamBundle",
    "AdamState",
    "adam_step",
    "grad_check",
    "orthogonal",
    "softplus",
    "sigmoid",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1


def orthogonal(rng: np.random.Generator, n_out: int, n_in: int,
               gain: float = 1.0) -> np.ndarray:
    """Orthogonal weight matrix scaled by gain."""
    a = rng.standard_normal((max(n_out, n_in), min(n_out, n_in)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if n_out < n_in:
        q = q.T
    return gain * q[:n_out, :n_in]


def softplus(x):
    """Numerically stable log(1 + exp(x))."""
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


class Parameter:
    """A named parameter array paired with its gradient accumulator."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


class Linear:
    """Fully-connected layer y = x @ W.T + b with gradient accumulation."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int,
                 gain: float = np.sqrt(2.0), name: str = "linear"):
        self.n_in = n_in
        self.n_out = n_out
        self.w = Parameter(f"{name}.w", orthogonal(rng, n_out, n_in, gain))
        self.b = Parameter(f"{name}.b", np.zeros(n_out))
        self._cache = None

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]

    def forward(self, x: np.ndarray):
        """Returns (output, cache); pass the cache back to backward."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"input has {x.shape[-1]} features, layer expects {self.n_in}")
        y = x @ self.w.value.T + self.b.value
        self._cache = x
        return y, x

    def backward(self, grad_out: np.ndarray, cache: np.ndarray | None = None):
        """Accumulates parameter gradients; returns the input gradient."""
        if cache is None:
            cache = self._cache
        if cache is None:
            raise RuntimeError("backward called before forward")
        x = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            self.w.grad += np.outer(g, x)
            self.b.grad += g
        else:
            self.w.grad += g.T @ x
            self.b.grad += g.sum(axis=0)
        return g @ self.w.value


class Mlp:
    """Stack of Linear layers with tanh between them.

    The output is linear unless final_tanh is set (used for trunk sections
    that feed further heads).  Forward returns the output plus an explicit
    cache so interleaved forwards through shared layers stay correct.
    """

    def __init__(self, layers: list[Linear], final_tanh: bool = False):
        self.layers = layers
        self.final_tanh = final_tanh
        self._cache = None

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].n_in] + [l.n_out for l in self.layers]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x: np.ndarray):
        caches = []
        h = np.asarray(x, dtype=np.float64)
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            z, lin_cache = layer.forward(h)
            if i < n - 1 or self.final_tanh:
                h = np.tanh(z)
                caches.append((lin_cache, h))
            else:
                h = z
                caches.append((lin_cache, None))
        self._cache = caches
        return h, caches

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, grad_out: np.ndarray, cache=None) -> np.ndarray:
        """Reverse-mode pass; accumulates into layer grads, returns dL/dx."""
        if cache is None:
            cache = self._cache
        if cache is None:
            raise RuntimeError("backward called before forward")
        g = np.asarray(grad_out, dtype=np.float64)
        for layer, (lin_cache, act) in zip(reversed(self.layers), reversed(cache)):
            if act is not None:
                g = g * (1.0 - act * act)
            g = layer.backward(g, lin_cache)
        return g


class ParamBundle:
    """Ordered, deduplicated flat view over parameter arrays."""

    def __init__(self, params: list[Parameter]):
        seen: dict[int, None] = {}
        unique = []
        for p in params:
            if id(p) not in seen:
                seen[id(p)] = None
                unique.append(p)
        self.params = unique
        self.size = int(sum(p.value.size for p in unique))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ValueError(f"expected {self.size} entries, got {flat.size}")
        offset = 0
        for p in self.params:
            n = p.value.size
            p.value[...] = flat[offset:offset + n].reshape(p.value.shape)
            offset += n

    def grad_flat(self) -> np.ndarray:
        return np.concatenate([p.grad.ravel() for p in self.params])

    def zero_grads(self) -> None:
        for p in self.params:
            p.grad[...] = 0.0


@dataclass
class AdamState:
    """Moment accumulators for Adam over one flat parameter vector."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-5
    step_count: int = 0
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def ensure_shape(self, n: int) -> None:
        if self.m.size != n:
            self.m = np.zeros(n)
            self.v = np.zeros(n)


def adam_step(state: AdamState, params: np.ndarray,
              grads: np.ndarray) -> np.ndarray:
    """One Adam update; mutates state, returns the updated parameter vector."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError("parameter/gradient shape mismatch")
    state.ensure_shape(params.size)
    state.step_count += 1
    t = state.step_count
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** t)
    v_hat = state.v / (1.0 - state.beta2 ** t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def grad_check(f, x0: np.ndarray, h: float = 1e-5,
               denom_floor: float = 1e-4) -> float:
    """Max relative error between an analytic gradient and central differences.

    f maps a flat parameter vector to (scalar value, gradient vector); only
    the value is used for the difference quotients.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    _, analytic = f(x0)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x0.shape:
        raise ValueError("gradient shape does not match parameter shape")
    worst = 0.0
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = h
        plus, _ = f(x0 + e)
        minus, _ = f(x0 - e)
        fd = (plus - minus) / (2.0 * h)
        denom = max(abs(analytic[i]), abs(fd), denom_floor)
        worst = max(worst, abs(analytic[i] - fd) / denom)
    return worst


def save_checkpoint(path, flat_params: np.ndarray, meta: dict) -> None:
    """Versioned dump of a flat parameter vector plus layout metadata."""
    payload = dict(meta)
    payload["format_version"] = CHECKPOINT_VERSION
    np.savez(path, params=np.asarray(flat_params, dtype=np.float64),
             meta=json.dumps(payload, sort_keys=True))


def load_checkpoint(path) -> tuple[np.ndarray, dict]:
    with np.load(path, allow_pickle=False) as data:
        flat = np.asarray(data["params"], dtype=np.float64)
        meta = json.loads(str(data["meta"]))
    version = meta.pop("format_version", None)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    return flat, meta
