"""Small dense-network toolkit: MLPs with cached reverse-mode gradients,
the Adam optimizer, sinusoidal positional encoding and a finite-difference
gradient checker.

Training numerics are float64 throughout; float32 only appears at the
storage boundary (see wgt.py).
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Input shape does not chain with the network layout."""


class StateError(RuntimeError):
    """Backward called without a matching forward pass."""


class OptimizerError(RuntimeError):
    """Non-finite gradient reached the optimizer."""


def check_finite(arr, label="tensor"):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {label}")
    return arr


# ---------------------------------------------------------------------------
# positional encoding

def positional_encode(x, k: int, period: float) -> np.ndarray:
    """Sinusoidal encoding [sin(2^j pi x / period), cos(...)] for j = 0..k.

    Each input component expands to 2*(k+1) entries; vector inputs are
    encoded component-major along the last axis.
    """
    if period <= 0:
        raise ValueError(f"period must be positive, got {period}")
    if k < 0:
        raise ValueError(f"encoding length must be >= 0, got {k}")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    freqs = (2.0 ** np.arange(k + 1)) * np.pi / period  # (k+1,)
    phase = x[..., None] * freqs                        # (..., d, k+1)
    enc = np.stack([np.sin(phase), np.cos(phase)], axis=-1)  # (..., d, k+1, 2)
    return enc.reshape(*x.shape[:-1], x.shape[-1] * 2 * (k + 1))


def encoded_width(input_dim: int, k: int) -> int:
    return input_dim * 2 * (k + 1)


# ---------------------------------------------------------------------------
# MLP with a per-layer activation tag and cached activations

_ACTS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(np.float64)),
    "sigmoid": (lambda z: 1.0 / (1.0 + np.exp(-z)), lambda z, a: a * (1.0 - a)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "identity": (lambda z: z, lambda z, a: np.ones_like(z)),
}


class Mlp:
    """Fully connected network; layer i maps widths[i] -> widths[i+1].

    forward() caches pre-activations so backward() can run once per call.
    Parameters live in self.weights / self.biases and are shared by
    reference with the optimizer's parameter dict.
    """

    def __init__(self, widths, activations, rng=None, weight_gain=1.0):
        if len(activations) != len(widths) - 1:
            raise DimensionError("need one activation per layer")
        for a in activations:
            if a not in _ACTS:
                raise ValueError(f"unknown activation {a!r}")
        self.widths = list(widths)
        self.activations = list(activations)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights = []
        self.biases = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            bound = weight_gain / np.sqrt(w_in)
            self.weights.append(rng.uniform(-bound, bound, size=(w_in, w_out)))
            self.biases.append(rng.uniform(-bound, bound, size=w_out))
        self._cache = None

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.widths[0]:
            raise DimensionError(
                f"input width {x.shape[-1]} != first layer width {self.widths[0]}")
        acts = [x]
        pre = []
        for w, b, tag in zip(self.weights, self.biases, self.activations):
            z = acts[-1] @ w + b
            pre.append(z)
            acts.append(_ACTS[tag][0](z))
        self._cache = (acts, pre, squeeze)
        out = acts[-1]
        return out[0] if squeeze else out

    def __call__(self, x):
        return self.forward(x)

    def backward(self, upstream):
        """Return (weight grads, bias grads, input grad) for the last forward."""
        if self._cache is None:
            raise StateError("backward called before forward")
        acts, pre, squeeze = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        if squeeze:
            g = g[None, :]
        dws, dbs = [None] * len(self.weights), [None] * len(self.weights)
        for i in reversed(range(len(self.weights))):
            tag = self.activations[i]
            g = g * _ACTS[tag][1](pre[i], acts[i + 1])
            dws[i] = acts[i].T @ g
            dbs[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return dws, dbs, (g[0] if squeeze else g)

    def param_items(self, prefix: str):
        """(name, array) pairs for optimizer registration."""
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.w{i}", w
            yield f"{prefix}.b{i}", b

    def grad_items(self, prefix: str, dws, dbs):
        for i, (dw, db) in enumerate(zip(dws, dbs)):
            yield f"{prefix}.w{i}", dw
            yield f"{prefix}.b{i}", db


# ---------------------------------------------------------------------------
# Adam

class Adam:
    """Adam with bias correction over a dict of named parameter arrays.

    Parameters are updated in place so every module keeps its own views.
    """

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = np.asarray(grads.get(name, 0.0), dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient for parameter {name!r}")
            if g.shape != () and g.shape != p.shape:
                raise DimensionError(f"gradient shape {g.shape} != param {p.shape} for {name!r}")
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_tensors(self, prefix="adam"):
        out = {f"{prefix}.t": np.array([float(self.t)])}
        for k in self.params:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors, prefix="adam"):
        self.t = int(round(float(tensors[f"{prefix}.t"][0])))
        for k in self.params:
            self.m[k] = np.asarray(tensors[f"{prefix}.m.{k}"], dtype=np.float64).reshape(self.params[k].shape)
            self.v[k] = np.asarray(tensors[f"{prefix}.v.{k}"], dtype=np.float64).reshape(self.params[k].shape)


# ---------------------------------------------------------------------------
# finite-difference gradient checking

def gradcheck(f, params: dict, h=1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f()`` evaluates the current parameter dict and returns
    (scalar loss, grads dict).  Relative error per entry is
    |a - n| / max(1e-8, |a| + |n|).
    """
    _, grads = f()
    worst = 0.0
    for name, p in params.items():
        analytic = np.atleast_1d(np.asarray(grads[name], dtype=np.float64))
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = f()
            flat[i] = orig - h
            lm, _ = f()
            flat[i] = orig
            numeric = (lp - lm) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
