"""Dense numerical kernel: layers, activations, losses, optimizers and gradient checking.

Matrices are float64 numpy arrays. Gradients are derived by hand per layer;
:func:`grad_check` is the contract they are held to.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS = 1e-12


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x, name: str = "input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out)) if fan_in + fan_out else 0.0
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# ----------------------------------------------------------------- primitives


def linear_forward(x, w, bias=None) -> np.ndarray:
    x = check_finite(x, "x")
    w = check_finite(w, "w")
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"cannot multiply {x.shape} by {w.shape}")
    out = x @ w
    if bias is not None:
        b = check_finite(bias, "bias").reshape(1, -1)
        if b.shape[1] != w.shape[1]:
            raise DimensionError(f"bias shape {b.shape} does not match output width {w.shape[1]}")
        out = out + b
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def activation(x, kind: str) -> np.ndarray:
    x = check_finite(x, "x")
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return _sigmoid(x)
    if kind in ("softmax", "softmax-rows"):
        return _softmax_rows(np.atleast_2d(x))
    if kind == "identity":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(grad_out: np.ndarray, pre: np.ndarray, out: np.ndarray, kind: str) -> np.ndarray:
    """Gradient w.r.t. the pre-activation for element-wise activations."""
    if kind == "relu":
        return grad_out * (pre > 0)
    if kind == "sigmoid":
        return grad_out * out * (1.0 - out)
    if kind == "identity":
        return grad_out
    raise ValueError(f"no element-wise backward for {kind!r}")


def _mask_index(mask, n: int) -> np.ndarray:
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    if idx.size == 0:
        raise ValueError("no labeled nodes")
    return idx


def cross_entropy_loss(pred, labels, mask) -> float:
    """Mean cross-entropy over ``mask``.

    A 1-D ``pred`` is read as P(y=1) for a binary head; a 2-D ``pred`` holds
    per-class probabilities in each row.
    """
    pred = check_finite(pred, "pred")
    labels = np.asarray(labels)
    idx = _mask_index(mask, len(labels))
    y = labels[idx]
    if pred.ndim == 1:
        p = np.clip(pred[idx], EPS, 1.0 - EPS)
        return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1.0 - p)))
    p = np.clip(pred[idx, y], EPS, 1.0 - EPS)
    return float(-np.mean(np.log(p)))


def binary_ce_with_logits(logits: np.ndarray, labels: np.ndarray, mask) -> tuple[float, np.ndarray]:
    """Sigmoid + binary cross-entropy; returns (loss, d loss / d logits) over all rows."""
    idx = _mask_index(mask, len(labels))
    prob = _sigmoid(logits)
    loss = cross_entropy_loss(prob, labels, idx)
    grad = np.zeros_like(logits)
    p = prob[idx]
    y = labels[idx]
    g = (p - y) / len(idx)
    # inside the clip region the loss is flat
    g[(p < EPS) | (p > 1.0 - EPS)] = 0.0
    grad[idx] = g
    return loss, grad


def softmax_ce_with_logits(logits: np.ndarray, labels: np.ndarray, mask) -> tuple[float, np.ndarray]:
    idx = _mask_index(mask, len(labels))
    prob = _softmax_rows(logits)
    loss = cross_entropy_loss(prob, labels, idx)
    grad = np.zeros_like(logits)
    y = labels[idx]
    g = prob[idx].copy()
    g[np.arange(len(idx)), y] -= 1.0
    clipped = prob[idx, y] < EPS
    g[clipped] = 0.0
    grad[idx] = g / len(idx)
    return loss, grad


# ----------------------------------------------------------------- parameters


class ParameterSet:
    """Named float64 parameters with same-shaped gradient buffers."""

    def __init__(self, values: dict[str, np.ndarray] | None = None):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, v in (values or {}).items():
            self.add(name, v)

    def add(self, name: str, value) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> ParameterSet:
        out = ParameterSet()
        for k, v in self.values.items():
            out.values[k] = v.copy()
            out.grads[k] = self.grads[k].copy()
        return out

    def flat_values(self) -> np.ndarray:
        if not self.values:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.values.values()])

    def flat_grads(self) -> np.ndarray:
        if not self.grads:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.flat_grads()))

    def equal(self, other: ParameterSet) -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self.values[k], other.values[k]) for k in self.values
        )


# ----------------------------------------------------------------- optimizers


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class Optimizer:
    """SGD or Adam; Adam moments live in ``state`` keyed by parameter name."""

    config: OptimizerConfig = field(default_factory=OptimizerConfig)
    state: dict = field(default_factory=dict)
    steps: int = 0

    def step(self, params: ParameterSet) -> ParameterSet:
        cfg = self.config
        for name, g in params.grads.items():
            if not np.isfinite(g).all():
                raise NonFiniteError(f"gradient of {name!r} is not finite")
        self.steps += 1
        lr = cfg.learning_rate
        for name, p in params.values.items():
            g = params.grads[name]
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            if cfg.kind == "sgd":
                p -= lr * g
            elif cfg.kind == "adam":
                m, v = self.state.get(name, (np.zeros_like(p), np.zeros_like(p)))
                m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
                v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
                self.state[name] = (m, v)
                m_hat = m / (1.0 - cfg.beta1 ** self.steps)
                v_hat = v / (1.0 - cfg.beta2 ** self.steps)
                p -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
            else:
                raise ValueError(f"unknown optimizer kind {cfg.kind!r}")
        return params


def optimizer_step(params: ParameterSet, optimizer: Optimizer) -> ParameterSet:
    return optimizer.step(params)


# ------------------------------------------------------------ gradient check


class DifferentiableProgram:
    """Interface: ``forward`` returns the scalar loss, ``backward`` fills ``params.grads``.

    ``backward`` may assume ``forward`` was just called with the same params.
    """

    def forward(self, params: ParameterSet) -> float:
        raise NotImplementedError

    def backward(self, params: ParameterSet) -> None:
        raise NotImplementedError


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    checked_entries: dict[str, int]
    tol: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def grad_check(
    program: DifferentiableProgram,
    params: ParameterSet,
    tol: float = 1e-4,
    h: float = 1e-5,
    max_entries: int = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences on sampled entries."""
    rng = np.random.default_rng(seed)
    params.zero_grad()
    program.forward(params)
    program.backward(params)
    analytic = {k: g.copy() for k, g in params.grads.items()}
    errors, counts = {}, {}
    for name, value in params.values.items():
        size = value.size
        picks = np.arange(size) if size <= max_entries else rng.choice(size, max_entries, replace=False)
        flat = value.reshape(-1)
        worst = 0.0
        for j in picks:
            orig = flat[j]
            flat[j] = orig + h
            up = program.forward(params)
            flat[j] = orig - h
            down = program.forward(params)
            flat[j] = orig
            num = (up - down) / (2.0 * h)
            ana = analytic[name].reshape(-1)[j]
            worst = max(worst, abs(ana - num) / max(1.0, abs(ana), abs(num)))
        errors[name] = worst
        counts[name] = len(picks)
    return GradCheckReport(max_rel_error=errors, checked_entries=counts, tol=tol)
