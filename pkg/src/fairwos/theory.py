"""Empirical checks of the embedding-difference bound and the gradient-norm convergence bound."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .gnn import GnnParams

PASS_SLACK = 1e-9


@dataclass(frozen=True)
class TrialResult:
    observed: float
    bound: float
    info: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.observed <= self.bound + PASS_SLACK

    @property
    def margin(self) -> float:
        return self.bound - self.observed

    def to_dict(self) -> dict:
        return {"observed": self.observed, "bound": self.bound, "passed": self.passed,
                "margin": self.margin, **self.info}


@dataclass
class BoundCheckReport:
    """Per-trial outcomes plus an overall status.

    ``status`` is "pass", "fail", "assumption violated" (the step size is too
    large for the estimated smoothness constant) or "informational" (the check
    ran on a trace whose objective was not stationary).
    """

    name: str
    trials: list
    status: str = ""
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.status:
            self.status = "pass" if all(t.passed for t in self.trials) else "fail"

    @property
    def pass_rate(self) -> float:
        return sum(t.passed for t in self.trials) / len(self.trials) if self.trials else 0.0

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_dict(self) -> dict:
        return {"name": self.name, "status": self.status, "pass_rate": self.pass_rate,
                "details": self.details, "trials": [t.to_dict() for t in self.trials]}


# ------------------------------------------------------------------ embedding-difference bound


def layer_norm_product(model: GnnParams, p=2) -> float:
    """prod_k ||W_a^k||_p as an operator on row vectors (``z @ W_a``), i.e. the
    induced norm of the transpose."""
    out = 1.0
    for k in range(model.num_layers):
        out *= float(np.linalg.norm(model.W_a(k).T, ord=p))
    return out


def node_embedding(model: GnnParams, x0: np.ndarray, nbr, node: int, row=None) -> np.ndarray:
    """Final embedding of ``node`` when its own input row is replaced by ``row``.

    Neighbor aggregates are taken from the unperturbed forward pass, so only the
    self path carries the change (the neighborhood is held fixed).
    """
    h = np.asarray(x0, dtype=np.float64)
    z = h[node] if row is None else np.asarray(row, dtype=np.float64)
    for k in range(model.num_layers):
        nh = np.asarray(nbr[node] @ h).ravel()
        pre = z @ model.W_a(k) + nh @ model.W_n(k) + model.params[f"layer{k}.b"]
        z = nn.activation(pre, model.activation)
        full = h @ model.W_a(k) + np.asarray(nbr @ h) @ model.W_n(k) + model.params[f"layer{k}.b"]
        h = nn.activation(full, model.activation)
    return z


def check_counterfactual_bound(model: GnnParams, x0: np.ndarray, nbr, trials: int = 100,
                               p=2, seed: int = 0, magnitude: float = 1.0) -> BoundCheckReport:
    """Perturb one attribute of one node by ``±magnitude`` and compare the change
    in that node's final embedding with ``magnitude * prod_k ||W_a^k||_p``.

    The activation must be 1-Lipschitz (relu, identity) or better (sigmoid).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    n, d = x0.shape
    rng = np.random.default_rng(seed)
    prod = layer_norm_product(model, p)
    out = []
    for _ in range(trials):
        u = int(rng.integers(n))
        t = int(rng.integers(d))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        row = x0[u].copy()
        row[t] += sign * magnitude
        base = node_embedding(model, x0, nbr, u)
        pert = node_embedding(model, x0, nbr, u, row)
        observed = float(np.linalg.norm(pert - base, ord=p))
        bound = abs(magnitude) * prod
        out.append(TrialResult(observed, bound, {"node": u, "column": t, "sign": sign}))
    return BoundCheckReport("embedding_difference", out,
                            details={"p": p, "norm_product": prod, "magnitude": magnitude})


# ------------------------------------------------------------------ convergence bound


def secant_smoothness(records) -> float:
    """max ||g_{k+1} - g_k|| / ||θ_{k+1} - θ_k|| over recorded steps."""
    ratios = [r["grad_delta_norm"] / r["step_norm"] for r in records if r["step_norm"] > 0]
    if not ratios:
        raise ValueError("no nonzero steps in trace; cannot estimate smoothness")
    return float(max(ratios))


def check_convergence_bound(trace, lr: float | None = None, L_estimate: float | None = None) -> BoundCheckReport:
    """Check ``min_k ||g_k||^2 <= (L_0 - min_k L_k) / (M T)`` for every prefix T.

    ``trace`` is the dict returned by the trainer (or a bare list of records)
    with per-epoch ``loss_objective``, ``loss_objective_after``, ``grad_norm``,
    ``step_norm`` and ``grad_delta_norm``. ``M = lr - L lr^2 / 2``.
    """
    meta = trace if isinstance(trace, dict) else {}
    records = meta.get("records", trace) if isinstance(trace, dict) else list(trace)
    if not records:
        raise ValueError("empty training trace")
    lr = meta.get("learning_rate") if lr is None else lr
    if lr is None or lr <= 0:
        raise ValueError("a positive learning rate is required")
    L = secant_smoothness(records) if L_estimate is None else float(L_estimate)
    if L <= 0:
        raise ValueError("L_estimate must be positive")
    M = lr - L * lr * lr / 2.0
    g2 = np.array([r["grad_norm"] ** 2 for r in records])
    losses = np.array([records[0]["loss_objective"]] + [r["loss_objective_after"] for r in records])
    running_min = np.minimum.accumulate(g2)
    monotone = bool(np.all(np.diff(running_min) <= 0.0))
    trials = []
    for T in range(1, len(records) + 1):
        lstar = float(losses[: T + 1].min())
        bound = (float(losses[0]) - lstar) / (M * T) if M > 0 else float("inf")
        trials.append(TrialResult(float(running_min[T - 1]), bound, {"T": T}))
    details = {"L_estimate": L, "M": M, "learning_rate": lr, "running_min_nonincreasing": monotone,
               "T": len(records)}
    status = ""
    if lr >= 2.0 / L:
        status = "assumption violated"
    elif (not meta.get("cf_frozen", True) or not meta.get("lambda_frozen", True)
          or meta.get("optimizer", "sgd") != "sgd"):
        # rebuilt counterfactuals, moving λ or adaptive steps: the objective is not
        # a fixed function under plain gradient descent, so the bound is only indicative
        status = "informational"
    elif not monotone:
        status = "fail"
    return BoundCheckReport("convergence", trials, status, details)


def quadratic_toy_trace(theta0: float = 1.0, lr: float = 0.1, steps: int = 50) -> dict:
    """Gradient descent on ``θ^2`` recorded in the trainer's trace format."""
    theta = float(theta0)
    records = []
    for epoch in range(1, steps + 1):
        g = 2.0 * theta
        nxt = theta - lr * g
        records.append({
            "epoch": epoch,
            "loss_objective": theta * theta,
            "loss_objective_after": nxt * nxt,
            "grad_norm": abs(g),
            "step_norm": abs(nxt - theta),
            "grad_delta_norm": abs(2.0 * nxt - g),
        })
        theta = nxt
    return {"records": records, "cf_frozen": True, "lambda_frozen": True, "optimizer": "sgd",
            "learning_rate": lr}
