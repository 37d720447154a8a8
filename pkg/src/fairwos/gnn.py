"""GCN/GIN node classifiers with an explicit self/neighbor weight split.

Every layer computes ``h' = act(h @ W_a + (N @ h) @ W_n + b)``. For the GCN
backbone ``N`` is the off-diagonal part of the symmetrically normalized
adjacency; for GIN it is the raw 0/1 adjacency (plain neighbor sum). A sigmoid
head on the last layer gives P(y=1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import nn
from .graph import Graph, TrainingGraph, as_training, normalize_adjacency

BACKBONES = ("gcn", "gin")


@dataclass
class GnnParams:
    params: nn.ParameterSet
    backbone: str = "gcn"
    num_layers: int = 1
    activation: str = "relu"
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def W_a(self, k: int) -> np.ndarray:
        return self.params[f"layer{k}.W_a"]

    def W_n(self, k: int) -> np.ndarray:
        return self.params[f"layer{k}.W_n"]

    @property
    def hidden_dim(self) -> int:
        return self.W_a(self.num_layers - 1).shape[1]

    def copy(self) -> GnnParams:
        return GnnParams(self.params.copy(), self.backbone, self.num_layers,
                         self.activation, self.seed, dict(self.meta))

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone,
            "num_layers": self.num_layers,
            "activation": self.activation,
            "seed": self.seed,
            "order": self.params.names(),
            "params": {
                k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                for k, v in self.params.values.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> GnnParams:
        ps = nn.ParameterSet()
        for k in d.get("order", d["params"]):
            item = d["params"][k]
            ps.add(k, np.array(item["values"], dtype=np.float64).reshape(item["shape"]))
        return cls(ps, d["backbone"], int(d["num_layers"]), d["activation"], int(d["seed"]))


def init_gnn(
    in_dim: int,
    hidden: int = 16,
    num_layers: int = 1,
    backbone: str = "gcn",
    seed: int = 0,
    activation: str = "relu",
) -> GnnParams:
    if backbone not in BACKBONES:
        raise ValueError(f"unknown backbone {backbone!r}")
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    rng = np.random.default_rng(seed)
    ps = nn.ParameterSet()
    d = in_dim
    for k in range(num_layers):
        ps.add(f"layer{k}.W_a", nn.glorot_uniform(rng, d, hidden))
        ps.add(f"layer{k}.W_n", nn.glorot_uniform(rng, d, hidden))
        ps.add(f"layer{k}.b", np.zeros(hidden))
        d = hidden
    ps.add("head.w", nn.glorot_uniform(rng, d, 1).ravel())
    ps.add("head.b", np.zeros(1))
    return GnnParams(ps, backbone, num_layers, activation, seed)


def neighbor_operator(g: Graph | TrainingGraph, backbone: str = "gcn") -> sp.csr_matrix:
    """Neighbor aggregation matrix for ``backbone``; never contains the diagonal."""
    tg = as_training(g)
    if backbone == "gcn":
        a = normalize_adjacency(tg).tolil()
        a.setdiag(0.0)
        a = a.tocsr()
        a.eliminate_zeros()
        return a
    if backbone == "gin":
        return tg.adjacency()
    raise ValueError(f"unknown backbone {backbone!r}")


@dataclass
class ForwardCache:
    inputs: list
    nbr_inputs: list
    pre: list
    outputs: list
    logits: np.ndarray
    prob: np.ndarray

    @property
    def h(self) -> np.ndarray:
        return self.outputs[-1]


def forward_with_cache(x0: np.ndarray, nbr, model: GnnParams) -> ForwardCache:
    x0 = nn.check_finite(x0, "x0")
    h = x0
    inputs, nbr_inputs, pres, outs = [], [], [], []
    for k in range(model.num_layers):
        wa, wn = model.W_a(k), model.W_n(k)
        if h.shape[1] != wa.shape[0]:
            raise nn.DimensionError(f"layer {k} expects width {wa.shape[0]}, got {h.shape[1]}")
        nh = np.asarray(nbr @ h)
        pre = h @ wa + nh @ wn + model.params[f"layer{k}.b"]
        out = nn.activation(pre, model.activation)
        inputs.append(h)
        nbr_inputs.append(nh)
        pres.append(pre)
        outs.append(out)
        h = out
    w = model.params["head.w"]
    if h.shape[1] != w.shape[0]:
        raise nn.DimensionError(f"head expects width {w.shape[0]}, got {h.shape[1]}")
    logits = h @ w + model.params["head.b"][0]
    prob = nn.activation(logits, "sigmoid")
    return ForwardCache(inputs, nbr_inputs, pres, outs, logits, prob)


def gnn_forward(x0: np.ndarray, adj, params: GnnParams) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(embeddings, P(y=1))``; ``adj`` is the neighbor operator."""
    cache = forward_with_cache(x0, adj, params)
    return cache.h, cache.prob


def backward_from_cache(
    cache: ForwardCache,
    nbr,
    model: GnnParams,
    d_logits: np.ndarray | None = None,
    d_h: np.ndarray | None = None,
) -> None:
    """Accumulate parameter gradients into ``model.params.grads``."""
    grads = model.params.grads
    h_last = cache.h
    dh = np.zeros_like(h_last) if d_h is None else d_h.copy()
    if d_logits is not None:
        grads["head.w"] += h_last.T @ d_logits
        grads["head.b"] += d_logits.sum()
        dh += np.outer(d_logits, model.params["head.w"])
    nbr_t = nbr.T
    for k in reversed(range(model.num_layers)):
        dpre = nn.activation_backward(dh, cache.pre[k], cache.outputs[k], model.activation)
        grads[f"layer{k}.W_a"] += cache.inputs[k].T @ dpre
        grads[f"layer{k}.W_n"] += cache.nbr_inputs[k].T @ dpre
        grads[f"layer{k}.b"] += dpre.sum(axis=0)
        if k > 0:
            dh = dpre @ model.W_a(k).T + np.asarray(nbr_t @ (dpre @ model.W_n(k).T))


class UtilityProgram(nn.DifferentiableProgram):
    """Binary cross-entropy of the GNN head over a node mask."""

    def __init__(self, x0, nbr, model: GnnParams, labels, mask):
        self.x0, self.nbr, self.model = x0, nbr, model
        self.labels = np.where(np.asarray(labels) < 0, 0, labels)
        self.mask = mask

    def forward(self, params: nn.ParameterSet) -> float:
        self.model.params = params
        self.cache = forward_with_cache(self.x0, self.nbr, self.model)
        loss, self.d_logits = nn.binary_ce_with_logits(self.cache.logits, self.labels, self.mask)
        return loss

    def backward(self, params: nn.ParameterSet) -> None:
        self.model.params = params
        backward_from_cache(self.cache, self.nbr, self.model, d_logits=self.d_logits)


def predict_labels(prob: np.ndarray) -> np.ndarray:
    """Threshold at 0.5; a tie goes to class 1."""
    return (prob >= 0.5).astype(np.int64)


def accuracy(prob: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    return float((predict_labels(prob)[mask] == labels[mask]).mean()) if mask.any() else 0.0


def pretrain_classifier(
    g: Graph | TrainingGraph,
    x0: np.ndarray,
    seed: int = 0,
    epochs: int = 1000,
    backbone: str = "gcn",
    hidden: int = 16,
    num_layers: int = 1,
    learning_rate: float = 0.001,
    weight_decay: float = 0.0,
) -> GnnParams:
    """Minimize the utility loss on labeled training nodes, keeping the
    best-validation-accuracy parameters."""
    tg = as_training(g)
    train = tg.labeled_train
    if not train.any():
        raise ValueError("no labeled nodes in the training split")
    x0 = np.asarray(x0, dtype=np.float64)
    model = init_gnn(x0.shape[1], hidden, num_layers, backbone, seed)
    if epochs == 0:
        model.meta["untrained"] = True
        return model
    nbr = neighbor_operator(tg, backbone)
    val = tg.labeled("val")
    select = val if val.any() else train
    prog = UtilityProgram(x0, nbr, model, tg.labels, train)
    opt = nn.Optimizer(nn.OptimizerConfig("adam", learning_rate, weight_decay=weight_decay))
    params = model.params
    best, best_acc, best_epoch = params.copy(), -1.0, -1
    for epoch in range(epochs):
        params.zero_grad()
        prog.forward(params)
        prog.backward(params)
        opt.step(params)
        _, prob = gnn_forward(x0, nbr, model)
        acc = accuracy(prob, tg.labels, select)
        if acc > best_acc:
            best, best_acc, best_epoch = params.copy(), acc, epoch
    model.params = best
    model.meta.update(best_val_acc=best_acc, best_epoch=best_epoch, epochs=epochs)
    return model


def pseudo_labels(g: Graph | TrainingGraph, x0: np.ndarray, params: GnnParams) -> np.ndarray:
    """Ground truth on labeled training nodes, thresholded predictions elsewhere."""
    tg = as_training(g)
    _, prob = gnn_forward(x0, neighbor_operator(tg, params.backbone), params)
    out = predict_labels(prob)
    known = tg.labeled_train
    out[known] = tg.labels[known]
    return out
