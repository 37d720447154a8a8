"""Encoder pretraining and pseudo-sensitive attribute extraction."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .graph import Graph, TrainingGraph, as_training


@dataclass
class EncoderModel:
    """One graph-convolution layer (relu) followed by a softmax head over the two classes.

    The layer uses the same self/neighbor split as the GCN classifier backbone:
    ``relu(X @ W_self + (N @ X) @ W_nbr + b)`` with ``N`` the off-diagonal part
    of the normalized adjacency.
    """

    params: nn.ParameterSet
    dim: int
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def trained(self) -> bool:
        return not self.meta.get("untrained", False)


def init_encoder(num_features: int, dim: int, seed: int, num_classes: int = 2) -> EncoderModel:
    rng = np.random.default_rng(seed)
    params = nn.ParameterSet({
        "enc.W": nn.glorot_uniform(rng, num_features, dim),
        "enc.W_n": nn.glorot_uniform(rng, num_features, dim),
        "enc.b": np.zeros(dim),
        "head.W": nn.glorot_uniform(rng, dim, num_classes),
        "head.b": np.zeros(num_classes),
    })
    return EncoderModel(params=params, dim=dim, seed=seed)


def _propagate(tg: TrainingGraph) -> tuple[np.ndarray, np.ndarray]:
    from .gnn import neighbor_operator

    return tg.features, np.asarray(neighbor_operator(tg, "gcn") @ tg.features)


def _pre_activation(x, nx, params: nn.ParameterSet) -> np.ndarray:
    return x @ params["enc.W"] + nx @ params["enc.W_n"] + params["enc.b"]


class _EncoderProgram(nn.DifferentiableProgram):
    def __init__(self, x: np.ndarray, nx: np.ndarray, labels: np.ndarray, mask: np.ndarray):
        self.x, self.nx = x, nx
        self.labels = labels
        self.mask = mask

    def forward(self, params: nn.ParameterSet) -> float:
        pre = _pre_activation(self.x, self.nx, params)
        z = np.maximum(pre, 0.0)
        logits = z @ params["head.W"] + params["head.b"]
        loss, dlogits = nn.softmax_ce_with_logits(logits, self.labels, self.mask)
        self._cache = (pre, z, logits, dlogits)
        return loss

    def backward(self, params: nn.ParameterSet) -> None:
        pre, z, _, dlogits = self._cache
        params.grads["head.W"] += z.T @ dlogits
        params.grads["head.b"] += dlogits.sum(axis=0)
        dpre = (dlogits @ params["head.W"].T) * (pre > 0)
        params.grads["enc.W"] += self.x.T @ dpre
        params.grads["enc.W_n"] += self.nx.T @ dpre
        params.grads["enc.b"] += dpre.sum(axis=0)

    def logits(self, params: nn.ParameterSet) -> np.ndarray:
        z = np.maximum(_pre_activation(self.x, self.nx, params), 0.0)
        return z @ params["head.W"] + params["head.b"]


def _accuracy(pred: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    return float((pred[mask] == labels[mask]).mean()) if mask.any() else 0.0


def pretrain_encoder(
    g: Graph | TrainingGraph,
    dim: int = 16,
    epochs: int = 1000,
    seed: int = 0,
    learning_rate: float = 0.001,
    weight_decay: float = 0.0,
) -> EncoderModel:
    """Fit encoder + softmax head on labeled training nodes, keeping the
    parameters with the best validation accuracy."""
    tg = as_training(g)
    if dim < 1:
        raise ValueError("encoder dim must be >= 1")
    train = tg.labeled_train
    if not train.any():
        raise ValueError("no labeled nodes in the training split")
    model = init_encoder(tg.num_features, dim, seed)
    if epochs == 0:
        model.meta["untrained"] = True
        return model
    val = tg.labeled("val")
    select = val if val.any() else train
    labels = np.where(tg.labels < 0, 0, tg.labels)
    prog = _EncoderProgram(*_propagate(tg), labels, train)
    opt = nn.Optimizer(nn.OptimizerConfig("adam", learning_rate, weight_decay=weight_decay))
    params = model.params
    best, best_acc, best_epoch = params.copy(), -1.0, -1
    for epoch in range(epochs):
        params.zero_grad()
        prog.forward(params)
        prog.backward(params)
        opt.step(params)
        acc = _accuracy(prog.logits(params).argmax(axis=1), labels, select)
        if acc > best_acc:
            best, best_acc, best_epoch = params.copy(), acc, epoch
    model.params = best
    model.meta.update(best_val_acc=best_acc, best_epoch=best_epoch, epochs=epochs)
    return model


def encoder_embed(g: Graph | TrainingGraph, encoder: EncoderModel) -> np.ndarray:
    tg = as_training(g)
    return np.maximum(_pre_activation(*_propagate(tg), encoder.params), 0.0)


def encoder_predict(g: Graph | TrainingGraph, encoder: EncoderModel) -> np.ndarray:
    tg = as_training(g)
    z = encoder_embed(tg, encoder)
    p = encoder.params
    return nn.activation(z @ p["head.W"] + p["head.b"], "softmax-rows")


@dataclass(frozen=True)
class PseudoAttrs:
    values: np.ndarray
    thresholds: np.ndarray
    bits: np.ndarray
    degenerate: np.ndarray

    @property
    def num_columns(self) -> int:
        return self.values.shape[1]

    @property
    def active_columns(self) -> np.ndarray:
        return np.flatnonzero(~self.degenerate)

    def equal(self, other: PseudoAttrs) -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("values", "thresholds", "bits", "degenerate")
        )


def binarize_columns(values: np.ndarray, train_mask: np.ndarray) -> PseudoAttrs:
    """Split every column at its training-split median.

    A column whose training bits are all equal cannot define a counterfactual
    and is flagged degenerate.
    """
    values = np.array(nn.check_finite(values, "pseudo-attribute values"), dtype=np.float64)
    train_rows = values[train_mask]
    if len(train_rows) == 0:
        raise ValueError("no training rows to compute thresholds from")
    thresholds = np.median(train_rows, axis=0)
    bits = (values > thresholds).astype(np.int8)
    tb = bits[train_mask]
    degenerate = (tb.min(axis=0) == tb.max(axis=0))
    for arr in (values, thresholds, bits, degenerate):
        arr.setflags(write=False)
    return PseudoAttrs(values=values, thresholds=thresholds, bits=bits, degenerate=degenerate)


def extract_pseudo_attrs(g: Graph | TrainingGraph, encoder: EncoderModel) -> PseudoAttrs:
    tg = as_training(g)
    values = encoder_embed(tg, encoder)
    if values.shape[1] != encoder.dim:
        raise nn.DimensionError("encoder output width does not match its declared dim")
    return binarize_columns(values, tg.split == "train")


def export_pseudo_attrs_csv(attrs: PseudoAttrs, path) -> None:
    k = attrs.num_columns
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *[f"x0_{i}" for i in range(k)], *[f"bit_{i}" for i in range(k)]])
        for v in range(attrs.values.shape[0]):
            w.writerow([v, *(repr(float(x)) for x in attrs.values[v]), *attrs.bits[v].tolist()])
