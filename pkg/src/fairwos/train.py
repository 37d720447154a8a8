"""Fairness objective, alternating θ/λ updates and the end-to-end trainer."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import nn
from .counterfactual import CfIndex, find_counterfactuals, snapshot_id
from .gnn import (
    GnnParams,
    backward_from_cache,
    forward_with_cache,
    gnn_forward,
    neighbor_operator,
    predict_labels,
    pretrain_classifier,
    pseudo_labels,
)
from .graph import FeatureScaler, Graph, TrainingGraph, fit_scaler
from .lambda_solver import LambdaVec, solve_lambda
from .metrics import FairnessReport, fairness_metrics
from .pseudo import (
    EncoderModel,
    PseudoAttrs,
    binarize_columns,
    encoder_embed,
    extract_pseudo_attrs,
    pretrain_encoder,
)

ALPHA_GRID_MAIN = (0.01, 0.05, 1.0, 2.0, 5.0)
ALPHA_GRID_SENSITIVITY = (0.01, 0.02, 0.04, 0.08)
K_GRID_SENSITIVITY = (1, 2, 3, 4)
K_GRID_MAIN = (1, 2, 5, 10, 20)
ENCODER_DIM_GRID = (2, 8, 16, 32)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    K: int = 1
    finetune_epochs: int = 15
    pretrain_epochs: int = 1000
    learning_rate: float = 0.001
    finetune_lr: float | None = 0.01  # None reuses learning_rate
    patience: int = 5
    seed: int = 0
    backbone: str = "gcn"
    encoder_dim: int = 16
    hidden: int = 16
    num_layers: int = 1
    weight_decay: float = 0.0
    finetune_optimizer: str = "adam"
    freeze_counterfactuals: bool = False
    disable_encoder: bool = False
    disable_fairness: bool = False
    disable_weight_update: bool = False
    selection: str = "composite"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.backbone not in ("gcn", "gin"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.selection not in ("composite", "last"):
            raise ValueError(f"unknown selection rule {self.selection!r}")

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.disable_fairness else self.alpha

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def pretrain_key(self) -> tuple:
        return (self.seed, self.pretrain_epochs, self.learning_rate, self.encoder_dim,
                self.disable_encoder, self.backbone, self.hidden, self.num_layers, self.weight_decay)


# ------------------------------------------------------------------ disparity


@dataclass
class DisparityVec:
    values: np.ndarray
    active: np.ndarray
    node_counts: np.ndarray
    shortfall_nodes: np.ndarray


class DisparityTerms:
    """Per-column mean (over query nodes) of the per-node mean squared distance
    to the available counterfactuals. Counterfactual embeddings are passed in
    separately so they can be held constant."""

    def __init__(self, cf: CfIndex, nodes, columns=None):
        nodes = np.asarray(nodes)
        if nodes.dtype != bool:
            m = np.zeros(cf.num_nodes, dtype=bool)
            m[nodes] = True
            nodes = m
        cols = range(cf.num_columns) if columns is None else columns
        self.cf = cf
        self.num_columns = cf.num_columns
        self.terms = {}
        for i in cols:
            counts = cf.counts[:, i]
            sel = np.flatnonzero(nodes & (counts > 0))
            if not len(sel):
                continue
            ids = cf.ids[sel, i, :]
            valid = ids >= 0
            weight = 1.0 / (len(sel) * counts[sel])
            shortfall = int((counts[sel] < cf.K).sum())
            self.terms[int(i)] = (sel, np.where(valid, ids, 0), valid, weight, shortfall)

    @property
    def active(self) -> np.ndarray:
        a = np.zeros(self.num_columns, dtype=bool)
        a[list(self.terms)] = True
        return a

    def vector(self, h: np.ndarray, h_cf: np.ndarray | None = None) -> DisparityVec:
        h_cf = h if h_cf is None else h_cf
        vals = np.zeros(self.num_columns)
        counts = np.zeros(self.num_columns, dtype=np.int64)
        short = np.zeros(self.num_columns, dtype=np.int64)
        for i, (sel, ids, valid, weight, sf) in self.terms.items():
            diff = h[sel, None, :] - h_cf[ids]
            sq = np.einsum("nkd,nkd->nk", diff, diff) * valid
            vals[i] = float(weight @ sq.sum(axis=1))
            counts[i] = len(sel)
            short[i] = sf
        return DisparityVec(vals, self.active, counts, short)

    def grad(self, h: np.ndarray, h_cf: np.ndarray, column_weights: np.ndarray) -> np.ndarray:
        """d/dh of sum_i column_weights[i] * D_i with ``h_cf`` held fixed."""
        out = np.zeros_like(h)
        for i, (sel, ids, valid, weight, _) in self.terms.items():
            if column_weights[i] == 0.0:
                continue
            diff = (h[sel, None, :] - h_cf[ids]) * valid[:, :, None]
            out[sel] += (2.0 * column_weights[i] * weight)[:, None] * diff.sum(axis=1)
        return out


def disparity(h: np.ndarray, cf: CfIndex, column: int, nodes=None) -> float:
    """Disparity of one column, with counterfactual embeddings read from ``h``."""
    if snapshot_id(h) != cf.snapshot:
        raise ValueError("counterfactual index was built from a different embedding snapshot")
    nodes = np.ones(cf.num_nodes, dtype=bool) if nodes is None else nodes
    terms = DisparityTerms(cf, nodes, [column])
    return float(terms.vector(h).values[column])


def total_objective(loss_utility: float, d, lam, alpha: float) -> float:
    w = lam.weights if isinstance(lam, LambdaVec) else np.asarray(lam, dtype=np.float64)
    d = d.values if isinstance(d, DisparityVec) else np.asarray(d, dtype=np.float64)
    return float(loss_utility + alpha * (w @ d) + w @ w)


class FairwosProgram(nn.DifferentiableProgram):
    """Utility loss + alpha * sum_i lam_i D_i + ||lam||^2 as a function of θ,
    with the counterfactual embeddings ``h_cf`` frozen."""

    def __init__(self, x0, nbr, model: GnnParams, labels, train_mask, terms: DisparityTerms,
                 h_cf: np.ndarray, lam: LambdaVec, alpha: float):
        self.x0, self.nbr, self.model = x0, nbr, model
        self.labels = np.where(np.asarray(labels) < 0, 0, labels)
        self.mask = train_mask
        self.terms, self.h_cf, self.lam, self.alpha = terms, h_cf, lam, alpha

    def forward(self, params: nn.ParameterSet) -> float:
        self.model.params = params
        cache = forward_with_cache(self.x0, self.nbr, self.model)
        loss_u, d_logits = nn.binary_ce_with_logits(cache.logits, self.labels, self.mask)
        dvec = self.terms.vector(cache.h, self.h_cf)
        self.cache, self.d_logits, self.loss_utility, self.dvec = cache, d_logits, loss_u, dvec
        return total_objective(loss_u, dvec, self.lam, self.alpha)

    def backward(self, params: nn.ParameterSet) -> None:
        self.model.params = params
        d_h = None
        if self.alpha != 0.0:
            d_h = self.terms.grad(self.cache.h, self.h_cf, self.alpha * self.lam.weights)
        backward_from_cache(self.cache, self.nbr, self.model, d_logits=self.d_logits, d_h=d_h)


@dataclass
class FinetuneState:
    model: GnnParams
    optimizer: nn.Optimizer
    x0: np.ndarray
    nbr: object
    labels: np.ndarray
    train_mask: np.ndarray


def update_theta(state: FinetuneState, cf: CfIndex, lam: LambdaVec, alpha: float,
                 h_cf: np.ndarray | None = None, nodes=None) -> dict:
    """One optimizer step on the θ-dependent objective; returns step diagnostics.

    ``h_cf`` defaults to the current embeddings (which must be the snapshot
    ``cf`` was built from); it is held constant during differentiation.
    """
    model = state.model
    if h_cf is None:
        h_cf, _ = gnn_forward(state.x0, state.nbr, model)
        if snapshot_id(h_cf) != cf.snapshot:
            raise ValueError("counterfactual index is stale for the current parameters")
    nodes = state.train_mask if nodes is None else nodes
    terms = DisparityTerms(cf, nodes, np.flatnonzero(lam.active))
    prog = FairwosProgram(state.x0, state.nbr, model, state.labels, state.train_mask,
                          terms, h_cf, lam, alpha)
    params = model.params
    params.zero_grad()
    loss = prog.forward(params)
    loss_u = prog.loss_utility
    prog.backward(params)
    grad_before = params.flat_grads()
    theta_before = params.flat_values()
    state.optimizer.step(params)
    params.zero_grad()
    loss_after = prog.forward(params)
    prog.backward(params)
    grad_after = params.flat_grads()
    params.zero_grad()
    lam_sq = float(lam.weights @ lam.weights)
    return {
        "loss_utility": loss_u,
        "loss_objective": loss - lam_sq,
        "loss_objective_after": loss_after - lam_sq,
        "grad_norm": float(np.linalg.norm(grad_before)),
        "step_norm": float(np.linalg.norm(params.flat_values() - theta_before)),
        "grad_delta_norm": float(np.linalg.norm(grad_after - grad_before)),
        "total_objective": loss,
    }


# ------------------------------------------------------------------ pipeline


def _child_seeds(seed: int) -> tuple[int, int]:
    a, b = np.random.SeedSequence(seed).generate_state(2)
    return int(a), int(b)


@dataclass
class Pretrained:
    scaler: FeatureScaler
    encoder: EncoderModel | None
    attrs: PseudoAttrs
    classifier: GnnParams
    pseudo_labels: np.ndarray
    runtime_s: dict = field(default_factory=dict)

    @property
    def x0(self) -> np.ndarray:
        return self.attrs.values


def _standardized(g: Graph | TrainingGraph, scaler: FeatureScaler) -> TrainingGraph:
    tg = g.training_view() if isinstance(g, Graph) else g
    return replace(tg, features=scaler.transform(tg.features))


def pretrain_stage(g: Graph | TrainingGraph, config: TrainConfig) -> Pretrained:
    """Encoder pretraining, pseudo-attribute extraction and classifier pretraining."""
    tg = g.training_view() if isinstance(g, Graph) else g
    scaler = fit_scaler(tg)
    sg = _standardized(tg, scaler)
    enc_seed, gnn_seed = _child_seeds(config.seed)
    times = {}
    t0 = time.perf_counter()
    if config.disable_encoder:
        encoder = None
        attrs = binarize_columns(sg.features, sg.split == "train")
    else:
        encoder = pretrain_encoder(sg, config.encoder_dim, config.pretrain_epochs, enc_seed,
                                   config.learning_rate, config.weight_decay)
        attrs = extract_pseudo_attrs(sg, encoder)
    times["encoder"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    clf = pretrain_classifier(sg, attrs.values, gnn_seed, config.pretrain_epochs, config.backbone,
                              config.hidden, config.num_layers, config.learning_rate,
                              config.weight_decay)
    plabels = pseudo_labels(sg, attrs.values, clf)
    times["classifier"] = time.perf_counter() - t0
    return Pretrained(scaler, encoder, attrs, clf, plabels, times)


@dataclass
class ModelState:
    config: TrainConfig
    scaler: FeatureScaler
    encoder: EncoderModel | None
    gnn: GnnParams
    lam: LambdaVec
    thresholds: np.ndarray
    selected_epoch: int = 0
    kind: str = "fairwos"


def model_inputs(g: Graph | TrainingGraph, state: ModelState) -> np.ndarray:
    sg = _standardized(g, state.scaler)
    if state.encoder is None:
        return sg.features
    return encoder_embed(sg, state.encoder)


def predict_proba(g: Graph | TrainingGraph, state: ModelState) -> np.ndarray:
    x0 = model_inputs(g, state)
    _, prob = gnn_forward(x0, neighbor_operator(g, state.gnn.backbone), state.gnn)
    return prob


def evaluate(g: Graph, state: ModelState, split: str = "test") -> FairnessReport:
    if g.sensitive_eval is None:
        raise ValueError("graph has no sensitive column to evaluate against")
    y_hat = predict_labels(predict_proba(g, state))
    return fairness_metrics(y_hat, g.labels, g.sensitive_eval, g.split == split, split)


def _val_metrics(g: Graph | TrainingGraph, prob: np.ndarray) -> tuple[float, float, float]:
    y_hat = predict_labels(prob)
    mask = (g.split == "val") & (g.labels >= 0)
    if not mask.any():
        mask = (g.split == "train") & (g.labels >= 0)
    acc = float((y_hat[mask] == g.labels[mask]).mean())
    sens = getattr(g, "sensitive_eval", None)
    if sens is None:
        return acc, 0.0, 0.0
    rep = fairness_metrics(y_hat, g.labels, sens, mask, "val")
    return acc, rep.delta_sp or 0.0, rep.delta_eo or 0.0


def finetune_stage(g: Graph | TrainingGraph, pre: Pretrained, config: TrainConfig):
    """Alternate θ steps (with fresh counterfactuals) and closed-form λ updates.

    Model selection keeps the checkpoint (the pretrained one included) with the
    best ``val_acc - val_dsp``; the sensitive column is read only for that
    score, never by the updates themselves.
    """
    tg = g.training_view() if isinstance(g, Graph) else g
    alpha = config.effective_alpha
    nbr = neighbor_operator(tg, config.backbone)
    model = pre.classifier.copy()
    x0 = pre.x0
    train = tg.split == "train"
    labeled = tg.labeled_train
    active = ~pre.attrs.degenerate
    lam = LambdaVec.uniform(pre.attrs.num_columns, active)
    opt = nn.Optimizer(nn.OptimizerConfig(
        config.finetune_optimizer, config.finetune_lr or config.learning_rate,
        weight_decay=config.weight_decay))
    state = FinetuneState(model, opt, x0, nbr, tg.labels, labeled)

    _, prob = gnn_forward(x0, nbr, model)
    acc, dsp, deo = _val_metrics(g, prob)
    best_score, best_params, best_lam, best_epoch = acc - dsp, model.params.copy(), lam, 0
    trace = []
    since_best = 0
    cf = None
    t0 = time.perf_counter()
    for epoch in range(1, config.finetune_epochs + 1):
        h, _ = gnn_forward(x0, nbr, model)
        if cf is None or not config.freeze_counterfactuals:
            cf = find_counterfactuals(h, pre.attrs.bits, pre.pseudo_labels, config.K,
                                      candidate_pool=train, columns=np.flatnonzero(active))
            h_cf = h
        step = update_theta(state, cf, lam, alpha, h_cf=h_cf, nodes=train)
        h_new, prob = gnn_forward(x0, nbr, model)
        terms = DisparityTerms(cf, train, np.flatnonzero(active))
        dvec = terms.vector(h_new)
        if not config.disable_weight_update and dvec.active.any():
            lam = solve_lambda(dvec.values, alpha, active=dvec.active & active)
        acc, dsp, deo = _val_metrics(g, prob)
        rec = {
            "epoch": epoch,
            **step,
            "disparity": dvec.values.tolist(),
            "lambda": lam.weights.tolist(),
            "shortfall_nodes": dvec.shortfall_nodes.tolist(),
            "val_acc": acc,
            "val_dsp": dsp,
            "val_deo": deo,
        }
        trace.append(rec)
        score = acc - dsp
        if config.selection == "last":
            best_params, best_lam, best_epoch = model.params.copy(), lam, epoch
        elif score > best_score:
            best_score, best_params, best_lam, best_epoch = score, model.params.copy(), lam, epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    model.params = best_params
    model.meta["selected_epoch"] = best_epoch
    runtime = dict(pre.runtime_s, finetune=time.perf_counter() - t0)
    ms = ModelState(config, pre.scaler, pre.encoder, model, best_lam, pre.attrs.thresholds,
                    best_epoch, "fairwos")
    return ms, {"records": trace, "cf_frozen": config.freeze_counterfactuals,
                "lambda_frozen": config.disable_weight_update,
                "optimizer": config.finetune_optimizer,
                "learning_rate": config.finetune_lr or config.learning_rate,
                "alpha": alpha, "selected_epoch": best_epoch, "runtime_s": runtime}


def train_fairwos(g: Graph | TrainingGraph, config: TrainConfig, pretrained: Pretrained | None = None):
    """Full pipeline; pass ``pretrained`` to reuse stage outputs across runs."""
    pre = pretrained if pretrained is not None else pretrain_stage(g, config)
    return finetune_stage(g, pre, config)


def train_vanilla(g: Graph | TrainingGraph, config: TrainConfig) -> ModelState:
    """Backbone GNN on standardized raw features, selected by validation accuracy only."""
    tg = g.training_view() if isinstance(g, Graph) else g
    scaler = fit_scaler(tg)
    sg = _standardized(tg, scaler)
    _, gnn_seed = _child_seeds(config.seed)
    clf = pretrain_classifier(sg, sg.features, gnn_seed, config.pretrain_epochs, config.backbone,
                              config.hidden, config.num_layers, config.learning_rate,
                              config.weight_decay)
    lam = LambdaVec.uniform(1)
    return ModelState(config, scaler, None, clf, lam, np.zeros(0), 0, "vanilla")


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
