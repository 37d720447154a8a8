"""Graph data model, CSV ingestion, synthetic biased graphs and adjacency normalization."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

SPLITS = ("train", "val", "test")
MISSING = -1


class GraphFormatError(ValueError):
    """Raised for malformed rows in a nodes/edges file."""


class GraphValidationError(ValueError):
    """Raised when graph contents violate the data model."""


def _canonical_edges(edges, num_nodes: int) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if arr.size and (arr.min() < 0 or arr.max() >= num_nodes):
        bad = arr[(arr < 0).any(axis=1) | (arr >= num_nodes).any(axis=1)][0]
        raise GraphValidationError(
            f"edge ({bad[0]}, {bad[1]}) references a node outside [0, {num_nodes})"
        )
    arr = arr[arr[:, 0] != arr[:, 1]]
    arr = np.sort(arr, axis=1)
    if arr.size:
        arr = np.unique(arr, axis=0)
    return arr.reshape(-1, 2)


@dataclass(frozen=True)
class TrainingGraph:
    """Projection of :class:`Graph` handed to training code; carries no sensitive column."""

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def mask(self, name: str) -> np.ndarray:
        return self.split == name

    @property
    def labeled_train(self) -> np.ndarray:
        """Boolean mask of V_L: training nodes with a label."""
        return (self.split == "train") & (self.labels != MISSING)

    def labeled(self, name: str) -> np.ndarray:
        return (self.split == name) & (self.labels != MISSING)

    def adjacency(self) -> sp.csr_matrix:
        """Raw symmetric 0/1 adjacency without self-loops."""
        n = self.num_nodes
        if len(self.edges) == 0:
            return sp.csr_matrix((n, n))
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


@dataclass(frozen=True)
class Graph:
    """Attributed undirected graph with labels, a train/val/test split and an
    optional evaluation-only sensitive column.

    ``labels`` uses ``MISSING`` (-1) for unlabeled nodes. Edges are stored once
    per unordered pair as ``(min, max)`` rows.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    sensitive_eval: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = int(self.num_nodes)
        object.__setattr__(self, "num_nodes", n)
        object.__setattr__(self, "edges", _canonical_edges(self.edges, n))
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != n:
            feats = feats.reshape(n, -1)
        object.__setattr__(self, "features", feats)
        labels = np.asarray(self.labels, dtype=np.int64)
        split = np.asarray(self.split, dtype=object).astype(str)
        if labels.shape != (n,) or split.shape != (n,):
            raise GraphValidationError("labels and split must have one entry per node")
        if not np.isin(labels, (MISSING, 0, 1)).all():
            raise GraphValidationError("labels must be 0, 1 or missing")
        bad = ~np.isin(split, SPLITS)
        if bad.any():
            raise GraphValidationError(f"unknown split value {split[bad][0]!r}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "split", split)
        if self.sensitive_eval is not None:
            s = np.asarray(self.sensitive_eval, dtype=np.int64)
            if s.shape != (n,) or not np.isin(s, (MISSING, 0, 1)).all():
                raise GraphValidationError("sensitive column must be 0, 1 or missing per node")
            object.__setattr__(self, "sensitive_eval", s)
        for name in ("edges", "features", "labels", "split", "sensitive_eval"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def training_view(self) -> TrainingGraph:
        return TrainingGraph(
            num_nodes=self.num_nodes,
            edges=self.edges,
            features=self.features,
            labels=self.labels,
            split=self.split,
        )

    def with_features(self, features: np.ndarray) -> Graph:
        return replace(self, features=features)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.num_nodes).encode())
        for name in ("edges", "features", "labels"):
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        h.update("|".join(self.split.tolist()).encode())
        if self.sensitive_eval is not None:
            h.update(self.sensitive_eval.tobytes())
        return h.hexdigest()


def as_training(g: Graph | TrainingGraph) -> TrainingGraph:
    return g.training_view() if isinstance(g, Graph) else g


# --------------------------------------------------------------------------- I/O


def _parse_int(text: str, path: Path, lineno: int, column: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise GraphFormatError(f"{path}:{lineno}: bad integer {text!r} in column {column!r}") from None


def load_graph_csv(nodes_path, edges_path) -> Graph:
    """Read ``nodes.csv`` / ``edges.csv`` into a :class:`Graph`.

    Directed or repeated edge rows are merged into a single undirected edge.
    """
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    with nodes_path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise GraphFormatError(f"{nodes_path}:1: empty file") from None
        header = [h.strip() for h in header]
        if not header or header[0] != "id" or "label" not in header or "split" not in header:
            raise GraphFormatError(f"{nodes_path}:1: header must be id,feat_*,label,split[,sensitive]")
        feat_cols = [i for i, h in enumerate(header) if h.startswith("feat_")]
        i_label, i_split = header.index("label"), header.index("split")
        i_sens = header.index("sensitive") if "sensitive" in header else None
        ids, feats, labels, splits, sens = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise GraphFormatError(
                    f"{nodes_path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            ids.append(_parse_int(row[0], nodes_path, lineno, "id"))
            try:
                feats.append([float(row[i]) for i in feat_cols])
            except ValueError:
                raise GraphFormatError(f"{nodes_path}:{lineno}: non-numeric feature value") from None
            lab = row[i_label].strip()
            if lab not in ("", "0", "1"):
                raise GraphFormatError(f"{nodes_path}:{lineno}: label must be 0, 1 or empty, got {lab!r}")
            labels.append(MISSING if lab == "" else int(lab))
            spl = row[i_split].strip()
            if spl not in SPLITS:
                raise GraphValidationError(f"{nodes_path}:{lineno}: split {spl!r} not in {SPLITS}")
            splits.append(spl)
            if i_sens is not None:
                sv = row[i_sens].strip()
                if sv not in ("", "0", "1"):
                    raise GraphFormatError(f"{nodes_path}:{lineno}: sensitive must be 0, 1 or empty")
                sens.append(MISSING if sv == "" else int(sv))
    n = len(ids)
    if sorted(ids) != list(range(n)):
        raise GraphValidationError(f"{nodes_path}: node ids must be contiguous 0..{n - 1}")
    order = np.argsort(ids)

    edges = []
    with edges_path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["src", "dst"]:
            raise GraphFormatError(f"{edges_path}:1: header must be src,dst")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise GraphFormatError(f"{edges_path}:{lineno}: expected 2 fields, got {len(row)}")
            u = _parse_int(row[0].strip(), edges_path, lineno, "src")
            v = _parse_int(row[1].strip(), edges_path, lineno, "dst")
            if not (0 <= u < n and 0 <= v < n):
                raise GraphValidationError(f"{edges_path}:{lineno}: edge ({u},{v}) references unknown node")
            edges.append((u, v))

    features = np.array(feats, dtype=np.float64).reshape(n, len(feat_cols))[order]
    return Graph(
        num_nodes=n,
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
        features=features,
        labels=np.array(labels, dtype=np.int64)[order],
        split=np.array(splits, dtype=object)[order],
        sensitive_eval=np.array(sens, dtype=np.int64)[order] if i_sens is not None else None,
    )


def save_graph_csv(g: Graph, nodes_path, edges_path) -> None:
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    header = ["id", *[f"feat_{j}" for j in range(g.num_features)], "label", "split"]
    if g.sensitive_eval is not None:
        header.append("sensitive")
    with nodes_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for v in range(g.num_nodes):
            row = [v, *(repr(float(x)) for x in g.features[v])]
            row.append("" if g.labels[v] == MISSING else int(g.labels[v]))
            row.append(g.split[v])
            if g.sensitive_eval is not None:
                s = g.sensitive_eval[v]
                row.append("" if s == MISSING else int(s))
            w.writerow(row)
    with edges_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst"])
        w.writerows(g.edges.tolist())


# --------------------------------------------------------------------- adjacency


def normalize_adjacency(g: Graph | TrainingGraph) -> sp.csr_matrix:
    """Symmetric GCN normalization ``D^-1/2 (A + I) D^-1/2``.

    Each off-diagonal value is computed once per unordered edge and written to
    both (i, j) and (j, i), so the result is exactly symmetric.
    """
    n = g.num_nodes
    if n == 0:
        return sp.csr_matrix((0, 0))
    e = g.edges
    deg = np.ones(n)
    np.add.at(deg, e[:, 0], 1.0)
    np.add.at(deg, e[:, 1], 1.0)
    lo, hi = e[:, 0], e[:, 1]
    off = 1.0 / np.sqrt(deg[lo] * deg[hi])
    rows = np.concatenate([np.arange(n), lo, hi])
    cols = np.concatenate([np.arange(n), hi, lo])
    vals = np.concatenate([1.0 / deg, off, off])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


# ------------------------------------------------------------------ preprocessing


@dataclass(frozen=True)
class FeatureScaler:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def fit_scaler(g: Graph | TrainingGraph) -> FeatureScaler:
    """Z-score statistics from training-split rows; zero-variance columns keep scale 1."""
    train = g.split == "train"
    rows = g.features[train] if train.any() else g.features
    mean = rows.mean(axis=0) if len(rows) else np.zeros(g.num_features)
    std = rows.std(axis=0) if len(rows) else np.ones(g.num_features)
    std = np.where(std > 1e-12, std, 1.0)
    return FeatureScaler(mean=mean, std=std)


# --------------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    num_nodes: int = 2000
    intra_group_edge_prob: float = 0.003
    inter_group_edge_prob: float = 0.00045
    num_features: int = 12
    sensitive_leak_dims: int = 3
    label_bias: float = 0.15
    seed: int = 0
    leak_strength: float = 1.0
    signal_dims: int = 4
    signal_scale: float = 1.5

    def __post_init__(self):
        for name in ("intra_group_edge_prob", "inter_group_edge_prob", "label_bias"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.num_nodes < 0:
            raise ValueError("num_nodes must be nonnegative")
        if not 0 <= self.sensitive_leak_dims <= self.num_features:
            raise ValueError("sensitive_leak_dims must be between 0 and num_features")
        if self.signal_dims < 0:
            raise ValueError("signal_dims must be nonnegative")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _assign_split(n: int, rng: np.random.Generator) -> np.ndarray:
    perm = rng.permutation(n)
    n_train, n_val = n // 2, n // 4
    split = np.empty(n, dtype=object)
    split[perm[:n_train]] = "train"
    split[perm[n_train:n_train + n_val]] = "val"
    split[perm[n_train + n_val:]] = "test"
    return split


def generate_synthetic(spec: SyntheticSpec) -> Graph:
    """Sample a graph whose structure, features and labels all correlate with a
    hidden binary group.

    Edges follow a two-block SBM keyed to the group. The first
    ``sensitive_leak_dims`` features are shifted by ``±leak_strength`` according
    to the group; the next ``signal_dims`` (taken from the remaining columns)
    drive the label through a logistic score, and ``label_bias`` mixes the
    group bit directly into the label probability.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.num_nodes
    s = np.zeros(n, dtype=np.int64)
    s[rng.permutation(n)[: n // 2]] = 1

    iu, ju = np.triu_indices(n, k=1)
    same = s[iu] == s[ju]
    prob = np.where(same, spec.intra_group_edge_prob, spec.inter_group_edge_prob)
    keep = rng.random(len(iu)) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    x = rng.standard_normal((n, spec.num_features))
    sign = 2.0 * s - 1.0
    leak = spec.sensitive_leak_dims
    x[:, :leak] += spec.leak_strength * sign[:, None]

    free = spec.num_features - leak
    k = min(spec.signal_dims, free)
    if k > 0:
        beta = rng.standard_normal(k)
        beta /= np.linalg.norm(beta)
        score = x[:, leak:leak + k] @ beta
    else:
        score = np.zeros(n)
    p_signal = 1.0 / (1.0 + np.exp(-spec.signal_scale * score))
    p = (1.0 - spec.label_bias) * p_signal + spec.label_bias * s
    labels = (rng.random(n) < p).astype(np.int64)

    return Graph(
        num_nodes=n,
        edges=edges,
        features=x,
        labels=labels,
        split=_assign_split(n, rng),
        sensitive_eval=s,
    )


def graph_summary(g: Graph) -> dict:
    n, m = g.num_nodes, len(g.edges)
    return {
        "nodes": n,
        "edges": m,
        "attributes": g.num_features,
        "average_degree": (2.0 * m / n) if n else 0.0,
    }
