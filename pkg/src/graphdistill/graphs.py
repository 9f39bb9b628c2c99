"""Graph data model, GraphJSON on-disk format, adjacency normalization,
and a stochastic-block-model generator used throughout the test suite."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, GraphParseError, GraphValidationError

# Class centers are standard normal; per-node noise at this scale keeps raw
# features informative but noticeably harder than the graph structure.
_SYNTH_NOISE_SCALE = 3.0


@dataclass(frozen=True)
class Graph:
    """An undirected node-classification graph.

    ``edges`` holds both directions of every undirected edge, deduplicated,
    self-loop free, sorted lexicographically.  All arrays are read-only.
    """

    num_nodes: int
    num_classes: int
    features: np.ndarray  # N x d float64
    edges: np.ndarray  # E x 2 int64, symmetrized
    labels: np.ndarray  # N int64
    train_mask: np.ndarray  # N bool
    val_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self):
        for arr in (self.features, self.edges, self.labels,
                    self.train_mask, self.val_mask, self.test_mask):
            arr.flags.writeable = False

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def validate(self) -> "Graph":
        n = self.num_nodes
        if n <= 0:
            raise GraphValidationError("num_nodes must be positive")
        if self.num_classes < 2:
            raise GraphValidationError("num_classes must be at least 2")
        if self.features.shape[0] != n:
            raise GraphValidationError(f"features has {self.features.shape[0]} rows, expected {n}")
        if not np.all(np.isfinite(self.features)):
            raise GraphValidationError("features contain NaN/Inf")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            raise GraphValidationError(f"edge endpoint out of range [0, {n})")
        if self.edges.size and np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise GraphValidationError("self-loops must not be stored in the edge list")
        if self.labels.shape != (n,):
            raise GraphValidationError(f"labels has shape {self.labels.shape}, expected ({n},)")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise GraphValidationError(f"label out of range [0, {self.num_classes})")
        for name, mask in (("train_mask", self.train_mask), ("val_mask", self.val_mask),
                           ("test_mask", self.test_mask)):
            if mask.shape != (n,) or mask.dtype != np.bool_:
                raise GraphValidationError(f"{name} must be a length-{n} boolean vector")
        overlap = (self.train_mask & self.val_mask) | (self.train_mask & self.test_mask) \
            | (self.val_mask & self.test_mask)
        if overlap.any():
            raise GraphValidationError("train/val/test masks must be pairwise disjoint")
        if not self.train_mask.any():
            raise GraphValidationError("train_mask must select at least one node")
        return self

    @staticmethod
    def create(num_nodes, num_classes, features, edges, labels,
               train_mask, val_mask, test_mask) -> "Graph":
        """Build a validated Graph, symmetrizing and deduplicating the edges."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise GraphValidationError(f"edge endpoint out of range [0, {num_nodes})")
        edges = edges[edges[:, 0] != edges[:, 1]]  # self-loops appear only during normalization
        if edges.size:
            both = np.concatenate([edges, edges[:, ::-1]], axis=0)
            edges = np.unique(both, axis=0)
        else:
            edges = edges.reshape(0, 2)
        g = Graph(
            num_nodes=int(num_nodes),
            num_classes=int(num_classes),
            features=np.asarray(features, dtype=np.float64),
            edges=edges,
            labels=np.asarray(labels, dtype=np.int64),
            train_mask=np.asarray(train_mask, dtype=np.bool_),
            val_mask=np.asarray(val_mask, dtype=np.bool_),
            test_mask=np.asarray(test_mask, dtype=np.bool_),
        )
        return g.validate()


@dataclass(frozen=True)
class NormalizedAdjacency:
    """Symmetrically normalized adjacency with self-loops, in CSR layout."""

    matrix: sp.csr_matrix

    @property
    def row_offsets(self) -> np.ndarray:
        return self.matrix.indptr

    @property
    def col_indices(self) -> np.ndarray:
        return self.matrix.indices

    @property
    def values(self) -> np.ndarray:
        return self.matrix.data


def normalize_adjacency(g: Graph) -> NormalizedAdjacency:
    """D^{-1/2} (A + I) D^{-1/2} with D the degree matrix of A + I."""
    n = g.num_nodes
    if g.edges.size:
        rows = np.concatenate([g.edges[:, 0], np.arange(n)])
        cols = np.concatenate([g.edges[:, 1], np.arange(n)])
    else:
        rows = cols = np.arange(n)
    data = np.ones(rows.shape[0], dtype=np.float64)
    a_hat = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    deg = np.asarray(a_hat.sum(axis=1)).reshape(-1)
    d_inv_sqrt = 1.0 / np.sqrt(deg)  # deg >= 1: every node owns its self-loop
    mat = sp.diags(d_inv_sqrt) @ a_hat @ sp.diags(d_inv_sqrt)
    mat = mat.tocsr()
    mat.sort_indices()
    return NormalizedAdjacency(matrix=mat)


def neighbor_mean_csr(g: Graph) -> sp.csr_matrix:
    """Row-normalized adjacency without self-loops; rows of isolated nodes are zero."""
    n = g.num_nodes
    if not g.edges.size:
        return sp.csr_matrix((n, n), dtype=np.float64)
    a = sp.coo_matrix(
        (np.ones(g.edges.shape[0]), (g.edges[:, 0], g.edges[:, 1])), shape=(n, n)
    ).tocsr()
    deg = np.asarray(a.sum(axis=1)).reshape(-1)
    scale = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0)
    mat = (sp.diags(scale) @ a).tocsr()
    mat.sort_indices()
    return mat


# ---- GraphJSON ---------------------------------------------------------------

_SCHEMA_FIELDS = ("num_nodes", "num_classes", "feature_dim", "features", "edges",
                  "labels", "train_mask", "val_mask", "test_mask")


def _reject_nonfinite(token: str):
    raise GraphParseError(f"non-finite numeral {token!r} is not permitted")


def load_graph(path) -> Graph:
    """Load and validate a GraphJSON file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh, parse_constant=_reject_nonfinite)
    except json.JSONDecodeError as e:
        raise GraphParseError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise GraphParseError("top-level value must be an object")
    for field in _SCHEMA_FIELDS:
        if field not in doc:
            raise GraphParseError(f"missing field {field!r}")

    def expect_int(field):
        if not isinstance(doc[field], int) or isinstance(doc[field], bool):
            raise GraphParseError(f"{field}: expected an integer")
        return doc[field]

    n = expect_int("num_nodes")
    c = expect_int("num_classes")
    d = expect_int("feature_dim")

    feats = doc["features"]
    if not isinstance(feats, list) or len(feats) != n:
        raise GraphParseError(f"features: expected {n} rows")
    for i, row in enumerate(feats):
        if not isinstance(row, list) or len(row) != d:
            raise GraphParseError(f"features[{i}]: expected {d} numbers")

    edges = doc["edges"]
    if not isinstance(edges, list):
        raise GraphParseError("edges: expected a list of [u, v] pairs")
    for i, e in enumerate(edges):
        if not isinstance(e, list) or len(e) != 2 or not all(isinstance(x, int) for x in e):
            raise GraphParseError(f"edges[{i}]: expected a pair of integers")

    labels = doc["labels"]
    if not isinstance(labels, list) or len(labels) != n or not all(isinstance(x, int) for x in labels):
        raise GraphParseError(f"labels: expected {n} integers")

    masks = {}
    for name in ("train_mask", "val_mask", "test_mask"):
        m = doc[name]
        if not isinstance(m, list) or len(m) != n or not all(isinstance(x, bool) for x in m):
            raise GraphParseError(f"{name}: expected {n} booleans")
        masks[name] = m

    return Graph.create(
        num_nodes=n, num_classes=c,
        features=np.array(feats, dtype=np.float64).reshape(n, d),
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
        labels=labels,
        train_mask=masks["train_mask"], val_mask=masks["val_mask"], test_mask=masks["test_mask"],
    )


def save_graph(g: Graph, path) -> None:
    """Write GraphJSON; loading the result reproduces every field of ``g``."""
    doc = {
        "num_nodes": g.num_nodes,
        "num_classes": g.num_classes,
        "feature_dim": g.feature_dim,
        "features": [[float(x) for x in row] for row in g.features],
        "edges": [[int(u), int(v)] for u, v in g.edges],
        "labels": [int(y) for y in g.labels],
        "train_mask": [bool(b) for b in g.train_mask],
        "val_mask": [bool(b) for b in g.val_mask],
        "test_mask": [bool(b) for b in g.test_mask],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


# ---- synthetic graphs ---------------------------------------------------------


def synth_graph(seed: int, n: int, classes: int, p_in: float, p_out: float,
                feature_dim: int = 16) -> Graph:
    """Stochastic block model with class-correlated Gaussian features.

    Classes are balanced (round-robin over node index); masks split 60/20/20
    by shuffled index.  Deterministic for a fixed seed.
    """
    if not (0.0 <= p_out <= p_in <= 1.0):
        raise ContractError(f"need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if n < classes:
        raise ContractError(f"need n >= classes, got n={n}, classes={classes}")
    if classes < 2:
        raise ContractError(f"need at least 2 classes, got {classes}")
    if feature_dim < 1:
        raise ContractError(f"feature_dim must be positive, got {feature_dim}")

    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % classes

    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(prob.shape[0]) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    centers = rng.normal(0.0, 1.0, size=(classes, feature_dim))
    features = centers[labels] + rng.normal(0.0, _SYNTH_NOISE_SCALE, size=(n, feature_dim))

    perm = rng.permutation(n)
    n_train = int(math.floor(0.6 * n))
    n_val = int(math.floor(0.2 * n))
    train_mask = np.zeros(n, dtype=bool)
    val_mask = np.zeros(n, dtype=bool)
    test_mask = np.zeros(n, dtype=bool)
    train_mask[perm[:n_train]] = True
    val_mask[perm[n_train:n_train + n_val]] = True
    test_mask[perm[n_train + n_val:]] = True

    return Graph.create(
        num_nodes=n, num_classes=classes, features=features, edges=edges,
        labels=labels, train_mask=train_mask, val_mask=val_mask, test_mask=test_mask,
    )
