"""Teacher GNNs: GCN, mean-aggregating GraphSAGE, and GAT, with full-batch
training that freezes per-layer embeddings and logits for distillation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import PHASE_TEACHER, ExperimentConfig
from .errors import ContractError, TrainingDivergenceError
from .features import FeatureMatrix
from .graphs import Graph, NormalizedAdjacency, neighbor_mean_csr, normalize_adjacency
from .losses import cls_loss
from .optim import Adam
from .tensor import Tensor


@dataclass
class GcnLayerParams:
    w: Tensor

    def tensors(self):
        return [self.w]


@dataclass
class SageLayerParams:
    w_self: Tensor
    w_neigh: Tensor

    def tensors(self):
        return [self.w_self, self.w_neigh]


@dataclass
class GatHeadParams:
    w: Tensor
    a: Tensor  # (2 * head_dim, 1): source half then target half

    def tensors(self):
        return [self.w, self.a]


@dataclass
class GatLayerParams:
    heads: list[GatHeadParams]
    concat: bool  # concatenate heads (hidden layers) vs. average (final layer)

    def tensors(self):
        return [t for h in self.heads for t in h.tensors()]


@dataclass
class TeacherParams:
    kind: str
    layers: list

    @property
    def depth(self) -> int:
        return len(self.layers)

    def tensors(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer.tensors()]

    def layer_tensors(self) -> list[list[Tensor]]:
        return [layer.tensors() for layer in self.layers]


@dataclass(frozen=True)
class TeacherArtifacts:
    """Frozen per-layer post-activation embeddings; the last entry is the
    pre-softmax logit matrix."""

    kind: str
    layer_embeddings: tuple[np.ndarray, ...]

    def __post_init__(self):
        for h in self.layer_embeddings:
            h.flags.writeable = False

    @property
    def depth(self) -> int:
        return len(self.layer_embeddings)

    @property
    def logits(self) -> np.ndarray:
        return self.layer_embeddings[-1]

    @property
    def latent(self) -> np.ndarray:
        """Deepest hidden embedding; the student's teacher-latent input."""
        if self.depth >= 2:
            return self.layer_embeddings[-2]
        return self.layer_embeddings[-1]

    def checksum(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.kind.encode())
        for h in self.layer_embeddings:
            digest.update(np.ascontiguousarray(h).tobytes())
        return digest.hexdigest()


def save_artifacts(art: TeacherArtifacts, path) -> None:
    arrays = {f"layer_{i}": h for i, h in enumerate(art.layer_embeddings)}
    np.savez(path, kind=np.array(art.kind), depth=np.array(art.depth), **arrays)


def load_artifacts(path) -> TeacherArtifacts:
    with np.load(path) as z:
        depth = int(z["depth"])
        layers = tuple(np.array(z[f"layer_{i}"], dtype=np.float64) for i in range(depth))
        return TeacherArtifacts(kind=str(z["kind"]), layer_embeddings=layers)


# ---- layer operations ---------------------------------------------------------


def _apply_activation(h: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return T.relu(h)
    if activation == "identity":
        return h
    raise ContractError(f"unknown activation {activation!r}")


def _project(x, w: Tensor) -> Tensor:
    if isinstance(x, FeatureMatrix):
        return x.matmul(w)
    return T.matmul(x, w)


def gcn_layer(h, adj: NormalizedAdjacency, w: Tensor, activation: str = "relu") -> Tensor:
    """act(A_hat @ H @ W)."""
    return _apply_activation(T.spmm(adj.matrix, _project(h, w)), activation)


def sage_layer(h, neighbor_mean, w_self: Tensor, w_neigh: Tensor,
               activation: str = "relu") -> Tensor:
    """act(H W_self + mean-of-neighbors(H) W_neigh); isolated rows aggregate zero."""
    if isinstance(h, FeatureMatrix):
        neigh = h.premultiply(neighbor_mean).matmul(w_neigh)
    else:
        neigh = T.matmul(T.spmm(neighbor_mean, h), w_neigh)
    return _apply_activation(T.add(_project(h, w_self), neigh), activation)


def gat_edge_index(g: Graph) -> tuple[np.ndarray, np.ndarray]:
    """Directed edges plus one self-loop per node, sorted by target then source."""
    loops = np.arange(g.num_nodes, dtype=np.int64)
    src = np.concatenate([g.edges[:, 0], loops])
    dst = np.concatenate([g.edges[:, 1], loops])
    order = np.lexsort((src, dst))
    return src[order], dst[order]


def gat_layer(h, edge_index: tuple[np.ndarray, np.ndarray], num_nodes: int,
              params: GatLayerParams, leaky_slope: float = 0.2,
              activation: str = "relu", return_attention: bool = False):
    """Attention-weighted aggregation over incoming edges, per head."""
    src, dst = edge_index
    head_outputs = []
    attentions = []
    for head in params.heads:
        dh = head.w.shape[1]
        hw = _project(h, head.w)
        a_src = T.gather_rows(head.a, np.arange(dh))
        a_dst = T.gather_rows(head.a, np.arange(dh, 2 * dh))
        scores_src = T.matmul(hw, a_src)  # (N, 1)
        scores_dst = T.matmul(hw, a_dst)
        e = T.add(T.gather_rows(scores_src, src), T.gather_rows(scores_dst, dst))
        e = T.leaky_relu(T.reshape(e, (src.shape[0],)), leaky_slope)
        alpha = T.segment_softmax(e, dst, num_nodes)
        msg = T.mul(T.gather_rows(hw, src), T.reshape(alpha, (src.shape[0], 1)))
        head_outputs.append(T.segment_sum(msg, dst, num_nodes))
        if return_attention:
            attentions.append(alpha.data)
    if params.concat:
        out = T.concat(head_outputs, axis=1) if len(head_outputs) > 1 else head_outputs[0]
    else:
        acc = head_outputs[0]
        for extra in head_outputs[1:]:
            acc = T.add(acc, extra)
        out = acc / len(head_outputs)
    out = _apply_activation(out, activation)
    if return_attention:
        return out, attentions
    return out


# ---- parameter construction and forward -----------------------------------


def init_teacher_params(kind: str, in_dim: int, num_classes: int,
                        cfg: ExperimentConfig, rng: np.random.Generator) -> TeacherParams:
    tc = cfg.teacher
    layers = []
    if kind in ("gcn", "sage"):
        dims = [in_dim] + [tc.hidden] * (tc.layers - 1) + [num_classes]
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            if kind == "gcn":
                layers.append(GcnLayerParams(w=T.parameter((d_in, d_out), rng)))
            else:
                layers.append(SageLayerParams(
                    w_self=T.parameter((d_in, d_out), rng),
                    w_neigh=T.parameter((d_in, d_out), rng),
                ))
    elif kind == "gat":
        head_dim = tc.hidden // tc.heads
        d_in = in_dim
        for layer_idx in range(tc.layers):
            final = layer_idx == tc.layers - 1
            n_heads = tc.final_heads if final else tc.heads
            d_out = num_classes if final else head_dim
            heads = [
                GatHeadParams(w=T.parameter((d_in, d_out), rng),
                              a=T.parameter((2 * d_out, 1), rng))
                for _ in range(n_heads)
            ]
            layers.append(GatLayerParams(heads=heads, concat=not final))
            d_in = d_out if final else d_out * tc.heads
    else:
        raise ContractError(f"unknown teacher kind {kind!r}")
    return TeacherParams(kind=kind, layers=layers)


class _TeacherContext:
    """Per-graph constants reused across epochs."""

    def __init__(self, g: Graph, kind: str):
        self.num_nodes = g.num_nodes
        self.adj = normalize_adjacency(g) if kind == "gcn" else None
        self.neighbor_mean = neighbor_mean_csr(g) if kind == "sage" else None
        self.edge_index = gat_edge_index(g) if kind == "gat" else None


def _teacher_layers_forward(x, params: TeacherParams, ctx: _TeacherContext,
                            cfg: ExperimentConfig, training: bool,
                            rng: np.random.Generator | None) -> list[Tensor]:
    tc = cfg.teacher
    hs: list[Tensor] = []
    h = x
    for i, layer in enumerate(params.layers):
        act = "identity" if i == len(params.layers) - 1 else "relu"
        if training and tc.dropout > 0:
            if isinstance(h, FeatureMatrix):
                h = h.dropout(tc.dropout, rng)
            else:
                h = T.dropout(h, tc.dropout, rng, training=True)
        if params.kind == "gcn":
            h = gcn_layer(h, ctx.adj, layer.w, activation=act)
        elif params.kind == "sage":
            h = sage_layer(h, ctx.neighbor_mean, layer.w_self, layer.w_neigh, activation=act)
        else:
            h = gat_layer(h, ctx.edge_index, ctx.num_nodes, layer,
                          leaky_slope=tc.leaky_slope, activation=act)
        hs.append(h)
    return hs


def prepared_features(g: Graph, cfg: ExperimentConfig) -> FeatureMatrix:
    return FeatureMatrix.from_array(g.features, row_normalize=cfg.row_normalize)


def teacher_forward(g: Graph, params: TeacherParams,
                    cfg: ExperimentConfig | None = None,
                    x: FeatureMatrix | None = None) -> TeacherArtifacts:
    """Evaluation-mode stack of the teacher's layers; records H^(1..K)."""
    cfg = cfg or ExperimentConfig()
    ctx = _TeacherContext(g, params.kind)
    if x is None:
        x = prepared_features(g, cfg)
    with T.no_grad():
        hs = _teacher_layers_forward(x, params, ctx, cfg, training=False, rng=None)
    return TeacherArtifacts(kind=params.kind,
                            layer_embeddings=tuple(h.data.copy() for h in hs))


def _masked_accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    pred = logits[mask].argmax(axis=1)
    return float((pred == labels[mask]).mean())


def train_teacher(g: Graph, cfg: ExperimentConfig, kind: str | None = None,
                  seed: int | None = None) -> tuple[TeacherParams, TeacherArtifacts, float]:
    """Full-batch NLL training with early stopping on validation accuracy.

    Returns the best-validation parameters, the frozen artifacts they produce,
    and the best validation accuracy.  Deterministic for a fixed seed, and
    independent of any distillation settings in ``cfg``.
    """
    kind = kind or cfg.teachers[0]
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, PHASE_TEACHER])
    tc = cfg.teacher

    x = prepared_features(g, cfg)
    params = init_teacher_params(kind, x.shape[1], g.num_classes, cfg, rng)
    ctx = _TeacherContext(g, kind)

    wd = []
    for layer_idx, tensors in enumerate(params.layer_tensors()):
        wd.extend([tc.weight_decay if layer_idx == 0 else 0.0] * len(tensors))
    opt = Adam(params.tensors(), lr=tc.lr, weight_decay=wd)

    best_val = -1.0
    best_snapshot = [p.data.copy() for p in params.tensors()]
    wait = 0
    for epoch in range(tc.epochs):
        hs = _teacher_layers_forward(x, params, ctx, cfg, training=True, rng=rng)
        loss = cls_loss(hs[-1], g.labels, g.train_mask)
        if not np.isfinite(loss.item()):
            raise TrainingDivergenceError(epoch, f"teacher {kind}: non-finite loss at epoch {epoch}")
        opt.zero_grad()
        loss.backward()
        opt.step()

        with T.no_grad():
            eval_hs = _teacher_layers_forward(x, params, ctx, cfg, training=False, rng=None)
        val_acc = _masked_accuracy(eval_hs[-1].data, g.labels, g.val_mask)
        if val_acc > best_val:
            best_val = val_acc
            best_snapshot = [p.data.copy() for p in params.tensors()]
            wait = 0
        else:
            wait += 1
            if wait >= tc.patience:
                break

    for p, snap in zip(params.tensors(), best_snapshot):
        p.data = snap
    artifacts = teacher_forward(g, params, cfg, x=x)
    return params, artifacts, best_val
