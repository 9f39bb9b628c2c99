"""The four distillation loss components and their weighted combination.

Teacher quantities are plain arrays (frozen, no gradient path); student logits
are tracked tensors, and every KL term is assembled from log-softmax outputs
so no intermediate probability is ever log'd directly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


@dataclass(frozen=True)
class DistillConfig:
    """Weighting/temperature knobs for the combined objective.

    ``lam`` balances supervision against the three structural terms; with the
    linear schedule the effective weight ramps lam_start -> lam_end over
    ``schedule_epochs`` epochs.  ``multiscale_sign`` picks whether per-scale
    edge distributions weight close (affinity) or distant pairs.
    """

    lam: float = 0.7
    tau: float = 2.0
    k_scales: int | None = None  # None: use every teacher layer
    schedule: str = "constant"  # constant | linear
    lam_start: float = 0.3
    lam_end: float = 0.9
    schedule_epochs: int = 200
    multiscale_sign: str = "affinity"  # affinity | distance

    def validate(self) -> "DistillConfig":
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lam must lie in [0,1], got {self.lam}")
        if self.tau <= 0:
            raise ContractError(f"tau must be positive, got {self.tau}")
        if self.k_scales is not None and self.k_scales < 1:
            raise ContractError(f"k_scales must be >= 1, got {self.k_scales}")
        if self.schedule not in ("constant", "linear"):
            raise ContractError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "linear":
            for name, v in (("lam_start", self.lam_start), ("lam_end", self.lam_end)):
                if not 0.0 <= v <= 1.0:
                    raise ContractError(f"{name} must lie in [0,1], got {v}")
            if self.schedule_epochs < 1:
                raise ContractError("schedule_epochs must be >= 1")
        if self.multiscale_sign not in ("affinity", "distance"):
            raise ContractError(f"unknown multiscale_sign {self.multiscale_sign!r}")
        return self

    def effective_lambda(self, epoch: int) -> float:
        if self.schedule == "constant":
            return self.lam
        span = max(self.schedule_epochs - 1, 1)
        frac = min(max(epoch, 0), span) / span
        return self.lam_start + (self.lam_end - self.lam_start) * frac


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    micro: float
    macro: float
    multi: float
    total: float


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def kl_div(p, q) -> float:
    """KL(p || q) in nats for probability vectors, with 0*log(0) = 0."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.shape != q.shape:
        raise ContractError(f"kl_div: shapes differ ({p.shape} vs {q.shape})")
    if p.min() < 0 or q.min() < 0:
        raise ContractError("kl_div: inputs must be non-negative")
    for name, v in (("p", p), ("q", q)):
        s = v.sum()
        if abs(s - 1.0) > 1e-6:
            raise ContractError(f"kl_div: {name} sums to {s}, expected 1 within 1e-6")
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def cls_loss(z_s: Tensor, labels: np.ndarray, train_mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true class over the labeled nodes."""
    mask = np.asarray(train_mask, dtype=bool)
    if not mask.any():
        raise ContractError("cls_loss: empty training mask")
    idx = np.nonzero(mask)[0]
    log_p = T.log_softmax(z_s, axis=1)
    picked = T.gather_rows(log_p, idx)
    onehot = np.zeros((idx.shape[0], z_s.shape[1]))
    onehot[np.arange(idx.shape[0]), np.asarray(labels)[idx]] = 1.0
    return T.neg(T.tmean(T.tsum(T.mul(picked, onehot), axis=1)))


def micro_loss(z_t: np.ndarray, z_s: Tensor, edges: np.ndarray, tau: float) -> Tensor:
    """Edge-wise KL from the temperature-softened teacher head-node distribution
    to the student tail-node distribution, averaged over the directed edge set."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.shape[0] == 0:
        warnings.warn("micro_loss: empty edge set, returning 0", RuntimeWarning)
        return Tensor(0.0)
    tails, heads = edges[:, 0], edges[:, 1]
    log_p_t = _log_softmax_rows(np.asarray(z_t, dtype=np.float64) / tau)
    p_t = np.exp(log_p_t)
    # sum_e sum_c pT[v,c] * (log pT[v,c] - logS[u,c]); teacher part is constant
    entropy_term = float(np.sum(p_t[heads] * log_p_t[heads]))
    log_s = T.log_softmax(z_s, axis=1)
    cross = T.tsum(T.mul(T.gather_rows(log_s, tails), p_t[heads]))
    return (entropy_term - cross) / edges.shape[0]


def _edge_l1_distances(z: Tensor, edges: np.ndarray) -> Tensor:
    u, v = edges[:, 0], edges[:, 1]
    diff = T.sub(T.gather_rows(z, u), T.gather_rows(z, v))
    return T.tsum(T.absolute(diff), axis=1)


def macro_loss(z_t: np.ndarray, z_s: Tensor, edges: np.ndarray, tau: float) -> Tensor:
    """KL between graph-level edge distributions built from per-edge L1 logit
    distances (student distribution first; teacher side constant)."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.shape[0] < 2:
        warnings.warn("macro_loss: fewer than 2 edges, returning 0", RuntimeWarning)
        return Tensor(0.0)
    z_t = np.asarray(z_t, dtype=np.float64)
    d_t = np.abs(z_t[edges[:, 0]] - z_t[edges[:, 1]]).sum(axis=1) / tau
    log_q_t = _log_softmax_rows(d_t)

    d_s = _edge_l1_distances(z_s, edges) / tau
    q_s = T.softmax(d_s, axis=0)
    log_q_s = T.log_softmax(d_s, axis=0)
    return T.tsum(T.mul(q_s, T.sub(log_q_s, log_q_t)))


def scale_distributions(layer_embeddings, edges: np.ndarray, sign: str = "affinity"):
    """Per-scale edge distributions: softmax over edges of the (negated) L1
    embedding distance at each scale."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    factor = -1.0 if sign == "affinity" else 1.0
    out = []
    for h in layer_embeddings:
        h = np.asarray(h, dtype=np.float64)
        d = factor * np.abs(h[edges[:, 0]] - h[edges[:, 1]]).sum(axis=1)
        out.append(np.exp(_log_softmax_rows(d)))
    return out


def mean_scale_divergence(scale_dists) -> float:
    """(1/K) sum_k KL(m_k || mean of scales); the Eq-style multi-scale combiner."""
    ms = [np.asarray(m, dtype=np.float64).reshape(-1) for m in scale_dists]
    if not ms:
        raise ContractError("at least one scale distribution required")
    m_bar = np.mean(np.stack(ms, axis=0), axis=0)
    return float(np.mean([kl_div(m, m_bar) for m in ms]))


def multiscale_loss(layer_embeddings, edges: np.ndarray, k_scales: int | None = None,
                    sign: str = "affinity") -> float:
    """Cross-scale consistency of teacher edge distributions (constant w.r.t.
    the student, so it shifts the objective without steering it)."""
    layer_embeddings = list(layer_embeddings)
    k = len(layer_embeddings) if k_scales is None else k_scales
    if k < 1 or k > len(layer_embeddings):
        raise ContractError(
            f"k_scales={k} outside [1, {len(layer_embeddings)}] available layers")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.shape[0] < 2:
        warnings.warn("multiscale_loss: fewer than 2 edges, returning 0", RuntimeWarning)
        return 0.0
    return mean_scale_divergence(scale_distributions(layer_embeddings[:k], edges, sign))


def total_loss(cls_term: Tensor, micro_term: Tensor, macro_term: Tensor,
               multi_term: float, cfg: DistillConfig, epoch: int) -> tuple[Tensor, LossBreakdown]:
    """lam_eff * cls + (1 - lam_eff) * (micro + macro + multi)."""
    lam = cfg.effective_lambda(epoch)
    structural = T.add(T.add(micro_term, macro_term), float(multi_term))
    total = T.add(T.mul(cls_term, lam), T.mul(structural, 1.0 - lam))
    breakdown = LossBreakdown(
        cls=cls_term.item(), micro=micro_term.item(), macro=macro_term.item(),
        multi=float(multi_term), total=total.item(),
    )
    return total, breakdown
