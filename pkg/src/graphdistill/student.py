"""Transformer encoder student over nodes-as-tokens, plus the MLP baseline.

No positional encoding: node order is arbitrary, and the whole model is
token-permutation equivariant.  Blocks are pre-layer-norm with residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import StudentConfig
from .errors import DimensionError
from .features import FeatureMatrix
from .tensor import Tensor


@dataclass
class HeadParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor

    def tensors(self):
        return [self.wq, self.wk, self.wv]


@dataclass
class BlockParams:
    heads: list[HeadParams]
    wo: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    w_ff1: Tensor
    w_ff2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def tensors(self):
        out = [t for h in self.heads for t in h.tensors()]
        out += [self.wo, self.ln1_gain, self.ln1_bias, self.w_ff1, self.w_ff2,
                self.ln2_gain, self.ln2_bias]
        return out


@dataclass
class StudentParams:
    w_in: Tensor
    blocks: list[BlockParams]
    w_cls: Tensor

    def tensors(self) -> list[Tensor]:
        out = [self.w_in]
        for b in self.blocks:
            out.extend(b.tensors())
        out.append(self.w_cls)
        return out

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("w_in", self.w_in)]
        for i, b in enumerate(self.blocks):
            for j, h in enumerate(b.heads):
                out += [(f"block{i}.head{j}.wq", h.wq), (f"block{i}.head{j}.wk", h.wk),
                        (f"block{i}.head{j}.wv", h.wv)]
            out += [(f"block{i}.wo", b.wo),
                    (f"block{i}.ln1_gain", b.ln1_gain), (f"block{i}.ln1_bias", b.ln1_bias),
                    (f"block{i}.w_ff1", b.w_ff1), (f"block{i}.w_ff2", b.w_ff2),
                    (f"block{i}.ln2_gain", b.ln2_gain), (f"block{i}.ln2_bias", b.ln2_bias)]
        out.append(("w_cls", self.w_cls))
        return out


@dataclass
class StudentOutput:
    logits: Tensor  # N x C
    layer_embeddings: list[np.ndarray] | None = None


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2]


def init_student_params(input_dim: int, num_classes: int, cfg: StudentConfig,
                        rng: np.random.Generator) -> StudentParams:
    d_model, h = cfg.d_model, cfg.heads
    d_head = d_model // h
    blocks = []
    for _ in range(cfg.layers):
        heads = [HeadParams(wq=T.parameter((d_model, d_head), rng),
                            wk=T.parameter((d_model, d_head), rng),
                            wv=T.parameter((d_model, d_head), rng))
                 for _ in range(h)]
        blocks.append(BlockParams(
            heads=heads,
            wo=T.parameter((h * d_head, d_model), rng),
            ln1_gain=T.parameter(np.ones(d_model)),
            ln1_bias=T.parameter(np.zeros(d_model)),
            w_ff1=T.parameter((d_model, cfg.d_ff), rng),
            w_ff2=T.parameter((cfg.d_ff, d_model), rng),
            ln2_gain=T.parameter(np.ones(d_model)),
            ln2_bias=T.parameter(np.zeros(d_model)),
        ))
    return StudentParams(
        w_in=T.parameter((input_dim, d_model), rng),
        blocks=blocks,
        w_cls=T.parameter((d_model, num_classes), rng),
    )


def init_mlp_params(input_dim: int, num_classes: int, hidden: int,
                    rng: np.random.Generator) -> MlpParams:
    return MlpParams(
        w1=T.parameter((input_dim, hidden), rng),
        b1=T.parameter(np.zeros(hidden)),
        w2=T.parameter((hidden, num_classes), rng),
        b2=T.parameter(np.zeros(num_classes)),
    )


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         drop_mask: np.ndarray | None = None,
                         drop_scale: float = 1.0) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V with row-wise softmax over the keys."""
    return T.attention(q, k, v, drop_mask=drop_mask, drop_scale=drop_scale)


def _head_drop_mask(n: int, m: int, rate: float, rng, training: bool):
    if not training or rate <= 0:
        return None, 1.0
    # float32 uniforms: the mask is boolean either way and generation is on the
    # training hot path
    return rng.random((n, m), dtype=np.float32) >= rate, 1.0 / (1.0 - rate)


def multi_head(x: Tensor, block: BlockParams, cfg: StudentConfig,
               rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """Per-head attention with shared Q=K=V source, concatenated then projected."""
    n = x.shape[0]
    outs = []
    for head in block.heads:
        mask, mask_scale = _head_drop_mask(n, n, cfg.dropout, rng, training)
        outs.append(scaled_dot_attention(
            T.matmul(x, head.wq), T.matmul(x, head.wk), T.matmul(x, head.wv),
            drop_mask=mask, drop_scale=mask_scale))
    stacked = T.concat(outs, axis=1) if len(outs) > 1 else outs[0]
    return T.matmul(stacked, block.wo)


def student_forward(x, params: StudentParams, cfg: StudentConfig,
                    rng: np.random.Generator | None = None, training: bool = False,
                    collect_embeddings: bool = False) -> StudentOutput:
    """Input projection, L pre-norm encoder blocks, classifier head."""
    h = x.matmul(params.w_in) if isinstance(x, FeatureMatrix) else T.matmul(T.as_tensor(x), params.w_in)
    embeddings = [] if collect_embeddings else None
    for block in params.blocks:
        attn_in = T.layer_norm(h, block.ln1_gain, block.ln1_bias)
        h = T.add(h, multi_head(attn_in, block, cfg, rng=rng, training=training))
        ff_in = T.layer_norm(h, block.ln2_gain, block.ln2_bias)
        hidden = T.relu(T.matmul(ff_in, block.w_ff1))
        if training and cfg.dropout > 0:
            hidden = T.dropout(hidden, cfg.dropout, rng, training=True)
        h = T.add(h, T.matmul(hidden, block.w_ff2))
        if collect_embeddings:
            embeddings.append(h.data.copy())
    logits = T.matmul(h, params.w_cls)
    return StudentOutput(logits=logits, layer_embeddings=embeddings)


def mlp_baseline_forward(x, params: MlpParams, dropout: float = 0.0,
                         rng: np.random.Generator | None = None,
                         training: bool = False) -> Tensor:
    """Two-layer perceptron on raw features; never sees the graph."""
    if isinstance(x, FeatureMatrix):
        if training and dropout > 0:
            x = x.dropout(dropout, rng)
        h = x.matmul(params.w1)
    else:
        x = T.as_tensor(x)
        if x.data.ndim != 2:
            raise DimensionError(f"mlp input must be a matrix, got shape {x.data.shape}")
        if training and dropout > 0:
            x = T.dropout(x, dropout, rng, training=True)
        h = T.matmul(x, params.w1)
    h = T.relu(T.add(h, params.b1))
    if training and dropout > 0:
        h = T.dropout(h, dropout, rng, training=True)
    return T.add(T.matmul(h, params.w2), params.b2)
