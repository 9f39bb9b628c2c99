"""Teacher layers against dense/per-node/per-edge oracles, permutation
equivariance, and training behavior."""

import dataclasses

import numpy as np
import pytest

from graphdistill import tensor as T
from graphdistill.config import ExperimentConfig, TeacherConfig
from graphdistill.graphs import Graph, neighbor_mean_csr, normalize_adjacency, synth_graph
from graphdistill.teachers import GatHeadParams, GatLayerParams, TeacherArtifacts, \
    gat_edge_index, gat_layer, gcn_layer, init_teacher_params, load_artifacts, \
    sage_layer, save_artifacts, teacher_forward, train_teacher
from graphdistill.tensor import Tensor


def _tiny_graph(seed=0, n=4, p_in=0.9, p_out=0.6, classes=2, fdim=3):
    return synth_graph(seed=seed, n=n, classes=classes, p_in=p_in, p_out=p_out,
                       feature_dim=fdim)


def _leaky(x, slope=0.2):
    return np.where(x > 0, x, slope * x)


# ---- gcn_layer ------------------------------------------------------------------


def test_gcn_single_node_identity():
    g = Graph.create(1, 2, np.array([[2.0, -1.0]]), np.zeros((0, 2)), [0],
                     [True], [False], [False])
    adj = normalize_adjacency(g)
    out = gcn_layer(Tensor(g.features), adj, Tensor(np.eye(2)), activation="identity")
    assert np.allclose(out.data, g.features, atol=1e-15)


def test_gcn_clique_equal_rows_stay_equal():
    g = Graph.create(2, 2, np.array([[1.0, 2.0], [1.0, 2.0]]), [[0, 1]], [0, 1],
                     [True, False], [False, True], [False, False])
    adj = normalize_adjacency(g)
    w = Tensor(np.random.default_rng(0).normal(size=(2, 3)))
    out = gcn_layer(Tensor(g.features), adj, w)
    assert np.allclose(out.data[0], out.data[1], atol=1e-12)


def test_gcn_matches_dense_oracle():
    g = _tiny_graph(seed=1)
    adj = normalize_adjacency(g)
    rng = np.random.default_rng(2)
    h = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 5))
    dense = np.maximum(adj.matrix.toarray() @ h @ w, 0.0)
    out = gcn_layer(Tensor(h), adj, Tensor(w), activation="relu")
    assert np.max(np.abs(out.data - dense)) < 1e-10


# ---- sage_layer ------------------------------------------------------------------


def test_sage_isolated_node_uses_self_path_only():
    g = Graph.create(3, 2, np.array([[1.0], [2.0], [4.0]]), [[0, 1]], [0, 1, 0],
                     [True, False, False], [False, True, False], [False, False, True])
    m = neighbor_mean_csr(g)
    w_self = Tensor(np.array([[2.0]]))
    w_neigh = Tensor(np.array([[100.0]]))
    out = sage_layer(Tensor(g.features), m, w_self, w_neigh, activation="identity")
    assert np.allclose(out.data[2], [8.0])


def test_sage_self_neighborhood_collapses_to_sum_of_weights():
    feats = np.array([[1.0, 2.0], [1.0, 2.0]])
    g = Graph.create(2, 2, feats, [[0, 1]], [0, 1],
                     [True, False], [False, True], [False, False])
    m = neighbor_mean_csr(g)
    rng = np.random.default_rng(3)
    w_self = rng.normal(size=(2, 2))
    w_neigh = rng.normal(size=(2, 2))
    out = sage_layer(Tensor(feats), m, Tensor(w_self), Tensor(w_neigh), activation="identity")
    assert np.allclose(out.data, feats @ (w_self + w_neigh), atol=1e-12)


def test_sage_matches_per_node_loop_oracle():
    g = _tiny_graph(seed=5, n=5)
    m = neighbor_mean_csr(g)
    rng = np.random.default_rng(6)
    h = rng.normal(size=(5, 3))
    w_self = rng.normal(size=(3, 4))
    w_neigh = rng.normal(size=(3, 4))
    expected = np.zeros((5, 4))
    for v in range(5):
        neigh = [u for u, w in g.edges if w == v]
        mean = h[neigh].mean(axis=0) if neigh else np.zeros(3)
        expected[v] = np.maximum(h[v] @ w_self + mean @ w_neigh, 0.0)
    out = sage_layer(Tensor(h), m, Tensor(w_self), Tensor(w_neigh))
    assert np.max(np.abs(out.data - expected)) < 1e-10


# ---- gat_layer --------------------------------------------------------------------


def _gat_params(rng, d_in, d_out, heads=1, concat=False):
    return GatLayerParams(
        heads=[GatHeadParams(w=Tensor(rng.normal(size=(d_in, d_out))),
                             a=Tensor(rng.normal(size=(2 * d_out, 1))))
               for _ in range(heads)],
        concat=concat,
    )


def test_gat_isolated_node_attends_to_itself():
    g = Graph.create(2, 2, np.array([[1.0, 0.5], [0.0, 2.0]]), np.zeros((0, 2)), [0, 1],
                     [True, False], [False, True], [False, False])
    rng = np.random.default_rng(7)
    params = _gat_params(rng, 2, 3)
    out, attn = gat_layer(Tensor(g.features), gat_edge_index(g), 2, params,
                          activation="identity", return_attention=True)
    assert np.allclose(attn[0], 1.0)
    assert np.allclose(out.data, g.features @ params.heads[0].w.data, atol=1e-12)


def test_gat_zero_attention_vector_gives_uniform_weights():
    g = _tiny_graph(seed=8, n=4, p_in=1.0, p_out=1.0)  # clique
    rng = np.random.default_rng(9)
    params = _gat_params(rng, 3, 2)
    params.heads[0].a = Tensor(np.zeros((4, 1)))
    src, dst = gat_edge_index(g)
    _, attn = gat_layer(Tensor(g.features), (src, dst), 4, params,
                        activation="identity", return_attention=True)
    assert np.allclose(attn[0], 0.25, atol=1e-12)


def test_gat_matches_per_edge_enumeration_oracle():
    g = _tiny_graph(seed=10, n=4)
    rng = np.random.default_rng(11)
    h = rng.normal(size=(4, 3))
    params = _gat_params(rng, 3, 2, heads=2, concat=True)
    src, dst = gat_edge_index(g)

    expected_heads = []
    for head in params.heads:
        hw = h @ head.w.data
        a_src, a_dst = head.a.data[:2, 0], head.a.data[2:, 0]
        out_h = np.zeros((4, 2))
        for v in range(4):
            incoming = [u for u, w in zip(src, dst) if w == v]
            scores = np.array([_leaky(hw[u] @ a_src + hw[v] @ a_dst) for u in incoming])
            alpha = np.exp(scores - scores.max())
            alpha /= alpha.sum()
            out_h[v] = sum(a * hw[u] for a, u in zip(alpha, incoming))
        expected_heads.append(out_h)
    expected = np.maximum(np.concatenate(expected_heads, axis=1), 0.0)

    out = gat_layer(Tensor(h), (src, dst), 4, params, activation="relu")
    assert np.max(np.abs(out.data - expected)) < 1e-10


def test_gat_attention_rows_sum_to_one():
    g = _tiny_graph(seed=12, n=8, p_in=0.6, p_out=0.3)
    rng = np.random.default_rng(13)
    params = _gat_params(rng, 3, 2, heads=3, concat=True)
    src, dst = gat_edge_index(g)
    _, attns = gat_layer(Tensor(g.features), (src, dst), 8, params,
                         activation="identity", return_attention=True)
    for alpha in attns:
        sums = np.zeros(8)
        np.add.at(sums, dst, alpha)
        assert np.max(np.abs(sums - 1.0)) < 1e-9


# ---- teacher_forward ---------------------------------------------------------------


def _default_cfg(**teacher_kw):
    return ExperimentConfig(teacher=TeacherConfig(**teacher_kw), row_normalize=False)


def test_forward_k1_reduces_to_single_layer():
    g = _tiny_graph(seed=14)
    cfg = _default_cfg(layers=1)
    rng = np.random.default_rng(15)
    params = init_teacher_params("gcn", 3, 2, cfg, rng)
    art = teacher_forward(g, params, cfg)
    adj = normalize_adjacency(g)
    direct = gcn_layer(Tensor(g.features), adj, params.layers[0].w, activation="identity")
    assert art.depth == 1
    assert np.allclose(art.logits, direct.data, atol=1e-12)


def _permute_graph(g, perm):
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return Graph.create(
        g.num_nodes, g.num_classes, g.features[inv],
        np.stack([perm[g.edges[:, 0]], perm[g.edges[:, 1]]], axis=1),
        g.labels[inv], g.train_mask[inv], g.val_mask[inv], g.test_mask[inv])


@pytest.mark.parametrize("kind", ["gcn", "sage", "gat"])
def test_permutation_equivariance(kind):
    g = synth_graph(seed=16, n=9, classes=3, p_in=0.7, p_out=0.3, feature_dim=4)
    cfg = _default_cfg(layers=2, hidden=8, heads=2)
    rng = np.random.default_rng(17)
    params = init_teacher_params(kind, 4, 3, cfg, rng)
    art = teacher_forward(g, params, cfg)

    perm = np.random.default_rng(18).permutation(9)
    g_perm = _permute_graph(g, perm)
    art_perm = teacher_forward(g_perm, params, cfg)
    # node i moved to slot perm[i], so permuted row perm[i] must equal original row i
    for h, hp in zip(art.layer_embeddings, art_perm.layer_embeddings):
        assert np.max(np.abs(hp[perm] - h)) < 1e-9


def test_artifacts_immutable_and_checksummed():
    g = _tiny_graph(seed=19)
    cfg = _default_cfg(layers=2, hidden=8, heads=2)
    params = init_teacher_params("gcn", 3, 2, cfg, np.random.default_rng(20))
    art = teacher_forward(g, params, cfg)
    with pytest.raises(ValueError):
        art.logits[0, 0] = 1.0
    assert art.checksum() == art.checksum()
    assert art.logits.shape == (4, 2)
    assert np.array_equal(art.logits, art.layer_embeddings[-1])


def test_artifacts_sidecar_roundtrip(tmp_path):
    g = _tiny_graph(seed=21)
    cfg = _default_cfg(layers=2, hidden=8, heads=2)
    params = init_teacher_params("sage", 3, 2, cfg, np.random.default_rng(22))
    art = teacher_forward(g, params, cfg)
    path = tmp_path / "artifacts.npz"
    save_artifacts(art, path)
    loaded = load_artifacts(path)
    assert loaded.kind == art.kind and loaded.depth == art.depth
    for a, b in zip(loaded.layer_embeddings, art.layer_embeddings):
        assert np.array_equal(a, b)
    assert loaded.checksum() == art.checksum()


# ---- train_teacher -----------------------------------------------------------------


@pytest.fixture(scope="module")
def separable_graph():
    return synth_graph(seed=23, n=120, classes=2, p_in=0.3, p_out=0.0, feature_dim=8)


def test_teacher_reaches_high_accuracy_on_separable_graph(separable_graph):
    cfg = ExperimentConfig(teacher=dataclasses.replace(TeacherConfig(), epochs=150),
                           row_normalize=False)
    _, art, _ = train_teacher(separable_graph, cfg, kind="gcn", seed=0)
    pred = art.logits[separable_graph.test_mask].argmax(axis=1)
    acc = (pred == separable_graph.labels[separable_graph.test_mask]).mean()
    assert acc >= 0.95


def test_teacher_ignores_distillation_config(separable_graph):
    base = ExperimentConfig(teacher=dataclasses.replace(TeacherConfig(), epochs=40),
                            row_normalize=False)
    other = dataclasses.replace(
        base,
        distill=dataclasses.replace(base.distill, lam=0.05, tau=9.0),
        student=dataclasses.replace(base.student, d_model=32, heads=2))
    _, art_a, _ = train_teacher(separable_graph, base, kind="gcn", seed=1)
    _, art_b, _ = train_teacher(separable_graph, other, kind="gcn", seed=1)
    assert art_a.checksum() == art_b.checksum()


def test_teacher_deterministic_given_seed(separable_graph):
    cfg = ExperimentConfig(teacher=dataclasses.replace(TeacherConfig(), epochs=30),
                           row_normalize=False)
    _, art_a, val_a = train_teacher(separable_graph, cfg, kind="sage", seed=2)
    _, art_b, val_b = train_teacher(separable_graph, cfg, kind="sage", seed=2)
    assert val_a == val_b
    assert art_a.checksum() == art_b.checksum()
