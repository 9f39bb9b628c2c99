"""Numeric core: forward oracles, gradient checks against central finite
differences, and the recorded-computation contract."""

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from graphdistill import tensor as T
from graphdistill.errors import ContractError, DimensionError, NumericDomainError
from graphdistill.tensor import Tensor

from conftest import finite_difference, relative_error


def test_matmul_identity():
    b = np.array([[1.0, -2.0], [3.5, 0.25]])
    out = T.matmul(Tensor(np.eye(2)), Tensor(b))
    assert np.array_equal(out.data, b)


def test_matmul_against_triple_loop():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    expected = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(2):
                expected[i, j] += a[i, k] * b[k, j]
    assert np.array_equal(expected, np.array([[19.0, 22.0], [43.0, 50.0]]))
    assert np.allclose(T.matmul(Tensor(a), Tensor(b)).data, expected, atol=0)


def test_matmul_zero_annihilates():
    b = np.random.default_rng(0).normal(size=(3, 4))
    out = T.matmul(Tensor(np.zeros((2, 3))), Tensor(b))
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_symmetry():
    out = T.softmax(Tensor(np.array([0.0, 0.0])), axis=0)
    assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)


def test_softmax_high_precision_oracle():
    # mpmath-computed reference for softmax([1, 2, 3])
    import mpmath

    mpmath.mp.dps = 40
    exps = [mpmath.e**x for x in (1, 2, 3)]
    total = sum(exps)
    expected = np.array([float(e / total) for e in exps])
    out = T.softmax(Tensor(np.array([1.0, 2.0, 3.0])), axis=0)
    assert np.allclose(out.data, expected, atol=1e-15)
    assert np.allclose(out.data, [0.09003, 0.24473, 0.66524], atol=1e-5)


@given(st.integers(2, 5), st.integers(2, 6), st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_stochastic(n, m, seed):
    # scale kept below the float64 rounding edge (entries hit exactly 1.0
    # once logit gaps pass ~36)
    x = np.random.default_rng(seed).normal(scale=3, size=(n, m))
    p = T.softmax(Tensor(x), axis=1).data
    assert np.all(p > 0) and np.all(p < 1)
    assert np.max(np.abs(p.sum(axis=1) - 1.0)) < 1e-9


@given(st.floats(-1e3, 1e3), st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_log_softmax_shift_invariance(c, seed):
    x = np.random.default_rng(seed).normal(size=(3, 4))
    base = T.log_softmax(Tensor(x), axis=1).data
    shifted = T.log_softmax(Tensor(x + c), axis=1).data
    assert np.allclose(base, shifted, atol=1e-9)


def test_log_softmax_matches_log_of_softmax():
    x = np.random.default_rng(3).normal(scale=5, size=(4, 3))
    assert np.allclose(T.log_softmax(Tensor(x), axis=1).data,
                       np.log(T.softmax(Tensor(x), axis=1).data), atol=1e-12)


def test_softmax_survives_extreme_logits():
    # tau-scaled logits must not overflow: the max-shift form is mandatory
    x = np.array([[1e4, -1e4, 0.0]])
    p = T.softmax(Tensor(x), axis=1).data
    assert np.all(np.isfinite(p)) and abs(p.sum() - 1) < 1e-12


def test_softmax_rejects_nonfinite():
    with pytest.raises(NumericDomainError):
        T.softmax(Tensor(np.array([np.nan, 0.0])), axis=0)
    with pytest.raises(NumericDomainError):
        T.log_softmax(Tensor(np.array([np.inf, 0.0])), axis=0)


# ---- backward contract ------------------------------------------------------


def test_backward_linear_case():
    w = T.parameter(np.random.default_rng(0).normal(size=(3, 2)))
    T.tsum(w).backward()
    assert np.array_equal(w.grad, np.ones((3, 2)))


def test_backward_quadratic_case():
    w = T.parameter(np.random.default_rng(1).normal(size=(2, 3)))
    T.tsum(T.mul(w, w)).backward()
    assert np.allclose(w.grad, 2 * w.data, atol=1e-12)


def test_backward_requires_scalar():
    w = T.parameter(np.zeros((2, 2)))
    with pytest.raises(ContractError):
        T.mul(w, 2.0).backward()


def test_backward_rejects_second_call():
    w = T.parameter(np.ones((2, 2)))
    loss = T.tsum(w)
    loss.backward()
    with pytest.raises(ContractError):
        loss.backward()


def test_backward_composite_against_finite_differences():
    rng = np.random.default_rng(42)
    a = T.parameter(rng.normal(size=(4, 3)))
    b = T.parameter(rng.normal(size=(3, 4)))

    def forward():
        prod = T.matmul(Tensor(a.data), Tensor(b.data))
        act = T.relu(prod)
        p = T.softmax(act, axis=1)
        return T.tsum(T.mul(p, p)).item()

    loss = T.tsum(T.mul(T.softmax(T.relu(T.matmul(a, b)), axis=1),
                        T.softmax(T.relu(T.matmul(a, b)), axis=1)))
    loss.backward()
    fd_a, fd_b = finite_difference(forward, [a.data, b.data])
    assert relative_error(a.grad, fd_a) < 1e-4
    assert relative_error(b.grad, fd_b) < 1e-4


def test_grad_accumulates_over_shared_subexpression():
    w = T.parameter(np.array([[2.0]]))
    y = T.mul(w, w)  # dy/dw = 2w
    loss = T.add(T.tsum(y), T.tsum(w))
    loss.backward()
    assert np.allclose(w.grad, [[5.0]])


def test_no_grad_suppresses_recording():
    w = T.parameter(np.ones((2, 2)))
    with T.no_grad():
        out = T.tsum(T.mul(w, w))
    assert not out.requires_grad
    out.backward()
    assert w.grad is None


# ---- per-op gradient property (>= 100 trials overall) -----------------------


def _check_op(build, arrays, trials_seed):
    """build(tensors) -> scalar Tensor; compares backward vs finite differences."""
    params = [T.parameter(a.copy()) for a in arrays]
    loss = build(params)
    loss.backward()

    def forward():
        return build([Tensor(p.data) for p in params]).item()

    fd = finite_difference(forward, [p.data for p in params])
    for p, f in zip(params, fd):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        assert relative_error(analytic, f) < 1e-4, f"op gradient mismatch (seed {trials_seed})"


def _rand(rng, *shape):
    return rng.normal(size=shape)


SEG = np.array([0, 0, 1, 1, 1, 2, 3, 3])

OPS = {
    "add": lambda ts: T.tsum(T.mul(T.add(ts[0], ts[1]), 0.5)),
    "sub": lambda ts: T.tsum(T.sub(ts[0], ts[1])),
    "mul": lambda ts: T.tsum(T.mul(ts[0], ts[1])),
    "neg": lambda ts: T.tsum(T.neg(ts[0])),
    "matmul": lambda ts: T.tsum(T.matmul(ts[0], T.transpose(ts[1]))),
    "relu": lambda ts: T.tsum(T.relu(ts[0])),
    "leaky_relu": lambda ts: T.tsum(T.leaky_relu(ts[0], 0.2)),
    "abs": lambda ts: T.tsum(T.absolute(ts[0])),
    "sum_axis": lambda ts: T.tsum(T.mul(T.tsum(ts[0], axis=1), T.tsum(ts[1], axis=1))),
    "mean": lambda ts: T.tmean(T.mul(ts[0], ts[1])),
    "softmax": lambda ts: T.tsum(T.mul(T.softmax(ts[0], axis=1), ts[1])),
    "log_softmax": lambda ts: T.tsum(T.mul(T.log_softmax(ts[0], axis=1), ts[1])),
    "transpose": lambda ts: T.tsum(T.mul(T.transpose(ts[0]), T.transpose(ts[1]))),
    "reshape": lambda ts: T.tsum(T.mul(T.reshape(ts[0], (ts[0].data.size,)),
                                       T.reshape(ts[1], (ts[1].data.size,)))),
    "concat": lambda ts: T.tsum(T.mul(T.concat([ts[0], ts[1]], axis=1),
                                      T.concat([ts[1], ts[0]], axis=1))),
    "gather_rows": lambda ts: T.tsum(T.mul(T.gather_rows(ts[0], np.array([2, 0, 1, 2, 2])),
                                           T.gather_rows(ts[1], np.array([0, 1, 2, 0, 1])))),
    "segment_sum": lambda ts: T.tsum(T.mul(
        T.segment_sum(T.concat([ts[0], ts[1]], axis=0), SEG, 4),
        T.gather_rows(ts[0], np.array([0, 1, 2, 3])))),
    "segment_softmax": lambda ts: T.tsum(T.mul(
        T.segment_softmax(T.reshape(T.concat([ts[0], ts[1]], axis=0), (8,)), SEG, 4),
        T.reshape(T.concat([ts[1], ts[0]], axis=0), (8,)))),
}


@pytest.mark.parametrize("op_name", sorted(OPS))
@pytest.mark.parametrize("trial", range(5))
def test_op_gradients_match_finite_differences(op_name, trial):
    import zlib

    rng = np.random.default_rng(zlib.crc32(op_name.encode()) + trial)
    if op_name in ("segment_sum", "segment_softmax"):
        arrays = [_rand(rng, 4, 1), _rand(rng, 4, 1)]
    else:
        arrays = [_rand(rng, 4, 3), _rand(rng, 4, 3)]
    _check_op(OPS[op_name], arrays, trial)


@pytest.mark.parametrize("trial", range(3))
def test_broadcast_add_gradient(trial):
    rng = np.random.default_rng(500 + trial)

    def build(ts):
        return T.tsum(T.mul(T.add(ts[0], ts[1]), ts[2]))

    _check_op(build, [_rand(rng, 4, 3), _rand(rng, 1, 3), _rand(rng, 4, 3)], trial)


@pytest.mark.parametrize("trial", range(5))
def test_layer_norm_gradient(trial):
    rng = np.random.default_rng(100 + trial)
    arrays = [_rand(rng, 4, 6), np.abs(_rand(rng, 6)) + 0.5, _rand(rng, 6)]

    def build(ts):
        return T.tsum(T.mul(T.layer_norm(ts[0], ts[1], ts[2]), 0.5))

    _check_op(build, arrays, trial)


@pytest.mark.parametrize("trial", range(5))
def test_spmm_gradient(trial):
    rng = np.random.default_rng(200 + trial)
    s = sp.random(5, 4, density=0.5, random_state=trial, format="csr", dtype=np.float64)
    weights = _rand(rng, 5, 3)

    def build(ts):
        return T.tsum(T.mul(T.spmm(s, ts[0]), Tensor(weights)))

    _check_op(build, [_rand(rng, 4, 3)], trial)


@pytest.mark.parametrize("trial", range(8))
def test_attention_gradient(trial):
    rng = np.random.default_rng(300 + trial)
    mask, scale = None, 1.0
    if trial >= 4:
        mask, scale = rng.random((3, 5)) >= 0.3, 1.0 / 0.7

    def build(ts):
        return T.tsum(T.mul(T.attention(ts[0], ts[1], ts[2], drop_mask=mask,
                                        drop_scale=scale), 0.7))

    _check_op(build, [_rand(rng, 3, 4), _rand(rng, 5, 4), _rand(rng, 5, 2)], trial)


def test_attention_blocking_matches_monolithic(monkeypatch):
    # force multi-block execution on a small instance
    from graphdistill import tensor as tensor_mod

    rng = np.random.default_rng(310)
    q, k, v = rng.normal(size=(7, 4)), rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
    mask, scale = rng.random((7, 6)) >= 0.4, 1.0 / 0.6
    reference = T.attention(Tensor(q), Tensor(k), Tensor(v), drop_mask=mask,
                            drop_scale=scale).data
    monkeypatch.setattr(tensor_mod, "_ATTN_BLOCK_ELEMENTS", 12)
    blocked = T.attention(Tensor(q), Tensor(k), Tensor(v), drop_mask=mask,
                          drop_scale=scale).data
    # row blocking changes BLAS kernel dispatch, so equality is to rounding
    assert np.allclose(reference, blocked, atol=1e-13, rtol=0)

    def build(ts):
        return T.tsum(T.attention(ts[0], ts[1], ts[2], drop_mask=mask, drop_scale=scale))

    _check_op(build, [q, k, v], 0)


@pytest.mark.parametrize("trial", range(3))
def test_dropout_gradient_with_fixed_mask(trial):
    rng_mask = np.random.default_rng(400 + trial)
    state = rng_mask.bit_generator.state

    def build(ts):
        r = np.random.default_rng()
        r.bit_generator.state = state
        return T.tsum(T.mul(T.dropout(ts[0], 0.4, r, training=True), 2.0))

    _check_op(build, [_rand(np.random.default_rng(trial), 4, 4)], trial)


def test_attention_matches_explicit_softmax_path():
    rng = np.random.default_rng(9)
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 2))
    fused = T.attention(Tensor(q), Tensor(k), Tensor(v))
    p = T.softmax(Tensor(q @ k.T / np.sqrt(4)), axis=1)
    composed = T.matmul(p, Tensor(v))
    assert np.allclose(fused.data, composed.data, atol=1e-12)


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(77)
        a = T.parameter(rng.normal(size=(6, 6)))
        b = T.parameter(rng.normal(size=(6, 6)))
        loss = T.tsum(T.softmax(T.matmul(a, b), axis=1))
        loss.backward()
        return a.grad.tobytes(), loss.item()

    g1, l1 = run()
    g2, l2 = run()
    assert g1 == g2 and l1 == l2


def test_finite_outputs_on_finite_inputs(rng):
    x = rng.normal(scale=50, size=(5, 5))
    outs = [
        T.softmax(Tensor(x), axis=1).data,
        T.log_softmax(Tensor(x), axis=0).data,
        T.layer_norm(Tensor(x), Tensor(np.ones(5)), Tensor(np.zeros(5))).data,
        T.attention(Tensor(x), Tensor(x), Tensor(x)).data,
    ]
    for out in outs:
        assert np.all(np.isfinite(out))
