"""Autodiff engine tests.

Gradient checks compare the engine's float32 analytic gradients against
central finite differences of an independent float64 mirror of the same
computation (eps=1e-3). The mirrors are plain numpy written directly from
the math, so an error in the engine's forward or backward cannot hide.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mstd import tensor as T
from mstd.errors import ConfigError, DimensionError, GraphError
from mstd.optim import SGD, Adam
from mstd.tensor import Parameter, Tensor

RNG = np.random.default_rng(20260819)


# ---------------------------------------------------------------------------
# float64 mirrors (the oracle side; no engine code involved)
# ---------------------------------------------------------------------------


def m_softmax(x, t=1.0):
    z = (x - x.max(axis=-1, keepdims=True)) / t
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def m_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def m_attention(x, heads, wq, bq, wk, bk, wv, bv, wo, bo):
    batch, tokens, dim = x.shape
    hd = dim // heads

    def split(t):
        return t.reshape(batch, tokens, heads, hd).transpose(0, 2, 1, 3)

    q = split(x @ wq + bq)
    k = split(x @ wk + bk)
    v = split(x @ wv + bv)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd)
    attn = m_softmax(scores)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(batch, tokens, dim)
    return ctx @ wo + bo


def fd_grads(fn, arrays, eps=1e-3):
    """Central finite differences of scalar fn over float64 copies."""
    arrays = [a.astype(np.float64) for a in arrays]
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = fn(*arrays)
            flat[j] = orig - eps
            lo = fn(*arrays)
            flat[j] = orig
            gflat[j] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def check_grads(build, mirror, arrays, atol=1e-4):
    """build: arrays -> (scalar Tensor, [Tensor leaves]); mirror: float64 scalar fn."""
    leaves_data = [a.astype(np.float32) for a in arrays]
    loss, leaves = build(leaves_data)
    T.backward(loss)
    want = fd_grads(mirror, arrays)
    for leaf, ref in zip(leaves, want):
        assert leaf.grad is not None
        # Floor of 1e-3 keeps float32 round-off on mathematically-zero
        # gradients (e.g. the key bias under shift-invariant softmax) from
        # exploding the relative error.
        scale = max(np.abs(ref).max(), 1e-3)
        err = np.abs(leaf.grad.astype(np.float64) - ref).max() / scale
        assert err < atol, f"gradient mismatch: scaled max err {err:.2e}"


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------


def test_linear_identity():
    x = Tensor([[1.0, 2.0]])
    w = Parameter([[1.0, 0.0], [0.0, 1.0]])
    b = Parameter([0.0, 0.0])
    y = T.linear(x, w, b)
    assert np.array_equal(y.data, [[1.0, 2.0]])


def test_linear_hand_value():
    x = Tensor([[1.0, 1.0]])
    w = Parameter([[2.0, 3.0], [4.0, 5.0]])
    b = Parameter([1.0, 1.0])
    y = T.linear(x, w, b)
    assert np.array_equal(y.data, [[7.0, 9.0]])


def test_linear_shape_mismatch_names_shapes():
    x = Tensor(np.zeros((2, 3)))
    w = Parameter(np.zeros((4, 5)))
    with pytest.raises(DimensionError) as exc:
        T.linear(x, w)
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_bias_gradient_equals_batch_count():
    x = Tensor(RNG.normal(size=(3, 4)).astype(np.float32))
    w = Parameter(RNG.normal(size=(4, 2)).astype(np.float32))
    b = Parameter(np.zeros(2, dtype=np.float32))
    T.backward(T.sum_all(T.linear(x, w, b)))
    assert np.allclose(b.grad, [3.0, 3.0])


def test_sigmoid_half_at_zero():
    y = T.sigmoid(Tensor([0.0]))
    assert y.data[0] == pytest.approx(0.5)


def test_relu_clamps_negative():
    y = T.relu(Tensor([-3.0]))
    assert y.data[0] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=-20, max_value=20))
def test_sigmoid_symmetry(x):
    a = T.sigmoid(Tensor([x])).data[0]
    b = T.sigmoid(Tensor([-x])).data[0]
    assert a + b == pytest.approx(1.0, abs=1e-6)


def test_sigmoid_extreme_inputs_stay_in_open_interval():
    y = T.sigmoid(Tensor([-120.0, 120.0, -1e4, 1e4])).data
    assert np.all(np.isfinite(y))
    assert np.all(y >= 0.0) and np.all(y <= 1.0)


def test_softmax_equal_logits_uniform():
    for t in (1.0, 7.3):
        y = T.softmax(Tensor([[0.0, 0.0]]), temperature=t)
        assert np.allclose(y.data, [[0.5, 0.5]])


def test_softmax_high_temperature_flattens():
    y = T.softmax(Tensor([[1.0, 0.0]]), temperature=1e6)
    assert np.allclose(y.data, [[0.5, 0.5]], atol=1e-6)


def test_softmax_hand_value():
    y = T.softmax(Tensor([[2.0, 1.0, 0.0]]), temperature=1.0)
    assert np.allclose(y.data, [[0.6652, 0.2447, 0.0900]], atol=1e-4)


def test_softmax_rejects_bad_temperature():
    for t in (0.0, -1.0):
        with pytest.raises(ConfigError):
            T.softmax(Tensor([[1.0, 2.0]]), temperature=t)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(
        st.lists(st.floats(min_value=-30, max_value=30), min_size=2, max_size=6),
        min_size=1,
        max_size=4,
    ).filter(lambda rows: len({len(r) for r in rows}) == 1)
)
def test_softmax_rows_are_distributions(rows):
    y = T.softmax(Tensor(np.array(rows, dtype=np.float32))).data
    assert np.all(y > 0)
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_stable_for_huge_logits():
    y = T.softmax(Tensor([[1000.0, 999.0, 0.0]])).data
    assert np.all(np.isfinite(y))
    assert y.sum() == pytest.approx(1.0, abs=1e-6)


def test_forward_determinism_bit_identical():
    x = RNG.normal(size=(4, 6)).astype(np.float32)
    w = RNG.normal(size=(6, 3)).astype(np.float32)

    def run():
        return T.softmax(T.relu(T.matmul(Tensor(x), Tensor(w)))).data

    assert np.array_equal(run(), run())


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def _attn_params(dim, scale=0.4):
    def p(shape):
        return Parameter((RNG.normal(size=shape) * scale).astype(np.float32))

    return [p((dim, dim)), p(dim), p((dim, dim)), p(dim), p((dim, dim)), p(dim), p((dim, dim)), p(dim)]


def test_attention_preserves_shape():
    x = Tensor(RNG.normal(size=(2, 8, 12)).astype(np.float32))
    y = T.multi_head_self_attention(x, 3, *_attn_params(12))
    assert y.shape == (2, 8, 12)


def test_attention_rejects_indivisible_heads():
    x = Tensor(np.zeros((1, 2, 10), dtype=np.float32))
    with pytest.raises(ConfigError):
        T.multi_head_self_attention(x, 3, *_attn_params(10))


def test_attention_single_token_passes_value_through():
    # With one key, every attention weight is exactly 1, so the output is
    # just the value projection followed by the output projection.
    dim, heads = 6, 2
    params = _attn_params(dim)
    x = RNG.normal(size=(3, 1, dim)).astype(np.float32)
    y = T.multi_head_self_attention(Tensor(x), heads, *params)
    wv, bv, wo, bo = params[4].data, params[5].data, params[6].data, params[7].data
    expect = (x @ wv + bv) @ wo + bo
    assert np.allclose(y.data, expect, atol=1e-5)


def test_attention_token_permutation_equivariance():
    dim, heads = 12, 3
    params = _attn_params(dim)
    x = RNG.normal(size=(2, 5, dim)).astype(np.float32)
    perm = np.array([3, 0, 4, 1, 2])
    y = T.multi_head_self_attention(Tensor(x), heads, *params)
    y_perm = T.multi_head_self_attention(Tensor(x[:, perm]), heads, *params)
    assert np.allclose(y.data[:, perm], y_perm.data, atol=1e-5)


# ---------------------------------------------------------------------------
# gradients vs finite differences
# ---------------------------------------------------------------------------


def test_grad_matmul_2d():
    a = RNG.uniform(-1, 1, (3, 4))
    b = RNG.uniform(-1, 1, (4, 2))

    def build(arrs):
        ta, tb = Tensor(arrs[0], requires_grad=True), Tensor(arrs[1], requires_grad=True)
        return T.sum_all(T.matmul(ta, tb)), [ta, tb]

    check_grads(build, lambda a, b: (a @ b).sum(), [a, b])


def test_grad_matmul_3d_by_2d():
    a = RNG.uniform(-1, 1, (2, 3, 4))
    b = RNG.uniform(-1, 1, (4, 5))

    def build(arrs):
        ta, tb = Tensor(arrs[0], requires_grad=True), Tensor(arrs[1], requires_grad=True)
        return T.sum_all(T.matmul(ta, tb)), [ta, tb]

    check_grads(build, lambda a, b: (a @ b).sum(), [a, b])


def test_grad_matmul_batched_4d():
    a = RNG.uniform(-1, 1, (2, 2, 3, 4))
    b = RNG.uniform(-1, 1, (2, 2, 4, 3))

    def build(arrs):
        ta, tb = Tensor(arrs[0], requires_grad=True), Tensor(arrs[1], requires_grad=True)
        return T.sum_all(T.matmul(ta, tb)), [ta, tb]

    check_grads(build, lambda a, b: (a @ b).sum(), [a, b])


def test_grad_bias_broadcast_and_mul():
    x = RNG.uniform(-1, 1, (3, 4))
    b = RNG.uniform(-1, 1, (4,))

    def build(arrs):
        tx, tb = Tensor(arrs[0], requires_grad=True), Tensor(arrs[1], requires_grad=True)
        y = T.mul(T.add(tx, tb), tx)
        return T.sum_all(y), [tx, tb]

    check_grads(build, lambda x, b: ((x + b) * x).sum(), [x, b])


def test_grad_div_by_scalar_tensor():
    x = RNG.uniform(0.5, 1.5, (3, 3))
    s = np.array(0.7)

    def build(arrs):
        tx, ts = Tensor(arrs[0], requires_grad=True), Tensor(arrs[1], requires_grad=True)
        return T.sum_all(T.div(tx, ts)), [tx, ts]

    check_grads(build, lambda x, s: (x / s).sum(), [x, s])


def test_grad_relu_sigmoid_chain():
    # Inputs kept away from the relu kink so finite differences are valid.
    x = RNG.uniform(-1, 1, (4, 5))
    x[np.abs(x) < 0.05] = 0.2

    def build(arrs):
        tx = Tensor(arrs[0], requires_grad=True)
        return T.sum_all(T.sigmoid(T.relu(tx))), [tx]

    check_grads(build, lambda x: m_sigmoid(np.maximum(x, 0)).sum(), [x])


def test_grad_softmax_log_eps_with_temperature():
    x = RNG.uniform(-1, 1, (4, 6))
    weights = RNG.uniform(-1, 1, (4, 6))  # constant multiplier, no grad path

    def build(arrs):
        tx = Tensor(arrs[0], requires_grad=True)
        w = Tensor(weights.astype(np.float32))
        return T.sum_all(T.mul(T.log_eps(T.softmax(tx, temperature=2.0)), w)), [tx]

    def mirror(x):
        return (np.log(m_softmax(x, 2.0) + 1e-9) * weights).sum()

    check_grads(build, mirror, [x])


def test_grad_reductions_and_indexing():
    x = RNG.uniform(-1, 1, (5, 4))
    idx = np.array([0, 2, 2, 4])

    def build(arrs):
        tx = Tensor(arrs[0], requires_grad=True)
        picked = T.gather_rows(tx, idx)
        col = T.take_column(picked, 1)
        rows = T.sum_rows(T.mul(picked, picked))
        means = T.mean_rows(tx)
        return T.add(T.sum_all(T.mul(rows, col)), T.sum_all(means)), [tx]

    def mirror(x):
        picked = x[idx]
        col = picked[:, 1:2]
        rows = (picked * picked).sum(axis=1, keepdims=True)
        return (rows * col).sum() + x.mean(axis=0).sum()

    check_grads(build, mirror, [x])


def test_grad_reshape_transpose_concat():
    a = RNG.uniform(-1, 1, (2, 6))
    b = RNG.uniform(-1, 1, (2, 3))

    def build(arrs):
        ta, tb = Tensor(arrs[0], requires_grad=True), Tensor(arrs[1], requires_grad=True)
        p = T.transpose(T.reshape(ta, (2, 3, 2)), (0, 2, 1))  # [2,2,3]
        q = T.reshape(p, (4, 3))
        cat = T.concat([q, T.concat([tb, tb], axis=0)], axis=1)  # [4,6]
        return T.sum_all(T.mul(cat, cat)), [ta, tb]

    def mirror(a, b):
        p = a.reshape(2, 3, 2).transpose(0, 2, 1).reshape(4, 3)
        cat = np.concatenate([p, np.concatenate([b, b], axis=0)], axis=1)
        return (cat * cat).sum()

    check_grads(build, mirror, [a, b])


def test_grad_attention_full():
    dim, heads = 6, 2
    x = RNG.uniform(-1, 1, (2, 3, dim))
    raw = [RNG.uniform(-0.5, 0.5, (dim, dim)) if i % 2 == 0 else RNG.uniform(-0.5, 0.5, (dim,)) for i in range(8)]

    def build(arrs):
        tx = Tensor(arrs[0], requires_grad=True)
        ps = [Parameter(a) for a in arrs[1:]]
        y = T.multi_head_self_attention(tx, heads, *ps)
        return T.sum_all(T.mul(y, y)), [tx] + ps

    def mirror(x, *ws):
        y = m_attention(x, heads, *ws)
        return (y * y).sum()

    check_grads(build, mirror, [x] + raw, atol=2e-4)


def test_grad_accumulates_across_reuse():
    x = Tensor([3.0], requires_grad=True)
    T.backward(T.sum_all(T.mul(x, x)))
    assert x.grad[0] == pytest.approx(6.0)


# ---------------------------------------------------------------------------
# backward contract
# ---------------------------------------------------------------------------


def test_sum_of_parameter_grad_is_ones():
    p = Parameter(RNG.normal(size=(3, 2)).astype(np.float32))
    T.backward(T.sum_all(p))
    assert np.array_equal(p.grad, np.ones((3, 2), dtype=np.float32))


def test_backward_rejects_nonscalar():
    p = Parameter(np.ones((2, 2), dtype=np.float32))
    y = T.mul(p, p)
    with pytest.raises(GraphError):
        T.backward(y)


def test_backward_twice_is_an_error():
    p = Parameter(np.ones(3, dtype=np.float32))
    loss = T.sum_all(T.mul(p, p))
    T.backward(loss)
    with pytest.raises(GraphError):
        T.backward(loss)


def test_backward_on_graphless_tensor_is_an_error():
    with pytest.raises(GraphError):
        T.backward(Tensor(1.0))


def test_frozen_parameter_gets_no_gradient():
    free = Parameter(np.ones(3, dtype=np.float32))
    frozen = Parameter(np.full(3, 2.0, dtype=np.float32), frozen=True)
    T.backward(T.sum_all(T.mul(free, frozen)))
    assert frozen.grad is None
    assert np.allclose(free.grad, 2.0)


def test_gradient_flows_through_frozen_parameter():
    # A frozen layer passes gradient to trainable layers beneath it.
    x = Parameter(RNG.normal(size=(2, 3)).astype(np.float32))
    w = Parameter(RNG.normal(size=(3, 2)).astype(np.float32), frozen=True)
    T.backward(T.sum_all(T.matmul(x, w)))
    assert x.grad is not None and np.abs(x.grad).max() > 0


def test_detach_blocks_gradient():
    p = Parameter(np.ones(3, dtype=np.float32))
    T.backward(T.sum_all(T.mul(p.detach(), p)))
    assert np.allclose(p.grad, 1.0)  # only the live branch contributes


def test_no_grad_builds_no_graph():
    p = Parameter(np.ones(3, dtype=np.float32))
    with T.no_grad():
        y = T.sum_all(T.mul(p, p))
    assert not y.requires_grad
    with pytest.raises(GraphError):
        T.backward(y)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def test_sgd_single_step_value():
    p = Parameter(np.array([1.0], dtype=np.float32))
    p.grad = np.array([0.5], dtype=np.float32)
    SGD([p], lr=0.1).step()
    assert p.data[0] == pytest.approx(0.95)
    assert p.grad is None


def test_adam_first_step_moves_against_gradient():
    p = Parameter(np.array([1.0, -2.0, 0.3], dtype=np.float32))
    before = p.data.copy()
    p.grad = np.array([0.7, -0.2, 1.3], dtype=np.float32)
    Adam([p], lr=1e-3).step()
    delta = p.data - before
    assert np.all(np.sign(delta) == -np.sign([0.7, -0.2, 1.3]))


def test_step_before_backward_is_an_error():
    p = Parameter(np.ones(2, dtype=np.float32))
    with pytest.raises(GraphError):
        Adam([p]).step()
    with pytest.raises(GraphError):
        SGD([p]).step()


def test_frozen_parameter_never_moves():
    free = Parameter(RNG.normal(size=3).astype(np.float32))
    frozen = Parameter(RNG.normal(size=3).astype(np.float32), frozen=True)
    snapshot = frozen.data.copy()
    opt = Adam([free, frozen], lr=1e-2)
    for _ in range(100):
        T.backward(T.sum_all(T.mul(T.mul(free, free), frozen)))
        opt.step()
    assert np.array_equal(frozen.data, snapshot)
    assert not np.array_equal(free.data, snapshot)


def test_adam_approaches_quadratic_minimum():
    p = Parameter(np.array([4.0, -3.0], dtype=np.float32))
    target = np.array([1.0, 2.0], dtype=np.float32)
    opt = Adam([p], lr=0.05)
    for _ in range(400):
        diff = T.sub(p, Tensor(target))
        T.backward(T.sum_all(T.mul(diff, diff)))
        opt.step()
    assert np.allclose(p.data, target, atol=1e-2)
