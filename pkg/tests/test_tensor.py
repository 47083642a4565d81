import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from teddn import tensor as T
from teddn.errors import BoundsError, ConfigError, ContractError, DimensionError
from teddn.gradcheck import relative_error
from teddn.optim import Adam, AdamState, adam_step
from teddn.tensor import Parameter, Tensor, backward, finite_difference_grad


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for q in range(k):
                out[i, j] += a[i, q] * b[q, j]
    return out


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_row_by_column():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, loop_matmul(a, b), atol=1e-12)


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_matmul_associativity():
    rng = np.random.default_rng(1)
    A, B, C = (Tensor(rng.normal(size=(4, 4))) for _ in range(3))
    np.testing.assert_allclose(((A @ B) @ C).data, (A @ (B @ C)).data, atol=1e-10)


def test_batched_matmul_gradients():
    rng = np.random.default_rng(2)
    a = Parameter(rng.normal(size=(2, 3, 4)), "a")
    b = Parameter(rng.normal(size=(4, 5)), "b")
    w = rng.normal(size=(2, 3, 5))
    f = lambda _: (T.matmul(a, b) * w).sum()
    backward(f(None))
    for p in (a, b):
        assert relative_error(p.grad, finite_difference_grad(f, p)) < 1e-6


# ---------------------------------------------------------------- elementwise


def test_sigmoid_zero():
    assert T.elementwise("sigmoid", Tensor(0.0)).item() == 0.5


def test_relu_definition():
    assert T.elementwise("relu", Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_relu_subgradient_zero_at_kink():
    x = Parameter(np.array([0.0, 1.0, -1.0]), "x")
    backward(T.relu(x).sum())
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_row_broadcast_mul_matches_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(1, 3))
    out = T.elementwise("mul", Tensor(a), Tensor(b)).data
    for i in range(2):
        for j in range(3):
            assert out[i, j] == a[i, j] * b[0, j]


def test_non_broadcastable_raises():
    with pytest.raises(DimensionError):
        T.elementwise("add", Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_unknown_op_raises():
    with pytest.raises(ValueError):
        T.elementwise("softplus", Tensor(1.0))


@pytest.mark.parametrize("op", ["add", "sub", "mul", "sigmoid", "relu", "tanh"])
@pytest.mark.parametrize("seed", range(20))
def test_elementwise_gradients(op, seed):
    rng = np.random.default_rng(seed)
    a = Parameter(rng.normal(size=(3, 4)), "a")
    # keep relu inputs away from the kink
    a.data[np.abs(a.data) < 1e-3] = 0.5
    b = Parameter(rng.normal(size=(1, 4)), "b")
    w = rng.normal(size=(3, 4))
    binary = op in ("add", "sub", "mul")
    f = lambda _: (T.elementwise(op, a, b if binary else None) * w).sum()
    backward(f(None))
    for p in (a, b) if binary else (a,):
        assert relative_error(p.grad, finite_difference_grad(f, p)) < 1e-4


# ---------------------------------------------------------------- reductions and shapes


def test_mean_all_axes():
    assert T.reduce_mean(Tensor([[1.0, 2.0], [3.0, 4.0]]), (0, 1)).item() == 2.5


def test_mean_empty_axes_is_identity():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert T.reduce_mean(x, ()).data.tolist() == x.data.tolist()


def test_mean_columns():
    assert T.reduce_mean(Tensor([[1.0, 2.0], [3.0, 4.0]]), (0,)).data.tolist() == [2.0, 3.0]


def test_mean_bad_axis():
    with pytest.raises(DimensionError):
        T.reduce_mean(Tensor(np.ones((2, 2))), (2,))


def test_mean_gradient_is_reciprocal_count():
    x = Parameter(np.ones((2, 3)), "x")
    backward(T.reduce_mean(x, (0, 1)))
    np.testing.assert_allclose(x.grad, np.full((2, 3), 1 / 6))


def test_concat_definition():
    out = T.concat([Tensor([[1.0], [2.0]]), Tensor([[3.0], [4.0]])], axis=1)
    assert out.data.tolist() == [[1, 3], [2, 4]]


def test_concat_single_is_identity():
    x = Tensor([[1.0, 2.0]])
    assert T.concat([x], axis=0) is x


def test_concat_split_round_trip():
    rng = np.random.default_rng(4)
    parts = [Tensor(rng.normal(size=(2, 2))) for _ in range(3)]
    joined = T.concat(parts, axis=0)
    assert joined.shape == (6, 2)
    for p, q in zip(parts, T.split(joined, [2, 2, 2], axis=0)):
        np.testing.assert_array_equal(p.data, q.data)


def test_concat_incompatible():
    with pytest.raises(DimensionError):
        T.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], axis=0)


def test_concat_gradient_splits_back():
    a, b = Parameter(np.ones((2, 1)), "a"), Parameter(np.ones((2, 2)), "b")
    w = np.arange(6.0).reshape(2, 3)
    backward((T.concat([a, b], axis=1) * w).sum())
    assert a.grad.tolist() == [[0.0], [3.0]]
    assert b.grad.tolist() == [[1.0, 2.0], [4.0, 5.0]]


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_split_concat_identity_property(sizes, seed):
    x = Tensor(np.random.default_rng(seed).normal(size=(sum(sizes), 3)))
    back = T.concat(T.split(x, sizes, axis=0), axis=0)
    np.testing.assert_array_equal(back.data, x.data)


# ---------------------------------------------------------------- backward


def test_backward_linear():
    w = Parameter(np.zeros(3), "w")
    backward(w.sum())
    assert w.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_quadratic():
    w = Parameter(np.array([1.0, 2.0]), "w")
    backward((w * w).sum())
    assert w.grad.tolist() == [2.0, 4.0]


def test_backward_accumulates():
    w = Parameter(np.array([1.0, 2.0]), "w")
    backward((w * w).sum())
    backward((w * w).sum())
    assert w.grad.tolist() == [4.0, 8.0]


def test_backward_ignores_plain_leaves():
    x = Tensor(np.ones(2), requires_grad=True)
    w = Parameter(np.ones(2), "w")
    backward((x * w).sum())
    assert w.grad.tolist() == [1.0, 1.0]
    assert not hasattr(x, "grad")


def test_backward_non_scalar():
    with pytest.raises(ContractError):
        backward(Parameter(np.ones(2), "w") * 2.0)


def test_shared_subexpression_counts_twice():
    w = Parameter(np.array([3.0]), "w")
    y = w * 2.0
    backward((y * y).sum())
    assert w.grad.tolist() == [24.0]  # d(4w^2)/dw


def test_getitem_and_gather_scatter_gradients():
    rng = np.random.default_rng(5)
    table = Parameter(rng.normal(size=(4, 3)), "t")
    idx = np.array([1, 1, 3])
    w = rng.normal(size=(3, 2))
    f = lambda _: (T.gather_rows(table, idx)[:, 1:] * w).sum() + table[0, 2] * 3.0
    backward(f(None))
    np.testing.assert_allclose(table.grad, finite_difference_grad(f, table), atol=1e-8)
    assert table.grad[2].tolist() == [0.0, 0.0, 0.0]


def test_gather_bounds():
    with pytest.raises(BoundsError):
        T.gather_rows(Parameter(np.ones((3, 2)), "t"), np.array([3]))


def test_no_grad_records_nothing():
    w = Parameter(np.ones(2), "w")
    with T.no_grad():
        y = (w * w).sum()
    assert not y.requires_grad


def test_is_finite_flags_nan():
    assert Tensor([1.0, 2.0]).is_finite()
    assert not Tensor([1.0, np.nan]).is_finite()


# ---------------------------------------------------------------- finite differences


def test_fd_square():
    x = Parameter(np.array(3.0), "x")
    assert abs(finite_difference_grad(lambda v: (v * v).sum(), x) - 6.0) < 1e-8


def test_fd_sum_is_ones():
    x = Parameter(np.random.default_rng(0).normal(size=(2, 3)), "x")
    np.testing.assert_allclose(finite_difference_grad(lambda v: v.sum(), x), np.ones((2, 3)), atol=1e-9)


def test_fd_sigmoid_composition_matches_backward():
    rng = np.random.default_rng(6)
    x = Parameter(rng.normal(size=(4,)), "x")
    f = lambda v: T.sigmoid(T.tanh(v) * 2.0 + T.sigmoid(v)).sum()
    backward(f(x))
    np.testing.assert_allclose(x.grad, finite_difference_grad(f, x), atol=1e-6, rtol=0)


def test_fd_rejects_bad_step():
    with pytest.raises(ContractError):
        finite_difference_grad(lambda v: v.sum(), Parameter(np.ones(1), "x"), h=0.0)


# ---------------------------------------------------------------- Adam


def test_adam_zero_grad_fixed_point():
    p = Parameter(np.array([1.0, -2.0]), "p")
    state = AdamState()
    for _ in range(5):
        adam_step([p], state, lr=0.002, weight_decay=0.0)
    assert p.data.tolist() == [1.0, -2.0]
    assert state.step_count == 5


def test_adam_unit_step():
    p = Parameter(np.array([0.5]), "p")
    p.grad = np.array([1.0])
    adam_step([p], AdamState(), lr=0.002, weight_decay=0.0)
    assert abs(p.data[0] - (0.5 - 0.002)) < 1e-10


def test_adam_decay_only():
    p = Parameter(np.array([1.0]), "p")
    adam_step([p], AdamState(), lr=0.002, weight_decay=1e-5)
    assert p.data[0] == 1.0 - 0.002 * 1e-5


def test_adam_hand_evaluated_two_steps():
    p = Parameter(np.array([1.0]), "p")
    state = AdamState()
    grads = [0.3, -0.1]
    m = v = 0.0
    x = 1.0
    for t, g in enumerate(grads, start=1):
        p.grad = np.array([g])
        adam_step([p], state, lr=0.01, weight_decay=1e-3)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * 1e-3 * x
        x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert abs(p.data[0] - x) < 1e-14


def test_adam_rejects_bad_lr():
    with pytest.raises(ConfigError):
        adam_step([Parameter(np.ones(1), "p")], AdamState(), lr=0.0)
    with pytest.raises(ConfigError):
        Adam([], lr=-1.0)


def test_adam_moment_shapes():
    ps = [Parameter(np.ones((2, 3)), "a"), Parameter(np.ones(4), "b")]
    opt = Adam(ps)
    opt.step()
    assert opt.state.first_moment["a"].shape == (2, 3)
    assert opt.state.second_moment["b"].shape == (4,)


def test_clip_values_and_gradient():
    x = Parameter(np.array([-2.0, 0.0, 0.5, 1.0, 3.0]), name="x")
    y = T.clip(x, 0.0, 1.0)
    assert y.data.tolist() == [0.0, 0.0, 0.5, 1.0, 1.0]
    backward(y.sum())
    assert x.grad.tolist() == [0.0, 1.0, 1.0, 1.0, 0.0]
