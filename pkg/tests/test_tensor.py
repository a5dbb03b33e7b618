import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from must import tensor as T
from must.errors import ContractError, DimensionError
from must.gradcheck import check_gradients, numerical_grad

SEEDS = range(20)


def test_matmul_identity_and_annihilation():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((T.Tensor(np.eye(2)) @ a).data, a.data)
    z = T.Tensor([[1.0, 0.0], [0.0, 0.0]]) @ T.Tensor([[0.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(z.data, np.zeros((2, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
        T.matmul(T.Tensor(np.ones((3, 4))), T.Tensor(np.ones((3, 2))))


def test_matmul_grad_of_sum_matches_finite_differences(rng):
    a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(4, 2)))
    T.sum(a @ b).backward()
    numeric = numerical_grad(lambda: T.sum(a @ b), a)
    assert np.linalg.norm(a.grad - numeric) / np.linalg.norm(numeric) <= 1e-6
    # analytic rule dA = dC B^T with dC = ones
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.data.T)


def test_softmax_examples():
    assert np.allclose(T.softmax(T.Tensor([0.0, 0.0, 0.0])).data, 1 / 3)
    y = T.softmax(T.Tensor([1000.0, 0.0])).data
    assert abs(y[0] - 1) <= 1e-12 and abs(y[1]) <= 1e-12
    mpmath.mp.dps = 50
    denom = sum(mpmath.e ** k for k in (1, 2, 3))
    oracle = [float(mpmath.e ** k / denom) for k in (1, 2, 3)]
    assert np.allclose(T.softmax(T.Tensor([1.0, 2.0, 3.0])).data, oracle, rtol=0, atol=1e-15)


def test_softmax_axis_bounds():
    with pytest.raises(ContractError):
        T.softmax(T.Tensor(np.ones((2, 3))), axis=2)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e6, 1e6)), st.integers(0, 1))
def test_softmax_slices_sum_to_one(x, axis):
    y = T.softmax(T.Tensor(x), axis=axis).data
    assert np.all(y >= 0)
    assert np.allclose(y.sum(axis=axis), 1.0, atol=1e-9)


def test_backward_examples():
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.sum(x).backward()
    assert np.array_equal(x.grad, [1, 1, 1])
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    T.sum(x * x).backward()
    assert np.array_equal(x.grad, [2, 4])


def test_backward_rejects_non_scalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_unreachable_tensor_keeps_no_grad():
    x = T.Tensor([1.0], requires_grad=True)
    y = T.Tensor([2.0], requires_grad=True)
    T.sum(x * 3.0).backward()
    assert y.grad is None


def test_gradients_accumulate_for_shared_parameters():
    w = T.Tensor([[2.0]], requires_grad=True)
    x1, x2 = T.Tensor([[1.0]]), T.Tensor([[5.0]])
    T.sum(T.add(x1 @ w, x2 @ w)).backward()
    assert w.grad[0, 0] == 6.0
    T.sum(x1 @ w).backward()
    assert w.grad[0, 0] == 7.0


def test_max_gradient_is_one_hot_lowest_index_on_ties():
    x = T.Tensor([[1.0, 3.0, 3.0], [2.0, 0.0, 2.0]], requires_grad=True)
    out = T.max(x, axis=1)
    assert np.array_equal(out.data, [3.0, 2.0])
    T.sum(out).backward()
    assert np.array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])


def test_leading_batch_expansion_only():
    T.add(T.Tensor(np.ones((2, 3, 4))), T.Tensor(np.ones(4)))
    T.add(T.Tensor(np.ones((2, 3, 4))), T.Tensor(np.ones((3, 4))))
    with pytest.raises(DimensionError):
        T.add(T.Tensor(np.ones((2, 3, 4))), T.Tensor(np.ones(3)))
    with pytest.raises(DimensionError):
        T.mul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 1))))


def test_backward_is_deterministic(rng):
    w = T.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    x = T.Tensor(rng.normal(size=(3, 4)))
    loss = T.sum(T.softmax(x @ w, axis=-1) * T.Tensor(rng.normal(size=(3, 4))))
    record = T.ComputationRecord(loss)
    record.replay(np.ones(()))
    first = w.grad.copy()
    w.zero_grad()
    record.replay(np.ones(()))
    assert np.array_equal(first, w.grad)


def test_record_is_reverse_topological(rng):
    x = T.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    y = T.relu(x @ x)
    loss = T.sum(y + x)
    order = T.ComputationRecord(loss).nodes
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for parent in node._parents:
            if parent.requires_grad:
                assert pos[id(parent)] < pos[id(node)]


def test_no_grad_records_nothing():
    x = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_precision_modes():
    with T.precision("float32"):
        assert T.Tensor([1.0]).data.dtype == np.float32
    assert T.Tensor([1.0]).data.dtype == np.float64


def _weights(rng, shape):
    return T.Tensor(rng.normal(size=shape))


# (name, builder) where builder(rng) -> (loss_fn, targets)
def _op_cases():
    def matmul(rng):
        a, b = _weights(rng, (3, 4)), _weights(rng, (4, 2))
        w = _weights(rng, (3, 2))
        return lambda: T.sum(T.matmul(a, b) * w), [a, b]

    def batched_matmul(rng):
        a, b = _weights(rng, (2, 3, 4)), _weights(rng, (2, 4, 3))
        w = _weights(rng, (2, 3, 3))
        return lambda: T.sum(T.matmul(a, b) * w), [a, b]

    def shared_matmul(rng):
        a, b = _weights(rng, (2, 3, 4)), _weights(rng, (4, 2))
        w = _weights(rng, (2, 3, 2))
        return lambda: T.sum(T.matmul(a, b) * w), [a, b]

    def add_expand(rng):
        a, b = _weights(rng, (2, 3, 4)), _weights(rng, (4,))
        w = _weights(rng, (2, 3, 4))
        return lambda: T.sum((a + b) * w), [a, b]

    def sub_mul(rng):
        a, b = _weights(rng, (3, 4)), _weights(rng, (3, 4))
        return lambda: T.sum((a - b) * a), [a, b]

    def mul_expand(rng):
        a, b = _weights(rng, (2, 3, 4)), _weights(rng, (3, 4))
        return lambda: T.sum(T.mul(a, b) * a), [a, b]

    def scale(rng):
        a = _weights(rng, (5,))
        return lambda: T.sum(T.scale(a, -2.5) * a), [a]

    def concat(rng):
        a, b = _weights(rng, (2, 3, 4)), _weights(rng, (2, 1, 4))
        w = _weights(rng, (2, 4, 4))
        return lambda: T.sum(T.concat([a, b], axis=1) * w), [a, b]

    def max_axis(rng):
        a = _weights(rng, (3, 5))
        w = _weights(rng, (3,))
        return lambda: T.sum(T.max(a, axis=1) * w), [a]

    def mean_axis(rng):
        a = _weights(rng, (3, 4))
        w = _weights(rng, (4,))
        return lambda: T.sum(T.mean(a, axis=0) * w), [a]

    def relu(rng):
        a = _weights(rng, (4, 4))
        w = _weights(rng, (4, 4))
        return lambda: T.sum(T.relu(a) * w), [a]

    def dropout_mask(rng):
        a = _weights(rng, (4, 4))
        keep = (rng.random((4, 4)) > 0.3) / 0.7
        w = _weights(rng, (4, 4))
        return lambda: T.sum(T.apply_mask(a, keep) * w), [a]

    def reshape_transpose(rng):
        a = _weights(rng, (2, 3, 4))
        w = _weights(rng, (4, 6))
        return lambda: T.sum(T.reshape(T.transpose(a, (2, 0, 1)), (4, 6)) * w), [a]

    def softmax(rng):
        a = _weights(rng, (3, 5))
        w = _weights(rng, (3, 5))
        return lambda: T.sum(T.softmax(a, axis=-1) * w), [a]

    def softplus(rng):
        a = T.Tensor(rng.normal(size=6) * 3.0)
        w = _weights(rng, (6,))
        return lambda: T.sum(T.softplus(a) * w), [a]

    def standardize(rng):
        a = _weights(rng, (3, 6))
        w = _weights(rng, (3, 6))
        return lambda: T.sum(T.standardize(a) * w), [a]

    def getitem(rng):
        a = _weights(rng, (3, 4, 2))
        w = _weights(rng, (3, 3, 2))
        return lambda: T.sum(a[:, 1:, :] * w) + T.sum(a[:, 0, :]), [a]

    cases = dict(matmul=matmul, batched_matmul=batched_matmul, shared_matmul=shared_matmul,
                 add_expand=add_expand, sub_mul=sub_mul, mul_expand=mul_expand, scale=scale,
                 concat=concat, max_axis=max_axis, mean_axis=mean_axis, relu=relu,
                 dropout_mask=dropout_mask, reshape_transpose=reshape_transpose, softmax=softmax,
                 softplus=softplus, standardize=standardize, getitem=getitem)
    return cases


@pytest.mark.parametrize("name", sorted(_op_cases()))
def test_op_gradients_match_finite_differences(name):
    builder = _op_cases()[name]
    for seed in SEEDS:
        fn, targets = builder(np.random.default_rng(seed))
        result = check_gradients(fn, targets, name=name)
        assert result.passed, (seed, result.errors)
