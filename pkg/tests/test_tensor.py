import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import check_op, rel_err
from ranklab import tensor as T
from ranklab.errors import ContractError, DegenerateInputError, DimensionError, GradientError
from ranklab.tensor import Tensor

TOL = 1e-4


def away_from_zero(rng, shape, gap=0.05):
    x = rng.uniform(-1, 1, shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


# --- examples -----------------------------------------------------------

def test_matmul_examples():
    a = T.tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((T.tensor(np.eye(2)) @ a).data, a.data)
    assert (T.tensor([[1.0, 0.0]]) @ T.tensor([[2.0], [3.0]])).data.tolist() == [[2.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        T.matmul(T.tensor(np.ones(3)), T.tensor(np.ones((3, 1))))


def test_conv2d_examples():
    out = T.conv2d(T.tensor(np.ones((1, 3, 3))), T.tensor(np.ones((1, 1, 3, 3))), 1)
    assert out.data.tolist() == [[[9.0]]]
    x = np.arange(25.0).reshape(1, 5, 5)
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(T.conv2d(T.tensor(x), T.tensor(k)).data[0], x[0, 1:4, 1:4])


def test_conv2d_errors():
    with pytest.raises(DimensionError):
        T.conv2d(T.tensor(np.ones((1, 2, 2))), T.tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(DimensionError):
        T.conv2d(T.tensor(np.ones((2, 4, 4))), T.tensor(np.ones((1, 1, 3, 3))))


def test_conv2d_stride_output_size(rng):
    x = rng.standard_normal((2, 9, 11))
    k = rng.standard_normal((3, 2, 3, 2))
    out = T.conv2d(T.tensor(x), T.tensor(k), stride=2)
    assert out.shape == (3, (9 - 3) // 2 + 1, (11 - 2) // 2 + 1)
    # direct definition of cross-correlation
    ref = np.zeros(out.shape)
    for f in range(3):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                ref[f, i, j] = (x[:, 2 * i:2 * i + 3, 2 * j:2 * j + 2] * k[f]).sum()
    np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-12)


def test_l2_normalize_examples():
    np.testing.assert_allclose(T.l2_normalize(T.tensor([3.0, 4.0])).data, [0.6, 0.8], rtol=1e-15)
    u = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(T.l2_normalize(T.tensor(u)).data, u)
    with pytest.raises(DegenerateInputError):
        T.l2_normalize(T.tensor([0.0, 0.0]))


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3)))
def test_l2_normalize_unit_norm(v):
    if np.linalg.norm(v) < 1e-6:
        return
    assert abs(np.linalg.norm(T.l2_normalize(T.tensor(v)).data) - 1.0) < 1e-9


def test_backward_examples(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
    y = Tensor(rng.standard_normal(5), requires_grad=True)
    (y * y).sum().backward()
    np.testing.assert_allclose(y.grad, 2 * y.data)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_twice_is_an_error():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GradientError):
        loss.backward()
    # a fresh graph over the same leaf is refused until grads are zeroed
    with pytest.raises(GradientError):
        (x * 3.0).sum().backward()
    x.zero_grad()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, 3 * np.ones(3))


def test_item_requires_scalar():
    with pytest.raises(ContractError):
        T.tensor([1.0, 2.0]).item()


def test_hinge_subgradient_at_zero():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    T.hinge(x).sum().backward()
    assert x.grad.tolist() == [0.0, 0.0, 1.0]
    assert T.hinge(T.tensor([-2.0, 0.0, 3.0])).data.tolist() == [0.0, 0.0, 3.0]


def test_distance_subgradient_at_coincidence():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    T.pairwise_distance(a, np.ones((1, 3))).sum().backward()
    np.testing.assert_array_equal(a.grad, 0.0)
    b = Tensor(np.ones(3), requires_grad=True)
    T.norm(b - np.ones(3)).backward()
    np.testing.assert_array_equal(b.grad, 0.0)


def test_sign_is_forward_only():
    x = Tensor(np.array([-2.0, 0.0, 3.0]), requires_grad=True)
    s = T.sign(x)
    assert s.data.tolist() == [-1.0, 0.0, 1.0]
    assert not s.requires_grad


def test_grad_shapes_match_data(rng):
    w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    x = rng.standard_normal((5, 4))
    T.relu(T.tensor(x) @ w + b).mean().backward()
    assert w.grad.shape == w.shape and b.grad.shape == b.shape
    assert np.all(np.isfinite(w.grad)) and np.all(np.isfinite(b.grad))


def test_topological_order_inputs_first(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    y = T.exp(x) * x
    z = (y + x).sum()
    order = T.topological_order(z)
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]
    assert len(pos) == len(order)


# --- finite differences: every differentiable op, >= 100 instances ------

OPS = {
    "add": (lambda a, b: (a + b).sum() * 1.0, lambda r: [r.standard_normal((3, 4)), r.standard_normal((1, 4))]),
    "sub": (lambda a, b: ((a - b) ** 2).sum(), lambda r: [r.standard_normal((3, 4)), r.standard_normal(4)]),
    "mul": (lambda a, b: (a * b).sum(), lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 3))]),
    "div": (lambda a, b: (a / b).sum(), lambda r: [r.standard_normal(5), r.uniform(0.5, 2, 5)]),
    "matmul": (lambda a, b: (T.matmul(a, b) ** 2).sum(), lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
    "relu": (lambda a: (T.relu(a) ** 2).sum(), lambda r: [away_from_zero(r, (6,))]),
    "hinge": (lambda a: (T.hinge(a) * a).sum(), lambda r: [away_from_zero(r, (6,))]),
    "sqrt": (lambda a: T.sqrt(a).sum(), lambda r: [r.uniform(0.2, 3, 6)]),
    "exp": (lambda a: T.exp(a).sum(), lambda r: [r.standard_normal(6)]),
    "pow": (lambda a: (a ** 3).sum(), lambda r: [r.standard_normal(6)]),
    "clamp": (lambda a: (T.clamp(a, -0.5, 0.5) * a).sum(), lambda r: [away_from_zero(r, (6,)) * 1.0 + 0.0]),
    "sum_axis": (lambda a: (a.sum(axis=1) ** 2).sum(), lambda r: [r.standard_normal((3, 4))]),
    "mean": (lambda a: (a.mean(axis=0) ** 2).sum(), lambda r: [r.standard_normal((3, 4))]),
    "max": (lambda a: a.max(axis=1).sum(), lambda r: [r.standard_normal((3, 5))]),
    "take": (lambda a: (a[np.array([0, 2, 2])] ** 2).sum(), lambda r: [r.standard_normal((4, 3))]),
    "reshape_T": (lambda a: (a.reshape(2, 6).T ** 2).sum(), lambda r: [r.standard_normal((3, 4))]),
    "concat": (lambda a, b: (T.concat([a, b]) ** 2).sum(), lambda r: [r.standard_normal((2, 3)), r.standard_normal((1, 3))]),
    "l2_normalize": (lambda a: (T.l2_normalize(a) * np.arange(1.0, 6.0)).sum(), lambda r: [r.standard_normal((2, 5))]),
    "norm": (lambda a: T.norm(a).sum(), lambda r: [r.standard_normal((3, 4))]),
    "pairwise_distance": (lambda a, b: T.pairwise_distance(a, b).sum(), lambda r: [r.standard_normal((3, 4)), r.standard_normal((2, 4))]),
    "row_distance": (lambda a, b: T.row_distance(a, b).sum(), lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "conv2d": (lambda x, k: (T.conv2d(x, k) ** 2).sum(), lambda r: [r.standard_normal((2, 6, 5)), r.standard_normal((3, 2, 3, 2))]),
    "conv2d_stride2": (lambda x, k: (T.conv2d(x, k, stride=2) ** 2).sum(), lambda r: [r.standard_normal((1, 2, 7, 7)), r.standard_normal((2, 2, 3, 3))]),
    "maxpool2d": (lambda x: (T.maxpool2d(x, 2) ** 2).sum(), lambda r: [r.standard_normal((2, 5, 4))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_finite_differences(name):
    fn, make = OPS[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    worst = max(check_op(fn, make(rng)) for _ in range(100))
    assert worst < TOL, f"{name}: worst relative error {worst:.2e}"


def test_matmul_gradients_tight(rng):
    for _ in range(20):
        worst = check_op(lambda a, b: (T.matmul(a, b) * np.arange(6.0).reshape(3, 2)).sum(),
                         [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))])
        assert worst < 1e-6


def test_l2_normalize_gradient_tight(rng):
    for _ in range(20):
        c = rng.standard_normal(6)
        assert check_op(lambda v: (T.l2_normalize(v) * c).sum(), [rng.standard_normal(6)]) < 1e-6


def test_conv_gradient_tight(rng):
    for _ in range(10):
        assert check_op(lambda x, k: (T.conv2d(x, k) ** 2).sum(),
                        [rng.standard_normal((2, 5, 5)), rng.standard_normal((2, 2, 3, 3))]) < 1e-5


def test_rel_err_helper():
    assert rel_err(1.0, 1.0) == 0.0
    assert rel_err(0.0, 0.0) == 0.0
