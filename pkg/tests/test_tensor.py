import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fibrosisnet import tensor as T
from fibrosisnet.errors import GraphCycle, NonFiniteValue, ShapeMismatch
from fibrosisnet.tensor import AdamState, LrSchedule, Tensor, adam_step, lr_at

from oracles import central_difference, naive_conv2d, naive_depthwise, naive_pointwise, relative_error

GRAD_TOL = 1e-5
CASES = 20


def _away_from_zero(rng, shape, margin=0.05):
    """Random values with |v| >= margin so kinks stay outside the FD stencil."""
    v = rng.normal(size=shape)
    return np.where(np.abs(v) < margin, np.sign(v + 1e-12) * margin, v)


def gradcheck(build, arrays, seed=0):
    """Max relative error between backprop and central differences for sum(R * build(...))."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = build(*[Tensor(a) for a in arrays]).data
    R = np.random.default_rng(seed).normal(size=probe.shape)

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*leaves).backward(R)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def f(*arrs):
        return float(np.sum(build(*[Tensor(a) for a in arrs]).data * R))

    numeric = central_difference(f, arrays, h=1e-5)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def _conv_case(rng):
    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 2, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = rng.integers(k + 1, 7, size=2)
    return (n, c, h, w), (o, c, k, k), o, stride, pad


OPS = {
    "add": lambda rng: (lambda a, b: T.add(a, b), [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
    "sub": lambda rng: (lambda a, b: a - b, [rng.normal(size=(2, 3)), rng.normal(size=(2, 1))]),
    "mul": lambda rng: (lambda a, b: T.mul(a, b), [rng.normal(size=(3, 1, 2)), rng.normal(size=(4, 2))]),
    "neg": lambda rng: (T.neg, [rng.normal(size=(5,))]),
    "residual_add": lambda rng: (T.residual_add, [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))]),
    "relu": lambda rng: (T.relu, [_away_from_zero(rng, (4, 5))]),
    "sum": lambda rng: (T.tensor_sum, [rng.normal(size=(3, 3))]),
    "mean": lambda rng: (T.mean, [rng.normal(size=(2, 5))]),
    "reshape": lambda rng: (lambda a: T.reshape(a, (6, 2)), [rng.normal(size=(3, 4))]),
    "concat": lambda rng: (
        lambda a, b: T.concat([a, b], axis=1),
        [rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 1, 2, 2))],
    ),
    "matmul": lambda rng: (T.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
    "dense": lambda rng: (T.dense, [rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=(3,))]),
    "global_avg_pool": lambda rng: (T.global_avg_pool, [rng.normal(size=(2, 3, 4, 5))]),
    "avg_pool2d": lambda rng: (lambda x: T.avg_pool2d(x, 2), [rng.normal(size=(1, 2, 5, 6))]),
    "mae_loss": lambda rng: (
        lambda p: T.mae_loss(p, np.zeros((6, 1))),
        [_away_from_zero(rng, (6, 1))],
    ),
}


def _conv_op(rng):
    xs, ws, o, stride, pad = _conv_case(rng)
    return (
        lambda x, w, b: T.conv2d(x, w, b, stride=stride, pad=pad),
        [rng.normal(size=xs), rng.normal(size=ws), rng.normal(size=(o,))],
    )


def _depthwise_op(rng):
    c = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = rng.integers(k + 1, 7, size=2)
    return (
        lambda x, w_, b: T.depthwise_conv2d(x, w_, b, stride=stride, pad=pad),
        [rng.normal(size=(2, c, h, w)), rng.normal(size=(c, 1, k, k)), rng.normal(size=(c,))],
    )


def _pointwise_op(rng):
    c, o = rng.integers(1, 4, size=2)
    stride = int(rng.integers(1, 3))
    h, w = rng.integers(2, 6, size=2)
    return (
        lambda x, w_, b: T.pointwise_conv(x, w_, b, stride=stride),
        [rng.normal(size=(2, c, h, w)), rng.normal(size=(o, c, 1, 1)), rng.normal(size=(o,))],
    )


OPS.update(conv2d=_conv_op, depthwise_conv2d=_depthwise_op, pointwise_conv=_pointwise_op)


@pytest.mark.parametrize("op", sorted(OPS))
def test_gradient_matches_central_differences(op):
    worst = 0.0
    for case in range(CASES):
        rng = np.random.default_rng([17, case])
        build, arrays = OPS[op](rng)
        worst = max(worst, gradcheck(build, arrays, seed=case))
    assert worst < GRAD_TOL, f"{op}: max relative error {worst:.3e}"


def test_gradient_through_composite_graph():
    # x reused along two paths; gradients must accumulate
    def build(x, w):
        h = T.relu(T.conv2d(x, w, pad=1))
        return T.add(T.global_avg_pool(h), T.global_avg_pool(x))

    rng = np.random.default_rng(3)
    assert gradcheck(build, [rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(2, 2, 3, 3))]) < GRAD_TOL


# ------------------------------------------------------------ conv oracles


@pytest.mark.parametrize("case", range(10))
def test_conv2d_matches_naive_loops(case):
    rng = np.random.default_rng([5, case])
    xs, ws, o, stride, pad = _conv_case(rng)
    x, w, b = rng.normal(size=xs), rng.normal(size=ws), rng.normal(size=o)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, b, stride, pad), atol=1e-5, rtol=0)


@pytest.mark.parametrize("case", range(10))
def test_depthwise_matches_naive_loops(case):
    rng = np.random.default_rng([6, case])
    c, k = int(rng.integers(1, 5)), int(rng.choice([1, 3, 5]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 3))
    h, w = rng.integers(k, 9, size=2)
    x, wt, b = rng.normal(size=(2, c, h, w)), rng.normal(size=(c, 1, k, k)), rng.normal(size=c)
    got = T.depthwise_conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=stride, pad=pad).data
    np.testing.assert_allclose(got, naive_depthwise(x, wt, b, stride, pad), atol=1e-5, rtol=0)


@pytest.mark.parametrize("case", range(10))
def test_pointwise_matches_naive_loops(case):
    rng = np.random.default_rng([7, case])
    c, o = rng.integers(1, 6, size=2)
    stride = int(rng.integers(1, 3))
    h, w = rng.integers(1, 8, size=2)
    x, wt, b = rng.normal(size=(3, c, h, w)), rng.normal(size=(o, c, 1, 1)), rng.normal(size=o)
    got = T.pointwise_conv(Tensor(x), Tensor(wt), Tensor(b), stride=stride).data
    np.testing.assert_allclose(got, naive_pointwise(x, wt, b, stride), atol=1e-5, rtol=0)


def test_float32_conv_within_tolerance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    got = T.conv2d(Tensor(x), Tensor(w), pad=1).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, None, 1, 1), atol=1e-4)


def test_depthwise_then_pointwise_equals_factored_full_conv():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 3, 6, 6))
    dw = rng.normal(size=(3, 1, 3, 3))
    pw = rng.normal(size=(5, 3, 1, 1))
    sep = T.pointwise_conv(T.depthwise_conv2d(Tensor(x), Tensor(dw), pad=1), Tensor(pw)).data
    full_w = pw[:, :, 0, 0][:, :, None, None] * dw[None, :, 0]
    np.testing.assert_allclose(sep, naive_conv2d(x, full_w, None, 1, 1), atol=1e-10)


# ----------------------------------------------------------- engine rules


def test_shape_mismatch_in_conv():
    with pytest.raises(ShapeMismatch):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 3, 3, 3))))


def test_residual_add_requires_equal_shapes():
    with pytest.raises(ShapeMismatch):
        T.residual_add(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 2, 2))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_is_rejected():
    with pytest.raises(NonFiniteValue):
        T.mul(Tensor(np.array([1e200])), Tensor(np.array([1e200])))


def test_cycle_detection():
    a = Tensor(np.ones(2), requires_grad=True)
    b = T.add(a, a)
    c = T.add(b, a)
    b._parents = (c,)  # forge a loop
    with pytest.raises(GraphCycle):
        c.backward(np.ones(2))


def test_backward_without_seed_needs_scalar():
    with pytest.raises(ShapeMismatch):
        T.add(Tensor(np.ones(3), requires_grad=True), 1.0).backward()


def test_shared_leaf_gradient_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    T.mul(x, x).backward(np.ones(1))
    np.testing.assert_allclose(x.grad, [4.0])


def test_mae_subgradient_zero_at_ties():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.mae_loss(p, np.array([1.0, 0.0])).backward()
    np.testing.assert_array_equal(p.grad, [0.0, 0.5])


def test_deep_chain_does_not_hit_recursion_limit():
    x = Tensor(np.ones(1), requires_grad=True)
    y = x
    for _ in range(5000):
        y = T.add(y, 1.0)
    y.backward(np.ones(1))
    assert x.grad[0] == 1.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 3), min_size=1, max_size=3), st.data())
def test_broadcast_gradient_sums_over_expanded_axes(shape, data):
    shape = tuple(shape)
    small = tuple(data.draw(st.sampled_from([1, n])) for n in shape)
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=shape), requires_grad=True)
    b = Tensor(rng.normal(size=small), requires_grad=True)
    T.add(a, b).backward(np.ones(shape))
    assert b.grad.shape == small
    np.testing.assert_allclose(b.grad, np.full(small, np.prod(shape) / np.prod(small)))


# -------------------------------------------------------------- optimizer


def test_lr_schedule_staircase():
    assert lr_at(0) == pytest.approx(1e-4)
    assert lr_at(99) == pytest.approx(1e-4)
    assert lr_at(100) == pytest.approx(0.99e-4)
    assert lr_at(250) == pytest.approx(1e-4 * 0.99**2)
    smooth = LrSchedule(staircase=False)
    assert lr_at(50, smooth) == pytest.approx(1e-4 * 0.99**0.5)


def test_lr_schedule_validation():
    with pytest.raises(ValueError):
        LrSchedule(base_lr=0)
    with pytest.raises(ValueError):
        LrSchedule(decay=1.5)


def test_adam_first_step_moves_by_lr_times_sign():
    p = {"w": Tensor(np.array([1.0, -1.0, 0.5]), requires_grad=True)}
    adam_step(p, {"w": np.array([0.3, -2.0, 5.0])}, AdamState(), 1e-2)
    np.testing.assert_allclose(p["w"].data, [0.99, -0.99, 0.49], atol=1e-7)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(2)
    w = rng.normal(size=4)
    p = {"w": Tensor(w.copy(), requires_grad=True)}
    state = AdamState()
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step(p, {"w": g}, state, 1e-3)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p["w"].data, w, atol=1e-12)


def test_adam_minimizes_quadratic():
    p = {"w": Tensor(np.array([3.0, -2.0]), requires_grad=True)}
    state = AdamState()
    for _ in range(2000):
        adam_step(p, {"w": 2 * p["w"].data}, state, 0.05)
    assert np.abs(p["w"].data).max() < 1e-2


# ---------------------------------------------------------- serialization


def test_param_bytes_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a.w": rng.normal(size=(2, 3, 1, 1)).astype(np.float32), "b": np.float32(1.5) * np.ones(4, np.float32), "s": np.array(2.0, np.float32)}
    T.save_params(params, tmp_path / "p.fnet")
    back = T.load_params(tmp_path / "p.fnet")
    assert list(back) == list(params)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])
    assert T.params_to_bytes(back) == T.params_to_bytes(params)


def test_param_bytes_rejects_garbage():
    with pytest.raises(ValueError):
        T.params_from_bytes(b"NOPE")
    blob = T.params_to_bytes({"w": np.ones(3, np.float32)})
    with pytest.raises(ValueError):
        T.params_from_bytes(blob[:-2])


def test_kaiming_bound():
    w = T.kaiming_uniform(np.random.default_rng(0), (1000,), fan_in=6)
    assert np.abs(w).max() <= 1.0
    assert np.abs(w).max() > 0.95
