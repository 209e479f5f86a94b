import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from okd_forge import nets
from okd_forge import tensor as T
from okd_forge.errors import DimensionError, NonFiniteError, ParameterError, UsageError
from okd_forge.tensor import Tensor

from oracles import finite_difference, max_rel_error

TOL = 1e-4


def grad_check(build_loss, *arrays):
    """Compare autograd against central differences for a loss built from leaf arrays."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    build_loss(*leaves).backward()
    numeric = finite_difference(lambda *xs: build_loss(*[Tensor(x) for x in xs]).item(), arrays)
    return max(max_rel_error(leaf.grad, n) for leaf, n in zip(leaves, numeric))


# -- matmul ---------------------------------------------------------------
def test_matmul_identity():
    eye = np.eye(2)
    np.testing.assert_array_equal(T.matmul(eye, eye).data, eye)


def test_matmul_hand_value():
    out = T.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_gradient_matches_finite_differences():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[1.0], [1.0]])
    (num_a,) = finite_difference(lambda a_: float((a_ @ b).sum()), [a])
    np.testing.assert_allclose(num_a, np.ones((2, 2)), atol=1e-8)
    ta = Tensor(a, requires_grad=True)
    T.sum(T.matmul(ta, b)).backward()
    np.testing.assert_allclose(ta.grad, num_a, atol=1e-8)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


# -- convolutions ---------------------------------------------------------
def test_conv2d_ones_sum():
    out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
    np.testing.assert_array_equal(T.conv2d(x, np.ones((1, 1, 1, 1))).data, x)


@pytest.mark.parametrize("h,k,stride,pad", [(7, 3, 2, 1), (8, 2, 2, 0), (5, 5, 1, 0), (6, 3, 3, 2)])
def test_conv2d_output_size(h, k, stride, pad):
    out = T.conv2d(np.zeros((1, 2, h, h + 1)), np.zeros((3, 2, k, k)), stride=stride, padding=pad)
    assert out.shape == (1, 3, (h + 2 * pad - k) // stride + 1, (h + 1 + 2 * pad - k) // stride + 1)


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 2)), rng.normal(size=4)
    stride, pad = 2, 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (6 + 2 - 3) // 2 + 1, (5 + 2 - 2) // 2 + 1
    ref = np.zeros((2, 4, ho, wo))
    for n in range(2):
        for f in range(4):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + 3, j * stride : j * stride + 2]
                    ref[n, f, i, j] = (patch * w[f]).sum() + b[f]
    np.testing.assert_allclose(T.conv2d(x, w, b, stride, pad).data, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)))


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradient(stride, pad):
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    coef = rng.normal(size=T.conv2d(x, w, b, stride, pad).shape)
    err = grad_check(lambda x_, w_, b_: T.sum(T.mul(T.conv2d(x_, w_, b_, stride, pad), coef)), x, w, b)
    assert err < TOL


def test_conv1d_ones_sum():
    assert T.conv1d(np.ones((1, 1, 4)), np.ones((1, 1, 4))).data.tolist() == [[[4.0]]]


def test_conv1d_identity_kernel():
    x = np.random.default_rng(3).normal(size=(2, 1, 7))
    np.testing.assert_array_equal(T.conv1d(x, np.ones((1, 1, 1))).data, x)


def test_conv1d_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv1d(np.ones((1, 1, 3)), np.ones((1, 1, 4)))


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 2)])
def test_conv1d_gradient(stride, pad):
    rng = np.random.default_rng(4)
    x, w, b = rng.normal(size=(2, 2, 9)), rng.normal(size=(3, 2, 4)), rng.normal(size=3)
    coef = rng.normal(size=T.conv1d(x, w, b, stride, pad).shape)
    err = grad_check(lambda x_, w_, b_: T.sum(T.mul(T.conv1d(x_, w_, b_, stride, pad), coef)), x, w, b)
    assert err < TOL


# -- softmax --------------------------------------------------------------
def test_softmax_uniform_logits():
    for pi in (0.1, 1.0, 4.0):
        np.testing.assert_allclose(T.softmax_temp([[0.0, 0.0, 0.0]], pi).data, [[1 / 3] * 3], atol=1e-15)


@pytest.mark.parametrize(
    "pi,expected",
    # 30-digit mpmath evaluation of exp(z/pi)/sum
    [(1.0, [0.268941421369995, 0.731058578630005]), (4.0, [0.437823499114202, 0.562176500885798])],
)
def test_softmax_values(pi, expected):
    np.testing.assert_allclose(T.softmax_temp([[1.0, 2.0]], pi).data[0], expected, atol=1e-12)


def test_softmax_higher_temperature_is_softer():
    p1 = T.softmax_temp([[1.0, 2.0]], 1.0).data
    p4 = T.softmax_temp([[1.0, 2.0]], 4.0).data
    assert p4.max() < p1.max()


@pytest.mark.parametrize("pi", [0.0, -1.0, float("nan")])
def test_softmax_rejects_bad_temperature(pi):
    with pytest.raises(ParameterError):
        T.softmax_temp([[1.0, 2.0]], pi)


def test_softmax_survives_huge_logits():
    p = T.softmax_temp([[1000.0, -1000.0, 999.0]], 1.0).data
    assert np.isfinite(p).all()
    assert abs(p.sum() - 1) < 1e-12


@settings(max_examples=200, deadline=None)
@given(
    z=arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
             elements=st.floats(-50, 50, allow_nan=False)),
    pi=st.floats(0.05, 50.0),
)
def test_softmax_rows_are_distributions(z, pi):
    p = T.softmax_temp(z, pi).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(
    z=arrays(np.int64, st.integers(2, 8), elements=st.integers(-3000, 3000), unique=True),
    pi=st.floats(0.05, 100.0),
)
def test_softmax_preserves_argmax(z, pi):
    z = z / 100.0  # distinct logits on a grid the float64 softmax can resolve
    assert T.softmax_temp(z[None, :], pi).data.argmax() == z.argmax()


@pytest.mark.parametrize("pi", [1.0, 4.0])
def test_softmax_and_log_softmax_gradients(pi):
    rng = np.random.default_rng(5)
    z, coef = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert grad_check(lambda z_: T.sum(T.mul(T.softmax_temp(z_, pi), coef)), z) < TOL
    assert grad_check(lambda z_: T.sum(T.mul(T.log_softmax_temp(z_, pi), coef)), z) < TOL


# -- backward semantics ---------------------------------------------------
def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_sum_of_squares():
    x0 = np.array([1.0, 2.0, 3.0])
    (numeric,) = finite_difference(lambda v: float((v**2).sum()), [x0])
    x = Tensor(x0, requires_grad=True)
    T.sum(T.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], rtol=0, atol=0)
    np.testing.assert_allclose(x.grad, numeric, atol=1e-8)


def test_backward_accumulates_until_zeroed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.sum(T.scale(x, 3.0))
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(UsageError):
        T.scale(x, 2.0).backward()


def test_backward_requires_tracked_graph():
    with pytest.raises(UsageError):
        T.sum(Tensor([1.0])).backward()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.scale(x, 2.0)
    assert not y.requires_grad


def test_backward_visits_nodes_in_reverse_creation_order(monkeypatch):
    x = Tensor([1.0, 2.0], requires_grad=True)
    a = T.scale(x, 2.0)
    b = T.relu(a)
    c = T.mul(b, a)
    loss = T.sum(c)
    visited = []
    for t in (a, b, c, loss):
        fn = t._backward

        def spy(g, fn=fn, t=t):
            visited.append(t)
            return fn(g)

        t._backward = spy
    loss.backward()
    assert visited == [loss, c, b, a]


def test_backward_is_bitwise_deterministic():
    rng = np.random.default_rng(6)
    xs = rng.normal(size=(5, 4))
    grads = []
    for _ in range(2):
        net = nets.build(nets.ModelSpec("flat", (4,), (nets.Layer.dense(8), nets.Layer.relu(), nets.Layer.dense(3)), 3, 9))
        T.mean(T.mul(net(xs), net(xs))).backward()
        grads.append(np.concatenate([p.grad.ravel() for p in net.parameters()]))
    assert grads[0].tobytes() == grads[1].tobytes()


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    spec = nets.ModelSpec("flat", (4,), (nets.Layer.dense(8), nets.Layer.relu(), nets.Layer.dense(3)), 3, 11)
    net = nets.build(spec)
    x, coef = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
    names = list(net.params)

    def loss_from(*arrays):
        local = nets.Network(spec, {n: a for n, a in zip(names, arrays)})
        return T.sum(T.mul(T.log_softmax_temp(nets.forward(local, x)), coef))

    err = grad_check(loss_from, *[net.params[n].data for n in names])
    assert err < TOL


# -- remaining ops --------------------------------------------------------
ELEMENTWISE_CASES = {
    "add_broadcast": (lambda a, b: T.add(a, b), [(3, 4), (4,)]),
    "sub_broadcast": (lambda a, b: T.sub(a, b), [(3, 1), (3, 4)]),
    "mul_broadcast": (lambda a, b: T.mul(a, b), [(2, 3, 4), (3, 1)]),
    "scale": (lambda a: T.scale(a, -2.5), [(3, 4)]),
    "relu": (lambda a: T.relu(a), [(4, 5)]),
    "exp": (lambda a: T.exp(a), [(3, 3)]),
    "log": (lambda a: T.log(T.add(T.mul(a, a), 0.5)), [(3, 3)]),
    "mean_all": (lambda a: T.mean(a), [(3, 4)]),
    "mean_axis": (lambda a: T.mean(a, axis=1), [(3, 4)]),
    "sum_axes": (lambda a: T.sum(a, axis=(0, 2), keepdims=True), [(2, 3, 4)]),
    "max_pool2d": (lambda a: T.max_pool2d(a, 2), [(2, 2, 4, 6)]),
    "max_pool2d_crop": (lambda a: T.max_pool2d(a, 3), [(1, 2, 7, 6)]),
    "max_pool1d": (lambda a: T.max_pool1d(a, 3), [(2, 2, 10)]),
    "global_avg_pool": (lambda a: T.global_avg_pool(a), [(2, 3, 4, 4)]),
    "flatten": (lambda a: T.flatten(a), [(2, 3, 2)]),
    "clamp_min": (lambda a: T.clamp_min(a, 0.1), [(4, 4)]),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE_CASES))
def test_op_gradients(name):
    fn, shapes = ELEMENTWISE_CASES[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    arrays_ = [rng.normal(size=s) for s in shapes]
    coef = rng.normal(size=fn(*arrays_).shape)
    assert grad_check(lambda *xs: T.sum(T.mul(fn(*xs), coef)), *arrays_) < TOL


def test_max_pool_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(T.max_pool2d(x, 2).data[0, 0], [[5, 7], [13, 15]])


def test_max_pool_tie_sends_gradient_to_first():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    T.sum(T.max_pool2d(x, 2)).backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError):
        T.exp(Tensor([1000.0]))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0]))


def test_tensor_data_is_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_broadcast_mismatch():
    with pytest.raises(DimensionError):
        T.add(np.ones((2, 3)), np.ones((4,)))


# -- serialization --------------------------------------------------------
def test_serialization_layout():
    buf = io.BytesIO()
    T.write_tensor(buf, Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    raw = buf.getvalue()
    assert raw[:4] == b"ODT1"
    assert struct.unpack("<I", raw[4:8]) == (2,)
    assert struct.unpack("<2Q", raw[8:24]) == (2, 3)
    assert np.frombuffer(raw[24:], dtype="<f8").tolist() == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.lists(st.integers(1, 4), min_size=0, max_size=4).map(tuple),
              elements=st.floats(-1e300, 1e300, allow_nan=False)))
def test_serialization_round_trip(a):
    buf = io.BytesIO()
    T.write_tensor(buf, Tensor(a))
    buf.seek(0)
    back = T.read_tensor(buf)
    assert back.shape == a.shape
    assert back.data.tobytes() == np.ascontiguousarray(a).tobytes()


def test_serialization_rejects_bad_magic():
    with pytest.raises(ValueError):
        T.read_tensor(io.BytesIO(b"XXXX\x00\x00\x00\x00"))
