import numpy as np
import pytest

from stadb import tensor as T
from stadb.errors import ContractError, DimensionError
from stadb.optim import AdamState, adam_step
from stadb.tensor import Tensor


def naive_conv(x, w, b, stride, padding):
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out))
    for i in range(n):
        for o in range(c_out):
            for y in range(h_out):
                for z in range(w_out):
                    acc = b[o]
                    for c in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, c, u, v] * xp[i, c, y * stride + u, z * stride + v]
                    out[i, o, y, z] = acc
    return out


# --- conv2d ---

def test_conv2d_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, 4.0)


def test_conv2d_identity_kernel(rng):
    x = rng.normal(size=(2, 1, 4, 5))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_naive_loops(rng, stride, padding):
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, padding), rtol=0, atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


# --- linear ---

def test_linear_identity_and_bias(rng):
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(T.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    b = np.array([1.0, -2.0])
    out = T.linear(Tensor(x), Tensor(np.zeros((2, 4))), Tensor(b))
    np.testing.assert_array_equal(out.data, np.tile(b, (3, 1)))


def test_linear_matches_naive_loops(rng):
    x, w, b = rng.normal(size=(4, 8)), rng.normal(size=(3, 8)), rng.normal(size=3)
    expected = np.array([[sum(w[j, i] * x[n, i] for i in range(8)) + b[j] for j in range(3)] for n in range(4)])
    np.testing.assert_allclose(T.linear(Tensor(x), Tensor(w), Tensor(b)).data, expected, rtol=0, atol=1e-12)


def test_linear_width_mismatch():
    with pytest.raises(DimensionError):
        T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


# --- activations ---

def test_activation_values():
    assert T.activation(Tensor([0.0]), "sigmoid").data[0] == 0.5
    np.testing.assert_array_equal(T.activation(Tensor([[0.0, 0.0]]), "softmax_rows").data, [[0.5, 0.5]])
    np.testing.assert_array_equal(T.activation(Tensor([-2.5, 3.1]), "relu").data, [0.0, 3.1])


def test_activation_ranges(rng):
    x = Tensor(rng.normal(scale=5.0, size=(5, 7)))
    s = T.sigmoid(x).data
    assert ((s > 0) & (s < 1)).all()
    np.testing.assert_allclose(T.softmax_rows(x).data.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_unknown_activation():
    with pytest.raises(ContractError):
        T.activation(Tensor([1.0]), "tanh")


# --- pooling / broadcast ---

def test_pool_examples(rng):
    x = Tensor(np.array([[[[1.0, 3.0], [5.0, 7.0]]]]))
    assert T.pool(x, "gap").data.item() == 4.0
    two = Tensor(np.stack([np.full((3, 3), 2.0), np.full((3, 3), 4.0)])[None])
    np.testing.assert_array_equal(T.pool(two, "channel_avg").data, 3.0)

    r = rng.normal(size=(2, 3, 4, 5))
    expected = np.array([[max(r[n, c].ravel()) for c in range(3)] for n in range(2)])
    np.testing.assert_array_equal(T.pool(Tensor(r), "gmp").data[:, :, 0, 0], expected)


def test_max_pool_gradient_goes_to_first_maximum():
    x = Tensor(np.array([[[[2.0, 1.0], [2.0, 0.0]]]]), requires_grad=True)
    T.backward(T.sum_all(T.pool(x, "gmp")))
    np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])


def test_broadcast_mul(rng):
    f = rng.normal(size=(2, 3, 2, 2))
    np.testing.assert_array_equal(T.broadcast_mul(Tensor(f), Tensor(np.ones((2, 3, 1, 1)))).data, f)
    np.testing.assert_array_equal(T.broadcast_mul(Tensor(f), Tensor(np.zeros((2, 1, 2, 2)))).data, 0.0)

    m = rng.normal(size=(2, 3, 1, 1))
    expected = np.empty_like(f)
    for n, c, h, w in np.ndindex(f.shape):
        expected[n, c, h, w] = f[n, c, h, w] * m[n, c, 0, 0]
    np.testing.assert_allclose(T.broadcast_mul(Tensor(f), Tensor(m)).data, expected, rtol=0, atol=1e-12)

    with pytest.raises(DimensionError):
        T.broadcast_mul(Tensor(f), Tensor(np.ones((2, 3, 2, 1))))


# --- backward ---

def test_backward_sigmoid_at_zero():
    x = Tensor(np.zeros(4), requires_grad=True)
    T.backward(T.sum_all(T.sigmoid(x)))
    np.testing.assert_array_equal(x.grad, 0.25)


def test_backward_linear_function_and_accumulation():
    c = np.array([1.5, -2.0, 3.0])
    x = Tensor(np.ones(3), requires_grad=True)
    loss = T.sum_all(T.mul(x, c))
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, c)
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * c)
    x.zero_grad()
    assert x.grad is None


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.sigmoid(x))


def test_diamond_graph_matches_finite_differences(rng):
    def fn(x):
        shared = T.sigmoid(x)
        return T.sum_all(T.add(T.mul(shared, shared), T.relu(shared)))
    assert T.grad_check(fn, Tensor(rng.normal(size=(3, 2)))) < 1e-6


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.sigmoid(x)
    assert not y.requires_grad and y.is_leaf


# --- grad_check ---

def test_grad_check_examples(rng):
    assert T.grad_check(lambda x: T.sum_all(T.sigmoid(x)), Tensor(rng.normal(size=(4, 3)))) < 1e-6
    away = rng.choice([-1.0, 1.0], size=(4, 3)) * rng.uniform(0.1, 2.0, size=(4, 3))
    assert T.grad_check(lambda x: T.sum_all(T.relu(x)), Tensor(away)) < 1e-6
    assert T.grad_check(lambda x: Tensor(3.0), Tensor(rng.normal(size=3))) == 0.0


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ContractError):
        T.grad_check(lambda x: T.sum_all(x), Tensor([1.0]), eps=0.0)


# --- adam ---

def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    adam_step({"p": p}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step():
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    state = AdamState()
    adam_step({"p": p}, state, lr=0.1)
    assert p.data[0] == pytest.approx(-0.1 / (1.0 + 1e-8), rel=1e-12)
    assert state.step == 1
    adam_step({"p": p}, state, lr=0.1)
    assert state.step == 2
    np.testing.assert_array_equal(p.grad, [1.0])


def test_adam_missing_gradient_and_bad_lr():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ContractError):
        adam_step({"p": p}, AdamState(), lr=0.1)
    p.grad = np.zeros(2)
    with pytest.raises(ContractError):
        adam_step({"p": p}, AdamState(), lr=0.0)
