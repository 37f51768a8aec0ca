import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qcfs import tensor as tn
from qcfs.activation import clip_act
from qcfs.errors import ConfigurationError, DimensionError, NonFiniteError, UsageError


def loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def loop_conv(x, w, stride, pad):
    c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((f, ho, wo))
    for fi in range(f):
        for i in range(ho):
            for j in range(wo):
                for ci in range(c):
                    for di in range(k):
                        for dj in range(k):
                            out[fi, i, j] += xp[ci, i * stride + di, j * stride + dj] * w[fi, ci, di, dj]
    return out


def loop_avgpool(x, k):
    c, h, w = x.shape
    out = np.zeros((c, h // k, w // k))
    for ci in range(c):
        for i in range(h // k):
            for j in range(w // k):
                out[ci, i, j] = x[ci, i * k:(i + 1) * k, j * k:(j + 1) * k].mean()
    return out


# matmul

def test_matmul_identity():
    out = tn.matmul([[1.0, 0.0], [0.0, 1.0]], [[3.0], [4.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_matmul_weighted_spike_rates():
    out = tn.matmul([[2.0, -2.0]], [[0.6], [0.4]])
    assert out.data[0, 0] == pytest.approx(0.4, abs=1e-15)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(tn.matmul(a, b).data, loop_matmul(a, b), atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        tn.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_backward_rules():
    rng = np.random.default_rng(1)
    tape = tn.Tape()
    a, b = tape.leaf(rng.normal(size=(3, 4))), tape.leaf(rng.normal(size=(4, 2)))
    c = tn.matmul(a, b)
    tn.backward(tn.tsum(c))
    g = np.ones((3, 2))
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


# conv

def test_conv_zero_input():
    w = np.random.default_rng(2).normal(size=(2, 1, 3, 3))
    out = tn.conv2d(np.zeros((1, 3, 3)), w, 1, 1)
    assert out.shape == (2, 3, 3)
    assert np.all(out.data == 0)


def test_conv_identity_kernel():
    x = np.arange(9.0).reshape(1, 3, 3)
    out = tn.conv2d(x, np.ones((1, 1, 1, 1)), 1, 0)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_conv_matches_six_loop(stride, pad):
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    np.testing.assert_allclose(tn.conv2d(x, w, stride, pad).data, loop_conv(x, w, stride, pad), atol=1e-12)


def test_conv_non_integral_output():
    with pytest.raises(ConfigurationError):
        tn.conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 3, 3)), 2, 0)


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    x0, w0 = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    probe = rng.normal(size=(1, 3, 3, 3))
    dx, dw = tn.conv2d_backward(x0, w0, probe, 2, 1)

    def f(xv, wv):
        return float(np.sum(tn.conv2d_forward(xv, wv, 2, 1) * probe))

    eps = 1e-6
    for idx in np.ndindex(x0.shape):
        d = np.zeros_like(x0)
        d[idx] = eps
        assert dx[idx] == pytest.approx((f(x0 + d, w0) - f(x0 - d, w0)) / (2 * eps), rel=1e-6, abs=1e-8)
    for idx in np.ndindex(w0.shape):
        d = np.zeros_like(w0)
        d[idx] = eps
        assert dw[idx] == pytest.approx((f(x0, w0 + d) - f(x0, w0 - d)) / (2 * eps), rel=1e-6, abs=1e-8)


# pooling

def test_avgpool_constant():
    out = tn.avgpool2d(np.full((2, 4, 4), 3.5), 2)
    np.testing.assert_array_equal(out.data, np.full((2, 2, 2), 3.5))


def test_avgpool_four_values():
    out = tn.avgpool2d(np.array([[[1.0, 3.0], [5.0, 7.0]]]), 2)
    np.testing.assert_array_equal(out.data, [[[4.0]]])


def test_avgpool_matches_window_means():
    x = np.random.default_rng(5).normal(size=(3, 4, 4))
    np.testing.assert_allclose(tn.avgpool2d(x, 2).data, loop_avgpool(x, 2), atol=1e-12)


def test_avgpool_indivisible():
    with pytest.raises(ConfigurationError):
        tn.avgpool2d(np.ones((1, 5, 4)), 2)


def test_avgpool_backward_uniform():
    tape = tn.Tape()
    x = tape.leaf(np.random.default_rng(6).normal(size=(1, 1, 6, 6)))
    tn.backward(tn.tsum(tn.avgpool2d(x, 3)))
    np.testing.assert_allclose(x.grad, np.full((1, 1, 6, 6), 1 / 9))


def test_maxpool_backward_routes_to_argmax():
    tape = tn.Tape()
    x = tape.leaf(np.array([[[[1.0, 4.0], [2.0, 3.0]]]]))
    y = tn.maxpool2d(x, 2)
    assert y.data[0, 0, 0, 0] == 4.0
    tn.backward(tn.tsum(y))
    np.testing.assert_array_equal(x.grad, [[[[0, 1], [0, 0]]]])


# tape

def test_linear_loss_gradient_is_input():
    x = np.array([0.5, -1.0, 2.0])
    tape = tn.Tape()
    w = tape.leaf(np.array([[1.0, 2.0, 3.0]]))
    tn.backward(tn.tsum(tn.matmul(w, x.reshape(3, 1))))
    np.testing.assert_array_equal(w.grad, x.reshape(1, 3))


def test_backward_on_untracked_tensor():
    with pytest.raises(UsageError):
        tn.backward(tn.tsum(np.ones(3)))


def test_backward_requires_scalar():
    tape = tn.Tape()
    x = tape.leaf(np.ones((2, 2)))
    with pytest.raises(UsageError):
        tn.backward(tn.scale(x, 2.0))


def test_tape_replayed_once():
    tape = tn.Tape()
    x = tape.leaf(np.ones(3))
    loss = tn.tsum(x)
    tn.backward(loss)
    with pytest.raises(UsageError):
        tn.backward(loss)


def test_mixed_tapes_rejected():
    a, b = tn.Tape().leaf(np.ones((1, 2))), tn.Tape().leaf(np.ones((2, 1)))
    with pytest.raises(UsageError):
        tn.matmul(a, b)


def test_non_finite_surfaces():
    with pytest.raises(NonFiniteError):
        tn.scale(np.array([1.0, np.inf]), 1.0)
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        tn.matmul([[1e308]], [[1e308]])


def test_records_visited_once_in_reverse():
    tape = tn.Tape()
    x = tape.leaf(np.ones((1, 2)))
    order = []
    y = tn.apply("first", x.data * 2, (x,), lambda g: (order.append("first") or g * 2,))
    z = tn.apply("second", y.data + 1, (y,), lambda g: (order.append("second") or g,))
    tn.backward(tn.tsum(z))
    assert order == ["second", "first"]
    np.testing.assert_array_equal(x.grad, [[2.0, 2.0]])


def _clip_net(x, w1, b1, lam1, w2, b2, lam2, w3, b3):
    h = tn.add_bias(tn.conv2d(x, w1, 1, 1), b1)
    h = clip_act(h, lam1)
    h = tn.avgpool2d(h, 2)
    h = tn.add_bias(tn.conv2d(h, w2, 1, 0), b2)
    h = clip_act(h, lam2)
    h = tn.flatten(h)
    return tn.tsum(tn.dense(h, w3, b3))


def _clip_net_values(rng):
    return {
        "x": rng.normal(size=(2, 1, 6, 6)),
        "w1": rng.normal(0, 0.6, size=(3, 1, 3, 3)), "b1": rng.normal(0, 0.1, 3),
        "lam1": np.asarray(1.3),
        "w2": rng.normal(0, 0.6, size=(2, 3, 2, 2)), "b2": rng.normal(0, 0.1, 2),
        "lam2": np.asarray(0.9),
        "w3": rng.normal(size=(4, 2 * 2 * 2)), "b3": rng.normal(size=4),
    }


def _preactivation_margin(v):
    z1 = tn.conv2d_forward(v["x"], v["w1"], 1, 1) + v["b1"].reshape(1, -1, 1, 1)
    a1 = np.clip(z1, 0, float(v["lam1"]))
    z2 = tn.conv2d_forward(tn.avgpool2d_forward(a1, 2), v["w2"], 1, 0) + v["b2"].reshape(1, -1, 1, 1)
    m = np.inf
    for z, lam in ((z1, float(v["lam1"])), (z2, float(v["lam2"]))):
        m = min(m, np.abs(z).min(), np.abs(z - lam).min())
    return m


def test_clip_network_finite_differences():
    rng = np.random.default_rng(7)
    while True:
        vals = _clip_net_values(rng)
        if _preactivation_margin(vals) >= 1e-3:
            break
    tape = tn.Tape()
    leaves = {k: tape.leaf(v) for k, v in vals.items()}
    tn.backward(_clip_net(**leaves))
    eps = 1e-5
    for name, arr in vals.items():
        flat = arr.reshape(-1)
        for j in range(flat.size):
            plus = {k: v.copy() for k, v in vals.items()}
            minus = {k: v.copy() for k, v in vals.items()}
            plus[name].reshape(-1)[j] += eps
            minus[name].reshape(-1)[j] -= eps
            num = (float(_clip_net(**plus).data) - float(_clip_net(**minus).data)) / (2 * eps)
            ana = leaves[name].grad.reshape(-1)[j]
            assert ana == pytest.approx(num, rel=1e-4, abs=1e-7), (name, j)


def test_backward_deterministic():
    vals = _clip_net_values(np.random.default_rng(8))
    grads = []
    for _ in range(2):
        tape = tn.Tape()
        leaves = {k: tape.leaf(v) for k, v in vals.items()}
        tn.backward(_clip_net(**leaves))
        grads.append({k: t.grad.tobytes() for k, t in leaves.items()})
    assert grads[0] == grads[1]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
def test_conv_oracle_property(c, f, k, seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(c, 5, 5)), rng.normal(size=(f, c, k, k))
    np.testing.assert_allclose(tn.conv2d(x, w, 1, 1).data, loop_conv(x, w, 1, 1), atol=1e-12)
