import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iconnet import grad as G
from iconnet.errors import NonFiniteError, ShapeError


def param(data):
    return G.Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def naive_conv(x, k, stride=1):
    """Triple-loop cross-correlation, valid padding."""
    B, C, T = x.shape
    O, _, L = k.shape
    n = (T - L) // stride + 1
    out = np.zeros((B, O, n))
    for b in range(B):
        for o in range(O):
            for t in range(n):
                acc = 0.0
                for c in range(C):
                    for i in range(L):
                        acc += x[b, c, t * stride + i] * k[o, c, i]
                out[b, o, t] = acc
    return out


# ---------------------------------------------------------------- backward basics

def test_square_and_fanout():
    x = param(3.0)
    with G.Tape() as tape:
        y = G.mul(x, x)
    G.backward(tape, y)
    assert float(x.grad) == 6.0
    x = param(1.5)
    with G.Tape() as tape:
        z = G.add(x, x)
    G.backward(tape, z)
    assert float(x.grad) == 2.0


def _grad_of(build, x):
    x.zero_grad()
    with G.Tape() as tape:
        out = build(x)
    G.backward(tape, out)
    return x.grad.copy()


def test_sum_of_branches_accumulates_exactly():
    rng = np.random.default_rng(0)
    x = param(rng.standard_normal(6))
    c = G.Tensor(rng.standard_normal(6))
    f = lambda t: G.sum_all(G.mul(t, c))
    g = lambda t: G.sum_all(G.relu(t))
    gf, gg = _grad_of(f, x), _grad_of(g, x)
    np.testing.assert_array_equal(_grad_of(lambda t: G.add(f(t), g(t)), x), gf + gg)


def test_repeated_fanout_accumulates_to_rounding():
    # x feeds mul twice, so the summation order differs from gf + gg by at most an ulp
    x = param(np.random.default_rng(0).standard_normal(6))
    f = lambda t: G.sum_all(G.mul(t, t))
    g = lambda t: G.sum_all(G.relu(t))
    both = _grad_of(lambda t: G.add(f(t), g(t)), x)
    np.testing.assert_allclose(both, _grad_of(f, x) + _grad_of(g, x), rtol=4e-16, atol=0)


def test_backward_requires_scalar_and_leaves_unreachable_alone():
    x = param(np.ones(3))
    other = param(np.ones(2))
    other.grad = np.full(2, 7.0)
    with G.Tape() as tape:
        y = G.mul(x, x)
    with pytest.raises(ValueError):
        G.backward(tape, y)
    with G.Tape() as tape:
        s = G.sum_all(y)
        G.sum_all(other)
    G.backward(tape, s)
    np.testing.assert_array_equal(other.grad, [7.0, 7.0])


def test_no_recording_outside_tape():
    x = param([1.0, 2.0])
    with G.Tape() as tape:
        pass
    y = G.sum_all(G.mul(x, x))
    assert len(tape) == 0 and y.is_leaf


def test_nonfinite_raises():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        G.mul(G.Tensor([1e300]), G.Tensor([1e300]))


# ---------------------------------------------------------------- elementwise and linear

def test_relu_and_abs_values():
    np.testing.assert_array_equal(G.relu(G.Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    np.testing.assert_array_equal(G.abs(G.Tensor([-1.5, 0.0, 2.0])).data, [1.5, 0, 2])


def test_linear_examples():
    x = G.Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    np.testing.assert_array_equal(G.linear(x, G.Tensor(np.eye(4)), G.Tensor(np.zeros(4))).data, x.data)
    out = G.linear(G.Tensor([[1.0, 2.0]]), G.Tensor([[1.0], [1.0]]), G.Tensor([0.5]))
    np.testing.assert_array_equal(out.data, [[3.5]])
    with pytest.raises(ShapeError):
        G.linear(x, G.Tensor(np.eye(3)), G.Tensor(np.zeros(3)))


def test_linear_gradcheck():
    rng = np.random.default_rng(1)
    x, w, b = param(rng.standard_normal((3, 4))), param(rng.standard_normal((4, 5))), param(rng.standard_normal(5))
    f = lambda ps: G.sum_all(G.mul(G.linear(*ps), G.linear(*ps)))
    assert G.finite_diff_check(f, [x, w, b]) < 1e-5


def test_finite_diff_check_trivial_cases():
    # dyadic point and step: every sum is exact, so only the gradient itself is tested
    x = param(np.random.default_rng(2).integers(-64, 64, 10) / 8.0)
    assert G.finite_diff_check(lambda ps: G.sum_all(ps[0]), [x], epsilon=2.0**-20) < 1e-10
    x = param(np.array([-2.0, -0.5, 0.3, 1.7]))
    assert G.finite_diff_check(lambda ps: G.sum_all(G.relu(ps[0])), [x]) < 1e-8


# ---------------------------------------------------------------- pooling

def test_global_max_pool_routing():
    x = param([[[1.0, 3.0, 2.0]]])
    with G.Tape() as tape:
        y = G.sum_all(G.global_max_pool1d(x))
    G.backward(tape, y)
    assert float(y.data) == 3.0
    np.testing.assert_array_equal(x.grad, [[[0, 1, 0]]])


def test_max_pool_ties_go_to_first():
    x = param([[[2.0, 2.0, 1.0, 5.0, 5.0, 5.0]]])
    with G.Tape() as tape:
        y = G.sum_all(G.max_pool1d(x, 3))
    G.backward(tape, y)
    np.testing.assert_array_equal(x.grad, [[[1, 0, 0, 1, 0, 0]]])


def test_max_pool_values_and_errors():
    x = np.random.default_rng(3).standard_normal((2, 3, 12))
    out = G.max_pool1d(G.Tensor(x), 4).data
    np.testing.assert_array_equal(out, x.reshape(2, 3, 3, 4).max(axis=-1))
    with pytest.raises(ShapeError):
        G.max_pool1d(G.Tensor(x), 13)


def test_max_pool_gradcheck():
    x = param(np.random.default_rng(4).standard_normal((2, 3, 16)))
    f = lambda ps: G.sum_all(G.mul(G.max_pool1d(ps[0], 4, 2), G.max_pool1d(ps[0], 4, 2)))
    assert G.finite_diff_check(f, [x]) < 1e-5


# ---------------------------------------------------------------- conv1d

def test_conv_examples():
    x = G.Tensor([[[1.0, 2.0, 3.0]]])
    np.testing.assert_array_equal(G.conv1d(x, G.Tensor([[[1.0, 1.0]]])).data, [[[3.0, 5.0]]])
    sig = np.random.default_rng(0).standard_normal((1, 1, 20))
    delta = np.zeros((1, 1, 5))
    delta[0, 0, 0] = 1
    np.testing.assert_array_equal(G.conv1d(G.Tensor(sig), G.Tensor(delta)).data, sig[:, :, :16])


def test_conv_channel_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3, 50\).*\(4, 2, 7\)"):
        G.conv1d(G.Tensor(np.zeros((2, 3, 50))), G.Tensor(np.zeros((4, 2, 7))))


def test_conv_random_shape_forward_and_gradients():
    rng = np.random.default_rng(5)
    x, k = param(rng.standard_normal((2, 3, 50))), param(rng.standard_normal((4, 3, 7)))
    np.testing.assert_allclose(G.conv1d(x, k).data, naive_conv(x.data, k.data), atol=1e-10, rtol=0)
    r = rng.standard_normal((2, 4, 44))
    f = lambda ps: G.sum_all(G.mul(G.conv1d(ps[0], ps[1]), G.Tensor(r)))
    assert G.finite_diff_check(f, [x, k]) < 1e-5


def test_conv_100_random_shapes_match_triple_loop():
    rng = np.random.default_rng(6)
    for _ in range(100):
        B, C, O = rng.integers(1, 4, size=3)
        L = int(rng.integers(1, 12))
        T = int(rng.integers(L, 40))
        x = rng.standard_normal((B, C, T))
        k = rng.standard_normal((O, C, L))
        got = G.conv1d(G.Tensor(x), G.Tensor(k), method="direct").data
        assert np.max(np.abs(got - naive_conv(x, k))) < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(64, 90),
       st.integers(0, 40), st.integers(1, 3), st.sampled_from(["valid", "same"]), st.integers(0, 2**31))
def test_fft_path_matches_direct(B, C, O, L, extra, stride, padding, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, C, L + extra))
    k = rng.standard_normal((O, C, L))
    a = G.conv1d(G.Tensor(x), G.Tensor(k), stride, padding, method="direct").data
    b = G.conv1d(G.Tensor(x), G.Tensor(k), stride, padding, method="fft").data
    assert np.max(np.abs(a - b)) < 1e-6 * max(1.0, np.max(np.abs(a)))


def test_fft_path_gradients_match_direct():
    rng = np.random.default_rng(7)
    xd, kd = rng.standard_normal((2, 2, 150)), rng.standard_normal((3, 2, 70))
    grads = {}
    for method in ("direct", "fft"):
        x, k = param(xd), param(kd)
        with G.Tape() as tape:
            y = G.conv1d(x, k, 2, "same", method=method)
            loss = G.sum_all(G.mul(y, y))
        G.backward(tape, loss)
        grads[method] = (x.grad, k.grad)
    for a, b in zip(grads["direct"], grads["fft"]):
        assert np.max(np.abs(a - b)) < 1e-6 * np.max(np.abs(a))


def test_conv_stride_and_same_padding():
    rng = np.random.default_rng(8)
    x, k = param(rng.standard_normal((1, 2, 30))), param(rng.standard_normal((2, 2, 5)))
    y = G.conv1d(x, k, stride=3, padding="same")
    assert y.shape == (1, 2, 10)
    padded = np.pad(x.data, ((0, 0), (0, 0), (2, 2)))
    np.testing.assert_allclose(y.data, naive_conv(padded, k.data, 3), atol=1e-12)
    r = rng.standard_normal(y.shape)
    f = lambda ps: G.sum_all(G.mul(G.conv1d(ps[0], ps[1], 3, "same"), G.Tensor(r)))
    # the loss is bilinear, so a larger step is exact and avoids round-off on tiny coordinates
    assert G.finite_diff_check(f, [x, k], epsilon=1e-3) < 1e-5


def test_channel_sum_gradcheck():
    x = param(np.random.default_rng(9).standard_normal((2, 3, 5)))
    f = lambda ps: G.sum_all(G.mul(G.channel_sum(ps[0]), G.channel_sum(ps[0])))
    assert G.finite_diff_check(f, [x]) < 1e-5


# ---------------------------------------------------------------- loss

def test_cross_entropy_examples():
    loss = G.weighted_cross_entropy(G.Tensor([[0.3, 0.3], [1.0, 1.0]]), [0, 1], [1.0, 1.0])
    assert float(loss.data) == pytest.approx(np.log(2), abs=1e-12)
    loss = G.weighted_cross_entropy(G.Tensor([[1000.0, -1000.0]]), [0], [1.0, 3.0])
    assert float(loss.data) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        G.weighted_cross_entropy(G.Tensor([[0.0, 0.0]]), [2], [1.0, 1.0])
    with pytest.raises(ValueError):
        G.weighted_cross_entropy(G.Tensor([[0.0, 0.0]]), [0], [1.0, 0.0])


def test_cross_entropy_weighting_formula():
    logits = np.array([[0.2, -0.4], [1.0, 0.5], [-0.3, 0.8]])
    y = np.array([0, 1, 1])
    w = np.array([1.0, 3.0])
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    nll = -logp[np.arange(3), y]
    expected = np.mean(w[y] * nll) / np.mean(w[y])
    assert float(G.weighted_cross_entropy(G.Tensor(logits), y, w).data) == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_gradcheck_and_normalizer_split():
    rng = np.random.default_rng(10)
    logits = param(rng.standard_normal((6, 2)))
    y = np.array([0, 1, 1, 0, 1, 0])
    w = np.array([1.0, 2.5])
    assert G.finite_diff_check(lambda ps: G.weighted_cross_entropy(ps[0], y, w), [logits]) < 1e-5
    full = float(G.weighted_cross_entropy(logits, y, w).data)
    denom = w[y].sum()
    parts = sum(float(G.weighted_cross_entropy(G.Tensor(logits.data[s]), y[s], w, normalizer=denom).data)
                for s in (slice(0, 2), slice(2, 6)))
    assert parts == pytest.approx(full, rel=1e-12)


# ---------------------------------------------------------------- Adam

def test_adam_first_step():
    p = param([1.0])
    st_ = G.AdamState(lr=1e-3)
    G.adam_step([p], [np.array([1.0])], st_)
    assert p.data[0] == pytest.approx(1.0 - 1e-3, abs=1e-9)
    assert st_.t == 1


def test_adam_zero_grad_leaves_params():
    p = param([2.0, -1.0])
    st_ = G.AdamState()
    for _ in range(50):
        G.adam_step([p], [np.zeros(2)], st_)
    np.testing.assert_array_equal(p.data, [2.0, -1.0])


def test_adam_quadratic_bowl():
    p = param([0.0])
    st_ = G.AdamState(lr=0.05)
    for _ in range(2000):
        G.adam_step([p], [2.0 * (p.data - 5.0)], st_)
    assert abs(p.data[0] - 5.0) < 0.01


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        G.adam_step([param([1.0, 2.0])], [np.ones(3)], G.AdamState())


def test_training_trajectory_deterministic():
    def run():
        rng = np.random.default_rng(11)
        x = G.Tensor(rng.standard_normal((8, 1, 40)))
        k = param(rng.standard_normal((3, 1, 9)))
        w, b = param(rng.standard_normal((3, 2))), param(np.zeros(2))
        y = rng.integers(0, 2, 8)
        st_ = G.AdamState(lr=0.01)
        for _ in range(5):
            for p in (k, w, b):
                p.zero_grad()
            with G.Tape() as tape:
                h = G.global_max_pool1d(G.abs(G.conv1d(x, k)))
                loss = G.weighted_cross_entropy(G.linear(h, w, b), y, [1.0, 2.0])
            G.backward(tape, loss)
            G.adam_step([k, w, b], [k.grad, w.grad, b.grad], st_)
        return k.data, w.data, b.data

    for a, b in zip(run(), run()):
        np.testing.assert_array_equal(a, b)
