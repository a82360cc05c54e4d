import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aqa import tensorcore as tc


def naive_conv3d(x, w, b, stride, pad):
    C, T, H, W = x.shape
    F, _, kt, kh, kw = w.shape
    st_, sh, sw = stride
    pt, ph, pw = pad
    xp = np.zeros((C, T + 2 * pt, H + 2 * ph, W + 2 * pw))
    xp[:, pt:pt + T, ph:ph + H, pw:pw + W] = x
    To = (T + 2 * pt - kt) // st_ + 1
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    out = np.zeros((F, To, Ho, Wo))
    for f in range(F):
        for t in range(To):
            for i in range(Ho):
                for j in range(Wo):
                    s = b[f]
                    for c in range(C):
                        for a in range(kt):
                            for p in range(kh):
                                for q in range(kw):
                                    s += w[f, c, a, p, q] * xp[c, t * st_ + a, i * sh + p, j * sw + q]
                    out[f, t, i, j] = s
    return out


def test_conv3d_single_tap():
    out = tc.conv3d_forward(np.full((1, 1, 1, 1), 2.0), np.full((1, 1, 1, 1, 1), 3.0), np.zeros(1))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 6.0


def test_conv3d_window_sums_of_ones():
    out = tc.conv3d_forward(np.ones((1, 4, 4, 4)), np.ones((1, 1, 2, 2, 2)), np.zeros(1))
    assert out.shape == (1, 3, 3, 3)
    assert np.all(out == 8.0)


def test_conv3d_matches_naive_loops():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 8, 12, 12))
    w = rng.normal(size=(4, 2, 3, 3, 3))
    b = rng.normal(size=4)
    got = tc.conv3d_forward(x, w, b, stride=(1, 2, 2))
    want = naive_conv3d(x, w, b, (1, 2, 2), (0, 0, 0))
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, atol=1e-10, rtol=0)


def test_conv3d_padded_matches_naive_loops():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 4, 5, 6))
    w = rng.normal(size=(3, 1, 3, 2, 3))
    b = rng.normal(size=3)
    got = tc.conv3d_forward(x, w, b, stride=(2, 1, 2), pad=(1, 1, 0))
    np.testing.assert_allclose(got, naive_conv3d(x, w, b, (2, 1, 2), (1, 1, 0)), atol=1e-10, rtol=0)


def test_conv3d_batched_equals_per_sample():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(3, 2, 5, 6, 6))
    w = rng.normal(size=(4, 2, 3, 3, 3))
    b = rng.normal(size=4)
    batched = tc.conv3d_forward(x, w, b, pad=1)
    for n in range(3):
        np.testing.assert_allclose(batched[n], tc.conv3d_forward(x[n], w, b, pad=1), atol=1e-12, rtol=0)


def test_conv3d_rejects_mismatch():
    with pytest.raises(tc.ShapeError, match="channels"):
        tc.conv3d_forward(np.ones((2, 4, 4, 4)), np.ones((1, 1, 2, 2, 2)), np.zeros(1))
    with pytest.raises(tc.ShapeError, match="kernel extents"):
        tc.conv3d_forward(np.ones((1, 2, 4, 4)), np.ones((1, 1, 3, 2, 2)), np.zeros(1))
    with pytest.raises(tc.ShapeError, match="bias"):
        tc.conv3d_forward(np.ones((1, 4, 4, 4)), np.ones((2, 1, 2, 2, 2)), np.zeros(1))


@settings(max_examples=60, deadline=None)
@given(
    ins=st.tuples(*[st.integers(1, 7)] * 3),
    ker=st.tuples(*[st.integers(1, 4)] * 3),
    stride=st.tuples(*[st.integers(1, 3)] * 3),
    pad=st.tuples(*[st.integers(0, 2)] * 3),
)
def test_conv3d_output_shape_formula(ins, ker, stride, pad):
    if any(k > n + 2 * p for n, k, p in zip(ins, ker, pad)):
        with pytest.raises(tc.ShapeError):
            tc.conv3d_forward(np.ones((1,) + ins), np.ones((1, 1) + ker), np.zeros(1), stride, pad)
        return
    out = tc.conv3d_forward(np.ones((1,) + ins), np.ones((1, 1) + ker), np.zeros(1), stride, pad)
    expect = tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(ins, ker, stride, pad))
    assert out.shape == (1,) + expect


def test_conv3d_backward_zero_upstream():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 4, 5, 5))
    w = rng.normal(size=(3, 2, 2, 2, 2))
    out = tc.conv3d_forward(x, w, np.zeros(3))
    dx, dw, db = tc.conv3d_backward(x, w, np.zeros_like(out))
    assert not dx.any() and not dw.any() and not db.any()


def test_conv3d_backward_scalar_chain_rule():
    x = np.full((1, 1, 1, 1), 2.5)
    w = np.full((1, 1, 1, 1, 1), -1.5)
    dx, dw, db = tc.conv3d_backward(x, w, np.full((1, 1, 1, 1), 4.0))
    assert dw.ravel()[0] == 2.5 * 4.0
    assert dx.ravel()[0] == -1.5 * 4.0
    assert db[0] == 4.0


def test_conv3d_backward_shape_mismatch():
    with pytest.raises(tc.ShapeError):
        tc.conv3d_backward(np.ones((1, 4, 4, 4)), np.ones((1, 1, 2, 2, 2)), np.ones((1, 2, 2, 2)))


def _conv_check(seed, stride=(1, 2, 2), pad=(1, 0, 1)):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 4, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3, 2))
    b = rng.normal(size=3)
    probe = rng.normal(size=tc.conv3d_forward(x, w, b, stride, pad).shape)

    def fn(p):
        out = tc.conv3d_forward(p["x"], p["w"], p["b"], stride, pad)
        dx, dw, db = tc.conv3d_backward(p["x"], p["w"], probe, stride, pad)
        return float(np.sum(out * probe)), {"x": dx, "w": dw, "b": db}

    return tc.grad_check(fn, {"x": x, "w": w, "b": b}, layer="conv3d")


@pytest.mark.parametrize("seed", range(3))
def test_conv3d_gradcheck(seed):
    rep = _conv_check(seed)
    assert rep.max_rel_error < 1e-6, rep.errors


def test_relu():
    np.testing.assert_array_equal(tc.relu_forward([-1.0, 0.0, 2.0]), [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(tc.relu_backward(np.array([-1.0, 0.0, 2.0]), np.ones(3)), [0, 0, 1])


def test_maxpool_constant_input_tie_rule():
    x = np.full((1, 2, 4, 4), 3.0)
    out = tc.maxpool3d_forward(x, 2)
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out == 3.0)
    dx = tc.maxpool3d_backward(x, np.ones_like(out), 2)
    expect = np.zeros_like(x)
    expect[0, 0, ::2, ::2] = 1.0
    np.testing.assert_array_equal(dx, expect)


def test_maxpool_matches_naive():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 5, 7, 6))
    out = tc.maxpool3d_forward(x, (2, 3, 2), (1, 2, 2))
    To, Ho, Wo = (5 - 2) // 1 + 1, (7 - 3) // 2 + 1, (6 - 2) // 2 + 1
    want = np.empty((2, To, Ho, Wo))
    for c in range(2):
        for t in range(To):
            for i in range(Ho):
                for j in range(Wo):
                    want[c, t, i, j] = x[c, t:t + 2, 2 * i:2 * i + 3, 2 * j:2 * j + 2].max()
    np.testing.assert_array_equal(out, want)


def test_maxpool_overlapping_backward_accumulates():
    x = np.zeros((1, 1, 1, 3))
    x[0, 0, 0, 1] = 5.0
    dx = tc.maxpool3d_backward(x, np.ones((1, 1, 1, 2)), (1, 1, 2), (1, 1, 1))
    np.testing.assert_array_equal(dx.ravel(), [0.0, 2.0, 0.0])


def test_fc_matches_loop_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 7))
    w = rng.normal(size=(3, 7))
    b = rng.normal(size=3)
    want = np.array([[b[o] + sum(w[o, i] * x[n, i] for i in range(7)) for o in range(3)] for n in range(5)])
    np.testing.assert_allclose(tc.fc_forward(x, w, b), want, atol=1e-10, rtol=0)
    with pytest.raises(tc.ShapeError):
        tc.fc_forward(np.ones(6), w, b)


def test_euclidean_loss():
    loss, grad = tc.euclidean_loss([1.0, 2.0], [1.0, 2.0])
    assert loss == 0.0 and not grad.any()
    loss, grad = tc.euclidean_loss([3.0], [1.0])
    assert loss == 2.0 and grad.tolist() == [2.0]
    rng = np.random.default_rng(5)
    p, t = rng.normal(size=20), rng.normal(size=20)
    direct = 0.0
    for a, b in zip(p, t):
        direct += (a - b) ** 2
    assert abs(tc.euclidean_loss(p, t)[0] - direct / 2) < 1e-12
    with pytest.raises(tc.ShapeError):
        tc.euclidean_loss([1.0], [1.0, 2.0])


def test_sgd_step():
    p = {"w": np.array([1.0])}
    assert tc.sgd_step(p, {"w": np.array([10.0])}, 0.0)["w"][0] == 1.0
    assert abs(tc.sgd_step(p, {"w": np.array([10.0])}, 0.0001)["w"][0] - 0.999) < 1e-15
    with pytest.raises(FloatingPointError, match="conv2"):
        tc.sgd_step({"conv2": np.ones(2)}, {"conv2": np.array([1.0, np.nan])}, 0.1)


def test_gradcheck_linear_fc():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(3, 6))
    b = rng.normal(size=3)
    probe = rng.normal(size=(4, 3))

    def fn(p):
        out = tc.fc_forward(p["x"], p["w"], p["b"])
        dx, dw, db = tc.fc_backward(p["x"], p["w"], probe)
        return float(np.sum(out * probe)), {"x": dx, "w": dw, "b": db}

    rep = tc.grad_check(fn, {"x": x, "w": w, "b": b}, layer="fc")
    assert rep.max_rel_error < 1e-8


def test_forward_determinism_and_finiteness():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(1, 6, 8, 8))
    w = rng.normal(size=(2, 1, 3, 3, 3))
    a = tc.conv3d_forward(x, w, np.zeros(2), pad=1)
    b = tc.conv3d_forward(x, w, np.zeros(2), pad=1)
    assert a.tobytes() == b.tobytes()
    assert np.all(np.isfinite(tc.maxpool3d_forward(tc.relu_forward(a))))


def test_aqtn_roundtrip(tmp_path):
    a = np.arange(24, dtype=np.float64).reshape(2, 3, 4) / 4
    tc.save_tensor(tmp_path / "a.aqtn", a)
    raw = (tmp_path / "a.aqtn").read_bytes()
    assert raw[:4] == b"AQTN" and raw[4] == 1 and raw[5] == 3
    assert int.from_bytes(raw[6:10], "little") == 2
    assert len(raw) == 6 + 3 * 4 + 24 * 4
    np.testing.assert_array_equal(tc.load_tensor(tmp_path / "a.aqtn"), a)
    with pytest.raises(ValueError, match="magic"):
        tc.tensor_from_bytes(b"XXXX" + raw[4:])
