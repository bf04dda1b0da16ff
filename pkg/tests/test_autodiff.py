"""Unit and gradient-check tests for the reverse-mode tape."""

import numpy as np
import pytest

import driftfilter.autodiff as ad


EPS = 1e-5


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def numeric_grad(f, arrays, which, eps=EPS):
    """Central finite differences of scalar f w.r.t. arrays[which]."""
    base = arrays[which]
    g = np.zeros_like(base)
    flat = g.reshape(-1)
    for i in range(base.size):
        bumped = base.copy().reshape(-1)
        bumped[i] += eps
        hi = f([bumped.reshape(base.shape) if k == which else a for k, a in enumerate(arrays)])
        bumped[i] -= 2 * eps
        lo = f([bumped.reshape(base.shape) if k == which else a for k, a in enumerate(arrays)])
        flat[i] = (hi - lo) / (2 * eps)
    return g


def check_op_gradients(build, arrays, tol=1e-6):
    """build(tensors) -> scalar loss tensor; checks every input's gradient."""
    tape = ad.Tape()
    tensors = [tape.param(a, name=f"p{i}") for i, a in enumerate(arrays)]
    loss = build(tensors)
    grads = tape.backward(loss)

    def value(arrs):
        t2 = ad.Tape()
        return build([t2.param(a) for a in arrs]).item()

    for i, t in enumerate(tensors):
        got = grads.get(t)
        want = numeric_grad(value, arrays, i)
        worst = max(
            rel_err(a, b) for a, b in zip(got.reshape(-1), want.reshape(-1))
        )
        assert worst < tol, f"input {i}: analytic {got} vs numeric {want}"


def dot_loss(t, rng):
    """Random linear functional, keeps gradients generic and O(1)."""
    r = rng.standard_normal(t.shape)
    return ad.tsum(ad.mul(t, ad.constant(r)))


# ---------------------------------------------------------------------------
# forward trivials


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 3))
    out = ad.matmul(ad.constant(np.eye(3)), ad.constant(a))
    np.testing.assert_allclose(out.data, a, rtol=0, atol=0)


def test_relu_definition():
    out = ad.relu(ad.constant([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_conv2d_delta_kernel_is_identity():
    rng = np.random.default_rng(1)
    img = rng.standard_normal((1, 1, 6, 6))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = ad.conv2d(ad.constant(img), ad.constant(k), stride=1, padding=1)
    np.testing.assert_allclose(out.data, img, atol=0)


def test_gather_definition():
    out = ad.gather_rows(ad.constant([10.0, 20.0, 30.0]), [2, 0])
    np.testing.assert_array_equal(out.data, [30.0, 10.0])


def test_softmax_closed_form():
    out = ad.softmax(ad.constant([0.0, np.log(3.0)]), axis=0)
    np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)


def test_apply_op_dispatch_and_unsupported():
    out = ad.apply_op("relu", ad.constant([-2.0, 5.0]))
    np.testing.assert_array_equal(out.data, [0.0, 5.0])
    with pytest.raises(ad.UnsupportedOp):
        ad.apply_op("fft", ad.constant([1.0]))


def test_shape_mismatch_is_structured():
    with pytest.raises(ad.ShapeMismatch) as exc:
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))
    assert "matmul" in str(exc.value)
    assert exc.value.op == "matmul"


# ---------------------------------------------------------------------------
# backward trivials


def test_square_gradient():
    tape = ad.Tape()
    x = tape.param(3.0)
    loss = ad.mul(x, x)
    g = tape.backward(loss)
    assert g.get(x).item() == pytest.approx(6.0, abs=1e-12)


def test_sum_relu_subgradient_at_negative():
    tape = ad.Tape()
    x = tape.param([-1.0, 2.0])
    loss = ad.tsum(ad.relu(x))
    g = tape.backward(loss)
    np.testing.assert_array_equal(g.get(x), [0.0, 1.0])


def test_logsumexp_equal_logits_grad():
    tape = ad.Tape()
    x = tape.param([0.0, 0.0])
    loss = ad.logsumexp(x)
    g = tape.backward(loss)
    np.testing.assert_allclose(g.get(x), [0.5, 0.5], atol=1e-15)


def test_stop_gradient_detaches_one_factor():
    tape = ad.Tape()
    x = tape.param(2.0)
    loss = ad.mul(ad.stop_gradient(x), x)
    assert loss.item() == pytest.approx(4.0)
    g = tape.backward(loss)
    assert g.get(x).item() == pytest.approx(2.0, abs=1e-12)


def test_nonscalar_loss_rejected():
    tape = ad.Tape()
    x = tape.param([1.0, 2.0])
    with pytest.raises(ValueError):
        tape.backward(ad.mul(x, x))


def test_unused_leaf_gets_zero_gradient():
    tape = ad.Tape()
    x = tape.param(3.0, name="used")
    y = tape.param([1.0, 2.0], name="unused")
    g = tape.backward(ad.mul(x, x))
    np.testing.assert_array_equal(g.get(y), [0.0, 0.0])
    assert g.named()["unused"].shape == (2,)


def test_backward_is_deterministic():
    rng = np.random.default_rng(7)
    tape = ad.Tape()
    x = tape.param(rng.standard_normal((4, 4)))
    w = tape.param(rng.standard_normal((4, 4)))
    loss = ad.tsum(ad.tanh(ad.matmul(x, w)))
    g1 = tape.backward(loss).get(w)
    g2 = tape.backward(loss).get(w)
    assert np.array_equal(g1, g2)


# ---------------------------------------------------------------------------
# finite-difference gradient checks, one per op


@pytest.mark.parametrize(
    "name,build,shapes",
    [
        ("add", lambda ts, r: dot_loss(ad.add(ts[0], ts[1]), r), [(3, 2), (3, 2)]),
        ("add_scalar", lambda ts, r: dot_loss(ad.add(ts[0], ts[1]), r), [(3, 2), ()]),
        ("sub", lambda ts, r: dot_loss(ad.sub(ts[0], ts[1]), r), [(4,), (4,)]),
        ("mul", lambda ts, r: dot_loss(ad.mul(ts[0], ts[1]), r), [(3, 2), (3, 2)]),
        ("mul_scalar", lambda ts, r: dot_loss(ad.mul(ts[0], ts[1]), r), [(), (5,)]),
        ("div", lambda ts, r: dot_loss(ad.div(ts[0], ts[1]), r), [(4,), (4,)]),
        ("neg", lambda ts, r: dot_loss(ad.neg(ts[0]), r), [(3,)]),
        ("matmul", lambda ts, r: dot_loss(ad.matmul(ts[0], ts[1]), r), [(3, 4), (4, 2)]),
        ("linear", lambda ts, r: dot_loss(ad.linear(ts[0], ts[1], ts[2]), r), [(3, 4), (4, 2), (2,)]),
        ("tanh", lambda ts, r: dot_loss(ad.tanh(ts[0]), r), [(6,)]),
        ("exp", lambda ts, r: dot_loss(ad.exp(ts[0]), r), [(5,)]),
        ("sin", lambda ts, r: dot_loss(ad.sin(ts[0]), r), [(5,)]),
        ("cos", lambda ts, r: dot_loss(ad.cos(ts[0]), r), [(5,)]),
        ("atan2", lambda ts, r: dot_loss(ad.atan2(ts[0], ts[1]), r), [(4,), (4,)]),
        ("sum_all", lambda ts, r: ad.tsum(ad.mul(ts[0], ts[0])), [(3, 3)]),
        ("sum_axis", lambda ts, r: dot_loss(ad.tsum(ts[0], axis=1), r), [(3, 4)]),
        ("logsumexp_all", lambda ts, r: ad.logsumexp(ts[0]), [(6,)]),
        ("logsumexp_axis", lambda ts, r: dot_loss(ad.logsumexp(ts[0], axis=1), r), [(3, 4)]),
        ("softmax", lambda ts, r: dot_loss(ad.softmax(ts[0], axis=1), r), [(3, 4)]),
        ("reshape", lambda ts, r: dot_loss(ad.reshape(ts[0], (6,)), r), [(2, 3)]),
        ("transpose", lambda ts, r: dot_loss(ad.transpose(ts[0], (1, 0)), r), [(2, 3)]),
        (
            "concat",
            lambda ts, r: dot_loss(ad.concat([ts[0], ts[1]], axis=1), r),
            [(2, 3), (2, 2)],
        ),
        (
            "gather",
            lambda ts, r: dot_loss(ad.gather_rows(ts[0], np.array([2, 0, 2, 1])), r),
            [(3, 2)],
        ),
        (
            "conv_s1",
            lambda ts, r: dot_loss(ad.conv2d(ts[0], ts[1], ts[2], stride=1, padding=1), r),
            [(2, 2, 5, 5), (3, 2, 3, 3), (3,)],
        ),
        (
            "conv_s2",
            lambda ts, r: dot_loss(ad.conv2d(ts[0], ts[1], stride=2, padding=1), r),
            [(1, 2, 6, 6), (2, 2, 3, 3)],
        ),
        (
            "local2d",
            lambda ts, r: dot_loss(ad.local2d(ts[0], ts[1], ts[2], kernel=3, padding=1), r),
            [(2, 2, 4, 4), (16, 18, 2), (2,)],
        ),
    ],
)
def test_gradients_match_finite_differences(name, build, shapes):
    rng = np.random.default_rng(hash(name) % (2**32))
    arrays = [rng.standard_normal(s) for s in shapes]
    if name == "div":
        arrays[1] = arrays[1] + np.sign(arrays[1]) * 1.5  # keep away from 0
    if name == "atan2":
        arrays[0] = arrays[0] + np.sign(arrays[0]) * 0.5
        arrays[1] = arrays[1] + np.sign(arrays[1]) * 0.5
    loss_rng = np.random.default_rng(12345)
    r_cache = {}

    def build_cached(ts):
        # reuse one random functional across FD evaluations
        key = "r"
        if key not in r_cache:
            r_cache[key] = np.random.default_rng(99)
        return build(ts, np.random.default_rng(99))

    check_op_gradients(build_cached, arrays)
    del loss_rng


def test_log_gradient():
    rng = np.random.default_rng(3)
    arrays = [rng.uniform(0.5, 2.0, size=(5,))]
    check_op_gradients(lambda ts: dot_loss(ad.log(ts[0]), np.random.default_rng(5)), arrays)


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((8,))
    x = x + np.sign(x) * 0.2
    check_op_gradients(lambda ts: dot_loss(ad.relu(ts[0]), np.random.default_rng(5)), [x])


def test_maxpool_gradient_no_ties():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 2, 4, 4))
    check_op_gradients(
        lambda ts: dot_loss(ad.maxpool2d(ts[0], 2), np.random.default_rng(8)), [x]
    )


def test_wrap_angle_gradient_passthrough():
    tape = ad.Tape()
    x = tape.param([2.5, -2.5, 0.3])
    loss = ad.tsum(ad.mul(ad.wrap_angle(x), ad.constant([1.0, 2.0, 3.0])))
    g = tape.backward(loss)
    np.testing.assert_array_equal(g.get(x), [1.0, 2.0, 3.0])


def test_wrap_angle_values():
    out = ad.wrap_angle(ad.constant([np.pi, -np.pi, 3 * np.pi / 2, 0.0]))
    np.testing.assert_allclose(out.data, [-np.pi, -np.pi, -np.pi / 2, 0.0], atol=1e-12)


def test_bilinear_gradient_vs_fd():
    rng = np.random.default_rng(9)
    img = rng.standard_normal((2, 5, 6))
    rows = rng.uniform(0.3, 3.4, size=(7,))
    cols = rng.uniform(0.3, 4.4, size=(7,))
    # keep off integer knots where the bilinear kernel is not differentiable
    rows = np.where(np.abs(rows - np.round(rows)) < 0.1, rows + 0.17, rows)
    cols = np.where(np.abs(cols - np.round(cols)) < 0.1, cols + 0.17, cols)
    check_op_gradients(
        lambda ts: dot_loss(ad.bilinear_sample(ts[0], ts[1], ts[2]), np.random.default_rng(10)),
        [img, rows, cols],
        tol=1e-5,
    )


def test_bilinear_zero_outside_and_fade():
    img = np.ones((1, 4, 4))
    out = ad.bilinear_sample(ad.constant(img), ad.constant([-5.0, -0.5, 1.0]), ad.constant([1.0, 1.0, 1.0]))
    np.testing.assert_allclose(out.data[0], [0.0, 0.5, 1.0], atol=1e-12)


def test_gather_scatter_directional_derivative():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((5, 3))
    idx = np.array([4, 0, 0, 2])
    r = rng.standard_normal((4, 3))
    v = rng.standard_normal((5, 3))

    tape = ad.Tape()
    xt = tape.param(x)
    loss = ad.tsum(ad.mul(ad.gather_rows(xt, idx), ad.constant(r)))
    g = tape.backward(loss).get(xt)

    def value(a):
        return float(np.sum(a[idx] * r))

    fd = (value(x + EPS * v) - value(x - EPS * v)) / (2 * EPS)
    assert rel_err(float(np.sum(g * v)), fd) < 1e-8


def test_mixed_tape_and_constant_inputs():
    tape = ad.Tape()
    w = tape.param([[1.0, 2.0], [3.0, 4.0]])
    x = ad.constant([[1.0, 0.0], [0.0, 1.0]])
    loss = ad.tsum(ad.matmul(x, w))
    g = tape.backward(loss)
    np.testing.assert_array_equal(g.get(w), np.ones((2, 2)))


def test_first_nonfinite_reports_op():
    tape = ad.Tape()
    x = tape.param([1.0, 0.0])
    with np.errstate(divide="ignore"):
        y = ad.log(x)  # -inf at index 1
    z = ad.exp(y)
    assert z is not None
    hit = tape.first_nonfinite()
    assert hit is not None and hit[1] == "log"
