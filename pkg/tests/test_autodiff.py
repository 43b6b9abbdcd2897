import math

import numpy as np
import pytest

from stainforge import autodiff as ad
from stainforge.autodiff import Tensor, finite_diff_check
from stainforge.errors import NonFiniteValue, ShapeMismatch


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def conv_oracle(x, w, b, stride, padding):
    """Direct nested-loop cross-correlation, NHWC / (kh, kw, cin, cout)."""
    n, h, wd, c = x.shape
    kh, kw, _, co = w.shape
    xp = np.zeros((n, h + 2 * padding, wd + 2 * padding, c))
    xp[:, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, ho, wo, co))
    for i in range(n):
        for r in range(ho):
            for s in range(wo):
                for o in range(co):
                    acc = b[o]
                    for u in range(kh):
                        for v in range(kw):
                            for k in range(c):
                                acc += xp[i, r * stride + u, s * stride + v, k] * w[u, v, k, o]
                    out[i, r, s, o] = acc
    return out


def test_dense_identity():
    x = np.arange(6.0).reshape(2, 3)
    out = ad.dense(x, np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(out.data, x)


def test_relu_values_and_mask():
    x = leaf([-1.0, 0.0, 2.0])
    y = ad.relu(x)
    np.testing.assert_array_equal(y.data, [0, 0, 2])
    y.backward(np.ones(3))
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_conv_all_ones():
    out = ad.conv2d(np.ones((1, 5, 5, 1)), np.ones((3, 3, 1, 1)))
    assert out.shape == (1, 3, 3, 1)
    np.testing.assert_array_equal(out.data, np.full((1, 3, 3, 1), 9.0))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_loop_oracle(rng, stride, padding):
    x = rng.standard_normal((2, 7, 6, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    got = ad.conv2d(x, w, b, stride=stride, padding=padding).data
    np.testing.assert_allclose(got, conv_oracle(x, w, b, stride, padding), atol=1e-12)


def test_global_avg_pool_and_sigmoid():
    x = np.arange(8.0).reshape(1, 2, 2, 2)
    np.testing.assert_array_equal(ad.global_avg_pool(x).data, [[3.0, 4.0]])
    s = ad.sigmoid(np.array([-800.0, 0.0, 800.0])).data
    np.testing.assert_allclose(s, [0.0, 0.5, 1.0])
    assert np.isfinite(s).all()


def test_softmax_rows_sum_to_one(rng):
    p = ad.softmax(rng.standard_normal((5, 4)) * 30)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_cross_entropy_uniform_logits():
    loss = ad.cross_entropy_loss(np.zeros((4, 3)), np.array([0, 1, 2, 0]))
    assert float(loss.data) == pytest.approx(math.log(3), abs=1e-12)


def test_cross_entropy_decreases_with_margin():
    def loss_at(margin):
        logits = np.array([[margin, 0.0, 0.0]])
        return float(ad.cross_entropy_loss(logits, np.array([0])).data)

    assert loss_at(10) < loss_at(5) < loss_at(0)
    assert loss_at(10) < 1e-4


def test_cross_entropy_shape_errors():
    with pytest.raises(ShapeMismatch):
        ad.cross_entropy_loss(np.zeros((3, 1)), np.zeros(3, int))
    with pytest.raises(ShapeMismatch):
        ad.cross_entropy_loss(np.zeros((3, 2)), np.array([0, 1, 2]))


def test_squared_l2_values():
    t = np.full((1, 6), 0.3)
    assert float(ad.squared_l2_loss(t.copy(), t).data) == 0.0
    pred = t.copy()
    pred[0, 0] += 1.0
    assert float(ad.squared_l2_loss(pred, t).data) == pytest.approx(1.0)
    with pytest.raises(ShapeMismatch):
        ad.squared_l2_loss(np.zeros((2, 6)), np.zeros((2, 5)))


def test_grad_reverse_forward_is_bitwise_identity(rng):
    x = leaf(rng.standard_normal((3, 4)))
    y = ad.grad_reverse(x, 0.7)
    assert y.data.tobytes() == x.data.tobytes()


def test_grad_reverse_zero_lambda_blocks_gradient(rng):
    x = leaf(rng.standard_normal(5))
    y = ad.grad_reverse(x, 0.0)
    y.backward(np.ones(5))
    assert np.all(x.grad == 0)


def test_grad_reverse_scalar_chain():
    x = leaf(3.0)
    y = ad.grad_reverse(x, 0.5)
    sq = Tensor(y.data**2, requires_grad=True, _parents=(y,))
    sq._backward = lambda g: y._accumulate(g * 2 * y.data)
    sq.backward()
    assert float(x.grad) == pytest.approx(-3.0)
    # central difference of the unreversed x^2 at 3, scaled by -lambda
    h = 1e-4
    fd = ((3 + h) ** 2 - (3 - h) ** 2) / (2 * h)
    assert float(x.grad) == pytest.approx(-0.5 * fd, rel=1e-9)


def test_grad_reverse_rejects_negative_lambda():
    with pytest.raises(ValueError):
        ad.grad_reverse(np.zeros(2), -1.0)


def test_non_finite_rejected_at_layers():
    with pytest.raises(NonFiniteValue):
        ad.dense(np.array([[np.nan, 1.0]]), np.ones((2, 2)))
    with pytest.raises(NonFiniteValue):
        ad.conv2d(np.full((1, 3, 3, 1), np.inf), np.ones((1, 1, 1, 1)))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ad.dense(np.zeros((2, 3)), np.zeros((4, 2)))
    with pytest.raises(ShapeMismatch):
        ad.conv2d(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)))


def test_gradients_accumulate_over_shared_use(rng):
    x = leaf(rng.standard_normal((2, 3)))
    y = ad.add(x, x)
    y.backward(np.ones((2, 3)))
    np.testing.assert_array_equal(x.grad, np.full((2, 3), 2.0))


def test_fd_check_linear_is_exact(rng):
    w = leaf(rng.standard_normal((3, 2)))
    x = rng.standard_normal((4, 3))
    t = np.zeros((4, 2))
    res = finite_diff_check(lambda p: ad.squared_l2_loss(ad.scale(ad.dense(x, p[0]), 1e-9), t), [w])
    assert res.max_rel_error <= 1e-9 or res.n_checked == 6
    lin = finite_diff_check(lambda p: ad.cross_entropy_loss(ad.dense(x, p[0]), np.zeros(4, int)), [w])
    assert lin.n_checked == 6


def test_fd_check_linear_function_error_tiny(rng):
    w = leaf(rng.standard_normal((3, 1)))
    x = rng.standard_normal((5, 3))

    def total(p):
        out = ad.dense(x, p[0])
        s = Tensor(out.data.sum(), requires_grad=True, _parents=(out,))
        s._backward = lambda g: out._accumulate(np.full(out.shape, g))
        return s

    assert finite_diff_check(total, [w]).max_rel_error <= 1e-9


def test_fd_check_excludes_relu_kink():
    x = leaf([0.0, 1.0, -2.0])

    def fn(p):
        r = ad.relu(p[0])
        s = Tensor(r.data.sum(), requires_grad=True, _parents=(r,))
        s._backward = lambda g: r._accumulate(np.full(r.shape, g))
        return s

    res = finite_diff_check(fn, [x])
    assert res.n_excluded == 1
    assert res.n_checked == 2
    assert res.max_rel_error <= 1e-9


def _sum_of(t):
    """Scalar reduction with a random projection, so every output coordinate matters."""
    proj = np.random.default_rng(7).standard_normal(t.shape)
    s = Tensor(np.sum(t.data * proj), requires_grad=True, _parents=(t,))
    s._backward = lambda g: t._accumulate(g * proj)
    return s


def layer_cases(rng):
    """(name, fn, params) triples covering every layer and both losses."""
    cases = []
    for _ in range(3):
        n, d, k = rng.integers(1, 5), rng.integers(2, 6), rng.integers(2, 5)
        x, w, b = leaf(rng.standard_normal((n, d))), leaf(rng.standard_normal((d, k))), leaf(rng.standard_normal(k))
        cases.append(("dense", lambda p: _sum_of(ad.dense(*p)), [x, w, b]))
    for stride, pad in ((1, 0), (1, 1), (2, 1)):
        x = leaf(rng.standard_normal((2, 5, 6, 2)))
        w, b = leaf(rng.standard_normal((3, 3, 2, 3))), leaf(rng.standard_normal(3))
        cases.append(
            ("conv2d", lambda p, s=stride, q=pad: _sum_of(ad.conv2d(p[0], p[1], p[2], stride=s, padding=q)), [x, w, b])
        )
    for _ in range(3):
        # keep away from the kink so the check is informative
        v = rng.uniform(0.05, 1.0, (3, 4)) * rng.choice([-1, 1], (3, 4))
        cases.append(("relu", lambda p: _sum_of(ad.relu(p[0])), [leaf(v)]))
    for _ in range(3):
        cases.append(("sigmoid", lambda p: _sum_of(ad.sigmoid(p[0])), [leaf(rng.standard_normal((2, 5)) * 3)]))
    for _ in range(2):
        cases.append(("gap", lambda p: _sum_of(ad.global_avg_pool(p[0])), [leaf(rng.standard_normal((2, 3, 4, 5)))]))
    for _ in range(2):
        cases.append(("scale", lambda p: _sum_of(ad.scale(p[0], -1.7)), [leaf(rng.standard_normal(4))]))
    for _ in range(3):
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 5))
        labels = rng.integers(0, k, n)
        cases.append(
            ("cross_entropy", lambda p, lab=labels: ad.cross_entropy_loss(p[0], lab), [leaf(rng.standard_normal((n, k)) * 2)])
        )
    for _ in range(3):
        n = int(rng.integers(1, 6))
        target = rng.uniform(0, 1, (n, 6))
        cases.append(
            ("squared_l2", lambda p, t=target: ad.squared_l2_loss(p[0], t), [leaf(rng.uniform(0, 1, (n, 6)))])
        )
    return cases


def test_layer_gradients_match_finite_differences():
    cases = layer_cases(np.random.default_rng(42))
    assert len(cases) >= 20
    for name, fn, params in cases:
        res = finite_diff_check(fn, params)
        assert res.n_checked > 0, name
        assert res.max_rel_error <= 1e-4, (name, res)
