import numpy as np
import pytest

from seqecon import autodiff as ad


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of a scalar function of a flat vector."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def check_against_fd(f, x, rtol=1e-6, atol=1e-9):
    t = ad.Tensor(x)
    out = f(t)
    out.backward()
    fd = numeric_grad(lambda v: float(ad.value(f(ad.Tensor(v)))), x)
    np.testing.assert_allclose(t.grad, fd, rtol=rtol, atol=atol)


class TestElementwise:
    def test_add_mul_broadcast(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(6)

        def f(t):
            m = ad.reshape(t, (2, 3))
            return ((m * 2.0 + m) * m).sum()

        check_against_fd(f, x)

    def test_div_pow(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0.5, 2.0, 5)
        check_against_fd(lambda t: ((t ** -2.0) / (t + 1.0)).sum(), x)

    def test_exp_log_sqrt(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0.5, 2.0, 5)
        check_against_fd(lambda t: (ad.exp(t) + ad.log(t) * ad.sqrt(t)).sum(), x)

    def test_activations(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(8)
        for fn in (ad.sigmoid, ad.softplus, ad.gelu, ad.erf):
            check_against_fd(lambda t, fn=fn: fn(t).sum(), x)

    def test_gelu_values(self):
        # x * Phi(x): at 0 it is 0, at large x it approaches x
        assert ad.gelu(np.array(0.0)) == 0.0
        np.testing.assert_allclose(ad.gelu(np.array(10.0)), 10.0, rtol=1e-12)

    def test_relu_where(self):
        x = np.array([-1.0, 0.5, 2.0])
        t = ad.Tensor(x)
        out = ad.where(x > 0.0, t * 3.0, ad.relu(t)).sum()
        out.backward()
        np.testing.assert_allclose(t.grad, [0.0, 3.0, 3.0])


class TestStructural:
    def test_matmul(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(12)
        w = rng.standard_normal((4, 3))

        def f(t):
            m = ad.reshape(t, (3, 4))
            return (m.__matmul__(w) ** 2.0).sum()

        check_against_fd(f, x)

    def test_cumsum_concat(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(8)

        def f(t):
            m = ad.reshape(t, (2, 4))
            c = ad.cumsum(m, axis=-1)
            both = ad.concat([m, c], axis=-1)
            return (both * both).sum()

        check_against_fd(f, x)

    def test_take_with_duplicates(self):
        x = np.array([1.0, 2.0, 3.0])
        t = ad.Tensor(x)
        picked = t[np.array([0, 0, 2])]
        picked.sum().backward()
        np.testing.assert_allclose(t.grad, [2.0, 0.0, 1.0])

    def test_mean_axis(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal(6)

        def f(t):
            m = ad.reshape(t, (2, 3))
            return (ad.tmean(m, axis=1) ** 2.0).sum()

        check_against_fd(f, x)

    def test_constants_stay_numpy(self):
        a = np.ones(3)
        assert isinstance(ad.add(a, a), np.ndarray)
        assert isinstance(ad.exp(a), np.ndarray)
        assert isinstance(ad.interp_linear(a, np.array([0.0, 2.0]), np.array([0.0, 4.0])), np.ndarray)


class TestInterp:
    def test_values_inside_and_outside(self):
        xn = np.array([0.0, 1.0, 3.0])
        yn = np.array([0.0, 2.0, 2.0])
        xq = np.array([0.5, 2.0, -1.0, 4.0])
        out = ad.interp_linear(xq, xn, yn)
        # boundary segments extrapolate linearly
        np.testing.assert_allclose(out, [1.0, 2.0, -2.0, 2.0])

    def test_grad_wrt_values(self):
        rng = np.random.default_rng(7)
        y = rng.standard_normal(5)
        xn = np.linspace(0.0, 1.0, 5)
        xq = np.array([0.1, 0.34, 0.9, 1.3])
        check_against_fd(lambda t: (ad.interp_linear(xq, xn, t) ** 2.0).sum(), y)

    def test_grad_wrt_query_and_nodes(self):
        rng = np.random.default_rng(8)
        yn = np.array([0.0, 1.0, 1.5, 1.75])
        xq0 = rng.uniform(0.05, 2.8, 4)

        def fq(t):
            return (ad.interp_linear(t, np.array([0.0, 1.0, 2.0, 3.0]), yn) ** 2.0).sum()

        check_against_fd(fq, xq0)

        xn0 = np.array([0.0, 0.9, 2.1, 3.0])

        def fn(t):
            return (ad.interp_linear(np.array([0.4, 1.5, 2.5]), t, yn) ** 2.0).sum()

        check_against_fd(fn, xn0)

    def test_batched_rows(self):
        xn = np.stack([np.linspace(0, 1, 4), np.linspace(0, 2, 4)])
        yn = np.stack([np.array([0.0, 1.0, 2.0, 3.0]), np.array([1.0, 1.0, 2.0, 2.0])])
        xq = np.array([[0.5, 0.99], [1.5, 0.1]])
        out = ad.interp_linear(xq, xn, yn)
        np.testing.assert_allclose(out, [[1.5, 2.97], [2.0, 1.0]], atol=1e-12)


class TestBackwardMechanics:
    def test_grad_accumulates_over_reuse(self):
        x = ad.Tensor(np.array([2.0]))
        y = x * x + x * 3.0
        y.backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_long_chain_no_recursion_error(self):
        x = ad.Tensor(np.array(1.0))
        y = x
        for _ in range(5000):
            y = y * 1.0001
        y.backward()
        assert np.isfinite(x.grad)

    def test_zero_grad(self):
        x = ad.Tensor(np.array([1.0, 2.0]))
        (x * x).sum().backward()
        x.zero_grad()
        assert x.grad is None


class TestPowerGuard:
    def test_tensor_exponent_rejected(self):
        x = ad.Tensor(np.ones(2))
        with pytest.raises(TypeError):
            ad.power(x, x)
