"""Backend parity and correctness of the hot kernels.

Every kernel is exercised against both backends when the compiled one is
available; analytic backward passes are checked against central
differences here at the kernel level (the full-model check lives in the
acceptance suite).
"""

import numpy as np
import pytest

from losformer import kernels

RNG = np.random.default_rng(1234)
BACKENDS = kernels.available_backends()
pair = pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")


def random_matrix(rows=7, cols=13, scale=1.0):
    return np.ascontiguousarray(RNG.normal(0.0, scale, (rows, cols)))


class TestBackendSelection:
    def test_python_backend_always_available(self):
        assert "python" in BACKENDS

    def test_unknown_backend_rejected(self):
        with pytest.raises(ValueError):
            kernels.get_backend("fortran")

    def test_set_backend_round_trip(self):
        original = kernels.active_backend()
        try:
            kernels.set_backend("python")
            assert kernels.active_backend() == "python"
        finally:
            kernels.set_backend(original)


@pair
class TestParity:
    """The two implementations must agree far below training noise."""

    def c(self):
        return kernels.get_backend("c")

    def py(self):
        return kernels.get_backend("python")

    def test_gelu(self):
        x = random_matrix()
        np.testing.assert_allclose(self.c().gelu(x), self.py().gelu(x), rtol=1e-14, atol=1e-15)

    def test_gelu_backward(self):
        x, dy = random_matrix(), random_matrix()
        np.testing.assert_allclose(
            self.c().gelu_backward(x, dy), self.py().gelu_backward(x, dy),
            rtol=1e-13, atol=1e-15)

    def test_softmax(self):
        x = random_matrix(scale=3.0)
        np.testing.assert_allclose(
            self.c().softmax_rows(x), self.py().softmax_rows(x), rtol=1e-13, atol=1e-16)

    def test_softmax_backward(self):
        p = self.py().softmax_rows(random_matrix())
        dp = random_matrix()
        np.testing.assert_allclose(
            self.c().softmax_rows_backward(p, dp), self.py().softmax_rows_backward(p, dp),
            rtol=1e-12, atol=1e-16)

    def test_layer_norm(self):
        x = random_matrix()
        gain, bias = RNG.normal(size=13), RNG.normal(size=13)
        yc, mc, rc = self.c().layer_norm_rows(x, gain, bias, 1e-12)
        yp, mp, rp = self.py().layer_norm_rows(x, gain, bias, 1e-12)
        np.testing.assert_allclose(yc, yp, rtol=1e-12, atol=1e-13)
        np.testing.assert_allclose(mc, mp, rtol=1e-13)
        np.testing.assert_allclose(rc, rp, rtol=1e-13)

    def test_layer_norm_backward(self):
        x, dy = random_matrix(), random_matrix()
        gain, bias = RNG.normal(size=13), RNG.normal(size=13)
        _, mean, rstd = self.py().layer_norm_rows(x, gain, bias, 1e-12)
        out_c = self.c().layer_norm_rows_backward(x, gain, mean, rstd, dy)
        out_p = self.py().layer_norm_rows_backward(x, gain, mean, rstd, dy)
        for a, b in zip(out_c, out_p):
            np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-13)

    def test_adam_update(self):
        args = dict(step=3, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.02)
        states = []
        for backend in (self.c(), self.py()):
            param, grad = random_matrix().copy(), random_matrix().copy()
            rng = np.random.default_rng(7)
            param = np.ascontiguousarray(rng.normal(size=(5, 4)))
            grad = np.ascontiguousarray(rng.normal(size=(5, 4)))
            m = np.ascontiguousarray(rng.normal(size=(5, 4)) * 0.1)
            v = np.abs(np.ascontiguousarray(rng.normal(size=(5, 4)) * 0.01))
            backend.adam_update(param, grad, m, v, **args)
            states.append((param, m, v))
        for a, b in zip(states[0], states[1]):
            np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-16)


@pytest.mark.parametrize("name", BACKENDS)
class TestKernelSemantics:
    def test_gelu_zero_and_sign(self, name):
        b = kernels.get_backend(name)
        x = np.array([[0.0, 5.0, -5.0]])
        y = b.gelu(x)
        assert y[0, 0] == 0.0
        assert abs(y[0, 1] - 5.0) < 1e-3      # large positive passes through
        assert abs(y[0, 2]) < 1e-3            # large negative gates to zero

    def test_gelu_backward_matches_finite_difference(self, name):
        b = kernels.get_backend(name)
        x = random_matrix(3, 5)
        dy = np.ones_like(x)
        h = 1e-6
        numeric = (b.gelu(x + h) - b.gelu(x - h)) / (2 * h)
        np.testing.assert_allclose(b.gelu_backward(x, dy), numeric, rtol=1e-7, atol=1e-9)

    def test_softmax_rows_sum_to_one(self, name):
        b = kernels.get_backend(name)
        p = b.softmax_rows(random_matrix(6, 9, scale=4.0))
        np.testing.assert_allclose(p.sum(axis=1), np.ones(6), atol=1e-12)
        assert np.all(p >= 0)

    def test_softmax_overflow_safe(self, name):
        b = kernels.get_backend(name)
        p = b.softmax_rows(np.array([[1000.0, 0.0, 0.0]]))
        np.testing.assert_allclose(p, [[1.0, 0.0, 0.0]], atol=1e-12)

    def test_softmax_backward_matches_finite_difference(self, name):
        b = kernels.get_backend(name)
        x = random_matrix(2, 6)
        dp = random_matrix(2, 6)
        analytic = b.softmax_rows_backward(b.softmax_rows(x), dp)
        h = 1e-7
        numeric = np.zeros_like(x)
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                xp, xm = x.copy(), x.copy()
                xp[i, j] += h
                xm[i, j] -= h
                delta = b.softmax_rows(xp)[i] - b.softmax_rows(xm)[i]
                numeric[i, j] = (delta * dp[i]).sum() / (2 * h)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)

    def test_layer_norm_statistics(self, name):
        b = kernels.get_backend(name)
        x = random_matrix(4, 16)
        y, mean, rstd = b.layer_norm_rows(x, np.ones(16), np.zeros(16), 1e-12)
        np.testing.assert_allclose(y.mean(axis=1), np.zeros(4), atol=1e-12)
        np.testing.assert_allclose(y.std(axis=1), np.ones(4), atol=1e-6)
        np.testing.assert_allclose(mean, x.mean(axis=1), atol=1e-13)

    def test_layer_norm_backward_matches_finite_difference(self, name):
        b = kernels.get_backend(name)
        x = random_matrix(3, 8)
        gain, bias = RNG.normal(size=8), RNG.normal(size=8)
        dy = random_matrix(3, 8)
        _, mean, rstd = b.layer_norm_rows(x, gain, bias, 1e-12)
        dx, dgain, dbias = b.layer_norm_rows_backward(x, gain, mean, rstd, dy)
        h = 1e-6

        def loss(xv, gv, bv):
            y, _, _ = b.layer_norm_rows(xv, gv, bv, 1e-12)
            return (y * dy).sum()

        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                xp, xm = x.copy(), x.copy()
                xp[i, j] += h
                xm[i, j] -= h
                fd = (loss(xp, gain, bias) - loss(xm, gain, bias)) / (2 * h)
                assert abs(fd - dx[i, j]) < 1e-6
        for j in range(8):
            gp, gm = gain.copy(), gain.copy()
            gp[j] += h
            gm[j] -= h
            fd = (loss(x, gp, bias) - loss(x, gm, bias)) / (2 * h)
            assert abs(fd - dgain[j]) < 1e-6

    def test_adam_zero_grad_no_decay_is_identity(self, name):
        b = kernels.get_backend(name)
        param = random_matrix(2, 3)
        before = param.copy()
        b.adam_update(param, np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 3)),
                      1, 0.01, 0.9, 0.999, 1e-8, 0.0)
        np.testing.assert_array_equal(param, before)

    def test_adam_decay_shrinks(self, name):
        b = kernels.get_backend(name)
        param = np.full((1, 4), 2.0)
        b.adam_update(param, np.zeros((1, 4)), np.zeros((1, 4)), np.zeros((1, 4)),
                      1, 0.1, 0.9, 0.999, 1e-8, 0.5)
        np.testing.assert_allclose(param, np.full((1, 4), 2.0 * (1 - 0.1 * 0.5)), rtol=1e-15)

    def test_adam_first_step_magnitude(self, name):
        # bias correction makes the first step almost exactly lr for unit grad
        b = kernels.get_backend(name)
        param = np.zeros((1, 1))
        b.adam_update(param, np.ones((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)),
                      1, 0.01, 0.9, 0.999, 1e-8, 0.0)
        assert abs(param[0, 0] + 0.01) < 1e-9
