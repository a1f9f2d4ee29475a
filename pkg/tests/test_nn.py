import numpy as np
import pytest

from seqecon import autodiff as ad
from seqecon import nn


def small_spec(seed=0):
    return nn.NetworkSpec((3, 8, 5, 2), ("gelu", "gelu", "sigmoid"), seed=seed)


class TestSpecValidation:
    def test_requires_hidden_layer(self):
        with pytest.raises(ValueError):
            nn.NetworkSpec((3, 1), ("linear",))

    def test_activation_count(self):
        with pytest.raises(ValueError):
            nn.NetworkSpec((3, 4, 1), ("gelu",))

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            nn.NetworkSpec((3, 4, 1), ("gelu", "tanh"))

    def test_param_count(self):
        spec = small_spec()
        assert spec.n_params() == 3 * 8 + 8 + 8 * 5 + 5 + 5 * 2 + 2


class TestForward:
    def test_zero_weights_sigmoid_gives_half(self):
        spec = small_spec()
        params = nn.NetworkParams(np.zeros(spec.n_params()), spec.layer_shapes())
        out = nn.forward(params, spec, np.array([0.3, -1.0, 2.0]))
        np.testing.assert_allclose(out, 0.5)

    def test_identity_one_by_one(self):
        spec = nn.NetworkSpec((1, 1, 1), ("linear", "linear"))
        params = nn.NetworkParams(np.array([1.0, 0.0, 1.0, 0.0]), spec.layer_shapes())
        for x in (-2.0, 0.0, 3.5):
            np.testing.assert_allclose(nn.forward(params, spec, np.array([x])), [x])

    def test_gelu_zero_is_zero(self):
        spec = nn.NetworkSpec((1, 1, 1), ("linear", "gelu"))
        params = nn.NetworkParams(np.array([1.0, 0.0, 1.0, 0.0]), spec.layer_shapes())
        np.testing.assert_allclose(nn.forward(params, spec, np.array([0.0])), [0.0])

    def test_dimension_mismatch_rejected(self):
        spec = small_spec()
        params = nn.init_params(spec)
        with pytest.raises(nn.DimensionError):
            nn.forward(params, spec, np.zeros(4))

    def test_forward_pure_and_bit_identical(self):
        spec = small_spec(seed=7)
        params = nn.init_params(spec)
        x = np.random.default_rng(1).standard_normal((10, 3))
        a = nn.forward(params, spec, x)
        b = nn.forward(params, spec, x)
        assert np.array_equal(a, b)

    def test_batch_matches_single(self):
        spec = small_spec(seed=3)
        params = nn.init_params(spec)
        x = np.random.default_rng(2).standard_normal((4, 3))
        batch = nn.forward(params, spec, x)
        for i in range(4):
            np.testing.assert_allclose(nn.forward(params, spec, x[i]), batch[i], rtol=1e-15)


class TestGradient:
    def test_affine_chain_rule(self):
        # 1x1 linear net, w=2 b=0, input 3, loss = output: grad w = 3, grad b = 1
        spec = nn.NetworkSpec((1, 1, 1), ("linear", "linear"))
        params = nn.NetworkParams(np.array([2.0, 0.0, 1.0, 0.0]), spec.layer_shapes())
        g = nn.gradient(params, spec, np.array([3.0]), lambda out: out.sum())
        # layers: [w1, b1, w2, b2]; output = w2*(w1*x + b1) + b2
        np.testing.assert_allclose(g, [3.0, 1.0, 6.0, 1.0])

    def test_constant_loss_zero_grad(self):
        spec = small_spec()
        params = nn.init_params(spec, seed=5)
        g = nn.gradient(params, spec, np.ones(3), lambda out: (out * 0.0).sum())
        np.testing.assert_allclose(g, 0.0)

    def test_matches_finite_differences_many_draws(self):
        # spec invariant: >= 100 random (spec, params, input) draws at 1e-5 rel tol
        rng = np.random.default_rng(42)
        failures = 0
        for trial in range(100):
            widths = (int(rng.integers(2, 5)), int(rng.integers(2, 6)),
                      int(rng.integers(2, 6)), int(rng.integers(1, 4)))
            acts = tuple(rng.choice(["gelu", "sigmoid", "softplus", "linear"], size=3))
            spec = nn.NetworkSpec(widths, acts, seed=trial)
            params = nn.init_params(spec)
            x = rng.standard_normal(widths[0])
            w = rng.standard_normal(widths[-1])

            def loss_np(flat):
                p = nn.NetworkParams(flat, spec.layer_shapes())
                return float(np.sum(nn.forward(p, spec, x) * w))

            g = nn.gradient(params, spec, x, lambda out: (out * w).sum())
            h = 1e-6
            fd = np.zeros_like(g)
            for i in range(g.size):
                up = params.values.copy()
                dn = params.values.copy()
                up[i] += h
                dn[i] -= h
                fd[i] = (loss_np(up) - loss_np(dn)) / (2 * h)
            denom = np.maximum(np.abs(fd), 1e-4)
            if np.max(np.abs(g - fd) / denom) > 1e-5:
                failures += 1
        assert failures == 0

    def test_nonfinite_intermediate_flagged_with_layer(self):
        spec = nn.NetworkSpec((1, 1, 1), ("linear", "linear"))
        params = nn.NetworkParams(np.array([1e308, 1e308, 1e308, 0.0]), spec.layer_shapes())
        with pytest.raises(nn.NonFiniteError) as exc:
            nn.gradient(params, spec, np.array([10.0]), lambda out: out.sum())
        assert exc.value.layer is not None


class TestAdam:
    def test_first_step_is_signed_lr(self):
        spec = small_spec()
        params = nn.init_params(spec, seed=1)
        state = nn.adam_init(params, learning_rate=0.01)
        g = np.full(params.values.size, 3.7)
        g[::2] = -1.2
        state2, params2 = nn.adam_step(state, params, g)
        delta = params2.values - params.values
        np.testing.assert_allclose(delta, -0.01 * np.sign(g), rtol=1e-6)
        assert state2.step_count == 1

    def test_zero_grad_never_moves(self):
        spec = small_spec()
        params = nn.init_params(spec, seed=2)
        state = nn.adam_init(params, learning_rate=0.1)
        p = params
        for _ in range(5):
            state, p = nn.adam_step(state, p, np.zeros(p.values.size))
        np.testing.assert_array_equal(p.values, params.values)

    def test_two_steps_fixed_grad_shrinking_delta(self):
        # closed-form recursion: with constant g, bias-corrected m/sqrt(v) stays
        # sign(g), so |delta2| <= |delta1| (1 + eps-slack)
        spec = small_spec()
        params = nn.init_params(spec, seed=3)
        lr, eps = 0.05, 1e-8
        state = nn.adam_init(params, learning_rate=lr, epsilon=eps)
        g = np.full(params.values.size, 0.37)
        state, p1 = nn.adam_step(state, params, g)
        d1 = np.abs(p1.values - params.values)
        state, p2 = nn.adam_step(state, p1, g)
        d2 = np.abs(p2.values - p1.values)
        assert np.all(d2 <= d1 * (1.0 + 1e-6))
        # oracle: exact two-step Adam recursion on a scalar
        b1, b2 = 0.9, 0.999
        m1, v1 = (1 - b1) * 0.37, (1 - b2) * 0.37 ** 2
        m2, v2 = b1 * m1 + (1 - b1) * 0.37, b2 * v1 + (1 - b2) * 0.37 ** 2
        step1 = lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
        step2 = lr * (m2 / (1 - b1 ** 2)) / (np.sqrt(v2 / (1 - b2 ** 2)) + eps)
        np.testing.assert_allclose(d1, step1, rtol=1e-12)
        np.testing.assert_allclose(d2, step2, rtol=1e-12)

    def test_lr_zero_is_identity(self):
        spec = small_spec()
        params = nn.init_params(spec, seed=4)
        state = nn.adam_init(params, learning_rate=0.0)
        _, p2 = nn.adam_step(state, params, np.ones(params.values.size))
        np.testing.assert_array_equal(p2.values, params.values)

    def test_nonfinite_grad_refused(self):
        spec = small_spec()
        params = nn.init_params(spec, seed=5)
        state = nn.adam_init(params, learning_rate=0.1)
        g = np.ones(params.values.size)
        g[3] = np.nan
        state2, params2 = nn.adam_step(state, params, g)
        assert state2.rejected_steps == 1
        assert state2.step_count == 0
        np.testing.assert_array_equal(params2.values, params.values)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        spec = small_spec(seed=11)
        params = nn.init_params(spec)
        state = nn.adam_init(params, learning_rate=1e-4)
        g = np.random.default_rng(0).standard_normal(params.values.size)
        state, params = nn.adam_step(state, params, g)
        path = tmp_path / "net.ckpt"
        nn.save_checkpoint(path, spec, params, state)
        spec2, params2, state2 = nn.load_checkpoint(path)
        assert spec2 == spec
        np.testing.assert_array_equal(params2.values, params.values)
        np.testing.assert_array_equal(state2.m, state.m)
        np.testing.assert_array_equal(state2.v, state.v)
        assert state2.step_count == 1
        assert state2.learning_rate == 1e-4

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTANET0" + b"\x00" * 32)
        with pytest.raises(ValueError):
            nn.load_checkpoint(path)

    def test_header_layout(self, tmp_path):
        spec = small_spec()
        params = nn.init_params(spec, seed=0)
        path = tmp_path / "n.ckpt"
        nn.save_checkpoint(path, spec, params, None)
        blob = path.read_bytes()
        assert blob[:8] == nn.MAGIC
        hlen = int(np.frombuffer(blob[8:12], dtype="<u4")[0])
        assert len(blob) == 12 + hlen + params.values.size * 8
