import numpy as np
import pytest

from seqecon import autodiff as ad
from seqecon import nn
from seqecon.olg import LossWeights, OlgCalib, OlgModel, OlgStateBatch, \
    bond_homotopy, cohort_error_stats, default_labor_profile


def desk_calib(H=5, B=0.2):
    return OlgCalib(H=H, gamma=2.0, beta=0.96, B=B, b_floor=0.0, k_floor=0.0,
                    xi_adj=0.1, rho=0.85, sigma_A=0.03, delta_bar=0.1,
                    rho_delta=0.0, sigma_delta=0.2, mu_delta=-1.10,
                    pi_nn=0.94, pi_dd=2.0 / 3.0, alpha=0.3)


def small_model(H=5, B=0.2, T=6, n_quad=2):
    return OlgModel(desk_calib(H, B), T=T, hidden=(16, 16), n_quad=n_quad, seed=0)


def random_state(model, n, seed=0):
    rng = np.random.default_rng(seed)
    c = model.calib
    capital = np.zeros((n, c.H))
    capital[:, 1:] = rng.uniform(0.2, 0.8, (n, c.H - 1))
    bonds = np.zeros((n, c.H))
    bonds[:, 1:] = rng.uniform(0, 1, (n, c.H - 1))
    bonds[:, 1:] *= c.B / bonds[:, 1:].sum(axis=1, keepdims=True)
    return OlgStateBatch(
        regime=rng.integers(0, 2, n), log_A=rng.uniform(-0.05, 0.05, n),
        log_D=np.zeros(n), bonds=bonds, capital=capital,
        windows=rng.standard_normal((n, 3, model.T)) * 0.5)


class TestLaborProfile:
    def test_normalized_and_hump_shaped(self):
        for H in (3, 8, 72):
            lp = default_labor_profile(H)
            assert lp.sum() == pytest.approx(1.0, abs=1e-14)
            assert np.all(lp > 0)
            assert lp.argmax() not in (0, H - 1)
        lp = default_labor_profile(72)
        # late-life drop mimicking retirement
        assert lp[-1] < 0.5 * lp.max()


class TestHeads:
    def test_output_width_matches_contract(self):
        model = small_model(H=7)
        assert model.spec.n_outputs == 2 * (7 - 1) + 1

    def test_bond_market_clears_exactly(self):
        model = small_model(H=5, B=0.75)
        params = model.init_params()
        state = random_state(model, 32)
        _, bond_next, price = model.net_forward(params.values, state.inputs())
        totals = np.asarray(ad.value(bond_next)).sum(axis=1)
        np.testing.assert_allclose(totals, 0.75, atol=1e-12)
        assert np.all(np.asarray(ad.value(price)) > 0)

    def test_zero_supply_zero_choices(self):
        model = small_model(H=5, B=0.0)
        params = model.init_params()
        state = random_state(model, 8)
        _, bond_next, _ = model.net_forward(params.values, state.inputs())
        np.testing.assert_array_equal(np.asarray(ad.value(bond_next)), 0.0)

    def test_capital_floor_respected(self):
        model = small_model()
        params = model.init_params()
        state = random_state(model, 64, seed=3)
        choices = model.choices(params.values, state)
        assert np.all(np.asarray(ad.value(choices.capital_next)) >= 0.0)


class TestAllocation:
    def test_budget_identity_per_cohort(self):
        model = small_model()
        c = model.calib
        params = model.init_params()
        state = random_state(model, 16, seed=1)
        ch = model.choices(params.values, state)
        cons = np.asarray(ad.value(ch.consumption))
        price = np.asarray(ad.value(ch.price))
        b_next = np.asarray(ad.value(ch.bond_next))
        k_next = np.asarray(ad.value(ch.capital_next))
        wage = np.asarray(ad.value(ch.wage))
        rental = np.asarray(ad.value(ch.rental))
        delta = c.delta_of(state.log_D)
        payout = 1 - delta + rental
        for h in range(c.H):
            cah = c.labor_profile[h] * wage + state.bonds[:, h] + payout * state.capital[:, h]
            if h < c.H - 1:
                spend = price * b_next[:, h] + k_next[:, h] \
                    + model.psi.cost(k_next[:, h], state.capital[:, h])
            else:
                spend = model.psi.cost(0.0, state.capital[:, h])
            np.testing.assert_allclose(cons[:, h] + spend, cah, rtol=1e-12)

    def test_aging_shift_and_newborn_zero(self):
        model = small_model()
        params = model.init_params()
        state = random_state(model, 8, seed=2)
        new, ch = model.simulate_step(params, state, 5, seed=11)
        np.testing.assert_array_equal(new.capital[:, 0], 0.0)
        np.testing.assert_array_equal(new.bonds[:, 0], 0.0)
        np.testing.assert_allclose(new.capital[:, 1:], np.asarray(ad.value(ch.capital_next)))
        np.testing.assert_allclose(new.bonds[:, 1:], np.asarray(ad.value(ch.bond_next)))

    def test_walras_with_bond_flow(self):
        # sum of budgets: C + K' + adj costs = Y + (1-delta)K + B(1-p)
        model = small_model(H=6, B=0.3)
        c = model.calib
        params = model.init_params()
        state = random_state(model, 12, seed=4)
        state.bonds[:, 1:] = c.B / (c.H - 1)  # clearing holds entering the period
        ch = model.choices(params.values, state)
        cons = np.asarray(ad.value(ch.consumption))
        price = np.asarray(ad.value(ch.price))
        k_next = np.asarray(ad.value(ch.capital_next))
        K = state.capital.sum(axis=1)
        A = np.exp(state.log_A)
        delta = c.delta_of(state.log_D)
        Y = A * K ** c.alpha
        # recompute adjustment costs exactly as the allocation does
        adj = np.zeros(12)
        for h in range(c.H - 1):
            adj += model.psi.cost(k_next[:, h], state.capital[:, h])
        adj += model.psi.cost(0.0, state.capital[:, c.H - 1])
        lhs = cons.sum(axis=1) + k_next.sum(axis=1) + adj
        rhs = Y + (1 - delta) * K + c.B * (1 - price)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10)

    def test_factor_prices_satisfy_marginal_products(self):
        model = small_model()
        c = model.calib
        state = random_state(model, 6, seed=10)
        ch = model.choices(model.init_params().values, state)
        K = state.capital.sum(axis=1)
        A = np.exp(state.log_A)
        r = np.asarray(ad.value(ch.rental))
        w = np.asarray(ad.value(ch.wage))
        np.testing.assert_allclose(r, c.alpha * A * K ** (c.alpha - 1), rtol=1e-12)
        np.testing.assert_allclose(w, (1 - c.alpha) * A * K ** c.alpha, rtol=1e-12)
        # aggregate next-period capital equals the sum of cohort choices
        new, ch2 = model.simulate_step(model.init_params(), state, 3, seed=10)
        np.testing.assert_allclose(
            new.capital.sum(axis=1),
            np.asarray(ad.value(ch2.capital_next)).sum(axis=1), rtol=1e-14)

    def test_regime_and_depreciation_recording(self):
        model = small_model()
        params = model.init_params()
        state = random_state(model, 400, seed=5)
        new, _ = model.simulate_step(params, state, 9, seed=13)
        normal = new.regime == 0
        assert normal.any() and (~normal).any()
        # depreciation innovations are recorded only in the disaster branch
        np.testing.assert_array_equal(new.windows[normal, 2, -1], 0.0)
        assert np.all(new.windows[~normal, 2, -1] != 0.0)
        np.testing.assert_allclose(new.log_D[normal], 0.0, atol=1e-15)


class TestResiduals:
    def test_interior_reduces_to_euler_gap(self):
        model = small_model()
        params = model.init_params()
        state = random_state(model, 8, seed=6)
        resid, flagged = model.kkt_residuals(params.values, state)
        resid = np.asarray(ad.value(resid))
        assert flagged == 0
        assert resid.shape == (8, 2 * (model.calib.H - 1))
        assert np.all(np.isfinite(resid))

    def test_binding_constraint_zero_residual(self):
        # FB(0, positive gap) = 0 exactly
        from seqecon.kernel import fischer_burmeister
        assert fischer_burmeister(0.0, 0.7) == 0.0

    def test_penalty_on_negative_consumption(self):
        model = small_model(H=5, B=5.0)  # massive supply forces overspending
        params = model.init_params()
        state = random_state(model, 8, seed=7)
        state.bonds[:, 1:] = 0.0  # poor households, huge bond purchases
        resid, flagged = model.kkt_residuals(params.values, state)
        assert flagged > 0
        assert np.all(np.isfinite(np.asarray(ad.value(resid))))

    def test_loss_gradient_matches_finite_differences(self):
        model = OlgModel(desk_calib(H=3), T=3, hidden=(6,), n_quad=2, seed=1)
        params = model.init_params()
        state = random_state(model, 4, seed=8)
        leaf = ad.Tensor(params.values)
        loss, _ = model.loss_kkt(leaf, state, LossWeights())
        loss.backward()
        g = leaf.grad.copy()
        rng = np.random.default_rng(0)
        h = 1e-6
        for i in rng.choice(params.values.size, 20, replace=False):
            up, dn = params.values.copy(), params.values.copy()
            up[i] += h
            dn[i] -= h
            lu, _ = model.loss_kkt(up, state, LossWeights())
            ld, _ = model.loss_kkt(dn, state, LossWeights())
            fd = (float(lu) - float(ld)) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=1e-4, abs=1e-9)

    def test_implied_prices_positive_and_finite(self):
        model = small_model()
        params = model.init_params()
        state = random_state(model, 8, seed=9)
        p = model.implied_bond_prices(params.values, state, bond_supply=0.0)
        assert p.shape == (8, model.calib.H - 1)
        assert np.all(p > 0) and np.all(np.isfinite(p))


class TestHomotopySmoke:
    def test_runs_and_reports(self):
        model = OlgModel(desk_calib(H=3, B=0.1), T=4, hidden=(12,), n_quad=2, seed=2)
        res = bond_homotopy(model, n_data=64, n_minibatch=32, episodes_step1=8,
                            episodes_step2=4, episodes_step3=4, episodes_step4=8,
                            n_increments=2, learning_rate=1e-3, seed=3)
        assert not res.diverged
        assert len(res.loss_curve) == 8 + 4 + 2 * 4 + 8
        stats = cohort_error_stats(model, res.params, res.sim_state)
        assert len(stats) == 2 * (3 - 1)
        assert all(np.isfinite(r["mean"]) for r in stats)

    def test_deterministic_same_seed(self):
        def run():
            model = OlgModel(desk_calib(H=3, B=0.1), T=4, hidden=(8,), n_quad=2, seed=4)
            res = bond_homotopy(model, n_data=32, n_minibatch=16, episodes_step1=4,
                                episodes_step2=2, episodes_step3=2, episodes_step4=4,
                                n_increments=2, learning_rate=1e-3, seed=5)
            return res.params.values, tuple(res.loss_curve)

        p1, c1 = run()
        p2, c2 = run()
        np.testing.assert_array_equal(p1, p2)
        assert c1 == c2
