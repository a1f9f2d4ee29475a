"""Overlapping-generations economy with bonds, capital, and disaster risk.

One network maps the truncated history of (regime flags, TFP innovations,
depreciation innovations) to per-cohort portfolio choices and the bond
price.  Bond demands pass through a normalization layer so the market
clears identically: softplus weights scaled to the fixed supply.  Capital
choices are sigmoid shares of cash-at-hand net of bond spending, so they
respect the short-sale floor for any parameters.

The loss stacks the complementarity-collapsed first-order conditions of
every cohort and asset, rearranged so deviations read as relative
consumption errors.  Expectations mix two regime branches with
Gauss-Hermite nodes for the TFP innovation, adding depreciation nodes only
in the disaster branch where depreciation is actually stochastic.

Training follows the bond-supply homotopy: solve the capital-only economy,
pre-train the price head on the implied marginal bond valuation, then step
the supply up in increments, retraining from the previous solution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .kernel import AdjCostQuadratic, CrraUtility, fischer_burmeister
from .stoch import Ar1Spec, MarkovChain, gauss_hermite, normal_draws, \
    panel_flatten, panel_push, uniform_draws

HISTORY_LABELS = ("regime", "eps_A", "eps_delta")


def default_labor_profile(H):
    """Hump-shaped efficiency units with a late-life drop, normalized to sum 1.

    Rises to a peak around 45 percent of adult life, declines gently, then
    falls hard past 82 percent of the lifespan (age 60 of a 72-cohort run)
    as a proxy for retirement.
    """
    x = (np.arange(H) + 0.5) / H
    eff = np.where(
        x < 0.45, 0.6 + 0.8 * (x / 0.45),
        np.where(x < 0.82, 1.4 - 0.4 * (x - 0.45) / 0.37, 0.25))
    return eff / eff.sum()


@dataclass(frozen=True)
class OlgCalib:
    H: int
    gamma: float
    beta: float
    B: float
    b_floor: float
    k_floor: float
    xi_adj: float
    rho: float
    sigma_A: float
    delta_bar: float
    rho_delta: float
    sigma_delta: float
    mu_delta: float
    pi_nn: float
    pi_dd: float
    alpha: float = 0.3
    labor_profile: np.ndarray = None

    def __post_init__(self):
        if self.labor_profile is None:
            object.__setattr__(self, "labor_profile", default_labor_profile(self.H))
        lp = np.asarray(self.labor_profile, dtype=np.float64)
        object.__setattr__(self, "labor_profile", lp)
        if lp.size != self.H or np.any(lp < 0.0):
            raise ValueError("labor profile must be nonnegative with H entries")
        if abs(lp.sum() - 1.0) > 1e-12:
            raise ValueError("labor profile must sum to 1")
        for p in (self.pi_nn, self.pi_dd):
            if not 0.0 < p < 1.0:
                raise ValueError("regime persistence must lie in (0,1)")

    def regime_chain(self):
        return MarkovChain([0.0, 1.0], [[self.pi_nn, 1.0 - self.pi_nn],
                                        [1.0 - self.pi_dd, self.pi_dd]])

    def tfp_ar1(self):
        return Ar1Spec(self.rho, self.sigma_A)

    def depr_ar1(self):
        return Ar1Spec(self.rho_delta, self.sigma_delta)

    def delta_of(self, log_D):
        return self.delta_bar * 2.0 / (1.0 + np.exp(log_D))


@dataclass
class OlgStateBatch:
    """Cross-section of simulated trajectories.

    Holdings are by age: column h is what age-(h+1) households own entering
    the period, so column 0 (newborns) is identically zero and the market
    totals are sums over columns.
    """

    regime: np.ndarray     # (N,) int
    log_A: np.ndarray      # (N,)
    log_D: np.ndarray      # (N,)
    bonds: np.ndarray      # (N, H)
    capital: np.ndarray    # (N, H)
    windows: np.ndarray    # (N, 3, T), label order regime, eps_A, eps_delta

    @property
    def n(self):
        return self.regime.size

    def inputs(self):
        return panel_flatten(self.windows)


@dataclass
class OlgChoices:
    """Per-cohort decisions and the implied allocation at one date."""

    bond_next: object      # (N, H-1) chosen by ages 1..H-1
    capital_next: object   # (N, H-1)
    price: object          # (N,)
    consumption: object    # (N, H)
    wage: object
    rental: object


@dataclass
class LossWeights:
    bond: float = 1.0
    capital: float = 1.0


class OlgModel:
    def __init__(self, calib: OlgCalib, T=48, hidden=(128, 128, 128), n_quad=4,
                 seed=0):
        self.calib = calib
        self.T = int(T)
        self.quad = gauss_hermite(n_quad)
        self.chain = calib.regime_chain()
        n_out = 2 * (calib.H - 1) + 1
        widths = (3 * self.T,) + tuple(int(h) for h in hidden) + (n_out,)
        acts = ("gelu",) * len(hidden) + ("linear",)
        self.spec = nn.NetworkSpec(widths, acts, seed=seed)
        self.util = CrraUtility(calib.gamma)
        self.psi = AdjCostQuadratic(calib.xi_adj)

    def init_params(self):
        return nn.init_params(self.spec)

    # -- network heads -------------------------------------------------------
    def net_forward(self, flat, inputs, bond_supply=None):
        """Raw outputs to (capital shares, bond choices, price).

        Bond choices are softplus weights renormalized to the supply, so the
        bond market clears exactly at every state for any parameters; the
        price output is softplus-activated.
        """
        c = self.calib
        B = c.B if bond_supply is None else bond_supply
        H1 = c.H - 1
        out = nn.forward_flat(flat, self.spec, inputs)
        shares = ad.sigmoid(out[:, :H1])
        bond_w = ad.softplus(out[:, H1:2 * H1])
        total = ad.tsum(bond_w, axis=1, keepdims=True)
        spread = B - H1 * c.b_floor
        bond_next = c.b_floor + spread * (bond_w / total)
        price = ad.softplus(out[:, 2 * H1])
        return shares, bond_next, price

    # -- allocation ------------------------------------------------------------
    def prices_at(self, log_A, capital_total):
        c = self.calib
        A = ad.exp(log_A) if ad.is_tensor(log_A) else np.exp(log_A)
        # floor keeps factor prices finite if a wild early policy drives the
        # aggregate capital stock to zero; the consumption penalty then has
        # finite numbers to push against
        ktot_v = np.asarray(ad.value(capital_total))
        capital_total = ad.where(ktot_v > 1e-9, capital_total, 1e-9)
        rental = c.alpha * A * ad.power(capital_total, c.alpha - 1.0)
        wage = (1.0 - c.alpha) * A * ad.power(capital_total, c.alpha)
        return rental, wage

    def allocation(self, state_like, shares, bond_next, price):
        """Choices and consumption given holdings, prices, and head outputs.

        state_like provides (log_A, delta, bonds, capital); entries may be
        Tensors at t+1 nodes during loss evaluation.
        """
        c = self.calib
        log_A, delta, bonds, capital = state_like
        ktot = ad.tsum(capital, axis=1) if ad.is_tensor(capital) else capital.sum(axis=1)
        rental, wage = self.prices_at(log_A, ktot)
        payout = 1.0 - delta + rental
        lp = c.labor_profile

        cons_cols = []
        cap_cols = []
        for h in range(c.H):
            cah_h = lp[h] * wage + bonds[:, h] + payout * capital[:, h]
            if h < c.H - 1:
                spend_b = price * bond_next[:, h]
                avail = ad.relu(cah_h - spend_b)
                k_next = shares[:, h] * avail
                cons = cah_h - spend_b - k_next - self.psi.cost(k_next, capital[:, h])
                cap_cols.append(k_next)
            else:
                cons = cah_h - self.psi.cost(0.0, capital[:, h])
            cons_cols.append(cons)
        consumption = ad.stack(cons_cols, axis=1)
        capital_next = ad.stack(cap_cols, axis=1)
        return OlgChoices(bond_next, capital_next, price, consumption, wage, rental)

    def choices(self, flat, state: OlgStateBatch, bond_supply=None):
        shares, bond_next, price = self.net_forward(flat, state.inputs(), bond_supply)
        delta = self.calib.delta_of(state.log_D)
        return self.allocation((state.log_A, delta, state.bonds, state.capital),
                               shares, bond_next, price)

    # -- expectation nodes -----------------------------------------------------
    def _nodes(self):
        """(regime', eps_A, eps_delta, base weight) per integration node.

        Depreciation innovations appear only in the disaster branch; the
        normal branch fixes them at zero, matching the simulation's record.
        Base weights are per next-regime column, to be multiplied by the
        state's transition-row entry.
        """
        qa, wa = self.quad.nodes, self.quad.weights
        nodes = []
        for i in range(qa.size):
            nodes.append((0, qa[i], 0.0, wa[i]))
        for i in range(qa.size):
            for j in range(qa.size):
                nodes.append((1, qa[i], qa[j], wa[i] * wa[j]))
        return nodes

    def _recorded(self, eps_a, eps_d):
        """History entries record only innovations that can move anything."""
        c = self.calib
        return (eps_a if c.sigma_A > 0 else 0.0,
                eps_d if c.sigma_delta > 0 else 0.0)

    # -- residuals ---------------------------------------------------------------
    def kkt_residuals(self, flat, state: OlgStateBatch, bond_supply=None):
        """FB-collapsed optimality residuals, (N, 2(H-1)).

        Layout: bond conditions for ages 1..H-1, then capital conditions.
        Nonpositive consumption or nonpositive expected returns swap in the
        1 + |c| penalty; the count of such rows is returned.
        """
        c = self.calib
        u = self.util
        B = c.B if bond_supply is None else bond_supply
        n = state.n
        H = c.H
        now = self.choices(flat, state, bond_supply=B)
        cons_now_v = np.asarray(ad.value(now.consumption))
        ok_now = cons_now_v > 0.0

        trans = self.chain.transition[state.regime]  # (N, 2)
        spec_a, spec_d = c.tfp_ar1(), c.depr_ar1()

        # batch every node's forward pass in one network call
        nodes = self._nodes()
        blocks = []
        meta = []
        for regime_next, ea, ed, w_base in nodes:
            ea_rec, ed_rec = self._recorded(ea, ed)
            pushed = panel_push(state.windows,
                                np.column_stack([
                                    np.full(n, float(regime_next)),
                                    np.full(n, ea_rec), np.full(n, ed_rec)]))
            blocks.append(panel_flatten(pushed))
            log_A_next = spec_a.rho * state.log_A + spec_a.sigma * ea
            if regime_next == 1:
                log_D_next = c.mu_delta + spec_d.rho * state.log_D + spec_d.sigma * ed
            else:
                log_D_next = spec_d.rho * state.log_D
            delta_next = c.delta_of(log_D_next)
            weight = trans[:, regime_next] * w_base
            meta.append((log_A_next, delta_next, weight))

        X = np.concatenate(blocks, axis=0)
        shares_all, bond_all, price_all = self.net_forward(flat, X, bond_supply=B)

        zeros = np.zeros((n, 1))
        bonds_next_full = ad.concat([zeros, now.bond_next], axis=1)
        capital_next_full = ad.concat([zeros, now.capital_next], axis=1)

        exp_bond = [None] * (H - 1)
        exp_cap = [None] * (H - 1)
        ok_next = ok_now.all(axis=1)
        for q, (log_A_next, delta_next, weight) in enumerate(meta):
            rows = slice(q * n, (q + 1) * n)
            nxt = self.allocation(
                (log_A_next, delta_next, bonds_next_full, capital_next_full),
                shares_all[rows], bond_all[rows], price_all[rows])
            cons_next_v = np.asarray(ad.value(nxt.consumption))
            ok_next = ok_next & (cons_next_v > 0.0).all(axis=1)
            payout_next = 1.0 - delta_next + nxt.rental
            for h in range(H - 1):
                c_next = nxt.consumption[:, h + 1]
                mu_next = ad.power(ad.where(cons_next_v[:, h + 1] > 0, c_next, 1.0),
                                   -c.gamma)
                term_b = weight * mu_next
                exp_bond[h] = term_b if exp_bond[h] is None else exp_bond[h] + term_b
                if h + 1 < H - 1:
                    k_after = nxt.capital_next[:, h + 1]
                else:
                    k_after = 0.0
                ret = payout_next - self.psi.dcost_dk(k_after, capital_next_full[:, h + 1])
                term_k = weight * mu_next * ret
                exp_cap[h] = term_k if exp_cap[h] is None else exp_cap[h] + term_k

        res_cols_b = []
        res_cols_k = []
        for h in range(H - 1):
            c_h = now.consumption[:, h]
            c_h_safe = ad.where(ok_now[:, h], c_h, 1.0)
            lhs_coef = 1.0 + self.psi.dcost_dknext(now.capital_next[:, h],
                                                   state.capital[:, h])
            arg_b = c.beta * exp_bond[h] / now.price
            arg_k = c.beta * exp_cap[h] / lhs_coef
            ok_h = (ok_now[:, h] & ok_next
                    & (np.asarray(ad.value(arg_k)) > 0.0)
                    & (np.asarray(ad.value(lhs_coef)) > 0.0))
            arg_b_safe = ad.where(ok_h, arg_b, 1.0)
            arg_k_safe = ad.where(ok_h, arg_k, 1.0)
            gap_b = ad.power(arg_b_safe, -1.0 / c.gamma) / c_h_safe - 1.0
            gap_k = ad.power(arg_k_safe, -1.0 / c.gamma) / c_h_safe - 1.0
            slack_b = (now.bond_next[:, h] - c.b_floor) / c_h_safe
            slack_k = (now.capital_next[:, h] - c.k_floor) / c_h_safe
            penalty = 1.0 - now.consumption[:, h]
            res_cols_b.append(ad.where(ok_h, fischer_burmeister(slack_b, gap_b), penalty))
            res_cols_k.append(ad.where(ok_h, fischer_burmeister(slack_k, gap_k), penalty))
        resid = ad.stack(res_cols_b + res_cols_k, axis=1)
        flagged = int(np.count_nonzero(~(ok_now.all(axis=1) & ok_next)))
        return resid, flagged

    def implied_bond_prices(self, flat, state: OlgStateBatch, bond_supply=0.0):
        """Per-cohort interior bond valuations beta E[u'(c')] / u'(c).

        The largest of them prices the first unit of bond supply; used as
        the supervised target when pre-training the price head.
        """
        c = self.calib
        now = self.choices(flat, state, bond_supply=bond_supply)
        cons_now = np.asarray(ad.value(now.consumption))
        trans = self.chain.transition[state.regime]
        spec_a, spec_d = c.tfp_ar1(), c.depr_ar1()
        n = state.n
        zeros = np.zeros((n, 1))
        bonds_next_full = np.concatenate([zeros, np.asarray(ad.value(now.bond_next))], axis=1)
        capital_next_full = np.concatenate([zeros, np.asarray(ad.value(now.capital_next))], axis=1)
        exp_bond = np.zeros((n, c.H - 1))
        for regime_next, ea, ed, w_base in self._nodes():
            ea_rec, ed_rec = self._recorded(ea, ed)
            pushed = panel_push(state.windows, np.column_stack([
                np.full(n, float(regime_next)), np.full(n, ea_rec), np.full(n, ed_rec)]))
            shares, bonds_chosen, price = self.net_forward(
                ad.value(flat) if ad.is_tensor(flat) else flat,
                panel_flatten(pushed), bond_supply=bond_supply)
            log_A_next = spec_a.rho * state.log_A + spec_a.sigma * ea
            if regime_next == 1:
                log_D_next = c.mu_delta + spec_d.rho * state.log_D + spec_d.sigma * ed
            else:
                log_D_next = spec_d.rho * state.log_D
            nxt = self.allocation(
                (log_A_next, c.delta_of(log_D_next), bonds_next_full, capital_next_full),
                shares, bonds_chosen, price)
            weight = trans[:, regime_next] * w_base
            cons_next = np.maximum(np.asarray(ad.value(nxt.consumption)), 1e-12)
            exp_bond += weight[:, None] * cons_next[:, 1:] ** -c.gamma
        mu_now = np.maximum(cons_now[:, :-1], 1e-12) ** -c.gamma
        return c.beta * exp_bond / mu_now

    # -- losses ------------------------------------------------------------------
    def loss_kkt(self, flat, state: OlgStateBatch, weights: LossWeights,
                 bond_supply=None):
        resid, flagged = self.kkt_residuals(flat, state, bond_supply)
        H1 = self.calib.H - 1
        res_b = resid[:, :H1]
        res_k = resid[:, H1:]
        loss = weights.bond * ad.tmean(res_b * res_b) \
            + weights.capital * ad.tmean(res_k * res_k)
        return loss, flagged

    def loss_price_pretrain(self, flat, state: OlgStateBatch, price_target):
        """Supervised relative loss pinning the price head to a target."""
        _, _, price = self.net_forward(flat, state.inputs())
        rel = price / price_target - 1.0
        return ad.tmean(rel * rel)

    # -- simulation ---------------------------------------------------------------
    def init_state(self, n, seed):
        c = self.calib
        k_star = (c.alpha / (1.0 / c.beta - 1.0 + c.delta_bar)) ** (1.0 / (1.0 - c.alpha))
        jitter = uniform_draws(seed, 0, "init_K", n)
        k_total = k_star * (0.8 + 0.4 * jitter)
        capital = np.zeros((n, c.H))
        capital[:, 1:] = k_total[:, None] / (c.H - 1)
        bonds = np.zeros((n, c.H))
        bonds[:, 1:] = c.B / (c.H - 1)
        return OlgStateBatch(np.zeros(n, dtype=int), np.zeros(n), np.zeros(n),
                             bonds, capital, np.zeros((n, 3, self.T)))

    def simulate_step(self, params, state: OlgStateBatch, date, seed,
                      bond_supply=None):
        c = self.calib
        flat = params.values if isinstance(params, nn.NetworkParams) else params
        now = self.choices(flat, state, bond_supply=bond_supply)
        n = state.n

        u_reg = uniform_draws(seed, date, "regime", n)
        cum = np.cumsum(self.chain.transition[state.regime], axis=1)
        regime_next = (u_reg[:, None] >= cum).sum(axis=1)
        eps_a = normal_draws(seed, date, "eps_A", n)
        eps_d_raw = normal_draws(seed, date, "eps_delta", n)
        # record the innovations that actually hit the economy: depreciation
        # shocks apply only in the disaster regime, and either shock records
        # as zero in deterministic variants
        eps_d = np.where((regime_next == 1) & (c.sigma_delta > 0), eps_d_raw, 0.0)
        eps_a_rec = eps_a if c.sigma_A > 0 else np.zeros(n)

        log_A_next = c.rho * state.log_A + c.sigma_A * eps_a
        log_D_next = np.where(
            regime_next == 1,
            c.mu_delta + c.rho_delta * state.log_D + c.sigma_delta * eps_d,
            c.rho_delta * state.log_D)

        zeros = np.zeros((n, 1))
        bonds_next = np.concatenate([zeros, np.asarray(ad.value(now.bond_next))], axis=1)
        capital_next = np.concatenate([zeros, np.asarray(ad.value(now.capital_next))], axis=1)
        windows = panel_push(state.windows, np.column_stack(
            [regime_next.astype(np.float64), eps_a_rec, eps_d]))
        return OlgStateBatch(regime_next, log_A_next, log_D_next, bonds_next,
                             capital_next, windows), now

    def burn_in(self, params, state, seed, bond_supply=None):
        for t in range(self.T):
            state, _ = self.simulate_step(params, state, t, seed, bond_supply)
        return state


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class OlgTrainResult:
    params: nn.NetworkParams
    state: nn.AdamState
    loss_curve: list
    sim_state: OlgStateBatch
    flagged: int
    diverged: bool = False


def _train_phase(model: OlgModel, params, opt, sim, seed, n_episodes, n_minibatch,
                 bond_supply, weights, date_offset, curve, price_target_fn=None,
                 lr=None, guard_window=500, guard_factor=10.0):
    """Shared episode loop for every homotopy phase.

    ``price_target_fn`` switches the loss to supervised price pre-training.
    The divergence guard halts when the loss exceeds ``guard_factor`` times
    its rolling minimum for ``guard_window`` straight episodes.
    """
    n_data = sim.n
    n_batches = max(1, n_data // n_minibatch)
    flagged = 0
    rolling_min = np.inf
    over = 0
    if lr is not None:
        opt.learning_rate = lr
    for episode in range(n_episodes):
        date = date_offset + episode
        sim, _ = model.simulate_step(params, sim, date, seed, bond_supply)
        if price_target_fn is not None:
            target = price_target_fn(params, sim)
        ep_loss = 0.0
        for b in range(n_batches):
            rows = slice(b * n_minibatch, (b + 1) * n_minibatch)
            batch = OlgStateBatch(sim.regime[rows], sim.log_A[rows], sim.log_D[rows],
                                  sim.bonds[rows], sim.capital[rows], sim.windows[rows])
            leaf = ad.Tensor(params.values)
            if price_target_fn is not None:
                loss = model.loss_price_pretrain(leaf, batch, target[rows])
            else:
                loss, fl = model.loss_kkt(leaf, batch, weights, bond_supply)
                flagged += fl
            loss.backward()
            opt, params = nn.adam_step(opt, params, leaf.grad)
            ep_loss += float(ad.value(loss))
        ep_loss /= n_batches
        curve.append((date, ep_loss))
        rolling_min = min(rolling_min, ep_loss)
        over = over + 1 if ep_loss > guard_factor * rolling_min else 0
        if over >= guard_window:
            return params, opt, sim, flagged, True
    return params, opt, sim, flagged, False


def bond_homotopy(model: OlgModel, n_data, n_minibatch, episodes_step1,
                  episodes_step2, episodes_step3, episodes_step4, n_increments=4,
                  learning_rate=1e-3, seed=0, params=None, opt=None,
                  lr_polish=None, callback=None):
    """Four-step training: capital only, price pre-training, incremental bond
    supply, final polish.  Each phase warm-starts from the previous one."""
    c = model.calib
    if params is None:
        params = model.init_params()
    if opt is None:
        opt = nn.adam_init(params, learning_rate)
    curve = []
    sim = model.burn_in(params, model.init_state(n_data, seed), seed, bond_supply=0.0)
    flagged = 0

    # step 1: capital-only economy (zero bond supply, bond loss off)
    params, opt, sim, fl, div = _train_phase(
        model, params, opt, sim, seed, episodes_step1, n_minibatch, 0.0,
        LossWeights(bond=0.0, capital=1.0), model.T, curve)
    flagged += fl

    # step 2: supervised price head on the largest implied bond valuation
    if not div:
        def price_target(p, s):
            return model.implied_bond_prices(p.values, s, bond_supply=0.0).max(axis=1)

        params, opt, sim, _, div = _train_phase(
            model, params, opt, sim, seed, episodes_step2, n_minibatch, 0.0,
            LossWeights(), model.T + episodes_step1, curve,
            price_target_fn=price_target)

    # step 3: walk the bond supply up, full loss
    offset = model.T + episodes_step1 + episodes_step2
    if not div:
        for j in range(1, n_increments + 1):
            supply = c.B * j / n_increments
            params, opt, sim, fl, div = _train_phase(
                model, params, opt, sim, seed, episodes_step3, n_minibatch, supply,
                LossWeights(), offset, curve)
            flagged += fl
            offset += episodes_step3
            if callback is not None:
                callback(f"step3 supply {supply:.3f}", curve[-1][1] if curve else np.nan)
            if div:
                break

    # step 4: final polish at the full supply
    if not div:
        params, opt, sim, fl, div = _train_phase(
            model, params, opt, sim, seed, episodes_step4, n_minibatch, c.B,
            LossWeights(), offset, curve, lr=lr_polish)
        flagged += fl

    return OlgTrainResult(params, opt, curve, sim, flagged, diverged=div)


def cohort_error_stats(model: OlgModel, params, states: OlgStateBatch):
    """Per-cohort, per-asset absolute residual statistics on given states."""
    resid, _ = model.kkt_residuals(params.values, states)
    resid = np.abs(np.asarray(ad.value(resid)))
    H1 = model.calib.H - 1
    rows = []
    for h in range(H1):
        for name, col in (("bond", resid[:, h]), ("capital", resid[:, H1 + h])):
            rows.append({
                "group": f"age{h + 1}_{name}",
                "mean": float(col.mean()),
                "p90": float(np.percentile(col, 90)),
                "p99": float(np.percentile(col, 99)),
                "p99.9": float(np.percentile(col, 99.9)),
            })
    return rows
