"""Heterogeneous firms and households with aggregate uncertainty regimes.

Four networks map the truncated history of (TFP innovations, uncertainty
regimes) to: a gridded firm capital policy (monotone head), a gridded firm
multiplier policy (positive decreasing head), a gridded household
consumption function (MPC-bounded head), and the equity price (softplus).

Firm networks train on their own Euler/complementarity residuals; the
household and price networks train supervised against targets produced by
an endogenous-grid step nested in a fixed-step Newton-Raphson search for
the market-clearing equity price.  Firms discount with the holdings-
weighted average of shareholder intertemporal marginal rates of
substitution, blended toward the patience parameter along the training
schedule.

Cross-sections are Young histograms on the policy grids, so the firm
histogram advances directly on gridded policy values without interpolation;
exiting firms are replaced by startups carrying the average chosen capital
stock and the stationary idiosyncratic productivity mix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .heads import Grid1D, log_grid, log_decreasing_values, monotone_values, mpc_values
from .kernel import AdjCostAsymSmooth, CrraUtility, egm_step, fischer_burmeister, \
    firm_factor_block, histogram_step, lottery_weights, newton_clear, \
    wage_from_distribution
from .stoch import Ar1Spec, MarkovChain, gauss_hermite, normal_draws, \
    panel_flatten, panel_push, rouwenhorst, uniform_draws

HISTORY_LABELS = ("eps_A", "regime")
NET_NAMES = ("k", "lam", "c", "p")


@dataclass(frozen=True)
class HetCalib:
    gamma: float = 2.0
    beta: float = 0.95
    theta_floor: float = 0.0
    rho_e: float = 0.871
    sigma_e: float = 0.246
    rho_A: float = 0.8145
    sigma_A_L: float = 0.0124
    sigma_A_H: float = 0.0199
    delta: float = 0.1
    alpha: float = 0.25
    zeta: float = 0.25
    survival: float = 0.965
    z_levels: tuple = (0.5, 1.0, 1.5)
    u_spread: float = 0.075
    pi_z_L: tuple = ((0.850, 0.150, 0.000),
                     (0.075, 0.850, 0.075),
                     (0.000, 0.150, 0.850))
    pi_u: tuple = ((0.90, 0.10), (0.21, 0.79))
    xi_up: float = 1.0
    xi_down: float = 2.5
    s_smooth: float = 400.0
    d_floor: float = 0.0

    def __post_init__(self):
        z = np.asarray(self.z_levels)
        if abs(z[1] - 0.5 * (z[0] + z[2])) > 1e-12:
            raise ValueError("middle productivity must be the average of the extremes")
        if np.any(self.pi_z_high() < -1e-12):
            raise ValueError("u_spread too large for the base transition matrix")

    def pi_z_low(self):
        return np.asarray(self.pi_z_L, dtype=np.float64)

    def pi_z_high(self):
        # spreads the tails while keeping levels and conditional means fixed
        return self.pi_z_low() + self.u_spread * np.array([[1.0, -2.0, 1.0]] * 3)

    def u_chain(self):
        return MarkovChain([0.0, 1.0], np.asarray(self.pi_u))

    def household_chain(self):
        return rouwenhorst(2, Ar1Spec(self.rho_e, self.sigma_e),
                           normalize_mean_level=True)

    def sigma_A(self, regime):
        return np.where(np.asarray(regime) == 1, self.sigma_A_H, self.sigma_A_L)

    def adj(self, xi_up=None, xi_down=None):
        return AdjCostAsymSmooth(self.xi_up if xi_up is None else xi_up,
                                 self.xi_down if xi_down is None else xi_down,
                                 self.s_smooth)


@dataclass
class HetStateBatch:
    regime: np.ndarray   # (N,) uncertainty regime, 0 low / 1 high
    log_A: np.ndarray    # (N,)
    mu_f: np.ndarray     # (N, 3, n_k), total mass = survival rate
    mu_h: np.ndarray     # (N, 2, n_theta), total mass 1
    windows: np.ndarray  # (N, 2, T): eps_A block then regime block

    @property
    def n(self):
        return self.regime.size

    def inputs(self):
        return panel_flatten(self.windows)

    def rows(self, sl):
        return HetStateBatch(self.regime[sl], self.log_A[sl], self.mu_f[sl],
                             self.mu_h[sl], self.windows[sl])


@dataclass
class HetTargets:
    """Market-clearing supervision targets, frozen for the episode.

    ``valid`` masks states whose clearing search actually converged;
    supervised loss terms skip the rest (early in training a state with
    deeply negative dividends has no positive-price equilibrium at all).
    """

    price: np.ndarray        # (N,)
    consumption: np.ndarray  # (N, 2, n_theta)
    mpc: np.ndarray          # (N, 2, n_theta), layout [c0, mpc_1, ...]
    theta_next: np.ndarray   # (N, 2, n_theta)
    excess_demand: np.ndarray
    newton_skipped: int
    bisection_states: int
    valid: np.ndarray = None

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(self.price.shape, dtype=bool)

    def rows(self, sl):
        return HetTargets(self.price[sl], self.consumption[sl], self.mpc[sl],
                          self.theta_next[sl], self.excess_demand[sl],
                          0, 0, self.valid[sl])


@dataclass
class LossWeights:
    firm1: float = 1.0
    firm2: float = 1.0
    hh_c: float = 1.0
    hh_mpc: float = 1.0
    price: float = 1.0


def _col(x):
    """Shape a per-state vector as (N, 1, 1) for grid broadcasting."""
    if ad.is_tensor(x):
        return ad.reshape(x, (-1, 1, 1))
    return np.asarray(x)[:, None, None]


class HetModel:
    def __init__(self, calib: HetCalib, n_k=40, n_theta=40, T=50,
                 hidden=(128, 128, 128), n_quad=5, seed=0, k_span=(0.1, 6.0),
                 theta_max=10.0, n_firm_samples=24, fix_wage=None,
                 firm_samples_all_nodes=False):
        self.calib = calib
        self.T = int(T)
        self.quad = gauss_hermite(n_quad)
        self.k_grid = log_grid(k_span[0], k_span[1], n_k)
        self.theta_grid = log_grid(calib.theta_floor, theta_max, n_theta)
        self.util = CrraUtility(calib.gamma)
        self.hh_chain = calib.household_chain()
        self.z_erg = MarkovChain(np.asarray(calib.z_levels), calib.pi_z_low()).stationary()
        self.n_firm_samples = int(n_firm_samples)
        self.fix_wage = fix_wage
        self.firm_samples_all_nodes = bool(firm_samples_all_nodes)

        d_in = 2 * self.T

        def spec_for(n_out, act, s):
            return nn.NetworkSpec((d_in,) + tuple(int(h) for h in hidden) + (n_out,),
                                  ("gelu",) * len(hidden) + (act,), seed=s)

        self.specs = {
            "k": spec_for(3 * n_k, "linear", seed),
            "lam": spec_for(3 * n_k, "linear", seed + 1),
            "c": spec_for(2 * n_theta, "linear", seed + 2),
            "p": spec_for(1, "softplus", seed + 3),
        }

    @property
    def n_k(self):
        return self.k_grid.n

    @property
    def n_theta(self):
        return self.theta_grid.n

    def init_params(self, head_bias=-2.0):
        """Fan-in init, with the output bias of the gridded heads pulled
        negative so initial increments are small and the initial policies
        stay at grid scale instead of exploding with the cumulative sums."""
        params = {name: nn.init_params(spec) for name, spec in self.specs.items()}
        for name in ("k", "lam", "c"):
            p = params[name]
            blen = self.specs[name].n_outputs
            p.values[-blen:] = head_bias
        return params

    # -- network heads ---------------------------------------------------------
    def firm_grids(self, flat_k, flat_lam, inputs):
        """Capital policy (monotone in k) and multiplier (positive,
        decreasing in k) over the (z, k) grid; leading batch axis."""
        m = np.shape(ad.value(inputs))[0]
        raw_k = ad.reshape(nn.forward_flat(flat_k, self.specs["k"], inputs),
                           (m, 3, self.n_k))
        raw_l = ad.reshape(nn.forward_flat(flat_lam, self.specs["lam"], inputs),
                           (m, 3, self.n_k))
        return monotone_values(raw_k), log_decreasing_values(raw_l)

    def price_of(self, flat_p, inputs):
        return ad.reshape(nn.forward_flat(flat_p, self.specs["p"], inputs), (-1,))

    def consumption_grids(self, flat_c, inputs, cah):
        m = np.shape(ad.value(inputs))[0]
        raw = ad.reshape(nn.forward_flat(flat_c, self.specs["c"], inputs),
                         (m, 2, self.n_theta))
        return mpc_values(raw, cah)

    # -- period quantities -------------------------------------------------------
    def wage(self, log_A, mu_f):
        if self.fix_wage is not None:
            return np.full(np.shape(np.asarray(ad.value(log_A))), self.fix_wage)
        c = self.calib
        A = ad.exp(log_A) if ad.is_tensor(log_A) else np.exp(log_A)
        return wage_from_distribution(A, mu_f, np.asarray(c.z_levels),
                                      self.k_grid.nodes, c.alpha, c.zeta)

    def firm_cells(self, log_A, wage, K_grid, adj):
        """Per-cell dividends d = output - wage bill - investment - adjustment."""
        c = self.calib
        A = _col(ad.exp(log_A) if ad.is_tensor(log_A) else np.exp(log_A))
        z = np.asarray(c.z_levels)[:, None]
        k = self.k_grid.nodes[None, :]
        w = _col(wage)
        _, _, _, dg = firm_factor_block(A, z, k, w, c.alpha, c.zeta, c.delta)
        invest = K_grid - (1.0 - c.delta) * k
        return dg - invest - adj.cost(K_grid, k), dg

    def aggregate_firms(self, log_A, mu_f, K_grid, price, adj):
        """(wage, aggregate dividends, average chosen capital, startup
        investment, startup rents)."""
        c = self.calib
        w = self.wage(log_A, mu_f)
        d, _ = self.firm_cells(log_A, w, K_grid, adj)
        tensorish = ad.is_tensor(d) or ad.is_tensor(mu_f)
        ssum = ad.tsum if tensorish else np.sum
        D = ssum(d * mu_f, axis=(-2, -1))
        kbar = ssum(K_grid * mu_f, axis=(-2, -1)) / c.survival
        i_su = (1.0 - c.survival) * kbar
        pi_su = (1.0 - c.survival) * price - i_su
        return w, D, kbar, i_su, pi_su

    def household_cah(self, wage, D, price, pi_su):
        """Cash-at-hand rows over (e, theta).

        Labor income and startup rents shift the level; increments along the
        grid carry only the share payout.  If depressed dividends push the
        payout or the bottom level nonpositive early in training, a level
        shift restores validity without touching the increments; the count
        of such states is a period diagnostic.
        """
        e = self.hh_chain.states[:, None]
        theta = self.theta_grid.nodes[None, :]
        payout = D + self.calib.survival * price
        pv = np.asarray(ad.value(payout))
        payout = ad.where(pv > 1e-6, payout, 1e-6) if ad.is_tensor(payout) \
            else np.maximum(pv, 1e-6)
        cah = _col(wage) * e + _col(payout) * theta + _col(pi_su)
        base = cah[..., :1]
        lift = ad.relu(1e-6 - base)
        flagged = int(np.count_nonzero(np.asarray(ad.value(base)) < 1e-6)) \
            + int(np.count_nonzero(pv <= 1e-6))
        return cah + lift, flagged

    # -- expectation nodes ---------------------------------------------------------
    def node_meta(self, state: HetStateBatch):
        """Per-node (weight, log_A', regime', pushed inputs).

        2 x n_quad nodes: next regime crossed with the TFP innovation, whose
        volatility is set by the current regime.  The raw standard-normal
        node value enters the history window, matching the simulation.
        """
        c = self.calib
        n = state.n
        sig = c.sigma_A(state.regime)
        trans = np.asarray(c.pi_u)[state.regime]
        out = []
        for regime_next in (0, 1):
            for q in range(self.quad.nodes.size):
                eps = self.quad.nodes[q]
                eps_rec = np.where(sig > 0, eps, 0.0)
                pushed = panel_push(state.windows, np.column_stack(
                    [eps_rec, np.full(n, float(regime_next))]))
                log_A_next = c.rho_A * state.log_A + sig * eps
                weight = trans[:, regime_next] * self.quad.weights[q]
                out.append((weight, log_A_next, regime_next, panel_flatten(pushed)))
        return out

    def mu_f_next(self, state: HetStateBatch, K_grid):
        """Firm histogram transition, differentiable in the gridded policy.

        Survivors move to their choices mixing through the current regime's
        z-chain (both regime transitions are evaluated and blended by
        indicator, keeping one batched graph); startups enter at the average
        chosen capital with the stationary z mix; exit is uniform.
        """
        c = self.calib
        nodes = self.k_grid.nodes
        mixed_L, _ = histogram_step(state.mu_f, K_grid, nodes, c.pi_z_low())
        mixed_H, _ = histogram_step(state.mu_f, K_grid, nodes, c.pi_z_high())
        ind_H = (state.regime == 1).astype(np.float64)[:, None, None]
        moved = (1.0 - ind_H) * mixed_L + ind_H * mixed_H

        tensorish = ad.is_tensor(K_grid)
        ssum = ad.tsum if tensorish else np.sum
        kbar = ssum(K_grid * state.mu_f, axis=(-2, -1)) / c.survival
        idx, w_hi, _, _ = lottery_weights(kbar, nodes)
        vals = ad.stack([(1.0 - w_hi) * (1.0 - c.survival),
                         w_hi * (1.0 - c.survival)], axis=-1)
        startup_row = ad.scatter_add(vals, np.stack([idx, idx + 1], axis=-1), nodes.size)
        startup = ad.stack([self.z_erg[i] * startup_row for i in range(3)], axis=-2)
        return c.survival * (moved + startup)

    # -- stochastic discount factor --------------------------------------------------
    def sdf_aggregate(self, cons_now, cons_next_grid, theta_next, mu_h):
        """Holdings-weighted average of beta E_e'[u'(c')] / u'(c) at one
        aggregate node; each household's c' is read off the gridded
        next-period consumption at its own savings point."""
        c = self.calib
        P = self.hh_chain.transition
        n_t = self.n_theta
        flat_q = ad.reshape(theta_next, (-1, 2 * n_t))
        mu_next = None
        for e_next in range(2):
            interp = ad.interp_linear(flat_q, self.theta_grid.nodes,
                                      cons_next_grid[:, e_next, :])
            c_next = ad.reshape(interp, (-1, 2, n_t))
            cv = np.asarray(ad.value(c_next))
            c_next = ad.where(cv > 1e-12, c_next, 1e-12)
            mu_c = ad.power(c_next, -c.gamma)
            w_e = P[:, e_next][None, :, None]
            mu_next = w_e * mu_c if mu_next is None else mu_next + w_e * mu_c
        ratio = c.beta * mu_next * ad.power(cons_now, c.gamma)
        weights = theta_next * mu_h
        denom = ad.tsum(weights, axis=(-2, -1))
        dv = np.asarray(ad.value(denom))
        denom = ad.where(dv > 1e-9, denom, 1.0)
        return ad.tsum(ratio * weights, axis=(-2, -1)) / denom

    # -- firm residual sampling --------------------------------------------------------
    def sample_idio(self, seed, date, all_nodes=False):
        """(z index, capital) sample points for the firm residuals.

        Default: productivity from the stationary mix, capital half on-grid,
        half uniform over the span, redrawn per episode.  With ``all_nodes``
        every (z, node) cell enters every episode plus a random uniform
        batch, which removes sampling noise from the training signal
        (useful for the partial-equilibrium component runs).
        """
        nodes = self.k_grid.nodes
        if all_nodes:
            iz_grid = np.repeat(np.arange(3), nodes.size)
            k_grid_pts = np.tile(nodes, 3)
            S = max(self.n_firm_samples, 8)
            u_z = uniform_draws(seed, date, "firm_z", S)
            iz_off = np.minimum(np.searchsorted(np.cumsum(self.z_erg), u_z,
                                                side="right"), 2)
            u_off = uniform_draws(seed, date, "firm_k_off", S)
            k_off = nodes[0] + (nodes[-1] - nodes[0]) * u_off
            return (np.concatenate([iz_grid, iz_off]),
                    np.concatenate([k_grid_pts, k_off]))
        S = self.n_firm_samples
        u_z = uniform_draws(seed, date, "firm_z", S)
        iz = np.searchsorted(np.cumsum(self.z_erg), u_z, side="right")
        iz = np.minimum(iz, 2)
        half = S // 2
        u_idx = uniform_draws(seed, date, "firm_k_grid", half)
        k_on = nodes[np.minimum((u_idx * nodes.size).astype(int), nodes.size - 1)]
        u_off = uniform_draws(seed, date, "firm_k_off", S - half)
        k_off = nodes[0] + (nodes[-1] - nodes[0]) * u_off
        return iz, np.concatenate([k_on, k_off])

    def eval_policy_rows(self, grid_vals, iz, kq):
        """Interpolate gridded (N, 3, n_k) values at S sample points with
        per-sample z rows; returns (N, S), grouped by z for efficiency."""
        n = np.shape(ad.value(grid_vals))[0]
        cols = [None] * iz.size
        for z in range(3):
            mask = np.nonzero(iz == z)[0]
            if mask.size == 0:
                continue
            xq = np.broadcast_to(kq[mask], (n, mask.size))
            got = ad.interp_linear(xq, self.k_grid.nodes, grid_vals[:, z, :])
            for j, s in enumerate(mask):
                cols[s] = got[:, j]
        return ad.stack(cols, axis=1)

    def firm_residuals(self, period, iz, kq, adj, sdf_blend):
        """Relative multiplier gap (err1) and complementarity residual (err2)
        at the sampled idiosyncratic points, (N, S) each."""
        c = self.calib
        k_pred = self.eval_policy_rows(period["K_grid"], iz, kq)
        lam_pred = self.eval_policy_rows(period["Lam_grid"], iz, kq)
        A_now = np.exp(period["log_A"])
        w_now = period["wage"]
        w_colv = np.asarray(ad.value(w_now))[:, None]
        z_s = np.asarray(c.z_levels)[iz]
        _, _, _, dg = firm_factor_block(A_now[:, None], z_s[None, :], kq[None, :],
                                        w_colv, c.alpha, c.zeta, c.delta)
        d_now = dg - (k_pred - (1.0 - c.delta) * kq[None, :]) \
            - adj.cost(k_pred, kq[None, :])
        psi1 = adj.dcost_dknext(k_pred, kq[None, :])

        pi_z = np.stack([c.pi_z_low(), c.pi_z_high()])[period["regime"]]
        expected = None
        for node in period["nodes"]:
            if sdf_blend >= 1.0:
                lam_disc = c.beta
            else:
                lam_disc = sdf_blend * c.beta + (1.0 - sdf_blend) * node["sdf"]
                lam_disc = ad.reshape(lam_disc, (-1, 1))
            w_next = node["wage"]
            w_next_col = ad.reshape(w_next, (-1, 1)) if ad.is_tensor(w_next) \
                else np.asarray(w_next)[:, None]
            inner = None
            for z_next in range(3):
                _, _, mpk, _ = firm_factor_block(
                    np.exp(node["log_A"])[:, None], c.z_levels[z_next], k_pred,
                    w_next_col, c.alpha, c.zeta, c.delta)
                k_after = ad.interp_linear(k_pred, self.k_grid.nodes,
                                           node["K_grid"][:, z_next, :])
                lam_after = ad.interp_linear(k_pred, self.k_grid.nodes,
                                             node["Lam_grid"][:, z_next, :])
                factor = 1.0 + mpk - adj.dcost_dk(k_after, k_pred)
                term = (1.0 + lam_after) * factor
                prob = pi_z[:, iz, z_next]
                inner = prob * term if inner is None else inner + prob * term
            contrib = node["weight"][:, None] * lam_disc * inner
            expected = contrib if expected is None else expected + contrib

        # deep capital cuts can push the marginal cost 1 + psi1 through zero
        # (the downward penalty falls faster than one-for-one); that region
        # is dominated at an optimum, so residuals there are replaced by a
        # push back toward positive marginal cost
        psi1_v = np.asarray(ad.value(psi1))
        ok = psi1_v > -0.95
        denom = ad.where(ok, 1.0 + psi1, 1.0)
        lam_implied = c.survival * expected / denom - 1.0
        err1 = (lam_pred - lam_implied) / (1.0 + lam_implied)
        err2 = fischer_burmeister((d_now - c.d_floor) / kq[None, :], lam_implied)
        escape = 1.0 - (1.0 + psi1)
        err1 = ad.where(ok, err1, escape)
        err2 = ad.where(ok, err2, escape)
        return err1, err2

    # -- the period graph ------------------------------------------------------------
    def period_graph(self, flats, state: HetStateBatch, adj, tau, sdf_blend,
                     need_nodes=True):
        """Everything the losses and the simulation need at t and at the
        t+1 integration nodes, on the tape when ``flats`` hold Tensors."""
        c = self.calib
        inputs = state.inputs()
        K_grid, Lam_grid = self.firm_grids(flats["k"], flats["lam"], inputs)
        p_now = self.price_of(flats["p"], inputs)
        w_now, D_now, kbar, i_su, pi_su = self.aggregate_firms(
            state.log_A, state.mu_f, K_grid, p_now, adj)
        cah_now, cah_flagged = self.household_cah(w_now, D_now, p_now, pi_su)
        cons_now, mpc_now = self.consumption_grids(flats["c"], inputs, cah_now)
        p_col = _col(p_now)
        theta_next = (cah_now - cons_now) / p_col

        period = {"K_grid": K_grid, "Lam_grid": Lam_grid, "price": p_now,
                  "wage": w_now, "D": D_now, "kbar": kbar, "i_su": i_su,
                  "pi_su": pi_su, "cah": cah_now, "cons": cons_now,
                  "mpc": mpc_now, "theta_next": theta_next,
                  "log_A": state.log_A, "regime": state.regime,
                  "cah_flagged": cah_flagged, "nodes": []}
        if not need_nodes:
            return period

        mu_f_nxt = self.mu_f_next(state, K_grid)
        period["mu_f_next"] = mu_f_nxt
        need_sdf = sdf_blend < 1.0
        for weight, log_A_next, regime_next, inputs_next in self.node_meta(state):
            Kn, Ln = self.firm_grids(flats["k"], flats["lam"], inputs_next)
            pn = self.price_of(flats["p"], inputs_next)
            wn, Dn, _, _, pin = self.aggregate_firms(log_A_next, mu_f_nxt, Kn, pn, adj)
            cahn, fl = self.household_cah(wn, Dn, pn, pin)
            consn, _ = self.consumption_grids(flats["c"], inputs_next, cahn)
            node = {"weight": weight, "log_A": log_A_next, "regime": regime_next,
                    "K_grid": Kn, "Lam_grid": Ln, "price": pn, "wage": wn,
                    "D": Dn, "cons": consn,
                    "payout_hh": Dn + c.survival * (1.0 - tau) * pn}
            period["cah_flagged"] += fl
            if need_sdf:
                node["sdf"] = self.sdf_aggregate(cons_now, consn, theta_next,
                                                 state.mu_h)
            period["nodes"].append(node)
        return period

    # -- household targets -----------------------------------------------------------
    def household_targets(self, period, state: HetStateBatch, n_newton,
                          ed_tol=1e-8):
        """EGM consumption targets and the market-clearing equity price.

        For a candidate price, invert the household Euler equation on the
        asset grid (next-asset nodes coincide with the exogenous grid, so
        next-period consumption needs no interpolation), then Newton-step
        the price on excess share demand; states whose final residual stays
        above ``ed_tol`` fall back to a bisection bracket.
        """
        c = self.calib
        u = self.util
        P = self.hh_chain.transition
        theta = self.theta_grid.nodes
        n = state.n

        rhs = np.zeros((n, 2, self.n_theta))
        for node in period["nodes"]:
            payout = np.maximum(np.asarray(ad.value(node["payout_hh"])), 1e-9)
            consn = np.maximum(np.asarray(ad.value(node["cons"])), 1e-12)
            mu_e = np.einsum("ef,nfj->nej", P, consn ** -c.gamma)
            rhs += np.asarray(node["weight"])[:, None, None] * mu_e \
                * payout[:, None, None]

        w_now = np.asarray(ad.value(period["wage"]))
        D_now = np.asarray(ad.value(period["D"]))
        i_su = np.asarray(ad.value(period["i_su"]))
        e_states = self.hh_chain.states

        def ed_fn(p):
            pi_su = (1.0 - c.survival) * p - i_su
            incomes = e_states[None, :, None] * w_now[:, None, None] + _col(pi_su)
            payout_now = D_now + c.survival * p
            cons = egm_step(u, c.beta, rhs, theta, incomes, _col(p), _col(payout_now))
            cah = incomes + _col(payout_now) * theta
            th_next = (cah - cons) / _col(p)
            demand = ad.tsum(th_next * state.mu_h, axis=(-2, -1)) if ad.is_tensor(p) \
                else np.sum(th_next * state.mu_h, axis=(-2, -1))
            return demand - 1.0

        p0 = np.maximum(np.asarray(ad.value(period["price"])), 1e-6)
        res = newton_clear(p0, ed_fn, n_newton)
        price = np.where(np.isfinite(res.price) & (res.price > 0), res.price, p0)
        ed = np.asarray(ed_fn(price))
        bad = (np.abs(ed) > ed_tol) | ~np.isfinite(ed)
        n_bisect = int(np.count_nonzero(bad))
        if n_bisect:
            lo = np.where(bad, np.minimum(p0, price) * 0.02, price)
            hi = np.where(bad, np.maximum(p0, price) * 50.0, price)
            for _ in range(90):
                mid = 0.5 * (lo + hi)
                val = ed_fn(mid)
                lo = np.where(bad & (val > 0.0), mid, lo)
                hi = np.where(bad & (val <= 0.0), mid, hi)
            price = np.where(bad, 0.5 * (lo + hi), price)
            ed = ed_fn(price)

        pi_su = (1.0 - c.survival) * price - i_su
        incomes = e_states[None, :, None] * w_now[:, None, None] + pi_su[:, None, None]
        payout_now = (D_now + c.survival * price)[:, None, None]
        cons = egm_step(u, c.beta, rhs, theta, incomes, price[:, None, None], payout_now)
        cah = incomes + payout_now * theta
        theta_next = (cah - cons) / price[:, None, None]
        # degenerate early-training states can tie consecutive target values
        # at float precision; keep target slopes usable for relative errors
        slopes = np.maximum(np.diff(cons, axis=-1), 1e-12) / np.diff(cah, axis=-1)
        mpc = np.concatenate([cons[:, :, :1], slopes], axis=-1)
        ed = np.asarray(ed)
        valid = np.isfinite(ed) & (np.abs(ed) <= 100.0 * ed_tol) \
            & np.all(np.isfinite(cons), axis=(1, 2)) & (price > 1e-6)
        return HetTargets(price, cons, mpc, theta_next, ed,
                          res.skipped_steps, n_bisect, valid)

    # -- composite loss -----------------------------------------------------------------
    def loss(self, flats, state: HetStateBatch, targets, weights: LossWeights,
             adj, tau, sdf_blend, iz, kq):
        """Weighted sum of firm residual losses and supervised household,
        MPC, and price losses against frozen targets."""
        period = self.period_graph(flats, state, adj, tau, sdf_blend,
                                   need_nodes=bool(weights.firm1 or weights.firm2))
        total = 0.0
        if weights.firm1 or weights.firm2:
            err1, err2 = self.firm_residuals(period, iz, kq, adj, sdf_blend)
            total = total + weights.firm1 * ad.tmean(err1 * err1) \
                + weights.firm2 * ad.tmean(err2 * err2)
        if targets is not None:
            # supervised terms: relative gaps with floored denominators (a
            # degenerate target must not hijack the batch), averaged over
            # states whose clearing search converged
            valid = targets.valid
            share = max(float(valid.mean()), 1e-12)
            vmask3 = valid[:, None, None]
            if weights.hh_c:
                den = np.maximum(targets.consumption, 1e-3)
                rel = ad.where(np.broadcast_to(vmask3, den.shape),
                               period["cons"] / den - 1.0, 0.0)
                total = total + weights.hh_c * ad.tmean(rel * rel) / share
            if weights.hh_mpc:
                den = np.maximum(targets.mpc, 1e-3)
                rel = ad.where(np.broadcast_to(vmask3, den.shape),
                               period["mpc"] / den - 1.0, 0.0)
                total = total + weights.hh_mpc * ad.tmean(rel * rel) / share
            if weights.price:
                den = np.maximum(targets.price, 1e-3)
                rel = ad.where(valid, period["price"] / den - 1.0, 0.0)
                total = total + weights.price * ad.tmean(rel * rel) / share
        return total, period

    # -- simulation ------------------------------------------------------------------
    def init_state(self, n, seed):
        c = self.calib
        nodes = self.k_grid.nodes
        mu_f = np.zeros((n, 3, self.n_k))
        k0 = nodes[0] + 0.35 * (nodes[-1] - nodes[0])
        idx, w_hi, _, _ = lottery_weights(np.full(n, k0), nodes)
        for i in range(3):
            mu_f[np.arange(n), i, idx] = self.z_erg[i] * c.survival * (1 - w_hi)
            mu_f[np.arange(n), i, idx + 1] = self.z_erg[i] * c.survival * w_hi
        mu_h = np.zeros((n, 2, self.n_theta))
        pi_h = self.hh_chain.stationary()
        idx_t, w_t, _, _ = lottery_weights(np.full(n, 1.0), self.theta_grid.nodes)
        for e in range(2):
            mu_h[np.arange(n), e, idx_t] = pi_h[e] * (1 - w_t)
            mu_h[np.arange(n), e, idx_t + 1] = pi_h[e] * w_t
        return HetStateBatch(np.zeros(n, dtype=int), np.zeros(n), mu_f, mu_h,
                             np.zeros((n, 2, self.T)))

    def simulate_step(self, state: HetStateBatch, targets: HetTargets, period,
                      date, seed):
        """Advance the cross-section with the market-clearing household
        policies and the gridded firm policies, then draw fresh shocks."""
        c = self.calib
        n = state.n
        mu_f = np.asarray(ad.value(period["mu_f_next"]))
        mixed, _ = histogram_step(state.mu_h, targets.theta_next,
                                  self.theta_grid.nodes, self.hh_chain.transition)
        mu_h = np.asarray(ad.value(mixed))

        u_reg = uniform_draws(seed, date, "regime", n)
        cum = np.cumsum(np.asarray(c.pi_u)[state.regime], axis=1)
        regime_next = (u_reg[:, None] >= cum).sum(axis=1)
        eps = normal_draws(seed, date, "eps_A", n)
        sig = c.sigma_A(state.regime)
        log_A_next = c.rho_A * state.log_A + sig * eps
        eps_rec = np.where(sig > 0, eps, 0.0)
        windows = panel_push(state.windows, np.column_stack(
            [eps_rec, regime_next.astype(np.float64)]))
        return HetStateBatch(regime_next, log_A_next, mu_f, mu_h, windows)

    # -- diagnostics -------------------------------------------------------------------
    def walras_gap(self, state: HetStateBatch, period, targets: HetTargets, adj):
        """Goods-market residual per state: C + I + adjustment + startup
        investment - Y, using market-clearing household policies; equals
        -price * excess_demand up to float error."""
        c = self.calib
        K_v = np.asarray(ad.value(period["K_grid"]))
        d, dg = self.firm_cells(state.log_A, np.asarray(ad.value(period["wage"])),
                                K_v, adj)
        k = self.k_grid.nodes[None, None, :]
        invest = np.sum((K_v - (1.0 - c.delta) * k) * state.mu_f, axis=(-2, -1))
        adj_cost = np.sum(adj.cost(K_v, k) * state.mu_f, axis=(-2, -1))
        A = np.exp(state.log_A)[:, None, None]
        z = np.asarray(c.z_levels)[:, None]
        _, y, _, _ = firm_factor_block(A, z, self.k_grid.nodes[None, :],
                                       np.asarray(ad.value(period["wage"]))[:, None, None],
                                       c.alpha, c.zeta, c.delta)
        output = np.sum(y * state.mu_f, axis=(-2, -1))
        cons = np.sum(targets.consumption * state.mu_h, axis=(-2, -1))
        i_su = np.asarray(ad.value(period["i_su"]))
        return cons + invest + adj_cost + i_su - output


# ---------------------------------------------------------------------------
# training schedule
# ---------------------------------------------------------------------------

@dataclass
class StepSettings:
    episodes: int
    weights: LossWeights
    tau: float = 0.0
    sdf_blend: float = 1.0      # 1 = pure patience discounting
    xi_up: float = None
    xi_down: float = None
    ramp: bool = False          # step 4: ramp xi / tau / sdf over episodes
    supervised_pretrain: bool = False


def default_schedule(e1=60, e2=40, e3=60, e4=120, e5=400):
    """Five steps: firm side only at low adjustment costs; supervised price
    and household pre-training on a short-lived asset; joint training; ramp
    of adjustment costs, asset duration, and the discount factor; polish."""
    return [
        StepSettings(e1, LossWeights(1, 1, 0, 0, 0), tau=1.0, sdf_blend=1.0,
                     xi_up=0.1, xi_down=0.25),
        StepSettings(e2, LossWeights(0, 0, 1, 1, 1), tau=1.0, sdf_blend=1.0,
                     xi_up=0.1, xi_down=0.25, supervised_pretrain=True),
        StepSettings(e3, LossWeights(1, 1, 1, 1, 1), tau=1.0, sdf_blend=1.0,
                     xi_up=0.1, xi_down=0.25),
        StepSettings(e4, LossWeights(1, 1, 1, 1, 1), tau=1.0, sdf_blend=1.0,
                     xi_up=0.1, xi_down=0.25, ramp=True),
        StepSettings(e5, LossWeights(1, 1, 1, 1, 1), tau=0.0, sdf_blend=0.0),
    ]


@dataclass
class HetTrainResult:
    params: dict
    opts: dict
    loss_curve: list
    sim_state: HetStateBatch
    diagnostics: dict
    diverged: bool = False


def pretrain_targets(model: HetModel, state: HetStateBatch, period) -> HetTargets:
    """Step-2 supervision: price equals current dividends (short-lived
    asset), household savings follow the simple contraction rules
    max(0, 0.7 theta - 0.1) in the low state and 0.7 theta + 0.6 in the
    high state, converted to consumption through the budget."""
    D = np.asarray(ad.value(period["D"]))
    price = np.maximum(D, 1e-6)
    w = np.asarray(ad.value(period["wage"]))
    i_su = np.asarray(ad.value(period["i_su"]))
    c = model.calib
    pi_su = (1.0 - c.survival) * price - i_su
    theta = model.theta_grid.nodes[None, None, :]
    e = model.hh_chain.states[None, :, None]
    payout = (D + c.survival * price)[:, None, None]
    cah = e * w[:, None, None] + payout * theta + pi_su[:, None, None]
    rule_low = np.maximum(0.0, 0.7 * theta - 0.1)
    rule_high = 0.7 * theta + 0.6
    theta_next = np.concatenate([
        np.broadcast_to(rule_low, (state.n, 1, model.n_theta)),
        np.broadcast_to(rule_high, (state.n, 1, model.n_theta))], axis=1)
    cons = np.maximum(cah - price[:, None, None] * theta_next, 1e-3)
    slopes = np.maximum(np.diff(cons, axis=-1), 1e-9) / np.diff(cah, axis=-1)
    mpc = np.concatenate([cons[:, :, :1], slopes], axis=-1)
    return HetTargets(price, cons, mpc, theta_next, np.zeros(state.n), 0, 0)


def five_step_schedule(model: HetModel, n_data, n_minibatch, schedule=None,
                       learning_rate=1e-3, seed=0, params=None,
                       newton_initial=10, newton_late=3, price_err_switch=0.01,
                       guard_window=500, guard_factor=10.0, callback=None):
    """Run the five training steps; every episode refreshes the simulated
    cross-section, recomputes supervision targets, and applies minibatch
    Adam updates to all four networks."""
    if schedule is None:
        schedule = default_schedule()
    if params is None:
        params = model.init_params()
    opts = {name: nn.adam_init(p, learning_rate) for name, p in params.items()}
    sim = model.init_state(n_data, seed)
    curve = []
    diagnostics = {"newton_skipped": 0, "bisections": 0, "cah_flagged": 0,
                   "max_ed": 0.0}
    date = 0
    n_newton = newton_initial
    rolling_min = np.inf
    over = 0
    diverged = False

    # burn-in with untrained nets so every window is populated
    flats0 = {k: p.values for k, p in params.items()}
    adj0 = model.calib.adj(schedule[0].xi_up, schedule[0].xi_down)
    for _ in range(model.T):
        period = model.period_graph(flats0, sim, adj0, schedule[0].tau, 1.0)
        targets = model.household_targets(period, sim, n_newton)
        sim = model.simulate_step(sim, targets, period, date, seed)
        date += 1

    n_batches = max(1, n_data // n_minibatch)
    for step_idx, step in enumerate(schedule):
        for ep in range(step.episodes):
            frac = ep / max(step.episodes - 1, 1)
            if step.ramp:
                xi_up = step.xi_up + frac * (model.calib.xi_up - step.xi_up)
                xi_down = step.xi_down + frac * (model.calib.xi_down - step.xi_down)
                tau = (1.0 - frac) ** 2
                sdf_blend = 1.0 - frac
            else:
                xi_up = step.xi_up
                xi_down = step.xi_down
                tau = step.tau
                sdf_blend = step.sdf_blend
            adj = model.calib.adj(xi_up, xi_down)

            flats_np = {k: p.values for k, p in params.items()}
            period = model.period_graph(flats_np, sim, adj, tau, sdf_blend)
            if step.supervised_pretrain:
                targets = pretrain_targets(model, sim, period)
            else:
                targets = model.household_targets(period, sim, n_newton)
            diagnostics["newton_skipped"] += targets.newton_skipped
            diagnostics["bisections"] += targets.bisection_states
            diagnostics["cah_flagged"] += period["cah_flagged"]
            diagnostics["max_ed"] = max(diagnostics["max_ed"],
                                        float(np.max(np.abs(targets.excess_demand))))

            iz, kq = model.sample_idio(seed, date,
                                       all_nodes=model.firm_samples_all_nodes)
            ep_loss = 0.0
            for b in range(n_batches):
                rows = slice(b * n_minibatch, (b + 1) * n_minibatch)
                batch = sim.rows(rows)
                btargets = targets.rows(rows)
                leaves = {k: ad.Tensor(p.values) for k, p in params.items()}
                loss, _ = model.loss(leaves, batch, btargets, step.weights, adj,
                                     tau, sdf_blend, iz, kq)
                loss.backward()
                for name in NET_NAMES:
                    g = leaves[name].grad
                    if g is None:
                        continue
                    opts[name], params[name] = nn.adam_step(opts[name], params[name], g)
                ep_loss += float(ad.value(loss))
            ep_loss /= n_batches
            curve.append((date, step_idx + 1, ep_loss))
            if callback is not None:
                callback(step_idx + 1, date, ep_loss)

            rel_perr = float(np.mean(np.abs(
                np.asarray(ad.value(period["price"])) / targets.price - 1.0)))
            if rel_perr < price_err_switch:
                n_newton = newton_late
            rolling_min = min(rolling_min, ep_loss)
            over = over + 1 if ep_loss > guard_factor * rolling_min else 0
            if over >= guard_window:
                diverged = True
                break

            sim = model.simulate_step(sim, targets, period, date, seed)
            date += 1
        if diverged:
            break
    return HetTrainResult(params, opts, curve, sim, diagnostics, diverged)


def error_report(model: HetModel, params, states: HetStateBatch, seed=0,
                 n_newton=10):
    """Firm, household, and price error statistics on given states."""
    flats = {k: p.values for k, p in params.items()}
    adj = model.calib.adj()
    period = model.period_graph(flats, states, adj, tau=0.0, sdf_blend=0.0)
    targets = model.household_targets(period, states, n_newton)
    iz, kq = model.sample_idio(seed, 999_983)
    err1, err2 = model.firm_residuals(period, iz, kq, adj, sdf_blend=0.0)

    def stats(x):
        x = np.abs(np.asarray(ad.value(x)).ravel())
        return {"mean": float(x.mean()), "p90": float(np.percentile(x, 90)),
                "p99": float(np.percentile(x, 99)),
                "p99.9": float(np.percentile(x, 99.9))}

    cons_rel = np.asarray(ad.value(period["cons"])) / targets.consumption - 1.0
    price_rel = np.asarray(ad.value(period["price"])) / targets.price - 1.0
    return {
        "firm_euler": stats(err1),
        "firm_kkt": stats(err2),
        "household_consumption": stats(cons_rel),
        "price": stats(price_rel),
        "max_excess_demand": float(np.max(np.abs(targets.excess_demand))),
        "walras": stats(model.walras_gap(states, period, targets, adj)),
    }
