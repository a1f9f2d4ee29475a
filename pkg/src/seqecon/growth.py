"""Stochastic growth model solved with a shock-history policy network.

The network maps the last T productivity innovations to a savings rate in
(0,1) (sigmoid output), so the budget constraint and positive consumption
hold by construction.  Training minimizes the squared relative Euler
equation error over freshly simulated state-history pairs; expectations use
Gauss-Hermite quadrature, with the quadrature innovation appended to the
history for the next-period policy evaluation.

The trainer keeps the state-space variables (K, log A) alongside every
history because resources, marginal products, and consumption are functions
of the state even though the network never sees it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .stoch import Ar1Spec, QuadratureRule, ShockHistory, gauss_hermite, \
    normal_draws, panel_flatten, panel_push, uniform_draws
from .kernel import CrraUtility
from .oracles import growth_steady_state_capital


@dataclass(frozen=True)
class GrowthCalib:
    gamma: float
    delta: float
    beta: float
    alpha: float
    rho_A: float
    sigma_A: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0,1)")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0,1)")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must lie in (0,1]")
        if self.gamma <= 0.0:
            raise ValueError("gamma must be positive")
        if not abs(self.rho_A) < 1.0:
            raise ValueError("|rho_A| must be < 1")
        if self.sigma_A < 0.0:
            raise ValueError("sigma_A must be nonnegative")

    def ar1(self):
        return Ar1Spec(self.rho_A, self.sigma_A)


@dataclass
class GrowthStatePair:
    """One training datum: the state vector and its shock-history window."""

    K: float
    log_A: float
    history: ShockHistory

    def __post_init__(self):
        if self.K <= 0.0:
            raise ValueError("capital must be positive")
        if self.history.labels != ("eps_A",):
            raise ValueError("growth history carries a single eps_A window")


@dataclass
class GrowthDataset:
    """Batch arrays: capital, log TFP, and (N, 1, T) innovation windows."""

    K: np.ndarray
    log_A: np.ndarray
    windows: np.ndarray

    @property
    def n(self):
        return self.K.size

    def inputs(self):
        return panel_flatten(self.windows)


class GrowthModel:
    """Calibration plus architecture plus quadrature, with batched residuals."""

    def __init__(self, calib: GrowthCalib, T=100, hidden=(128, 128, 128), n_quad=8,
                 seed=0):
        self.calib = calib
        self.T = int(T)
        self.quad = gauss_hermite(n_quad)
        widths = (self.T,) + tuple(int(h) for h in hidden) + (1,)
        acts = ("gelu",) * len(hidden) + ("sigmoid",)
        self.spec = nn.NetworkSpec(widths, acts, seed=seed)
        self.k_star = growth_steady_state_capital(calib)

    def init_params(self):
        return nn.init_params(self.spec)

    # -- policy --------------------------------------------------------------
    def savings_rate(self, flat, inputs):
        """Savings rate in (0,1); ``flat`` may be a Tensor for training."""
        out = nn.forward_flat(flat, self.spec, inputs)
        return ad.reshape(out, (-1,))

    def savings_policy(self, params: nn.NetworkParams, history: ShockHistory):
        """Spec-level single-trajectory policy evaluation."""
        s = self.savings_rate(params.values, history.flatten()[None, :])
        return float(ad.value(s)[0])

    # -- residuals -----------------------------------------------------------
    def euler_residuals(self, flat, data: GrowthDataset):
        """Relative Euler errors for every pair in the dataset.

        Returns (residuals, n_flagged) where flagged rows had nonpositive
        consumption somewhere and carry the 1 + |C| penalty instead of the
        Euler expression (cannot occur with the sigmoid head, but custom
        heads go through the same code).
        """
        c = self.calib
        u = CrraUtility(c.gamma)
        n = data.n
        A = np.exp(data.log_A)
        K = data.K
        Q = self.quad.nodes.size

        # one forward pass for the current histories and all pushed node
        # histories: rows [current; node 1; ...; node Q]
        base = data.windows
        blocks = [panel_flatten(base)]
        log_A_next = np.empty((Q, n))
        for q in range(Q):
            pushed = panel_push(base, np.full((n, 1), self.quad.nodes[q]))
            blocks.append(panel_flatten(pushed))
            log_A_next[q] = c.rho_A * data.log_A + c.sigma_A * self.quad.nodes[q]
        X = np.concatenate(blocks, axis=0)
        s_all = self.savings_rate(flat, X)

        s_now = s_all[:n]
        resources = A * K ** c.alpha + (1.0 - c.delta) * K
        consumption = (1.0 - s_now) * resources
        k_next = s_now * resources
        cons_v = np.asarray(ad.value(consumption))
        ok = cons_v > 0.0

        expected = None
        for q in range(Q):
            s_next = s_all[(q + 1) * n:(q + 2) * n]
            A_next = np.exp(log_A_next[q])
            m_next = A_next * ad.power(k_next, c.alpha) + (1.0 - c.delta) * k_next
            c_next = (1.0 - s_next) * m_next
            ok = ok & (np.asarray(ad.value(c_next)) > 0.0)
            c_safe = ad.where(np.asarray(ad.value(c_next)) > 0.0, c_next, 1.0)
            r_next = c.alpha * A_next * ad.power(k_next, c.alpha - 1.0)
            term = ad.power(c_safe, -c.gamma) * (1.0 - c.delta + r_next)
            contrib = self.quad.weights[q] * term
            expected = contrib if expected is None else expected + contrib

        cons_safe = ad.where(cons_v > 0.0, consumption, 1.0)
        resid_euler = ad.power(c.beta * expected, -1.0 / c.gamma) / cons_safe - 1.0
        penalty = 1.0 - consumption  # = 1 + |C| where consumption <= 0
        resid = ad.where(ok, resid_euler, penalty)
        return resid, int(np.count_nonzero(~ok))

    def euler_residual(self, params: nn.NetworkParams, pair: GrowthStatePair):
        data = GrowthDataset(np.array([pair.K]), np.array([pair.log_A]),
                             pair.history.windows[None, :, :])
        resid, _ = self.euler_residuals(params.values, data)
        return float(ad.value(resid)[0])

    def loss(self, flat, data: GrowthDataset):
        """Mean squared relative Euler error over the dataset."""
        if data.n == 0:
            raise ValueError("empty dataset")
        resid, flagged = self.euler_residuals(flat, data)
        return ad.tmean(resid * resid), flagged

    # -- simulation ----------------------------------------------------------
    def init_dataset(self, n, seed):
        """Steady-state capital with +-20 percent jitter, zero TFP, empty
        histories; call ``burn_in`` before training on it."""
        jitter = uniform_draws(seed, 0, "init_K", n)
        K = self.k_star * (0.8 + 0.4 * jitter)
        return GrowthDataset(K, np.zeros(n), np.zeros((n, 1, self.T)))

    def simulate_step(self, params: nn.NetworkParams, data: GrowthDataset, date, seed):
        """Advance every pair one period with freshly keyed innovations."""
        c = self.calib
        s = np.asarray(ad.value(self.savings_rate(params.values, data.inputs())))
        A = np.exp(data.log_A)
        resources = A * data.K ** c.alpha + (1.0 - c.delta) * data.K
        k_next = s * resources
        eps = normal_draws(seed, date, "eps_A", data.n)
        log_A_next = c.rho_A * data.log_A + c.sigma_A * eps
        windows = panel_push(data.windows, eps[:, None])
        return GrowthDataset(k_next, log_A_next, windows)

    def burn_in(self, params, data, seed):
        """T periods so every history window is fully populated."""
        for t in range(self.T):
            data = self.simulate_step(params, data, t, seed)
        return data


def simulate_episode(model: GrowthModel, params, data: GrowthDataset, episode, seed):
    """One-period refresh of the training dataset (dates offset past burn-in)."""
    return model.simulate_step(params, data, model.T + episode, seed)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: nn.NetworkParams
    state: nn.AdamState
    loss_curve: list          # (episode, loss)
    data: GrowthDataset
    flagged: int = 0


def train_growth(model: GrowthModel, n_data, n_minibatch, n_episodes, learning_rate,
                 seed=0, lr_decay=1.0, lr_min=0.0, params=None, state=None,
                 callback=None):
    """Episode loop: simulate fresh pairs, then minibatch Adam steps.

    Fresh data every episode means no point is reused and the input
    distribution stays pinned to the exogenous shock process.  Minibatches
    are consumed in fixed index order so a given seed is bit-reproducible.
    """
    if params is None:
        params = model.init_params()
    if state is None:
        state = nn.adam_init(params, learning_rate)
    data = model.burn_in(params, model.init_dataset(n_data, seed), seed)
    n_batches = max(1, n_data // n_minibatch)
    curve = []
    flagged_total = 0
    lr = learning_rate
    for episode in range(n_episodes):
        data = simulate_episode(model, params, data, episode, seed)
        ep_loss = 0.0
        for b in range(n_batches):
            rows = slice(b * n_minibatch, (b + 1) * n_minibatch)
            batch = GrowthDataset(data.K[rows], data.log_A[rows], data.windows[rows])
            leaf = ad.Tensor(params.values)
            loss, flagged = model.loss(leaf, batch)
            flagged_total += flagged
            loss.backward()
            state, params = nn.adam_step(state, params, leaf.grad)
            ep_loss += float(ad.value(loss))
        lr = max(lr * lr_decay, lr_min)
        state.learning_rate = lr
        curve.append((episode, ep_loss / n_batches))
        if callback is not None:
            callback(episode, curve[-1][1], params)
    return TrainResult(params, state, curve, data, flagged_total)


# ---------------------------------------------------------------------------
# truncation-error diagnostic
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    rows: list          # (T, gap, analytic_bound or nan)
    fitted_rate: float


def truncation_sweep(calib: GrowthCalib, T_values, policy_fn, horizon=1500,
                     burn=300, seed=0, mode="innovations", k_ref=1.0):
    """Gap between the true capital path and its window reconstruction.

    Along one long simulated path, capital at each date is re-derived from
    only the last T shocks by restarting the recursion at (log A, K) =
    (0, k_ref); the reported gap is max_t |log K_hat_t - log K_t|.  In
    ``levels`` mode the window stores TFP levels, so only the capital
    truncation remains and the analytic alpha^T bound is exact for the
    closed-form variant; with innovations the TFP reconstruction error decays
    at rho, so the fitted rate approaches max(rho, alpha-ish policy
    elasticity).

    ``policy_fn(A, K) -> K'`` can be a closed form or a grid oracle.
    """
    T_values = [int(t) for t in T_values]
    t_max = max(T_values)
    total = burn + horizon + t_max
    eps = normal_draws(seed, 0, "sweep_eps", total)
    log_A = np.empty(total)
    K = np.empty(total)
    log_A[0] = 0.0
    K[0] = growth_steady_state_capital(calib)
    for t in range(1, total):
        log_A[t] = calib.rho_A * log_A[t - 1] + calib.sigma_A * eps[t]
        K[t] = policy_fn(np.exp(log_A[t - 1]), K[t - 1])

    targets = np.arange(burn + t_max, total)
    rows = []
    for T in T_values:
        # K_t is determined by (A_{t-1}, K_{t-1}), so the window of T shocks
        # feeding its reconstruction ends at date t-1
        la_hat = np.zeros(targets.size)
        k_hat = np.full(targets.size, float(k_ref))
        for j in range(T):
            dates = targets - T + j
            if mode == "levels":
                la_hat = log_A[dates]
            else:
                la_hat = calib.rho_A * la_hat + calib.sigma_A * eps[dates]
            k_hat = policy_fn(np.exp(la_hat), k_hat)
        gap = np.max(np.abs(np.log(k_hat) - np.log(K[targets])))
        if mode == "levels":
            bound = calib.alpha ** T * np.max(np.abs(np.log(K[targets - T])))
        else:
            bound = np.nan
        rows.append((T, float(gap), float(bound)))

    gaps = np.array([r[1] for r in rows])
    Ts = np.array(T_values, dtype=np.float64)
    keep = gaps > 1e-13
    slope = np.polyfit(Ts[keep], np.log(gaps[keep]), 1)[0]
    return SweepResult(rows, float(np.exp(slope)))


def closed_form_policy(calib: GrowthCalib):
    """K' = alpha beta A K^alpha, exact for full depreciation and log utility."""
    if not (calib.delta == 1.0 and calib.gamma == 1.0):
        raise ValueError("closed form requires delta = 1 and log utility")
    return lambda A, K: calib.alpha * calib.beta * A * np.asarray(K) ** calib.alpha
