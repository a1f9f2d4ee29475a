"""Model-independent economic primitives.

Utility and its inverse marginal, complementarity residuals, capital
adjustment costs, the static firm factor block, wages from a firm
distribution, Young-style histogram transitions, the endogenous-grid
consumption step, and Newton-Raphson market clearing.  Everything here is a
pure function; the pieces that enter training losses accept autodiff Tensors
so gradients flow through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .heads import Grid1D, GriddedPolicy
from .stoch import MarkovChain


class EgmError(ValueError):
    """Endogenous grid came out non-monotone (bad upstream marginal values)."""


# ---------------------------------------------------------------------------
# preferences
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CrraUtility:
    """Constant relative risk aversion, u(c) = c^(1-gamma)/(1-gamma).

    gamma = 1 is handled as log utility; marginal utility and its inverse are
    exact power functions either way.
    """

    gamma: float

    def __post_init__(self):
        if self.gamma <= 0.0:
            raise ValueError("gamma must be positive")

    def u(self, c):
        self._check(c)
        if self.gamma == 1.0:
            return ad.log(c)
        return ad.power(c, 1.0 - self.gamma) / (1.0 - self.gamma)

    def u_prime(self, c):
        self._check(c)
        return ad.power(c, -self.gamma)

    def u_prime_inv(self, m):
        self._check(m)
        return ad.power(m, -1.0 / self.gamma)

    @staticmethod
    def _check(x):
        if not isinstance(x, ad.Tensor) and np.any(np.asarray(x) <= 0.0):
            raise ValueError("argument must be strictly positive")


def fischer_burmeister(a, b):
    """psi(a, b) = a + b - sqrt(a^2 + b^2).

    Zero exactly on the complementarity set {a >= 0, b >= 0, a b = 0}; used
    to collapse a first-order condition and its slackness condition into one
    residual equation.
    """
    return a + b - ad.sqrt(a * a + b * b)


# ---------------------------------------------------------------------------
# adjustment costs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdjCostQuadratic:
    """psi(k', k) = xi (k' - k)^2, the liquid-vs-illiquid friction."""

    xi_adj: float

    def __post_init__(self):
        if self.xi_adj < 0.0:
            raise ValueError("xi_adj must be nonnegative")

    def cost(self, k_next, k):
        d = k_next - k
        return self.xi_adj * d * d

    def dcost_dknext(self, k_next, k):
        return 2.0 * self.xi_adj * (k_next - k)

    def dcost_dk(self, k_next, k):
        return -2.0 * self.xi_adj * (k_next - k)


@dataclass(frozen=True)
class AdjCostAsymSmooth:
    """Asymmetric cost psi(k', k) = xi(k',k)/2 * k * (k'/k - 1)^2.

    The cost parameter blends smoothly between the up and down values,
    xi = w xi_up + (1-w) xi_down with w = sigmoid(s (k'-k)/k), so the cost is
    differentiable through k' = k where it vanishes to second order.
    Derivative formulas are analytic (they keep the blend's k'-dependence),
    composed from primitives so they stay on the autodiff tape.
    """

    xi_up: float
    xi_down: float
    s: float

    def __post_init__(self):
        if not (self.xi_up > 0.0 and self.xi_down > 0.0 and self.s > 0.0):
            raise ValueError("xi_up, xi_down, s must be positive")
        if not self.xi_down > self.xi_up:
            raise ValueError("downward adjustment must be costlier than upward")

    def _blend(self, g):
        w = ad.sigmoid(self.s * g)
        return w, w * self.xi_up + (1.0 - w) * self.xi_down

    def cost(self, k_next, k):
        self._check_k(k)
        g = k_next / k - 1.0
        _, xi = self._blend(g)
        return 0.5 * xi * k * g * g

    def dcost_dknext(self, k_next, k):
        self._check_k(k)
        g = k_next / k - 1.0
        w, xi = self._blend(g)
        dxi = (self.xi_up - self.xi_down) * w * (1.0 - w) * self.s / k
        return dxi * 0.5 * k * g * g + xi * g

    def dcost_dk(self, k_next, k):
        self._check_k(k)
        g = k_next / k - 1.0
        w, xi = self._blend(g)
        dg_dk = -k_next / (k * k)
        dxi = (self.xi_up - self.xi_down) * w * (1.0 - w) * self.s * dg_dk
        return dxi * 0.5 * k * g * g + xi * (0.5 * g * g + k * g * dg_dk)

    def all(self, k_next, k):
        return (self.cost(k_next, k), self.dcost_dknext(k_next, k), self.dcost_dk(k_next, k))

    @staticmethod
    def _check_k(k):
        if not isinstance(k, ad.Tensor) and np.any(np.asarray(k) <= 0.0):
            raise ValueError("current capital must be positive")


# ---------------------------------------------------------------------------
# production side
# ---------------------------------------------------------------------------

def firm_factor_block(A, z, k, wage, alpha, zeta, delta):
    """Static factor choices of a decreasing-returns firm at a given wage.

    Labor from the static first-order condition, then output, the net
    marginal product of installed capital, and the operating surplus
    (output minus the wage bill) before investment and adjustment costs:

        l = (A z (1-alpha-zeta)/w)^(1/(alpha+zeta)) k^(alpha/(alpha+zeta))
        y = A z k^alpha l^(1-alpha-zeta)
        mpk = alpha A z k^(alpha-1) l^(1-alpha-zeta) - delta
    """
    if alpha + zeta >= 1.0 or alpha <= 0.0 or zeta <= 0.0:
        raise ValueError("need alpha, zeta > 0 with alpha + zeta < 1")
    if not isinstance(wage, ad.Tensor) and np.any(np.asarray(wage) <= 0.0):
        raise ValueError("wage must be positive")
    labor_share = 1.0 - alpha - zeta
    ex = 1.0 / (alpha + zeta)
    labor = ad.power(A * z * labor_share / wage, ex) * ad.power(k, alpha * ex)
    output = A * z * ad.power(k, alpha) * ad.power(labor, labor_share)
    mpk = alpha * A * z * ad.power(k, alpha - 1.0) * ad.power(labor, labor_share) - delta
    dividend_gross = output - wage * labor
    return labor, output, mpk, dividend_gross


def wage_from_distribution(A, masses, z_levels, k_nodes, alpha, zeta):
    """Wage that clears the labor market at unit aggregate supply.

    w = A (1-alpha-zeta) ( sum masses (z k^alpha)^(1/(alpha+zeta)) )^(alpha+zeta)

    ``masses`` is (..., n_z, n_k) over (z_levels x k_nodes); aggregate labor
    demand at the returned wage is exactly one by construction.
    """
    masses_v = np.asarray(ad.value(masses))
    if masses_v.sum() <= 0.0:
        raise ValueError("empty firm distribution")
    ex = 1.0 / (alpha + zeta)
    coef = np.power(np.outer(z_levels, np.power(k_nodes, alpha)), ex)
    agg = ad.tsum(masses * coef, axis=(-2, -1)) if isinstance(masses, ad.Tensor) else np.sum(
        masses * coef, axis=(-2, -1))
    return A * (1.0 - alpha - zeta) * ad.power(agg, alpha + zeta)


# ---------------------------------------------------------------------------
# cross-sectional histograms
# ---------------------------------------------------------------------------

@dataclass
class HistogramDist:
    """Probability masses over (idiosyncratic state x grid node)."""

    masses: np.ndarray
    grid: Grid1D
    total_mass: float = 1.0

    def __post_init__(self):
        self.masses = np.asarray(self.masses, dtype=np.float64)
        if self.masses.ndim != 2 or self.masses.shape[1] != self.grid.n:
            raise ValueError("masses must be (n_idio, n_grid) over the grid")
        if np.any(self.masses < 0.0):
            raise ValueError("negative masses")
        if abs(self.masses.sum() - self.total_mass) > 1e-12:
            raise ValueError(
                f"total mass {self.masses.sum()!r} != configured {self.total_mass!r}")

    @property
    def n_idio(self):
        return self.masses.shape[0]


def lottery_weights(dest, nodes):
    """Bracketing node index and upper lottery weight for each destination.

    Destinations outside the grid hull are clamped to the boundary node with
    full weight; the returned ``clamped`` mass counters expose how much.
    """
    destv = np.asarray(ad.value(dest), dtype=np.float64)
    n = nodes.size
    idx = np.clip(np.searchsorted(nodes, destv, side="right") - 1, 0, n - 2)
    lo = nodes[idx]
    hi = nodes[idx + 1]
    w_hi = (dest - lo) / (hi - lo)
    if isinstance(w_hi, ad.Tensor):
        w_clip = ad.where(destv <= nodes[0], 0.0 * w_hi, w_hi)
        w_clip = ad.where(destv >= nodes[-1], 0.0 * w_hi + 1.0, w_clip)
    else:
        w_clip = np.clip(w_hi, 0.0, 1.0)
    below = destv < nodes[0]
    above = destv > nodes[-1]
    return idx, w_clip, below, above


def histogram_step(masses, dest, nodes, transition):
    """One Young-style transition: lottery deposit then idiosyncratic mixing.

    ``masses``/``dest`` are (..., n_idio, n_grid): each cell's mass moves to
    the two grid nodes bracketing its destination value, then states mix
    through the chain's transition matrix.  Autodiff-ready in ``dest`` and
    ``masses``; total mass is conserved exactly up to float rounding.
    """
    n = nodes.size
    idx, w_hi, below, above = lottery_weights(dest, nodes)
    deposited = ad.scatter_add(masses * (1.0 - w_hi), idx, n)
    deposited = deposited + ad.scatter_add(masses * w_hi, idx + 1, n)
    n_idio = transition.shape[0]
    rows = []
    for j in range(n_idio):
        acc = None
        for i in range(n_idio):
            term = transition[i, j] * deposited[..., i, :]
            acc = term if acc is None else acc + term
        rows.append(acc)
    mixed = ad.stack(rows, axis=-2)
    clamped_mass = float(np.sum(np.asarray(ad.value(masses))[below])
                         + np.sum(np.asarray(ad.value(masses))[above]))
    return mixed, clamped_mass


def histogram_transition(h: HistogramDist, policy: GriddedPolicy, idio_chain: MarkovChain):
    """Advance a histogram by a gridded policy; returns (dist, clamped mass)."""
    if policy.grid.n != h.grid.n or np.any(policy.grid.nodes != h.grid.nodes):
        raise ValueError("policy grid must equal the histogram grid")
    if idio_chain.n != h.n_idio:
        raise ValueError("chain size must match the idiosyncratic dimension")
    mixed, clamped = histogram_step(h.masses, policy.values, h.grid.nodes,
                                    idio_chain.transition)
    return HistogramDist(mixed, h.grid, h.total_mass), clamped


# ---------------------------------------------------------------------------
# endogenous grid step
# ---------------------------------------------------------------------------

def egm_step(u: CrraUtility, beta, rhs_marginal_value, asset_grid, incomes, price,
             payout):
    """One endogenous-gridpoint update of the consumption function.

    ``rhs_marginal_value`` holds E[u'(c') R'] per (idio state, next-asset
    node).  Inverting the Euler equation at each next-asset node gives
    consumption and the endogenous cash-at-hand it implies,

        c_end = u'^{ -1}(beta rhs / price),   cah_end = price a' + c_end,

    which is re-interpolated onto the exogenous cash-at-hand grid
    ``incomes + payout * asset_grid``.  Below the first endogenous node the
    borrowing constraint binds and c = cah - price * a_min.

    Returns the consumption matrix on the exogenous grid (same shape as
    ``rhs_marginal_value``); Tensor inputs keep everything differentiable.
    """
    grid = np.asarray(asset_grid, dtype=np.float64)
    rhs_v = np.asarray(ad.value(rhs_marginal_value))
    if not isinstance(rhs_marginal_value, ad.Tensor) and np.any(rhs_v <= 0.0):
        raise ValueError("rhs marginal values must be positive")
    c_end = u.u_prime_inv(beta * rhs_marginal_value / price)
    cah_end = price * grid + c_end
    cah_end_v = np.asarray(ad.value(cah_end))
    if np.any(np.diff(cah_end_v, axis=-1) <= 0.0):
        bad = np.argwhere(np.diff(cah_end_v, axis=-1) <= 0.0)[0]
        raise EgmError(f"endogenous cash-at-hand grid non-monotone at {tuple(bad)}")
    if isinstance(incomes, ad.Tensor) or isinstance(payout, ad.Tensor):
        cah_exog = incomes + payout * grid
    else:
        cah_exog = np.asarray(incomes) + np.asarray(payout) * grid
    cons = ad.interp_linear(cah_exog, cah_end, c_end)
    constrained = np.asarray(ad.value(cah_exog)) < cah_end_v[..., :1]
    c_bind = cah_exog - price * grid[0]
    return ad.where(constrained, c_bind, cons)


# ---------------------------------------------------------------------------
# market clearing
# ---------------------------------------------------------------------------

@dataclass
class NewtonResult:
    price: np.ndarray
    excess_demand: np.ndarray
    skipped_steps: int


def newton_clear(price_guess, excess_demand_fn, n_steps) -> NewtonResult:
    """Fixed-step-count Newton-Raphson on an excess demand function.

    ``excess_demand_fn`` maps a Tensor of prices (any shape, elementwise
    independent markets) to the Tensor of excess demands; the derivative
    comes from the reverse-mode tape.  Elements whose derivative falls below
    1e-12 in magnitude skip their update and are counted in the result.
    """
    if n_steps < 1:
        raise ValueError("need at least one Newton step")
    p = np.atleast_1d(np.asarray(price_guess, dtype=np.float64)).copy()
    skipped = 0
    edv = None
    for _ in range(n_steps):
        leaf = ad.Tensor(p)
        ed = excess_demand_fn(leaf)
        ed.sum().backward()
        deriv = leaf.grad
        edv = np.asarray(ad.value(ed))
        ok = np.abs(deriv) >= 1e-12
        skipped += int(np.size(ok) - np.count_nonzero(ok))
        step = np.where(ok, edv / np.where(ok, deriv, 1.0), 0.0)
        p = p - step
    final = np.asarray(ad.value(excess_demand_fn(ad.Tensor(p))))
    return NewtonResult(price=p, excess_demand=final, skipped_steps=skipped)
