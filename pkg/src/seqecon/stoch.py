"""Exogenous shock processes, discretizations, quadrature, and lag windows.

Shock histories are the network inputs: fixed-length windows of the last T
innovations/regime flags per trajectory, ordered oldest to newest.  Their
distribution is a model primitive, so it stays stationary during training
regardless of how wrong the current policy is.

Randomness is counter-based (Philox) keyed by (seed, date, shock label) with
one slot per trajectory, so simulated panels do not depend on scheduling or
batch order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Ar1Spec:
    """AR(1) in logs: log x' = rho log x + sigma eps, eps ~ N(0,1).

    sigma = 0 is allowed so deterministic test economies can reuse the same
    machinery.
    """

    rho: float
    sigma: float

    def __post_init__(self):
        if not abs(self.rho) < 1.0:
            raise ValueError("|rho| must be < 1")
        if self.sigma < 0.0:
            raise ValueError("sigma must be nonnegative")

    def unconditional_std(self):
        return self.sigma / np.sqrt(1.0 - self.rho ** 2)


def ar1_step(spec: Ar1Spec, log_level, innovation):
    return spec.rho * log_level + spec.sigma * innovation


@dataclass(frozen=True)
class MarkovChain:
    """Discrete chain: state values and a row-stochastic transition matrix."""

    states: np.ndarray
    transition: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "states", np.asarray(self.states, dtype=np.float64))
        object.__setattr__(self, "transition", np.asarray(self.transition, dtype=np.float64))
        P = self.transition
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] != self.states.size:
            raise ValueError("transition must be square and match the state count")
        if np.any(P < 0.0):
            raise ValueError("negative transition probabilities")
        if np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("transition rows must sum to 1 within 1e-12")

    @property
    def n(self):
        return self.states.size

    def stationary(self):
        """Stationary distribution via the linear system (I - P' + U) pi = 1/n."""
        n = self.n
        A = np.eye(n) - self.transition.T + np.ones((n, n)) / n
        pi = np.linalg.solve(A, np.full(n, 1.0 / n))
        pi = np.clip(pi, 0.0, None)
        return pi / pi.sum()


def regime_step(chain: MarkovChain, current: int, uniform_draw: float) -> int:
    """Inverse-CDF sampling over row ``current``, cumulative in index order."""
    row = chain.transition[current]
    cum = np.cumsum(row)
    return int(np.searchsorted(cum, uniform_draw, side="right"))


@dataclass(frozen=True)
class QuadratureRule:
    """Expectation rule for N(0,1): E[f(Z)] ~ sum w_i f(x_i), weights sum 1."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=np.float64))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        if np.any(self.weights <= 0.0):
            raise ValueError("quadrature weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 within 1e-12")


def gauss_hermite(n: int) -> QuadratureRule:
    """Probabilists' Gauss-Hermite rule: exact for polynomials to degree 2n-1.

    Nodes are in standard-normal units and the weights are normalized to sum
    to one, so residual formulas can consume E[.] under N(0,1) directly.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    nodes, weights = np.polynomial.hermite_e.hermegauss(n)
    return QuadratureRule(nodes, weights / np.sqrt(2.0 * np.pi))


def rouwenhorst(n_states: int, spec: Ar1Spec, normalize_mean_level=False) -> MarkovChain:
    """Discretize an AR(1) in logs on ``n_states`` points.

    Log states are symmetric around zero with the process's unconditional
    standard deviation; returned states are levels (exp of logs).  With
    ``normalize_mean_level`` the levels are divided by their equal-weight
    cross-sectional mean.
    """
    if n_states < 2:
        raise ValueError("need at least 2 states")
    p = (1.0 + spec.rho) / 2.0
    P = np.array([[p, 1.0 - p], [1.0 - p, p]])
    for m in range(3, n_states + 1):
        tl = np.zeros((m, m))
        tr = np.zeros((m, m))
        bl = np.zeros((m, m))
        br = np.zeros((m, m))
        tl[:m - 1, :m - 1] = p * P
        tr[:m - 1, 1:] = (1.0 - p) * P
        bl[1:, :m - 1] = (1.0 - p) * P
        br[1:, 1:] = p * P
        P = tl + tr + bl + br
        P[1:-1, :] /= 2.0
    psi = spec.unconditional_std() * np.sqrt(n_states - 1.0)
    log_states = np.linspace(-psi, psi, n_states)
    levels = np.exp(log_states)
    if normalize_mean_level:
        levels = levels / levels.mean()
    return MarkovChain(levels, P)


# ---------------------------------------------------------------------------
# shock history windows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShockHistory:
    """Per-shock lag windows for one trajectory, oldest first.

    ``windows`` is (n_labels, T); flattening for the network input
    concatenates windows in declared label order.
    """

    labels: tuple
    windows: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "windows", np.asarray(self.windows, dtype=np.float64))
        if self.windows.ndim != 2 or self.windows.shape[0] != len(self.labels):
            raise ValueError("windows must be (n_labels, T)")

    @property
    def length(self):
        return self.windows.shape[1]

    def flatten(self):
        return self.windows.reshape(-1)


def history_init(labels, T) -> ShockHistory:
    return ShockHistory(tuple(labels), np.zeros((len(labels), T)))


def history_push(h: ShockHistory, new_values: dict) -> ShockHistory:
    """Drop the oldest entry of each window and append the new value."""
    if set(new_values) != set(h.labels):
        raise ValueError(f"push labels {sorted(new_values)} != history labels {sorted(h.labels)}")
    shifted = np.empty_like(h.windows)
    shifted[:, :-1] = h.windows[:, 1:]
    for i, lab in enumerate(h.labels):
        shifted[i, -1] = new_values[lab]
    return ShockHistory(h.labels, shifted)


def panel_push(windows, new_values):
    """Batched push: ``windows`` (N, L, T), ``new_values`` (N, L)."""
    out = np.empty_like(windows)
    out[:, :, :-1] = windows[:, :, 1:]
    out[:, :, -1] = new_values
    return out


def panel_flatten(windows):
    """(N, L, T) -> (N, L*T), label blocks in declared order."""
    return windows.reshape(windows.shape[0], -1)


# ---------------------------------------------------------------------------
# disaster depreciation
# ---------------------------------------------------------------------------

def disaster_depreciation(delta_bar, log_D_prev, regime, innovation, spec: Ar1Spec, mu_delta):
    """Regime-switching depreciation of capital.

    Normal regime (0): log D' = rho_delta log D.  Disaster (1): log D' =
    mu_delta + rho_delta log D + sigma_delta innovation.  Realized
    depreciation is delta_bar * 2 / (1 + exp(log D')), strictly decreasing
    in D', equal to delta_bar at D' = 1.
    """
    if not 0.0 < delta_bar < 1.0:
        raise ValueError("delta_bar must lie in (0,1)")
    log_D = np.where(
        np.asarray(regime) == 1,
        mu_delta + spec.rho * log_D_prev + spec.sigma * innovation,
        spec.rho * log_D_prev,
    )
    delta = delta_bar * 2.0 / (1.0 + np.exp(log_D))
    if np.ndim(delta) == 0:
        return float(delta), float(log_D)
    return delta, log_D


# ---------------------------------------------------------------------------
# keyed randomness
# ---------------------------------------------------------------------------

def _label_key(label: str) -> int:
    # stable 64-bit FNV-1a, independent of PYTHONHASHSEED
    h = 1469598103934665603
    for ch in label.encode("utf-8"):
        h = ((h ^ ch) * 1099511628211) & 0xFFFFFFFFFFFFFFFF
    return h


def shock_rng(seed: int, date: int, label: str) -> np.random.Generator:
    """Counter-based generator for one (seed, date, label) cell.

    Draw a vector of length n_trajectories from it; element i belongs to
    trajectory i, which keys every draw by (seed, trajectory, date, label)
    without any dependence on evaluation order.
    """
    key = (int(seed) & 0xFFFFFFFFFFFFFFFF, (int(date) * 0x9E3779B97F4A7C15 ^ _label_key(label)) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def normal_draws(seed, date, label, n):
    return shock_rng(seed, date, label).standard_normal(n)


def uniform_draws(seed, date, label, n):
    return shock_rng(seed, date, label).uniform(0.0, 1.0, n)


def export_shock_panel(path, windows, labels):
    """Debug CSV of a history panel: trajectory, date, label, value.

    ``date`` is the window position (0 oldest), not a calendar date.
    """
    n, L, T = windows.shape
    with open(path, "w") as f:
        f.write("trajectory,date,label,value\n")
        for i in range(n):
            for j, lab in enumerate(labels):
                for t in range(T):
                    f.write(f"{i},{t},{lab},{float(windows[i, j, t])!r}\n")
