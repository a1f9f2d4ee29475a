"""Shape-preserving output heads for operator networks.

An operator network predicts an entire policy function over an idiosyncratic
grid from the aggregate input.  These heads transform raw network outputs so
the resulting gridded policy is monotone, concave, or MPC-bounded by
construction, for any parameter values: positivity comes from softplus,
monotonicity from cumulative sums of positive increments, concavity from
exponentials of cumulated negative terms.

The ``*_values`` functions are the differentiable cores (they accept plain
arrays or autodiff Tensors, with an arbitrary batch dimension in front); the
``*_head`` wrappers realize the GriddedPolicy contract for numpy inputs.

The guarantees are exact in real arithmetic.  In float64 the running sums can
tie two neighboring values when an increment falls below one ulp of the base
(raw outputs beyond roughly +-15), which is a representation limit rather
than a failure of the construction; raw outputs of actual networks stay O(1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class Grid1D:
    """Strictly increasing interpolation nodes plus the spacing rule tag."""

    nodes: np.ndarray
    spacing: str = "uniform"

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=np.float64))
        if self.nodes.ndim != 1 or self.nodes.size < 2:
            raise ValueError("grid needs at least two nodes")
        if not np.all(np.isfinite(self.nodes)):
            raise ValueError("grid nodes must be finite")
        if not np.all(np.diff(self.nodes) > 0.0):
            raise ValueError("grid nodes must be strictly increasing")

    @property
    def n(self):
        return self.nodes.size


def uniform_grid(lo, hi, n):
    return Grid1D(np.linspace(lo, hi, n), "uniform")


def log_grid(lo, hi, n):
    """Geometric spacing; a lower bound at (or below) zero is handled by an
    additive shift of one percent of the span, so nodes still concentrate
    near ``lo``."""
    if lo > 0:
        nodes = np.geomspace(lo, hi, n)
    else:
        shift = (hi - lo) / 100.0
        nodes = lo + np.geomspace(shift, hi - lo + shift, n) - shift
    nodes[0] = lo
    nodes[-1] = hi
    return Grid1D(nodes, "log")


def loglog_grid(lo, hi, n, curvature=3.0):
    """Double-exponential warp of equally spaced indices.

    With t in [0,1] and c = curvature, the warp is
    w(t) = g(g(t)) where g(t) = (exp(c t) - 1) / (exp(c) - 1),
    which piles nodes up near the lower bound much harder than a single log
    transform; nodes = lo + (hi - lo) * w(t).
    """
    t = np.linspace(0.0, 1.0, n)

    def g(x):
        return np.expm1(curvature * x) / np.expm1(curvature)

    nodes = lo + (hi - lo) * g(g(t))
    nodes[0] = lo
    nodes[-1] = hi
    return Grid1D(nodes, "log-log")


@dataclass
class GriddedPolicy:
    """Policy values over (idiosyncratic state x grid node), linear between."""

    values: np.ndarray
    grid: Grid1D
    idio_labels: tuple = ()

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError("values must be (n_idio, n_grid)")
        if self.values.shape[1] != self.grid.n:
            raise ValueError("values width must match the grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite policy values")

    @property
    def n_idio(self):
        return self.values.shape[0]


def eval_piecewise_linear(policy: GriddedPolicy, idio_index: int, x):
    """Evaluate one idiosyncratic row at ``x`` (scalar or vector).

    Linear between nodes; outside the hull the boundary segment is continued
    linearly, which preserves monotone rows.
    """
    xq = np.atleast_1d(np.asarray(x, dtype=np.float64))
    out = ad.interp_linear(xq, policy.grid.nodes, policy.values[idio_index])
    return float(out[0]) if np.ndim(x) == 0 else out


# ---------------------------------------------------------------------------
# differentiable cores
# ---------------------------------------------------------------------------

def monotone_values(raw):
    """Strictly increasing rows: softplus base, cumulated softplus increments."""
    base = ad.softplus(raw[..., :1])
    incs = ad.softplus(raw[..., 1:])
    return ad.concat([base, base + ad.cumsum(incs, axis=-1)], axis=-1)


def concave_values(raw, nodes):
    """Increasing and concave rows on ``nodes``.

    Column 0 is the (positive) base level; remaining columns are forced
    negative and drive log-decrements of the slope:
    dc_j = dnode_j * exp(sum_{k<=j} ddc_k), values are the running sum.
    """
    nodes = np.asarray(ad.value(nodes), dtype=np.float64)
    if np.shape(ad.value(raw))[-1] != nodes.size:
        raise ValueError("raw width must equal the grid length")
    base = ad.softplus(raw[..., :1])
    ddc = -ad.softplus(raw[..., 1:])
    dnode = np.diff(nodes)
    dc = dnode * ad.exp(ad.cumsum(ddc, axis=-1))
    return ad.concat([base, base + ad.cumsum(dc, axis=-1)], axis=-1)


def mpc_values(raw, cah):
    """Consumption and MPC rows over strictly increasing cash-at-hand rows.

    Column 0 maps through a sigmoid to the consumption share at the first
    node, so c_0 = share * cah_0 respects the budget; later columns force
    the marginal propensity to consume into (0, share], nonincreasing:
    mpc_j = share * exp(sum dmpc), c_j = c_0 + sum mpc_k dcah_k.

    Returns (consumption values, mpc matrix), where the mpc matrix keeps the
    level c_0 in its first column and mpc_1.. in the rest.
    """
    cahv = np.asarray(ad.value(cah), dtype=np.float64)
    if np.any(np.diff(cahv, axis=-1) <= 0.0):
        raise ValueError("cash-at-hand rows must be strictly increasing")
    if np.shape(ad.value(raw))[-1] != cahv.shape[-1]:
        raise ValueError("raw width must equal the cash-at-hand width")
    share = ad.sigmoid(raw[..., :1])
    c0 = share * cah[..., :1] if ad.is_tensor(cah) else share * cahv[..., :1]
    dmpc = -ad.softplus(raw[..., 1:])
    mpc = share * ad.exp(ad.cumsum(dmpc, axis=-1))
    dcah = cah[..., 1:] - cah[..., :-1] if ad.is_tensor(cah) else np.diff(cahv, axis=-1)
    cons = ad.concat([c0, c0 + ad.cumsum(mpc * dcah, axis=-1)], axis=-1)
    mpc_mat = ad.concat([c0, mpc], axis=-1)
    return cons, mpc_mat


def log_decreasing_values(raw):
    """Positive, strictly decreasing rows (multiplier policies).

    Column 0 is an unconstrained log level; the rest are forced negative and
    cumulated inside the exponential, so every row is positive and falls
    monotonically along the grid.
    """
    log0 = raw[..., :1]
    dec = -ad.softplus(raw[..., 1:])
    return ad.exp(ad.concat([log0, log0 + ad.cumsum(dec, axis=-1)], axis=-1))


# ---------------------------------------------------------------------------
# GriddedPolicy wrappers
# ---------------------------------------------------------------------------

def monotone_head(raw, grid: Grid1D, idio_labels=()) -> GriddedPolicy:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] < 2:
        raise ValueError("need at least two columns (base + one increment)")
    return GriddedPolicy(monotone_values(raw), grid, idio_labels)


def concave_head(raw, grid: Grid1D, idio_labels=()) -> GriddedPolicy:
    raw = np.asarray(raw, dtype=np.float64)
    return GriddedPolicy(concave_values(raw, grid.nodes), grid, idio_labels)


def mpc_head(raw, cah_grid, grid: Grid1D, idio_labels=()):
    """Returns (consumption GriddedPolicy, mpc GriddedPolicy); see
    ``mpc_values`` for the mpc matrix layout."""
    raw = np.asarray(raw, dtype=np.float64)
    cons, mpc = mpc_values(raw, np.asarray(cah_grid, dtype=np.float64))
    return (GriddedPolicy(cons, grid, idio_labels), GriddedPolicy(mpc, grid, idio_labels))


def lambda_head(raw, grid: Grid1D, idio_labels=()) -> GriddedPolicy:
    raw = np.asarray(raw, dtype=np.float64)
    return GriddedPolicy(log_decreasing_values(raw), grid, idio_labels)
