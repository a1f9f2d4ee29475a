"""Dense feed-forward networks with hand-rolled training machinery.

Parameters live in a single flat float vector (the object the optimizer
updates); layer shapes are metadata.  ``forward`` runs in plain numpy, or on
the autodiff tape when handed a parameter Tensor, which is how every loss in
this package obtains its gradient.

Checkpoint byte layout (documented here, enforced by the loader):

    bytes 0..7    magic ``b"SEQNET01"``
    bytes 8..11   uint32 little-endian header length ``L``
    bytes 12..12+L JSON header: {"format": 1, "spec": {layer_widths,
                  activations, seed}, "n_params": n, "dtype": "float64",
                  "adam": null | {learning_rate, beta1, beta2, epsilon,
                  step_count}}
    then          n little-endian float64 parameter values,
                  followed (if adam is not null) by n floats of Adam ``m``
                  and n floats of Adam ``v``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad

MAGIC = b"SEQNET01"

_ACTIVATIONS = {
    "gelu": ad.gelu,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "linear": lambda x: x,
}


class DimensionError(ValueError):
    """Input width does not match the network spec."""


class NonFiniteError(FloatingPointError):
    """A forward/backward pass produced non-finite values."""

    def __init__(self, msg, layer=None):
        super().__init__(msg)
        self.layer = layer


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description: widths per layer and activation tags.

    ``layer_widths`` includes input and output, so a 100-input, 3x128 hidden,
    1-output net is [100, 128, 128, 128, 1].  ``activations`` has one entry
    per weight layer.
    """

    layer_widths: tuple
    activations: tuple
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.layer_widths) < 3:
            raise ValueError("need at least one hidden layer")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")
        if len(self.activations) != len(self.layer_widths) - 1:
            raise ValueError("one activation per weight layer required")
        for a in self.activations:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def n_inputs(self):
        return self.layer_widths[0]

    @property
    def n_outputs(self):
        return self.layer_widths[-1]

    def layer_shapes(self):
        """(rows, cols, bias_len) per weight layer, rows = fan-in."""
        w = self.layer_widths
        return [(w[i], w[i + 1], w[i + 1]) for i in range(len(w) - 1)]

    def n_params(self):
        return sum(r * c + b for r, c, b in self.layer_shapes())


@dataclass
class NetworkParams:
    """Flat trainable vector plus the shape metadata needed to unflatten."""

    values: np.ndarray
    shapes: list

    def __post_init__(self):
        self.values = np.asarray(self.values)
        expected = sum(r * c + b for r, c, b in self.shapes)
        if self.values.size != expected:
            raise ValueError(f"flat vector has {self.values.size} entries, shapes imply {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite parameter values")

    def copy(self):
        return NetworkParams(self.values.copy(), list(self.shapes))


def init_params(spec: NetworkSpec, seed=None, dtype=np.float64) -> NetworkParams:
    """Fan-in-scaled normal weights (std 1/sqrt(fan_in)), zero biases.

    Keeps pre-activations O(1) for standardized inputs like N(0,1) shock
    histories.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    chunks = []
    for rows, cols, blen in spec.layer_shapes():
        w = rng.standard_normal((rows, cols)) / np.sqrt(rows)
        chunks.append(w.ravel())
        chunks.append(np.zeros(blen))
    return NetworkParams(np.concatenate(chunks).astype(dtype), spec.layer_shapes())


def _layer_views(params, shapes):
    """Yield (W, b) per layer from the flat vector (Tensor or ndarray)."""
    flat = params
    offset = 0
    for rows, cols, blen in shapes:
        w = ad.reshape(flat[offset:offset + rows * cols], (rows, cols))
        offset += rows * cols
        b = flat[offset:offset + blen]
        offset += blen
        yield w, b


def forward(params: NetworkParams, spec: NetworkSpec, x, check_finite=False):
    """Evaluate the network on ``x`` of shape (d,) or (batch, d).

    Pass ``params.values`` wrapped in an ``autodiff.Tensor`` (via
    ``forward_flat``) to trace gradients; with plain arrays this is pure
    numpy and bit-deterministic for identical inputs.
    """
    return forward_flat(params.values, spec, x, check_finite=check_finite)


def forward_flat(flat, spec: NetworkSpec, x, check_finite=False):
    xv = ad.value(x)
    single = np.ndim(xv) == 1
    if np.shape(xv)[-1] != spec.n_inputs:
        raise DimensionError(
            f"input width {np.shape(xv)[-1]} != spec input width {spec.n_inputs}")
    h = ad.reshape(x, (1, -1)) if single else x
    for layer, (w, b) in enumerate(_layer_views(flat, spec.layer_shapes())):
        h = ad.matmul(h, w) + b
        h = _ACTIVATIONS[spec.activations[layer]](h)
        if check_finite and not np.all(np.isfinite(ad.value(h))):
            raise NonFiniteError(f"non-finite activations in layer {layer}", layer=layer)
    return ad.reshape(h, (-1,)) if single else h


def gradient(params: NetworkParams, spec: NetworkSpec, x, loss_fn):
    """dLoss/dparams for a scalar-valued ``loss_fn`` of the network outputs.

    Finiteness is checked layer by layer; a bad intermediate raises
    ``NonFiniteError`` carrying the layer index.
    """
    leaf = ad.Tensor(params.values)
    out = forward_flat(leaf, spec, x, check_finite=True)
    loss = loss_fn(out)
    loss.backward()
    g = leaf.grad
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient", layer=None)
    return g


@dataclass
class AdamState:
    """Optimizer state for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    rejected_steps: int = 0

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1, beta2 must lie in (0,1)")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.m.shape != self.v.shape:
            raise ValueError("m and v must have equal length")
        if np.any(self.v < 0.0):
            raise ValueError("v must be elementwise nonnegative")


def adam_init(params: NetworkParams, learning_rate, beta1=0.9, beta2=0.999,
              epsilon=1e-8) -> AdamState:
    z = np.zeros_like(params.values)
    return AdamState(m=z.copy(), v=z.copy(), learning_rate=learning_rate,
                     beta1=beta1, beta2=beta2, epsilon=epsilon)


def adam_step(state: AdamState, params: NetworkParams, grad):
    """One bias-corrected Adam update; returns fresh (state, params).

    Non-finite gradient entries refuse the step: parameters and moments are
    returned unchanged, with ``rejected_steps`` incremented as the
    diagnostic, so a training loop can skip and continue.
    """
    grad = np.asarray(grad).astype(params.values.dtype, copy=False)
    if grad.shape != params.values.shape:
        raise ValueError("gradient length does not match parameters")
    if not np.all(np.isfinite(grad)):
        return replace(state, rejected_steps=state.rejected_steps + 1), params
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    mhat = m / (1.0 - state.beta1 ** t)
    vhat = v / (1.0 - state.beta2 ** t)
    new_values = params.values - state.learning_rate * mhat / (np.sqrt(vhat) + state.epsilon)
    new_state = replace(state, m=m, v=v, step_count=t)
    return new_state, NetworkParams(new_values, list(params.shapes))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, spec: NetworkSpec, params: NetworkParams, state: AdamState = None):
    header = {
        "format": 1,
        "spec": {
            "layer_widths": list(spec.layer_widths),
            "activations": list(spec.activations),
            "seed": spec.seed,
        },
        "n_params": int(params.values.size),
        "dtype": str(params.values.dtype),
        "adam": None if state is None else {
            "learning_rate": state.learning_rate,
            "beta1": state.beta1,
            "beta2": state.beta2,
            "epsilon": state.epsilon,
            "step_count": state.step_count,
        },
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(len(blob)).astype("<u4").tobytes())
        f.write(blob)
        f.write(params.values.astype("<f8").tobytes())
        if state is not None:
            f.write(state.m.astype("<f8").tobytes())
            f.write(state.v.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (spec, params, adam_state-or-None)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a seqecon checkpoint (bad magic)")
    hlen = int(np.frombuffer(blob[8:12], dtype="<u4")[0])
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    if header.get("format") != 1:
        raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')}")
    spec = NetworkSpec(tuple(header["spec"]["layer_widths"]),
                       tuple(header["spec"]["activations"]),
                       int(header["spec"]["seed"]))
    n = header["n_params"]
    off = 12 + hlen
    vals = np.frombuffer(blob, dtype="<f8", count=n, offset=off).copy()
    vals = vals.astype(np.dtype(header.get("dtype", "float64")), copy=False)
    params = NetworkParams(vals, spec.layer_shapes())
    state = None
    if header["adam"] is not None:
        off += n * 8
        m = np.frombuffer(blob, dtype="<f8", count=n, offset=off).copy()
        off += n * 8
        v = np.frombuffer(blob, dtype="<f8", count=n, offset=off).copy()
        a = header["adam"]
        state = AdamState(m=m, v=v, step_count=a["step_count"],
                          learning_rate=a["learning_rate"], beta1=a["beta1"],
                          beta2=a["beta2"], epsilon=a["epsilon"])
    return spec, params, state
