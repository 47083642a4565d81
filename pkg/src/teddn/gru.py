"""GRU sequence encoder, its non-recurrent stand-in, and the output head."""

from __future__ import annotations

import math

import numpy as np

from . import params as init
from .errors import ContractError, DimensionError
from .tensor import Tensor, matmul, sigmoid, tanh, transpose


class GruParams:
    def __init__(self, d_in: int, d_h: int, rng: np.random.Generator, prefix="gru"):
        self.d_in, self.d_h = d_in, d_h
        bound = 1.0 / math.sqrt(d_h)
        for gate in ("z", "r", "h"):
            setattr(self, f"w_{gate}", init.uniform(rng, (d_in, d_h), bound, f"{prefix}.w_{gate}"))
            setattr(self, f"u_{gate}", init.uniform(rng, (d_h, d_h), bound, f"{prefix}.u_{gate}"))
            setattr(self, f"b_{gate}", init.constant((d_h,), 0.0, f"{prefix}.b_{gate}"))

    def parameters(self):
        return [getattr(self, f"{kind}_{gate}") for gate in ("z", "r", "h") for kind in ("w", "u", "b")]


def _step(xz: Tensor, xr: Tensor, xh: Tensor, h: Tensor, p: GruParams) -> Tensor:
    z = sigmoid(xz + matmul(h, p.u_z))
    r = sigmoid(xr + matmul(h, p.u_r))
    cand = tanh(xh + matmul(r * h, p.u_h))
    return (1.0 - z) * h + z * cand


def gru_cell(x_t: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    """One step; ``x_t`` is (..., D_in), ``h_prev`` is (..., D_h)."""
    if x_t.shape[-1] != p.d_in or h_prev.shape[-1] != p.d_h:
        raise DimensionError(f"gru_cell expects widths ({p.d_in}, {p.d_h}), got {x_t.shape} and {h_prev.shape}")
    return _step(
        matmul(x_t, p.w_z) + p.b_z,
        matmul(x_t, p.w_r) + p.b_r,
        matmul(x_t, p.w_h) + p.b_h,
        h_prev,
        p,
    )


def encode_sequence(X: Tensor, p: GruParams, time_axis: int = 0) -> Tensor:
    """Fold the GRU over ``time_axis`` from a zero state and return the last state."""
    T = X.shape[time_axis]
    if T < 1:
        raise ContractError("encode_sequence needs at least one step")
    if X.shape[-1] != p.d_in:
        raise DimensionError(f"encode_sequence: input width {X.shape[-1]} vs GRU input {p.d_in}")
    # input projections for every step at once; only the recurrence is sequential
    xz = matmul(X, p.w_z) + p.b_z
    xr = matmul(X, p.w_r) + p.b_r
    xh = matmul(X, p.w_h) + p.b_h
    out_shape = X.shape[:time_axis] + X.shape[time_axis + 1 : -1] + (p.d_h,)
    h = Tensor(np.zeros(out_shape), dtype=X.dtype)
    index = [slice(None)] * X.ndim
    for t in range(T):
        index[time_axis] = t
        sl = tuple(index)
        h = _step(xz[sl], xr[sl], xh[sl], h, p)
    return h


class StepDenseParams:
    """Per-step dense map used in place of the GRU when recurrence is ablated."""

    def __init__(self, d_in: int, d_h: int, rng: np.random.Generator, prefix="dense"):
        self.d_in, self.d_h = d_in, d_h
        self.w = init.fan_in(rng, (d_in, d_h), f"{prefix}.w")
        self.b = init.constant((d_h,), 0.0, f"{prefix}.b")

    def parameters(self):
        return [self.w, self.b]


def encode_mean(X: Tensor, p: StepDenseParams, time_axis: int = 0) -> Tensor:
    """tanh(x_t W + b) averaged over time."""
    if X.shape[-1] != p.d_in:
        raise DimensionError(f"encode_mean: input width {X.shape[-1]} vs {p.d_in}")
    return tanh(matmul(X, p.w) + p.b).mean(time_axis)


class OutputHead:
    def __init__(self, d_cat: int, horizon: int, channels: int, rng: np.random.Generator, name="head.proj"):
        self.horizon, self.channels = horizon, channels
        self.proj = init.fan_in(rng, (d_cat, horizon * channels), name)

    def parameters(self):
        return [self.proj]


def project(features: Tensor, head: OutputHead) -> Tensor:
    """(..., N, D_cat) -> (..., T_out, N, C_out)."""
    if features.shape[-1] != head.proj.shape[0]:
        raise DimensionError(f"project: feature width {features.shape[-1]} vs head input {head.proj.shape[0]}")
    out = matmul(features, head.proj)
    lead, n = features.shape[:-2], features.shape[-2]
    out = out.reshape(lead + (n, head.horizon, head.channels))
    k = len(lead)
    return transpose(out, tuple(range(k)) + (k + 1, k, k + 2))
