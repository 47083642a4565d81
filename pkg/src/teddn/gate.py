"""Disentangle gate: per-(step, node) ratio splitting raw flow into two streams."""

from __future__ import annotations

import numpy as np

from . import params as init
from .cwam import CwamParams, cwam
from .errors import DimensionError
from .tensor import Tensor, broadcast_to, clip, concat, matmul, relu, sigmoid


class GateParams:
    def __init__(self, d_t: int, d_n: int, d_g: int, reduction_ratio: int, rng: np.random.Generator, prefix="gate"):
        width = 2 * d_t + d_n
        self.d_t, self.d_n = d_t, d_n
        self.cwam = CwamParams(width, reduction_ratio, rng, prefix=f"{prefix}.cwam")
        self.w1 = init.fan_in(rng, (width, d_g), f"{prefix}.w1")
        self.w2 = init.fan_in(rng, (d_g, 1), f"{prefix}.w2")

    def parameters(self):
        return self.cwam.parameters() + [self.w1, self.w2]


def gate_features(day_rows: Tensor, week_rows: Tensor, E: Tensor) -> Tensor:
    """Per-(step, node) concatenation [day_t | week_t | E_i], shape (..., T, N, 2*d_t + d_n)."""
    if day_rows.shape != week_rows.shape:
        raise DimensionError(f"day rows {day_rows.shape} and week rows {week_rows.shape} differ")
    lead = day_rows.shape[:-1]
    N = E.shape[0]
    day = broadcast_to(day_rows.reshape(lead + (1, day_rows.shape[-1])), lead + (N, day_rows.shape[-1]))
    week = broadcast_to(week_rows.reshape(lead + (1, week_rows.shape[-1])), lead + (N, week_rows.shape[-1]))
    node = broadcast_to(E, lead + E.shape)
    return concat([day, week, node], axis=-1)


def gate_values(day_rows: Tensor, week_rows: Tensor, E: Tensor, p: GateParams) -> Tensor:
    """Omega of shape (..., T, N, 1), every entry strictly inside (0, 1).

    ``day_rows``/``week_rows`` are (T, d_t) or batched (B, T, d_t). A floating
    point sigmoid rounds to exactly 0 or 1 once |logit| passes ~37 (float64) or
    ~17 (float32), so the result is clamped one rounding step inside the
    interval; the sigmoid slope there is already below machine epsilon.
    """
    if day_rows.shape[-1] != p.d_t or E.shape[-1] != p.d_n:
        raise DimensionError(
            f"gate expects d_t={p.d_t}, d_n={p.d_n}; got rows {day_rows.shape} and node table {E.shape}"
        )
    feat = gate_features(day_rows, week_rows, E)
    feat = cwam(feat, p.cwam, batch_dims=day_rows.ndim - 2)
    omega = sigmoid(matmul(relu(matmul(feat, p.w1)), p.w2))
    margin = float(np.finfo(omega.data.dtype).epsneg)
    return clip(omega, margin, 1.0 - margin)


def split(X: Tensor, omega: Tensor) -> tuple[Tensor, Tensor]:
    """X1 = X * omega (broadcast over channels), X2 = X - X1, with X1 + X2 == X bit for bit.

    A single subtraction is not enough: when omega < 1/2, X - X*omega can round
    on a tie and the sum misses X by one ulp. Re-deriving X1 = X - X2 fixes that,
    because one of the two subtractions always has operands within a factor of
    two of each other and is therefore exact (Sterbenz).
    """
    if X.shape[:-1] != omega.shape[:-1] or omega.shape[-1] != 1:
        raise DimensionError(f"split: flow {X.shape} and gate {omega.shape} disagree on leading axes")
    x2 = X - X * omega
    return X - x2, x2
