"""Channel-wise attention: squeeze, excite, scale."""

from __future__ import annotations

import numpy as np

from . import params as init
from .errors import ContractError, DimensionError
from .tensor import Tensor, matmul, relu, reshape, sigmoid


class CwamParams:
    def __init__(self, channels: int, reduction_ratio: int, rng: np.random.Generator, prefix="cwam"):
        if channels < 1 or reduction_ratio < 1:
            raise ContractError("channels and reduction ratio must be >= 1")
        hidden = max(1, channels // reduction_ratio)
        self.channels = channels
        self.reduction_ratio = reduction_ratio
        self.reduce = init.fan_in(rng, (channels, hidden), f"{prefix}.reduce")
        self.expand = init.fan_in(rng, (hidden, channels), f"{prefix}.expand")

    def parameters(self):
        return [self.reduce, self.expand]


def squeeze(U: Tensor, batch_dims: int = 0) -> Tensor:
    """Per-channel mean over every axis except the leading ``batch_dims`` and the last.

    An unbatched ``U`` of shape (..., C) gives ``z`` of shape (C,).
    """
    axes = tuple(range(batch_dims, U.ndim - 1))
    if U.size == 0 or not axes:
        raise ContractError(f"squeeze needs at least one non-channel axis with elements, got shape {U.shape}")
    return U.mean(axes)


def excite(z: Tensor, p: CwamParams) -> Tensor:
    """s = sigmoid(relu(z @ reduce) @ expand), shape preserved."""
    if z.shape[-1] != p.channels:
        raise DimensionError(f"excite: descriptor has {z.shape[-1]} channels, params expect {p.channels}")
    flat = reshape(z, (-1, p.channels))
    s = sigmoid(matmul(relu(matmul(flat, p.reduce)), p.expand))
    return reshape(s, z.shape)


def scale(U: Tensor, s: Tensor, batch_dims: int = 0) -> Tensor:
    """Multiply channel c of ``U`` by ``s[..., c]``; ``s`` carries the batch axes of ``U``."""
    if U.shape[-1] != s.shape[-1]:
        raise DimensionError(f"scale: {U.shape[-1]} input channels vs {s.shape[-1]} gate values")
    if s.shape[:-1] != U.shape[:batch_dims]:
        raise DimensionError(f"scale: gate shape {s.shape} does not match batch axes of {U.shape}")
    middle = (1,) * (U.ndim - 1 - batch_dims)
    return U * reshape(s, s.shape[:-1] + middle + s.shape[-1:])


def cwam(U: Tensor, p: CwamParams, batch_dims: int = 0) -> Tensor:
    return scale(U, excite(squeeze(U, batch_dims), p), batch_dims)
