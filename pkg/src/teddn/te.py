"""Time-enhancement module: node importance against the global mean descriptor."""

from __future__ import annotations

from . import params as init
from .errors import ContractError, DimensionError
from .tensor import Tensor, sigmoid, sqrt

DEFAULT_EPSILON = 1e-5


class TeParams:
    def __init__(self, epsilon: float = DEFAULT_EPSILON, prefix="te", groups: int = 1):
        if not epsilon > 0:
            raise ContractError("epsilon must be positive")
        if groups != 1:
            # only the single-group form is defined
            raise ContractError("te groups must be 1")
        self.epsilon = epsilon
        self.groups = groups
        self.gamma = init.constant((1,), 1.0, f"{prefix}.gamma")
        self.beta = init.constant((1,), 0.0, f"{prefix}.beta")

    def parameters(self):
        return [self.gamma, self.beta]


def global_descriptor(X: Tensor) -> Tensor:
    """Mean over the node axis: (..., N, d) -> (..., d)."""
    if X.ndim < 2 or X.shape[-2] < 1:
        raise ContractError(f"global_descriptor needs at least one node, got shape {X.shape}")
    return X.mean(-2)


def importance(g: Tensor, X: Tensor) -> Tensor:
    """Dot product of each node's features with the descriptor: (..., N)."""
    if g.shape[-1] != X.shape[-1]:
        raise DimensionError(f"importance: descriptor width {g.shape[-1]} vs feature width {X.shape[-1]}")
    return (X * g.reshape(g.shape[:-1] + (1, g.shape[-1]))).sum(-1)


def normalize_coeffs(c: Tensor, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """(c - mean) / (std + epsilon) over the last axis, population variance."""
    if c.shape[-1] < 1:
        raise ContractError("need at least one coefficient")
    centered = c - c.mean(-1, keepdims=True)
    sigma = sqrt((centered * centered).mean(-1, keepdims=True))
    return centered / (sigma + epsilon)


def enhance(X: Tensor, c_hat: Tensor, p: TeParams) -> Tensor:
    a = p.gamma * c_hat + p.beta
    return X * sigmoid(a).reshape(a.shape + (1,))


def time_enhance(X: Tensor, p: TeParams) -> Tensor:
    """Full chain over the node axis of X (..., N, d)."""
    c = importance(global_descriptor(X), X)
    return enhance(X, normalize_coeffs(c, p.epsilon), p)
