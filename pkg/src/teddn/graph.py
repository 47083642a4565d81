"""Adaptive adjacency learning and residual multi-hop graph convolution."""

from __future__ import annotations

import math
import os

import numpy as np

from . import params as init
from .errors import ConfigError, DimensionError
from .tensor import Tensor, concat, matmul, relu, tanh


class GraphLearnParams:
    def __init__(self, num_nodes: int, d_g: int, alpha: float, rng: np.random.Generator, prefix="graph"):
        if not alpha >= 0:
            raise ConfigError("alpha must be non-negative")
        bound = 1.0 / math.sqrt(d_g)
        self.alpha = alpha
        self.e1 = init.uniform(rng, (num_nodes, d_g), bound, f"{prefix}.e1")
        self.e2 = init.uniform(rng, (num_nodes, d_g), bound, f"{prefix}.e2")
        self.w1 = init.fan_in(rng, (d_g, d_g), f"{prefix}.w1")
        self.w2 = init.fan_in(rng, (d_g, d_g), f"{prefix}.w2")

    def parameters(self):
        return [self.e1, self.e2, self.w1, self.w2]


class PropagationParams:
    def __init__(self, width: int, hops: int, beta_res: float, rng: np.random.Generator, prefix="prop"):
        if hops < 1:
            raise ConfigError("hops must be >= 1")
        if not 0.0 <= beta_res <= 1.0:
            raise ConfigError(f"beta_res must lie in [0, 1], got {beta_res}")
        self.hops = hops
        self.beta_res = beta_res
        self.fuse = init.fan_in(rng, (hops * width, width), f"{prefix}.fuse")

    def parameters(self):
        return [self.fuse]


def learn_adjacency(p: GraphLearnParams) -> Tensor:
    """Non-negative directed adjacency; A[i, j] > 0 implies A[j, i] == 0."""
    de1 = tanh(p.alpha * matmul(p.e1, p.w1))
    de2 = tanh(p.alpha * matmul(p.e2, p.w2))
    m = matmul(de1, de2.T)
    # m - m.T is exactly antisymmetric in floating point, so diag is exactly 0
    return relu(tanh(p.alpha * (m - m.T)))


def normalize_adjacency(A: Tensor) -> Tensor:
    """Row-normalize A + I."""
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"adjacency must be square, got {A.shape}")
    a_hat = A + np.eye(A.shape[0], dtype=A.dtype)
    return a_hat / a_hat.sum(-1, keepdims=True)


def propagate(H_in: Tensor, P: Tensor, pp: PropagationParams) -> list[Tensor]:
    """[H0, ..., Hk] with H0 = H_in and Hj = beta*H_in + (1-beta)*P@H(j-1).

    ``H_in`` may carry leading batch axes: (..., N, D).
    """
    if H_in.shape[-2] != P.shape[0]:
        raise DimensionError(f"propagate: {H_in.shape[-2]} nodes in features vs {P.shape[0]} in graph")
    beta = pp.beta_res
    kept = beta * H_in
    hops = [H_in]
    for _ in range(pp.hops):
        hops.append(kept + (1.0 - beta) * matmul(P, hops[-1]))
    return hops


def hop_fusion(hops: list[Tensor], fuse: Tensor) -> Tensor:
    if any(h.shape != hops[0].shape for h in hops):
        raise DimensionError(f"hop_fusion: hop shapes differ {[h.shape for h in hops]}")
    stacked = concat(hops, axis=-1)
    if stacked.shape[-1] != fuse.shape[0]:
        raise DimensionError(f"hop_fusion: {len(hops)} hops of width {hops[0].shape[-1]} vs fuse {fuse.shape}")
    return matmul(stacked, fuse)


def graph_convolve(H_in: Tensor, gp: GraphLearnParams, pp: PropagationParams) -> Tensor:
    P = normalize_adjacency(learn_adjacency(gp))
    hops = propagate(H_in, P, pp)
    return hop_fusion(hops[: pp.hops], pp.fuse)


def export_adjacency_csv(A, path) -> None:
    """Dense CSV: a header row of node ids followed by N rows of N values."""
    arr = A.data if isinstance(A, Tensor) else np.asarray(A)
    n = arr.shape[0]
    with open(os.fspath(path), "w", newline="") as fh:
        fh.write(",".join(str(i) for i in range(n)) + "\n")
        for row in arr:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
