"""Finite-difference verification of every analytic gradient, module by module.

Runs in 64-bit. Each check builds a scalar loss as a random projection of the
module output (so no output direction is left untested), back-propagates once,
and compares every parameter gradient against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cwam as cwam_mod
from . import gate as gate_mod
from . import graph as graph_mod
from . import gru as gru_mod
from . import te as te_mod
from . import tensor as T
from .model import ModelConfig, build
from .tensor import Parameter, Tensor, backward, default_dtype, finite_difference_grad, no_grad

TOLERANCE = 1e-4
# central differences at h=1e-5 resolve gradients to ~1e-11 absolute; below this
# magnitude errors are measured against the floor instead of the gradient itself
GRAD_FLOOR = 1e-6
STEP = 1e-5

SIZES = {
    "tiny": dict(batch=1, num_nodes=3, steps=2, dim=4, steps_per_day=4, hops=2),
    "small": dict(batch=2, num_nodes=5, steps=3, dim=4, steps_per_day=6, hops=3),
}


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


@dataclass
class CheckResult:
    module: str
    worst: float
    parameter: str

    @property
    def ok(self) -> bool:
        return self.worst < TOLERANCE


def check_parameters(loss_fn, params: list[Parameter], module: str, h: float = STEP) -> CheckResult:
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    worst, where = 0.0, ""
    with no_grad():
        for p in params:
            numeric = finite_difference_grad(lambda _: loss_fn(), p, h)
            err = relative_error(p.grad, numeric)
            if err >= worst:
                worst, where = err, p.name
    return CheckResult(module, worst, where)


def _projection(rng, shape):
    w = rng.normal(size=shape)
    return lambda out: (out * w).sum()


def _leaf(rng, shape, name, scale=1.0):
    return Parameter(rng.normal(scale=scale, size=shape), name=name)


def check_tensor_ops(rng) -> CheckResult:
    a = _leaf(rng, (3, 4), "a")
    b = _leaf(rng, (4, 2), "b")
    c = _leaf(rng, (1, 4), "c")
    idx = np.array([0, 2, 2])
    w = rng.normal(size=(3, 13))

    def loss():
        x = T.sigmoid(a * c) - T.tanh(a) + T.relu(a + 0.1)
        y = T.matmul(x, b)
        parts = [
            x,
            T.broadcast_to(y.mean(0, keepdims=True), (3, 2)),
            x[:, :2] / (1.5 + T.sqrt(a * a)[:, 1:3]),
            T.gather_rows(b, idx)[:, :1],
            T.absolute(y) ** 2.0,
            y.sum(1, keepdims=True) * 0.5,
            y.transpose().reshape(3, 2)[:, :1],
        ]
        return (T.concat(parts, axis=1) * w).sum()

    return check_parameters(loss, [a, b, c], "tensor_engine")


def check_cwam(rng, size) -> CheckResult:
    C = 2 * size["dim"] + size["dim"]
    p = cwam_mod.CwamParams(C, 2, rng)
    U = _leaf(rng, (size["steps"], size["num_nodes"], C), "U")
    proj = _projection(rng, U.shape)
    return check_parameters(lambda: proj(cwam_mod.cwam(U, p)), p.parameters() + [U], "cwam")


def check_gate(rng, size) -> CheckResult:
    d, n, t = size["dim"], size["num_nodes"], size["steps"]
    p = gate_mod.GateParams(d, d, d, 2, rng)
    day, week = _leaf(rng, (size["batch"], t, d), "day"), _leaf(rng, (size["batch"], t, d), "week")
    E = _leaf(rng, (n, d), "E")
    X = _leaf(rng, (size["batch"], t, n, 1), "X")
    w1, w2 = rng.normal(size=X.shape), rng.normal(size=X.shape)

    def loss():
        x1, x2 = gate_mod.split(X, gate_mod.gate_values(day, week, E, p))
        return (x1 * w1).sum() + (x2 * w2).sum()

    return check_parameters(loss, p.parameters() + [day, week, E, X], "disentangle_gate")


def check_te(rng, size) -> CheckResult:
    p = te_mod.TeParams()
    p.gamma.data[:] = rng.uniform(0.5, 1.5)
    p.beta.data[:] = rng.normal(scale=0.3)
    X = _leaf(rng, (size["steps"], size["num_nodes"], size["dim"]), "X")
    proj = _projection(rng, X.shape)
    return check_parameters(lambda: proj(te_mod.time_enhance(X, p)), p.parameters() + [X], "te_module")


def check_graph(rng, size) -> CheckResult:
    n, d = size["num_nodes"], size["dim"]
    gp = graph_mod.GraphLearnParams(n, d, 3.0, rng)
    for q in gp.parameters():
        q.data = rng.normal(scale=0.5, size=q.shape)
    pp = graph_mod.PropagationParams(d, size["hops"], 0.3, rng)
    H = _leaf(rng, (size["batch"], n, d), "H")
    proj = _projection(rng, H.shape)
    return check_parameters(lambda: proj(graph_mod.graph_convolve(H, gp, pp)), gp.parameters() + pp.parameters() + [H],
                            "gc_module")


def check_gru(rng, size) -> CheckResult:
    d = size["dim"]
    p = gru_mod.GruParams(d + 1, d, rng)
    for name in ("b_z", "b_r", "b_h"):
        getattr(p, name).data = rng.normal(scale=0.3, size=d)
    head = gru_mod.OutputHead(d, size["steps"], 1, rng)
    X = _leaf(rng, (size["batch"], size["steps"], size["num_nodes"], d + 1), "X")
    proj = _projection(rng, (size["batch"], size["steps"], size["num_nodes"], 1))

    def loss():
        return proj(gru_mod.project(gru_mod.encode_sequence(X, p, time_axis=1), head))

    return check_parameters(loss, p.parameters() + head.parameters() + [X], "temporal_backbone")


def tiny_model_config(size="tiny", **overrides) -> ModelConfig:
    s = SIZES[size]
    base = dict(num_nodes=s["num_nodes"], channels=1, input_steps=s["steps"], output_steps=s["steps"],
                steps_per_day=s["steps_per_day"], d_t=s["dim"], d_n=s["dim"], d_g=s["dim"], d_h=s["dim"],
                hops=s["hops"], reduction_ratio=2, dtype="float64")
    base.update(overrides)
    return ModelConfig(**base)


def check_model(rng, size, seed, **overrides) -> CheckResult:
    """End-to-end MAE loss of the full network on random inputs."""
    s = SIZES[size]
    cfg = tiny_model_config(size, **overrides)
    model = build(cfg, seed)
    # move the gate/TE scalars off their symmetric initial values
    for p in model.parameters():
        if p.name.endswith(".gamma") or p.name.endswith(".beta"):
            p.data = p.data + rng.normal(scale=0.3, size=p.shape)
    shape = (s["batch"], s["steps"], s["num_nodes"], 1)
    x, y = rng.normal(size=shape), rng.normal(size=shape)
    tod = rng.integers(0, s["steps_per_day"], size=shape[:2])
    dow = rng.integers(0, 7, size=shape[:2])
    return check_parameters(lambda: T.absolute(model(x, tod, dow) - y).mean(), model.parameters(), "model")


def run(size: str = "tiny", seed: int = 0, modules=None) -> list[CheckResult]:
    if size not in SIZES:
        raise ValueError(f"unknown size {size!r}; choose from {sorted(SIZES)}")
    sz = SIZES[size]
    rng = np.random.default_rng(seed)
    checks = {
        "tensor_engine": lambda: check_tensor_ops(rng),
        "cwam": lambda: check_cwam(rng, sz),
        "disentangle_gate": lambda: check_gate(rng, sz),
        "te_module": lambda: check_te(rng, sz),
        "gc_module": lambda: check_graph(rng, sz),
        "temporal_backbone": lambda: check_gru(rng, sz),
        "model": lambda: check_model(rng, size, seed),
    }
    with default_dtype(np.float64):
        return [fn() for name, fn in checks.items() if modules is None or name in modules]
