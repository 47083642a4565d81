"""Full forecasting network: gate, time enhancement, GRU, adaptive graph, head."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .embeddings import NodeTable, TimeTables, lookup
from .errors import ConfigError, DataFormatError, DimensionError
from .gate import GateParams, gate_values, split
from .graph import GraphLearnParams, PropagationParams, graph_convolve, learn_adjacency
from .gru import GruParams, OutputHead, StepDenseParams, encode_mean, encode_sequence, project
from .te import TeParams, time_enhance
from .tensor import Parameter, Tensor, broadcast_to, concat, default_dtype

VARIANTS = {
    "full": {},
    "w/o TE": {"use_te": False},
    "w/o DG": {"use_dg": False},
    "w/o GRU": {"use_gru": False},
}

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    num_nodes: int
    channels: int = 1
    input_steps: int = 12
    output_steps: int = 12
    steps_per_day: int = 288
    d_t: int = 16
    d_n: int = 16
    d_g: int | None = None
    d_h: int = 16
    hops: int = 2
    alpha: float = 3.0
    beta_res: float = 0.5
    epsilon: float = 1e-5
    reduction_ratio: int = 4
    te_groups: int = 1
    use_te: bool = True
    use_dg: bool = True
    use_gru: bool = True
    share_graph: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        ints = ("num_nodes", "channels", "input_steps", "output_steps", "steps_per_day", "d_t", "d_n", "d_h", "hops",
                "reduction_ratio", "te_groups")
        for key in ints:
            value = getattr(self, key)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"model.{key} must be a positive integer, got {value!r}")
        if self.d_g is not None and (not isinstance(self.d_g, int) or self.d_g < 1):
            raise ConfigError(f"model.d_g must be a positive integer, got {self.d_g!r}")
        if not 0.0 <= self.beta_res <= 1.0:
            raise ConfigError(f"model.beta_res must lie in [0, 1], got {self.beta_res}")
        if not self.alpha >= 0 or not self.epsilon > 0:
            raise ConfigError("model.alpha must be >= 0 and model.epsilon > 0")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"model.dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")

    @property
    def gate_width(self) -> int:
        return self.d_g if self.d_g is not None else self.d_t

    @property
    def num_streams(self) -> int:
        return 2 if self.use_dg else 1

    @property
    def step_width(self) -> int:
        return self.channels + 2 * self.d_t

    @property
    def head_width(self) -> int:
        return self.num_streams * self.d_h + 2 * self.d_t

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config key(s): {', '.join(unknown)}")
        if "num_nodes" not in d:
            raise ConfigError("model.num_nodes is required")
        return cls(**d)


def variant(config: ModelConfig, name: str) -> ModelConfig:
    """Config for one ablation variant: "full", "w/o TE", "w/o DG" or "w/o GRU"."""
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {list(VARIANTS)}")
    return dataclasses.replace(config, **VARIANTS[name])


class Stream:
    def __init__(self, cfg: ModelConfig, rng, prefix: str, graph: GraphLearnParams | None):
        self.te = TeParams(cfg.epsilon, prefix=f"{prefix}.te", groups=cfg.te_groups) if cfg.use_te else None
        if cfg.use_gru:
            self.encoder = GruParams(cfg.step_width, cfg.d_h, rng, prefix=f"{prefix}.gru")
        else:
            self.encoder = StepDenseParams(cfg.step_width, cfg.d_h, rng, prefix=f"{prefix}.dense")
        self.graph = graph or GraphLearnParams(cfg.num_nodes, cfg.gate_width, cfg.alpha, rng, prefix=f"{prefix}.graph")
        self.prop = PropagationParams(cfg.d_h, cfg.hops, cfg.beta_res, rng, prefix=f"{prefix}.prop")
        self.owns_graph = graph is None

    def parameters(self):
        out = self.te.parameters() if self.te else []
        out += self.encoder.parameters()
        if self.owns_graph:
            out += self.graph.parameters()
        return out + self.prop.parameters()


class TeddnModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        cfg = config
        rng = np.random.default_rng(seed)
        with default_dtype(_DTYPES[cfg.dtype]):
            self.time = TimeTables(cfg.steps_per_day, cfg.d_t, rng)
            self.nodes = NodeTable(cfg.num_nodes, cfg.d_n, rng)
            self.gate = GateParams(cfg.d_t, cfg.d_n, cfg.gate_width, cfg.reduction_ratio, rng) if cfg.use_dg else None
            shared = GraphLearnParams(cfg.num_nodes, cfg.gate_width, cfg.alpha, rng, prefix="graph") if cfg.share_graph else None
            self.streams = [Stream(cfg, rng, f"stream{i}", shared) for i in range(cfg.num_streams)]
            self.shared_graph = shared
            self.head = OutputHead(cfg.head_width, cfg.output_steps, cfg.channels, rng)
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names")

    @property
    def dtype(self):
        return _DTYPES[self.config.dtype]

    def parameters(self) -> list[Parameter]:
        out = self.time.parameters() + self.nodes.parameters()
        if self.gate is not None:
            out += self.gate.parameters()
        if self.shared_graph is not None:
            out += self.shared_graph.parameters()
        for s in self.streams:
            out += s.parameters()
        return out + self.head.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def adjacency(self) -> list[np.ndarray]:
        """Learned adjacency of each stream, as plain arrays."""
        return [learn_adjacency(s.graph).data.copy() for s in self.streams]

    def __call__(self, inputs, tod, dow, trace=None) -> Tensor:
        return forward(self, inputs, tod, dow, trace)


def build(config: ModelConfig, seed: int = 0) -> TeddnModel:
    return TeddnModel(config, seed)


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except DimensionError as exc:
                raise DimensionError(f"[{name}] {exc}") from exc

        return inner

    return wrap


@_stage("embedding")
def _embed(model, tod, dow):
    return lookup(model.time, model.nodes, tod, dow)


@_stage("disentangle gate")
def _disentangle(model, X, day, week, E):
    omega = gate_values(day, week, E, model.gate)
    return list(split(X, omega))


@_stage("stream encoder")
def _encode(stream: Stream, S, day_b, week_b):
    feats = concat([S, day_b, week_b], axis=-1)
    if stream.te is not None:
        feats = time_enhance(feats, stream.te)
    if isinstance(stream.encoder, GruParams):
        return encode_sequence(feats, stream.encoder, time_axis=1)
    return encode_mean(feats, stream.encoder, time_axis=1)


@_stage("graph convolution")
def _diffuse(stream: Stream, H):
    return graph_convolve(H, stream.graph, stream.prop)


@_stage("output head")
def _head(model, outs, day_last, week_last):
    return project(concat(outs + [day_last, week_last], axis=-1), model.head)


def forward(model: TeddnModel, inputs, tod, dow, trace: list | None = None) -> Tensor:
    """Forecast (B, T_out, N, C) from normalized inputs (B, T_h, N, C).

    ``tod``/``dow`` are integer arrays (B, T_h) of time-of-day and day-of-week
    slots for every input step. When ``trace`` is a list, (stage, tensor) pairs
    are appended to it in execution order.
    """
    record = trace.append if trace is not None else (lambda item: None)
    cfg = model.config
    X = inputs if isinstance(inputs, Tensor) else Tensor(inputs, dtype=model.dtype)
    if X.ndim != 4 or X.shape[1:] != (cfg.input_steps, cfg.num_nodes, cfg.channels):
        raise DimensionError(
            f"[input] expected (B, {cfg.input_steps}, {cfg.num_nodes}, {cfg.channels}), got {X.shape}"
        )
    B, T, N, _ = X.shape
    tod = np.asarray(tod)
    dow = np.asarray(dow)
    if tod.shape != (B, T) or dow.shape != (B, T):
        raise DimensionError(f"[input] time indices must be ({B}, {T}), got {tod.shape} and {dow.shape}")

    record(("input", X))
    day, week, E = _embed(model, tod, dow)
    record(("embedding", day))
    record(("embedding", week))
    streams = _disentangle(model, X, day, week, E) if cfg.use_dg else [X]
    if cfg.use_dg:
        record(("disentangle gate", streams[0]))

    day_b = broadcast_to(day.reshape(B, T, 1, cfg.d_t), (B, T, N, cfg.d_t))
    week_b = broadcast_to(week.reshape(B, T, 1, cfg.d_t), (B, T, N, cfg.d_t))
    outs = []
    for i, (stream, S) in enumerate(zip(model.streams, streams)):
        H = _encode(stream, S, day_b, week_b)
        record((f"stream{i} encoder", H))
        outs.append(_diffuse(stream, H))
        record((f"stream{i} graph convolution", outs[-1]))
    out = _head(model, outs, day_b[:, -1], week_b[:, -1])
    record(("output head", out))
    return out


# ---------------------------------------------------------------- checkpoints

MAGIC = b"TEDDNCKP"
FORMAT_VERSION = 1


def save_checkpoint(model: TeddnModel, path, extra: dict | None = None) -> None:
    """Write config, extra metadata, and every parameter as little-endian floats."""
    entries, blobs, offset = [], [], 0
    for p in model.parameters():
        arr = np.ascontiguousarray(p.data)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": p.name, "shape": list(arr.shape), "dtype": arr.dtype.newbyteorder("<").str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "extra": extra or {},
        "params": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (header, {name: array}); raises DataFormatError on any corruption."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    if len(blob) < start + hlen:
        raise DataFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start : start + hlen])
    except ValueError as exc:
        raise DataFormatError(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {header.get('format_version')!r}")
    payload = memoryview(blob)[start + hlen :]
    arrays = {}
    for e in header["params"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise DataFormatError(f"{path}: truncated payload at parameter {e['name']} ({len(payload)} < {end} bytes)")
        arr = np.frombuffer(payload[e["offset"] : end], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    if sum(e["nbytes"] for e in header["params"]) != len(payload):
        raise DataFormatError(f"{path}: payload length {len(payload)} does not match header")
    return header, arrays


def load_parameters(model: TeddnModel, arrays: dict[str, np.ndarray]) -> None:
    """Copy arrays into ``model``; names and shapes must match exactly."""
    params = model.named_parameters()
    for name, p in params.items():
        if name not in arrays:
            raise ConfigError(f"checkpoint is missing parameter {name}")
        if arrays[name].shape != p.shape:
            raise ConfigError(f"parameter {name}: checkpoint shape {arrays[name].shape} vs model {p.shape}")
    extra = sorted(set(arrays) - set(params))
    if extra:
        raise ConfigError(f"checkpoint has unexpected parameter {extra[0]}")
    for name, p in params.items():
        p.data = arrays[name].astype(p.data.dtype, copy=True)
        p.zero_grad()


def load_checkpoint(path) -> tuple[TeddnModel, dict]:
    header, arrays = read_checkpoint(path)
    model = build(ModelConfig.from_dict(header["config"]), header.get("seed", 0))
    load_parameters(model, arrays)
    return model, header.get("extra", {})
