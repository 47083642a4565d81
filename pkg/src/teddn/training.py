"""Loss, metrics, schedules, the training loop, baselines and the ablation harness."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import ForecastData, NormStats, WindowSet
from .errors import ConfigError, DimensionError, NumericalError
from .model import TeddnModel, build, save_checkpoint, variant
from .optim import Adam
from .tensor import Tensor, absolute, backward, no_grad

logger = logging.getLogger(__name__)

REPORT_HORIZONS = (3, 6, 12)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.002
    weight_decay: float = 1.0e-5
    adam_eps: float = 1.0e-8
    batch_size: int = 32
    lr_decay: float = 0.5
    lr_patience: int = 10
    min_lr: float = 1.0e-6
    warmup_epochs: int = 30
    curriculum_step: int = 3
    max_horizon: int = 12
    patience: int = 100
    max_epochs: int = 200
    seed: int = 0
    mape_threshold: float = 1.0

    def __post_init__(self):
        for key in ("lr", "lr_decay", "min_lr", "adam_eps"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"train.{key} must be positive, got {getattr(self, key)!r}")
        for key in ("batch_size", "lr_patience", "curriculum_step", "max_horizon", "patience", "max_epochs"):
            value = getattr(self, key)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"train.{key} must be a positive integer, got {value!r}")
        if self.warmup_epochs < 0 or self.weight_decay < 0 or self.mape_threshold < 0:
            raise ConfigError("train.warmup_epochs, weight_decay and mape_threshold must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config key(s): {', '.join(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- loss and metrics


def loss(pred: Tensor, target, horizon: int) -> Tensor:
    """Mean absolute error over the first ``horizon`` forecast steps (axis 1)."""
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"loss: prediction {pred.shape} vs target {target.shape}")
    if not 1 <= horizon <= pred.shape[1]:
        raise ConfigError(f"horizon must lie in [1, {pred.shape[1]}], got {horizon}")
    return absolute(pred[:, :horizon] - target[:, :horizon].astype(pred.dtype)).mean()


@dataclass
class HorizonMetrics:
    horizon: int
    mae: float
    rmse: float
    mape: float | None  # percent; None when every target was masked


@dataclass
class MetricReport:
    horizons: list[HorizonMetrics]
    mae: float
    rmse: float
    mape: float | None
    epoch: int | None = None
    seconds: float | None = None

    def at(self, horizon: int) -> HorizonMetrics:
        return self.horizons[horizon - 1]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def rows(self) -> list[tuple]:
        out = [(h.horizon, h.mae, h.rmse, h.mape) for h in self.horizons]
        out.append(("avg", self.mae, self.rmse, self.mape))
        return out


class MetricAccumulator:
    """Running per-horizon error sums; reports are exact regardless of batching."""

    def __init__(self, horizons: int, mask_threshold: float = 1.0):
        self.mask_threshold = mask_threshold
        self.abs = np.zeros(horizons)
        self.sq = np.zeros(horizons)
        self.ape = np.zeros(horizons)
        self.count = np.zeros(horizons)
        self.masked = np.zeros(horizons)

    def update(self, pred, target) -> None:
        pred = np.asarray(pred, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        if pred.shape != target.shape:
            raise DimensionError(f"metrics: prediction {pred.shape} vs target {target.shape}")
        H = pred.shape[1]
        e = (pred - target).swapaxes(0, 1).reshape(H, -1)
        y = np.abs(target.swapaxes(0, 1).reshape(H, -1))
        keep = y > self.mask_threshold
        self.abs += np.abs(e).sum(axis=1)
        self.sq += (e * e).sum(axis=1)
        self.count += e.shape[1]
        self.ape += np.where(keep, np.abs(e) / np.where(keep, y, 1.0), 0.0).sum(axis=1)
        self.masked += keep.sum(axis=1)

    def report(self, epoch=None, seconds=None) -> MetricReport:
        def mape(ape, n):
            return float(100.0 * ape / n) if n > 0 else None

        rows = [
            HorizonMetrics(i + 1, float(self.abs[i] / self.count[i]), float(math.sqrt(self.sq[i] / self.count[i])),
                           mape(self.ape[i], self.masked[i]))
            for i in range(len(self.abs))
        ]
        n = self.count.sum()
        return MetricReport(rows, float(self.abs.sum() / n), float(math.sqrt(self.sq.sum() / n)),
                            mape(self.ape.sum(), self.masked.sum()), epoch, seconds)


def metrics(pred, target, mask_threshold: float = 1.0) -> MetricReport:
    """MAE, RMSE and masked MAPE (percent) per horizon step and pooled over all steps.

    ``pred``/``target`` are raw-scale arrays (B, T_out, ...).
    """
    acc = MetricAccumulator(np.asarray(pred).shape[1], mask_threshold)
    acc.update(pred, target)
    return acc.report()


# ---------------------------------------------------------------- schedules


def curriculum_horizon(epoch: int, cfg: TrainConfig) -> int:
    if epoch < cfg.warmup_epochs:
        return 1
    return min(cfg.max_horizon, 1 + (epoch - cfg.warmup_epochs) // cfg.curriculum_step)


def lr_schedule(epoch: int, val_history, cfg: TrainConfig) -> float:
    """Learning rate for ``epoch`` given validation MAE of the epochs before it.

    Halve after ``lr_patience`` consecutive epochs without improvement, floored at ``min_lr``.
    """
    lr, best, stale = cfg.lr, math.inf, 0
    for v in list(val_history)[:epoch]:
        if v < best:
            best, stale = v, 0
            continue
        stale += 1
        if stale >= cfg.lr_patience:
            lr = max(lr * cfg.lr_decay, cfg.min_lr)
            stale = 0
    return lr


class EarlyStopping:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1

    def update(self, epoch: int, value: float) -> tuple[bool, bool]:
        """Return (improved, should_stop)."""
        if value < self.best:
            self.best, self.best_epoch = value, epoch
            return True, False
        return False, epoch - self.best_epoch >= self.patience


# ---------------------------------------------------------------- prediction


def predict_tensor(model: TeddnModel, batch, stats: NormStats) -> Tensor:
    """Raw-scale forecast of one batch, differentiable."""
    out = model(batch.inputs, batch.tod, batch.dow)
    return out * stats.std.astype(out.dtype) + stats.mean.astype(out.dtype)


def predict(model: TeddnModel, windows: WindowSet, stats: NormStats, batch_size=32) -> np.ndarray:
    preds = []
    with no_grad():
        for batch in windows.batches(batch_size, dtype=model.dtype):
            preds.append(predict_tensor(model, batch, stats).data.astype(np.float64))
    return np.concatenate(preds, axis=0)


def evaluate(model: TeddnModel, windows: WindowSet, stats: NormStats, batch_size=32, mask_threshold=1.0,
             epoch=None) -> MetricReport:
    start = time.perf_counter()
    acc = MetricAccumulator(windows.output_steps, mask_threshold)
    with no_grad():
        for batch in windows.batches(batch_size, dtype=model.dtype):
            acc.update(predict_tensor(model, batch, stats).data, batch.targets)
    return acc.report(epoch=epoch, seconds=time.perf_counter() - start)


# ---------------------------------------------------------------- training loop


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    horizon: int
    train_loss: float
    val_mae: float
    seconds: float


@dataclass
class TrainResult:
    best_epoch: int
    best_val_mae: float
    log: list[EpochRecord]
    test: MetricReport
    best_state: dict = field(repr=False, default_factory=dict)
    train_seconds: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.log)


def _first_nonfinite(model: TeddnModel, batch, pred: Tensor, value: Tensor) -> str | None:
    """Name the earliest place a NaN/Inf shows up: parameters, then forward stages, then gradients."""
    for p in model.parameters():
        if not np.all(np.isfinite(p.data)):
            return f"parameter {p.name}"
    if not pred.is_finite():
        trace = []
        with no_grad():
            model(batch.inputs, batch.tod, batch.dow, trace=trace)
        for stage, t in trace:
            if not t.is_finite():
                return f"forward stage '{stage}'"
        return "forecast"
    if not value.is_finite():
        return "loss"
    for p in model.parameters():
        if not np.all(np.isfinite(p.grad)):
            return f"gradient of {p.name}"
    return None


def _snapshot(model: TeddnModel) -> dict:
    return {p.name: p.data.copy() for p in model.parameters()}


def _restore(model: TeddnModel, state: dict) -> None:
    for p in model.parameters():
        p.data = state[p.name].copy()


def train(
    model: TeddnModel,
    data: ForecastData,
    cfg: TrainConfig,
    out_dir=None,
    callback: Callable[[int, TeddnModel], bool] | None = None,
    val_fn: Callable[[int, TeddnModel], float] | None = None,
) -> TrainResult:
    """Curriculum training with plateau LR decay and early stopping on validation MAE.

    ``callback(epoch, model)`` returning True ends training after that epoch.
    ``val_fn`` replaces the validation MAE computation (used for protocol tests).
    The best parameters are restored before the final test evaluation.
    """
    if cfg.max_horizon != model.config.output_steps:
        raise ConfigError(f"train.max_horizon ({cfg.max_horizon}) must equal model.output_steps "
                          f"({model.config.output_steps})")
    out_dir = Path(out_dir) if out_dir is not None else None
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience)
    history: list[float] = []
    log: list[EpochRecord] = []
    best_state = _snapshot(model)
    t_start = time.perf_counter()

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        horizon = curriculum_horizon(epoch, cfg)
        opt.lr = lr_schedule(epoch, history, cfg)
        total, count = 0.0, 0
        for batch in data.train.batches(cfg.batch_size, shuffle_seed=[cfg.seed, epoch], dtype=model.dtype):
            opt.zero_grad()
            pred = predict_tensor(model, batch, data.stats)
            value = loss(pred, batch.targets, horizon)
            backward(value)
            bad = _first_nonfinite(model, batch, pred, value)
            if bad is not None:
                raise NumericalError(f"non-finite values at epoch {epoch}: first bad stage is {bad}")
            opt.step()
            total += value.item() * len(batch)
            count += len(batch)
        if val_fn is not None:
            val_mae = float(val_fn(epoch, model))
        else:
            val_mae = evaluate(model, data.val, data.stats, cfg.batch_size, cfg.mape_threshold).mae
        if not math.isfinite(val_mae):
            raise NumericalError(f"non-finite validation MAE at epoch {epoch}")
        history.append(val_mae)
        record = EpochRecord(epoch, opt.lr, horizon, total / max(count, 1), val_mae, time.perf_counter() - t0)
        log.append(record)
        logger.info("epoch %d lr %.2e horizon %d train %.4f val %.4f", epoch, opt.lr, horizon, record.train_loss,
                    val_mae)

        improved, stop = stopper.update(epoch, val_mae)
        if improved:
            best_state = _snapshot(model)
            if out_dir is not None:
                save_checkpoint(model, out_dir / "best.ckpt", extra={"norm": data.stats.to_dict(), "epoch": epoch})
        if out_dir is not None:
            write_epoch_log(log, out_dir)
        if stop or (callback is not None and callback(epoch, model)):
            break

    train_seconds = time.perf_counter() - t_start
    _restore(model, best_state)
    test = evaluate(model, data.test, data.stats, cfg.batch_size, cfg.mape_threshold, epoch=stopper.best_epoch)
    result = TrainResult(stopper.best_epoch, stopper.best, log, test, best_state, train_seconds)
    if out_dir is not None:
        write_report(test, out_dir, "metrics")
    return result


# ---------------------------------------------------------------- output files


def _fmt(v) -> str:
    if v is None:
        return "NA"
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_epoch_log(log: list[EpochRecord], out_dir) -> None:
    """epoch_log.csv is deterministic; wall-clock seconds go to timing.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "epoch_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "horizon", "train_loss", "val_mae"])
        for r in log:
            w.writerow([r.epoch, _fmt(r.lr), r.horizon, _fmt(r.train_loss), _fmt(r.val_mae)])
    with open(out_dir / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "seconds"])
        for r in log:
            w.writerow([r.epoch, f"{r.seconds:.3f}"])


def write_report(report: MetricReport, out_dir, stem="metrics") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["horizon", "mae", "rmse", "mape"])
        for row in report.rows():
            w.writerow([_fmt(v) for v in row])
    payload = report.to_dict()
    payload.pop("seconds", None)
    (out_dir / f"{stem}.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- baselines


def persistence_forecast(windows: WindowSet) -> np.ndarray:
    """Repeat the last observed input step across every horizon."""
    last = windows.raw[windows.starts + windows.input_steps - 1]
    return np.repeat(last[:, None], windows.output_steps, axis=1)


def historical_average_table(train: WindowSet) -> np.ndarray:
    """Training mean per (time-of-day slot, node, channel); unseen slots fall back to the node mean."""
    spd = train.segment.steps_per_day
    raw = train.raw
    table = np.broadcast_to(raw.mean(axis=0), (spd,) + raw.shape[1:]).copy()
    sums = np.zeros((spd,) + raw.shape[1:])
    counts = np.zeros(spd)
    np.add.at(sums, train.tod, raw)
    np.add.at(counts, train.tod, 1)
    seen = counts > 0
    table[seen] = sums[seen] / counts[seen][:, None, None]
    return table


def historical_average_forecast(windows: WindowSet, table: np.ndarray) -> np.ndarray:
    rows = windows.starts[:, None] + windows.input_steps + np.arange(windows.output_steps)
    return table[windows.tod[rows]]


def target_array(windows: WindowSet) -> np.ndarray:
    rows = windows.starts[:, None] + windows.input_steps + np.arange(windows.output_steps)
    return windows.raw[rows]


def baselines(data: ForecastData, split="test", mask_threshold=1.0) -> dict[str, MetricReport]:
    windows = getattr(data, split)
    target = target_array(windows)
    table = historical_average_table(data.train)
    return {
        "persistence": metrics(persistence_forecast(windows), target, mask_threshold),
        "historical_average": metrics(historical_average_forecast(windows, table), target, mask_threshold),
    }


# ---------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    variant: str
    report: MetricReport
    num_parameters: int
    train_seconds_per_epoch: float
    inference_seconds: float


def ablation_suite(data: ForecastData, model_cfg, train_cfg: TrainConfig, out_dir=None,
                   variants=("full", "w/o TE", "w/o DG", "w/o GRU")) -> list[AblationRow]:
    """Train each variant from the same seed and evaluate it on the test split."""
    rows = []
    for name in variants:
        model = build(variant(model_cfg, name), train_cfg.seed)
        sub = Path(out_dir) / name.replace("/", "").replace(" ", "_") if out_dir is not None else None
        result = train(model, data, train_cfg, out_dir=sub)
        t0 = time.perf_counter()
        evaluate(model, data.test, data.stats, train_cfg.batch_size, train_cfg.mape_threshold)
        inference = time.perf_counter() - t0
        rows.append(AblationRow(name, result.test, model.num_parameters(),
                                result.train_seconds / max(result.epochs_run, 1), inference))
    if out_dir is not None:
        write_ablation(rows, out_dir)
    return rows


def ablation_table(rows: list[AblationRow]) -> list[list]:
    """Rows of (variant, horizon, mae, rmse, mape) at horizons 3, 6, 12 and the average."""
    table = []
    for row in rows:
        steps = len(row.report.horizons)
        for h in REPORT_HORIZONS:
            if h <= steps:
                m = row.report.at(h)
                table.append([row.variant, h, m.mae, m.rmse, m.mape])
        table.append([row.variant, "avg", row.report.mae, row.report.rmse, row.report.mape])
    return table


def full_is_best(rows: list[AblationRow]) -> bool:
    by_name = {r.variant: r.report.mae for r in rows}
    return "full" in by_name and all(by_name["full"] <= v for k, v in by_name.items() if k != "full")


def write_ablation(rows: list[AblationRow], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "horizon", "mae", "rmse", "mape"])
        for r in ablation_table(rows):
            w.writerow([_fmt(v) for v in r])
    with open(out_dir / "ablation_timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "parameters", "train_seconds_per_epoch", "inference_seconds"])
        for r in rows:
            w.writerow([r.variant, r.num_parameters, f"{r.train_seconds_per_epoch:.3f}", f"{r.inference_seconds:.3f}"])
