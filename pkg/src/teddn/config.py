"""Experiment files: JSON with strict key checking and dotted ``--set`` overrides.

Layout::

    {
      "dataset": {"path": "data/x.csv", "format": "csv", "steps_per_day": 288, "start_weekday": 0,
                  "ratios": [6, 2, 2]},
      "model": {...ModelConfig fields, num_nodes/channels default to the data...},
      "train": {...TrainConfig fields...},
      "variant": "full",
      "output_dir": "runs/x"
    }

Relative dataset paths resolve against the config file's directory. A relative
``output_dir`` resolves against ``$TEDDN_OUTPUT_ROOT`` when set, else the
working directory.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

from . import data as data_mod
from .errors import ConfigError, DataFormatError
from .model import VARIANTS, ModelConfig, variant
from .training import TrainConfig

OUTPUT_ROOT_ENV = "TEDDN_OUTPUT_ROOT"

DATASET_DEFAULTS = {"path": None, "format": "flatbin", "steps_per_day": 288, "start_weekday": 0, "ratios": [6, 2, 2]}
TOP_LEVEL = {"dataset", "model", "train", "variant", "output_dir"}
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key=value`` strings; the key is a dotted path, the value JSON or a bare string."""
    out = copy.deepcopy(raw)
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        parts = key.split(".")
        node = out
        for part in parts[:-1]:
            if part not in ("dataset", "model", "train") or node is not out:
                raise ConfigError(f"unknown config key {key!r}")
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_value(value)
        check_keys(out, key)
    return out


def check_keys(raw: dict, context: str | None = None) -> None:
    """Reject unknown keys at every level, naming the first offender."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    where = f" (from {context!r})" if context else ""
    for key in sorted(set(raw) - TOP_LEVEL):
        raise ConfigError(f"unknown config key {key!r}{where}")
    for block, known in (("dataset", set(DATASET_DEFAULTS)), ("model", _MODEL_KEYS), ("train", _TRAIN_KEYS)):
        section = raw.get(block, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config block {block!r} must be an object")
        for key in sorted(set(section) - known):
            raise ConfigError(f"unknown config key '{block}.{key}'{where}")


@dataclass
class Experiment:
    dataset: dict
    model: dict
    train: TrainConfig
    variant: str
    output_dir: Path | None
    base_dir: Path

    def dataset_paths(self) -> list[Path]:
        path = self.dataset["path"]
        if path is None:
            raise ConfigError("dataset.path is required")
        paths = path if isinstance(path, list) else [path]
        return [Path(p) if Path(p).is_absolute() else self.base_dir / p for p in paths]

    def load_series(self) -> data_mod.TrafficSeries:
        fmt = self.dataset["format"]
        paths = self.dataset_paths()
        for p in paths:
            probe = p.with_suffix(".bin") if fmt == "flatbin" else p
            if not probe.exists():
                raise DataFormatError(f"dataset file not found: {probe}")
        if fmt == "flatbin":
            if len(paths) != 1:
                raise ConfigError("flatbin datasets take a single path")
            return data_mod.load_flatbin(paths[0])
        return data_mod.load(paths if len(paths) > 1 else paths[0], fmt, self.dataset["steps_per_day"],
                             self.dataset["start_weekday"])

    def load_data(self) -> data_mod.ForecastData:
        series = self.load_series()
        cfg = self.model_config(series)
        return data_mod.prepare(series, cfg.input_steps, cfg.output_steps, tuple(self.dataset["ratios"]))

    def model_config(self, series: data_mod.TrafficSeries, name: str | None = None) -> ModelConfig:
        fields = dict(self.model)
        T, N, C = series.shape
        fields.setdefault("num_nodes", N)
        fields.setdefault("channels", C)
        fields.setdefault("steps_per_day", series.steps_per_day)
        if fields["num_nodes"] != N or fields["channels"] != C:
            raise ConfigError(f"model expects {fields['num_nodes']} nodes x {fields['channels']} channels "
                              f"but the dataset has {N} x {C}")
        return variant(ModelConfig.from_dict(fields), name or self.variant)

    def effective(self) -> dict:
        """Fully resolved config; reloading it reproduces the run."""
        ds = dict(self.dataset)
        paths = [str(p.resolve()) for p in self.dataset_paths()] if ds["path"] is not None else None
        ds["path"] = paths if isinstance(self.dataset["path"], list) else (paths[0] if paths else None)
        return {
            "dataset": ds,
            "model": dict(self.model),
            "train": self.train.to_dict(),
            "variant": self.variant,
            "output_dir": str(self.output_dir) if self.output_dir is not None else None,
        }

    def write_effective(self, out_dir=None) -> Path:
        out = Path(out_dir or self.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "config.json"
        path.write_text(json.dumps(self.effective(), indent=1, sort_keys=True) + "\n")
        return path


def resolve_output(path) -> Path | None:
    if path is None:
        return None
    path = Path(path)
    if path.is_absolute():
        return path
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return (Path(root) / path) if root else path


def from_dict(raw: dict, base_dir=".", overrides=None) -> Experiment:
    check_keys(raw)
    raw = apply_overrides(raw, overrides)
    dataset = {**DATASET_DEFAULTS, **raw.get("dataset", {})}
    if dataset["format"] not in ("csv", "flatbin"):
        raise ConfigError(f"dataset.format must be 'csv' or 'flatbin', got {dataset['format']!r}")
    ratios = dataset["ratios"]
    if not isinstance(ratios, list) or len(ratios) != 3 or not all(isinstance(r, (int, float)) and r > 0
                                                                   for r in ratios):
        raise ConfigError(f"dataset.ratios must be three positive numbers, got {ratios!r}")
    name = raw.get("variant", "full")
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {list(VARIANTS)}")
    try:
        train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from None
    return Experiment(dataset, dict(raw.get("model", {})), train_cfg, name, resolve_output(raw.get("output_dir")),
                      Path(base_dir))


def load(path, overrides=None) -> Experiment:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(raw, path.parent, overrides)
