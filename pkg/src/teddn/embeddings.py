"""Learnable time-slot and node embedding tables."""

from __future__ import annotations

import math

import numpy as np

from . import params as init
from .errors import ConfigError
from .tensor import Tensor, gather_rows

DAYS_PER_WEEK = 7


def time_index(step, steps_per_day: int, start_weekday: int = 0):
    """Map global row index(es) to ``(time_of_day_slot, day_of_week_slot)``.

    Works on Python ints and on integer arrays alike.
    """
    if np.any(np.asarray(step) < 0):
        raise ValueError("step must be non-negative")
    tod = step % steps_per_day
    dow = (start_weekday + step // steps_per_day) % DAYS_PER_WEEK
    return tod, dow


class TimeTables:
    def __init__(self, steps_per_day: int, dim: int, rng: np.random.Generator, start_weekday: int = 0, prefix="time"):
        if steps_per_day < 1 or dim < 1:
            raise ConfigError("steps_per_day and embedding dim must be >= 1")
        if not 0 <= start_weekday < DAYS_PER_WEEK:
            raise ConfigError(f"start_weekday must lie in [0, 7), got {start_weekday}")
        self.steps_per_day = steps_per_day
        self.start_weekday = start_weekday
        bound = 1.0 / math.sqrt(dim)
        self.day_table = init.uniform(rng, (steps_per_day, dim), bound, f"{prefix}.day")
        self.week_table = init.uniform(rng, (DAYS_PER_WEEK, dim), bound, f"{prefix}.week")

    @property
    def dim(self) -> int:
        return self.day_table.shape[1]

    def index(self, step):
        return time_index(step, self.steps_per_day, self.start_weekday)

    def parameters(self):
        return [self.day_table, self.week_table]


class NodeTable:
    def __init__(self, num_nodes: int, dim: int, rng: np.random.Generator, name="node.embedding"):
        if num_nodes < 1 or dim < 1:
            raise ConfigError("node count and embedding dim must be >= 1")
        self.table = init.uniform(rng, (num_nodes, dim), 1.0 / math.sqrt(dim), name)

    def parameters(self):
        return [self.table]


def lookup(tables: TimeTables, node_table: NodeTable, tod, dow) -> tuple[Tensor, Tensor, Tensor]:
    """Gather the time-of-day rows, day-of-week rows, and the full node table."""
    return gather_rows(tables.day_table, tod), gather_rows(tables.week_table, dow), node_table.table
