"""Parameter initializers."""

import math

import numpy as np

from .tensor import Parameter, get_default_dtype


def uniform(rng: np.random.Generator, shape, bound: float, name: str) -> Parameter:
    data = rng.uniform(-bound, bound, size=shape)
    return Parameter(data.astype(get_default_dtype()), name=name)


def fan_in(rng: np.random.Generator, shape, name: str) -> Parameter:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = shape[0]."""
    return uniform(rng, shape, 1.0 / math.sqrt(shape[0]), name)


def constant(shape, value: float, name: str) -> Parameter:
    return Parameter(np.full(shape, value, dtype=get_default_dtype()), name=name)
