"""Flat parameter dictionaries keyed by dotted names, plus init helpers."""
from __future__ import annotations

from typing import Dict, Mapping

import numpy as np

Params = Dict[str, np.ndarray]


def scoped(params: Mapping[str, np.ndarray], prefix: str) -> Params:
    """View of every entry under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def prefixed(grads: Mapping[str, np.ndarray], prefix: str) -> Params:
    return {f"{prefix}.{k}": v for k, v in grads.items()}


def accumulate(into: Params, grads: Mapping[str, np.ndarray]) -> Params:
    for k, g in grads.items():
        if k in into:
            into[k] = into[k] + g
        else:
            into[k] = g
    return into


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def he(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
