"""Named parameter store with deterministic, order-independent initialization.

Every parameter draws from its own RNG stream keyed by (seed, name), so the
values of any subset of parameters do not depend on which other parameters
exist.  Adding or removing an auxiliary module therefore leaves the rest of
the initialization bitwise unchanged.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .numerics import BatchNormState, Tensor


@dataclass(frozen=True)
class ParamSpec:
    shape: tuple[int, ...]
    init: str = "normal"  # normal | zeros | ones | const:<value>


def _name_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) with resampling outside +/- 2 std."""
    out = rng.standard_normal(size=shape, dtype=dtype)
    out *= std
    flat = out.reshape(-1)
    bad = np.flatnonzero(np.abs(flat) > 2.0 * std)
    while bad.size:
        fresh = rng.standard_normal(size=bad.size, dtype=dtype)
        fresh *= std
        flat[bad] = fresh
        bad = bad[np.abs(fresh) > 2.0 * std]
    return out


def init_parameter(name: str, spec: ParamSpec, seed: int, dtype) -> Tensor:
    if spec.init == "zeros":
        data = np.zeros(spec.shape, dtype=dtype)
    elif spec.init == "ones":
        data = np.ones(spec.shape, dtype=dtype)
    elif spec.init.startswith("const:"):
        data = np.full(spec.shape, float(spec.init.split(":", 1)[1]), dtype=dtype)
    elif spec.init == "normal":
        data = truncated_normal(_name_rng(seed, name), spec.shape, 0.02, dtype)
    else:
        raise ValueError(f"unknown init kind {spec.init!r} for {name}")
    return Tensor(data, requires_grad=True)


class Params:
    """Prefix-scoped view over a flat {name: Tensor} dictionary."""

    __slots__ = ("_store", "_prefix")

    def __init__(self, store: dict[str, Tensor], prefix: str = ""):
        self._store = store
        self._prefix = prefix

    def scope(self, suffix: str) -> "Params":
        return Params(self._store, self._prefix + suffix + ".")

    def __getitem__(self, key: str) -> Tensor:
        return self._store[self._prefix + key]

    def __contains__(self, key: str) -> bool:
        return self._prefix + key in self._store


class BnStates:
    """Prefix-scoped view over {name: BatchNormState}."""

    __slots__ = ("_store", "_prefix")

    def __init__(self, store: dict[str, BatchNormState], prefix: str = ""):
        self._store = store
        self._prefix = prefix

    def scope(self, suffix: str) -> "BnStates":
        return BnStates(self._store, self._prefix + suffix + ".")

    def __getitem__(self, key: str) -> BatchNormState:
        return self._store[self._prefix + key]
