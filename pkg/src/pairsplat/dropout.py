"""Per-primitive Bernoulli dropout masks and survivor opacity compensation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidRateError
from .scene import make_rng


@dataclass(frozen=True)
class DropoutMask:
    keep: np.ndarray
    rate: float
    seed: int | None = None

    def __len__(self) -> int:
        return self.keep.shape[0]

    @classmethod
    def ones(cls, n: int) -> "DropoutMask":
        return cls(np.ones(n, dtype=bool), 0.0)


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate <= 1.0:
        raise InvalidRateError(f"dropout rate must lie in [0, 1], got {rate}")


def sample_mask(n: int, rate: float, rng: np.random.Generator, seed: int | None = None) -> DropoutMask:
    """Keep each of ``n`` primitives independently with probability ``1 - rate``.

    Every call consumes ``n`` uniforms from ``rng``, so consecutive calls give
    independent masks and re-seeding replays the sequence.
    """
    _check_rate(rate)
    if n < 0:
        raise ValueError("n must be >= 0")
    u = rng.random(n)
    return DropoutMask(u >= rate, float(rate), seed)


def mask_rng(seed: int, iteration: int) -> np.random.Generator:
    """Mask generator for one training iteration (independent stream per iteration)."""
    return make_rng(seed, 10, iteration)


def compensation_factor(rate: float, enabled: bool = True) -> float:
    """Opacity multiplier ``1 / (1 - rate)`` applied to survivors when enabled."""
    if not enabled:
        return 1.0
    _check_rate(rate)
    if rate >= 1.0:
        raise InvalidRateError("compensation is undefined for rate = 1")
    return 1.0 / (1.0 - rate)


def rate_at(t: int, rate: float, iterations: int, decay: bool = False) -> float:
    """Dropout rate at iteration ``t``; with ``decay`` it falls linearly to zero at the end."""
    if not decay:
        return rate
    return rate * max(0.0, 1.0 - t / max(iterations, 1))
