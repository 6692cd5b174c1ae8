"""Utility functions and their convex conjugates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class UtilitySpec:
    """``kind`` is ``"log"``, ``"power"`` (``param`` = p) or ``"exponential"`` (``param`` = lambda)."""

    kind: str
    param: float | None = None

    def __post_init__(self):
        if self.kind == "log":
            object.__setattr__(self, "param", None)
        elif self.kind == "power":
            p = self.param
            if p is None or not (p < 1.0 and p != 0.0) or math.isnan(p):
                raise ValueError(f"power utility needs p in (-inf, 0) U (0, 1), got {p}")
        elif self.kind == "exponential":
            if self.param is None or not self.param > 0:
                raise ValueError(f"exponential utility needs lambda > 0, got {self.param}")
        else:
            raise ValueError(f"unknown utility kind {self.kind!r}")

    @classmethod
    def parse(cls, text):
        """Parse ``log``, ``power:0.5`` or ``exponential:1``."""
        name, _, arg = text.partition(":")
        name = name.strip().lower()
        if name in ("exp", "exponential"):
            return cls("exponential", float(arg or 1.0))
        if name == "power":
            return cls("power", float(arg))
        return cls(name)

    def label(self):
        return self.kind if self.param is None else f"{self.kind}:{self.param!r}"

    @property
    def bounded_below(self):
        return self.kind == "exponential" or (self.kind == "power" and self.param > 0)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            if self.kind == "log":
                return np.log(x)
            if self.kind == "power":
                return np.power(x, self.param) / self.param
            return -np.exp(-self.param * x)


def eval_conjugate(utility, y):
    """``V(y) = sup_{x >= 0} [U(x) - x y]`` in closed form.

    Returns ``+inf`` for ``y < 0`` and the limit value at ``y = 0``; NaN input
    raises :class:`DomainError`.
    """
    y = float(y)
    if math.isnan(y):
        raise DomainError("conjugate evaluated at NaN")
    if y < 0:
        return math.inf
    if utility.kind == "log":
        return math.inf if y == 0 else -math.log(y) - 1.0
    if utility.kind == "power":
        p = utility.param
        if y == 0:
            return math.inf if p > 0 else 0.0
        return (1.0 - p) / p * y ** (p / (p - 1.0))
    lam = utility.param
    if y == 0:
        return 0.0
    if y >= lam:
        # U(x) - x y is decreasing on x >= 0
        return -1.0
    r = y / lam
    return r * (math.log(r) - 1.0)


def conjugate_array(utility, y):
    """Vectorized :func:`eval_conjugate` for strictly positive ``y``."""
    y = np.asarray(y, dtype=float)
    if utility.kind == "log":
        return -np.log(y) - 1.0
    if utility.kind == "power":
        p = utility.param
        return (1.0 - p) / p * np.power(y, p / (p - 1.0))
    lam = utility.param
    r = np.minimum(y / lam, 1.0)
    return np.where(y >= lam, -1.0, r * (np.log(r) - 1.0))
