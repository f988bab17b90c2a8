"""Robust losses on squared residuals.

Each loss maps a squared (already whitened) residual s >= 0 to rho(s) and
exposes rho'(s), which is the IRLS weight. All losses here are concave in s,
so reweighting gives a majorize-minimize step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TrivialLoss:
    def rho(self, s):
        return np.asarray(s, dtype=float)

    def weight(self, s):
        return np.ones_like(np.asarray(s, dtype=float))


@dataclass(frozen=True)
class TruncatedL2:
    """min(s, c^2); c is a residual magnitude in whitened units."""

    c: float = 5.0

    def rho(self, s):
        return np.minimum(np.asarray(s, dtype=float), self.c**2)

    def weight(self, s):
        return (np.asarray(s, dtype=float) <= self.c**2).astype(float)


@dataclass(frozen=True)
class Cauchy:
    """c^2 log(1 + s / c^2)."""

    c: float = 1.0

    def rho(self, s):
        c2 = self.c**2
        return c2 * np.log1p(np.asarray(s, dtype=float) / c2)

    def weight(self, s):
        return 1.0 / (1.0 + np.asarray(s, dtype=float) / self.c**2)


@dataclass(frozen=True)
class TruncatedSmoothL1:
    """Quadratic up to s = 1, then 2 sqrt(s) - 1, flat beyond s = s_max."""

    s_max: float = 64.0

    def _smooth(self, s):
        return np.where(s <= 1.0, s, 2.0 * np.sqrt(np.maximum(s, 1.0)) - 1.0)

    def rho(self, s):
        s = np.asarray(s, dtype=float)
        return np.minimum(self._smooth(s), self._smooth(np.asarray(self.s_max)))

    def weight(self, s):
        s = np.asarray(s, dtype=float)
        w = np.where(s <= 1.0, 1.0, 1.0 / np.sqrt(np.maximum(s, 1.0)))
        return np.where(s <= self.s_max, w, 0.0)
