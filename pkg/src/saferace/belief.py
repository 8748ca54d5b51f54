"""Sample-based Gaussian beliefs (mean and per-component spread over rollouts)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    samples: np.ndarray  # (n, d)
    mean: np.ndarray
    stddev: np.ndarray

    @classmethod
    def from_samples(cls, samples) -> "GaussianBelief":
        x = np.atleast_2d(np.asarray(samples, dtype=float))
        # shifted by the first sample: identical samples give exactly zero spread
        dev = x - x[0]
        mu = x[0] + dev.sum(axis=0) / len(x)
        sd = np.sqrt(((x - mu) ** 2).sum(axis=0) / len(x))
        return cls(x, mu, sd)

    @classmethod
    def point(cls, value, n: int = 1) -> "GaussianBelief":
        """A zero-spread belief made of n copies of ``value``."""
        return cls.from_samples(np.repeat(np.atleast_2d(np.asarray(value, dtype=float)), n, axis=0))

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def variance(self):
        return self.stddev**2
