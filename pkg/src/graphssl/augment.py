"""Weak and strong stochastic views of vector inputs.

Weak: small additive gaussian noise. Strong: per-sample multiplicative scale
jitter, larger gaussian noise, then independent coordinate dropout. All
randomness comes from the caller's Generator, so views are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class AugmentPolicy:
    weak_noise_sigma: float = 0.05
    strong_noise_sigma: float = 0.2
    strong_dropout_rate: float = 0.1
    strong_scale_jitter: float = 0.1

    def __post_init__(self):
        if self.weak_noise_sigma < 0.0 or self.strong_noise_sigma < 0.0:
            raise ValidationError("noise sigmas must be non-negative")
        if self.strong_noise_sigma < self.weak_noise_sigma:
            raise ValidationError(
                f"strong noise ({self.strong_noise_sigma}) must be >= weak noise ({self.weak_noise_sigma})"
            )
        if not 0.0 <= self.strong_dropout_rate < 1.0:
            raise ValidationError(f"dropout rate must be in [0, 1), got {self.strong_dropout_rate}")
        if self.strong_scale_jitter < 0.0:
            raise ValidationError("scale jitter must be non-negative")


def weak_view(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x + rng.normal(0.0, policy.weak_noise_sigma, size=x.shape)


def strong_view(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    j = policy.strong_scale_jitter
    scales = 1.0 + rng.uniform(-j, j, size=(x.shape[0], 1)) if x.ndim == 2 else 1.0 + rng.uniform(-j, j)
    out = x * scales
    out = out + rng.normal(0.0, policy.strong_noise_sigma, size=x.shape)
    keep = rng.random(size=x.shape) >= policy.strong_dropout_rate
    return out * keep
