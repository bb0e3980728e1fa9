"""Monte-Carlo dropout prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError
from .network import Head, Trunk, flatten_input

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class Prediction:
    """Mean position and per-coordinate variances; arrays of shape (2,) or (n, 2)."""

    mean: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray

    @property
    def combined(self) -> np.ndarray:
        # variance-domain sum of the two parts
        return np.maximum(self.epistemic + self.aleatoric, VARIANCE_FLOOR)

    def __getitem__(self, idx) -> Prediction:
        return Prediction(self.mean[idx], self.aleatoric[idx], self.epistemic[idx])


def pass_generator(base_seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng([base_seed, t])


def _base_seed(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(2**63))
    return int(rng)


def population_variance(samples: np.ndarray, axis: int = 0) -> np.ndarray:
    """``mean(x^2) - mean(x)^2`` evaluated in centred form, never negative."""
    mu = samples.mean(axis=axis, keepdims=True)
    return np.maximum(np.mean((samples - mu) ** 2, axis=axis), 0.0)


def mcd_passes(trunk: Trunk, head: Head, x: np.ndarray, T: int, rng) -> np.ndarray:
    """Raw outputs of ``T`` dropout passes, shape (T, n, outputs).

    Pass ``t`` draws its masks from a generator keyed on ``(base, t)``, so the
    passes could run in any order with the same result.
    """
    if T < 1:
        raise DomainError(f"need T >= 1 forward passes, got {T}")
    base = _base_seed(rng)
    outs = np.empty((T, len(x), head.out_dim), dtype=np.float64)
    for t in range(T):
        g = pass_generator(base, t)
        h, _ = trunk.forward(x, True, g)
        o, _ = head.forward(h, True, g)
        outs[t] = o
    return outs


def summarise_passes(outs: np.ndarray) -> Prediction:
    pos = outs[..., :2]
    mean = pos.mean(axis=0)
    epistemic = population_variance(pos, axis=0)
    if outs.shape[-1] == 4:
        aleatoric = np.exp(outs[..., 2:]).mean(axis=0)
    else:
        aleatoric = np.zeros_like(mean)
    return Prediction(mean, aleatoric, epistemic)


def mcd_predict_batch(trunk: Trunk, head: Head, fps, T: int, rng, batch: int = 4096) -> Prediction:
    """:func:`mcd_predict` over a batch of fingerprints; arrays of shape (n, 2)."""
    x = flatten_input(fps)
    if x.shape[1] != trunk.in_dim:
        raise DomainError(f"fingerprint has {x.shape[1]} features, trunk expects {trunk.in_dim}")
    base = _base_seed(rng)
    parts = []
    for k, start in enumerate(range(0, len(x), batch)):
        outs = mcd_passes(trunk, head, x[start:start + batch], T, base + k)
        parts.append(summarise_passes(outs))
    return Prediction(
        np.concatenate([p.mean for p in parts]),
        np.concatenate([p.aleatoric for p in parts]),
        np.concatenate([p.epistemic for p in parts]),
    )


def mcd_predict(trunk: Trunk, head: Head, fp, T: int, rng) -> Prediction:
    """Mean position and aleatoric / epistemic / combined variances from ``T``
    stochastic passes with dropout kept on.

    Aleatoric variance is the pass-average of ``exp(s)`` (zero for a
    two-output head); epistemic variance is the population variance of the
    per-pass positions.
    """
    return mcd_predict_batch(trunk, head, fp, T, rng)[0]
