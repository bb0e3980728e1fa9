"""Positioning error, sparsification / AUSE and integrity-risk metrics."""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DomainError

logger = logging.getLogger(__name__)

CDF_PERCENTILES = (50, 90, 95, 99)


class UnreliableThresholdWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ErrorRecord:
    """Per-sample Euclidean errors and uncertainty norms, both (n,)."""

    errors: np.ndarray
    uncertainty: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.errors, dtype=float)
        u = np.asarray(self.uncertainty, dtype=float)
        if e.shape != u.shape or e.ndim != 1:
            raise DomainError("errors and uncertainties must be 1-D arrays of equal length")
        if np.any(e < 0) or np.any(u < 0):
            raise DomainError("errors and uncertainty norms must be non-negative")
        object.__setattr__(self, "errors", e)
        object.__setattr__(self, "uncertainty", u)

    def __len__(self) -> int:
        return len(self.errors)

    @classmethod
    def from_estimates(cls, est: np.ndarray, truth: np.ndarray, variances: np.ndarray) -> ErrorRecord:
        """``est``/``truth``/``variances`` of shape (n, 2); the uncertainty is the
        norm of the per-coordinate standard deviations."""
        err = np.linalg.norm(np.asarray(est) - np.asarray(truth), axis=1)
        unc = np.sqrt(np.sum(np.asarray(variances), axis=1))
        return cls(err, unc)


@dataclass(frozen=True)
class SparsificationCurves:
    oracle: np.ndarray
    sparsification: np.ndarray
    ause: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "O_N", "S_N", "S_N_minus_O_N"])
        for n, (o, s) in enumerate(zip(self.oracle, self.sparsification), start=1):
            w.writerow([n, repr(float(o)), repr(float(s)), repr(float(s - o))])
        return buf.getvalue()


@dataclass(frozen=True)
class IRConfig:
    gamma: float
    alert_limit: float = 1.0

    def __post_init__(self):
        if not self.alert_limit > 0:
            raise DomainError("alert limit must be positive")
        if not self.gamma > 0:
            raise DomainError("threshold gamma must be positive")


def mean_error(records: ErrorRecord) -> tuple[float, dict[int, float]]:
    """Mean Euclidean error and the error CDF at the 50/90/95/99th percentiles."""
    if len(records) == 0:
        raise DomainError("no records")
    e = records.errors
    return float(np.mean(e)), {p: float(np.percentile(e, p)) for p in CDF_PERCENTILES}


def _residual_curve(ordered: np.ndarray, squared: bool) -> np.ndarray:
    """sqrt(mean of ordered[N:]) for N = 1 .. n-1."""
    n = len(ordered)
    if n < 2:
        raise DomainError("need at least two test samples")
    vals = ordered ** 2 if squared else ordered
    # tail sums via reversed cumulative sum: tail[N] = sum(vals[N:])
    tail = np.cumsum(vals[::-1])[::-1]
    counts = n - np.arange(1, n)
    return np.sqrt(np.maximum(tail[1:], 0.0) / counts)


def oracle_curve(records: ErrorRecord, squared: bool = False) -> np.ndarray:
    """Residual curve when samples are removed in order of decreasing error.

    By default the raw distances are averaged under the square root; with
    ``squared=True`` the curve is the RMSE of the remaining samples.
    """
    return _residual_curve(np.sort(records.errors)[::-1], squared)


def uncertainty_order(records: ErrorRecord) -> np.ndarray:
    """Indices by decreasing uncertainty; ties keep their original order."""
    return np.argsort(-records.uncertainty, kind="stable")


def sparsification_curve(records: ErrorRecord, squared: bool = False) -> np.ndarray:
    return _residual_curve(records.errors[uncertainty_order(records)], squared)


def ause(records: ErrorRecord, squared: bool = False) -> float:
    return sparsification(records, squared).ause


def sparsification(records: ErrorRecord, squared: bool = False) -> SparsificationCurves:
    o = oracle_curve(records, squared)
    s = sparsification_curve(records, squared)
    return SparsificationCurves(o, s, float(np.sum(s - o) / (len(records) - 1)))


def _newton_logistic(u: np.ndarray, labels: np.ndarray, max_iter: int = 50, tol: float = 1e-10):
    """Maximum-likelihood (intercept, slope) of P(label | u); returns (coef, converged)."""
    X = np.column_stack([np.ones_like(u), u])
    beta = np.zeros(2)
    for _ in range(max_iter):
        z = X @ beta
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        grad = X.T @ (labels - p)
        w = p * (1.0 - p)
        hess = (X * w[:, None]).T @ X
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return beta, False
        beta = beta + step
        if not np.all(np.isfinite(beta)):
            return beta, False
        if np.max(np.abs(step)) < tol * (1.0 + np.max(np.abs(beta))):
            return beta, True
    return beta, False


def _best_split(u: np.ndarray, labels: np.ndarray) -> float:
    """Threshold minimising misclassifications of the rule ``label = u > t``;
    returns the midpoint of the widest optimal gap."""
    order = np.argsort(u, kind="stable")
    us, ls = u[order], labels[order]
    # errors if threshold sits below index i: positives before i + negatives from i on
    pos_before = np.concatenate([[0], np.cumsum(ls)])
    neg_after = np.concatenate([np.cumsum((1 - ls)[::-1])[::-1], [0]])
    errs = pos_before + neg_after
    cand = np.flatnonzero(errs == errs.min())
    cand = cand[(cand > 0) & (cand < len(us))] if np.any((cand > 0) & (cand < len(us))) else cand
    gaps = [(us[i] - us[i - 1]) if 0 < i < len(us) else -1.0 for i in cand]
    i = int(cand[int(np.argmax(gaps))])
    if i == 0:
        return float(us[0])
    if i == len(us):
        return float(us[-1])
    return float(0.5 * (us[i - 1] + us[i]))


def fit_threshold(records: ErrorRecord, alert_limit: float = 1.0) -> float:
    """Uncertainty threshold at which a 1-D logistic model predicts a 50 %
    chance that the error exceeds the alert limit.

    Fitted by Newton iterations (cap 50, tolerance 1e-10) on standardised
    uncertainties. Separable data make the likelihood unbounded; in that case,
    or when Newton fails to converge, the threshold falls back to the
    misclassification-minimising split.

    Raises:
        DataError: if all errors fall on one side of the alert limit.
    """
    labels = (records.errors > alert_limit).astype(float)
    if labels.min() == labels.max():
        raise DataError(
            "threshold fit needs errors both above and below the alert limit; "
            "widen the evaluation set"
        )
    u = records.uncertainty
    mu, sd = u.mean(), u.std()
    if sd == 0:
        warnings.warn("all uncertainties are equal; threshold is uninformative", UnreliableThresholdWarning, stacklevel=2)
        return float(mu)
    (b0, b1), converged = _newton_logistic((u - mu) / sd, labels)
    if not converged or abs(b1) > 50:
        logger.info("logistic fit did not converge (slope %.3g); using best split", b1)
        return _best_split(u, labels)
    # weak slope in standard units means the boundary is not meaningful
    if b1 <= 0 or abs(b1) < 0.1:
        warnings.warn(
            f"uncertainty barely predicts alert-limit exceedance (slope {b1:.3g} per sd); threshold unreliable",
            UnreliableThresholdWarning,
            stacklevel=2,
        )
    return float(mu - sd * b0 / b1) if b1 != 0 else float("inf")


def integrity_risk(records: ErrorRecord, cfg: IRConfig) -> float:
    """Fraction of samples whose error exceeds the alert limit while no warning
    fires (uncertainty norm at or below the threshold)."""
    if len(records) == 0:
        raise DomainError("no records")
    silent = records.uncertainty <= cfg.gamma
    return float(np.count_nonzero(silent & (records.errors > cfg.alert_limit)) / len(records))
