"""Evaluation protocol: MCD predictions, fusion, error and integrity metrics.

A report covers one trained bundle on the test split of one dataset. For late
fusion every requested fusion method gets a row; early fusion produces a single
estimate and is reported under the method name ``"none"``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .channel_sim import Dataset
from .errors import ConfigError, DataError
from .fusion import DEFAULT_LAMBDA, fuse_arrays
from .metrics import (
    ErrorRecord,
    IRConfig,
    SparsificationCurves,
    UnreliableThresholdWarning,
    fit_threshold,
    integrity_risk,
    mean_error,
    sparsification,
)
from .training import ModelBundle, PredictionSet, predict_dataset

logger = logging.getLogger(__name__)

FUSION_METHODS = ("avg", "ivw", "sp")
EARLY_METHOD = "none"


@dataclass(frozen=True)
class EvalConfig:
    fusions: tuple[str, ...] = FUSION_METHODS
    T: int = 30
    lam: float = DEFAULT_LAMBDA
    alert_limit: float = 1.0
    seed: int = 0
    integrity: bool = True

    def __post_init__(self):
        bad = [f for f in self.fusions if f not in FUSION_METHODS]
        if bad or not self.fusions:
            raise ConfigError(f"fusion methods must be a non-empty subset of {FUSION_METHODS}, got {list(self.fusions)}")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if not self.lam > 0:
            raise ConfigError("lambda must be positive")
        if not self.alert_limit > 0:
            raise ConfigError("alert limit must be positive")

    def methods_for(self, mode: str) -> tuple[str, ...]:
        return (EARLY_METHOD,) if mode == "early" else self.fusions


@dataclass
class MethodResult:
    method: str
    me: float
    percentiles: dict[int, float]
    ause: float | None
    gamma: float | None
    ir: float | None
    curves: SparsificationCurves | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "me": self.me,
            "percentiles": {str(k): v for k, v in self.percentiles.items()},
            "ause": self.ause,
            "gamma": self.gamma,
            "ir": self.ir,
            "notes": self.notes,
        }


@dataclass
class Report:
    mode: str
    loss: str
    scenario: str
    blocked: tuple[int, ...]
    per_anchor_me: dict[int, float]
    methods: dict[str, MethodResult]
    provenance: dict

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "loss": self.loss,
            "scenario": self.scenario,
            "blocked": list(self.blocked),
            "per_anchor_me": {str(k): v for k, v in self.per_anchor_me.items()},
            "methods": {k: v.to_dict() for k, v in self.methods.items()},
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def check_compatible(bundle: ModelBundle, dataset: Dataset) -> None:
    if tuple(bundle.anchor_ids) != tuple(dataset.anchor_ids):
        raise DataError(f"bundle anchors {list(bundle.anchor_ids)} do not match dataset anchors {list(dataset.anchor_ids)}")
    want = bundle.trunks[0].in_dim
    per = dataset.n_antennas * dataset.n_subcarriers * 2
    have = per * dataset.n_anchors if bundle.mode == "early" else per
    if want != have:
        raise DataError(f"bundle expects {want} input features, dataset provides {have}")


def fused(preds: PredictionSet, method: str, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """(n, 2) positions and variances for one fusion method."""
    if method == EARLY_METHOD:
        return preds.mean[:, 0], preds.combined[:, 0]
    return fuse_arrays(method, preds.mean, preds.combined, lam)


def _records(preds: PredictionSet, truth: np.ndarray, cfg: EvalConfig, mode: str) -> dict[str, ErrorRecord]:
    out = {}
    for m in cfg.methods_for(mode):
        mean, var = fused(preds, m, cfg.lam)
        out[m] = ErrorRecord.from_estimates(mean, truth, var)
    return out


def _has_uncertainty(method: str) -> bool:
    # averaging assigns the same variance to every sample
    return method != "avg"


def evaluate(bundle: ModelBundle, dataset: Dataset, cfg: EvalConfig = EvalConfig(),
             static_reference: Dataset | None = None) -> Report:
    """Evaluate ``bundle`` on the test split of ``dataset``.

    The integrity threshold is fitted on the static reference (the dataset
    itself when it is static and no reference is given). When the reference
    has no errors above the alert limit the threshold is undefined; gamma and
    IR are then reported as null with a note.

    Raises:
        ConfigError: integrity requested on dynamic data without a static reference.
        DataError: bundle and datasets are incompatible.
    """
    check_compatible(bundle, dataset)
    changed = tuple(sorted(dataset.changed_anchors))
    if cfg.integrity:
        if static_reference is None:
            if changed:
                raise ConfigError("integrity risk on dynamic data needs a static reference dataset (--static)")
            static_reference = dataset
        check_compatible(bundle, static_reference)
        if static_reference.changed_anchors:
            raise DataError("the integrity reference dataset must be static")

    truth = dataset.labels("test")
    if len(truth) < 2:
        raise DataError("evaluation needs at least two test samples")
    preds = predict_dataset(bundle, dataset.inputs("test"), cfg.T, cfg.seed)
    records = _records(preds, truth, cfg, bundle.mode)

    ref_records = None
    if cfg.integrity:
        if static_reference is dataset:
            ref_records = records
        else:
            ref_preds = predict_dataset(bundle, static_reference.inputs("test"), cfg.T, cfg.seed)
            ref_records = _records(ref_preds, static_reference.labels("test"), cfg, bundle.mode)

    per_anchor = {}
    if bundle.mode != "early":
        err = np.linalg.norm(preds.mean - truth[:, None, :], axis=2).mean(axis=0)
        per_anchor = {a: float(e) for a, e in zip(bundle.anchor_ids, err)}

    methods = {}
    for m, rec in records.items():
        me, pct = mean_error(rec)
        res = MethodResult(m, me, pct, None, None, None)
        if _has_uncertainty(m):
            res.curves = sparsification(rec)
            res.ause = res.curves.ause
            if ref_records is not None:
                _integrity(res, rec, ref_records[m], cfg.alert_limit)
        methods[m] = res

    provenance = {
        "version": __version__,
        "config_hash": bundle.config.digest() if bundle.config else None,
        "bundle_hash": bundle.digest(),
        "dataset_hash": dataset.content_hash(),
        "static_reference_hash": static_reference.content_hash() if static_reference is not None else None,
        "seed": cfg.seed,
        "train_seed": bundle.config.seed if bundle.config else None,
        "T": cfg.T,
        "lambda": cfg.lam,
        "alert_limit": cfg.alert_limit,
        "blocked": list(changed),
        "n_test": int(len(truth)),
    }
    return Report(bundle.mode, bundle.loss, dataset.scenario_name, changed, per_anchor, methods, provenance)


def _integrity(res: MethodResult, rec: ErrorRecord, ref: ErrorRecord, alert_limit: float) -> None:
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", UnreliableThresholdWarning)
            gamma = fit_threshold(ref, alert_limit)
    except DataError as exc:
        res.notes.append(f"no threshold: {exc}")
        logger.warning("%s: %s", res.method, exc)
        return
    for w in caught:
        res.notes.append(str(w.message))
    if not (np.isfinite(gamma) and gamma > 0):
        res.notes.append(f"threshold {gamma!r} is not a positive finite value")
        return
    res.gamma = gamma
    res.ir = integrity_risk(rec, IRConfig(gamma, alert_limit))
