"""Early-fusion, single-task (STL) and multi-task (MTL) late-fusion training.

All three regimes reduce to one routine that fits a trunk and a list of heads
on aligned mini-batches: early fusion is one head over the anchor-concatenated
fingerprint, STL is one trunk+head per anchor fitted independently, MTL is a
single trunk shared by one head per anchor.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .channel_sim import Dataset, Sample
from .errors import ConfigError, DataError, DomainError, TrainingError
from .fusion import UncertainEstimate
from .nn_core import (
    LOSS_OUTPUTS,
    AdamState,
    Head,
    ModelFile,
    Prediction,
    Trunk,
    adam_step,
    evaluate_loss,
    mcd_predict_batch,
    shared_loss_and_grads,
)

logger = logging.getLogger(__name__)

MODES = ("early", "stl", "mtl")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "mtl"
    loss: str = "nll"
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    reduced_lr: float = 1e-4
    patience: int = 100
    seed: int = 0
    trunk_widths: tuple[int, ...] = (128, 128)
    head_widths: tuple[int, ...] = (64, 64)
    dropout: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.loss not in LOSS_OUTPUTS:
            raise ConfigError(f"loss must be 'mse' or 'nll', got {self.loss!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.patience < self.epochs:
            raise ConfigError("patience must be smaller than the epoch budget")
        if not (self.lr > 0 and self.reduced_lr > 0):
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.trunk_widths:
            raise ConfigError("the trunk needs at least one layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        doc = dict(doc)
        for key in ("trunk_widths", "head_widths"):
            if key in doc:
                doc[key] = tuple(int(v) for v in doc[key])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk_widths"] = list(self.trunk_widths)
        d["head_widths"] = list(self.head_widths)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


class PlateauSchedule:
    """Drop the learning rate once, after ``patience`` epochs without a new
    best validation loss."""

    def __init__(self, lr: float, reduced_lr: float, patience: int):
        self.lr = lr
        self.reduced_lr = reduced_lr
        self.patience = patience
        self.best = np.inf
        self.wait = 0

    def step(self, val_loss: float) -> float:
        """Feed one epoch's validation loss; returns the rate for the next epoch."""
        if val_loss < self.best:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience and self.lr != self.reduced_lr:
                self.lr = self.reduced_lr
        return self.lr


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class ModelBundle:
    """Trained networks plus training history.

    ``trunks``/``heads``: early -> 1/1, stl -> N_B/N_B (pairwise), mtl -> 1/N_B.
    """

    mode: str
    loss: str
    anchor_ids: tuple[int, ...]
    trunks: list[Trunk]
    heads: list[Head]
    histories: list[list[EpochRecord]] = field(default_factory=list)
    config: TrainConfig | None = None
    optimizer: list[AdamState] | None = None
    initial_train_loss: float | None = None
    stored_val_loss: float | None = None

    @property
    def n_anchors(self) -> int:
        return len(self.anchor_ids)

    @property
    def n_params(self) -> int:
        return sum(t.n_params for t in self.trunks) + sum(h.n_params for h in self.heads)

    @property
    def val_loss(self) -> float:
        """Sum over the independently trained models of their best validation
        loss (the stored value for a bundle loaded from disk)."""
        if not self.histories:
            return self.stored_val_loss
        return float(sum(min(r.val_loss for r in h) for h in self.histories))

    def pairs(self):
        """(trunk, head) per estimator, in anchor order (a single pair for early)."""
        if self.mode == "stl":
            return list(zip(self.trunks, self.heads))
        return [(self.trunks[0], h) for h in self.heads]

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        per_anchor = self.mode == "stl"
        w.writerow((["anchor"] if per_anchor else []) + ["epoch", "train_loss", "val_loss", "lr"])
        for k, hist in enumerate(self.histories):
            for r in hist:
                prefix = [self.anchor_ids[k]] if per_anchor else []
                w.writerow(prefix + [r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])
        return buf.getvalue()

    def to_model_file(self) -> ModelFile:
        meta = {
            "anchor_ids": list(self.anchor_ids),
            "config": self.config.to_dict() if self.config else None,
            "val_loss": self.val_loss,
            "initial_train_loss": self.initial_train_loss,
        }
        return ModelFile(self.mode, self.loss, self.n_anchors, self.trunks, self.heads, self.optimizer, meta)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_model_file().to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> ModelBundle:
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read model bundle {path}: {exc}") from exc
        mf = ModelFile.from_bytes(data)
        ids = tuple(mf.meta.get("anchor_ids") or range(1, mf.n_anchors + 1))
        cfg = TrainConfig.from_dict(mf.meta["config"]) if mf.meta.get("config") else None
        return cls(mf.mode, mf.loss, ids, mf.trunks, mf.heads, [], cfg, mf.optimizer,
                   mf.meta.get("initial_train_loss"), mf.meta.get("val_loss"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_model_file().to_bytes()).hexdigest()


# -- input assembly ------------------------------------------------------------


def model_inputs(mode: str, fps: np.ndarray) -> list[np.ndarray]:
    """Per-estimator flattened inputs from (n, N_B, N_R, N_C, 2) fingerprints.

    Early fusion stacks all anchors along the antenna axis, which in C order
    is the same as flattening the anchor axis into the feature vector.
    """
    n = fps.shape[0]
    if mode == "early":
        return [np.ascontiguousarray(fps.reshape(n, -1), dtype=np.float32)]
    return [np.ascontiguousarray(fps[:, k].reshape(n, -1), dtype=np.float32) for k in range(fps.shape[1])]


def build_networks(cfg: TrainConfig, in_dim: int, anchor_ids, rng: np.random.Generator, dtype=np.float32):
    trunk = Trunk((in_dim, *cfg.trunk_widths), cfg.dropout, rng=rng, dtype=dtype)
    heads = [
        Head((trunk.out_dim, *cfg.head_widths, LOSS_OUTPUTS[cfg.loss]), cfg.dropout, anchor_id=a, rng=rng, dtype=dtype)
        for a in anchor_ids
    ]
    return trunk, heads


def _fit(trunk: Trunk, heads: list[Head], xs, y, xs_val, y_val, cfg: TrainConfig, rng: np.random.Generator, tag: str):
    # start read-outs at the label centroid so early steps do not chase the offset
    for head in heads:
        head.biases[-1][:2] = y.mean(axis=0)

    nets = [trunk, *heads]
    states = [AdamState.zeros(net.n_params, lr=cfg.lr, dtype=net.dtype) for net in nets]
    schedule = PlateauSchedule(cfg.lr, cfg.reduced_lr, cfg.patience)
    best = [net.params.copy() for net in nets]
    best_val = np.inf
    history: list[EpochRecord] = []
    initial = evaluate_loss(trunk, heads, xs, y, cfg.loss)
    n = len(y)

    for epoch in range(1, cfg.epochs + 1):
        lr = schedule.lr
        for st in states:
            st.lr = lr
        perm = rng.permutation(n)
        running, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss, g_trunk, g_heads = shared_loss_and_grads(trunk, heads, [x[idx] for x in xs], y[idx], cfg.loss, True, rng)
            if not np.isfinite(loss):
                raise TrainingError(f"{tag}: non-finite training loss at epoch {epoch}", last_good_epoch=epoch - 1)
            try:
                for net, g, st in zip(nets, [g_trunk, *g_heads], states):
                    adam_step(net.params, g, st)
            except TrainingError as exc:
                raise TrainingError(f"{tag}: {exc} at epoch {epoch}", last_good_epoch=epoch - 1) from None
            running += loss * len(idx)
            seen += len(idx)
        val = evaluate_loss(trunk, heads, xs_val, y_val, cfg.loss)
        if not np.isfinite(val):
            raise TrainingError(f"{tag}: non-finite validation loss at epoch {epoch}", last_good_epoch=epoch - 1)
        if val < best_val:
            best_val = val
            best = [net.params.copy() for net in nets]
        next_lr = schedule.step(val)
        history.append(EpochRecord(epoch, running / seen, val, next_lr))
        if epoch == 1 or epoch % 25 == 0 or epoch == cfg.epochs:
            logger.info("%s epoch %d train %.4f val %.4f lr %.0e", tag, epoch, running / seen, val, next_lr)

    for net, p in zip(nets, best):
        net.params[...] = p
    return history, states, initial


def _workers() -> int:
    try:
        return max(int(os.environ.get("POSFUSE_THREADS", "0")), 0)
    except ValueError:
        raise ConfigError("POSFUSE_THREADS must be an integer") from None


def train(dataset: Dataset, cfg: TrainConfig, workers: int | None = None) -> ModelBundle:
    """Train a bundle in the configured regime.

    Each independently trained estimator draws initial weights, shuffling and
    dropout masks from a generator keyed on ``(cfg.seed, a)`` with ``a`` the
    id of its first anchor. An STL anchor therefore trains bit-identically
    whether or not the other anchors are present, and MTL with one anchor
    reproduces STL. The parameters with the lowest validation loss are kept.

    Raises:
        DataError: empty splits or perturbed (dynamic) training samples.
        TrainingError: non-finite loss or gradient.
    """
    if len(dataset.splits["train"]) == 0 or len(dataset.splits["val"]) == 0:
        raise DataError("training needs non-empty train and validation splits")
    fit_idx = np.concatenate([dataset.splits["train"], dataset.splits["val"]])
    if np.any(dataset.tags[fit_idx] != 0):
        raise DataError("training and validation samples must come from the static scenario")

    xs = model_inputs(cfg.mode, dataset.inputs("train"))
    xs_val = model_inputs(cfg.mode, dataset.inputs("val"))
    y = dataset.labels("train")
    y_val = dataset.labels("val")
    ids = dataset.anchor_ids

    if cfg.mode == "early":
        groups = [[0]]
    elif cfg.mode == "stl":
        groups = [[k] for k in range(len(ids))]
    else:
        groups = [list(range(len(ids)))]

    def run(group):
        input_idx = group
        rng = np.random.default_rng([cfg.seed, ids[input_idx[0]]])
        head_ids = [0] if cfg.mode == "early" else [ids[k] for k in input_idx]
        trunk, heads = build_networks(cfg, xs[input_idx[0]].shape[1], head_ids, rng)
        tag = f"{cfg.mode}/{cfg.loss}" + (f"/anchor{ids[input_idx[0]]}" if cfg.mode == "stl" else "")
        hist, states, initial = _fit(trunk, heads, [xs[k] for k in input_idx], y,
                                     [xs_val[k] for k in input_idx], y_val, cfg, rng, tag)
        return trunk, heads, hist, states, initial

    workers = _workers() if workers is None else workers
    if workers > 0 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, groups))
    else:
        results = [run(g) for g in groups]

    trunks = [r[0] for r in results]
    heads = [h for r in results for h in r[1]]
    histories = [r[2] for r in results]
    optimizer = [st for r in results for st in r[3][:1]] + [st for r in results for st in r[3][1:]]
    return ModelBundle(cfg.mode, cfg.loss, ids, trunks, heads, histories, cfg, optimizer,
                       float(sum(r[4] for r in results)))


# -- prediction ----------------------------------------------------------------


@dataclass(frozen=True)
class PredictionSet:
    """MCD predictions for many samples: arrays of shape (n, K, 2) with K the
    number of estimators (N_B for late fusion, 1 for early fusion)."""

    estimator_ids: tuple[int, ...]
    mean: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray

    @property
    def combined(self) -> np.ndarray:
        return Prediction(self.mean, self.aleatoric, self.epistemic).combined

    def estimates(self, i: int) -> list[UncertainEstimate]:
        var = self.combined[i]
        return [UncertainEstimate(a, float(self.mean[i, k, 0]), float(self.mean[i, k, 1]),
                                  float(var[k, 0]), float(var[k, 1])) for k, a in enumerate(self.estimator_ids)]


def predict_dataset(bundle: ModelBundle, fps: np.ndarray, T: int = 30, seed: int = 0) -> PredictionSet:
    """MCD predictions for (n, N_B, N_R, N_C, 2) fingerprints."""
    if fps.ndim != 5 or fps.shape[1] != bundle.n_anchors:
        raise DomainError(f"bundle has {bundle.n_anchors} anchors, fingerprints have shape {fps.shape}")
    xs = model_inputs(bundle.mode, fps)
    ids = (0,) if bundle.mode == "early" else bundle.anchor_ids
    preds = []
    for a, (trunk, head), x in zip(ids, bundle.pairs(), xs):
        if x.shape[1] != trunk.in_dim:
            raise DomainError(f"fingerprint width {x.shape[1]} does not match model input {trunk.in_dim}")
        preds.append(mcd_predict_batch(trunk, head, x, T, np.random.SeedSequence([seed, a]).generate_state(1)[0]))
    return PredictionSet(
        ids,
        np.stack([p.mean for p in preds], axis=1),
        np.stack([p.aleatoric for p in preds], axis=1),
        np.stack([p.epistemic for p in preds], axis=1),
    )


def predict_all(bundle: ModelBundle, sample: Sample, T: int = 30, rng=0):
    """Per-anchor estimates (late fusion) or the single early-fusion estimate.

    MSE-trained heads have no variance output, so their variance is the
    epistemic part only.
    """
    if len(sample.fingerprints) != bundle.n_anchors:
        raise DomainError(f"sample has {len(sample.fingerprints)} fingerprints, bundle expects {bundle.n_anchors}")
    seed = int(rng.integers(2**63)) if isinstance(rng, np.random.Generator) else int(rng)
    fps = np.stack([fp.values for fp in sample.fingerprints])[None]
    est = predict_dataset(bundle, fps, T, seed).estimates(0)
    return est[0] if bundle.mode == "early" else est
