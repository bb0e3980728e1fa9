"""Synthetic fingerprint datasets and the ``PFDS`` binary container.

Container layout (little-endian)::

    b"PFDS"  u16 version  u32 N_B  u32 N_R  u32 N_C  u32 n_samples
    u32[N_B]                       anchor ids
    n_samples x record:            f64 x, f64 y, u8 scenario tag,
                                   f32[N_B, N_R, N_C, 2] fingerprints
                                   (anchor-major, antenna, subcarrier, plane last)
    u32 n_train, u32[n_train]      split indices
    u32 n_val,   u32[n_val]
    u32 n_test,  u32[n_test]
    32 bytes                       environment digest (zeros for imported data)

The scenario tag is 0 for an unmodified sample and otherwise a bitmask of the
anchor *indices* whose strongest path was attenuated (bit k = k-th anchor).
"""

from __future__ import annotations

import hashlib
import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DataError
from .csi import Fingerprint, NormStats, angle_delay, angle_delay_inverse, attenuate_peak_block, stack_and_normalise, synth_channels
from .environment import Environment

MAGIC = b"PFDS"
VERSION = 1
_POSITION_KEY = 0x905171
_HEADER = struct.Struct("<4sHIIII")


@dataclass(frozen=True)
class ScenarioSpec:
    """Static when ``changed`` is empty; otherwise the anchors (by id) whose
    strongest path is attenuated in the deployment (test) split."""

    changed: frozenset[int] = frozenset()
    atten_db: float = 20.0
    window: int = 3

    @property
    def is_static(self) -> bool:
        return not self.changed

    @property
    def name(self) -> str:
        if self.is_static:
            return "static"
        return "dynamic-" + "-".join(str(a) for a in sorted(self.changed))

    @classmethod
    def parse(cls, text: str) -> ScenarioSpec:
        """``"static"`` or ``"dynamic:1,2"``."""
        text = text.strip()
        if text == "static":
            return cls()
        kind, _, ids = text.partition(":")
        if kind != "dynamic" or not ids:
            raise ConfigError(f"scenario must be 'static' or 'dynamic:<id>[,<id>...]', got {text!r}")
        try:
            return cls(frozenset(int(v) for v in ids.split(",")))
        except ValueError as exc:
            raise ConfigError(f"bad anchor id in scenario {text!r}") from exc

    def validate(self, env) -> list[int]:
        """Anchor indices of the changed anchors; ConfigError for unknown ids."""
        idx = sorted(env.anchor_index(a) for a in self.changed)
        if idx and idx[-1] >= 8:
            raise ConfigError("the scenario tag can flag at most the first 8 anchors")
        return idx


@dataclass(frozen=True)
class Sample:
    position: np.ndarray
    fingerprints: tuple[Fingerprint, ...]
    changed: frozenset[int]

    @property
    def scenario(self) -> str:
        return "static" if not self.changed else "dynamic"


@dataclass
class Dataset:
    """Positions, per-anchor fingerprints (n, N_B, N_R, N_C, 2) and split indices."""

    anchor_ids: tuple[int, ...]
    positions: np.ndarray
    fingerprints: np.ndarray
    tags: np.ndarray
    splits: dict[str, np.ndarray]
    env_digest: bytes = bytes(32)
    norm: NormStats | None = field(default=None, compare=False)

    def __post_init__(self):
        n = len(self.positions)
        if self.fingerprints.ndim != 5 or self.fingerprints.shape[0] != n or self.fingerprints.shape[-1] != 2:
            raise DataError(f"fingerprints must have shape (n, N_B, N_R, N_C, 2), got {self.fingerprints.shape}")
        if self.fingerprints.shape[1] != len(self.anchor_ids):
            raise DataError("fingerprint count per sample must equal the anchor count")
        if len(set(self.anchor_ids)) != len(self.anchor_ids) or any(not 0 <= a < 2**32 for a in self.anchor_ids):
            raise DataError(f"anchor ids must be unique non-negative 32-bit integers, got {list(self.anchor_ids)}")
        if len(self.tags) != n:
            raise DataError("one scenario tag per sample required")
        seen = set()
        for key in ("train", "val", "test"):
            idx = np.asarray(self.splits.get(key, ()), dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise DataError(f"{key} split index out of range")
            if seen.intersection(idx.tolist()):
                raise DataError("train/val/test splits must be disjoint")
            seen.update(idx.tolist())
            self.splits[key] = idx

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def n_anchors(self) -> int:
        return self.fingerprints.shape[1]

    @property
    def n_antennas(self) -> int:
        return self.fingerprints.shape[2]

    @property
    def n_subcarriers(self) -> int:
        return self.fingerprints.shape[3]

    @property
    def changed_anchors(self) -> frozenset[int]:
        """Union of attenuated anchors over the test split."""
        mask = int(np.bitwise_or.reduce(self.tags[self.splits["test"]], initial=0))
        return frozenset(a for k, a in enumerate(self.anchor_ids) if mask >> k & 1)

    @property
    def scenario_name(self) -> str:
        return ScenarioSpec(self.changed_anchors).name

    def sample(self, i: int) -> Sample:
        fps = tuple(Fingerprint(self.fingerprints[i, k], a) for k, a in enumerate(self.anchor_ids))
        changed = frozenset(a for k, a in enumerate(self.anchor_ids) if int(self.tags[i]) >> k & 1)
        return Sample(self.positions[i], fps, changed)

    def inputs(self, split: str) -> np.ndarray:
        """Fingerprints of a split, shape (n_split, N_B, N_R, N_C, 2)."""
        return self.fingerprints[self.splits[split]]

    def labels(self, split: str) -> np.ndarray:
        return self.positions[self.splits[split]]

    def to_bytes(self) -> bytes:
        n_b, n_r, n_c = self.fingerprints.shape[1:4]
        buf = io.BytesIO()
        buf.write(_HEADER.pack(MAGIC, VERSION, n_b, n_r, n_c, len(self)))
        buf.write(np.asarray(self.anchor_ids, dtype="<u4").tobytes())
        rec = np.empty(len(self), dtype=_record_dtype(n_b, n_r, n_c))
        rec["x"] = self.positions[:, 0]
        rec["y"] = self.positions[:, 1]
        rec["tag"] = self.tags
        rec["fp"] = self.fingerprints
        buf.write(rec.tobytes())
        for key in ("train", "val", "test"):
            idx = self.splits[key]
            buf.write(struct.pack("<I", len(idx)))
            buf.write(idx.astype("<u4").tobytes())
        buf.write(self.env_digest)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> Dataset:
        if len(data) < _HEADER.size or data[:4] != MAGIC:
            raise DataError("not a PFDS dataset container")
        magic, version, n_b, n_r, n_c, n = _HEADER.unpack_from(data, 0)
        if version != VERSION:
            raise DataError(f"unsupported PFDS version {version}")
        off = _HEADER.size
        try:
            ids = np.frombuffer(data, dtype="<u4", count=n_b, offset=off)
            off += 4 * n_b
            dt = _record_dtype(n_b, n_r, n_c)
            rec = np.frombuffer(data, dtype=dt, count=n, offset=off)
            off += dt.itemsize * n
            splits = {}
            for key in ("train", "val", "test"):
                (k,) = struct.unpack_from("<I", data, off)
                off += 4
                splits[key] = np.frombuffer(data, dtype="<u4", count=k, offset=off).astype(np.int64)
                off += 4 * k
        except (ValueError, struct.error) as exc:
            raise DataError(f"truncated PFDS container: {exc}") from exc
        digest = data[off:off + 32]
        if len(digest) != 32 or off + 32 != len(data):
            raise DataError("PFDS container has a malformed trailer")
        fps = np.array(rec["fp"], dtype=np.float32)
        if not np.isfinite(fps).all():
            raise DataError("fingerprints contain non-finite values")
        return cls(
            anchor_ids=tuple(int(a) for a in ids),
            positions=np.column_stack([rec["x"], rec["y"]]).astype(np.float64),
            fingerprints=fps,
            tags=np.array(rec["tag"], dtype=np.uint8),
            splits=splits,
            env_digest=bytes(digest),
        )

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> Dataset:
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read dataset {path}: {exc}") from exc
        return cls.from_bytes(data)


def _record_dtype(n_b: int, n_r: int, n_c: int) -> np.dtype:
    return np.dtype([("x", "<f8"), ("y", "<f8"), ("tag", "u1"), ("fp", "<f4", (n_b, n_r, n_c, 2))])


def import_fingerprints(
    positions: np.ndarray,
    fingerprints: np.ndarray,
    splits: dict[str, np.ndarray],
    anchor_ids=None,
    tags: np.ndarray | None = None,
) -> Dataset:
    """Wrap externally produced fingerprints (already scaled to [0, 1]) in a Dataset."""
    fingerprints = np.asarray(fingerprints, dtype=np.float32)
    if fingerprints.ndim != 5:
        raise DataError("fingerprints must have shape (n, N_B, N_R, N_C, 2)")
    if fingerprints.min() < 0 or fingerprints.max() > 1:
        raise DataError("imported fingerprints must already lie in [0, 1]")
    if anchor_ids is None:
        anchor_ids = range(1, fingerprints.shape[1] + 1)
    if tags is None:
        tags = np.zeros(len(positions), dtype=np.uint8)
    return Dataset(tuple(int(a) for a in anchor_ids), np.asarray(positions, dtype=float), fingerprints,
                   np.asarray(tags, dtype=np.uint8), {k: np.asarray(v) for k, v in splits.items()})


def split_sizes(n_samples: int, test_fraction: float, val_fraction: float) -> tuple[int, int, int]:
    """(train, val, test) counts; validation is carved out of the training pool."""
    n_test = int(round(test_fraction * n_samples))
    pool = n_samples - n_test
    n_val = int(round(val_fraction * pool))
    return pool - n_val, n_val, n_test


def sample_positions(env: Environment, indices: np.ndarray, seed: int) -> np.ndarray:
    """Uniform positions; sample i depends only on (seed, i)."""
    (x0, y0), (x1, y1) = env.bounds
    out = np.empty((len(indices), 2))
    for row, i in enumerate(indices):
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, _POSITION_KEY, int(i)])))
        u = gen.random(2)
        out[row] = (x0 + u[0] * (x1 - x0), y0 + u[1] * (y1 - y0))
    return out


def gen_dataset(
    env: Environment,
    n_samples: int,
    scenario: ScenarioSpec | None = None,
    *,
    seed: int | None = None,
    test_fraction: float = 0.2,
    val_fraction: float = 0.1,
    workers: int = 0,
) -> Dataset:
    """Sample UE positions, synthesise every anchor's CSI and build fingerprints.

    Index layout is test first, then validation, then training, so growing
    ``n_samples`` at a fixed ``test_fraction * n_samples`` keeps the test set
    and extends the training pool. Normalisation statistics come from the
    training split only. In a dynamic scenario the strongest-path attenuation
    is applied to the test split of the changed anchors and nothing else.

    Raises:
        ConfigError: scenario names an unknown anchor, or sizes are invalid.
    """
    scenario = scenario or ScenarioSpec()
    if n_samples < 10:
        raise ConfigError("n_samples must be >= 10")
    if not (0 <= test_fraction < 1 and 0 <= val_fraction < 1):
        raise ConfigError("split fractions must lie in [0, 1)")
    changed_idx = scenario.validate(env)
    n_rs = {a.n_antennas for a in env.anchors}
    if len(n_rs) != 1:
        raise ConfigError("all anchors must have the same number of antennas")
    n_train, n_val, n_test = split_sizes(n_samples, test_fraction, val_fraction)
    if n_train < 1:
        raise ConfigError("training split would be empty")

    seed = env.seed if seed is None else seed
    positions = sample_positions(env, np.arange(n_samples), seed)
    test = np.arange(0, n_test)
    val = np.arange(n_test, n_test + n_val)
    train = np.arange(n_test + n_val, n_samples)

    def one_anchor(anchor):
        return synth_channels(env, anchor, positions)

    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_anchor = list(pool.map(one_anchor, env.anchors))
    else:
        per_anchor = [one_anchor(a) for a in env.anchors]
    csi = np.stack(per_anchor, axis=1)

    norm = NormStats.fit(env.anchor_ids, csi[train])
    tags = np.zeros(n_samples, dtype=np.uint8)
    if changed_idx:
        for k in changed_idx:
            for i in test:
                a = attenuate_peak_block(angle_delay(csi[i, k]), scenario.atten_db, scenario.window)
                csi[i, k] = angle_delay_inverse(a)
            tags[test] |= np.uint8(1 << k)

    fps = stack_and_normalise(csi, norm.lo[None, :], norm.hi[None, :]).astype(np.float32)
    return Dataset(
        anchor_ids=env.anchor_ids,
        positions=positions,
        fingerprints=fps,
        tags=tags,
        splits={"train": train, "val": val, "test": test},
        env_digest=env.digest(),
        norm=norm,
    )
