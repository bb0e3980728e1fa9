"""Propagation environment: area, anchors (base stations) and point scatterers."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from shapely.geometry import Point, Polygon
from shapely.prepared import prep

from ..errors import ConfigError

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class AnchorGeometry:
    """A base station with a uniform linear array.

    ``spacing`` is the element spacing in wavelengths. ``boresight`` is the
    array normal in radians (x axis = 0). ``los_blocked`` is an optional
    polygon: UEs inside it have no direct path to this anchor.
    """

    id: int
    position: tuple[float, float]
    n_antennas: int = 8
    spacing: float = 0.5
    boresight: float = 0.0
    los_blocked: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if not 0 <= self.id < 2**32:
            raise ConfigError(f"anchor id must be a non-negative 32-bit integer, got {self.id}")
        if self.n_antennas < 1:
            raise ConfigError(f"anchor {self.id}: n_antennas must be >= 1")
        if not self.spacing > 0:
            raise ConfigError(f"anchor {self.id}: element spacing must be > 0")
        if not all(math.isfinite(v) for v in self.position):
            raise ConfigError(f"anchor {self.id}: position must be finite")
        if self.los_blocked is not None and len(self.los_blocked) < 3:
            raise ConfigError(f"anchor {self.id}: los_blocked polygon needs >= 3 vertices")

    def los_mask(self, points: np.ndarray) -> np.ndarray:
        """True where the direct path from ``points`` (n, 2) is available."""
        points = np.atleast_2d(points)
        if self.los_blocked is None:
            return np.ones(len(points), dtype=bool)
        region = prep(Polygon(self.los_blocked))
        return np.array([not region.covers(Point(p)) for p in points], dtype=bool)


@dataclass(frozen=True)
class Scatterer:
    position: tuple[float, float]
    reflectivity: complex = 1.0 + 0j

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.position):
            raise ConfigError("scatterer position must be finite")


@dataclass(frozen=True)
class Environment:
    """Area of interest, anchors and scatterers plus the OFDM numerology.

    ``carrier_phase`` adds the ``exp(-j 2 pi f_C tau)`` term to every path.
    It is off by default: the phase then rotates once per wavelength of
    path-length change, which a small dense network cannot interpolate from
    a few thousand samples over a 10 m x 10 m area.
    """

    bounds: tuple[tuple[float, float], tuple[float, float]]
    anchors: tuple[AnchorGeometry, ...]
    scatterers: tuple[Scatterer, ...] = ()
    carrier_frequency: float = 1.272e9
    bandwidth: float = 50e6
    n_subcarriers: int = 64
    seed: int = 0
    carrier_phase: bool = False
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        (x0, y0), (x1, y1) = self.bounds
        if not (x1 > x0 and y1 > y0):
            raise ConfigError("bounds must describe a non-empty rectangle [[xmin, ymin], [xmax, ymax]]")
        if len(self.anchors) < 2:
            raise ConfigError("an environment needs at least 2 anchors")
        ids = [a.id for a in self.anchors]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate anchor ids: {ids}")
        if self.n_subcarriers < 8:
            raise ConfigError("n_subcarriers must be >= 8")
        if not (self.bandwidth > 0 and self.carrier_frequency > 0):
            raise ConfigError("bandwidth and carrier frequency must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    @property
    def subcarrier_spacing(self) -> float:
        return self.bandwidth / self.n_subcarriers

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def n_anchors(self) -> int:
        return len(self.anchors)

    @property
    def anchor_ids(self) -> tuple[int, ...]:
        return tuple(a.id for a in self.anchors)

    def anchor(self, anchor_id: int) -> AnchorGeometry:
        for a in self.anchors:
            if a.id == anchor_id:
                return a
        raise ConfigError(f"unknown anchor id {anchor_id!r}; environment has {list(self.anchor_ids)}")

    def anchor_index(self, anchor_id: int) -> int:
        return self.anchor_ids.index(self.anchor(anchor_id).id)

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        (x0, y0), (x1, y1) = self.bounds
        return (
            np.isfinite(points).all(axis=1)
            & (points[:, 0] >= x0) & (points[:, 0] <= x1)
            & (points[:, 1] >= y0) & (points[:, 1] <= y1)
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "bounds": [list(self.bounds[0]), list(self.bounds[1])],
            "carrier_frequency": self.carrier_frequency,
            "bandwidth": self.bandwidth,
            "n_subcarriers": self.n_subcarriers,
            "seed": self.seed,
            "carrier_phase": self.carrier_phase,
            "anchors": [
                {
                    "id": a.id,
                    "position": list(a.position),
                    "n_antennas": a.n_antennas,
                    "spacing": a.spacing,
                    "boresight": a.boresight,
                    "los_blocked": None if a.los_blocked is None else [list(v) for v in a.los_blocked],
                }
                for a in self.anchors
            ],
            "scatterers": [
                {"position": list(s.position), "reflectivity": [s.reflectivity.real, s.reflectivity.imag]}
                for s in self.scatterers
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> Environment:
        try:
            anchors = tuple(
                AnchorGeometry(
                    id=int(a["id"]),
                    position=tuple(float(v) for v in a["position"]),
                    n_antennas=int(a.get("n_antennas", 8)),
                    spacing=float(a.get("spacing", 0.5)),
                    boresight=float(a.get("boresight", 0.0)),
                    los_blocked=None
                    if a.get("los_blocked") is None
                    else tuple(tuple(float(c) for c in v) for v in a["los_blocked"]),
                )
                for a in doc["anchors"]
            )
            scatterers = tuple(
                Scatterer(
                    position=tuple(float(v) for v in s["position"]),
                    reflectivity=_parse_complex(s.get("reflectivity", 1.0)),
                )
                for s in doc.get("scatterers", [])
            )
            (x0, y0), (x1, y1) = doc["bounds"]
            return cls(
                bounds=((float(x0), float(y0)), (float(x1), float(y1))),
                anchors=anchors,
                scatterers=scatterers,
                carrier_frequency=float(doc.get("carrier_frequency", 1.272e9)),
                bandwidth=float(doc.get("bandwidth", 50e6)),
                n_subcarriers=int(doc.get("n_subcarriers", 64)),
                seed=int(doc.get("seed", 0)),
                carrier_phase=bool(doc.get("carrier_phase", False)),
                name=str(doc.get("name", "custom")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid environment document: {exc!r}") from exc

    def digest(self) -> bytes:
        """SHA-256 over the canonical JSON form (name excluded)."""
        doc = self.to_dict()
        doc.pop("name")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).digest()


def _parse_complex(value) -> complex:
    if isinstance(value, (list, tuple)):
        re, im = value
        return complex(float(re), float(im))
    return complex(value)


def load_environment(path: str | Path) -> Environment:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return Environment.from_dict(doc)


def save_environment(env: Environment, path: str | Path) -> None:
    Path(path).write_text(json.dumps(env.to_dict(), indent=2) + "\n")


def default_environment(
    seed: int = 2024,
    n_antennas: int = 8,
    n_subcarriers: int = 64,
    n_scatterers: int = 20,
    size: float = 10.0,
) -> Environment:
    """Desk-scale layout: four anchors just outside the corners of a square area.

    Each anchor looks at the area centre and has one rectangular patch in the
    far half of the area where its direct path is blocked, so every anchor
    sees a mix of LOS and NLOS positions.
    """
    rng = np.random.default_rng([seed, 0x5CA7])
    margin = 1.0
    corners = [(-margin, -margin), (size + margin, -margin), (size + margin, size + margin), (-margin, size + margin)]
    centre = np.array([size / 2, size / 2])
    # blocked patches sit at the middle of the two far edges, alternating per anchor
    patch = 0.3 * size
    blocked_centres = [
        (size - patch / 2, size / 2), (size / 2, size - patch / 2),
        (patch / 2, size / 2), (size / 2, patch / 2),
    ]
    anchors = []
    for k, (pos, bc) in enumerate(zip(corners, blocked_centres), start=1):
        to_centre = centre - np.asarray(pos)
        h = patch / 2
        region = ((bc[0] - h, bc[1] - h), (bc[0] + h, bc[1] - h), (bc[0] + h, bc[1] + h), (bc[0] - h, bc[1] + h))
        anchors.append(
            AnchorGeometry(
                id=k,
                position=(float(pos[0]), float(pos[1])),
                n_antennas=n_antennas,
                spacing=0.5,
                boresight=float(np.arctan2(to_centre[1], to_centre[0])),
                los_blocked=region,
            )
        )
    lo, hi = -2 * margin, size + 2 * margin
    scatterers = []
    for _ in range(n_scatterers):
        xy = rng.uniform(lo, hi, size=2)
        mag = rng.uniform(0.3, 0.9)
        phase = rng.uniform(0, 2 * np.pi)
        scatterers.append(Scatterer(position=(float(xy[0]), float(xy[1])), reflectivity=complex(mag * np.exp(1j * phase))))
    return Environment(
        bounds=((0.0, 0.0), (size, size)),
        anchors=tuple(anchors),
        scatterers=tuple(scatterers),
        carrier_frequency=1.272e9,
        bandwidth=50e6,
        n_subcarriers=n_subcarriers,
        seed=seed,
        name="desk-default",
    )
