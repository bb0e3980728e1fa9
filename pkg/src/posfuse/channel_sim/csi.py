"""Geometric multipath CSI synthesis, fingerprint preprocessing and the
angle-delay attenuation used to emulate environment changes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError, DomainError
from .environment import SPEED_OF_LIGHT, AnchorGeometry, Environment

ANTENNA_SUBCARRIER = "antenna-subcarrier"
ANGLE_DELAY = "angle-delay"

_PATH_PHASE_KEY = 0x9A7E


@dataclass(frozen=True)
class CsiTensor:
    """Complex channel of one anchor, shape (N_R, N_C)."""

    values: np.ndarray
    anchor_id: int
    domain: str = ANTENNA_SUBCARRIER

    def __post_init__(self):
        if self.values.ndim != 2 or not np.iscomplexobj(self.values):
            raise DomainError(f"CSI must be a complex 2-D array, got {self.values.dtype} {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise DomainError("CSI contains non-finite entries")

    @property
    def energy(self) -> float:
        return float(np.sum(np.abs(self.values) ** 2))


@dataclass(frozen=True)
class Fingerprint:
    """Real network input of one anchor, shape (N_R, N_C, 2), values in [0, 1]."""

    values: np.ndarray
    anchor_id: int


@dataclass(frozen=True)
class NormStats:
    """Per-anchor min/max of the real and imaginary parts over the training split."""

    anchor_ids: tuple[int, ...]
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if np.any(~np.isfinite(self.lo)) or np.any(~np.isfinite(self.hi)):
            raise DataError("normalisation statistics must be finite")
        if np.any(self.hi <= self.lo):
            bad = [a for a, l, h in zip(self.anchor_ids, self.lo, self.hi) if h <= l]
            raise DataError(f"degenerate normalisation statistics (max <= min) for anchors {bad}")

    @classmethod
    def fit(cls, anchor_ids, train_csi: np.ndarray) -> NormStats:
        """``train_csi`` has shape (n_train, N_B, N_R, N_C)."""
        if train_csi.shape[0] == 0:
            raise DataError("cannot fit normalisation statistics on an empty training split")
        parts = np.stack([train_csi.real, train_csi.imag], axis=-1)
        axes = (0,) + tuple(range(2, parts.ndim))
        return cls(tuple(anchor_ids), parts.min(axis=axes), parts.max(axis=axes))

    def bounds_for(self, anchor_id: int) -> tuple[float, float]:
        try:
            k = self.anchor_ids.index(anchor_id)
        except ValueError:
            raise DataError(f"no normalisation statistics for anchor {anchor_id}") from None
        return float(self.lo[k]), float(self.hi[k])


# -- synthesis ---------------------------------------------------------------


def path_phases(env: Environment, anchor: AnchorGeometry, rng: np.random.Generator | None = None) -> np.ndarray:
    """Global phase of each path (direct first, then one per scatterer)."""
    if rng is None:
        rng = np.random.default_rng([env.seed, anchor.id, _PATH_PHASE_KEY])
    return rng.uniform(0.0, 2.0 * np.pi, size=1 + len(env.scatterers))


def _path_parameters(env: Environment, anchor: AnchorGeometry, ue: np.ndarray):
    """Complex gain, angle off boresight and delay of every path, each (n, P)."""
    a = np.asarray(anchor.position, dtype=float)
    n = len(ue)
    n_paths = 1 + len(env.scatterers)
    amp = np.zeros((n, n_paths), dtype=complex)
    theta = np.zeros((n, n_paths))
    length = np.zeros((n, n_paths))

    los = ue - a
    d = np.hypot(los[:, 0], los[:, 1])
    amp[:, 0] = np.where(anchor.los_mask(ue), 1.0 / d, 0.0)
    theta[:, 0] = np.arctan2(los[:, 1], los[:, 0]) - anchor.boresight
    length[:, 0] = d

    for p, sc in enumerate(env.scatterers, start=1):
        s = np.asarray(sc.position, dtype=float)
        to_s = s - a
        d1 = np.hypot(*to_s)
        d2 = np.hypot(ue[:, 0] - s[0], ue[:, 1] - s[1])
        length[:, p] = d1 + d2
        amp[:, p] = sc.reflectivity / length[:, p]
        theta[:, p] = np.arctan2(to_s[1], to_s[0]) - anchor.boresight
    return amp, theta, length / SPEED_OF_LIGHT


def synth_channels(
    env: Environment,
    anchor: AnchorGeometry,
    ue_pos: np.ndarray,
    rng: np.random.Generator | None = None,
    chunk: int = 512,
) -> np.ndarray:
    """Vectorised :func:`synth_channel` over UE positions (n, 2) -> (n, N_R, N_C)."""
    ue = np.atleast_2d(np.asarray(ue_pos, dtype=float))
    if not env.contains(ue).all():
        raise DomainError("UE position outside the environment bounds")
    phases = np.exp(1j * path_phases(env, anchor, rng))
    r = np.arange(anchor.n_antennas)
    f = np.arange(env.n_subcarriers) * env.subcarrier_spacing
    out = np.empty((len(ue), anchor.n_antennas, env.n_subcarriers), dtype=np.complex128)
    for start in range(0, len(ue), chunk):
        amp, theta, tau = _path_parameters(env, anchor, ue[start:start + chunk])
        gain = amp * phases
        if env.carrier_phase:
            gain = gain * np.exp(-2j * np.pi * env.carrier_frequency * tau)
        steer = np.exp(-2j * np.pi * anchor.spacing * np.sin(theta)[..., None] * r)
        delay = np.exp(-2j * np.pi * tau[..., None] * f)
        out[start:start + chunk] = np.einsum("np,npr,npk->nrk", gain, steer, delay)
    return out


def synth_channel(
    env: Environment,
    anchor: AnchorGeometry,
    ue_pos,
    rng: np.random.Generator | None = None,
) -> CsiTensor:
    """Channel between a UE and one anchor as a sum over propagation paths.

    Each path contributes gain x steering vector x per-subcarrier delay
    phasor. The gain is the inverse path length (times the scatterer
    reflectivity for bounced paths) with a global phase per path drawn from
    ``rng``; by default that stream is keyed on ``(env.seed, anchor.id)`` so
    the result depends only on the environment, the anchor and the position.

    Raises:
        DomainError: if ``ue_pos`` lies outside the environment bounds.
    """
    h = synth_channels(env, anchor, np.asarray(ue_pos, dtype=float).reshape(1, 2), rng)[0]
    return CsiTensor(h, anchor.id)


# -- preprocessing -------------------------------------------------------------


def stack_and_normalise(h: np.ndarray, lo, hi) -> np.ndarray:
    """Array form of :func:`to_fingerprint`: (..., N_R, N_C) complex -> (..., N_R, N_C, 2) in [0, 1].

    ``lo``/``hi`` broadcast against the leading axes of ``h``.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(hi <= lo):
        raise DataError("degenerate normalisation statistics (max <= min)")
    lo = lo.reshape(lo.shape + (1, 1, 1))
    hi = hi.reshape(hi.shape + (1, 1, 1))
    stacked = np.stack([h.real, h.imag], axis=-1)
    return np.clip((stacked - lo) / (hi - lo), 0.0, 1.0)


def to_fingerprint(csi: CsiTensor, norm: NormStats) -> Fingerprint:
    """Stack real/imag parts on a third axis and min-max scale with training extrema."""
    lo, hi = norm.bounds_for(csi.anchor_id)
    return Fingerprint(stack_and_normalise(csi.values, lo, hi), csi.anchor_id)


# -- angle-delay domain --------------------------------------------------------


def angle_delay(h: np.ndarray) -> np.ndarray:
    """Unitary DFT over antennas, unitary inverse DFT over subcarriers (last two axes)."""
    return np.fft.fft(np.fft.ifft(h, axis=-1, norm="ortho"), axis=-2, norm="ortho")


def angle_delay_inverse(a: np.ndarray) -> np.ndarray:
    return np.fft.fft(np.fft.ifft(a, axis=-2, norm="ortho"), axis=-1, norm="ortho")


def to_angle_delay(csi: CsiTensor) -> CsiTensor:
    if csi.domain != ANTENNA_SUBCARRIER:
        raise DomainError(f"expected antenna-subcarrier CSI, got {csi.domain}")
    return CsiTensor(angle_delay(csi.values), csi.anchor_id, ANGLE_DELAY)


def from_angle_delay(csi: CsiTensor) -> CsiTensor:
    if csi.domain != ANGLE_DELAY:
        raise DomainError(f"expected angle-delay CSI, got {csi.domain}")
    return CsiTensor(angle_delay_inverse(csi.values), csi.anchor_id, ANTENNA_SUBCARRIER)


def attenuate_peak_block(a: np.ndarray, atten_db: float = 20.0, window: int = 3) -> np.ndarray:
    """Scale the window x window block around the largest-magnitude bin of an
    angle-delay matrix. The block is clipped at the matrix borders."""
    if window < 1 or window % 2 == 0:
        raise DomainError(f"window must be a positive odd integer, got {window}")
    out = a.copy()
    mag = np.abs(a)
    if not mag.any():
        return out
    i, j = np.unravel_index(np.argmax(mag), mag.shape)
    h = window // 2
    rows = slice(max(i - h, 0), min(i + h + 1, a.shape[0]))
    cols = slice(max(j - h, 0), min(j + h + 1, a.shape[1]))
    out[rows, cols] *= 10.0 ** (-atten_db / 20.0)
    return out


def attenuate_strongest(csi: CsiTensor, atten_db: float = 20.0, window: int = 3) -> CsiTensor:
    """Attenuate the strongest angle-delay path (and its leakage block) by ``atten_db``.

    The input is taken to the angle-delay domain, the block is scaled and the
    result is transformed back, so the output domain equals the input domain.
    """
    if csi.domain == ANGLE_DELAY:
        return CsiTensor(attenuate_peak_block(csi.values, atten_db, window), csi.anchor_id, ANGLE_DELAY)
    a = attenuate_peak_block(angle_delay(csi.values), atten_db, window)
    return CsiTensor(angle_delay_inverse(a), csi.anchor_id, ANTENNA_SUBCARRIER)
