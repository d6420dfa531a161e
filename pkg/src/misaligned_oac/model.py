"""Slot geometry and the linear models of the overlapped received signal.

Time is measured in symbol periods (T = 1). Device ``m`` (0-based, sorted by
arrival) sends symbol ``l`` (1-based, ``1..L``) on ``[l - 1 + tau_m, l + tau_m)``.
Symbol indices ``0`` and ``L + 1`` are padding and always zero.

Two sample streams are modelled:

* standard samples ``r_k[i]``: integrate-and-dump over ``[i - 1 + tau_k, i + tau_k)``
  for every distinct offset ``tau_k``; ``r = A s + z`` with colored ``z``.
* whitened samples ``y_b[i]``: a bank of filters whose lengths are the gaps
  ``d_b`` between consecutive distinct offsets, integrating over
  ``[i - 1 + tau_b, i - 1 + tau_{b+1})``; ``y = D s + z~`` with white ``z~``.

Symbol vectors are ordered index-major: ``s_1[1], ..., s_M[1], s_1[2], ...``.
Sample vectors are ordered the same way: ``y_1[1], ..., y_M'[1], y_1[2], ...``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import EmptyDeviceList, OffsetOutOfRange, ZeroSignalPower

# below this |cfo * length| the closed form is replaced by its Taylor series
CFO_SERIES_THRESHOLD = 1e-8
# received power below this fraction of the no-cancellation power is zero
ZERO_POWER_RTOL = 1e-24


@dataclass(frozen=True)
class DeviceProfile:
    """Residual impairments of one transmitting device.

    Attributes
    ----------
    tau : float
        Arrival offset in symbol periods, in ``[0, 1)``.
    gain_amp, gain_phase : float
        Residual channel gain ``gain_amp * exp(1j * gain_phase)``.
    cfo : float
        Residual carrier frequency offset in radians per symbol period.
    dataset_size : int
        Local dataset size ``B_m``.
    """

    tau: float
    gain_amp: float = 1.0
    gain_phase: float = 0.0
    cfo: float = 0.0
    dataset_size: int = 1

    def __post_init__(self):
        if not (0.0 <= self.tau < 1.0) or not math.isfinite(self.tau):
            raise OffsetOutOfRange(f"tau={self.tau!r} is outside [0, 1)")
        if not self.gain_amp >= 0.0:
            raise ValueError(f"gain_amp must be >= 0, got {self.gain_amp!r}")
        if int(self.dataset_size) < 1:
            raise ValueError(f"dataset_size must be >= 1, got {self.dataset_size!r}")

    @property
    def gain(self) -> complex:
        return self.gain_amp * complex(math.cos(self.gain_phase), math.sin(self.gain_phase))


def _frozen(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SlotGeometry:
    """Validated per-slot channel layout.

    ``profiles`` are sorted by arrival with the earliest offset at 0.
    ``boundaries`` holds the ``M'`` distinct offsets; ``edges`` appends the
    closing boundary 1. ``membership[b]`` lists the (sorted) devices whose
    symbols start at ``boundaries[b]``, and ``order[m]`` is the position of
    sorted device ``m`` in the list given to :func:`validate_geometry`.
    """

    profiles: tuple
    boundaries: np.ndarray
    sub_lengths: np.ndarray
    membership: tuple
    order: tuple
    group: np.ndarray = field(repr=False)

    @property
    def n_devices(self) -> int:
        return len(self.profiles)

    @property
    def n_filters(self) -> int:
        return len(self.boundaries)

    @property
    def edges(self) -> np.ndarray:
        return np.append(self.boundaries, 1.0)

    @property
    def taus(self) -> np.ndarray:
        return np.array([p.tau for p in self.profiles])

    @property
    def gains(self) -> np.ndarray:
        return np.array([p.gain for p in self.profiles], dtype=complex)

    @property
    def cfos(self) -> np.ndarray:
        return np.array([p.cfo for p in self.profiles], dtype=float)

    @property
    def distinct(self) -> bool:
        return self.n_filters == self.n_devices

    def n_whitened(self, L: int) -> int:
        return self.n_filters * (L + 1) - 1

    def n_standard(self, L: int) -> int:
        return self.n_filters * L

    def aligned_rows(self, L: int) -> np.ndarray:
        """Positions of the last filter's samples ``y_M'[1..L]`` in ``y``."""
        return np.arange(L) * self.n_filters + (self.n_filters - 1)


def validate_geometry(profiles: Sequence[DeviceProfile]) -> SlotGeometry:
    """Sort devices by arrival, shift the earliest to 0 and group equal offsets."""
    profiles = list(profiles)
    if not profiles:
        raise EmptyDeviceList("at least one device is required")
    for p in profiles:
        if not (0.0 <= p.tau < 1.0):
            raise OffsetOutOfRange(f"tau={p.tau!r} is outside [0, 1)")

    order = sorted(range(len(profiles)), key=lambda m: (profiles[m].tau, m))
    t0 = profiles[order[0]].tau
    shifted = []
    for m in order:
        p = profiles[m]
        shifted.append(DeviceProfile(p.tau - t0, p.gain_amp, p.gain_phase, p.cfo, p.dataset_size))

    boundaries = []
    group = []
    membership = []
    for m, p in enumerate(shifted):
        if not boundaries or p.tau != boundaries[-1]:
            boundaries.append(p.tau)
            membership.append([])
        group.append(len(boundaries) - 1)
        membership[-1].append(m)

    edges = np.append(boundaries, 1.0)
    return SlotGeometry(
        profiles=tuple(shifted),
        boundaries=_frozen(boundaries),
        sub_lengths=_frozen(np.diff(edges)),
        membership=tuple(tuple(g) for g in membership),
        order=tuple(order),
        group=_frozen(np.array(group, dtype=int)),
    )


def phasor_mean(x):
    """Mean of ``exp(1j * u)`` over ``u`` in ``[0, x]``: ``(exp(1j x) - 1) / (1j x)``."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape, dtype=complex)
    small = np.abs(x) < CFO_SERIES_THRESHOLD
    xs = x[small]
    out[small] = 1.0 + 0.5j * xs - xs * xs / 6.0
    xl = x[~small]
    out[~small] = np.expm1(1j * xl) / (1j * xl)
    return out


def _segment_coefficient(gain, cfo, start, length):
    # gain * integral_{start}^{start+length} exp(1j cfo t) dt
    return gain * np.exp(1j * cfo * start) * length * phasor_mean(cfo * length)


@dataclass(frozen=True)
class CoefficientMatrix:
    """Sparse coefficient matrix with its row and column index maps.

    ``rows[t] = (filter, i)`` labels sample ``t``; ``cols[c] = (device, l)``
    labels symbol ``c``. ``matrix`` is a ``scipy.sparse.csr_array``.
    """

    kind: str
    matrix: sp.csr_array
    rows: np.ndarray
    cols: np.ndarray

    @property
    def shape(self):
        return self.matrix.shape

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def _symbol_cols(M: int, L: int) -> np.ndarray:
    m, l = np.meshgrid(np.arange(M), np.arange(1, L + 1))
    return np.stack([m.ravel(), l.ravel()], axis=1)


def _col_index(m, l, M):
    return (l - 1) * M + m


@dataclass(frozen=True)
class WindowLayout:
    """Per-sample view of the whitened model.

    For every whitened sample ``t`` and device slot ``m``: which symbol index
    ``symbol[t, m]`` of device ``m`` it observes and with which coefficient
    ``coeff[t, m]`` (zero for padding symbols 0 and L+1).
    """

    filt: np.ndarray
    index: np.ndarray
    symbol: np.ndarray
    coeff: np.ndarray


def window_layout(geom: SlotGeometry, L: int) -> WindowLayout:
    if L < 1:
        raise ValueError(f"packet length must be >= 1, got {L}")
    Mf = geom.n_filters
    n = geom.n_whitened(L)
    filt = np.tile(np.arange(Mf), L + 1)[:n]
    index = np.repeat(np.arange(1, L + 2), Mf)[:n]
    later = geom.group[None, :] > filt[:, None]
    symbol = index[:, None] - later.astype(int)
    start = (index - 1) + geom.boundaries[filt]
    d = geom.sub_lengths[filt]
    coeff = _segment_coefficient(
        geom.gains[None, :], geom.cfos[None, :], start[:, None], d[:, None]
    ) / d[:, None]
    valid = (symbol >= 1) & (symbol <= L)
    coeff = np.where(valid, coeff, 0.0)
    return WindowLayout(filt=filt, index=index, symbol=symbol, coeff=coeff)


def coeff_matrix_whitened(geom: SlotGeometry, L: int) -> CoefficientMatrix:
    """Coefficient matrix ``D`` of the whitened model ``y = D s + z~``."""
    lay = window_layout(geom, L)
    M = geom.n_devices
    t, m = np.nonzero((lay.symbol >= 1) & (lay.symbol <= L))
    cols = _col_index(m, lay.symbol[t, m], M)
    mat = sp.csr_array(
        (lay.coeff[t, m], (t, cols)), shape=(geom.n_whitened(L), M * L), dtype=complex
    )
    return CoefficientMatrix(
        "whitened", mat, np.stack([lay.filt, lay.index], axis=1), _symbol_cols(M, L)
    )


def coeff_matrix_standard(geom: SlotGeometry, L: int) -> CoefficientMatrix:
    """Coefficient matrix ``A`` of the standard model ``r = A s + z``.

    Sample ``r_k[i]`` sees two consecutive symbols of every device; each
    contributes ``gain * integral exp(1j cfo t) dt`` over its overlap.
    """
    if L < 1:
        raise ValueError(f"packet length must be >= 1, got {L}")
    M, Mf = geom.n_devices, geom.n_filters
    k = np.tile(np.arange(Mf), L)
    i = np.repeat(np.arange(1, L + 1), Mf)
    tau_k = geom.boundaries[k][:, None]
    tau_m = geom.taus[None, :]
    start = (i - 1)[:, None] + tau_k
    first = i[:, None] - (geom.group[None, :] > k[:, None]).astype(int)
    len1 = (first - (i - 1)[:, None]) + tau_m - tau_k
    # a device starting exactly at the window start overlaps it with one symbol only
    len1 = np.where(geom.group[None, :] == k[:, None], 1.0, len1)
    gains = np.broadcast_to(geom.gains[None, :], first.shape)
    cfos = np.broadcast_to(geom.cfos[None, :], first.shape)
    rows = np.broadcast_to(np.arange(Mf * L)[:, None], first.shape)
    devs = np.broadcast_to(np.arange(M)[None, :], first.shape)

    pieces = [
        (first, start, len1),
        (first + 1, first + tau_m, 1.0 - len1),
    ]
    data, ri, ci = [], [], []
    for sym, st, ln in pieces:
        st = np.broadcast_to(st, first.shape)
        keep = (ln > 0) & (sym >= 1) & (sym <= L)
        data.append(_segment_coefficient(gains[keep], cfos[keep], st[keep], ln[keep]))
        ri.append(rows[keep])
        ci.append(_col_index(devs[keep], sym[keep], M))
    mat = sp.csr_array(
        (np.concatenate(data), (np.concatenate(ri), np.concatenate(ci))),
        shape=(Mf * L, M * L),
        dtype=complex,
    )
    return CoefficientMatrix("standard", mat, np.stack([k, i], axis=1), _symbol_cols(M, L))


def summation_matrix(M: int, L: int) -> sp.csr_array:
    """0/1 matrix ``V`` with ``V s = s_plus``."""
    if M < 1 or L < 1:
        raise ValueError("M and L must be >= 1")
    rows = np.repeat(np.arange(L), M)
    return sp.csr_array((np.ones(M * L), (rows, np.arange(M * L))), shape=(L, M * L))


def colored_noise_covariance(geom: SlotGeometry, L: int, n0: float) -> np.ndarray:
    """Covariance ``E[z_k[i] conj(z_k'[i'])]`` of the standard-sample noise.

    Two integration windows of length 1 starting ``delta`` apart overlap over
    ``max(0, 1 - |delta|)``; white noise of PSD ``n0`` gives that times ``n0``.
    """
    if n0 < 0:
        raise ValueError("n0 must be >= 0")
    Mf = geom.n_filters
    k = np.tile(np.arange(Mf), L)
    i = np.repeat(np.arange(1, L + 1), Mf)
    start = (i - 1) + geom.boundaries[k]
    delta = start[None, :] - start[:, None]
    return n0 * np.maximum(0.0, 1.0 - np.abs(delta))


def received_power(geom: SlotGeometry, symbols: np.ndarray) -> float:
    """Empirical ``mean_i |sum_m h_m s_m[i]|^2`` for symbols in sorted-device order."""
    symbols = np.asarray(symbols)
    return float(np.mean(np.abs(geom.gains @ symbols) ** 2))


def calibrate_n0(geom: SlotGeometry, symbols, esn0_db: float) -> float:
    """Noise PSD that puts the packet at the requested EsN0 (``inf`` -> 0)."""
    symbols = getattr(symbols, "symbols", symbols)
    symbols = np.asarray(symbols)
    if symbols.size == 0:
        raise ValueError("symbols must be nonempty")
    if math.isinf(esn0_db) and esn0_db > 0:
        return 0.0
    power = received_power(geom, symbols)
    # cancellation down to round-off of the individual terms counts as zero
    scale = float(np.mean((np.abs(geom.gains)[:, None] * np.abs(symbols)).sum(axis=0) ** 2))
    if power <= ZERO_POWER_RTOL * scale:
        raise ZeroSignalPower("received signal power is zero; EsN0 is undefined")
    return power / 10.0 ** (esn0_db / 10.0)
