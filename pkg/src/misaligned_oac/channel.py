"""Seeded noise and synthesis of the whitened and standard sample streams.

Noise is drawn once per slot at sub-interval granularity (one draw per
whitened sample) and the colored standard-sample noise is assembled from
the same draws, so ``r`` and ``y`` always describe one received waveform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import ShapeMismatch
from .model import (
    CoefficientMatrix,
    SlotGeometry,
    calibrate_n0,
    coeff_matrix_standard,
    coeff_matrix_whitened,
)


@dataclass(frozen=True)
class SymbolBlock:
    """``M x L`` transmit symbols, rows in sorted-device order."""

    symbols: np.ndarray

    def __post_init__(self):
        s = np.array(self.symbols, dtype=complex)
        if s.ndim != 2 or s.shape[1] < 1:
            raise ShapeMismatch(f"symbols must be M x L, got shape {s.shape}")
        s.setflags(write=False)
        object.__setattr__(self, "symbols", s)

    @property
    def n_devices(self) -> int:
        return self.symbols.shape[0]

    @property
    def length(self) -> int:
        return self.symbols.shape[1]

    @property
    def target_sum(self) -> np.ndarray:
        return self.symbols.sum(axis=0)

    def vector(self) -> np.ndarray:
        """``vec(s)`` in index-major order."""
        return self.symbols.T.ravel()


@dataclass(frozen=True)
class WhitenedNoise:
    """White noise ``z~_b[i]`` on a ``(M', L+1)`` grid; entry ``(M'-1, L)`` is unused."""

    values: np.ndarray
    n0: float
    seed: object

    @property
    def length(self) -> int:
        return self.values.shape[1] - 1

    def vector(self) -> np.ndarray:
        return self.values.T.ravel()[:-1]


@dataclass(frozen=True)
class SampleStream:
    kind: str
    values: np.ndarray
    noise_seed: object
    n0: float


def draw_whitened_noise(geom: SlotGeometry, L: int, n0: float, seed) -> WhitenedNoise:
    """Independent ``CN(0, n0 / d_b)`` draws, generated filter-major then index."""
    if n0 < 0:
        raise ValueError("n0 must be >= 0")
    rng = np.random.default_rng(seed)
    Mf = geom.n_filters
    raw = rng.standard_normal((Mf, L + 1, 2))
    scale = np.sqrt(n0 / (2.0 * geom.sub_lengths))[:, None]
    values = scale * (raw[..., 0] + 1j * raw[..., 1])
    values[-1, -1] = 0.0
    values.setflags(write=False)
    return WhitenedNoise(values, float(n0), seed)


def noise_transfer_matrix(geom: SlotGeometry, L: int) -> sp.csr_array:
    """Sparse map ``G`` with ``z = G z~``.

    ``z_k[i] = sum_{b >= k} d_b z~_b[i] + sum_{b < k} d_b z~_b[i + 1]``:
    a full-period window is the union of ``M'`` consecutive sub-intervals.
    """
    Mf = geom.n_filters
    d = geom.sub_lengths
    rows, cols, vals = [], [], []
    for i in range(1, L + 1):
        for k in range(Mf):
            r = (i - 1) * Mf + k
            for b in range(Mf):
                ii = i if b >= k else i + 1
                rows.append(r)
                cols.append((ii - 1) * Mf + b)
                vals.append(d[b])
    return sp.csr_array((vals, (rows, cols)), shape=(Mf * L, geom.n_whitened(L)))


def assemble_colored_noise(geom: SlotGeometry, noise: WhitenedNoise) -> np.ndarray:
    if noise.values.shape[0] != geom.n_filters:
        raise ShapeMismatch("noise was drawn for a different geometry")
    w = noise.values
    d = geom.sub_lengths[:, None]
    Mf = geom.n_filters
    out = np.empty((noise.length, Mf), dtype=complex)
    # cumulative sums over filters: tail[k] = sum_{b>=k}, head[k] = sum_{b<k}
    cur = d * w[:, :-1]
    nxt = d * w[:, 1:]
    tail = np.cumsum(cur[::-1], axis=0)[::-1]
    head = np.vstack([np.zeros((1, nxt.shape[1])), np.cumsum(nxt, axis=0)[:-1]])
    out[:] = (tail + head).T
    return out.ravel()


def _check(block: SymbolBlock, coeff: CoefficientMatrix, noise_len: int, kind: str):
    n_rows, n_cols = coeff.shape
    if n_cols != block.symbols.size:
        raise ShapeMismatch(f"{kind} matrix has {n_cols} columns for {block.symbols.size} symbols")
    if n_rows != noise_len:
        raise ShapeMismatch(f"{kind} matrix has {n_rows} rows for {noise_len} noise samples")


def synthesize_wmfs(block: SymbolBlock, D: CoefficientMatrix, noise: WhitenedNoise) -> SampleStream:
    """Whitened samples ``y = D vec(s) + z~``."""
    z = noise.vector()
    _check(block, D, z.size, "whitened")
    y = D.matrix @ block.vector() + z
    return SampleStream("whitened", y, noise.seed, noise.n0)


def synthesize_standard(
    block: SymbolBlock, A: CoefficientMatrix, geom: SlotGeometry, noise: WhitenedNoise
) -> SampleStream:
    """Standard samples ``r = A vec(s) + z`` with ``z`` assembled from ``noise``."""
    if noise.length != block.length:
        raise ShapeMismatch("noise was drawn for a different packet length")
    z = assemble_colored_noise(geom, noise)
    _check(block, A, z.size, "standard")
    r = A.matrix @ block.vector() + z
    return SampleStream("standard", r, noise.seed, noise.n0)


@dataclass(frozen=True)
class SlotObservation:
    """Everything the receiver sees for one slot, plus the ground truth."""

    geom: SlotGeometry
    block: SymbolBlock
    n0: float
    D: CoefficientMatrix
    whitened: SampleStream
    A: Optional[CoefficientMatrix] = None
    standard: Optional[SampleStream] = None

    @property
    def length(self) -> int:
        return self.block.length


def observe_slot(
    geom: SlotGeometry,
    block: SymbolBlock,
    *,
    esn0_db: Optional[float] = None,
    n0: Optional[float] = None,
    seed=0,
    standard: bool = True,
) -> SlotObservation:
    """Transmit one packet through the channel and sample it both ways.

    Exactly one of ``esn0_db`` and ``n0`` must be given.
    """
    if (esn0_db is None) == (n0 is None):
        raise ValueError("give exactly one of esn0_db and n0")
    if block.n_devices != geom.n_devices:
        raise ShapeMismatch(f"{block.n_devices} symbol rows for {geom.n_devices} devices")
    if n0 is None:
        n0 = calibrate_n0(geom, block.symbols, esn0_db)
    L = block.length
    noise = draw_whitened_noise(geom, L, n0, seed)
    D = coeff_matrix_whitened(geom, L)
    y = synthesize_wmfs(block, D, noise)
    A = r = None
    if standard:
        A = coeff_matrix_standard(geom, L)
        r = synthesize_standard(block, A, geom, noise)
    return SlotObservation(geom, block, float(n0), D, y, A, r)
