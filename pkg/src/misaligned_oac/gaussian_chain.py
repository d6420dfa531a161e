"""Canonical-form Gaussian messages on the clustered chain of window variables.

Every whitened sample ``y_b[i]`` observes one *window*: the ``M`` complex
symbols overlapping its integration interval, one per device. Consecutive
windows differ by one boundary group of devices moving on to their next
symbol, so the windows form a chain and exact marginals follow from one
forward and one backward sweep.

A window over ``n`` complex symbols is a ``2n``-dimensional real variable,
laid out as all real parts followed by all imaginary parts. Messages are
kept in information form ``exp(-x'Jx/2 + h'x)`` so flat priors (``J = 0``)
and rank-deficient evidence are represented exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import RankDeficientMarginal, ShapeMismatch, SingularMarginalization, ZeroNoise
from .model import CoefficientMatrix, SlotGeometry, window_layout

# eigenvalues below this fraction of the largest are treated as exact zeros
PINV_RTOL = 1e-12
MAX_CONDITION = 1e12
# tolerance for "the sum direction lies in the range of the precision"
ESTIMABLE_RTOL = 1e-6


def _labels(symbols):
    return tuple((m, l, "r") for m, l in symbols) + tuple((m, l, "i") for m, l in symbols)


@dataclass
class GaussianMessage:
    """Real Gaussian factor in information form over labelled coordinates."""

    info: np.ndarray
    prec: np.ndarray
    coord_map: tuple

    def __post_init__(self):
        self.info = np.asarray(self.info, dtype=float)
        self.prec = np.asarray(self.prec, dtype=float)
        n = len(self.coord_map)
        if self.info.shape != (n,) or self.prec.shape != (n, n):
            raise ShapeMismatch("info/prec do not match coord_map")

    @classmethod
    def flat(cls, symbols):
        n = 2 * len(symbols)
        return cls(np.zeros(n), np.zeros((n, n)), _labels(symbols))

    @property
    def dim(self) -> int:
        return len(self.coord_map)

    @property
    def symbols(self):
        return [(m, l) for m, l, part in self.coord_map if part == "r"]

    def __add__(self, other):
        if self.coord_map != other.coord_map:
            raise ShapeMismatch("messages are over different coordinates")
        return GaussianMessage(self.info + other.info, self.prec + other.prec, self.coord_map)


@dataclass
class SymbolMarginal:
    """Moment form of the marginal likelihood of ``s[i]`` (real parts, then imaginary)."""

    mean: np.ndarray
    cov: np.ndarray
    index: int
    pseudo_inverse: bool = False
    condition: float = 1.0


@dataclass
class ChainDiagnostics:
    truncated_inversions: int = 0
    pseudo_inverse_marginals: int = 0
    max_condition: float = 1.0
    messages: Optional[list] = field(default=None, repr=False)


def _pinv_psd(J):
    """Pseudo-inverse of a symmetric PSD block; returns (inverse, truncated?)."""
    w, U = np.linalg.eigh(J)
    if not np.all(np.isfinite(w)):
        raise SingularMarginalization("non-finite precision block")
    top = w[-1]
    if top <= 0.0:
        return np.zeros_like(J), True
    keep = w > top * PINV_RTOL
    inv_w = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    return (U * inv_w) @ U.T, not keep.all()


def _schur(J, h, keep, drop):
    """Marginalize coordinates ``drop`` out of ``(J, h)``.

    Returns the kept block and whether a pseudo-inverse truncation happened.
    Exactly-flat coordinates (zero rows and zero info) are dropped directly.
    """
    Jkk = J[np.ix_(keep, keep)]
    hk = h[keep]
    Jdd = J[np.ix_(drop, drop)]
    if not Jdd.any() and not h[drop].any():
        return Jkk, hk, False
    P, truncated = _pinv_psd(Jdd)
    Jkd = J[np.ix_(keep, drop)]
    K = Jkd @ P
    Jn = Jkk - K @ Jkd.T
    hn = hk - K @ h[drop]
    return 0.5 * (Jn + Jn.T), hn, truncated


def _evidence_arrays(coeff, y, d, n0):
    """Stacked rank-2 evidence for samples ``y[t] = sum_m coeff[t, m] x_m + noise``."""
    c = np.asarray(coeff, dtype=complex)
    cr, ci = c.real, c.imag
    a_r = np.concatenate([cr, -ci], axis=-1)
    a_i = np.concatenate([ci, cr], axis=-1)
    w = (2.0 * np.asarray(d, dtype=float) / n0)[..., None]
    y = np.asarray(y, dtype=complex)
    info = w * (a_r * y.real[..., None] + a_i * y.imag[..., None])
    prec = w[..., None] * (a_r[..., :, None] * a_r[..., None, :] + a_i[..., :, None] * a_i[..., None, :])
    return info, prec


def evidence_message(sample, coefficients, d, n0, symbols=None) -> GaussianMessage:
    """Likelihood of one whitened sample as a message over its window.

    ``coefficients[j]`` multiplies the ``j``-th window symbol; ``symbols``
    gives their ``(device, index)`` labels (defaults to ``(j, 0)``).
    """
    if n0 <= 0:
        raise ZeroNoise("evidence precision diverges at n0 = 0; use an exact solve")
    coefficients = np.atleast_1d(np.asarray(coefficients, dtype=complex))
    if symbols is None:
        symbols = [(j, 0) for j in range(coefficients.size)]
    if len(symbols) != coefficients.size:
        raise ShapeMismatch("one coefficient per window symbol is required")
    info, prec = _evidence_arrays(coefficients, complex(sample), d, n0)
    return GaussianMessage(info, prec, _labels(symbols))


def shift_window(msg: GaussianMessage, dropped: Sequence, introduced: Sequence) -> GaussianMessage:
    """Move a message to the next window of the chain.

    ``dropped`` symbols are integrated out and ``introduced`` symbols join
    with a flat prior. The result is ordered by ``(device, index)``.
    """
    current = msg.symbols
    dropped = [tuple(s) for s in dropped]
    introduced = [tuple(s) for s in introduced]
    missing = set(dropped) - set(current)
    if missing:
        raise ShapeMismatch(f"cannot drop symbols not in the window: {sorted(missing)}")
    retained = [s for s in current if s not in set(dropped)]
    if set(introduced) & set(retained):
        raise ShapeMismatch("introduced symbols overlap retained ones")
    n = len(current)
    pos = {s: j for j, s in enumerate(current)}
    keep = [pos[s] for s in retained]
    keep = np.array(keep + [j + n for j in keep], dtype=int)
    drop = [pos[s] for s in dropped]
    drop = np.array(drop + [j + n for j in drop], dtype=int)
    Jk, hk, _ = _schur(msg.prec, msg.info, keep, drop)

    new_syms = sorted(retained + introduced)
    nn = len(new_syms)
    out = GaussianMessage.flat(new_syms)
    npos = {s: j for j, s in enumerate(new_syms)}
    idx = [npos[s] for s in retained]
    idx = np.array(idx + [j + nn for j in idx], dtype=int)
    out.prec[np.ix_(idx, idx)] = Jk
    out.info[idx] = hk
    return out


def _moments(J, h, n_dev):
    """Moment form of ``(J, h)``; pseudo-inverse only if the symbol sum stays estimable."""
    w, U = np.linalg.eigh(J)
    top = w[-1] if w[-1] > 0 else 0.0
    cond = np.inf if w[0] <= 0 else top / w[0]
    if top > 0 and w[0] > top / MAX_CONDITION:
        inv_w = 1.0 / w
        pinv = False
    else:
        null = w <= top * PINV_RTOL if top > 0 else np.ones_like(w, dtype=bool)
        u = np.zeros((2 * n_dev, 2))
        u[:n_dev, 0] = 1.0
        u[n_dev:, 1] = 1.0
        leak = np.linalg.norm(U[:, null].T @ u) / np.linalg.norm(u)
        if top == 0 or leak > ESTIMABLE_RTOL:
            raise RankDeficientMarginal(
                f"marginal precision is singular (condition {cond:.3g}) and the symbol sum "
                "is not identifiable"
            )
        inv_w = np.where(null, 0.0, 1.0 / np.where(null, 1.0, w))
        pinv = True
    cov = (U * inv_w) @ U.T
    return cov @ h, 0.5 * (cov + cov.T), pinv, float(cond)


def _window_coefficients(geom: SlotGeometry, D: CoefficientMatrix, L: int):
    lay = window_layout(geom, L)
    M = geom.n_devices
    mat = D.matrix.tocsr()
    if mat.shape != (geom.n_whitened(L), M * L):
        raise ShapeMismatch(f"D has shape {mat.shape}, expected {(geom.n_whitened(L), M * L)}")
    rows = np.repeat(np.arange(mat.shape[0]), np.diff(mat.indptr))
    dev = mat.indices % M
    sym = mat.indices // M + 1
    if np.any(lay.symbol[rows, dev] != sym):
        raise ShapeMismatch("D has entries outside the window structure of this geometry")
    coeff = np.zeros((mat.shape[0], M), dtype=complex)
    coeff[rows, dev] = mat.data
    return lay, coeff


def forward_backward(
    geom: SlotGeometry, stream, D: CoefficientMatrix, n0: float, *, diagnostics=None, trace=False
):
    """Per-index marginal likelihoods ``f(y | s[i])`` for ``i = 1..L``.

    Messages live in a fixed slot layout (one complex slot per device);
    padding symbols get zero coefficients and therefore stay exactly flat.
    With ``trace=True`` every forward/backward message is kept on
    ``diagnostics.messages`` as ``(direction, t, GaussianMessage)``.
    """
    if getattr(stream, "kind", "whitened") != "whitened":
        raise ShapeMismatch("the chain runs on whitened samples")
    if n0 <= 0:
        raise ZeroNoise("forward_backward requires n0 > 0")
    y = np.asarray(getattr(stream, "values", stream), dtype=complex)
    M, Mf = geom.n_devices, geom.n_filters
    L, rem = divmod(y.size + 1, Mf)
    if rem or L < 2:
        raise ShapeMismatch(f"{y.size} samples do not fit {Mf} filters")
    L -= 1
    lay, coeff = _window_coefficients(geom, D, L)
    W = y.size
    info, prec = _evidence_arrays(coeff, y, geom.sub_lengths[lay.filt], n0)

    diag = diagnostics if diagnostics is not None else ChainDiagnostics()
    if trace:
        diag.messages = []

    # per boundary group: index grids for marginalizing its devices' slots
    grids = []
    for members in geom.membership:
        drop = np.array(list(members) + [m + M for m in members], dtype=int)
        keep = np.setdiff1d(np.arange(2 * M), drop)
        grids.append((keep, drop, np.ix_(keep, keep), np.ix_(keep, drop), np.ix_(drop, drop)))
    # group whose devices advance between window t and t + 1
    moving = np.where(lay.filt < Mf - 1, lay.filt + 1, 0)
    n_targets = L
    target_of = np.full(W, -1)
    target_of[Mf - 1 :: Mf] = np.arange(n_targets)

    def shift(J, h, g):
        keep, drop, kk, kd, dd = grids[g]
        Jn = np.zeros_like(J)
        hn = np.zeros_like(h)
        Jdd = J[dd]
        if Jdd.any() or h[drop].any():
            P, truncated = _pinv_psd(Jdd)
            if truncated:
                diag.truncated_inversions += 1
            K = J[kd] @ P
            Jk = J[kk] - K @ J[kd].T
            Jn[kk] = 0.5 * (Jk + Jk.T)
            hn[keep] = h[keep] - K @ h[drop]
        else:
            Jn[kk] = J[kk]
            hn[keep] = h[keep]
        return Jn, hn

    def record(direction, t, J, h):
        labels = _labels([(m, int(lay.symbol[t, m])) for m in range(M)])
        diag.messages.append((direction, t, GaussianMessage(h.copy(), J.copy(), labels)))

    back_J = np.zeros((n_targets, 2 * M, 2 * M))
    back_h = np.zeros((n_targets, 2 * M))
    J = np.zeros((2 * M, 2 * M))
    h = np.zeros(2 * M)
    for t in range(W - 1, 0, -1):
        if trace:
            record("backward", t, J, h)
        J, h = shift(J + prec[t], h + info[t], moving[t - 1])
        if target_of[t - 1] >= 0:
            back_J[target_of[t - 1]] = J
            back_h[target_of[t - 1]] = h
    if trace:
        record("backward", 0, J, h)

    marginals = []
    J = np.zeros((2 * M, 2 * M))
    h = np.zeros(2 * M)
    for t in range(W):
        if trace:
            record("forward", t, J, h)
        Jt = J + prec[t]
        ht = h + info[t]
        j = target_of[t]
        if j >= 0:
            mean, cov, pinv, cond = _moments(Jt + back_J[j], ht + back_h[j], M)
            diag.pseudo_inverse_marginals += pinv
            diag.max_condition = max(diag.max_condition, cond)
            marginals.append(SymbolMarginal(mean, cov, int(lay.index[t]), pinv, cond))
        if t < W - 1:
            J, h = shift(Jt, ht, moving[t])
    return marginals


def sum_marginal(marg: SymbolMarginal):
    """Likelihood of ``s_plus[i]``: complex mean and 2x2 real covariance."""
    n = marg.mean.size // 2
    mean = marg.mean[:n].sum() + 1j * marg.mean[n:].sum()
    S = marg.cov
    cov = np.array(
        [
            [S[:n, :n].sum(), S[:n, n:].sum()],
            [S[n:, :n].sum(), S[n:, n:].sum()],
        ]
    )
    return complex(mean), cov
