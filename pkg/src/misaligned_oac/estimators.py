"""Arithmetic-sum estimators for one slot.

All four map received samples to an estimate of ``s_plus``:

* ``direct_ml``   -- ``V A^-1 r`` on the standard samples (LU solve)
* ``whitened_ml`` -- weighted least squares on the whitened samples
* ``sp_ml``       -- per-index marginals from the Gaussian chain, then summed
* ``aligned``     -- read off the last filter, whose window holds ``s[i]``
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .channel import SampleStream, SlotObservation
from .errors import ShapeMismatch, SingularModel
from .gaussian_chain import ChainDiagnostics, forward_backward, sum_marginal
from .model import CoefficientMatrix, SlotGeometry, summation_matrix

ESTIMATOR_IDS = ("direct_ml", "whitened_ml", "sp_ml", "aligned")
MAX_CONDITION = 1e12
ESTIMABLE_RTOL = 1e-8


@dataclass
class EstimateReport:
    estimate: np.ndarray
    estimator_id: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def flags(self) -> list:
        return sorted(k for k, v in self.diagnostics.items() if v is True)


def _as_dense(mat):
    if isinstance(mat, CoefficientMatrix):
        mat = mat.matrix
    return mat.toarray() if hasattr(mat, "toarray") else np.asarray(mat)


def _dense_fortran(mat) -> np.ndarray:
    """Private column-major copy, so the LU factorization can run in place."""
    if isinstance(mat, CoefficientMatrix):
        mat = mat.matrix
    if hasattr(mat, "tocoo"):
        coo = mat.tocoo()
        out = np.zeros(coo.shape, dtype=complex, order="F")
        out[coo.row, coo.col] = coo.data
        return out
    return np.array(mat, dtype=complex, order="F")


def _require(stream, kind):
    if getattr(stream, "kind", kind) != kind:
        raise ShapeMismatch(f"expected a {kind} sample stream, got {stream.kind}")
    return np.asarray(getattr(stream, "values", stream), dtype=complex)


def estimate_direct_ml(r: SampleStream, A, V) -> EstimateReport:
    """``V A^-1 r`` through an LU factorization with a condition check."""
    t0 = time.perf_counter()
    values = _require(r, "standard")
    A = _dense_fortran(A)
    if A.shape[0] != A.shape[1]:
        raise SingularModel(
            f"A is {A.shape[0]}x{A.shape[1]}; coinciding offsets leave the standard model "
            "underdetermined"
        )
    if values.size != A.shape[0]:
        raise ShapeMismatch(f"{values.size} samples for a {A.shape} model")
    anorm = sla.lapack.zlange("1", A)
    lu, piv, info = sla.lapack.zgetrf(A, overwrite_a=True)
    if info > 0:
        raise SingularModel("A is exactly singular")
    rcond, _ = sla.lapack.zgecon(lu, anorm)
    if rcond * MAX_CONDITION < 1.0:
        raise SingularModel(f"A is numerically singular (condition ~{1 / max(rcond, 1e-300):.3g})")
    s_hat, _ = sla.lapack.zgetrs(lu, piv, values)
    est = np.asarray(V @ s_hat).ravel()
    return EstimateReport(
        est,
        "direct_ml",
        {"condition": float(1.0 / rcond), "wall_time": time.perf_counter() - t0},
    )


def estimate_whitened_ml(y: SampleStream, D, V, noise_var=None) -> EstimateReport:
    """Weighted least squares ``V (D^H S^-1 D)^-1 D^H S^-1 y`` with ``S = diag(noise_var)``.

    Solved through an SVD of the row-scaled ``D``. If ``D`` is rank deficient
    the minimum-norm solution is used, provided every row of ``V`` lies in
    the row space (the sum is still identifiable); otherwise ``SingularModel``.
    ``noise_var=None`` (or any zero variance) means identity weighting.
    """
    t0 = time.perf_counter()
    values = _require(y, "whitened")
    D = _as_dense(D)
    V = _as_dense(V)
    if values.size != D.shape[0]:
        raise ShapeMismatch(f"{values.size} samples for a {D.shape} model")
    if noise_var is not None:
        noise_var = np.asarray(noise_var, dtype=float)
        if noise_var.shape != values.shape:
            raise ShapeMismatch("noise_var must have one entry per sample")
        if np.any(noise_var <= 0):
            noise_var = None
    scale = np.ones(values.size) if noise_var is None else 1.0 / np.sqrt(noise_var)
    Dw = D * scale[:, None]
    yw = values * scale
    U, S, Vh = np.linalg.svd(Dw, full_matrices=False)
    top = S[0] if S.size else 0.0
    cond = np.inf if S.size == 0 or S[-1] == 0 else top / S[-1]
    full = S.size == D.shape[1] and S[-1] * MAX_CONDITION > top
    diagnostics = {"condition": float(cond), "weighted": noise_var is not None}
    if full:
        coef = (U.conj().T @ yw) / S
        s_hat = Vh.conj().T @ coef
    else:
        rank = int(np.sum(S > top / MAX_CONDITION)) if top > 0 else 0
        Vh_r = Vh[:rank]
        # component of each row of V outside the row space of Dw
        resid = V - (V @ Vh_r.conj().T) @ Vh_r
        if rank == 0 or np.linalg.norm(resid) > ESTIMABLE_RTOL * np.linalg.norm(V):
            raise SingularModel(
                f"D is rank deficient (rank {rank} of {D.shape[1]}) and the sum is not identifiable"
            )
        coef = (U[:, :rank].conj().T @ yw) / S[:rank]
        s_hat = Vh_r.conj().T @ coef
        diagnostics["min_norm"] = True
    est = np.asarray(V @ s_hat).ravel()
    diagnostics["wall_time"] = time.perf_counter() - t0
    return EstimateReport(est, "whitened_ml", diagnostics)


def whitened_noise_var(geom: SlotGeometry, L: int, n0: float) -> np.ndarray:
    """Diagonal of the whitened-noise covariance, ``n0 / d_b`` per sample."""
    d = np.tile(geom.sub_lengths, L + 1)[: geom.n_whitened(L)]
    return n0 / d


def estimate_sp_ml(y: SampleStream, geom: SlotGeometry, n0: float, D) -> EstimateReport:
    """Sum of the means of the per-index marginals from the Gaussian chain.

    At ``n0 = 0`` the chain is undefined and the exact noiseless solve is used.
    """
    t0 = time.perf_counter()
    values = _require(y, "whitened")
    if n0 == 0:
        L = (values.size + 1) // geom.n_filters - 1
        rep = estimate_whitened_ml(y, D, summation_matrix(geom.n_devices, L))
        rep.estimator_id = "sp_ml"
        rep.diagnostics["noiseless_fallback"] = True
        return rep
    diag = ChainDiagnostics()
    marginals = forward_backward(geom, y, D, n0, diagnostics=diag)
    est = np.array([sum_marginal(m)[0] for m in marginals])
    return EstimateReport(
        est,
        "sp_ml",
        {
            "truncated_inversions": diag.truncated_inversions,
            "pseudo_inverse_marginals": diag.pseudo_inverse_marginals,
            "ridge": diag.truncated_inversions > 0 or diag.pseudo_inverse_marginals > 0,
            "condition": diag.max_condition,
            "wall_time": time.perf_counter() - t0,
        },
    )


def estimate_aligned(y: SampleStream, geom: SlotGeometry) -> EstimateReport:
    """``s_plus[i] ~ y_M'[i]``: the last filter sees every device at index ``i``."""
    values = _require(y, "whitened")
    L, rem = divmod(values.size + 1, geom.n_filters)
    if rem:
        raise ShapeMismatch(f"{values.size} samples do not fit {geom.n_filters} filters")
    return EstimateReport(values[geom.aligned_rows(L - 1)].copy(), "aligned", {})


def estimate(estimator_id: str, obs: SlotObservation) -> EstimateReport:
    """Run one estimator on a simulated slot."""
    geom, L = obs.geom, obs.length
    if estimator_id == "direct_ml":
        if obs.standard is None:
            raise ValueError("slot was observed without standard samples")
        return estimate_direct_ml(obs.standard, obs.A, summation_matrix(geom.n_devices, L))
    if estimator_id == "whitened_ml":
        var = whitened_noise_var(geom, L, obs.n0) if obs.n0 > 0 else None
        return estimate_whitened_ml(obs.whitened, obs.D, summation_matrix(geom.n_devices, L), var)
    if estimator_id == "sp_ml":
        return estimate_sp_ml(obs.whitened, geom, obs.n0, obs.D)
    if estimator_id == "aligned":
        return estimate_aligned(obs.whitened, geom)
    raise ValueError(f"unknown estimator {estimator_id!r}; choose from {ESTIMATOR_IDS}")


def relative_error(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    denom = max(np.linalg.norm(b), np.finfo(float).tiny)
    return float(np.linalg.norm(a - b) / denom)
