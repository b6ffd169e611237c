"""Spectral reduction of the NTF matrix and the heterogeneity-aware kernel.

The right singular vectors ``V`` (p x k) are never formed.  Everything is
expressed through the n x n Gram matrix ``G = Phi^T Phi = U S^2 U^T``:
reduced features are ``Psi = U S`` and reduced coordinates of a function
change ``g`` are ``S^-1 U^T g``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy import linalg

from .errors import (ConfigError, DegenerateDirectionError, InputShapeError, NumericError,
                     SingularScaleError)

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-8


@dataclass(frozen=True)
class NtfSpace:
    U: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        U = np.array(self.U, dtype=float)
        S = np.array(self.S, dtype=float).ravel()
        if U.ndim != 2 or U.shape[1] != S.size:
            raise InputShapeError(f"U {U.shape} and S {S.shape} disagree")
        U.flags.writeable = False
        S.flags.writeable = False
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "S", S)

    @property
    def k(self) -> int:
        return self.S.size

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def Psi(self) -> np.ndarray:
        return self.U * self.S

    def reduced_coords(self, delta_pred) -> np.ndarray:
        return reduced_coords(self, delta_pred)


@dataclass(frozen=True)
class KernelState:
    PsiV: np.ndarray
    t: int = 0
    theta_history: List[np.ndarray] = field(default_factory=list)


def build_gram(ntf_rows, block: int = 512, n: int | None = None) -> np.ndarray:
    """Gram matrix ``G[i, j] = <phi(x_i), phi(x_j)>`` accumulated block by block.

    ``ntf_rows`` is either a dense (n, p) array or a callable
    ``rows(start, stop)`` returning that slice of rows (it is called again for
    every block pair, so at most two blocks are alive at a time).
    """
    if block < 1:
        raise ConfigError("block must be >= 1")
    if callable(ntf_rows):
        n = getattr(ntf_rows, "n", n)
        if n is None:
            raise ConfigError("n is required for a callable row source")
        rows = ntf_rows
    else:
        arr = np.asarray(ntf_rows, dtype=float)
        n = arr.shape[0]

        def rows(a, b):
            return arr[a:b]

    G = np.empty((n, n))
    starts = list(range(0, n, block))
    for i in starts:
        Bi = rows(i, min(i + block, n))
        if not np.all(np.isfinite(Bi)):
            raise NumericError(f"non-finite NTF entry in rows {i}:{i + len(Bi)}")
        G[i:i + len(Bi), i:i + len(Bi)] = Bi @ Bi.T
        for j in starts:
            if j <= i:
                continue
            Bj = rows(j, min(j + block, n))
            blk = Bi @ Bj.T
            G[i:i + len(Bi), j:j + len(Bj)] = blk
            G[j:j + len(Bj), i:i + len(Bi)] = blk.T
    return G


def decompose(G, k: int, rtol: float = 1e-10) -> NtfSpace:
    """Top-``k`` eigenpairs of the Gram matrix as (U, S) with ``S = sqrt(eigenvalue)``.

    If fewer than ``k`` eigenvalues exceed ``rtol`` times the largest, ``k`` is
    shrunk to the numerical rank and a warning is issued.
    """
    G = np.asarray(G, dtype=float)
    n = G.shape[0]
    if G.shape != (n, n):
        raise InputShapeError(f"G must be square, got {G.shape}")
    if not 1 <= k <= n:
        raise ConfigError(f"k must lie in [1, {n}], got {k}")
    G = 0.5 * (G + G.T)
    lam, U = linalg.eigh(G, subset_by_index=[n - k, n - 1])
    lam, U = lam[::-1], U[:, ::-1]
    top = max(lam[0], 0.0)
    keep = lam > rtol * top if top > 0 else np.zeros(k, bool)
    rank = int(keep.sum())
    if rank == 0:
        raise NumericError("Gram matrix is numerically zero")
    if rank < k:
        warnings.warn(f"k={k} exceeds numerical rank; shrinking to k={rank}", RuntimeWarning, stacklevel=2)
        lam, U = lam[:rank], U[:, :rank]
    # deterministic sign: largest-magnitude entry of each column positive
    piv = np.argmax(np.abs(U), axis=0)
    U = U * np.sign(U[piv, np.arange(U.shape[1])])
    return NtfSpace(U, np.sqrt(lam))


def space_from_features(F, k: int) -> NtfSpace:
    """Reduced space of an explicit feature matrix ``F`` (n x p), via its Gram matrix."""
    return decompose(build_gram(F), k)


def reduced_coords(space: NtfSpace, delta_pred) -> np.ndarray:
    delta_pred = np.asarray(delta_pred, dtype=float).ravel()
    if delta_pred.size != space.n:
        raise InputShapeError(f"delta_pred has {delta_pred.size} entries, expected {space.n}")
    if np.min(space.S) < 1e-12:
        raise SingularScaleError(f"smallest singular value {np.min(space.S):.3g} below 1e-12")
    return (space.U.T @ delta_pred) / space.S


def parameter_direction(space: NtfSpace, features, theta) -> np.ndarray:
    """``V theta`` for an explicit (n, p) feature matrix, using ``V = Phi U S^-1``."""
    return np.asarray(features, dtype=float).T @ (space.U @ (np.asarray(theta) / space.S))


def initial_state(space: NtfSpace) -> KernelState:
    return KernelState(space.Psi.copy(), 0, [])


def _project_out(P, unit, ref_norms):
    P = P - np.outer(P @ unit, unit)
    # second pass removes the rounding residue of the first
    P = P - np.outer(P @ unit, unit)
    # rows annihilated up to rounding are set to exact zero
    P[np.linalg.norm(P, axis=1) <= 1e-12 * ref_norms] = 0.0
    return P


def orthogonality_residual(PsiV, theta) -> float:
    """max_i |<PsiV_i, theta>| / (||PsiV_i|| ||theta|| + 1e-12)."""
    theta = np.asarray(theta, dtype=float)
    num = np.abs(PsiV @ theta)
    den = np.linalg.norm(PsiV, axis=1) * np.linalg.norm(theta) + 1e-12
    return float(np.max(num / den)) if len(num) else 0.0


def orthogonal_update(space: NtfSpace, state: KernelState, theta_inv, mode: str = "fresh") -> KernelState:
    """Remove the ``theta_inv`` component from the reduced features.

    ``fresh`` starts from ``U S`` every time.  ``cumulative`` projects the
    current ``PsiV`` along ``theta_inv`` orthogonalised against the earlier
    directions, so the whole span of past directions stays removed (this
    assumes every earlier update was cumulative too).  The
    orthogonality of the result is asserted.
    """
    theta = np.asarray(theta_inv, dtype=float).ravel()
    if theta.size != space.k:
        raise InputShapeError(f"theta has {theta.size} entries, expected k={space.k}")
    tn = np.linalg.norm(theta)
    if not np.isfinite(tn) or tn < 1e-300:
        raise DegenerateDirectionError("theta_inv has zero norm")
    unit = theta / tn
    ref = np.linalg.norm(space.Psi, axis=1)
    if mode == "fresh":
        PsiV = _project_out(space.Psi, unit, ref)
    elif mode == "cumulative":
        r = unit
        if state.theta_history:
            B = linalg.orth(np.column_stack(state.theta_history))
            r = r - B @ (B.T @ r)
            r = r - B @ (B.T @ r)
        rn = np.linalg.norm(r)
        # a direction already inside the removed span needs no further projection
        PsiV = state.PsiV.copy() if rn < 1e-12 else _project_out(state.PsiV, r / rn, ref)
    else:
        raise ConfigError(f"unknown orthogonal update mode {mode!r}")
    res = orthogonality_residual(PsiV, theta)
    if res > ORTHO_TOL:
        raise NumericError(f"orthogonality violated after kernel update: {res:.3g} > {ORTHO_TOL}")
    return KernelState(PsiV, state.t + 1, list(state.theta_history) + [unit])


def kernel_matrix(state: KernelState) -> np.ndarray:
    P = state.PsiV
    K = P @ P.T
    return 0.5 * (K + K.T)
