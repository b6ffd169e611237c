"""Heterogeneity exploration: a mixture of kernel-ridge regressors fitted by EM.

Each cluster centre is a Gaussian around a kernel regressor on the variant
features, ``h_j(x, y) = N(y; f_j(x), sigma^2)`` with
``f_j(x) = sum_i alpha_j[i] kappa(x_i, x)``.  EM minimises the negative mean
log-likelihood of the mixture ``sum_j q_j h_j``.

The centres are ridge-regularised, so the quantity EM decreases monotonically
is the penalised objective ``L_c + ridge * sum_j ||f_j||_H^2 / (2 sigma^2)``;
that is what ``objective_trace`` records.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .errors import ConfigError, NumericError

log = logging.getLogger(__name__)

LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)
MONOTONE_SLACK = 1e-7


@dataclass
class ClusterModel:
    K: int
    alpha_coeffs: np.ndarray  # (K, n) dual coefficients
    q: np.ndarray
    sigma: float
    ridge: float
    beta: Optional[np.ndarray] = None  # (K, k) primal weights when features are known

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.ridge <= 0:
            raise ConfigError(f"ridge must be positive, got {self.ridge}")


@dataclass
class EnvPartition:
    R: np.ndarray
    hard_labels: np.ndarray
    objective_trace: List[float] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.R.shape[1]


def gaussian_logpdf(residual, sigma):
    return -LOG_SQRT_2PI - np.log(sigma) - 0.5 * (np.asarray(residual) / sigma) ** 2


def center_density(model: ClusterModel, j: int, kvec, y) -> float:
    """``h_j`` at one point given its kernel row ``kvec[i] = kappa(x_i, x)``."""
    if model.sigma <= 0:
        raise ConfigError("sigma must be positive")
    f = float(np.asarray(model.alpha_coeffs[j]) @ np.asarray(kvec, dtype=float))
    return float(np.exp(gaussian_logpdf(y - f, model.sigma)))


def _log_joint(preds, Y, q, sigma):
    with np.errstate(divide="ignore"):
        logq = np.log(q)
    return logq[None, :] + gaussian_logpdf(Y[:, None] - preds, sigma)


def _responsibilities(logj):
    lse = logsumexp(logj, axis=1)
    bad = ~np.isfinite(lse)
    R = np.exp(logj - np.where(bad, 0.0, lse)[:, None])
    if bad.any():
        R[bad] = 1.0 / logj.shape[1]
    return R, lse, int(bad.sum())


def em_e_step(model: ClusterModel, K_mat, Y, preds=None) -> np.ndarray:
    """Posterior cluster probabilities, computed in log space.

    Rows where every density underflows are set to uniform with a warning.
    """
    Y = np.asarray(Y, dtype=float)
    if preds is None:
        preds = np.asarray(K_mat) @ model.alpha_coeffs.T
    R, _, nbad = _responsibilities(_log_joint(preds, Y, model.q, model.sigma))
    if nbad:
        warnings.warn(f"{nbad} points underflowed in every cluster; set to uniform", RuntimeWarning, stacklevel=2)
    return R


def em_m_step(R, K_mat, Y, ridge):
    """Dual coefficients and mixture weights from responsibilities.

    For each cluster solves ``(W_j K + ridge I) alpha_j = W_j Y`` with
    ``W_j = diag(R[:, j])``.  Returns ``(alpha_coeffs, q)``.
    """
    if ridge <= 0:
        raise ConfigError("ridge must be positive")
    R = np.asarray(R, dtype=float)
    K_mat = np.asarray(K_mat, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n, K = R.shape
    alphas = np.empty((K, n))
    for j in range(K):
        A = R[:, j, None] * K_mat
        A[np.diag_indices(n)] += ridge
        try:
            alphas[j] = linalg.solve(A, R[:, j] * Y)
        except linalg.LinAlgError as exc:
            raise NumericError(f"singular M-step system for cluster {j}") from exc
    return alphas, R.mean(0)


def _m_step_features(R, P, Y, ridge):
    """Same solution as :func:`em_m_step` for ``K = P P^T``, in O(n k^2)."""
    n, K = R.shape
    k = P.shape[1]
    betas = np.empty((K, k))
    alphas = np.empty((K, n))
    for j in range(K):
        w = R[:, j]
        A = (P * w[:, None]).T @ P
        A[np.diag_indices(k)] += ridge
        try:
            betas[j] = linalg.solve(A, P.T @ (w * Y), assume_a="pos")
        except linalg.LinAlgError as exc:
            raise NumericError(f"singular M-step system for cluster {j}") from exc
        alphas[j] = w * (Y - P @ betas[j]) / ridge
    return betas, alphas, R.mean(0)


def clustering_objective(preds, Y, q, sigma, betas=None, ridge_per_sample=0.0):
    """Negative mean log-likelihood, plus the ridge term when ``betas`` is given."""
    _, lse, _ = _responsibilities(_log_joint(preds, Y, q, sigma))
    val = -float(np.mean(lse))
    if betas is not None:
        val += ridge_per_sample * float(np.sum(betas * betas)) / (2 * sigma**2)
    return val


def default_ridge(P) -> float:
    return 1e-3 * float(np.sum(P * P)) / P.shape[0]


def pooled_sigma(P, Y, ridge) -> float:
    """Residual RMS of a single ridge fit on all points."""
    n = P.shape[0]
    beta, _, _ = _m_step_features(np.ones((n, 1)), P, Y, ridge * n)
    r = Y - P @ beta[0]
    s = float(np.sqrt(np.mean(r * r)))
    return max(s, 1e-6 * (float(np.std(Y)) + 1e-12))


def _init_R(n, K, rng, jitter):
    D = rng.dirichlet(np.ones(K), size=n)
    return (1 - jitter) / K + jitter * D


def _em(P, Y, K, sigma, ridge, max_iter, tol, R, notes):
    n = P.shape[0]
    reinit_done = degenerate = False
    trace = []
    betas, alphas, q = _m_step_features(R, P, Y, ridge * n)
    for it in range(max_iter):
        mass = R.sum(0)
        empty = np.flatnonzero(mass < 1e-8 * n)
        if empty.size:
            if reinit_done and not degenerate:
                degenerate = True
                notes.append(f"cluster(s) {empty.tolist()} emptied again; degenerate clustering")
                warnings.warn("degenerate clustering: a cluster emptied twice", RuntimeWarning, stacklevel=3)
            elif not reinit_done:
                reinit_done = True
                preds = P @ betas.T
                worst = np.argsort(-np.min((Y[:, None] - preds) ** 2, axis=1))
                R = R.copy()
                for c, j in enumerate(empty):
                    take = worst[c::empty.size][: max(1, n // K)]
                    R[take] = 0.0
                    R[take, j] = 1.0
                notes.append(f"reinitialised empty cluster(s) {empty.tolist()} at iteration {it}")
                betas, alphas, q = _m_step_features(R, P, Y, ridge * n)
                trace = []
        preds = P @ betas.T
        logj = _log_joint(preds, Y, q, sigma)
        R, lse, nbad = _responsibilities(logj)
        if nbad:
            notes.append(f"{nbad} points underflowed at iteration {it}")
        obj = -float(np.mean(lse)) + ridge * float(np.sum(betas * betas)) / (2 * sigma**2)
        trace.append(obj)
        if len(trace) >= 2:
            if trace[-1] > trace[-2] + MONOTONE_SLACK:
                raise NumericError(f"EM objective increased at iteration {it}: {trace[-2]:.12g} -> {trace[-1]:.12g}")
            if abs(trace[-2] - trace[-1]) < tol:
                break
        betas, alphas, q = _m_step_features(R, P, Y, ridge * n)
    return betas, alphas, q, R, trace


def run_clustering(state, Y, K=2, max_iter=200, tol=1e-6, seed=0, sigma=None, ridge=None,
                   restarts=1, jitter=0.5, init_R=None):
    """EM on ``(PsiV, Y)`` with the linear kernel ``PsiV PsiV^T``.

    ``ridge`` is per sample: the M-step solves ``(W_j K + n ridge I) a = W_j Y``,
    which keeps the centres invariant to duplicating the data.  Defaults are
    ``ridge = 1e-3 trace(K)/n`` and ``sigma`` = residual RMS of a pooled ridge
    fit.  ``restarts`` independent initialisations are tried and the lowest
    final objective is kept.

    Returns ``(ClusterModel, EnvPartition)``.
    """
    if K < 2:
        raise ConfigError(f"need K >= 2 clusters, got {K}")
    P = np.asarray(getattr(state, "PsiV", state), dtype=float)
    Y = np.asarray(Y, dtype=float).ravel()
    n = P.shape[0]
    if n < K:
        raise ConfigError(f"n={n} smaller than K={K}")
    if ridge is None:
        ridge = default_ridge(P)
    if ridge <= 0:
        # PsiV can be identically zero after a full annihilation
        ridge = 1e-12
    if sigma is None:
        sigma = pooled_sigma(P, Y, ridge)
    rng = np.random.default_rng(seed)
    best = None
    for r in range(max(1, restarts)):
        R0 = np.asarray(init_R, dtype=float) if (init_R is not None and r == 0) else _init_R(n, K, rng, jitter)
        notes: List[str] = []
        out = _em(P, Y, K, sigma, ridge, max_iter, tol, R0, notes)
        if best is None or out[4][-1] < best[0][4][-1]:
            best = (out, notes)
    (betas, alphas, q, R, trace), notes = best
    model = ClusterModel(K, alphas, q, float(sigma), float(ridge), betas)
    labels = np.argmax(R, axis=1)
    return model, EnvPartition(R, labels, trace, notes)


def assign_environments(partition: EnvPartition, mode="argmax", seed=0) -> np.ndarray:
    """Hard labels: argmax (ties to the lowest id) or one categorical draw per row."""
    R = np.asarray(partition.R if hasattr(partition, "R") else partition, dtype=float)
    if mode == "argmax":
        return np.argmax(R, axis=1)
    if mode == "sample":
        rng = np.random.default_rng(seed)
        c = np.cumsum(R, axis=1)
        u = rng.random(R.shape[0]) * c[:, -1]
        return np.minimum((u[:, None] >= c).sum(1), R.shape[1] - 1)
    raise ConfigError(f"unknown assignment mode {mode!r}")
