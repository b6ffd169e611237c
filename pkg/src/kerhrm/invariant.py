"""Invariant direction in reduced NTF space (the prediction module).

Objective, with per-environment mean squared loss ``L_e`` over rows of
``Psi``::

    J(theta) = sum_e L_e(theta) + alpha * mean_e || grad L_e - mean grad ||^2

Under squared loss every per-environment gradient is affine in ``theta``, so
``J`` is a quadratic and its gradient is exact.  It is minimised by gradient
descent from zero with step halving on any increase.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError, DegeneratePenaltyError, EmptyEnvironmentError, InputShapeError

log = logging.getLogger(__name__)


@dataclass
class InvariantDirection:
    theta: np.ndarray
    alpha: float
    per_env_losses: List[float]
    penalty_value: float
    converged: bool
    objective_trace: List[float] = field(default_factory=list)
    steps: int = 0


def env_loss_and_grad(theta, Psi, Y, idx):
    """Mean squared loss of ``Psi[idx] @ theta`` against ``Y[idx]`` and its gradient."""
    idx = np.asarray(idx)
    if idx.size == 0 or (idx.dtype == bool and not idx.any()):
        raise EmptyEnvironmentError("environment index set is empty")
    Pe = np.asarray(Psi, dtype=float)[idx]
    r = Pe @ np.asarray(theta, dtype=float) - np.asarray(Y, dtype=float)[idx]
    m = Pe.shape[0]
    return float(r @ r / m), 2.0 / m * (Pe.T @ r)


def gradient_variance(grads: Sequence[np.ndarray], jacobians: Optional[Sequence[np.ndarray]] = None):
    """Mean squared deviation of per-environment gradients from their mean.

    With ``jacobians`` (``d grad_e / d theta`` for each environment) the
    exact theta-gradient of the penalty is returned as the second element,
    otherwise the deviations ``grad_e - mean`` are.
    """
    G = np.asarray(grads, dtype=float)
    if G.ndim != 2 or G.shape[0] < 2:
        raise DegeneratePenaltyError("gradient variance needs at least two environments")
    D = G - G.mean(0)
    E = G.shape[0]
    value = float(np.sum(D * D) / E)
    if jacobians is None:
        return value, D
    # sum_e D_e = 0, so the mean-jacobian term drops out
    grad = 2.0 / E * sum(np.asarray(A).T @ d for A, d in zip(jacobians, D))
    return value, grad


class _Quadratic:
    """Per-environment second moments so that every evaluation is O(E k^2)."""

    def __init__(self, Psi, Y, groups, alpha):
        self.alpha = alpha
        self.M, self.c, self.s = [], [], []
        for idx in groups:
            Pe, ye = Psi[idx], Y[idx]
            m = len(idx)
            self.M.append(Pe.T @ Pe / m)
            self.c.append(Pe.T @ ye / m)
            self.s.append(float(ye @ ye / m))
        self.M = np.array(self.M)
        self.c = np.array(self.c)
        self.s = np.array(self.s)

    def parts(self, theta):
        Mt = self.M @ theta
        losses = theta @ Mt.T - 2 * self.c @ theta + self.s
        grads = 2 * (Mt - self.c)
        return losses, grads

    def __call__(self, theta):
        losses, grads = self.parts(theta)
        J = losses.sum()
        g = grads.sum(0)
        pen = 0.0
        if len(losses) >= 2 and self.alpha > 0:
            pen, gp = gradient_variance(grads, 2 * self.M)
            J += self.alpha * pen
            g = g + self.alpha * gp
        return float(J), g, losses, pen

    def hessian(self):
        H = 2 * self.M.sum(0)
        E = len(self.M)
        if E >= 2 and self.alpha > 0:
            A = 2 * (self.M - self.M.mean(0))
            H = H + self.alpha * 2.0 / E * sum(a.T @ a for a in A)
        return H

    def minimizer(self):
        """Closed-form stationary point, used as a test oracle."""
        E = len(self.M)
        rhs = 2 * self.c.sum(0)
        if E >= 2 and self.alpha > 0:
            A = 2 * (self.M - self.M.mean(0))
            b = 2 * (self.c - self.c.mean(0))
            rhs = rhs + self.alpha * 2.0 / E * sum(a.T @ bb for a, bb in zip(A, b))
        return np.linalg.lstsq(self.hessian(), rhs, rcond=None)[0]


def _groups(labels):
    labels = np.asarray(labels)
    return [np.flatnonzero(labels == e) for e in np.unique(labels)]


def _labels_of(envs):
    return getattr(envs, "hard_labels", envs)


def build_objective(Psi, Y, envs, alpha):
    Psi = np.asarray(Psi, dtype=float)
    Y = np.asarray(Y, dtype=float).ravel()
    if Psi.shape[0] != Y.size:
        raise InputShapeError(f"Psi has {Psi.shape[0]} rows, Y has {Y.size}")
    groups = [g for g in _groups(_labels_of(envs)) if g.size > 0]
    return _Quadratic(Psi, Y, groups, alpha)


def fit_theta_inv(space, Y, envs, alpha=10.0, lr=None, steps=5000, tol=1e-10) -> InvariantDirection:
    """Fit the invariant direction on the reduced features ``space.Psi``.

    ``envs`` is an :class:`~kerhrm.heterogeneity.EnvPartition` or a plain
    label vector.  ``lr=None`` uses ``1 / lambda_max`` of the exact Hessian.
    A single environment is accepted only when ``alpha == 0``.
    """
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    Psi = space.Psi if hasattr(space, "Psi") else np.asarray(space, dtype=float)
    obj = build_objective(Psi, Y, envs, alpha)
    if len(obj.M) < 2 and alpha > 0:
        raise DegeneratePenaltyError("all points fell into one environment")
    k = Psi.shape[1]
    theta = np.zeros(k)
    if lr is None:
        lr = 1.0 / max(np.linalg.eigvalsh(obj.hessian())[-1], 1e-300)
    J, g, losses, pen = obj(theta)
    g0 = np.linalg.norm(g)
    trace = [J]
    converged = False
    step = 0
    for step in range(1, steps + 1):
        cand = theta - lr * g
        Jc, gc, lc, pc = obj(cand)
        while Jc > J and lr > 1e-300:
            lr *= 0.5
            cand = theta - lr * g
            Jc, gc, lc, pc = obj(cand)
        if Jc > J:
            break
        theta, J, g, losses, pen = cand, Jc, gc, lc, pc
        trace.append(J)
        if np.linalg.norm(g) <= tol * (1.0 + g0):
            converged = True
            break
    if not converged:
        log.debug("invariant fit stopped after %d steps, |grad|=%.3g", step, np.linalg.norm(g))
    return InvariantDirection(theta, float(alpha), [float(v) for v in losses], float(max(pen, 0.0)),
                              converged, trace, step)


def irm_baseline(dataset, space, alpha=10.0, lr=None, steps=5000, target=None) -> InvariantDirection:
    """Same fit, but on the ground-truth environment labels carried by ``dataset``."""
    if dataset.latent_env is None:
        raise ConfigError("IRM baseline needs latent_env labels")
    Y = dataset.Y if target is None else target
    return fit_theta_inv(space, Y, dataset.latent_env, alpha, lr, steps)
