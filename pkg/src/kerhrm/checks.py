"""Self-contained invariant suite behind ``kerhrm check``.

Each check builds small random instances, compares an analytic quantity
against an independent route (central differences, dense SVD, brute force),
and reports the worst discrepancy.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import heterogeneity, invariant, mlp, ntf_space
from .harness import metrics


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} worst={self.worst:.3e}  tol={self.tolerance:.0e}"


def central_difference(fn: Callable[[np.ndarray], float], x, h=1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def _small_mlp(rng, activation="tanh"):
    d, h = int(rng.integers(1, 5)), int(rng.integers(2, 7))
    return mlp.init_mlp(d, h, seed=int(rng.integers(1 << 31)), activation=activation), d


def check_ntf(rng, instances) -> float:
    worst = 0.0
    for _ in range(instances):
        model, d = _small_mlp(rng)
        X = rng.normal(size=(3, d))
        F = mlp.ntf(model, X)
        w0 = model.flatten()
        for i in range(X.shape[0]):
            fd = central_difference(lambda w: float(mlp.forward(model.with_params(w), X[i:i + 1])[0]), w0)
            worst = max(worst, relative_error(F[i], fd))
    return worst


def check_closed_form_gram(rng, instances) -> float:
    worst = 0.0
    for _ in range(instances):
        model, d = _small_mlp(rng, activation="relu")
        X = rng.normal(size=(int(rng.integers(2, 9)), d))
        F = mlp.ntf(model, X)
        worst = max(worst, relative_error(mlp.ntk_gram(model, X), F @ F.T))
    return worst


def check_gram_svd(rng, instances) -> float:
    worst = 0.0
    for _ in range(instances):
        n, p = int(rng.integers(3, 51)), int(rng.integers(3, 51))
        F = rng.normal(size=(n, p))
        k = int(rng.integers(1, min(n, p) + 1))
        space = ntf_space.space_from_features(F, k)
        s = np.linalg.svd(F, compute_uv=False)[:space.k]
        worst = max(worst, float(np.max(np.abs(space.S - s))))
    return worst


def check_invariant_gradient(rng, instances) -> float:
    worst = 0.0
    for _ in range(instances):
        n, k, E = int(rng.integers(6, 30)), int(rng.integers(1, 6)), int(rng.integers(2, 4))
        Psi, Y = rng.normal(size=(n, k)), rng.normal(size=n)
        labels = np.arange(n) % E
        obj = invariant.build_objective(Psi, Y, labels, float(rng.uniform(0, 20)))
        theta = rng.normal(size=k)
        worst = max(worst, relative_error(obj(theta)[1], central_difference(lambda t: obj(t)[0], theta)))
    return worst


def check_feedback_gradient(rng, instances) -> float:
    worst = 0.0
    for _ in range(instances):
        model, d = _small_mlp(rng)
        n = int(rng.integers(4, 9))
        X, Y = rng.normal(size=(n, d)), rng.normal(size=n)
        space = ntf_space.space_from_features(mlp.ntf(model, X), min(3, n))
        theta = rng.normal(size=space.k)
        moved = model.with_params(model.flatten() + 0.1 * rng.normal(size=model.p))
        w = moved.flatten()

        def value(v):
            return mlp.feedback_objective(moved.with_params(v), X, Y, theta, space, 2.0)[0]

        worst = max(worst, relative_error(mlp.feedback_objective(moved, X, Y, theta, space, 2.0)[1],
                                          central_difference(value, w)))
    return worst


def check_orthogonality(rng, instances) -> float:
    worst = 0.0
    for _ in range(instances):
        n, p = int(rng.integers(5, 40)), int(rng.integers(5, 40))
        space = ntf_space.space_from_features(rng.normal(size=(n, p)), int(rng.integers(2, min(n, p))))
        state = ntf_space.initial_state(space)
        for mode in ("fresh", "cumulative"):
            s = state
            for _ in range(2):
                theta = rng.normal(size=space.k)
                s = ntf_space.orthogonal_update(space, s, theta, mode)
                worst = max(worst, ntf_space.orthogonality_residual(s.PsiV, theta))
    return worst


def check_em_monotone(rng, instances) -> float:
    """Largest per-iteration increase of the EM objective (negative is fine)."""
    worst = -np.inf
    for _ in range(instances):
        n, k = int(rng.integers(20, 80)), int(rng.integers(1, 4))
        P = rng.normal(size=(n, k))
        Y = np.where(rng.random(n) < 0.5, 1, -1) * (P @ rng.normal(size=k)) + 0.1 * rng.normal(size=n)
        _, part = heterogeneity.run_clustering(P, Y, K=int(rng.integers(2, 4)), seed=int(rng.integers(1000)))
        tr = np.asarray(part.objective_trace)
        if tr.size > 1:
            worst = max(worst, float(np.max(np.diff(tr))))
    return max(worst, 0.0)


def check_metrics(rng, instances) -> float:
    m = metrics([np.zeros(1)] * 3, [np.full(1, 1.0), np.full(1, np.sqrt(2)), np.full(1, np.sqrt(3))], "regression")
    return max(abs(m["mean_error"] - 2.0), abs(m["std_error"] - 1.0))


CHECKS = [
    ("ntf_vs_finite_differences", check_ntf, 1e-4),
    ("closed_form_ntk_gram", check_closed_form_gram, 1e-10),
    ("gram_eigh_vs_dense_svd", check_gram_svd, 1e-8),
    ("invariant_objective_gradient", check_invariant_gradient, 1e-4),
    ("feedback_objective_gradient", check_feedback_gradient, 1e-4),
    ("orthogonal_update", check_orthogonality, 1e-8),
    ("em_objective_monotone", check_em_monotone, 1e-7),
    ("mean_and_std_error", check_metrics, 1e-12),
]


def run_checks(instances=20, seed=0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, fn, tol in CHECKS:
        worst = fn(rng, instances)
        out.append(CheckResult(name, bool(worst <= tol), worst, tol))
    return out
