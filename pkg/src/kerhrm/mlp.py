"""Two-layer scalar-output MLP with closed-form Neural Tangent Features.

The network is ``f(x) = W2 . act(W1 x + b1) + b2``.  Parameters are flattened
in the order ``W1`` (row-major), ``b1``, ``W2``, ``b2`` so that
``p = hidden * input + 2 * hidden + 1``.

Everything here is plain numpy with hand-written backprop; the tests check it
against central finite differences.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .errors import ConfigError, DegenerateDirectionError, InputShapeError

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh")
# below this norm the alignment penalty is defined as zero (no gradient)
ALIGN_EPS = 1e-12


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0), (z > 0).astype(float)
    t = np.tanh(z)
    return t, 1.0 - t * t


@dataclass(frozen=True)
class MlpState:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: float
    w0: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        W1 = np.array(self.W1, dtype=float)
        h = W1.shape[0]
        b1 = np.array(self.b1, dtype=float).reshape(h)
        W2 = np.array(self.W2, dtype=float).reshape(h)
        w0 = np.array(self.w0, dtype=float).ravel()
        for a in (W1, b1, W2, w0):
            a.flags.writeable = False
        object.__setattr__(self, "W1", W1)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "W2", W2)
        object.__setattr__(self, "b2", float(self.b2))
        object.__setattr__(self, "w0", w0)
        if w0.size != self.p:
            raise InputShapeError(f"w0 has {w0.size} entries, expected p={self.p}")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def p(self) -> int:
        h, d = self.W1.shape
        return h * d + 2 * h + 1

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2, [self.b2]])

    def with_params(self, flat) -> "MlpState":
        """New state with parameters ``flat``; the w0 snapshot is carried over."""
        W1, b1, W2, b2 = unflatten(flat, self.hidden, self.input_dim)
        return MlpState(W1, b1, W2, b2, self.w0, self.activation)

    def at_init(self) -> "MlpState":
        return self.with_params(self.w0)


def unflatten(flat, hidden: int, input_dim: int):
    flat = np.asarray(flat, dtype=float).ravel()
    h, d = hidden, input_dim
    if flat.size != h * d + 2 * h + 1:
        raise InputShapeError(f"flat vector has {flat.size} entries, expected {h * d + 2 * h + 1}")
    W1 = flat[: h * d].reshape(h, d)
    b1 = flat[h * d : h * d + h]
    W2 = flat[h * d + h : h * d + 2 * h]
    return W1, b1, W2, float(flat[-1])


def from_params(W1, b1, W2, b2, activation="relu") -> MlpState:
    """Build a state whose w0 snapshot is the given parameters."""
    W1 = np.atleast_2d(np.asarray(W1, dtype=float))
    flat = np.concatenate([W1.ravel(), np.ravel(b1), np.ravel(W2), [float(b2)]])
    return MlpState(W1, b1, W2, b2, flat, activation)


def init_mlp(input_dim: int, hidden: int, seed=0, activation="relu", mirrored=False) -> MlpState:
    """Gaussian initialization with per-layer scale ``1/sqrt(fan_in)``.

    With ``mirrored=True`` the second half of the hidden units copies the
    first half with negated output weights, so ``f_{w0}`` is identically zero
    while the tangent features are unchanged in kind.  ``hidden`` must be even.
    """
    if input_dim < 1 or hidden < 1:
        raise ConfigError("input_dim and hidden must be positive")
    rng = np.random.default_rng(seed)
    if mirrored:
        if hidden % 2:
            raise ConfigError("mirrored initialization needs an even hidden width")
        m = hidden // 2
        W1 = rng.normal(0.0, 1.0 / np.sqrt(input_dim), (m, input_dim))
        b1 = rng.normal(0.0, 1.0 / np.sqrt(input_dim), m)
        W2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), m)
        W1, b1, W2 = np.vstack([W1, W1]), np.concatenate([b1, b1]), np.concatenate([W2, -W2])
    else:
        W1 = rng.normal(0.0, 1.0 / np.sqrt(input_dim), (hidden, input_dim))
        b1 = rng.normal(0.0, 1.0 / np.sqrt(input_dim), hidden)
        W2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), hidden)
    return from_params(W1, b1, W2, 0.0, activation)


def _check_X(model: MlpState, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise InputShapeError(f"expected X with {model.input_dim} columns, got shape {X.shape}")
    return X


def _hidden(model, X):
    Z = X @ model.W1.T + model.b1
    return _act(model.activation, Z)


def forward(model: MlpState, X) -> np.ndarray:
    X = _check_X(model, X)
    A, _ = _hidden(model, X)
    return A @ model.W2 + model.b2


def ntf(model: MlpState, X) -> np.ndarray:
    """Per-sample gradients of the output at the w0 snapshot, shape (n, p)."""
    X = _check_X(model, X)
    return _ntf_block(model.at_init(), X)


def _ntf_block(m0: MlpState, X) -> np.ndarray:
    A, dA = _hidden(m0, X)
    G = dA * m0.W2  # d f / d b1
    n = X.shape[0]
    dW1 = (G[:, :, None] * X[:, None, :]).reshape(n, -1)
    return np.hstack([dW1, G, A, np.ones((n, 1))])


def ntf_rows(model: MlpState, X) -> Callable[[int, int], np.ndarray]:
    """Streaming view of :func:`ntf`: ``rows(start, stop)`` recomputes one block."""
    X = _check_X(model, X)
    m0 = model.at_init()

    def rows(start, stop):
        return _ntf_block(m0, X[start:stop])

    rows.n = X.shape[0]
    rows.p = model.p
    return rows


def ntk_gram(model: MlpState, X, X2=None) -> np.ndarray:
    """Closed-form ``ntf(X) @ ntf(X2).T`` without forming the (n, p) features."""
    X = _check_X(model, X)
    X2 = X if X2 is None else _check_X(model, X2)
    m0 = model.at_init()
    A, dA = _hidden(m0, X)
    A2, dA2 = (A, dA) if X2 is X else _hidden(m0, X2)
    B, B2 = dA * m0.W2, dA2 * m0.W2
    return A @ A2.T + 1.0 + (B @ B2.T) * (X @ X2.T + 1.0)


def vjp(model: MlpState, X, g, _cache=None) -> np.ndarray:
    """Flat gradient of ``sum_i g_i f(x_i)`` at the current parameters."""
    X = _check_X(model, X)
    A, dA = _hidden(model, X) if _cache is None else _cache
    g = np.asarray(g, dtype=float)
    dZ = (g[:, None] * model.W2) * dA
    return np.concatenate([(dZ.T @ X).ravel(), dZ.sum(0), A.T @ g, [g.sum()]])


def jvp(model: MlpState, X, v) -> np.ndarray:
    """Directional derivative of the outputs along flat parameter vector ``v``."""
    X = _check_X(model, X)
    vW1, vb1, vW2, vb2 = unflatten(v, model.hidden, model.input_dim)
    A, dA = _hidden(model, X)
    dZ = X @ vW1.T + vb1
    return (dA * dZ) @ model.W2 + A @ vW2 + vb2


def ntk_top_eigenvalue(model: MlpState, X, iters=30, seed=0) -> float:
    """Largest eigenvalue of J J^T at the current parameters, by power iteration."""
    X = _check_X(model, X)
    u = np.random.default_rng(seed).normal(size=X.shape[0])
    lam = 0.0
    for _ in range(iters):
        u /= np.linalg.norm(u)
        w = jvp(model, X, vjp(model, X, u))
        lam = float(u @ w)
        u = w
    return lam


def alignment(theta, z) -> float:
    """|cos| between ``theta`` and ``z``; 0 when ``z`` is numerically zero."""
    nz = np.linalg.norm(z)
    if nz < ALIGN_EPS:
        return 0.0
    return float(abs(theta @ z) / (np.linalg.norm(theta) * nz))


def _reduced(coords, delta):
    return (coords.U.T @ delta) / coords.S


def feedback_objective(model: MlpState, X, Y, theta_inv=None, coords=None, lam=0.0, f0=None):
    """Composite loss ``MSE + lam * (1 - |cos(theta, S^-1 U^T (f_w - f_w0))|)``.

    Returns ``(value, flat_gradient, parts)`` where ``parts`` holds the mse,
    the alignment and the reduced coordinates.
    """
    X = _check_X(model, X)
    Y = np.asarray(Y, dtype=float)
    cache = _hidden(model, X)
    f = cache[0] @ model.W2 + model.b2
    n = X.shape[0]
    r = f - Y
    mse = float(r @ r / n)
    dfl = 2.0 * r / n
    parts = {"mse": mse, "alignment": None, "coords": None}
    value = mse
    if lam > 0:
        if f0 is None:
            f0 = forward(model.at_init(), X)
        theta = np.asarray(theta_inv, dtype=float)
        tn = np.linalg.norm(theta)
        z = _reduced(coords, f - f0)
        zn = np.linalg.norm(z)
        parts["coords"] = z
        if zn < ALIGN_EPS:
            parts["alignment"] = 0.0
        else:
            c = float(theta @ z) / (tn * zn)
            parts["alignment"] = abs(c)
            value += lam * (1.0 - abs(c))
            dz = np.sign(c) * (theta / (tn * zn) - c * z / zn**2)
            dfl = dfl - lam * (coords.U @ (dz / coords.S))
    return value, vjp(model, X, dfl, cache), parts


@dataclass
class TrainingReport:
    loss_trace: List[float] = field(default_factory=list)
    mse_trace: List[float] = field(default_factory=list)
    alignment: Optional[float] = None
    converged: bool = True


def train_feedback(model: MlpState, data, theta_inv=None, coords=None, lam=0.0, epochs=500,
                   lr=1e-3, batch_size=None, seed=0):
    """Full-batch gradient descent on the composite feedback loss.

    ``lam = 0`` is plain squared-loss training (the ERM path).  ``coords`` is
    anything exposing ``U`` (n x k) and ``S`` (k,) over the rows of
    ``data.X``.  With ``batch_size`` set, the squared-loss term is estimated on
    a random batch each step while the alignment term always sees the whole
    training set.

    Returns ``(new_state, TrainingReport)``.  The report's ``converged`` flag
    is cleared when the final loss exceeds the initial one.
    """
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    X, Y = data.X, data.Y
    X = _check_X(model, X)
    f0 = None
    if lam > 0:
        if theta_inv is None or coords is None:
            raise ConfigError("lambda > 0 needs theta_inv and coords")
        if np.linalg.norm(theta_inv) < ALIGN_EPS:
            raise DegenerateDirectionError("theta_inv has zero norm")
        if coords.U.shape[0] != X.shape[0]:
            raise InputShapeError("coords must be defined over the training rows")
        f0 = forward(model.at_init(), X)
    rng = np.random.default_rng(seed)
    w = model.flatten()
    cur = model
    rep = TrainingReport()
    for _ in range(epochs):
        val, grad, parts = feedback_objective(cur, X, Y, theta_inv, coords, lam, f0)
        if batch_size is not None and batch_size < X.shape[0]:
            idx = rng.choice(X.shape[0], batch_size, replace=False)
            _, g_mse, _ = feedback_objective(cur, X[idx], Y[idx])
            _, g_full_mse, _ = feedback_objective(cur, X, Y)
            grad = grad - g_full_mse + g_mse
        rep.loss_trace.append(val)
        rep.mse_trace.append(parts["mse"])
        w = w - lr * grad
        cur = cur.with_params(w)
    val, _, parts = feedback_objective(cur, X, Y, theta_inv, coords, lam, f0)
    rep.loss_trace.append(val)
    rep.mse_trace.append(parts["mse"])
    rep.alignment = parts["alignment"]
    # at w == w0 the alignment term is defined as 0, so the reference value is
    # the first loss evaluated away from the snapshot
    ref = rep.loss_trace[1] if (lam > 0 and len(rep.loss_trace) > 2) else rep.loss_trace[0]
    if not np.isfinite(val) or val > ref:
        rep.converged = False
        log.warning("feedback training did not decrease the loss (%.4g -> %.4g)", ref, val)
    return cur, rep
