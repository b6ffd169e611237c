from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InputShapeError


@dataclass(frozen=True)
class Dataset:
    """Features, targets and optional diagnostic labels for one or more environments.

    ``latent_env`` and ``spurious_attr`` are never consumed by the training
    code paths of KerHRM or ERM; they exist so that purity and KL diagnostics
    can be computed after the fact (and so IRM can be given true labels).
    """

    X: np.ndarray
    Y: np.ndarray
    latent_env: Optional[np.ndarray] = None
    spurious_attr: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.asarray(self.Y, dtype=float).ravel()
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise InputShapeError(f"X must be non-empty, got shape {X.shape}")
        if Y.shape[0] != X.shape[0]:
            raise InputShapeError(f"Y has {Y.shape[0]} entries, X has {X.shape[0]} rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise InputShapeError("X and Y must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        for name in ("latent_env", "spurious_attr"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v).ravel()
            if v.shape[0] != X.shape[0]:
                raise InputShapeError(f"{name} has {v.shape[0]} entries, X has {X.shape[0]} rows")
            object.__setattr__(self, name, v)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.X[idx],
            self.Y[idx],
            None if self.latent_env is None else self.latent_env[idx],
            None if self.spurious_attr is None else self.spurious_attr[idx],
        )


def concat(parts: Sequence[Dataset], env_ids: Optional[Sequence[int]] = None) -> Dataset:
    """Pool several datasets; ``latent_env`` is filled from ``env_ids`` when given."""
    parts = list(parts)
    X = np.vstack([p.X for p in parts])
    Y = np.concatenate([p.Y for p in parts])
    if env_ids is not None:
        env = np.concatenate([np.full(p.n, e, dtype=int) for p, e in zip(parts, env_ids)])
    elif all(p.latent_env is not None for p in parts):
        env = np.concatenate([p.latent_env for p in parts])
    else:
        env = None
    if all(p.spurious_attr is not None for p in parts):
        attr = np.concatenate([p.spurious_attr for p in parts])
    else:
        attr = None
    return Dataset(X, Y, env, attr)
