"""Synthetic benchmarks, the MNIST IDX reader and CSV ingestion.

All labels are encoded as +-1.  Every generator returns one
:class:`~kerhrm.dataset.Dataset` per environment, with ``latent_env`` set to
the environment index and ``spurious_attr`` set to the spurious variable.
"""
from __future__ import annotations

import csv
import gzip
import logging
import struct
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .dataset import Dataset
from .errors import ConfigError, FormatError, ParseError, SizeError, StuckSamplerError

log = logging.getLogger(__name__)

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def random_orthogonal(dim: int, rng) -> np.ndarray:
    """Haar-ish orthogonal matrix from QR of a Gaussian, diagonal of R made positive."""
    Q, R = np.linalg.qr(rng.normal(size=(dim, dim)))
    return Q * np.sign(np.diag(R))


def _scramble(dim, kind, seed):
    if kind == "identity":
        return np.eye(dim)
    if kind == "random_orthogonal":
        return random_orthogonal(dim, np.random.default_rng([seed, 7919]))
    raise ConfigError(f"unknown scramble {kind!r}")


def _per_env(values, n_env, name):
    if np.isscalar(values):
        return [values] * n_env
    values = list(values)
    if len(values) != n_env:
        raise ConfigError(f"{name} needs {n_env} entries, got {len(values)}")
    return values


# ---------------------------------------------------------------------------
# spurious-correlation classification


@dataclass(frozen=True)
class SpuriousClsConfig:
    d: int = 5
    sigma_s2: float = 3.0
    sigma_v2: float = 0.3
    bias_rates: Tuple[float, ...] = (0.9, 0.8)
    n: Union[int, Tuple[int, ...]] = 1000
    scramble: str = "identity"
    seed: int = 0
    scramble_seed: Optional[int] = None
    noise_param: str = "variance"

    def validate(self):
        if self.noise_param not in ("variance", "std"):
            raise ConfigError(f"noise_param must be 'variance' or 'std', got {self.noise_param!r}")
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        if self.sigma_s2 <= 0 or self.sigma_v2 <= 0:
            raise ConfigError("variances must be positive")
        for r in self.bias_rates:
            if not 0 < r <= 1:
                raise ConfigError(f"bias rate must lie in (0, 1], got {r}")


def gen_spurious_classification(cfg: SpuriousClsConfig) -> List[Dataset]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    H = _scramble(2 * cfg.d, cfg.scramble, cfg.seed if cfg.scramble_seed is None else cfg.scramble_seed)
    if cfg.noise_param == "std":
        sd_s, sd_v = cfg.sigma_s2, cfg.sigma_v2
    else:
        sd_s, sd_v = np.sqrt(cfg.sigma_s2), np.sqrt(cfg.sigma_v2)
    out = []
    for e, (r, n) in enumerate(zip(cfg.bias_rates, _per_env(cfg.n, len(cfg.bias_rates), "n"))):
        Y = rng.choice([-1.0, 1.0], size=n)
        agree = np.zeros(n, bool)
        agree[rng.permutation(n)[: int(np.floor(n * r + 0.5))]] = True
        A = np.where(agree, Y, -Y)
        S = Y[:, None] + sd_s * rng.normal(size=(n, cfg.d))
        V = A[:, None] + sd_v * rng.normal(size=(n, cfg.d))
        X = np.hstack([S, V]) @ H.T
        out.append(Dataset(X, Y, np.full(n, e), A))
    return out


# ---------------------------------------------------------------------------
# selection-bias regression


def default_theta_s(n_s):
    base = [0.5, -1.0, 1.0, -0.5]
    return np.array([base[i] if i < 4 else (1.0 if i % 2 == 0 else -1.0) for i in range(n_s)])


@dataclass(frozen=True)
class SelBiasConfig:
    n_s: int = 5
    d: int = 10
    beta: float = 5.0
    theta_s: Optional[Tuple[float, ...]] = None
    noise_sd: float = float(np.sqrt(0.3))
    rates: Tuple[float, ...] = (2.3, -1.1)
    n: Union[int, Tuple[int, ...]] = (1000, 100)
    scramble: str = "identity"
    seed: int = 0
    scramble_seed: Optional[int] = None
    vb_index: int = 0
    window: int = 1_000_000

    def validate(self):
        if self.d < self.n_s + 1:
            raise ConfigError("d must be at least n_s + 1")
        if self.n_s < 3:
            raise ConfigError("the misspecification term needs n_s >= 3")
        for r in self.rates:
            if abs(r) <= 1:
                raise ConfigError(f"selection rate needs |r| > 1, got {r}")
        if not 0 <= self.vb_index < self.d - self.n_s:
            raise ConfigError("vb_index out of range")


def selection_probability(y, vb, r):
    """``|r| ** (-5 |y - sign(r) vb|)``."""
    return np.abs(r) ** (-5.0 * np.abs(np.asarray(y) - np.sign(r) * np.asarray(vb)))


def _draw_pool(cfg, rng, m):
    theta = default_theta_s(cfg.n_s) if cfg.theta_s is None else np.asarray(cfg.theta_s, float)
    Z = rng.normal(size=(m, cfg.n_s + 1))
    S = 0.8 * Z[:, :-1] + 0.2 * Z[:, 1:]
    V = rng.normal(size=(m, cfg.d - cfg.n_s))
    Y = S @ theta + cfg.beta * S[:, 0] * S[:, 1] * S[:, 2] + cfg.noise_sd * rng.normal(size=m)
    return S, V, Y


def gen_selection_bias(cfg: SelBiasConfig) -> List[Dataset]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    H = _scramble(cfg.d, cfg.scramble, cfg.seed if cfg.scramble_seed is None else cfg.scramble_seed)
    out = []
    for e, (r, n) in enumerate(zip(cfg.rates, _per_env(cfg.n, len(cfg.rates), "n"))):
        kept_S, kept_V, kept_Y = [], [], []
        have = proposed = accepted_window = proposed_window = 0
        while have < n:
            m = 4096
            S, V, Y = _draw_pool(cfg, rng, m)
            u = rng.random(m)
            keep = u <= selection_probability(Y, V[:, cfg.vb_index], r)
            kept_S.append(S[keep]), kept_V.append(V[keep]), kept_Y.append(Y[keep])
            have += int(keep.sum())
            proposed += m
            accepted_window += int(keep.sum())
            proposed_window += m
            if proposed_window >= cfg.window:
                if accepted_window / proposed_window < 1e-4:
                    raise StuckSamplerError(
                        f"env {e} (r={r}): acceptance {accepted_window}/{proposed_window} below 1e-4")
                accepted_window = proposed_window = 0
        S = np.vstack(kept_S)[:n]
        V = np.vstack(kept_V)[:n]
        Y = np.concatenate(kept_Y)[:n]
        X = np.hstack([S, V]) @ H.T
        out.append(Dataset(X, Y, np.full(n, e), V[:, cfg.vb_index]))
    return out


# ---------------------------------------------------------------------------
# linear two-environment example


def gen_example41(n: int, betas: Sequence[float], Sigma=0.5, seed=0, d=10):
    """``X = Y (psi_s + beta_e psi_v) + N(0, Sigma)``, one dataset per ``beta_e``.

    ``Sigma`` may be a scalar (isotropic variance) or a (d, d) covariance.
    Returns ``(datasets, psi_s, psi_v)``; the two directions are orthonormal.
    """
    rng = np.random.default_rng(seed)
    B = np.linalg.qr(rng.normal(size=(d, 2)))[0]
    psi_s, psi_v = B[:, 0].copy(), B[:, 1].copy()
    Sig = np.asarray(Sigma, dtype=float)
    if Sig.ndim == 0:
        Sig = float(Sig) * np.eye(d)
    L = None if not np.any(Sig) else np.linalg.cholesky(Sig)
    out = []
    for e, b in enumerate(betas):
        Y = rng.choice([-1.0, 1.0], size=n)
        X = Y[:, None] * (psi_s + b * psi_v)
        if L is not None:
            X = X + rng.normal(size=(n, d)) @ L.T
        out.append(Dataset(X, Y, np.full(n, e), np.sign(b) * Y if b else np.zeros(n)))
    return out, psi_s, psi_v


# ---------------------------------------------------------------------------
# MNIST


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, magic_expected, ndims):
    with _open(path) as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise FormatError(f"{path}: truncated header at offset 0")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != magic_expected:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{magic_expected:08x}")
    hdr = 4 + 4 * ndims
    if len(buf) < hdr:
        raise FormatError(f"{path}: truncated dimension header at offset {len(buf)}")
    dims = struct.unpack(">" + "I" * ndims, buf[4:hdr])
    size = int(np.prod(dims))
    if len(buf) < hdr + size:
        raise FormatError(f"{path}: truncated payload at offset {len(buf)}, need {hdr + size} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=hdr).reshape(dims)


def load_mnist_idx(image_path, label_path):
    """Read an IDX image/label pair.  Pixels are returned as float in [0, 1]."""
    images = _read_idx(image_path, IDX_IMAGES, 3)
    labels = _read_idx(label_path, IDX_LABELS, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"count mismatch at offset 4: {images.shape[0]} images vs {labels.shape[0]} labels")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(path, array):
    """Write a uint8 array in IDX format (test fixtures, round trips)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {1: IDX_LABELS, 3: IDX_IMAGES}[array.ndim]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.tobytes())


@dataclass(frozen=True)
class ColoredMnistConfig:
    flips: Tuple[float, ...] = (0.1, 0.2, 0.9)
    label_noise: float = 0.2
    n: Union[int, Tuple[int, ...]] = 2500
    downsample: Tuple[int, int] = (14, 14)
    seed: int = 0

    def validate(self):
        for p in tuple(self.flips) + (self.label_noise,):
            if not 0 <= p <= 1:
                raise ConfigError(f"probability out of [0, 1]: {p}")


def avg_pool(images, size):
    n, h, w = images.shape
    th, tw = size
    if h % th or w % tw:
        raise ConfigError(f"cannot average-pool {h}x{w} to {th}x{tw}")
    return images.reshape(n, th, h // th, tw, w // tw).mean(axis=(2, 4))


def make_colored_mnist(raw, cfg: ColoredMnistConfig = ColoredMnistConfig()) -> List[Dataset]:
    """Binary colored digits: label noise first, then the color as a noisy copy of the label."""
    cfg.validate()
    images, digits = raw
    ns = _per_env(cfg.n, len(cfg.flips), "n")
    if sum(ns) > len(digits):
        raise SizeError(f"requested {sum(ns)} images, only {len(digits)} available")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(digits))
    out, start = [], 0
    for e, (flip, n) in enumerate(zip(cfg.flips, ns)):
        idx = order[start:start + n]
        start += n
        Y = np.where(digits[idx] >= 5, 1.0, -1.0)
        Y = np.where(rng.random(n) < cfg.label_noise, -Y, Y)
        C = np.where(rng.random(n) < flip, -Y, Y)
        img = avg_pool(images[idx], cfg.downsample)
        chans = np.zeros((n, 2) + img.shape[1:])
        chans[C > 0, 0] = img[C > 0]
        chans[C < 0, 1] = img[C < 0]
        out.append(Dataset(chans.reshape(n, -1), Y, np.full(n, e), C))
    return out


# ---------------------------------------------------------------------------
# CSV


def load_csv_regression(path, target_col, env_col, thresholds, train_envs=(0,), drop_env_col=False):
    """Bucket CSV rows into environments by ``env_col`` and standardize features.

    Bucket ``e`` holds rows with ``thresholds[e-1] <= value < thresholds[e]``.
    Feature means and standard deviations come from ``train_envs`` only and
    are reused for every bucket.  Empty buckets come back as ``None``.
    """
    thresholds = np.asarray(thresholds, dtype=float)
    if np.any(np.diff(thresholds) <= 0):
        raise ConfigError("thresholds must be strictly increasing")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        for col in (target_col, env_col):
            if col not in header:
                raise ParseError(f"{path}: missing column {col!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {lineno} has {len(row)} cells, header has {len(header)}")
            vals = []
            for col, cell in zip(header, row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(f"{path}: non-numeric cell {cell!r} at row {lineno}, column {col!r}") from None
            rows.append(vals)
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    t = header.index(target_col)
    ev = header.index(env_col)
    feat_cols = [i for i in range(len(header)) if i != t and not (drop_env_col and i == ev)]
    env = np.searchsorted(thresholds, data[:, ev], side="right")
    X = data[:, feat_cols]
    train = np.isin(env, list(train_envs))
    if not train.any():
        raise ParseError(f"{path}: training environments {list(train_envs)} are empty")
    mu = X[train].mean(0)
    sd = X[train].std(0)
    sd[sd == 0] = 1.0
    X = (X - mu) / sd
    out = []
    for e in range(len(thresholds) + 1):
        m = env == e
        if not m.any():
            warnings.warn(f"environment {e} is empty", RuntimeWarning, stacklevel=2)
            out.append(None)
            continue
        out.append(Dataset(X[m], data[m, t], np.full(int(m.sum()), e), data[m, ev]))
    return out
