"""Experiment orchestration: the KerHRM outer loop, baselines, and metrics.

One KerHRM iteration is

1. cluster ``(PsiV, Y)`` into learned environments,
2. fit ``theta_inv`` on those environments in reduced NTF space,
3. retrain the network from ``w0`` with the alignment penalty,
4. project ``theta_inv`` out of the clustering features.

The tangent features are computed once at ``w0``.
"""
from __future__ import annotations

import itertools
import logging
import time
import warnings
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import datagen, heterogeneity, invariant, mlp, ntf_space
from .config import ExperimentConfig
from .dataset import Dataset, concat
from .errors import ConfigError, DegeneratePenaltyError, KerHRMError
from .report import Report

log = logging.getLogger(__name__)

TEST_SEED_OFFSET = 100_003


# ---------------------------------------------------------------------------
# data


def _mnist_files(root):
    root = Path(root)
    out = []
    for stem in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"):
        for cand in (root / stem, root / (stem + ".gz"), root / stem.replace("-idx", ".idx")):
            if cand.exists():
                out.append(cand)
                break
        else:
            raise ConfigError(f"{stem} not found under {root}")
    return out


def make_data(cfg: ExperimentConfig, seed: int):
    """Pooled training set and the list of test environments for one seed."""
    if cfg.task == "classification":
        gen = datagen.SpuriousClsConfig(d=cfg.d, sigma_s2=cfg.sigma_s2, sigma_v2=cfg.sigma_v2,
                                        bias_rates=cfg.train_rates, n=cfg.train_n, scramble=cfg.scramble,
                                        seed=seed, scramble_seed=seed, noise_param=cfg.noise_param)
        train = concat(datagen.gen_spurious_classification(gen))
        test_gen = datagen.SpuriousClsConfig(**{**gen.__dict__, "bias_rates": cfg.test_rates, "n": cfg.test_n,
                                                "seed": seed + TEST_SEED_OFFSET})
        return train, datagen.gen_spurious_classification(test_gen)
    if cfg.task == "regression":
        gen = datagen.SelBiasConfig(n_s=cfg.n_s, d=cfg.d, beta=cfg.beta, noise_sd=cfg.noise_sd,
                                    rates=cfg.train_rates, n=cfg.train_n, scramble=cfg.scramble, seed=seed,
                                    scramble_seed=seed, vb_index=cfg.vb_index)
        train = concat(datagen.gen_selection_bias(gen))
        test_gen = datagen.SelBiasConfig(**{**gen.__dict__, "rates": cfg.test_rates, "n": cfg.test_n,
                                            "seed": seed + TEST_SEED_OFFSET})
        return train, datagen.gen_selection_bias(test_gen)
    if cfg.task == "colored_mnist":
        raw = datagen.load_mnist_idx(*_mnist_files(cfg.mnist_dir))
        envs = datagen.make_colored_mnist(raw, datagen.ColoredMnistConfig(
            flips=cfg.flips, label_noise=cfg.label_noise, n=cfg.mnist_n, downsample=tuple(cfg.downsample),
            seed=seed))
        return concat(envs[:-1]), envs[-1:]
    envs = datagen.load_csv_regression(cfg.csv_path, cfg.target_col, cfg.env_col, cfg.thresholds,
                                       cfg.train_envs)
    train = concat([envs[e] for e in cfg.train_envs if envs[e] is not None])
    tests = [d for e, d in enumerate(envs) if d is not None and e not in cfg.train_envs]
    return train, tests


# ---------------------------------------------------------------------------
# metrics


def metrics(preds: Sequence[np.ndarray], Ys: Sequence[np.ndarray], task: str) -> dict:
    """Per-environment scores and their summary.

    Regression: per-environment MSE, ``mean`` (Mean_Error) and ``std``
    (Std_Error, sample sd with ``|E| - 1`` denominator, ``None`` for one
    environment).  Classification: per-environment accuracy of ``sign(pred)``.
    """
    if len(preds) < 1 or len(preds) != len(Ys):
        raise ConfigError("metrics need at least one environment and matching predictions")
    if task in ("classification", "colored_mnist"):
        name = "accuracy"
        per = [float(np.mean(np.where(p >= 0, 1.0, -1.0) == y)) for p, y in zip(preds, Ys)]
    else:
        name = "mse"
        per = [float(np.mean((np.asarray(p) - np.asarray(y)) ** 2)) for p, y in zip(preds, Ys)]
    out = {"metric": name, "per_env": per, "mean": float(np.mean(per)),
           "std": float(np.std(per, ddof=1)) if len(per) > 1 else None}
    if name == "mse":
        out["mean_error"], out["std_error"] = out["mean"], out["std"]
    return out


def _sym_kl(p, q):
    return float(p * np.log(p / q) + (1 - p) * np.log((1 - p) / (1 - q))
                 + q * np.log(q / p) + (1 - q) * np.log((1 - q) / (1 - p)))


def kl_diagnostic(labels, Y, attr) -> Optional[float]:
    """Mean symmetrised KL of P(Y=1 | C=c) between learned environments.

    Averaged over spurious values ``c`` and over environment pairs, with
    Laplace smoothing of 1.  ``None`` when ``Y`` is not binary, ``attr`` is not
    discrete, or fewer than two environments exist.
    """
    labels, Y, attr = np.asarray(labels), np.asarray(Y), np.asarray(attr)
    envs = np.unique(labels)
    cs = np.unique(attr)
    if len(envs) < 2 or not set(np.unique(Y)) <= {-1.0, 1.0} or len(cs) > 10:
        return None
    vals = []
    for a, b in itertools.combinations(envs, 2):
        for c in cs:
            pa = ((Y == 1) & (attr == c) & (labels == a)).sum() + 1
            na = ((attr == c) & (labels == a)).sum() + 2
            pb = ((Y == 1) & (attr == c) & (labels == b)).sum() + 1
            nb = ((attr == c) & (labels == b)).sum() + 2
            vals.append(_sym_kl(pa / na, pb / nb))
    return float(np.mean(vals))


def purity(learned, truth) -> float:
    """Best-matching agreement between learned clusters and true environments.

    With no more clusters than environments, clusters are matched one-to-one
    (exhaustively for up to six clusters); with more clusters, each cluster
    maps to its majority environment.
    """
    learned, truth = np.asarray(learned), np.asarray(truth)
    ls, ts = np.unique(learned), np.unique(truth)
    C = np.array([[np.sum((learned == a) & (truth == b)) for b in ts] for a in ls])
    n = len(learned)
    if len(ls) > len(ts):
        return float(C.max(axis=1).sum() / n)
    if len(ls) <= 6:
        best = max(sum(C[i, p[i]] for i in range(len(ls))) for p in itertools.permutations(range(len(ts)), len(ls)))
        return float(best / n)
    r, c = linear_sum_assignment(-C)
    return float(C[r, c].sum() / n)


def env_diagnostics(learned_labels, dataset: Dataset) -> dict:
    out = {"purity": None, "kl": None}
    if dataset.latent_env is not None:
        out["purity"] = purity(learned_labels, dataset.latent_env)
    if dataset.spurious_attr is not None:
        out["kl"] = kl_diagnostic(learned_labels, dataset.Y, dataset.spurious_attr)
    return out


# ---------------------------------------------------------------------------
# pipeline pieces


def _network(cfg, d, seed):
    return mlp.init_mlp(d, cfg.hidden, seed=seed, activation=cfg.activation, mirrored=cfg.init == "mirrored")


def _learning_rate(cfg, model, X):
    if cfg.lr > 0:
        return float(cfg.lr)
    return cfg.lr_scale * X.shape[0] / mlp.ntk_top_eigenvalue(model, X, iters=50)


def _space(cfg, model, X, k):
    if cfg.gram == "closed_form":
        G = mlp.ntk_gram(model, X)
    else:
        G = ntf_space.build_gram(mlp.ntf_rows(model, X), block=cfg.gram_block)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        space = ntf_space.decompose(G, min(k, X.shape[0]))
    return space, [str(w.message) for w in caught]


def _evaluate(cfg, model, train, tests):
    tr = metrics([mlp.forward(model, train.X)], [train.Y], cfg.task)
    te = metrics([mlp.forward(model, t.X) for t in tests], [t.Y for t in tests], cfg.task)
    return tr, te


def _slice(space, k):
    return space if space.k == k else ntf_space.NtfSpace(space.U[:, :k], space.S[:k])


def _split(train, val_frac, seed):
    if val_frac <= 0:
        return train, None
    rng = np.random.default_rng([seed, 31337])
    perm = rng.permutation(train.n)
    nv = max(1, int(round(val_frac * train.n)))
    return train.subset(np.sort(perm[nv:])), train.subset(np.sort(perm[:nv]))


def _theta(cfg, space, target, labels, notes):
    try:
        return invariant.fit_theta_inv(space, target, labels, cfg.alpha, cfg.theta_lr or None, cfg.theta_steps)
    except DegeneratePenaltyError:
        notes.append("single learned environment; fell back to pooled regression")
        return invariant.fit_theta_inv(space, target, np.zeros(len(target), int), 0.0,
                                       cfg.theta_lr or None, cfg.theta_steps)


def _kerhrm_core(cfg, train, tests, seed, model, space, lr, T):
    f0 = mlp.forward(model.at_init(), train.X)
    target = train.Y - f0
    state = ntf_space.initial_state(space)
    trace, notes = [], []
    final = None
    for t in range(1, T + 1):
        try:
            cm, part = heterogeneity.run_clustering(state, target, K=cfg.K, max_iter=cfg.em_max_iter,
                                                    tol=cfg.em_tol, seed=seed * 1000 + t,
                                                    restarts=cfg.em_restarts)
            notes.extend(part.warnings)
            labels = heterogeneity.assign_environments(part, cfg.assign_mode, seed * 1000 + t)
            direction = _theta(cfg, space, target, labels, notes)
            em = np.asarray(part.objective_trace)
            row = {"iteration": t, "em_iterations": len(part.objective_trace),
                   "em_max_increase": float(np.max(np.diff(em))) if em.size > 1 else 0.0,
                   "clustering_objective": part.objective_trace[-1], "q": part.R.mean(0).tolist(),
                   "theta_norm": float(np.linalg.norm(direction.theta)),
                   "theta_converged": direction.converged, "penalty": direction.penalty_value,
                   "env_sizes": np.bincount(labels, minlength=cfg.K).tolist()}
            row.update(env_diagnostics(labels, train))
            if cfg.train_every_iteration or t == T:
                net, rep = mlp.train_feedback(model, train, direction.theta, space, cfg.lam, cfg.epochs, lr)
                tr, te = _evaluate(cfg, net, train, tests)
                row.update(alignment=rep.alignment, train_converged=rep.converged,
                           train_metric=tr["mean"], test_metric=te["mean"], test_std=te["std"])
                final = (net, tr, te)
            state = ntf_space.orthogonal_update(space, state, direction.theta, cfg.update_mode)
            row["orthogonality"] = ntf_space.orthogonality_residual(state.PsiV, direction.theta)
        except KerHRMError as exc:
            raise type(exc)(f"KerHRM iteration {t}: {exc}") from exc
        trace.append(row)
    return final, trace, notes


def _entry(seed, method, k, tr, te, trace=(), notes=(), t0=None, diagnostics=None):
    return {"seed": int(seed), "method": method, "k": k, "train": tr, "test": te, "trace": list(trace),
            "diagnostics": diagnostics or {}, "warnings": list(notes),
            "timing": None if t0 is None else time.perf_counter() - t0}


def _with_k(cfg, train, tests, seed, method, core):
    """Run ``core`` for every candidate k; with several, pick by pooled validation MSE."""
    t0 = time.perf_counter()
    ks = sorted(set(cfg.k))
    fit, val = (train, None) if len(ks) == 1 else _split(train, cfg.val_frac, seed)
    model = _network(cfg, train.d, seed)
    lr = _learning_rate(cfg, model, fit.X)
    full, notes = _space(cfg, model, fit.X, max(ks))
    best = None
    for k in ks:
        if k > full.k:
            notes.append(f"k={k} skipped: numerical rank is {full.k}")
            continue
        (net, tr, te), trace, extra = core(fit, _slice(full, k), model, lr)
        score = None
        if val is not None:
            score = float(np.mean((mlp.forward(net, val.X) - val.Y) ** 2))
        if best is None or (score is not None and score < best[0]):
            best = (score, k, tr, te, trace, notes + extra)
    score, k, tr, te, trace, notes = best
    diag = {"validation_mse": score, "k_candidates": ks, "lr": lr}
    return _entry(seed, method, k, tr, te, trace, notes, t0, diag)


def run_kerhrm(cfg: ExperimentConfig, train: Dataset, tests: List[Dataset], seed: Optional[int] = None,
               T: Optional[int] = None, method: str = "kerhrm") -> Report:
    seed = cfg.seeds[0] if seed is None else seed
    T = cfg.T if T is None else T

    def core(fit, space, model, lr):
        return _kerhrm_core(cfg, fit, tests, seed, model, space, lr, T)

    return Report(cfg.to_dict(), [_with_k(cfg, train, tests, seed, method, core)])


def run_irm(cfg: ExperimentConfig, train: Dataset, tests: List[Dataset], seed: Optional[int] = None) -> Report:
    """Same feedback network, with theta fitted on the true training environments."""
    seed = cfg.seeds[0] if seed is None else seed

    def core(fit, space, model, lr):
        f0 = mlp.forward(model.at_init(), fit.X)
        direction = invariant.irm_baseline(fit, space, cfg.alpha, cfg.theta_lr or None, cfg.theta_steps,
                                           target=fit.Y - f0)
        net, rep = mlp.train_feedback(model, fit, direction.theta, space, cfg.lam, cfg.epochs, lr)
        tr, te = _evaluate(cfg, net, fit, tests)
        row = {"iteration": 1, "theta_norm": float(np.linalg.norm(direction.theta)),
               "alignment": rep.alignment, "train_metric": tr["mean"], "test_metric": te["mean"]}
        return (net, tr, te), [row], []

    return Report(cfg.to_dict(), [_with_k(cfg, train, tests, seed, "irm", core)])


def run_erm(cfg: ExperimentConfig, train: Dataset, tests: List[Dataset], seed: Optional[int] = None) -> Report:
    seed = cfg.seeds[0] if seed is None else seed
    t0 = time.perf_counter()
    model = _network(cfg, train.d, seed)
    lr = _learning_rate(cfg, model, train.X)
    net, rep = mlp.train_feedback(model, train, lam=0.0, epochs=cfg.epochs, lr=lr)
    tr, te = _evaluate(cfg, net, train, tests)
    notes = [] if rep.converged else ["ERM training loss did not decrease"]
    return Report(cfg.to_dict(), [_entry(seed, "erm", None, tr, te, (), notes, t0, {"lr": lr})])


RUNNERS = {
    "kerhrm": run_kerhrm,
    "kerhrm-static": lambda cfg, tr, te, seed=None: run_kerhrm(cfg, tr, te, seed, T=1, method="kerhrm-static"),
    "erm": run_erm,
    "irm": run_irm,
}


def run_experiment(cfg: ExperimentConfig, progress=None) -> Report:
    """Every configured method on every seed, reduced in fixed seed order."""
    cfg.validate()
    t0 = time.perf_counter()
    entries = []
    for seed in cfg.seeds:
        train, tests = make_data(cfg, seed)
        for method in cfg.methods:
            rep = RUNNERS[method](cfg, train, tests, seed=seed)
            entries.extend(rep.entries)
            e = rep.entries[-1]
            (progress or log.info)(f"seed {seed} {method}: train {e['train']['mean']:.4f} "
                                   f"test {e['test']['mean']:.4f}")
    report = Report(cfg.to_dict(), entries)
    report.timing["total_seconds"] = time.perf_counter() - t0
    return report
