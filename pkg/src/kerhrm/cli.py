"""Command line entry point: ``kerhrm run | gen | check``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import METHODS, ExperimentConfig, dump_config, load_config, with_overrides
from .errors import KerHRMError

log = logging.getLogger("kerhrm")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    return with_overrides(cfg, seed=args.seed, method=getattr(args, "method", None), out=args.out)


def write_dataset_csv(dataset, path) -> Path:
    """Columns ``x0..x{d-1}, y`` plus ``env`` and ``spurious`` when known."""
    cols = [dataset.X, dataset.Y[:, None]]
    header = [f"x{j}" for j in range(dataset.d)] + ["y"]
    for name, v in (("env", dataset.latent_env), ("spurious", dataset.spurious_attr)):
        if v is not None:
            cols.append(np.asarray(v, dtype=float)[:, None])
            header.append(name)
    path = Path(path)
    np.savetxt(path, np.hstack(cols), delimiter=",", header=",".join(header), comments="", fmt="%.17g")
    return path


def cmd_run(args) -> int:
    from .harness import run_experiment
    from .report import emit_report

    cfg = _config(args)
    report = run_experiment(cfg, progress=None if args.quiet else print)
    paths = emit_report(report, cfg.out)
    (Path(cfg.out) / "config.txt").write_text(dump_config(cfg))
    if not args.quiet:
        for method, agg in report.aggregates.items():
            print(f"{method:>14}: train {agg['metric']} {agg['train_mean']:.4f}  test {agg['test_mean']:.4f}")
        for w in report.warnings:
            print(f"warning: {w}")
        print(f"wrote {paths['json']}, {paths['results']}, {paths['trace']}")
    return 0


def cmd_gen(args) -> int:
    from .harness import make_data

    cfg = _config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for seed in cfg.seeds:
        train, tests = make_data(cfg, seed)
        written.append(write_dataset_csv(train, out / f"train_seed{seed}.csv"))
        for i, t in enumerate(tests):
            written.append(write_dataset_csv(t, out / f"test{i}_seed{seed}.csv"))
    if not args.quiet:
        for p in written:
            print(f"wrote {p}")
    return 0


def cmd_check(args) -> int:
    from .checks import run_checks

    results = run_checks(instances=args.instances, seed=args.seed or 0)
    if not args.quiet:
        for r in results:
            print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kerhrm", description="Kernelized heterogeneous risk minimization")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat 'key = value' config file")
        p.add_argument("--seed", type=int, help="run this seed only (overrides the config list)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--quiet", action="store_true", help="print nothing on success")

    p = sub.add_parser("run", help="run an experiment from a config file")
    common(p)
    p.add_argument("--method", choices=METHODS, help="run this method only")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen", help="write the configured datasets to CSV")
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("check", help="run the invariant suite on random instances")
    common(p)
    p.add_argument("--instances", type=int, default=20, help="random instances per check")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (KerHRMError, OSError) as exc:
        print(f"kerhrm: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
