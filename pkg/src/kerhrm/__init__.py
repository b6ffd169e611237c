"""Kernelized heterogeneous risk minimization in plain numpy/scipy.

Modules
-------
mlp
    Two-layer MLP, tangent features, feedback training.
ntf_space
    Gram eigendecomposition of the tangent features and the orthogonal kernel update.
invariant
    Invariant direction with a gradient-variance penalty.
heterogeneity
    EM mixture of kernel-ridge regressors for latent environments.
datagen
    Synthetic generators and the MNIST / CSV loaders.
harness, report, cli
    The outer loop, baselines, metrics and on-disk reports.
"""
from .config import ExperimentConfig, load_config, parse_config_text
from .dataset import Dataset, concat
from .errors import *  # noqa: F401,F403
from .harness import env_diagnostics, make_data, metrics, run_erm, run_experiment, run_irm, run_kerhrm
from .heterogeneity import ClusterModel, EnvPartition, assign_environments, run_clustering
from .invariant import InvariantDirection, fit_theta_inv, irm_baseline
from .mlp import MlpState, forward, init_mlp, ntf, train_feedback
from .ntf_space import KernelState, NtfSpace, build_gram, decompose, orthogonal_update
from .report import Report, emit_report, load_report

__version__ = "0.1.0"
