"""Invariant direction from environments with opposite spurious slopes.

``X = Y (psi_s + beta_e psi_v) + noise`` with beta = +2 in one environment
and -2 in the other.  Pooled least squares uses both directions; the
gradient-variance penalty suppresses the one whose relation to Y flips.
"""
import numpy as np

from kerhrm import datagen, invariant, ntf_space
from kerhrm.dataset import concat

envs, psi_s, psi_v = datagen.gen_example41(1000, (2.0, -2.0), Sigma=0.5, seed=0)
data = concat(envs)
space = ntf_space.space_from_features(data.X, data.d)


def input_direction(theta):
    w = np.linalg.lstsq(data.X, space.Psi @ theta, rcond=None)[0]
    return w / np.linalg.norm(w)


for alpha in (0.0, 1.0, 100.0):
    fit = invariant.fit_theta_inv(space, data.Y, data.latent_env, alpha=alpha, steps=20000)
    w = input_direction(fit.theta)
    print(f"alpha={alpha:>5}: cos(w, psi_s)={abs(w @ psi_s):.3f}  cos(w, psi_v)={abs(w @ psi_v):.3f}  "
          f"penalty={fit.penalty_value:.2e}  per-env loss={np.round(fit.per_env_losses, 3)}")

# with a single environment the penalty is undefined
try:
    invariant.fit_theta_inv(space, data.Y, np.zeros(data.n, int), alpha=1.0)
except invariant.DegeneratePenaltyError as exc:
    print("single environment:", exc)
