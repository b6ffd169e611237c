"""Reduced tangent space and the orthogonal kernel update.

The n x n Gram matrix is eigendecomposed to get the top-k left singular
vectors U and singular values S of the feature matrix without ever forming
the right singular vectors.  ``Psi = U S`` are the reduced features.  After
an invariant direction theta is found, it is projected out of ``Psi`` so
that later clustering only sees what theta does not explain.
"""
import numpy as np

from kerhrm import ntf_space

rng = np.random.default_rng(1)
F = rng.normal(size=(40, 200))

space = ntf_space.space_from_features(F, 5)
print("top singular values, Gram route:", np.round(space.S, 6))
print("top singular values, dense SVD: ", np.round(np.linalg.svd(F, compute_uv=False)[:5], 6))

# coordinates of a function g on the samples: S^-1 U^T g
g = space.Psi @ np.array([1.0, -2.0, 0.5, 0.0, 3.0])
print("recovered coordinates:", np.round(space.reduced_coords(g), 10))

state = ntf_space.initial_state(space)
theta = rng.normal(size=5)
state = ntf_space.orthogonal_update(space, state, theta)
print("after the update, max |<Psi_V(x_i), theta>| / norms:", ntf_space.orthogonality_residual(state.PsiV, theta))

# cumulative mode keeps every earlier direction removed as well
state = ntf_space.initial_state(space)
thetas = [rng.normal(size=5) for _ in range(3)]
for t in thetas:
    state = ntf_space.orthogonal_update(space, state, t, mode="cumulative")
print("cumulative residuals:", [f"{ntf_space.orthogonality_residual(state.PsiV, t):.1e}" for t in thetas])
print("remaining rank:", np.linalg.matrix_rank(state.PsiV, tol=1e-8))
