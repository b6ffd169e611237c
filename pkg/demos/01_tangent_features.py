"""Tangent features of a two-layer MLP.

The per-sample gradient of the network output with respect to all
parameters, taken at initialisation, is a fixed feature map.  A small step
in parameter space changes the outputs by (almost exactly) those features
times the step.
"""
import numpy as np

from kerhrm import mlp
from kerhrm.checks import central_difference

rng = np.random.default_rng(0)
X = rng.normal(size=(6, 3))

# mirrored init: hidden units come in pairs with opposite output weights,
# so the network starts as the zero function while its gradients are not zero
model = mlp.init_mlp(3, 32, seed=0, mirrored=True)
print("f(x) at init:", np.round(mlp.forward(model, X), 12))

F = mlp.ntf(model, X)
print("feature matrix:", F.shape, "(samples x parameters)")

# each row is a gradient, so it matches central differences
w0 = model.flatten()
fd = central_difference(lambda w: float(mlp.forward(model.with_params(w), X[:1])[0]), w0)
print("row 0 vs central differences, max abs diff:", np.abs(F[0] - fd).max())

# the Gram matrix has a closed form that never builds F
G = mlp.ntk_gram(model, X)
print("closed-form Gram vs F F^T:", np.abs(G - F @ F.T).max())

# a small parameter step moves the outputs along the features
step = 1e-3 * rng.normal(size=model.p)
exact = mlp.forward(model.with_params(w0 + step), X)
print("linearisation error:", np.abs(exact - F @ step).max(), "for output change", np.abs(exact).max())
