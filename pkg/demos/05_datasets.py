"""Benchmarks and loaders."""
import tempfile
from pathlib import Path

import numpy as np

from kerhrm import datagen

# classification with a spurious attribute A that agrees with Y at rate r
envs = datagen.gen_spurious_classification(
    datagen.SpuriousClsConfig(bias_rates=(0.9, 0.8), n=1000, scramble="random_orthogonal", seed=0))
for e in envs:
    print(f"env {e.latent_env[0]}: n={e.n}, P(A=Y)={np.mean(e.spurious_attr == e.Y):.2f}")

# regression under selection bias on one of the V coordinates
envs = datagen.gen_selection_bias(datagen.SelBiasConfig(rates=(2.3, -1.1), n=(1000, 100), seed=0))
for e in envs:
    print(f"selection env {e.latent_env[0]}: corr(Y, V_b)={np.corrcoef(e.Y, e.spurious_attr)[0, 1]:+.2f}")

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    # a tiny IDX pair standing in for MNIST
    rng = np.random.default_rng(0)
    datagen.write_idx(tmp / "images", rng.integers(0, 256, size=(200, 28, 28)).astype(np.uint8))
    datagen.write_idx(tmp / "labels", rng.integers(0, 10, size=200).astype(np.uint8))
    raw = datagen.load_mnist_idx(tmp / "images", tmp / "labels")
    colored = datagen.make_colored_mnist(raw, datagen.ColoredMnistConfig(flips=(0.1, 0.2, 0.9), n=60))
    print("colored digits per env:", [e.n for e in colored], "features:", colored[0].d)
    print("P(color=label):", [round(float(np.mean(e.spurious_attr == e.Y)), 2) for e in colored])

    # CSV rows bucketed into periods by a year column
    (tmp / "houses.csv").write_text("year,rooms,price\n1905,3,100\n1925,4,150\n1931,2,90\n1955,5,300\n")
    periods = datagen.load_csv_regression(tmp / "houses.csv", "price", "year", [1920, 1940])
    print("rows per period:", [p.n for p in periods])
