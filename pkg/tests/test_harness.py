import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kerhrm import datagen, harness, heterogeneity
from kerhrm.config import ExperimentConfig
from kerhrm.dataset import Dataset
from kerhrm.errors import ConfigError, NumericError

SMALL = dict(hidden=16, epochs=60, k=(5,), T=2, train_n=(80, 80), test_n=(60,), scramble="random_orthogonal",
             methods=("kerhrm", "erm"), theta_steps=2000)


def small_cfg(**kw):
    return ExperimentConfig(**{**SMALL, **kw}).validate()


@pytest.fixture(scope="module")
def small_data():
    return harness.make_data(small_cfg(), 0)


class TestMetrics:
    def test_hand_example(self):
        m = harness.metrics([np.zeros(1)] * 3, [np.ones(1), np.full(1, np.sqrt(2)), np.full(1, np.sqrt(3))],
                            "regression")
        assert m["per_env"] == pytest.approx([1.0, 2.0, 3.0])
        assert m["mean_error"] == pytest.approx(2.0, abs=1e-12)
        assert m["std_error"] == pytest.approx(1.0, abs=1e-12)

    def test_perfect(self):
        Y = [np.arange(4.0), np.ones(3)]
        assert harness.metrics(Y, Y, "regression")["mean_error"] == 0.0
        assert harness.metrics(Y, Y, "classification")["per_env"][1] == 1.0

    def test_single_env_has_no_std(self):
        m = harness.metrics([np.zeros(2)], [np.ones(2)], "regression")
        assert m["std_error"] is None and m["std"] is None

    def test_accuracy_uses_sign(self):
        m = harness.metrics([np.array([0.3, -2.0, 0.0, -0.1])], [np.array([1.0, -1.0, -1.0, 1.0])], "classification")
        assert m["metric"] == "accuracy" and m["per_env"] == [0.5]

    def test_needs_an_environment(self):
        with pytest.raises(ConfigError):
            harness.metrics([], [], "regression")


def brute_force_purity(learned, truth):
    ls, ts = np.unique(learned), np.unique(truth)
    best = 0
    for perm in itertools.permutations(ts, len(ls)):
        mapping = dict(zip(ls, perm))
        best = max(best, sum(mapping[a] == b for a, b in zip(learned, truth)))
    return best / len(learned)


class TestPurity:
    def test_identical(self):
        assert harness.purity([0, 0, 1, 2], [0, 0, 1, 2]) == 1.0

    def test_relabelled(self):
        assert harness.purity([2, 2, 0, 1], [0, 0, 1, 2]) == 1.0

    @given(seed=st.integers(0, 2**31 - 1))
    def test_brute_force_three_clusters(self, seed):
        rng = np.random.default_rng(seed)
        learned, truth = rng.integers(0, 3, 30), rng.integers(0, 3, 30)
        assert harness.purity(learned, truth) == pytest.approx(brute_force_purity(learned, truth))

    def test_more_clusters_than_envs(self):
        assert harness.purity([0, 1, 2, 3], [0, 0, 1, 1]) == 1.0

    def test_large_cluster_count_uses_assignment(self):
        truth = np.repeat(np.arange(8), 5)
        learned = (truth + 3) % 8
        learned[0] = 7
        assert harness.purity(learned, truth) == pytest.approx(39 / 40)


class TestKl:
    def test_identical_conditionals(self):
        Y = np.array([1, -1, 1, 1, 1, -1, 1, 1.0])
        C = np.array([1, 1, -1, -1, 1, 1, -1, -1])
        labels = np.repeat([0, 1], 4)
        assert harness.kl_diagnostic(labels, Y, C) == pytest.approx(0.0, abs=1e-15)

    def test_opposite_conditionals_positive(self):
        Y = np.array([1.0] * 10 + [-1.0] * 10)
        C = np.ones(20)
        labels = np.repeat([0, 1], 10)
        assert harness.kl_diagnostic(labels, Y, C) > 1.0

    def test_absent_cases(self):
        assert harness.kl_diagnostic(np.zeros(4), np.ones(4), np.ones(4)) is None
        assert harness.kl_diagnostic([0, 1], [0.3, 0.2], [1, 1]) is None
        assert harness.kl_diagnostic(np.arange(20) % 2, np.ones(20), np.arange(20.0)) is None

    def test_env_diagnostics(self):
        d = Dataset(np.zeros((4, 1)), [1.0, -1.0, 1.0, -1.0], [0, 0, 1, 1], [1, 1, 1, 1])
        out = harness.env_diagnostics(np.array([0, 0, 1, 1]), d)
        assert out["purity"] == 1.0 and out["kl"] == pytest.approx(0.0)
        assert harness.env_diagnostics(np.zeros(4), Dataset(np.zeros((4, 1)), np.ones(4))) == \
            {"purity": None, "kl": None}


class TestMakeData:
    def test_classification_seeds(self):
        cfg = small_cfg()
        train, tests = harness.make_data(cfg, 3)
        assert train.n == 160 and [t.n for t in tests] == [60]
        again, _ = harness.make_data(cfg, 3)
        np.testing.assert_array_equal(train.X, again.X)
        assert not np.array_equal(train.X[:60], tests[0].X)

    def test_regression(self):
        cfg = small_cfg(task="regression", d=10, train_rates=(2.3, -1.1), train_n=(50, 20),
                        test_rates=(-2.0, -3.0), test_n=(30, 30))
        train, tests = harness.make_data(cfg, 0)
        assert train.n == 70 and len(tests) == 2 and train.d == 10

    def test_colored_mnist(self, tmp_path):
        rng = np.random.default_rng(0)
        datagen.write_idx(tmp_path / "train-images-idx3-ubyte", rng.integers(0, 256, (40, 28, 28)).astype(np.uint8))
        datagen.write_idx(tmp_path / "train-labels-idx1-ubyte", rng.integers(0, 10, 40).astype(np.uint8))
        cfg = small_cfg(task="colored_mnist", mnist_dir=str(tmp_path), mnist_n=10, downsample=(7, 7))
        train, tests = harness.make_data(cfg, 0)
        assert train.n == 20 and len(tests) == 1 and train.d == 2 * 49

    def test_missing_mnist(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            harness.make_data(small_cfg(task="colored_mnist", mnist_dir=str(tmp_path)), 0)

    def test_csv(self, tmp_path):
        rng = np.random.default_rng(1)
        lines = ["year,a,b,price"] + [f"{y},{a:.5f},{b:.5f},{p:.5f}" for y, a, b, p in
                                      zip(rng.integers(1900, 1960, 90), *rng.normal(size=(3, 90)))]
        (tmp_path / "h.csv").write_text("\n".join(lines) + "\n")
        cfg = small_cfg(task="csv", csv_path=str(tmp_path / "h.csv"), target_col="price", env_col="year",
                        thresholds=(1920, 1940), train_envs=(0, 1))
        train, tests = harness.make_data(cfg, 0)
        assert train.n + sum(t.n for t in tests) == 90 and len(tests) == 1


@pytest.fixture(scope="module")
def two_iterations(small_data):
    train, tests = small_data
    return harness.run_kerhrm(small_cfg(), train, tests, seed=0)


class TestRunKerhrm:
    def test_trace_shape(self, two_iterations):
        e = two_iterations.entry("kerhrm")
        assert [row["iteration"] for row in e["trace"]] == [1, 2]
        for row in e["trace"]:
            assert row["orthogonality"] <= 1e-8
            assert row["em_max_increase"] <= 1e-7
            assert row["alignment"] is not None and 0.0 <= row["alignment"] <= 1.0 + 1e-12
            assert sum(row["env_sizes"]) == 160
        assert e["k"] == 5 and e["test"]["metric"] == "accuracy"
        assert e["test"]["mean"] == e["trace"][-1]["test_metric"]

    def test_static_equals_first_iteration(self, small_data, two_iterations):
        train, tests = small_data
        static = harness.RUNNERS["kerhrm-static"](small_cfg(), train, tests, seed=0)
        e = static.entry("kerhrm-static")
        assert len(e["trace"]) == 1
        assert e["test"]["mean"] == two_iterations.entry("kerhrm")["trace"][0]["test_metric"]

    def test_deterministic(self, small_data, two_iterations):
        train, tests = small_data
        again = harness.run_kerhrm(small_cfg(), train, tests, seed=0)
        assert again.to_dict(timing=False) == two_iterations.to_dict(timing=False)

    def test_train_only_at_the_end(self, small_data):
        train, tests = small_data
        rep = harness.run_kerhrm(small_cfg(train_every_iteration=False), train, tests, seed=0)
        trace = rep.entry("kerhrm")["trace"]
        assert "test_metric" not in trace[0] and "test_metric" in trace[1]

    def test_k_sweep_uses_validation(self, small_data):
        train, tests = small_data
        rep = harness.run_kerhrm(small_cfg(k=(3, 6), T=1), train, tests, seed=0)
        e = rep.entry("kerhrm")
        assert e["k"] in (3, 6) and e["diagnostics"]["validation_mse"] is not None
        assert e["diagnostics"]["k_candidates"] == [3, 6]

    def test_errors_name_the_iteration(self, small_data, monkeypatch):
        train, tests = small_data

        def boom(*a, **kw):
            raise NumericError("boom")

        monkeypatch.setattr(heterogeneity, "run_clustering", boom)
        with pytest.raises(NumericError, match="KerHRM iteration 1: boom"):
            harness.run_kerhrm(small_cfg(), train, tests, seed=0)

    def test_streaming_gram_matches_closed_form(self, small_data):
        train, tests = small_data
        a = harness.run_kerhrm(small_cfg(T=1), train, tests, seed=0).entry("kerhrm")
        b = harness.run_kerhrm(small_cfg(T=1, gram="streaming", gram_block=37), train, tests, seed=0).entry("kerhrm")
        assert a["trace"][0]["clustering_objective"] == pytest.approx(b["trace"][0]["clustering_objective"],
                                                                      rel=1e-6)


class TestBaselines:
    def test_irm_runs(self, small_data):
        train, tests = small_data
        e = harness.run_irm(small_cfg(), train, tests, seed=0).entry("irm")
        assert e["trace"][0]["alignment"] is not None and 0.0 <= e["test"]["mean"] <= 1.0

    def test_erm_deterministic(self, small_data):
        train, tests = small_data
        a = harness.run_erm(small_cfg(), train, tests, seed=1).to_dict(timing=False)
        b = harness.run_erm(small_cfg(), train, tests, seed=1).to_dict(timing=False)
        assert a == b

    def test_erm_without_spurious_signal(self):
        # A independent of Y and drowned in noise: nothing to exploit, so train and test agree
        cfg = small_cfg(hidden=64, epochs=300, train_rates=(0.5, 0.5), train_n=(500, 500), test_rates=(0.5,),
                        test_n=(1000,), sigma_v2=100.0)
        gaps = []
        for seed in range(3):
            train, tests = harness.make_data(cfg, seed)
            e = harness.run_erm(cfg, train, tests, seed=seed).entry("erm")
            gaps.append(abs(e["train"]["mean"] - e["test"]["mean"]))
        assert max(gaps) <= 0.1


class TestRunExperiment:
    def test_all_methods_and_seeds(self):
        cfg = small_cfg(T=1, seeds=(0, 1), methods=("kerhrm", "kerhrm-static", "erm", "irm"))
        seen = []
        rep = harness.run_experiment(cfg, progress=seen.append)
        assert len(rep.entries) == 8 and len(seen) == 8
        assert [(e["seed"], e["method"]) for e in rep.entries][:4] == \
            [(0, "kerhrm"), (0, "kerhrm-static"), (0, "erm"), (0, "irm")]
        assert rep.timing["total_seconds"] > 0
        assert set(rep.aggregates) == {"kerhrm", "kerhrm-static", "erm", "irm"}
