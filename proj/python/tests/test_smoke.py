import numpy as np
import pytest

import dynident


def test_catalog():
    ids = {s["id"] for s in dynident.systems()}
    assert {"ode2", "ode27", "ode56"} <= ids
    lv = next(s for s in dynident.systems() if s["id"] == "ode27")
    assert lv["param_dim"] == 4 and lv["linear_in_theta"]


def test_integrate_harmonic():
    t = np.linspace(0.0, 1.0, 11)
    times, x = dynident.integrate("ode24", [1.0], x0=[1.0, 0.0], t=list(t))
    assert x.shape == (11, 2)
    assert np.allclose(times, t)
    assert abs(x[-1, 0] - np.cos(1.0)) < 1e-8


def test_closed_form_recovers_theta():
    lv = next(s for s in dynident.systems() if s["id"] == "ode27")
    theta = np.array(lv["canonical_theta"])
    t, x = dynident.integrate("ode27", theta)
    dx = np.array([dynident.vector_field("ode27", theta, row) for row in x])
    res = dynident.fit("ode27", t, x, derivs=dx, method="closed")
    assert np.max(np.abs(res["theta_hat"] - theta)) < 1e-8


def test_benchmark_small():
    (row,) = dynident.benchmark(["ode2"], draws=5)
    assert row["n_draws"] == 5 and row["failures"] == 0
    assert row["rmse_mean"] < 1e-3


def test_aipw_randomized():
    rng = np.random.default_rng(0)
    n = 4000
    x = rng.normal(size=(n, 2))
    t = rng.integers(0, 2, size=n)
    y = 2.0 * t + x[:, 0] + 0.1 * rng.normal(size=n)
    res = dynident.aipw_ate(y, list(map(int, t)), x)
    assert abs(res["ate_hat"] - 2.0) < 0.05


def test_latent_r2_identity():
    rng = np.random.default_rng(1)
    z = rng.uniform(-1, 1, size=(500, 2))
    per, mean = dynident.latent_r2(z, z, seed=3)
    assert mean > 1 - 1e-6


def test_errors_are_python_exceptions():
    with pytest.raises(ValueError):
        dynident.aipw_ate([1.0, 2.0], [0, 1], np.zeros((2, 1)))


def test_cli_pipeline(tmp_path):
    data = str(tmp_path / "mv.jsonl")
    model = str(tmp_path / "m.json")
    assert dynident.main(["synth-mv", "--pairs", "100", "--out", data]) == 0
    assert dynident.main(["train-mv", "--data", data, "--epochs", "2", "--hidden", "16", "--depth", "2",
                          "--out", model]) == 0
    z = dynident.encode(model, data)
    theta = dynident.parameters(data)
    assert z.shape == (100, 8) and theta.shape == (100, 4)
    assert dynident.main(["bogus"]) == 1


def test_format():
    assert dynident.format_mean_std(0.0213, 0.0188) == "2e-2 ± 2e-2"
