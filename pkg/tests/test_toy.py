import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphsde import autodiff as ad
from graphsde.sde import SdeSpec
from graphsde.solvers import SamplerConfig
from graphsde.toy import (GaussMixture2D, ToyConfig, ToyMLP, ToyTrainConfig, marginal_score_1d, mixture_log_density,
                          mixture_score, partial_scores_2d, responsibilities, run_toy, sequential_score_a,
                          summarize, train_toy_models, within_mode_stats)

MIX = GaussMixture2D()
SPEC = SdeSpec.vp(0.01, 0.05)


def test_mixture_parameters():
    np.testing.assert_allclose(MIX.M, [[0.5, 0.5], [-0.5, -0.5]])
    np.testing.assert_allclose(MIX.C, 0.01 * np.array([[1, 0.9], [0.9, 1]]))
    np.testing.assert_allclose(MIX.w, [0.5, 0.5])


def test_score_at_mode_center():
    r = responsibilities(MIX, np.array([[0.5, 0.5]]), 0.0, SPEC)
    assert r[0, 1] < 1e-10
    np.testing.assert_allclose(mixture_score(MIX, np.array([[0.5, 0.5]]), 0.0, SPEC), 0.0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.0, 1.0))
def test_score_is_odd(x, a, t):
    p = np.array([[x, a]])
    np.testing.assert_allclose(mixture_score(MIX, -p, t, SPEC), -mixture_score(MIX, p, t, SPEC), atol=1e-9)


def test_far_points_pull_toward_nearest_mode():
    for p, mode in (([4.0, 3.0], [0.5, 0.5]), ([-3.0, -5.0], [-0.5, -0.5])):
        s = mixture_score(MIX, np.array([p]), 0.3, SPEC)[0]
        direction = np.array(mode) - np.array(p)
        assert s @ direction > 0


def test_score_matches_finite_differences_of_log_density():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, size=(20, 2))
    h = 1e-6
    for t in (0.1, 0.6):
        s = mixture_score(MIX, pts, t, SPEC)
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd = (mixture_log_density(MIX, pts + e, t, SPEC) - mixture_log_density(MIX, pts - e, t, SPEC)) / (2 * h)
            np.testing.assert_allclose(s[:, k], fd, rtol=1e-5, atol=1e-5)


def test_partial_scores_are_components():
    rng = np.random.default_rng(1)
    x, a = rng.uniform(-1, 1, 30), rng.uniform(-1, 1, 30)
    sx, sa = partial_scores_2d(MIX, x, a, 0.4, SPEC)
    full = mixture_score(MIX, np.stack([x, a], 1), 0.4, SPEC)
    np.testing.assert_array_equal(np.stack([sx, sa], 1), full)


def _marginal_log_density(v, t, axis):
    mu = np.exp(-0.5 * SPEC.beta_integral(0, t))
    var = mu ** 2 * MIX.C[axis, axis] + (1 - mu ** 2)
    m = mu * MIX.M[:, axis]
    dens = 0.5 * np.exp(-0.5 * (v[:, None] - m) ** 2 / var) / np.sqrt(2 * np.pi * var)
    return np.log(dens.sum(1))


@pytest.mark.parametrize("axis", [0, 1])
def test_marginal_score_matches_1d_mixture(axis):
    v = np.linspace(-1.5, 1.5, 31)
    h = 1e-6
    for t in (0.0, 0.5, 1.0):
        fd = (_marginal_log_density(v + h, t, axis) - _marginal_log_density(v - h, t, axis)) / (2 * h)
        np.testing.assert_allclose(marginal_score_1d(MIX, v, t, SPEC, axis), fd, rtol=1e-5, atol=1e-4)


def test_sequential_score_is_partial_at_finished_x():
    x0, a = np.array([0.45, -0.2]), np.array([0.1, 0.3])
    np.testing.assert_array_equal(sequential_score_a(MIX, x0, a, 0.7, SPEC),
                                  partial_scores_2d(MIX, x0, a, 0.7, SPEC)[1])


def test_within_mode_stats_recovers_correlation():
    samples = MIX.sample(20_000, np.random.default_rng(2))
    corr, cov, counts, captured = within_mode_stats(samples, MIX.M)
    assert corr == pytest.approx(0.9, abs=0.01)
    np.testing.assert_allclose(cov, MIX.C, rtol=0.05)
    assert abs(counts[0] - counts[1]) < 0.05 * len(samples)
    assert captured.sum() > 0.999 * len(samples)


def test_run_toy_small_joint_run():
    cfg = ToyConfig(sampler=SamplerConfig("EM", 200, 0.0))
    samples, summary = run_toy("joint", "analytic", 2048, cfg, np.random.default_rng(0))
    assert samples.shape == (2048, 2)
    assert summary.score_evals == 200
    assert summary.within_mode_corr > 0.8
    text = summary.to_text()
    assert "within_mode_corr=" in text and "mode_counts=" in text


def test_run_toy_is_deterministic():
    cfg = ToyConfig(sampler=SamplerConfig("S4", 50, 0.05))
    a = run_toy("sequential", "analytic", 256, cfg, np.random.default_rng(4))[0]
    b = run_toy("sequential", "analytic", 256, cfg, np.random.default_rng(4))[0]
    np.testing.assert_array_equal(a, b)


def test_run_toy_rejects_bad_arguments():
    with pytest.raises(ValueError):
        run_toy("both", "analytic", 10, ToyConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        run_toy("joint", "analytic", 0, ToyConfig(), np.random.default_rng(0))


def test_toy_mlp_contract_and_gradient():
    m = ToyMLP(2, hidden=6, layers=4, rng=np.random.default_rng(0))
    v = np.random.default_rng(1).standard_normal((5, 2))
    t = np.linspace(0.1, 0.9, 5)
    assert m(v, t, SPEC).shape == (5,)
    key = "res0.W"
    base = dict(m.params)
    with ad.Tape() as tape:
        ps = {k: tape.watch(ad.Tensor(x)) for k, x in base.items()}
        loss = ad.sum(ad.power(m(v, t, SPEC, ps), 2.0))
    g = ad.backward(tape, loss)[ps[key].node_id]
    (num,) = ad.numerical_grad(lambda w: float(np.sum(m(v, t, SPEC, {**base, key: w}).data ** 2)), [base[key]])
    np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-6)


def test_reduced_trained_models_keep_mode_ordering():
    # scaled-down stand-in for the full training settings (a few minutes on one core)
    tcfg = ToyTrainConfig(hidden=128, layers=6, epochs=1500, batch_size=512, lr=1e-3)
    models = train_toy_models(MIX, SPEC, tcfg, np.random.default_rng(0))
    cfg = ToyConfig(sampler=SamplerConfig("EM", 500, 0.0), train=tcfg)
    corr = {}
    for mode in ("joint", "sequential", "independent"):
        _, s = run_toy(mode, "trained_mlp", 2048, cfg, np.random.default_rng(1), models)
        corr[mode] = s.within_mode_corr
    assert corr["joint"] >= 0.7
    assert corr["independent"] <= 0.3
    assert corr["joint"] > corr["sequential"] > corr["independent"]


def test_summary_of_data_itself():
    samples = MIX.sample(4096, np.random.default_rng(5))
    s = summarize(samples, MIX, "joint", "data")
    assert s.nearest_mode_corr == pytest.approx(s.within_mode_corr, abs=0.02)
