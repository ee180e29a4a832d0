import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from nsde_bmm import autodiff as ad
from nsde_bmm.exceptions import ConfigError
from nsde_bmm.layers import Affine, GaussianState
from nsde_bmm.network import NetworkSpec, mlp
from nsde_bmm.solver import NsdeModel
from nsde_bmm.inference import (
    RecognitionRule,
    TimeSeries,
    TrainConfig,
    adam_init,
    adam_step,
    clip_by_global_norm,
    elbo,
    evaluate_elbo,
    evaluation_windows,
    expected_gaussian_loglik,
    kl_recognition_prior,
    load_checkpoint,
    predict,
    sample_windows,
    save_checkpoint,
    train,
    validation_mse,
)


def affine(W, b=None):
    W = np.atleast_2d(np.asarray(W, dtype=float))
    return NetworkSpec((Affine(W, np.zeros(W.shape[0]) if b is None else np.asarray(b, float)),), W.shape[1], W.shape[0])


def small_model(seed=0, D=2, keep_prob=1.0):
    rng = np.random.default_rng(seed)
    return NsdeModel(mlp(D, [8], D, rng, keep_prob=keep_prob), mlp(D, [8], D, rng, final_activation="relu"), D)


def toy_series(n=3, N=25, D=2, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(N) * 0.1
    return [TimeSeries(t, np.cumsum(0.1 * rng.standard_normal((N, D)), axis=0) + np.sin(t)[:, None]) for _ in range(n)]


def params_of(model, rec):
    p = dict(model.params())
    p["recognition.rho"] = rec.rho
    return p


# ---------------------------------------------------------------- closed forms


def test_loglik_point_mass():
    s = GaussianState(np.array([0.4, -1.0]), np.zeros((2, 2)))
    assert expected_gaussian_loglik(s.mean, s, 1.0) == pytest.approx(-math.log(2 * math.pi), abs=1e-15)


def test_loglik_trace_penalty():
    # [DERIVED] mpmath: -log(2 pi)/2 - 1/2
    s = GaussianState(np.array([0.7]), np.eye(1))
    assert abs(expected_gaussian_loglik(s.mean, s, 1.0) - (-1.4189385332046727)) < 1e-15


def test_loglik_matches_monte_carlo():
    rng = np.random.default_rng(0)
    s = GaussianState(np.array([0.2, -0.3]), np.array([[0.5, 0.1], [0.1, 0.3]]))
    y, c = np.array([0.5, 0.5]), 0.2
    z = rng.multivariate_normal(s.mean, s.cov, size=10**6)
    vals = multivariate_normal(np.zeros(2), c * np.eye(2)).logpdf(y - z)
    assert abs(vals.mean() - expected_gaussian_loglik(y, s, c)) < 4 * vals.std() / 1e3


def test_loglik_rejects_bad_noise():
    with pytest.raises(ValueError):
        expected_gaussian_loglik(np.zeros(1), GaussianState(np.zeros(1), np.eye(1)), 0.0)


def test_kl_examples():
    assert kl_recognition_prior(np.zeros(3), np.ones(3)) == 0.0
    assert kl_recognition_prior(np.ones(1), np.ones(1)) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        kl_recognition_prior(np.zeros(1), np.zeros(1))


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=4), st.floats(0.05, 5))
def test_kl_zero_only_at_prior(mu, var):
    mu = np.array(mu)
    kl = kl_recognition_prior(mu, np.full(mu.size, var))
    assert kl >= 0
    if np.any(mu != 0) or abs(var - 1) > 1e-6:
        assert kl > 0


def test_recognition_softplus():
    rec = RecognitionRule.from_variance(0.3, 2)
    np.testing.assert_allclose(rec.variance, [0.3, 0.3], rtol=1e-14)
    q = rec.initial_state(np.array([1.0, 2.0]))
    np.testing.assert_allclose(q.cov, 0.3 * np.eye(2), rtol=1e-14)


# ---------------------------------------------------------------- ELBO


def test_single_step_zero_model():
    D, v = 2, 1e-10
    model = NsdeModel(affine(np.zeros((D, D))), None, D)
    rec = RecognitionRule.from_variance(v, D)
    y0 = np.array([0.3, -0.2])
    y = np.stack([y0, y0])[None]
    cfg = TrainConfig(horizon=2, c_init=1.0)
    val = elbo(params_of(model, rec), model, y, cfg, 0.1)
    kl = kl_recognition_prior(y0, rec.variance)
    expected = -0.5 * D * math.log(2 * math.pi) - 0.5 * D * v - kl
    assert val == pytest.approx(expected, rel=1e-12)


def test_elbo_bounds_linear_gaussian_marginal():
    # z0 ~ N(0, 1), z_k = a z_{k-1} + sigma dw, y_k = z_k + N(0, c)
    a, sigma, dt, c, s = -0.5, 0.8, 0.2, 0.1, 4
    A = 1 + a * dt
    drift = affine([[a]])
    diff = affine([[0.0]], [sigma])
    model = NsdeModel(drift, diff, 1)
    y = np.array([0.6, 0.5, 0.1, -0.2, 0.3])
    # exact marginal of y_1..s
    cov_z = np.zeros((s, s))
    var = 1.0
    for i in range(s):
        var = A * A * var + sigma**2 * dt
        cov_z[i, i] = var
        for j in range(i + 1, s):
            cov_z[i, j] = cov_z[j, i] = var * A ** (j - i)
    exact = multivariate_normal(np.zeros(s), cov_z + c * np.eye(s)).logpdf(y[1:])
    cfg = TrainConfig(horizon=s, c_init=c)
    for v0 in (0.05, 0.5, 1.0):
        val = elbo(params_of(model, RecognitionRule.from_variance(v0, 1)), model, y[:, None], cfg, dt)
        assert val <= exact + 1e-8


def test_elbo_deterministic_and_shapes():
    model = small_model()
    rec = RecognitionRule.from_variance(0.01, 2)
    y = np.stack([s.observations[:6] for s in toy_series()])
    for method in ("bmm", "cubature", "mc"):
        cfg = TrainConfig(horizon=5, method=method)
        a = elbo(params_of(model, rec), model, y, cfg, 0.1, seed=3)
        b = elbo(params_of(model, rec), model, y, cfg, 0.1, seed=3)
        assert np.isfinite(a) and a == b
    with pytest.raises(ValueError):
        elbo(params_of(model, rec), model, y[:, :1], TrainConfig(), 0.1)


def test_elbo_gradient_finite_differences():
    rng = np.random.default_rng(0)
    model = NsdeModel(mlp(2, [16], 2, rng), mlp(2, [16], 2, rng, final_activation="relu"), 2)
    rec = RecognitionRule.from_variance(0.05, 2)
    y = np.stack([s.observations[:6] for s in toy_series(2)])
    cfg = TrainConfig(horizon=5)
    f = lambda p: elbo(p, model, y, cfg, 0.1)
    assert ad.finite_difference_check(f, params_of(model, rec)) < 1e-5


# ---------------------------------------------------------------- windows


def test_windows():
    series = toy_series(2, N=25)
    w = evaluation_windows(series, 10)
    assert w == [(0, 0), (0, 10), (1, 0), (1, 10)]
    rng = np.random.default_rng(0)
    sw = sample_windows(series, 10, rng)
    assert len(sw) == 4 and all(0 <= o <= 14 for _, o in sw)
    assert sample_windows(toy_series(1, N=5), 10, rng) == []


def test_time_series_validation():
    with pytest.raises(ValueError):
        TimeSeries(np.array([0.0, 0.0, 1.0]), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        TimeSeries(np.arange(3.0), np.array([0.0, np.nan, 1.0]))
    assert TimeSeries(np.arange(3.0), np.zeros(3)).dim == 1


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(method="sgd")
    with pytest.raises(ConfigError):
        TrainConfig(horizon=1)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochz": 3})
    cfg = TrainConfig(epochs=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- optimizer


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    new, _ = adam_step(p, {"w": np.zeros(2)}, adam_init(p), 0.1)
    np.testing.assert_array_equal(new["w"], p["w"])


def test_adam_first_step_is_sign():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([3.0, -0.01, 100.0])}
    new, state = adam_step(p, g, adam_init(p), 0.1)
    np.testing.assert_allclose(new["w"], p["w"] - 0.1 * np.sign(g["w"]), rtol=1e-6)
    assert state["t"] == 1


def test_adam_is_stateful():
    p = {"w": np.array([1.0])}
    g = {"w": np.array([0.5])}
    s0 = adam_init(p)
    p1, s1 = adam_step(p, g, s0, 0.1)
    p2, _ = adam_step(p1, {"w": np.array([-0.2])}, s1, 0.1)
    q, _ = adam_step(p, {"w": np.array([0.3])}, s0, 0.2)
    assert p2["w"][0] != q["w"][0]


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_by_global_norm(g, 1.0)
    assert norm == 5.0
    assert clipped["a"][0] == pytest.approx(0.6) and clipped["b"][0] == pytest.approx(0.8)
    same, _ = clip_by_global_norm(g, 10.0)
    assert same["a"][0] == 3.0


# ---------------------------------------------------------------- training


def test_zero_learning_rate_keeps_parameters():
    model = small_model()
    res = train(model, toy_series(), TrainConfig(horizon=5, epochs=2, batch_size=4, learning_rate=0.0))
    for k, v in model.params().items():
        assert np.array_equal(res.model.params()[k], v)
    np.testing.assert_array_equal(res.recognition.rho, RecognitionRule.from_variance(1e-2, 2).rho)


def test_same_seed_same_history():
    cfg = TrainConfig(horizon=5, epochs=3, batch_size=4, learning_rate=1e-2, seed=4)
    a = train(small_model(keep_prob=0.8), toy_series(), cfg)
    b = train(small_model(keep_prob=0.8), toy_series(), cfg)
    assert a.history == b.history
    for k, v in a.model.params().items():
        assert np.array_equal(v, b.model.params()[k])
    assert all(np.isfinite(h["elbo"]) for h in a.history)


def test_mc_training_varies_with_seed():
    finals = []
    for seed in (0, 1, 2):
        cfg = TrainConfig(horizon=5, epochs=2, batch_size=4, method="mc", particles=8, seed=seed)
        finals.append(train(small_model(), toy_series(), cfg).history[-1]["elbo"])
    assert np.std(finals) > 0


def test_training_improves_elbo():
    series = toy_series(4, N=40)
    cfg = TrainConfig(horizon=5, epochs=15, batch_size=8, learning_rate=1e-2, c_init=0.05)
    model = small_model()
    before = evaluate_elbo(model, series, cfg)
    res = train(model, series, cfg)
    assert evaluate_elbo(res, series, cfg) > before


def test_validation_history_and_trainable_noise():
    series = toy_series()
    cfg = TrainConfig(horizon=5, epochs=2, batch_size=4, learning_rate=1e-2, train_c=True)
    res = train(small_model(), series, cfg, validation=toy_series(1, seed=9))
    assert all("val_mse" in h and np.isfinite(h["val_mse"]) for h in res.history)
    assert res.log_c != math.log(cfg.c_init)
    direct = validation_mse(res.model, res.recognition, toy_series(1, seed=9), cfg)
    assert direct == pytest.approx(res.history[-1]["val_mse"], rel=1e-12)


def test_training_errors():
    with pytest.raises(ValueError):
        train(small_model(), [], TrainConfig())
    with pytest.raises(ValueError):
        train(small_model(), toy_series(N=5), TrainConfig(horizon=10, epochs=1))


# ---------------------------------------------------------------- prediction


def test_predict_zero_dynamics():
    model = NsdeModel(affine(np.zeros((2, 2))), None, 2)
    q0 = GaussianState(np.array([1.0, 2.0]), np.array([[0.5, 0.1], [0.1, 0.4]]))
    for method in ("bmm", "cubature"):
        (s,) = predict(model, q0, None, 1, 0.1, method, c=0.2)
        np.testing.assert_allclose(s.mean, q0.mean, atol=1e-14)
        np.testing.assert_allclose(s.cov, q0.cov + 0.2 * np.eye(2), atol=1e-14)


def test_predict_linear_recursion():
    W = np.array([[-0.5, 0.2], [0.0, -0.3]])
    model = NsdeModel(affine(W), affine(np.zeros((2, 2)), [0.4, 0.4]), 2)
    q0 = GaussianState(np.array([1.0, -1.0]), 0.1 * np.eye(2))
    A = np.eye(2) + 0.1 * W
    m, S = q0.mean, q0.cov
    out = predict(model, q0, None, 20, 0.1, "bmm", c=0.05)
    assert len(out) == 20
    for s in out:
        m, S = A @ m, A @ S @ A.T + 0.16 * 0.1 * np.eye(2)
        np.testing.assert_allclose(s.mean, m, atol=1e-9)
        np.testing.assert_allclose(s.cov, S + 0.05 * np.eye(2), atol=1e-9)


def test_predict_mc_and_errors():
    model = small_model()
    q0 = GaussianState(np.zeros(2), 0.1 * np.eye(2))
    out, ens = predict(model, q0, None, 3, 0.1, "mc", particles=16, seed=1, return_ensemble=True)
    assert len(out) == 3 and ens.particles.shape == (4, 16, 2)
    with pytest.raises(ValueError):
        predict(model, q0, None, 0, 0.1)
    with pytest.raises(ValueError):
        predict(model, q0, None, 1, 0.1, "ukf")


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    res = train(small_model(keep_prob=0.8), toy_series(), TrainConfig(horizon=5, epochs=1, batch_size=4))
    p = tmp_path / "ck.json"
    save_checkpoint(p, res, {"normalization": {"mean": [0, 0], "std": [1, 1]}})
    back, extra = load_checkpoint(p)
    assert back.model.to_dict() == res.model.to_dict()
    assert np.array_equal(back.recognition.rho, res.recognition.rho)
    assert back.log_c == res.log_c and back.config == res.config and back.history == res.history
    assert extra["normalization"]["std"] == [1, 1]


def test_checkpoint_schema_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"schema": "other/9"}')
    with pytest.raises(ConfigError, match="schema"):
        load_checkpoint(p)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "missing.json")
