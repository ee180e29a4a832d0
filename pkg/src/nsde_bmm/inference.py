"""Variational objective, optimizer and prediction.

The approximate posterior shares the prior transition kernel; only the
initial state is variational.  Its mean is anchored at the first
observation of each window and its diagonal variance ``softplus(rho)`` is a
single learnable vector.  Observations are ``y ~ N(z, c I)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .exceptions import ConfigError, DimensionError, NumericalError
from .layers import Diagnostics, GaussianState
from .solver import (
    Counters,
    NsdeModel,
    bmm_rollout,
    cubature_rollout,
    cubature_scheme,
    draw_particle_randomness,
    em_paths,
    ensemble_moments,
    mc_rollout,
)

__all__ = [
    "TimeSeries",
    "TrainConfig",
    "RecognitionRule",
    "TrainResult",
    "expected_gaussian_loglik",
    "kl_recognition_prior",
    "elbo",
    "evaluation_windows",
    "evaluate_elbo",
    "validation_mse",
    "sample_windows",
    "adam_init",
    "adam_step",
    "clip_by_global_norm",
    "train",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_SCHEMA",
]

CHECKPOINT_SCHEMA = "nsde-bmm.checkpoint/1"
METHODS = ("bmm", "mc", "cubature")


@dataclass(frozen=True)
class TimeSeries:
    """One observed trajectory on a strictly increasing time grid."""

    times: np.ndarray
    observations: np.ndarray
    controls: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        y = np.asarray(self.observations, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if t.ndim != 1 or y.shape[0] != t.shape[0]:
            raise DimensionError("times and observations must have the same length")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(y)):
            raise ValueError("observations contain missing or non-finite values")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "observations", y)
        if self.controls is not None:
            u = np.asarray(self.controls, dtype=float)
            if u.ndim == 1:
                u = u[:, None]
            if u.shape[0] != t.shape[0]:
                raise DimensionError("controls must have one row per time point")
            object.__setattr__(self, "controls", u)

    def __len__(self) -> int:
        return int(self.times.shape[0])

    @property
    def dim(self) -> int:
        return int(self.observations.shape[1])

    def slice(self, start: int, stop: int) -> "TimeSeries":
        u = None if self.controls is None else self.controls[start:stop]
        return TimeSeries(self.times[start:stop], self.observations[start:stop], u)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and approximation settings.

    ``dt`` of ``None`` uses the sampling interval of the data; each interval
    is split into ``substeps`` solver steps.
    """

    dt: float | None = None
    substeps: int = 1
    horizon: int = 10
    batch_size: int = 16
    epochs: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    method: str = "bmm"
    particles: int = 8
    cubature_lambda: float = 1.0
    c_init: float = 1e-2
    train_c: bool = False
    clip_norm: float = 10.0
    rho_init: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.horizon < 2:
            raise ConfigError("horizon must be at least 2")
        if self.batch_size < 1 or self.epochs < 0 or self.substeps < 1 or self.particles < 1:
            raise ConfigError("batch_size, substeps and particles must be positive; epochs non-negative")
        if self.c_init <= 0:
            raise ConfigError("c_init must be positive")
        if self.dt is not None and self.dt <= 0:
            raise ConfigError("dt must be positive")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training options: {', '.join(unknown)}")
        return cls(**dict(d))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RecognitionRule:
    """``q(z0) = N(y_start, diag(softplus(rho)))``."""

    rho: np.ndarray

    @classmethod
    def from_variance(cls, var, dim: int) -> "RecognitionRule":
        v = np.broadcast_to(np.asarray(var, dtype=float), (dim,))
        return cls(np.log(np.expm1(v)))

    @property
    def variance(self) -> np.ndarray:
        return np.logaddexp(0.0, self.rho)

    def initial_state(self, y0) -> GaussianState:
        y0 = np.asarray(y0, dtype=float)
        var = np.broadcast_to(self.variance, y0.shape)
        return GaussianState(y0, ad.diag_embed(var))


@dataclass
class TrainResult:
    model: NsdeModel
    recognition: RecognitionRule
    log_c: float
    config: TrainConfig
    history: list = field(default_factory=list)
    diagnostics: Diagnostics = field(default_factory=Diagnostics)

    @property
    def c(self) -> float:
        return float(np.exp(self.log_c))


# ----------------------------------------------------------------------
# closed-form terms


def expected_gaussian_loglik(y, state: GaussianState, c):
    """``E_{z ~ state}[log N(y | z, c I)]``, batched over leading axes."""
    if np.any(np.asarray(ad.value_of(c)) <= 0):
        raise ValueError("observation noise variance must be positive")
    D = state.dim
    r = y - state.mean
    quad = ad.sum_(r * r, axis=-1) + ad.sum_(ad.diagonal(state.cov), axis=-1)
    return -0.5 * quad / c - 0.5 * D * ad.log(2.0 * math.pi * c)


def kl_recognition_prior(mu0, var0):
    """``KL[N(mu0, diag var0) || N(0, I)]`` summed over the last axis."""
    if np.any(np.asarray(ad.value_of(var0)) <= 0):
        raise ValueError("recognition variance must be positive")
    return 0.5 * ad.sum_(var0 + mu0 * mu0 - 1.0 - ad.log(var0), axis=-1)


def _gauss_loglik_points(y, z, c):
    D = np.shape(z)[-1]
    r = y - z
    return -0.5 * ad.sum_(r * r, axis=-1) / c - 0.5 * D * ad.log(2.0 * math.pi * c)


# ----------------------------------------------------------------------
# ELBO


def _unpack(params: Mapping[str, Any], model: NsdeModel, log_c: float):
    m = model.with_params(params)
    rho = params["recognition.rho"]
    lc = params.get("obs.log_c", log_c)
    return m, ad.softplus(rho), ad.exp(lc) if ad.is_var(lc) else float(np.exp(lc))


def elbo(
    params: Mapping[str, Any],
    model: NsdeModel,
    y,
    config: TrainConfig,
    dt: float,
    controls=None,
    log_c: float | None = None,
    seed: int = 0,
    diagnostics: Diagnostics | None = None,
    counters: Counters | None = None,
):
    """Mean ELBO over a batch of windows.

    Parameters
    ----------
    params : mapping
        Network parameters (``drift.*``, ``diffusion.*``), ``recognition.rho``
        and optionally ``obs.log_c``; arrays or recorded nodes.
    model : NsdeModel
        Architecture template; its parameters are replaced by ``params``.
    y : array, shape (B, s + 1, D)
        Observation windows.  Index 0 anchors the initial state; indices
        ``1..s`` enter the data fit.
    controls : array, shape (B, s + 1, m), optional
    seed : int
        Seed for the particle draws of the sampling method.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 2:
        y = y[None]
    B, T, D = y.shape
    K = T - 1
    if K < 1:
        raise ValueError("a window needs at least two observations")
    lc = np.log(config.c_init) if log_c is None else log_c
    m, var0, c = _unpack(params, model, lc)
    mu0 = y[:, 0]
    q0 = GaussianState(mu0, ad.diag_embed(ad.broadcast_to(var0, (B, D)) if ad.is_var(var0) else np.broadcast_to(var0, (B, D))))
    kl = kl_recognition_prior(mu0, var0)

    if config.method == "mc":
        S = config.particles
        n_steps = K * config.substeps
        eps0, noise, masks = draw_particle_randomness(m, seed, range(B * S), n_steps)
        eps0 = eps0.reshape(B, S, D)
        noise = noise.reshape(n_steps, B, S, D)
        masks = [
            {net: {i: v.reshape(B, S, -1) for i, v in d.items()} for net, d in step.items()} for step in masks
        ]
        path = em_paths(m, q0, controls, K, dt, eps0, noise, masks, config.substeps, counters)
        fit = 0.0
        for k in range(1, T):
            fit = fit + ad.sum_(_gauss_loglik_points(y[:, k, None, :], path[k], c), axis=-1) / S
    else:
        if config.method == "bmm":
            states = bmm_rollout(m, q0, controls, K, dt, config.substeps, diagnostics, counters)
        else:
            scheme = cubature_scheme(D, config.cubature_lambda)
            states = cubature_rollout(m, q0, controls, K, dt, scheme, config.substeps, diagnostics, counters)
        fit = 0.0
        for k in range(1, T):
            fit = fit + expected_gaussian_loglik(y[:, k], states[k], c)
    per_window = fit - kl
    return ad.sum_(per_window) / B


# ----------------------------------------------------------------------
# windows


def _series_dt(series: Sequence[TimeSeries]) -> float:
    steps = np.concatenate([np.diff(s.times) for s in series if len(s) > 1])
    if steps.size == 0:
        raise ValueError("cannot infer a time step from single-point series")
    if not np.allclose(steps, steps[0], rtol=1e-6, atol=0.0):
        raise ValueError("series must share a uniform sampling interval")
    return float(steps[0])


def sample_windows(series: Sequence[TimeSeries], horizon: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Random ``(series, start)`` pairs: ``floor(N / s)`` per series, shuffled."""
    out = []
    for j, s in enumerate(series):
        n_start = len(s) - horizon
        if n_start < 1:
            continue
        count = max(1, len(s) // horizon)
        out.extend((j, int(o)) for o in rng.integers(0, n_start, size=count))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def evaluation_windows(series: Sequence[TimeSeries], horizon: int) -> list[tuple[int, int]]:
    """Non-overlapping windows starting at ``0, s, 2s, ...``."""
    return [(j, o) for j, s in enumerate(series) for o in range(0, len(s) - horizon, horizon)]


def _stack_windows(series, windows, horizon):
    y = np.stack([series[j].observations[o:o + horizon + 1] for j, o in windows])
    if series[windows[0][0]].controls is None:
        return y, None
    u = np.stack([series[j].controls[o:o + horizon + 1] for j, o in windows])
    return y, u


# ----------------------------------------------------------------------
# optimizer


def adam_init(params: Mapping[str, np.ndarray]) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v, dtype=float) for k, v in params.items()},
        "v": {k: np.zeros_like(v, dtype=float) for k, v in params.items()},
    }


def adam_step(params, grads, state, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update; returns new ``(params, state)``."""
    t = state["t"] + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if np.shape(g) != np.shape(p):
            raise DimensionError(f"gradient shape {np.shape(g)} differs from parameter {k} {np.shape(p)}")
        m = beta1 * state["m"][k] + (1.0 - beta1) * g
        v = beta2 * state["v"][k] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_p[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, {"t": t, "m": new_m, "v": new_v}


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


# ----------------------------------------------------------------------
# training


def _param_dict(model: NsdeModel, recognition: RecognitionRule, log_c: float, train_c: bool) -> dict:
    p = {k: np.array(v, dtype=float) for k, v in model.params().items()}
    p["recognition.rho"] = np.array(recognition.rho, dtype=float)
    if train_c:
        p["obs.log_c"] = np.array(log_c, dtype=float)
    return p


def _batch_seed(seed: int, epoch: int, batch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch]).generate_state(1)[0])


def evaluate_elbo(result_or_model, series: Sequence[TimeSeries], config: TrainConfig, recognition: RecognitionRule | None = None, log_c: float | None = None) -> float:
    """Mean ELBO over the fixed non-overlapping windows of ``series``."""
    if isinstance(result_or_model, TrainResult):
        model, recognition, log_c = result_or_model.model, result_or_model.recognition, result_or_model.log_c
    else:
        model = result_or_model
        recognition = recognition or RecognitionRule.from_variance(config.c_init, model.latent_dim)
        log_c = np.log(config.c_init) if log_c is None else log_c
    dt = config.dt or _series_dt(series)
    windows = evaluation_windows(series, config.horizon)
    y, u = _stack_windows(series, windows, config.horizon)
    params = _param_dict(model, recognition, log_c, False)
    return float(elbo(params, model, y, config, dt, u, log_c, seed=config.seed))


def train(
    model: NsdeModel,
    series: Sequence[TimeSeries],
    config: TrainConfig,
    recognition: RecognitionRule | None = None,
    callback: Callable[[dict], None] | None = None,
    validation: Sequence[TimeSeries] | None = None,
) -> TrainResult:
    """Minibatch Adam on the negative mean ELBO per window.

    Each epoch draws ``floor(N / s)`` windows per series at uniform random
    offsets, shuffles them and splits them into batches.  The run is a pure
    function of the inputs and ``config.seed``.  With ``validation`` series
    each history entry also carries ``val_mse``, the forecast MSE of the
    training method over the fixed validation windows.
    """
    if not series:
        raise ValueError("training needs at least one series")
    dt = config.dt or _series_dt(series)
    recognition = recognition or RecognitionRule.from_variance(
        config.c_init if config.rho_init is None else np.logaddexp(0.0, config.rho_init), model.latent_dim
    )
    log_c = float(np.log(config.c_init))
    params = _param_dict(model, recognition, log_c, config.train_c)
    opt = adam_init(params)
    rng = np.random.default_rng(config.seed)
    diagnostics = Diagnostics()
    history = []
    for epoch in range(config.epochs):
        windows = sample_windows(series, config.horizon, rng)
        if not windows:
            raise ValueError(f"no series is longer than the horizon {config.horizon}")
        values = []
        for b, start in enumerate(range(0, len(windows), config.batch_size)):
            batch = windows[start:start + config.batch_size]
            y, u = _stack_windows(series, batch, config.horizon)
            seed = _batch_seed(config.seed, epoch, b)

            def objective(p):
                return -elbo(p, model, y, config, dt, u, log_c, seed, diagnostics)

            try:
                loss, tape = ad.record(objective, params)
                if not np.isfinite(loss):
                    raise NumericalError("non-finite loss")
                grads = ad.gradient(tape)
            except (NumericalError, FloatingPointError, ValueError) as exc:
                # inputs are validated above, so failures here come from the parameters
                raise NumericalError(f"epoch {epoch}, batch {b}: {exc}") from None
            grads, _ = clip_by_global_norm(grads, config.clip_norm)
            params, opt = adam_step(params, grads, opt, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                raise NumericalError(f"epoch {epoch}, batch {b}: parameters diverged")
            values.append(-loss)
        entry = {"epoch": epoch, "elbo": float(np.mean(values))}
        if validation:
            current = model.with_params({k: v for k, v in params.items() if k.startswith(("drift.", "diffusion."))})
            entry["val_mse"] = validation_mse(current, RecognitionRule(params["recognition.rho"]), validation, config, dt)
        history.append(entry)
        if callback is not None:
            callback(entry)
    fitted = model.with_params({k: v for k, v in params.items() if k.startswith(("drift.", "diffusion."))})
    rec = RecognitionRule(params["recognition.rho"])
    lc = float(params["obs.log_c"]) if config.train_c else log_c
    return TrainResult(fitted, rec, lc, config, history, diagnostics)


def validation_mse(model: NsdeModel, recognition: RecognitionRule, series: Sequence[TimeSeries], config: TrainConfig, dt: float | None = None) -> float:
    """Forecast MSE over the non-overlapping windows of ``series``.

    Each window is conditioned on its first observation and forecast with
    the configured method.
    """
    dt = dt or _series_dt(series)
    windows = evaluation_windows(series, config.horizon)
    y, u = _stack_windows(series, windows, config.horizon)
    q0 = recognition.initial_state(y[:, 0])
    s = config.horizon
    if config.method == "mc":
        means = []
        for i in range(y.shape[0]):
            qi = GaussianState(q0.mean[i], q0.cov[i])
            states = predict(model, qi, None if u is None else u[i], s, dt, "mc", particles=max(config.particles, 2),
                             seed=config.seed + i, substeps=config.substeps)
            means.append([st.mean for st in states])
        means = np.array(means)
    else:
        states = predict(model, q0, u, s, dt, config.method, cubature_lambda=config.cubature_lambda, substeps=config.substeps)
        means = np.stack([st.mean for st in states], axis=1)
    return float(np.mean((means - y[:, 1:]) ** 2))


# ----------------------------------------------------------------------
# prediction


def predict(
    model: NsdeModel,
    q0: GaussianState,
    controls,
    horizon: int,
    dt: float,
    method: str = "bmm",
    c: float = 0.0,
    particles: int = 128,
    seed: int = 0,
    cubature_lambda: float = 1.0,
    substeps: int = 1,
    counters: Counters | None = None,
    diagnostics: Diagnostics | None = None,
    return_ensemble: bool = False,
):
    """Predictive Gaussians at steps ``1..horizon`` with ``c I`` added.

    For the sampling method each step is summarized by the sample mean and
    covariance of the particles.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if method == "bmm":
        states = bmm_rollout(model, q0, controls, horizon, dt, substeps, diagnostics, counters)[1:]
        ens = None
    elif method == "cubature":
        scheme = cubature_scheme(q0.dim, cubature_lambda)
        states = cubature_rollout(model, q0, controls, horizon, dt, scheme, substeps, diagnostics, counters)[1:]
        ens = None
    elif method == "mc":
        ens = mc_rollout(model, q0, controls, horizon, dt, particles, seed, substeps, counters)
        states = [ensemble_moments(ens, k) for k in range(1, horizon + 1)]
    else:
        raise ValueError(f"unknown method {method!r}")
    eye = np.eye(q0.dim)
    out = [GaussianState(np.asarray(ad.value_of(s.mean)), np.asarray(ad.value_of(s.cov)) + c * eye) for s in states]
    return (out, ens) if return_ensemble else out


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, result: TrainResult, extra: Mapping[str, Any] | None = None) -> None:
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "version": __version__,
        "model": result.model.to_dict(),
        "recognition": {"rho": np.asarray(result.recognition.rho, dtype=float).tolist()},
        "log_c": float(result.log_c),
        "config": result.config.to_dict(),
        "history": result.history,
    }
    if extra:
        doc["extra"] = dict(extra)
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path: str | Path) -> tuple[TrainResult, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise ConfigError(f"unsupported checkpoint schema {doc.get('schema')!r}")
    result = TrainResult(
        NsdeModel.from_dict(doc["model"]),
        RecognitionRule(np.array(doc["recognition"]["rho"], dtype=float)),
        float(doc["log_c"]),
        TrainConfig.from_dict(doc["config"]),
        list(doc.get("history", [])),
    )
    return result, dict(doc.get("extra", {}))
