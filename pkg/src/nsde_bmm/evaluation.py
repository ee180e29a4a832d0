"""Forecast metrics and the benchmark harnesses.

Predictive distributions are Gaussians ``N(mean, cov)`` where ``cov``
already includes the observation noise.  Coverage uses Mahalanobis
ellipsoids with chi-squared radii.
"""

from __future__ import annotations

import csv
import math
import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .exceptions import DimensionError
from .layers import Affine, GaussianState, ReLU
from .network import NetworkSpec, forward_flops, mlp, vmm_forward
from .solver import Counters, NsdeModel, cubature_scheme, ensemble_moments, mc_rollout
from .special import chi2_inverse_cdf

__all__ = [
    "LEVELS",
    "CalibrationReport",
    "ForecastTask",
    "mse",
    "nll",
    "empirical_frequency",
    "coverage_curve",
    "ecpe",
    "calibration_report",
    "forecast_tasks",
    "forecast",
    "benchmark_calibration",
    "summarize_benchmark",
    "ablate_vmm_vs_cubature",
    "random_gaussian",
    "relative_error",
    "mc_mean",
    "write_rows_csv",
    "write_curve",
]

LEVELS = np.arange(11) / 10.0


# ----------------------------------------------------------------------
# metrics


def _as_arrays(means, covs, obs):
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if means.shape != obs.shape or covs.shape != means.shape + means.shape[-1:]:
        raise DimensionError(f"shapes do not match: means {means.shape}, covs {covs.shape}, obs {obs.shape}")
    return means, covs, obs


def mse(means, obs) -> float:
    """Mean over steps and dimensions of the squared error."""
    means = np.asarray(means, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if means.shape != obs.shape:
        raise DimensionError(f"shape mismatch {means.shape} vs {obs.shape}")
    return float(np.mean((means - obs) ** 2))


def _mahalanobis(means, covs, obs):
    """Squared Mahalanobis distances and log-determinants.

    Singular covariances are handled through their eigendecomposition: a
    residual with a component outside the covariance range is infinitely
    far (it lies outside the support), and the log-determinant is ``-inf``.
    """
    r = obs - means
    try:
        L = np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(covs)
        tol = means.shape[-1] * np.finfo(float).eps * np.max(np.abs(w), axis=-1, keepdims=True)
        pos = w > tol
        proj = (np.swapaxes(V, -1, -2) @ r[..., None])[..., 0]
        m2 = np.sum(np.where(pos, proj * proj / np.where(pos, w, 1.0), 0.0), axis=-1)
        outside = np.any(~pos & (proj != 0.0), axis=-1)
        m2 = np.where(outside, np.inf, m2)
        with np.errstate(divide="ignore"):
            logdet = np.sum(np.log(np.where(pos, w, 0.0)), axis=-1)
        return m2, logdet
    z = np.linalg.solve(L, r[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return np.sum(z * z, axis=-1), logdet


def _covered(m2, p: float, D: int) -> float:
    # level 1 is the whole support: every point at finite distance
    if p <= 0.0:
        return 0.0
    if p >= 1.0:
        return float(np.mean(np.isfinite(m2)))
    return float(np.mean(m2 <= chi2_inverse_cdf(float(p), D)))


def nll(means, covs, obs) -> float:
    """Negative Gaussian log-density summed over steps, averaged over series.

    Arrays are ``(..., M, D)`` / ``(..., M, D, D)``: axis ``-2`` of the means
    indexes forecast steps and leading axes index series.
    """
    means, covs, obs = _as_arrays(means, covs, obs)
    D = means.shape[-1]
    m2, logdet = _mahalanobis(means, covs, obs)
    with np.errstate(invalid="ignore"):
        per_step = 0.5 * (m2 + logdet + D * np.log(2.0 * np.pi))
    # off-support observations have zero density
    per_step = np.where(np.isinf(m2), np.inf, per_step)
    return float(np.mean(np.sum(per_step, axis=-1)))


def empirical_frequency(means, covs, obs, p: float) -> float:
    """Fraction of observations inside the level-``p`` predictive ellipsoid.

    Level 1 covers the support of the predictive, so it is below 1 only for
    degenerate covariances with observations off their range.
    """
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"level must lie in [0, 1], got {p}")
    means, covs, obs = _as_arrays(means, covs, obs)
    if p == 0.0:
        return 0.0
    m2, _ = _mahalanobis(means, covs, obs)
    return _covered(m2, p, means.shape[-1])


def coverage_curve(means, covs, obs, levels: Sequence[float] = LEVELS) -> np.ndarray:
    means, covs, obs = _as_arrays(means, covs, obs)
    D = means.shape[-1]
    m2, _ = _mahalanobis(means, covs, obs)
    return np.array([_covered(m2, float(p), D) for p in levels])


def ecpe(means, covs, obs, levels: Sequence[float] = LEVELS) -> float:
    """Mean absolute gap between empirical and nominal coverage."""
    levels = np.asarray(levels, dtype=float)
    gaps = np.abs(coverage_curve(means, covs, obs, levels) - levels)
    return math.fsum(gaps) / gaps.size


@dataclass
class CalibrationReport:
    levels: np.ndarray
    empirical: np.ndarray
    ecpe: float
    nll: float
    mse: float
    compute: dict = field(default_factory=dict)


def calibration_report(means, covs, obs, compute: Mapping[str, Any] | None = None) -> CalibrationReport:
    emp = coverage_curve(means, covs, obs)
    return CalibrationReport(
        LEVELS.copy(),
        emp,
        math.fsum(np.abs(emp - LEVELS)) / LEVELS.size,
        nll(means, covs, obs),
        mse(means, obs),
        dict(compute or {}),
    )


# ----------------------------------------------------------------------
# forecasting protocol


@dataclass(frozen=True)
class ForecastTask:
    """Condition on ``y0`` and forecast ``targets`` (``M x D``) one interval apart."""

    y0: np.ndarray
    targets: np.ndarray
    dt: float
    controls: np.ndarray | None = None
    t0: float = 0.0


def forecast_tasks(dataset, split: str = "test") -> list[ForecastTask]:
    """Forecast tasks of a dataset split.

    When the dataset records ``forecast_pairs`` (training series followed by
    its test continuation) the last training observation is the
    conditioning point and the whole continuation is the target.  Otherwise
    each series is conditioned on its own first observation.
    """
    tasks = []
    pairs = dataset.info.get("forecast_pairs")
    if pairs and split == "test":
        for i_cond, i_tgt in pairs:
            c, t = dataset.series[i_cond], dataset.series[i_tgt]
            dt = float(t.times[0] - c.times[-1])
            u = None
            if t.controls is not None:
                u = np.concatenate([c.controls[-1:], t.controls[:-1]])
            tasks.append(ForecastTask(c.observations[-1], t.observations, dt, u, float(c.times[-1])))
        return tasks
    for s in dataset.split(split):
        if len(s) < 2:
            continue
        dt = float(s.times[1] - s.times[0])
        u = None if s.controls is None else s.controls[:-1]
        tasks.append(ForecastTask(s.observations[0], s.observations[1:], dt, u, float(s.times[0])))
    return tasks


def _stack_tasks(tasks: Sequence[ForecastTask]):
    M = {t.targets.shape[0] for t in tasks}
    dts = {round(t.dt, 12) for t in tasks}
    if len(M) != 1 or len(dts) != 1:
        raise ValueError("forecast tasks must share horizon and interval to be batched")
    y0 = np.stack([t.y0 for t in tasks])
    tg = np.stack([t.targets for t in tasks])
    u = None if tasks[0].controls is None else np.stack([t.controls for t in tasks])
    return y0, tg, u, tasks[0].dt


def forecast(
    model: NsdeModel,
    tasks: Sequence[ForecastTask],
    recognition_var,
    c: float,
    method: str,
    particles: int = 128,
    seed: int = 0,
    cubature_lambda: float = 1.0,
    substeps: int = 1,
    counters: Counters | None = None,
):
    """Batched predictive means ``(n, M, D)`` and covariances ``(n, M, D, D)``.

    One-particle ensembles have no sample covariance; their predictive
    covariance is the observation noise alone.
    """
    from .inference import predict

    y0, tg, u, dt = _stack_tasks(tasks)
    n, M, D = tg.shape
    q0 = GaussianState(y0, np.broadcast_to(np.diag(np.asarray(recognition_var, dtype=float) * np.ones(D)), (n, D, D)).copy())
    if method == "mc":
        means = np.empty((n, M, D))
        covs = np.empty((n, M, D, D))
        for i in range(n):
            # each series gets its own seed-derived particle streams
            sub_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
            qi = GaussianState(y0[i], q0.cov[i])
            ens = mc_rollout(model, qi, None if u is None else u[i], M, dt, particles, sub_seed, substeps, counters)
            for k in range(1, M + 1):
                if particles >= 2:
                    s = ensemble_moments(ens, k)
                    means[i, k - 1], covs[i, k - 1] = s.mean, s.cov
                else:
                    means[i, k - 1], covs[i, k - 1] = ens.particles[k, 0], 0.0
        covs = covs + c * np.eye(D)
        return means, covs, tg
    states = predict(model, q0, u, M, dt, method, c, cubature_lambda=cubature_lambda, substeps=substeps, counters=counters)
    means = np.stack([s.mean for s in states], axis=1)
    covs = np.stack([s.cov for s in states], axis=1)
    return means, covs, tg


# ----------------------------------------------------------------------
# benchmark


def _method_label(method: str, budget) -> str:
    return method if budget is None else f"{method}:{budget}"


def benchmark_calibration(
    model: NsdeModel,
    tasks: Sequence[ForecastTask],
    recognition_var,
    c: float,
    particle_grid: Sequence[int] = (1, 2, 4, 8, 16, 32, 64, 128),
    repetitions: int = 10,
    seed: int = 0,
    include_bmm: bool = True,
    include_cubature: bool = True,
    cubature_lambda: float = 1.0,
    substeps: int = 1,
    timing: bool = False,
) -> list[dict]:
    """One row per (method, budget, repetition).

    Repetitions differ only in the particle seed; the deterministic methods
    are re-run each repetition and therefore repeat identical metrics.
    ``net_evals`` counts drift-network point evaluations, or moment passes
    for BMM; ``particle_equivalent`` converts a BMM moment pass into point
    evaluations of equal arithmetic cost.
    """
    cells: list[tuple[str, Any]] = []
    if include_bmm:
        cells.append(("bmm", None))
    if include_cubature:
        cells.append(("cubature", cubature_lambda))
    cells.extend(("mc", int(S)) for S in particle_grid)
    ratio = forward_flops(model.drift, moments=True) / forward_flops(model.drift)
    rows = []
    for method, budget in cells:
        for rep in range(repetitions):
            counters = Counters()
            rep_seed = int(np.random.SeedSequence([seed, rep]).generate_state(1)[0])
            t0 = time.perf_counter()
            means, covs, obs = forecast(
                model, tasks, recognition_var, c, method,
                particles=budget if method == "mc" else 1,
                seed=rep_seed,
                cubature_lambda=cubature_lambda,
                substeps=substeps,
                counters=counters,
            )
            seconds = time.perf_counter() - t0
            rep_ = calibration_report(means, covs, obs)
            if method == "bmm":
                evals = counters.drift_vmm_passes
                equiv = evals * ratio
            else:
                evals = counters.drift_evals
                equiv = float(evals)
            row = {
                "method": method,
                "budget": budget,
                "repetition": rep,
                "ecpe": rep_.ecpe,
                "nll": rep_.nll,
                "mse": rep_.mse,
                "net_evals": int(evals),
                "particle_equivalent": float(equiv),
                "seconds": seconds if timing else None,
            }
            row.update({f"p_{j}": float(v) for j, v in enumerate(rep_.empirical)})
            rows.append(row)
    return rows


def summarize_benchmark(rows: Sequence[Mapping]) -> list[dict]:
    """Mean and spread per (method, budget) in first-seen order."""
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r["method"], r["budget"]), []).append(r)
    out = []
    for (method, budget), rs in groups.items():
        e = np.array([r["ecpe"] for r in rs])
        secs = [r["seconds"] for r in rs if r["seconds"] is not None]
        out.append(
            {
                "method": method,
                "budget": budget,
                "ecpe_mean": float(e.mean()),
                "ecpe_std": float(e.std(ddof=1)) if e.size > 1 else 0.0,
                "nll_mean": float(np.mean([r["nll"] for r in rs])),
                "mse_mean": float(np.mean([r["mse"] for r in rs])),
                "net_evals": int(rs[0]["net_evals"]),
                "particle_equivalent": float(rs[0]["particle_equivalent"]),
                "seconds": float(np.median(secs)) if secs else None,
            }
        )
    return out


# ----------------------------------------------------------------------
# ablation


def random_gaussian(dim: int, rng: np.random.Generator, delta: float = 1e-6) -> GaussianState:
    """Mean ~ N(0, I); covariance ``G G^T + delta I`` with standard normal ``G``."""
    G = rng.standard_normal((dim, dim))
    return GaussianState(rng.standard_normal(dim), G @ G.T + delta * np.eye(dim))


def mc_mean(net: NetworkSpec, state: GaussianState, n_samples: int, rng: np.random.Generator, chunk: int = 50_000, masks: bool = True):
    """Monte Carlo mean and standard error of ``net(x)`` for ``x ~ state``.

    Dropout masks are sampled independently per draw when ``masks`` is set.
    """
    L = np.linalg.cholesky(state.cov + 1e-12 * np.eye(state.dim))
    total = np.zeros(net.output_dim)
    total_sq = np.zeros(net.output_dim)
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        x = state.mean + rng.standard_normal((n, state.dim)) @ L.T
        out = net.forward(x, net.sample_masks(rng, (n,)) if masks else None)
        total += out.sum(axis=0)
        total_sq += (out * out).sum(axis=0)
        done += n
    mean = total / n_samples
    var = total_sq / n_samples - mean * mean
    return mean, np.sqrt(np.maximum(var, 0.0) / n_samples)


def relative_error(r, r_hat) -> float:
    """``||r - r_hat||^2 / ||r||^2``."""
    r = np.asarray(r, dtype=float)
    return float(np.sum((r - r_hat) ** 2) / np.sum(r * r))


def _cubature_mean(net: NetworkSpec, state: GaussianState, lam: float = 1.0):
    scheme = cubature_scheme(state.dim, lam)
    L = np.linalg.cholesky(state.cov + 1e-12 * np.eye(state.dim))
    x = state.mean + scheme.offsets @ L.T
    return scheme.weights @ net.forward(x)


def _timed(fn: Callable, repeats: int = 5) -> float:
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(statistics.median(times))


def ablate_vmm_vs_cubature(
    dims: Sequence[int] = (2, 4, 8, 16),
    widths: Sequence[int] = (16, 64, 256),
    repetitions: int = 10,
    mc_samples: int = 1_000_000,
    seed: int = 0,
    hidden_layers: int = 3,
    timing: bool = False,
    linear_check: bool = True,
) -> list[dict]:
    """Mean relative error of VMM and cubature output means against MC.

    Each cell draws ``repetitions`` random ReLU networks with
    ``hidden_layers`` hidden layers and a random input Gaussian.  With
    ``timing`` each method's wall-clock is the median of 5 runs after a
    warm-up.  ``linear_check`` prepends a one-dimensional linear network
    row where both methods must be exact.
    """
    rows = []
    if linear_check:
        rng = np.random.default_rng([seed, 0])
        net = NetworkSpec((Affine(rng.standard_normal((1, 1)), rng.standard_normal(1)),), 1, 1)
        state = random_gaussian(1, rng)
        exact = net.layers[0].W @ state.mean + net.layers[0].b
        out, _ = vmm_forward(net, state)
        for method, est in (("vmm", out.mean), ("cubature", _cubature_mean(net, state))):
            rows.append(
                {"method": method, "kind": "linear", "dim": 1, "width": 1, "rel_error": relative_error(exact, est), "seconds": None}
            )
    for D in dims:
        for H in widths:
            ev, ec, tv, tc = [], [], [], []
            for rep in range(repetitions):
                rng = np.random.default_rng([seed, D, H, rep])
                net = mlp(D, [H] * hidden_layers, D, rng)
                state = random_gaussian(D, rng)
                ref, _ = mc_mean(net, state, mc_samples, rng, masks=False)
                vm = vmm_forward(net, state)[0].mean
                cm = _cubature_mean(net, state)
                ev.append(relative_error(ref, vm))
                ec.append(relative_error(ref, cm))
                if timing:
                    tv.append(_timed(lambda: vmm_forward(net, state)))
                    tc.append(_timed(lambda: _cubature_mean(net, state)))
            for method, err, sec in (("vmm", ev, tv), ("cubature", ec, tc)):
                rows.append(
                    {
                        "method": method,
                        "kind": "relu",
                        "dim": D,
                        "width": H,
                        "rel_error": float(np.mean(err)),
                        "seconds": float(np.mean(sec)) if timing else None,
                    }
                )
    return rows


# ----------------------------------------------------------------------
# writers


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows_csv(path: str | Path, rows: Sequence[Mapping]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([_cell(r.get(k)) for k in keys])


def write_curve(path: str | Path, x: Iterable, y: Iterable, header: str | None = None) -> None:
    """Two whitespace-separated columns, ``#`` comment header."""
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for a, b in zip(x, y):
            fh.write(f"{_cell(float(a))} {_cell(float(b))}\n")
