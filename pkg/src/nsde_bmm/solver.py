"""Time propagation of the latent SDE.

Three propagators share one model description:

* ``mc_rollout``: Euler-Maruyama sampling of particle paths.
* ``bmm_rollout``: deterministic Gaussian moment propagation, with the layer
  moment rules supplying drift and diffusion statistics at every step.
* ``cubature_rollout``: unscented-transform propagation by point evaluation.

All step functions accept recorded parameters, so each propagator can
sit inside a differentiated objective.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .exceptions import DimensionError, NumericalError
from .layers import Diagnostics, GaussianState, sanitize_covariance
from .network import (
    NetworkSpec,
    augment_with_control,
    diffusion_second_moment,
    drift_moments,
    expected_gradient_product,
)

__all__ = [
    "NsdeModel",
    "Counters",
    "ParticleEnsemble",
    "CubatureScheme",
    "em_step",
    "mc_rollout",
    "particle_generator",
    "bmm_step",
    "bmm_rollout",
    "stein_cross_cov",
    "cubature_scheme",
    "cubature_step",
    "cubature_rollout",
    "ensemble_moments",
    "cholesky_with_jitter",
    "write_rollout_csv",
    "write_ensemble_csv",
]

JITTER = 1e-8
JITTER_RETRIES = 3
_BLOCK = 256


@dataclass(frozen=True)
class NsdeModel:
    """Drift network, optional diagonal diffusion network and dimensions."""

    drift: NetworkSpec
    diffusion: NetworkSpec | None
    latent_dim: int
    control_dim: int = 0

    def __post_init__(self):
        width = self.latent_dim + self.control_dim
        if self.drift.input_dim != width or self.drift.output_dim != self.latent_dim:
            raise DimensionError(
                f"drift must map {width} -> {self.latent_dim}, got {self.drift.input_dim} -> {self.drift.output_dim}"
            )
        if self.diffusion is not None and (
            self.diffusion.input_dim != width or self.diffusion.output_dim != self.latent_dim
        ):
            raise DimensionError(
                f"diffusion must map {width} -> {self.latent_dim}, got "
                f"{self.diffusion.input_dim} -> {self.diffusion.output_dim}"
            )

    def params(self) -> dict[str, Any]:
        p = self.drift.params("drift.")
        if self.diffusion is not None:
            p.update(self.diffusion.params("diffusion."))
        return p

    def with_params(self, values: Mapping[str, Any]) -> "NsdeModel":
        diffusion = None if self.diffusion is None else self.diffusion.with_params(values, "diffusion.")
        return NsdeModel(self.drift.with_params(values, "drift."), diffusion, self.latent_dim, self.control_dim)

    def to_dict(self) -> dict:
        return {
            "drift": self.drift.to_dict(),
            "diffusion": None if self.diffusion is None else self.diffusion.to_dict(),
            "latent_dim": self.latent_dim,
            "control_dim": self.control_dim,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NsdeModel":
        diff = d.get("diffusion")
        return cls(
            NetworkSpec.from_dict(d["drift"]),
            None if diff is None else NetworkSpec.from_dict(diff),
            int(d["latent_dim"]),
            int(d.get("control_dim", 0)),
        )


@dataclass
class Counters:
    """Network evaluation counts.

    ``drift_evals`` / ``diffusion_evals`` count point evaluations (one per
    particle or sigma point); ``*_vmm_passes`` count moment passes.
    """

    drift_evals: int = 0
    diffusion_evals: int = 0
    drift_vmm_passes: int = 0
    diffusion_vmm_passes: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ParticleEnsemble:
    """Sampled paths with shape ``(K + 1, S, D)``."""

    particles: np.ndarray
    seed: int

    @property
    def S(self) -> int:
        return int(self.particles.shape[1])


@dataclass(frozen=True)
class CubatureScheme:
    lam: float
    weights: np.ndarray
    offsets: np.ndarray

    @property
    def n_points(self) -> int:
        return int(self.weights.shape[0])


# ----------------------------------------------------------------------
# helpers


def _control_at(controls, k: int):
    """Control at step ``k``; ``controls`` has shape ``(..., K, m)``."""
    if controls is None:
        return None
    u = np.asarray(controls, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    if u.shape[-1] == 0:
        return None
    return u[..., k, :]


def _per_point(u):
    # broadcast a per-state control over a particle or sigma-point axis
    return None if u is None else np.asarray(u)[..., None, :]


def _point_input(z, u):
    if u is None or np.size(u) == 0:
        return z
    u = np.broadcast_to(np.asarray(u, dtype=float), np.shape(z)[:-1] + (np.shape(u)[-1],))
    return ad.concatenate([z, u], axis=-1)


def _check(x, what: str):
    if not np.all(np.isfinite(ad.value_of(x))):
        raise NumericalError(f"non-finite {what}")


def cholesky_with_jitter(S):
    """Cholesky factor, adding ``1e-8 * I`` (times 10 per retry) on failure."""
    n = np.shape(S)[-1]
    eye = np.eye(n)
    jitter = 0.0
    for attempt in range(JITTER_RETRIES + 1):
        try:
            Sj = S if jitter == 0.0 else S + jitter * eye
            return ad.cholesky(Sj)
        except np.linalg.LinAlgError:
            jitter = JITTER if jitter == 0.0 else 10.0 * jitter
    raise NumericalError(f"Cholesky factorization failed after {JITTER_RETRIES} jitter retries")


# ----------------------------------------------------------------------
# Euler-Maruyama sampling


def em_step(model: NsdeModel, z, u, dt: float, noise, masks: Mapping[str, Mapping] | None = None, counters: Counters | None = None):
    """One Euler-Maruyama step ``z + f(z) dt + L(z) * noise``.

    ``noise`` already carries the ``sqrt(dt)`` scale.  ``masks`` maps
    ``"drift"`` / ``"diffusion"`` to per-layer dropout masks.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    masks = masks or {}
    x = _point_input(z, u)
    n = int(np.prod(np.shape(z)[:-1], dtype=int))
    f = model.drift.forward(x, masks.get("drift"))
    out = z + f * dt
    if counters is not None:
        counters.drift_evals += n
    if model.diffusion is not None:
        out = out + model.diffusion.forward(x, masks.get("diffusion")) * noise
        if counters is not None:
            counters.diffusion_evals += n
    return out


def particle_generator(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for particle ``index``.

    The Philox key comes from ``seed``; the particle index occupies the
    second counter word, so streams never overlap and a particle's draws do
    not depend on how many other particles exist.
    """
    key = np.random.SeedSequence(int(seed)).generate_state(2, dtype=np.uint64)
    counter = np.array([0, int(index), 0, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def _mask_widths(net: NetworkSpec | None) -> list[tuple[int, int, float]]:
    if net is None:
        return []
    widths = net.layer_widths()
    return [(i, widths[i], net.layers[i].q) for i in net.dropout_layers if net.layers[i].q < 1.0]


def draw_particle_randomness(model: NsdeModel, seed: int, indices: Sequence[int], n_steps: int):
    """Initial, noise and dropout draws for a set of particles.

    Returns
    -------
    eps0 : (P, D) standard normals for the initial state
    noise : (n_steps, P, D) standard normals
    masks : list over steps of ``{"drift": {...}, "diffusion": {...}}``
    """
    D = model.latent_dim
    specs = {"drift": _mask_widths(model.drift), "diffusion": _mask_widths(model.diffusion)}
    mask_width = sum(w for v in specs.values() for _, w, _ in v)
    P = len(indices)
    eps0 = np.empty((P, D))
    noise = np.empty((n_steps, P, D))
    unif = np.empty((n_steps, P, mask_width))
    for j, idx in enumerate(indices):
        g = particle_generator(seed, idx)
        eps0[j] = g.standard_normal(D)
        noise[:, j] = g.standard_normal((n_steps, D))
        if mask_width:
            unif[:, j] = g.random((n_steps, mask_width))
    masks = []
    for k in range(n_steps):
        step, col = {}, 0
        for name, entries in specs.items():
            d = {}
            for i, w, q in entries:
                d[i] = (unif[k, :, col:col + w] < q).astype(float)
                col += w
            step[name] = d
        masks.append(step)
    return eps0, noise, masks


def _state_sqrt(cov):
    """Square-root factor of a (possibly singular) covariance."""
    if ad.is_var(cov):
        return cholesky_with_jitter(cov)
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(0.5 * (cov + np.swapaxes(cov, -1, -2)))
        return V * np.sqrt(np.maximum(w, 0.0))[..., None, :]


def em_paths(model: NsdeModel, q0: GaussianState, controls, K: int, dt: float, eps0, noise, masks, substeps: int = 1, counters: Counters | None = None):
    """Euler-Maruyama paths from fixed randomness.

    ``eps0`` has shape ``(..., P, D)`` and ``noise`` ``(K*substeps, ..., P, D)``
    (standard normals).  The initial state is ``mean + chol(cov) eps0`` with
    ``q0`` broadcast against the particle axis.  Returns the list of states at
    the ``K + 1`` observation times.
    """
    h = dt / substeps
    sq = np.sqrt(h)
    root = _state_sqrt(q0.cov)
    z = ad.unsqueeze(q0.mean, -2) + ad.matmul(eps0, ad.swap_last(root))
    path = [z]
    for k in range(K):
        u = _per_point(_control_at(controls, k))
        for s in range(substeps):
            j = k * substeps + s
            z = em_step(model, z, u, h, noise[j] * sq, masks[j] if masks else None, counters)
            try:
                _check(z, "particle state")
            except NumericalError as exc:
                raise NumericalError(f"step {k + 1}: {exc}") from None
        path.append(z)
    return path


def mc_rollout(model: NsdeModel, q0: GaussianState, controls, K: int, dt: float, S: int, seed: int, substeps: int = 1, counters: Counters | None = None) -> ParticleEnsemble:
    """Sample ``S`` Euler-Maruyama paths over ``K`` observation intervals.

    Particle ``i`` draws its initial state, Wiener increments and dropout
    masks from :func:`particle_generator` ``(seed, i)``, so the output is a
    pure function of the inputs and the seed.
    """
    if S < 1 or K < 0:
        raise ValueError("need S >= 1 and K >= 0")
    q0 = q0.numpy()
    out = np.empty((K + 1, S, model.latent_dim))
    for start in range(0, S, _BLOCK):
        idx = list(range(start, min(S, start + _BLOCK)))
        eps0, noise, masks = draw_particle_randomness(model, seed, idx, K * substeps)
        path = em_paths(model, q0, controls, K, dt, eps0, noise, masks, substeps, counters)
        out[:, start:start + len(idx)] = np.stack(path)
    return ParticleEnsemble(out, int(seed))


def ensemble_moments(e: ParticleEnsemble | np.ndarray, step: int | None = None) -> GaussianState:
    """Sample mean and unbiased covariance of the particles at ``step``."""
    x = e.particles[step] if isinstance(e, ParticleEnsemble) else np.asarray(e)
    if x.shape[-2] < 2:
        raise ValueError("ensemble moments need at least two particles")
    mean = x.mean(axis=-2)
    c = x - mean[..., None, :]
    cov = np.swapaxes(c, -1, -2) @ c / (x.shape[-2] - 1)
    cov, _ = sanitize_covariance(cov)
    return GaussianState(mean, cov)


# ----------------------------------------------------------------------
# moment propagation


def stein_cross_cov(Sigma, J_chain):
    """``Cov[z, f(z)] ~= Sigma J^T`` for a row-output expected Jacobian."""
    if np.shape(Sigma)[-1] != np.shape(J_chain)[-1]:
        raise DimensionError(f"Sigma {np.shape(Sigma)} and Jacobian {np.shape(J_chain)} do not fit")
    return ad.matmul(Sigma, ad.swap_last(J_chain))


def bmm_step(model: NsdeModel, state: GaussianState, u, dt: float, diagnostics: Diagnostics | None = None, counters: Counters | None = None) -> GaussianState:
    """One deterministic moment-matching step.

    ``mu' = mu + a dt`` and
    ``Sigma' = Sigma + B dt^2 + (C + C^T) dt + diag(E[L L^T]) dt``
    with ``(a, B)`` the drift output moments and ``C`` the state/drift
    cross-covariance.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    a, B, jac = drift_moments(model.drift, state, u, diagnostics)
    if counters is not None:
        counters.drift_vmm_passes += 1
    C = stein_cross_cov(state.cov, expected_gradient_product(jac, model.latent_dim))
    _check(C, "cross-covariance term")
    mean = state.mean + a * dt
    cov = state.cov + B * (dt * dt) + (C + ad.swap_last(C)) * dt
    if model.diffusion is not None:
        Dk = diffusion_second_moment(model.diffusion, state, u, diagnostics)
        if counters is not None:
            counters.diffusion_vmm_passes += 1
        _check(Dk, "diffusion second moment")
        cov = cov + ad.diag_embed(Dk) * dt
    _check(mean, "mean")
    _check(cov, "covariance")
    cov, _ = sanitize_covariance(cov, diagnostics, strict=True)
    return GaussianState(mean, cov)


def bmm_rollout(model: NsdeModel, q0: GaussianState, controls, K: int, dt: float, substeps: int = 1, diagnostics: Diagnostics | None = None, counters: Counters | None = None) -> list[GaussianState]:
    """Iterate :func:`bmm_step`; returns ``K + 1`` states at observation times."""
    h = dt / substeps
    states = [q0]
    state = q0
    for k in range(K):
        u = _control_at(controls, k)
        for _ in range(substeps):
            try:
                state = bmm_step(model, state, u, h, diagnostics, counters)
            except NumericalError as exc:
                raise NumericalError(f"step {k + 1}: {exc}") from None
        states.append(state)
    return states


def cubature_scheme(D: int, lam: float = 1.0) -> CubatureScheme:
    """Unscented sigma-point weights and unit offsets with ``kappa = lam``."""
    if lam <= -D:
        raise ValueError(f"spread parameter must exceed -D = {-D}, got {lam}")
    w = np.full(2 * D + 1, 1.0 / (2.0 * (D + lam)))
    w[0] = lam / (D + lam)
    r = np.sqrt(D + lam)
    offsets = np.zeros((2 * D + 1, D))
    offsets[1:D + 1] = r * np.eye(D)
    offsets[D + 1:] = -r * np.eye(D)
    return CubatureScheme(float(lam), w, offsets)


def cubature_step(model: NsdeModel, state: GaussianState, u, dt: float, scheme: CubatureScheme, diagnostics: Diagnostics | None = None, counters: Counters | None = None) -> GaussianState:
    """Unscented propagation of one Euler mean step plus expected diffusion.

    Networks are evaluated pointwise with dropout at its expectation.
    """
    D = state.dim
    if scheme.offsets.shape[-1] != D:
        raise DimensionError(f"scheme built for D={scheme.offsets.shape[-1]}, state has D={D}")
    root = cholesky_with_jitter(state.cov)
    # points: (..., 2D+1, D)
    x = ad.unsqueeze(state.mean, -2) + ad.matmul(scheme.offsets, ad.swap_last(root))
    xin = _point_input(x, _per_point(u))
    n_pts = scheme.n_points * int(np.prod(np.shape(state.mean)[:-1], dtype=int))
    m = x + model.drift.forward(xin) * dt
    if counters is not None:
        counters.drift_evals += n_pts
    w = scheme.weights
    mean = ad.sum_(m * w[:, None], axis=-2)
    c = m - ad.unsqueeze(mean, -2)
    cov = ad.matmul(ad.swap_last(c * w[:, None]), c)
    if model.diffusion is not None:
        L = model.diffusion.forward(xin)
        if counters is not None:
            counters.diffusion_evals += n_pts
        cov = cov + ad.diag_embed(ad.sum_(L * L * w[:, None], axis=-2)) * dt
    _check(mean, "mean")
    _check(cov, "covariance")
    cov, _ = sanitize_covariance(cov, diagnostics, strict=True)
    return GaussianState(mean, cov)


def cubature_rollout(model: NsdeModel, q0: GaussianState, controls, K: int, dt: float, scheme: CubatureScheme | None = None, substeps: int = 1, diagnostics: Diagnostics | None = None, counters: Counters | None = None) -> list[GaussianState]:
    scheme = scheme or cubature_scheme(q0.dim)
    h = dt / substeps
    states = [q0]
    state = q0
    for k in range(K):
        u = _control_at(controls, k)
        for _ in range(substeps):
            try:
                state = cubature_step(model, state, u, h, scheme, diagnostics, counters)
            except NumericalError as exc:
                raise NumericalError(f"step {k + 1}: {exc}") from None
        states.append(state)
    return states


# ----------------------------------------------------------------------
# serialization


def _fmt(x: float) -> str:
    return repr(float(x))


def write_rollout_csv(path: str | Path, times: Sequence[float], states: Sequence[GaussianState]) -> None:
    """Columns ``t, mean_1..D, cov_ij`` over the row-major upper triangle."""
    D = states[0].dim
    iu = np.triu_indices(D)
    header = ["t"] + [f"mean_{i + 1}" for i in range(D)] + [f"cov_{i + 1}{j + 1}" if D < 10 else f"cov_{i + 1}_{j + 1}" for i, j in zip(*iu)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, s in zip(times, states):
            m = np.asarray(ad.value_of(s.mean))
            c = np.asarray(ad.value_of(s.cov))
            w.writerow([_fmt(t)] + [_fmt(v) for v in m] + [_fmt(v) for v in c[iu]])


def write_ensemble_csv(path: str | Path, times: Sequence[float], ensemble: ParticleEnsemble) -> None:
    """Columns ``t, particle_id, z_1..D``."""
    P = ensemble.particles
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "particle_id"] + [f"z_{i + 1}" for i in range(P.shape[-1])])
        for k, t in enumerate(times):
            for i in range(P.shape[1]):
                w.writerow([_fmt(t), i] + [_fmt(v) for v in P[k, i]])
