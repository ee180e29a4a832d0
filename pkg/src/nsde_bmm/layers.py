"""Per-layer Gaussian moment propagation and expected Jacobians.

Every moment function maps a :class:`GaussianState` to the Gaussian matched
to the layer output.  States may carry leading batch axes: ``mean`` has
shape ``(..., D)`` and ``cov`` shape ``(..., D, D)``.  Parameters and states
may be plain arrays or recorded :class:`~nsde_bmm.autodiff.Var` nodes.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np
from scipy.special import ndtr, owens_t

from . import autodiff as ad
from .exceptions import DimensionError, NumericalError

__all__ = [
    "GaussianState",
    "Affine",
    "ReLU",
    "RELU_CROSS",
    "bvn_cdf",
    "Tanh",
    "Dropout",
    "LayerSpec",
    "Diagnostics",
    "layer_forward",
    "affine_moments",
    "relu_moments",
    "dropout_moments",
    "layer_moments",
    "layer_expected_jacobian",
    "sanitize_covariance",
    "symmetrize",
]

VAR_FLOOR = 1e-12
RHO_MARGIN = 1e-12
CLAMP_VALUE = 1e-9
PSD_TOL = 1e-8
_SMALL_RHO = 1e-2


def symmetrize(M):
    return 0.5 * (M + ad.swap_last(M))


@dataclass(frozen=True)
class GaussianState:
    """Mean vector and covariance matrix, symmetrized on construction."""

    mean: Any
    cov: Any

    def __post_init__(self):
        if np.shape(self.cov)[-2:] != (np.shape(self.mean)[-1],) * 2:
            raise DimensionError(
                f"covariance shape {np.shape(self.cov)} does not match mean {np.shape(self.mean)}"
            )
        object.__setattr__(self, "cov", symmetrize(self.cov))

    @property
    def dim(self) -> int:
        return int(np.shape(self.mean)[-1])

    def numpy(self) -> "GaussianState":
        """Detached copy with plain array fields."""
        return GaussianState(np.array(ad.value_of(self.mean)), np.array(ad.value_of(self.cov)))


@dataclass
class Diagnostics:
    """Accumulates covariance-repair events for one run."""

    sanitize_calls: int = 0
    clamp_events: int = 0

    @property
    def clamp_rate(self) -> float:
        return self.clamp_events / self.sanitize_calls if self.sanitize_calls else 0.0


@dataclass(frozen=True)
class Affine:
    W: Any
    b: Any
    kind: str = field(default="affine", init=False)

    @property
    def in_dim(self) -> int:
        return int(np.shape(self.W)[1])

    @property
    def out_dim(self) -> int:
        return int(np.shape(self.W)[0])


RELU_CROSS = ("exact", "series")


@dataclass(frozen=True)
class ReLU:
    """Rectifier.  ``cross`` selects the rule for output cross-covariances:
    ``"exact"`` (bivariate normal orthant integrals) or ``"series"`` (the
    low-order expansion in the standardized means)."""

    cross: str = "exact"
    kind: str = field(default="relu", init=False)

    def __post_init__(self):
        if self.cross not in RELU_CROSS:
            raise ValueError(f"cross must be one of {RELU_CROSS}, got {self.cross!r}")


@dataclass(frozen=True)
class Tanh:
    """Point-evaluation only; used by the cubature baseline."""

    kind: str = field(default="tanh", init=False)


@dataclass(frozen=True)
class Dropout:
    """Inverted dropout with keep-probability ``q``."""

    q: float
    kind: str = field(default="dropout", init=False)

    def __post_init__(self):
        if not (0.0 < self.q <= 1.0):
            raise ValueError(f"dropout keep-probability must lie in (0, 1], got {self.q}")


LayerSpec = Union[Affine, ReLU, Tanh, Dropout]


def _check_affine_input(layer: Affine, width: int) -> None:
    if width != layer.in_dim:
        raise DimensionError(f"affine layer expects input width {layer.in_dim}, got {width}")


def layer_forward(layer: LayerSpec, x, mask=None):
    """Point evaluation of one layer on ``x`` of shape ``(..., H_in)``.

    For dropout, ``mask`` is a Bernoulli(q) array broadcastable to ``x``;
    ``None`` means the all-ones prediction-time mask.
    """
    if isinstance(layer, Affine):
        _check_affine_input(layer, np.shape(x)[-1])
        return ad.matmul(x, ad.swap_last(layer.W)) + layer.b
    if isinstance(layer, ReLU):
        return ad.relu(x)
    if isinstance(layer, Tanh):
        return ad.tanh(x)
    if isinstance(layer, Dropout):
        if mask is None:
            return x
        return x * (np.asarray(mask, dtype=float) / layer.q)
    raise TypeError(f"unsupported layer {layer!r}")


def affine_moments(layer: Affine, state: GaussianState) -> GaussianState:
    _check_affine_input(layer, state.dim)
    mean = ad.matmul(state.mean, ad.swap_last(layer.W)) + layer.b
    cov = ad.matmul(ad.matmul(layer.W, state.cov), ad.swap_last(layer.W))
    return GaussianState(mean, cov)


def _cross_coefficients(rho):
    """``(rho_bar, s, ds/drho, G/rho^2)`` with ``s = (arcsin rho - rho)/rho^3``.

    ``G = rho*arcsin(rho) + rho_bar - 1`` is nonnegative and ``dG/drho`` is
    ``arcsin(rho)``.  Near zero ``s`` and its derivative use their Taylor
    series, whose truncation error is below 1e-17 for ``|rho| < 1e-2``.
    """
    r = np.asarray(rho, dtype=float)
    rb = np.sqrt(1.0 - r * r)
    small = np.abs(r) < _SMALL_RHO
    rs = np.where(small, 0.5, r)
    rbs = np.sqrt(1.0 - rs * rs)
    asn = np.arcsin(rs) - rs
    r2 = r * r
    inv3 = 1.0 / (rs * rs * rs)
    s = np.where(small, 1.0 / 6.0 + r2 * (3.0 / 40.0 + r2 * (5.0 / 112.0 + r2 * (35.0 / 1152.0))), asn * inv3)
    ds = np.where(
        small,
        r * (3.0 / 20.0 + r2 * (5.0 / 28.0 + r2 * (35.0 / 192.0))),
        ((1.0 / rbs - 1.0) - 3.0 * asn / rs) * inv3,
    )
    g_norm = rb / (1.0 + rb) + r2 * s
    return rb, s, ds, g_norm


_cross_cache: list = [None]


def _cross_exponent(rho, eps_i, eps_j):
    # the forward pass and the three cotangents share these intermediates;
    # the cache holds the input arrays, so identity checks cannot go stale
    hit = _cross_cache[0]
    if hit is not None and hit[0] is rho and hit[1] is eps_i and hit[2] is eps_j:
        return hit[3]
    rb, s, ds, gn = _cross_coefficients(rho)
    sq = eps_i * eps_i + eps_j * eps_j
    x = eps_i * eps_j
    q = (sq / (2.0 * (1.0 + rb)) - rho * s * x) / gn
    out = (rb, s, ds, gn, sq, x, q)
    _cross_cache[0] = (rho, eps_i, eps_j, out)
    return out


def _cross_fwd(rho, eps_i, eps_j):
    rb, s, ds, gn, sq, x, q = _cross_exponent(rho, eps_i, eps_j)
    return (rho * rho * gn / (2.0 * math.pi)) * np.exp(-q)


def _cross_vjp_rho(g, out, rho, eps_i, eps_j):
    rb, s, ds, gn, sq, x, q = _cross_exponent(rho, eps_i, eps_j)
    opb2 = (1.0 + rb) ** 2
    dnum = sq * rho / (2.0 * rb * opb2) - (s + rho * ds) * x
    dgn = -rho / (rb * opb2) + 2.0 * rho * s + rho * rho * ds
    dq = (dnum - q * dgn) / gn
    d = np.arcsin(rho) / (2.0 * math.pi) * np.exp(-q) - out * dq
    return ad.unbroadcast(g * d, np.shape(rho))


def _cross_vjp_eps(first: bool):
    def vjp(g, out, rho, eps_i, eps_j):
        rb, s, ds, gn = _cross_exponent(rho, eps_i, eps_j)[:4]
        e, other = (eps_i, eps_j) if first else (eps_j, eps_i)
        dq = (e / (1.0 + rb) - rho * s * other) / gn
        return ad.unbroadcast(-g * out * dq, np.shape(e))

    return vjp


# Standardized E[relu_i relu_j] - SR_i SR_j - rho Phi_i Phi_j: the exponent of
# the correction term expanded to second order in the standardized means,
# exact when both means are zero.
_relu_cross_term = ad.primitive("relu_cross", _cross_fwd, _cross_vjp_rho, _cross_vjp_eps(True), _cross_vjp_eps(False))


def bvn_cdf(h, k, rho):
    """``P(U <= h, V <= k)`` for standard normals with correlation ``rho``.

    Owen's T representation; ``|rho| < 1`` is required.
    """
    h = np.where(h == 0.0, 1e-300, h)
    k = np.where(k == 0.0, 1e-300, k)
    s = np.sqrt((1.0 - rho) * (1.0 + rho))
    # the nudged zeros send the second argument to +-inf, where T is finite
    with np.errstate(over="ignore", divide="ignore"):
        t = owens_t(h, (k - rho * h) / (h * s)) + owens_t(k, (h - rho * k) / (k * s))
    beta = np.where((h > 0.0) == (k > 0.0), 0.0, 0.5)
    return 0.5 * (ndtr(h) + ndtr(k)) - t - beta


# orthant probabilities by input identity; a training batch records a few
# dozen ReLU layers whose backward passes run after all forward passes
_ORTHANT_CACHE: "OrderedDict[tuple, tuple]" = OrderedDict()
_ORTHANT_CACHE_SIZE = 128


def _npdf(x):
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _upper_pairs(rho, eps):
    n = eps.shape[-1]
    iu, ju = np.triu_indices(n, 1)
    return iu, ju, rho[..., iu, ju], eps[..., iu], eps[..., ju]


def _exact_parts(rho, eps):
    """Pairwise intermediates over the strict upper triangle."""
    iu, ju, r, e_i, e_j = _upper_pairs(rho, eps)
    s = np.sqrt((1.0 - r) * (1.0 + r))
    key = (id(rho), id(eps))
    hit = _ORTHANT_CACHE.get(key)
    if hit is not None and hit[0] is rho and hit[1] is eps:
        orthant = hit[2]
    else:
        orthant = bvn_cdf(e_i, e_j, r)
        _ORTHANT_CACHE[key] = (rho, eps, orthant)
        while len(_ORTHANT_CACHE) > _ORTHANT_CACHE_SIZE:
            _ORTHANT_CACHE.popitem(last=False)
    # conditional tail probabilities P(U > -e_i | V = -e_j) and its mirror
    cond_i = ndtr((e_i - r * e_j) / s)
    cond_j = ndtr((e_j - r * e_i) / s)
    return iu, ju, r, e_i, e_j, s, cond_i, cond_j, orthant


def _scatter_symmetric(vals, iu, ju, n):
    out = np.zeros(vals.shape[:-1] + (n, n))
    out[..., iu, ju] = vals
    out[..., ju, iu] = vals
    return out


def _exact_fwd(rho, eps):
    iu, ju, r, e_i, e_j, s, cond_i, cond_j, orthant = _exact_parts(rho, eps)
    pdf_i, pdf_j = _npdf(e_i), _npdf(e_j)
    second = (e_i * e_j + r) * orthant + e_i * pdf_j * cond_i + e_j * pdf_i * cond_j + s * pdf_j * _npdf((e_i - r * e_j) / s)
    cov = second - (pdf_i + e_i * ndtr(e_i)) * (pdf_j + e_j * ndtr(e_j))
    return _scatter_symmetric(cov, iu, ju, eps.shape[-1])


def _pair_cotangent(g, iu, ju):
    g = np.asarray(g)
    return g[..., iu, ju] + g[..., ju, iu]


def _exact_vjp_rho(g, out, rho, eps):
    # Price's theorem: the correlation derivative is the orthant probability
    iu, ju, *_, orthant = _exact_parts(rho, eps)
    gp = _pair_cotangent(g, iu, ju)
    full = np.zeros(np.broadcast_shapes(np.shape(g), np.shape(rho)))
    full[..., iu, ju] = gp * orthant
    return ad.unbroadcast(full, np.shape(rho))


def _exact_vjp_eps(g, out, rho, eps):
    iu, ju, r, e_i, e_j, s, cond_i, cond_j, orthant = _exact_parts(rho, eps)
    gp = _pair_cotangent(g, iu, ju)
    pdf_i, pdf_j = _npdf(e_i), _npdf(e_j)
    sr_i, sr_j = pdf_i + e_i * ndtr(e_i), pdf_j + e_j * ndtr(e_j)
    d_i = e_j * orthant + pdf_j * cond_i + r * pdf_i * cond_j - ndtr(e_i) * sr_j
    d_j = e_i * orthant + pdf_i * cond_j + r * pdf_j * cond_i - ndtr(e_j) * sr_i
    n = eps.shape[-1]
    shape = gp.shape[:-1] + (n, n)
    acc = np.zeros(shape)
    acc[..., iu, ju] = gp * d_i
    grad = acc.sum(axis=-1)
    acc[..., iu, ju] = gp * d_j
    grad = grad + acc.sum(axis=-2)
    return ad.unbroadcast(grad, np.shape(eps))


# Standardized Cov[relu(eps_i + U), relu(eps_j + V)] for unit normals U, V
# with correlation rho_ij, read from the strict upper triangle of ``rho``;
# the diagonal of the result is zero.
_relu_cross_exact = ad.primitive("relu_cross_exact", _exact_fwd, _exact_vjp_rho, _exact_vjp_eps)


def relu_moments(state: GaussianState, diagnostics: Diagnostics | None = None, cross: str = "exact") -> GaussianState:
    """Gaussian matched to ``max(0, h)`` for ``h ~ N(a, B)``.

    Means and variances use the exact univariate expressions.  With
    ``cross="exact"`` the cross covariances are exact as well, built from
    bivariate normal orthant probabilities.  With ``cross="series"`` they
    use a second-order expansion in the standardized means of the
    correction term on top of ``SR_i SR_j + rho Phi_i Phi_j``; after
    subtracting the mean outer product only ``rho Phi_i Phi_j`` and the
    correction remain.
    """
    a, B = state.mean, state.cov
    var = ad.maximum(ad.diagonal(B), VAR_FLOOR)
    sd = ad.sqrt(var)
    eps = a / sd
    cdf = ad.ncdf(eps)
    pdf = ad.npdf(eps)
    mean = sd * (pdf + eps * cdf)
    diag_var = (a * a + var) * cdf + a * sd * pdf - mean * mean
    diag_var = ad.maximum(diag_var, 0.0)

    sd_i, sd_j = sd[..., :, None], sd[..., None, :]
    eps_i, eps_j = eps[..., :, None], eps[..., None, :]
    n = state.dim
    off = 1.0 - np.eye(n)
    # diagonal entries are replaced below; zero them so the series stays tame
    rho = ad.clip(B / (sd_i * sd_j), -1.0 + RHO_MARGIN, 1.0 - RHO_MARGIN) * off
    if cross == "exact":
        std_cov = _relu_cross_exact(rho, eps)
    elif cross == "series":
        std_cov = rho * (cdf[..., :, None] * cdf[..., None, :]) + _relu_cross_term(rho, eps_i, eps_j)
    else:
        raise ValueError(f"unknown cross-covariance rule {cross!r}")
    cov = (sd_i * sd_j) * std_cov * off + ad.diag_embed(diag_var)
    if not ad.is_var(cov):
        # recorded (training) covariances are left unrepaired, see sanitize_covariance
        cov, _ = sanitize_covariance(cov, diagnostics)
    return GaussianState(mean, cov)


def dropout_moments(layer: Dropout, state: GaussianState) -> GaussianState:
    if layer.q == 1.0:
        return state
    a, B = state.mean, state.cov
    extra = ((1.0 - layer.q) / layer.q) * (ad.diagonal(B) + a * a)
    return GaussianState(a, B + ad.diag_embed(extra))


def layer_moments(layer: LayerSpec, state: GaussianState, diagnostics: Diagnostics | None = None) -> GaussianState:
    if isinstance(layer, Affine):
        return affine_moments(layer, state)
    if isinstance(layer, ReLU):
        return relu_moments(state, diagnostics, layer.cross)
    if isinstance(layer, Dropout):
        return dropout_moments(layer, state)
    raise TypeError(f"no moment rule for layer kind {getattr(layer, 'kind', layer)!r}")


def layer_expected_jacobian(layer: LayerSpec, state: GaussianState):
    """``E[d out / d in]`` under the input Gaussian, rows indexing outputs."""
    if isinstance(layer, Affine):
        _check_affine_input(layer, state.dim)
        return layer.W
    if isinstance(layer, ReLU):
        sd = ad.sqrt(ad.maximum(ad.diagonal(state.cov), VAR_FLOOR))
        return ad.diag_embed(ad.ncdf(state.mean / sd))
    if isinstance(layer, Dropout):
        return np.eye(state.dim)
    raise TypeError(f"no expected Jacobian for layer kind {getattr(layer, 'kind', layer)!r}")


def sanitize_covariance(M, diagnostics: Diagnostics | None = None, strict: bool = False):
    """Symmetrize ``M`` and repair negative eigenvalues.

    Matrices whose smallest eigenvalue falls below ``-1e-8 * max(1, largest)``
    have every negative eigenvalue replaced by ``1e-9``; each such matrix
    counts as one clamping event.  Matrices within that tolerance are only
    symmetrized.  Recorded (differentiable) inputs are only symmetrized;
    with ``strict=True`` they raise :class:`NumericalError` instead of being
    repaired.

    Returns
    -------
    (matrix, n_clamped)
    """
    S = symmetrize(M)
    val = np.asarray(ad.value_of(S))
    if diagnostics is not None:
        diagnostics.sanitize_calls += int(np.prod(val.shape[:-2], dtype=int))
    if not np.all(np.isfinite(val)):
        raise NumericalError("non-finite covariance entries")
    w, V = np.linalg.eigh(val)
    lo = w[..., 0]
    hi = np.maximum(w[..., -1], 1.0)
    bad = lo < -PSD_TOL * hi
    n_bad = int(np.sum(bad))
    if n_bad == 0:
        return S, 0
    if diagnostics is not None:
        diagnostics.clamp_events += n_bad
    if ad.is_var(S):
        if strict:
            raise NumericalError(
                f"covariance not positive semi-definite (min eigenvalue {float(np.min(lo)):.3e})"
            )
        return S, n_bad
    w_fixed = np.where(w < 0.0, CLAMP_VALUE, w)
    repaired = (V * w_fixed[..., None, :]) @ np.swapaxes(V, -1, -2)
    repaired = 0.5 * (repaired + np.swapaxes(repaired, -1, -2))
    out = np.where(bad[..., None, None], repaired, val)
    return out, n_bad
