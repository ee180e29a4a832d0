"""Moment propagation through whole feed-forward networks.

A :class:`NetworkSpec` is an ordered list of layers.  :func:`vmm_forward`
folds the layer moment rules over the sequence and collects the expected
Jacobian of each layer, which the solver multiplies together to form the
state/drift cross-covariance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigError, DimensionError, NumericalError
from .layers import (
    Affine,
    Diagnostics,
    Dropout,
    GaussianState,
    LayerSpec,
    ReLU,
    Tanh,
    layer_expected_jacobian,
    layer_forward,
    layer_moments,
)

__all__ = [
    "NetworkSpec",
    "mlp",
    "augment_with_control",
    "vmm_forward",
    "drift_moments",
    "diffusion_second_moment",
    "expected_gradient_product",
    "forward_flops",
]

_KINDS = {"affine": Affine, "relu": ReLU, "tanh": Tanh, "dropout": Dropout}


@dataclass(frozen=True)
class NetworkSpec:
    """Feed-forward network as an ordered sequence of layers.

    Parameters
    ----------
    layers : sequence of LayerSpec
    input_dim, output_dim : int
        Widths of the network input (state plus control) and output.
    """

    layers: tuple
    input_dim: int
    output_dim: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_dim < 1 or self.output_dim < 1:
            raise DimensionError("network widths must be positive")
        width = self.input_dim
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Affine):
                if np.ndim(layer.W) != 2 or np.shape(layer.b) != (layer.out_dim,):
                    raise DimensionError(f"layer {i}: W must be 2-D and b match its rows")
                if layer.in_dim != width:
                    raise DimensionError(f"layer {i}: expects width {layer.in_dim}, previous width is {width}")
                width = layer.out_dim
            elif not isinstance(layer, (ReLU, Tanh, Dropout)):
                raise TypeError(f"layer {i}: unsupported layer {layer!r}")
        if width != self.output_dim:
            raise DimensionError(f"network output width {width} differs from output_dim {self.output_dim}")

    # parameters -------------------------------------------------------
    def params(self, prefix: str = "") -> dict[str, Any]:
        """Trainable arrays keyed ``"{prefix}{layer}.W"`` / ``".b"``."""
        out = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Affine):
                out[f"{prefix}{i}.W"] = layer.W
                out[f"{prefix}{i}.b"] = layer.b
        return out

    def with_params(self, values: Mapping[str, Any], prefix: str = "") -> "NetworkSpec":
        """Copy with affine parameters replaced (arrays or recorded nodes)."""
        layers = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Affine):
                layer = Affine(values.get(f"{prefix}{i}.W", layer.W), values.get(f"{prefix}{i}.b", layer.b))
            layers.append(layer)
        return NetworkSpec(tuple(layers), self.input_dim, self.output_dim)

    @property
    def supports_moments(self) -> bool:
        return not any(isinstance(layer, Tanh) for layer in self.layers)

    @property
    def dropout_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Dropout)]

    def layer_widths(self) -> list[int]:
        """Output width of every layer."""
        widths, w = [], self.input_dim
        for layer in self.layers:
            if isinstance(layer, Affine):
                w = layer.out_dim
            widths.append(w)
        return widths

    # evaluation -------------------------------------------------------
    def forward(self, x, masks: Mapping[int, Any] | None = None):
        """Point evaluation on ``x`` of shape ``(..., input_dim)``.

        ``masks`` maps dropout layer indices to Bernoulli masks; missing
        entries use the all-ones mask.
        """
        if np.shape(x)[-1] != self.input_dim:
            raise DimensionError(f"network expects input width {self.input_dim}, got {np.shape(x)[-1]}")
        masks = masks or {}
        h = x
        for i, layer in enumerate(self.layers):
            h = layer_forward(layer, h, masks.get(i))
        return h

    def sample_masks(self, rng: np.random.Generator, batch_shape: tuple) -> dict[int, np.ndarray]:
        """Draw one Bernoulli(q) mask per dropout layer."""
        widths = self.layer_widths()
        return {
            i: (rng.random(batch_shape + (widths[i],)) < self.layers[i].q).astype(float)
            for i in self.dropout_layers
            if self.layers[i].q < 1.0
        }

    # serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            if isinstance(layer, Affine):
                W = np.asarray(ad.value_of(layer.W), dtype=float)
                b = np.asarray(ad.value_of(layer.b), dtype=float)
                layers.append({"kind": "affine", "W": W.tolist(), "b": b.tolist()})
            elif isinstance(layer, Dropout):
                layers.append({"kind": "dropout", "q": float(layer.q)})
            elif isinstance(layer, ReLU) and layer.cross != "exact":
                layers.append({"kind": "relu", "cross": layer.cross})
            else:
                layers.append({"kind": layer.kind})
        return {"layers": layers, "input_dim": self.input_dim, "output_dim": self.output_dim}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSpec":
        try:
            layers = []
            for entry in d["layers"]:
                kind = entry["kind"]
                if kind not in _KINDS:
                    raise ConfigError(f"unknown layer kind {kind!r}")
                if kind == "affine":
                    W = np.array(entry["W"], dtype=float)
                    if W.ndim != 2:
                        W = W.reshape(len(entry["b"]), -1)
                    layers.append(Affine(W, np.array(entry["b"], dtype=float)))
                elif kind == "dropout":
                    layers.append(Dropout(float(entry["q"])))
                elif kind == "relu":
                    layers.append(ReLU(entry.get("cross", "exact")))
                else:
                    layers.append(_KINDS[kind]())
            return cls(tuple(layers), int(d["input_dim"]), int(d["output_dim"]))
        except KeyError as exc:
            raise ConfigError(f"network description missing field {exc}") from None

    def to_json(self) -> str:
        # repr-based float formatting round-trips exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))


def mlp(
    input_dim: int,
    hidden: Sequence[int],
    output_dim: int,
    rng: np.random.Generator,
    *,
    activation: str = "relu",
    keep_prob: float | None = None,
    final_activation: str | None = None,
    final_bias: float | None = None,
    relu_cross: str = "exact",
) -> NetworkSpec:
    """Fully connected network with uniform ``+-1/sqrt(fan_in)`` initialization.

    Each hidden block is Affine, activation and, if ``keep_prob`` is given and
    below one, Dropout.  ``relu_cross`` picks the ReLU cross-covariance rule.
    """
    act = {"relu": lambda: ReLU(relu_cross), "tanh": Tanh}[activation]
    layers: list[LayerSpec] = []
    widths = [input_dim, *hidden, output_dim]
    for k, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / np.sqrt(n_in)
        W = rng.uniform(-bound, bound, size=(n_out, n_in))
        b = rng.uniform(-bound, bound, size=n_out)
        last = k == len(widths) - 2
        if last and final_bias is not None:
            b = np.full(n_out, float(final_bias))
        layers.append(Affine(W, b))
        if not last:
            layers.append(act())
            if keep_prob is not None and keep_prob < 1.0:
                layers.append(Dropout(keep_prob))
    if final_activation is not None:
        layers.append({"relu": lambda: ReLU(relu_cross), "tanh": Tanh}[final_activation]())
    return NetworkSpec(tuple(layers), input_dim, output_dim)


def forward_flops(net: NetworkSpec, moments: bool = False) -> int:
    """Rough floating-point operation count for one pass.

    Point evaluation costs ``2*H_out*H_in`` per affine layer.  A moment pass
    also propagates the covariance (``2*H_out*H_in*(H_in + H_out)``) and
    forms pairwise ReLU terms (about 80 operations per entry for the exact
    rule, 40 for the series).
    """
    total = 0
    width = net.input_dim
    for layer in net.layers:
        if isinstance(layer, Affine):
            total += 2 * layer.out_dim * layer.in_dim
            if moments:
                total += 2 * layer.out_dim * layer.in_dim * (layer.in_dim + layer.out_dim)
            width = layer.out_dim
        elif moments:
            per = 2
            if isinstance(layer, ReLU):
                per = 80 if layer.cross == "exact" else 40
            total += per * width * width
        else:
            total += width
    return int(total)


def augment_with_control(state: GaussianState, u=None) -> GaussianState:
    """Append a deterministic control vector to the state Gaussian."""
    if u is None or np.size(u) == 0:
        return state
    u = np.asarray(u, dtype=float)
    batch = np.shape(state.mean)[:-1]
    u = np.broadcast_to(u, batch + u.shape[-1:])
    n, m = state.dim, u.shape[-1]
    mean = ad.concatenate([state.mean, u], axis=-1)
    zeros_nm = np.zeros(batch + (n, m))
    top = ad.concatenate([state.cov, zeros_nm], axis=-1)
    bottom = np.zeros(batch + (m, n + m))
    cov = ad.concatenate([top, bottom], axis=-2)
    return GaussianState(mean, cov)


def _check_finite(x, what: str) -> None:
    if not np.all(np.isfinite(ad.value_of(x))):
        raise NumericalError(what)


def vmm_forward(net: NetworkSpec, state: GaussianState, diagnostics: Diagnostics | None = None):
    """Propagate a Gaussian through every layer.

    Returns
    -------
    out : GaussianState
        Matched output moments.
    jacobians : list
        Expected Jacobian of each layer, evaluated at that layer's input.
    """
    if state.dim != net.input_dim:
        raise DimensionError(f"network expects input width {net.input_dim}, got {state.dim}")
    jacobians = []
    for i, layer in enumerate(net.layers):
        jacobians.append(layer_expected_jacobian(layer, state))
        state = layer_moments(layer, state, diagnostics)
        _check_finite(state.mean, f"non-finite mean after layer {i} ({layer.kind})")
        _check_finite(state.cov, f"non-finite covariance after layer {i} ({layer.kind})")
    return state, jacobians


def drift_moments(drift: NetworkSpec, state: GaussianState, u=None, diagnostics: Diagnostics | None = None):
    """Mean, covariance and layer Jacobians of ``f(z)`` for ``z ~ state``."""
    out, jac = vmm_forward(drift, augment_with_control(state, u), diagnostics)
    return out.mean, out.cov, jac


def diffusion_second_moment(diff: NetworkSpec, state: GaussianState, u=None, diagnostics: Diagnostics | None = None):
    """Diagonal of ``E[L(z) L(z)^T]`` for diagonal diffusion ``L``.

    Returned as the vector of diagonal entries ``diag(D^L) + c^L * c^L``,
    clamped at zero.
    """
    if diff.output_dim != state.dim:
        raise DimensionError(f"diffusion output width {diff.output_dim} differs from state width {state.dim}")
    out, _ = vmm_forward(diff, augment_with_control(state, u), diagnostics)
    return ad.maximum(ad.diagonal(out.cov) + out.mean * out.mean, 0.0)


def expected_gradient_product(jacobians: Sequence[Any], n_state: int | None = None):
    """Product ``J_L ... J_1`` of per-layer expected Jacobians.

    Evaluated right to left so intermediate products keep the narrow input
    width.  Columns past ``n_state`` (control inputs) are dropped.
    """
    if len(jacobians) == 0:
        raise DimensionError("empty Jacobian chain")
    prod = jacobians[0]
    if n_state is not None:
        prod = prod[..., :, :n_state]
    for J in jacobians[1:]:
        if np.shape(J)[-1] != np.shape(prod)[-2]:
            raise DimensionError(f"Jacobian chain mismatch: {np.shape(J)} after {np.shape(prod)}")
        prod = ad.matmul(J, prod)
    return prod
