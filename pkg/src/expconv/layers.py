"""Forward evaluation of exponent-weighted convolutional units.

A unit reads one receptive field X (k_h rows = time steps, k_w columns =
sensor channels) and combines a standard linear filter with an exponent
stage. Five exponent configurations are supported:

* Standard      -- no exponent stage, plain linear filter.
* Elementwise   -- one exponent per receptive-field entry.
* RowShared     -- one exponent per time-step row.
* ColShared     -- one exponent per sensor-channel column.
* Bilinear      -- log-magnitudes mixed as row_mix @ log|X| @ col_mix.
* FullMatrix    -- log-magnitudes of the vectorized patch mixed by an
                  n x n matrix (n = k_h * k_w), the most general form.

Negative inputs are handled by computing on magnitudes (clamped at eps)
and re-applying the original elementwise sign, which reduces exactly to
``signed_pow`` whenever the mixing is diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    DEFAULT_EPS,
    as_tensor,
    check_finite,
    extract_patches,
    log_magnitude,
    patch_grid,
    signed_pow,
    vec,
)

ACTIVATIONS = ("relu", "tanh", "identity")


# --------------------------------------------------------------------------
# Exponent payloads (one per output channel; the payload is shared across
# every spatial position of that channel).

@dataclass
class Standard:
    """Plain linear filter; no exponent parameters."""


@dataclass
class Elementwise:
    exponents: np.ndarray  # (k_h, k_w)

    def __post_init__(self):
        self.exponents = as_tensor(self.exponents, "exponents")
        if self.exponents.ndim != 2:
            raise ValueError("elementwise exponents must be 2-D")


@dataclass
class RowShared:
    row_exponents: np.ndarray  # (k_h,), one exponent per time step

    def __post_init__(self):
        self.row_exponents = as_tensor(self.row_exponents, "row_exponents")
        if self.row_exponents.ndim != 1:
            raise ValueError("row exponents must be 1-D")


@dataclass
class ColShared:
    col_exponents: np.ndarray  # (k_w,), one exponent per sensor channel

    def __post_init__(self):
        self.col_exponents = as_tensor(self.col_exponents, "col_exponents")
        if self.col_exponents.ndim != 1:
            raise ValueError("column exponents must be 1-D")


@dataclass
class Bilinear:
    row_mix: np.ndarray  # (k_h, k_h)
    col_mix: np.ndarray  # (k_w, k_w)

    def __post_init__(self):
        self.row_mix = as_tensor(self.row_mix, "row_mix")
        self.col_mix = as_tensor(self.col_mix, "col_mix")
        for name, m in (("row_mix", self.row_mix), ("col_mix", self.col_mix)):
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError(f"{name} must be square, got {m.shape}")


@dataclass
class FullMatrix:
    mix: np.ndarray  # (n, n) acting on the column-major vectorized patch

    def __post_init__(self):
        self.mix = as_tensor(self.mix, "mix")
        if self.mix.ndim != 2 or self.mix.shape[0] != self.mix.shape[1]:
            raise ValueError(f"mix must be square, got {self.mix.shape}")


EwmVariant = Standard | Elementwise | RowShared | ColShared | Bilinear | FullMatrix

VARIANT_NAMES = {
    Standard: "standard",
    Elementwise: "elementwise",
    RowShared: "row_shared",
    ColShared: "col_shared",
    Bilinear: "bilinear",
    FullMatrix: "full_matrix",
}
VARIANT_TYPES = {name: cls for cls, name in VARIANT_NAMES.items()}


def variant_name(ewm: EwmVariant) -> str:
    return VARIANT_NAMES[type(ewm)]


def exponent_param_count(ewm: EwmVariant) -> int:
    """Number of trainable exponent parameters carried by a payload."""
    if isinstance(ewm, Standard):
        return 0
    if isinstance(ewm, Elementwise):
        return int(ewm.exponents.size)
    if isinstance(ewm, RowShared):
        return int(ewm.row_exponents.size)
    if isinstance(ewm, ColShared):
        return int(ewm.col_exponents.size)
    if isinstance(ewm, Bilinear):
        return int(ewm.row_mix.size + ewm.col_mix.size)
    if isinstance(ewm, FullMatrix):
        return int(ewm.mix.size)
    raise TypeError(f"unknown variant {type(ewm).__name__}")


def check_variant_shape(ewm: EwmVariant, k_h: int, k_w: int) -> None:
    """Reject payloads whose dimensions do not match the kernel."""
    n = k_h * k_w
    if isinstance(ewm, Standard):
        return
    if isinstance(ewm, Elementwise):
        if ewm.exponents.shape != (k_h, k_w):
            raise ValueError(
                f"elementwise exponents {ewm.exponents.shape} != kernel ({k_h}, {k_w})")
    elif isinstance(ewm, RowShared):
        if ewm.row_exponents.shape != (k_h,):
            raise ValueError(
                f"row exponents {ewm.row_exponents.shape} != ({k_h},)")
    elif isinstance(ewm, ColShared):
        if ewm.col_exponents.shape != (k_w,):
            raise ValueError(
                f"column exponents {ewm.col_exponents.shape} != ({k_w},)")
    elif isinstance(ewm, Bilinear):
        if ewm.row_mix.shape != (k_h, k_h) or ewm.col_mix.shape != (k_w, k_w):
            raise ValueError(
                f"bilinear mixes {ewm.row_mix.shape}/{ewm.col_mix.shape} "
                f"!= ({k_h},{k_h})/({k_w},{k_w})")
    elif isinstance(ewm, FullMatrix):
        if ewm.mix.shape != (n, n):
            raise ValueError(f"full mix {ewm.mix.shape} != ({n}, {n})")
    else:
        raise TypeError(f"unknown variant {type(ewm).__name__}")


def expand_shared(ewm: RowShared | ColShared, k_h: int, k_w: int) -> np.ndarray:
    """Expand a shared payload to the full k_h x k_w exponent matrix.

    RowShared repeats each time-step exponent across its row; ColShared
    repeats each channel exponent down its column.
    """
    if isinstance(ewm, RowShared):
        if ewm.row_exponents.shape != (k_h,):
            raise ValueError("row exponent length does not match kernel height")
        return np.repeat(ewm.row_exponents[:, None], k_w, axis=1)
    if isinstance(ewm, ColShared):
        if ewm.col_exponents.shape != (k_w,):
            raise ValueError("column exponent length does not match kernel width")
        return np.repeat(ewm.col_exponents[None, :], k_h, axis=0)
    raise TypeError(f"expand_shared expects a shared variant, got {type(ewm).__name__}")


# --------------------------------------------------------------------------
# Layer parameters

@dataclass
class LayerParams:
    """One convolutional layer: per-channel filters, biases and exponent
    payloads, plus the layer-wide sliding-window geometry."""

    weights: np.ndarray          # (out_channels, k_h, k_w)
    biases: np.ndarray           # (out_channels,)
    ewms: list                   # out_channels payloads, all the same type
    stride_t: int = 1
    stride_c: int = 1
    activation: str = "identity"

    def __post_init__(self):
        self.weights = as_tensor(self.weights, "weights")
        self.biases = as_tensor(self.biases, "biases")
        if self.weights.ndim != 3:
            raise ValueError("weights must be (out_channels, k_h, k_w)")
        if self.biases.shape != (self.weights.shape[0],):
            raise ValueError("one bias per output channel required")
        if self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")
        if len(self.ewms) != self.out_channels:
            raise ValueError("one exponent payload per output channel required")
        first = type(self.ewms[0])
        if any(type(e) is not first for e in self.ewms):
            raise ValueError("all channels must use the same variant")
        for e in self.ewms:
            check_variant_shape(e, self.k_h, self.k_w)
        if self.stride_t < 1 or self.stride_c < 1:
            raise ValueError("strides must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def k_h(self) -> int:
        return self.weights.shape[1]

    @property
    def k_w(self) -> int:
        return self.weights.shape[2]

    @property
    def variant(self) -> str:
        return variant_name(self.ewms[0])


# --------------------------------------------------------------------------
# Unit evaluation (single receptive field)

def unit_standard(x: np.ndarray, weights: np.ndarray, bias: float) -> float:
    """Linear filter: sum(weights * x) + bias."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if x.shape != weights.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs weights {weights.shape}")
    return float(np.sum(weights * x) + bias)


def unit_elementwise(x, weights, bias: float, exponents,
                     eps: float = DEFAULT_EPS) -> float:
    """sum(weights * signed_pow(x, exponents)) + bias."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    exponents = np.asarray(exponents, dtype=np.float64)
    if x.shape != weights.shape or x.shape != exponents.shape:
        raise ValueError("x, weights and exponents must share a shape")
    return float(np.sum(weights * signed_pow(x, exponents, eps)) + bias)


def unit_elementwise_explog(x, weights, bias: float, exponents,
                            eps: float = DEFAULT_EPS) -> float:
    """Dual route to unit_elementwise via sign * exp(exponent * log|x|)."""
    x = np.asarray(x, dtype=np.float64)
    sign = np.where(x >= 0.0, 1.0, -1.0)
    powered = sign * np.exp(np.asarray(exponents, dtype=np.float64)
                            * log_magnitude(x, eps))
    return float(np.sum(np.asarray(weights, dtype=np.float64) * powered) + bias)


def unit_bilinear(x, weights, bias: float, row_mix, col_mix,
                  eps: float = DEFAULT_EPS) -> float:
    """Exponent stage row_mix @ log|X| @ col_mix, signs restored per entry."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    row_mix = np.asarray(row_mix, dtype=np.float64)
    col_mix = np.asarray(col_mix, dtype=np.float64)
    k_h, k_w = x.shape
    if weights.shape != x.shape:
        raise ValueError("weights must match the receptive field shape")
    if row_mix.shape != (k_h, k_h) or col_mix.shape != (k_w, k_w):
        raise ValueError("mix matrices must match the kernel dimensions")
    log_mag = log_magnitude(x, eps)
    mixed = row_mix @ log_mag @ col_mix
    sign = np.where(x >= 0.0, 1.0, -1.0)
    powered = sign * np.exp(mixed)
    return float(np.sum(weights * powered) + bias)


def unit_full(x_vec, weight_vec, bias: float, mix,
              eps: float = DEFAULT_EPS) -> float:
    """Exponent stage mix @ log|x| on the vectorized patch, signs restored."""
    x_vec = np.asarray(x_vec, dtype=np.float64)
    weight_vec = np.asarray(weight_vec, dtype=np.float64)
    mix = np.asarray(mix, dtype=np.float64)
    n = x_vec.size
    if x_vec.ndim != 1 or weight_vec.shape != (n,):
        raise ValueError("x_vec and weight_vec must be matching 1-D vectors")
    if mix.shape != (n, n):
        raise ValueError(f"mix must be ({n}, {n}), got {mix.shape}")
    sign = np.where(x_vec >= 0.0, 1.0, -1.0)
    powered = sign * np.exp(mix @ log_magnitude(x_vec, eps))
    return float(np.sum(weight_vec * powered) + bias)


def unit_forward(x: np.ndarray, weights: np.ndarray, bias: float,
                 ewm: EwmVariant, eps: float = DEFAULT_EPS) -> float:
    """Evaluate one receptive field under any variant (pre-activation)."""
    if isinstance(ewm, Standard):
        return unit_standard(x, weights, bias)
    if isinstance(ewm, Elementwise):
        return unit_elementwise(x, weights, bias, ewm.exponents, eps)
    if isinstance(ewm, (RowShared, ColShared)):
        expanded = expand_shared(ewm, *np.asarray(x).shape)
        return unit_elementwise(x, weights, bias, expanded, eps)
    if isinstance(ewm, Bilinear):
        return unit_bilinear(x, weights, bias, ewm.row_mix, ewm.col_mix, eps)
    if isinstance(ewm, FullMatrix):
        return unit_full(vec(np.asarray(x, dtype=np.float64)),
                         vec(np.asarray(weights, dtype=np.float64)),
                         bias, ewm.mix, eps)
    raise TypeError(f"unknown variant {type(ewm).__name__}")


# --------------------------------------------------------------------------
# Vectorized per-channel evaluation over a stack of patches. ``patches``
# has shape (..., k_h, k_w); outputs have the leading shape (...).

def _vec_patches(patches: np.ndarray) -> np.ndarray:
    # column-major vec of the trailing two axes
    lead = patches.shape[:-2]
    n = patches.shape[-2] * patches.shape[-1]
    return patches.swapaxes(-2, -1).reshape(*lead, n)


def _unvec_patches(vecs: np.ndarray, k_h: int, k_w: int) -> np.ndarray:
    lead = vecs.shape[:-1]
    return vecs.reshape(*lead, k_w, k_h).swapaxes(-2, -1)


def channel_preact(patches: np.ndarray, weights: np.ndarray, bias: float,
                   ewm: EwmVariant, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Pre-activation outputs of one channel over many receptive fields."""
    k_h, k_w = weights.shape
    if isinstance(ewm, Standard):
        return np.einsum("...ij,ij->...", patches, weights) + bias

    if isinstance(ewm, (Elementwise, RowShared, ColShared)):
        if isinstance(ewm, Elementwise):
            exponents = ewm.exponents
        else:
            exponents = expand_shared(ewm, k_h, k_w)
        sign = np.where(patches >= 0.0, 1.0, -1.0)
        mag = np.maximum(np.abs(patches), eps)
        powered = sign * mag**exponents
        return np.einsum("...ij,ij->...", powered, weights) + bias

    if isinstance(ewm, Bilinear):
        log_mag = log_magnitude(patches, eps)
        mixed = np.einsum("ab,...bc,cd->...ad", ewm.row_mix, log_mag, ewm.col_mix)
        sign = np.where(patches >= 0.0, 1.0, -1.0)
        powered = sign * np.exp(mixed)
        return np.einsum("...ij,ij->...", powered, weights) + bias

    if isinstance(ewm, FullMatrix):
        x_vec = _vec_patches(patches)
        sign = np.where(x_vec >= 0.0, 1.0, -1.0)
        powered = sign * np.exp(np.einsum("ji,...i->...j", ewm.mix,
                                          log_magnitude(x_vec, eps)))
        return powered @ vec(weights) + bias

    raise TypeError(f"unknown variant {type(ewm).__name__}")


def apply_activation(preact: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(preact, 0.0)
    if activation == "tanh":
        return np.tanh(preact)
    if activation == "identity":
        return preact
    raise ValueError(f"unknown activation {activation!r}")


def activation_grad(preact: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (preact > 0.0).astype(np.float64)
    if activation == "tanh":
        t = np.tanh(preact)
        return 1.0 - t * t
    if activation == "identity":
        return np.ones_like(preact)
    raise ValueError(f"unknown activation {activation!r}")


def layer_preact(x: np.ndarray, params: LayerParams,
                 eps: float = DEFAULT_EPS) -> np.ndarray:
    """Pre-activation feature map, shape (..., grid_t, grid_c, out_channels)."""
    patches = extract_patches(np.asarray(x, dtype=np.float64),
                              params.k_h, params.k_w,
                              params.stride_t, params.stride_c)
    channels = [
        channel_preact(patches, params.weights[m], float(params.biases[m]),
                       params.ewms[m], eps)
        for m in range(params.out_channels)
    ]
    return np.stack(channels, axis=-1)


def layer_forward(x: np.ndarray, params: LayerParams,
                  eps: float = DEFAULT_EPS) -> np.ndarray:
    """Slide every channel's unit over the input and apply the activation.

    Accepts a (T, C) input or a batch (..., T, C); the feature map has
    shape (..., grid_t, grid_c, out_channels). Parameters are not mutated.
    """
    out = apply_activation(layer_preact(x, params, eps), params.activation)
    return check_finite(out, "feature map")


def output_grid(params: LayerParams, rows: int, cols: int) -> tuple[int, int]:
    return patch_grid(rows, cols, params.k_h, params.k_w,
                      params.stride_t, params.stride_c)
