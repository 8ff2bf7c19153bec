"""Exponent bound enforcement and initialization.

Exponents are kept inside a per-layer interval [v_min, v_max] in one of
three ways: clipping the parameters, projecting them back after each
optimizer step, or training an unconstrained value that is mapped into
the interval by a smooth monotone function. The hard-sigmoid map keeps a
small residual slope outside its linear core so a saturated parameter can
still recover (a plain clamp would zero its gradient for good).

Initialization is the neutral one: all-ones exponents and identity mixing
matrices, which makes the nonlinear layer coincide with a standard
convolution before training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    Bilinear,
    ColShared,
    Elementwise,
    EwmVariant,
    FullMatrix,
    RowShared,
    Standard,
    VARIANT_TYPES,
)

DEFAULT_V_MIN = -2.0
DEFAULT_V_MAX = 4.0

MODES = ("clip", "project", "reparam")
KINDS = ("sigmoid", "tanh", "hard_sigmoid")

# hard-sigmoid geometry: linear core over [-3, 3], residual slope outside
_HARD_CORE = 3.0
_RESIDUAL_SLOPE = 1e-3


@dataclass(frozen=True)
class ConstraintPolicy:
    """Per-layer exponent bounds and how to enforce them.

    mode "clip" clamps parameters in place, "project" clamps after every
    optimizer step (operationally the same projection point in this
    implementation), "reparam" trains unconstrained values through the
    map selected by ``kind``.
    """

    v_min: float = DEFAULT_V_MIN
    v_max: float = DEFAULT_V_MAX
    mode: str = "clip"
    kind: str = "sigmoid"

    def __post_init__(self):
        if not self.v_min < 1.0 < self.v_max:
            raise ValueError(
                "bounds must straddle the neutral exponent 1 "
                f"(got [{self.v_min}, {self.v_max}])")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.v_min + self.v_max)

    @property
    def halfrange(self) -> float:
        return 0.5 * (self.v_max - self.v_min)


def _payload_map(ewm: EwmVariant, fn) -> EwmVariant:
    """Apply fn to every exponent array of a payload, returning a new payload."""
    if isinstance(ewm, Standard):
        return Standard()
    if isinstance(ewm, Elementwise):
        return Elementwise(fn(ewm.exponents))
    if isinstance(ewm, RowShared):
        return RowShared(fn(ewm.row_exponents))
    if isinstance(ewm, ColShared):
        return ColShared(fn(ewm.col_exponents))
    if isinstance(ewm, Bilinear):
        return Bilinear(fn(ewm.row_mix), fn(ewm.col_mix))
    if isinstance(ewm, FullMatrix):
        return FullMatrix(fn(ewm.mix))
    raise TypeError(f"unknown variant {type(ewm).__name__}")


def clip_params(ewm: EwmVariant, policy: ConstraintPolicy) -> EwmVariant:
    """Clamp every exponent entry into [v_min, v_max]; idempotent."""
    if policy.mode not in ("clip", "project"):
        raise ValueError("clip_params applies to clip/project modes only")
    return _payload_map(ewm, lambda a: np.clip(a, policy.v_min, policy.v_max))


def clip_params_inplace(ewm: EwmVariant, policy: ConstraintPolicy) -> None:
    for arr in payload_arrays(ewm):
        np.clip(arr, policy.v_min, policy.v_max, out=arr)


def payload_arrays(ewm: EwmVariant) -> list[np.ndarray]:
    if isinstance(ewm, Standard):
        return []
    if isinstance(ewm, Elementwise):
        return [ewm.exponents]
    if isinstance(ewm, RowShared):
        return [ewm.row_exponents]
    if isinstance(ewm, ColShared):
        return [ewm.col_exponents]
    if isinstance(ewm, Bilinear):
        return [ewm.row_mix, ewm.col_mix]
    if isinstance(ewm, FullMatrix):
        return [ewm.mix]
    raise TypeError(f"unknown variant {type(ewm).__name__}")


# --------------------------------------------------------------------------
# Reparameterization maps (scalar, vectorized over arrays)

def reparam_forward(w_hat, policy: ConstraintPolicy):
    """Map an unconstrained value to a bounded exponent.

    sigmoid/tanh land strictly inside (v_min, v_max); the hard-sigmoid map
    may overshoot the bounds by at most 1e-3 * (|w_hat| - 3) before the
    effective value is clamped (see effective_value).
    """
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if policy.kind == "sigmoid":
        out = policy.v_min + (policy.v_max - policy.v_min) / (1.0 + np.exp(-w_hat))
    elif policy.kind == "tanh":
        out = policy.midpoint + policy.halfrange * np.tanh(w_hat)
    elif policy.kind == "hard_sigmoid":
        slope = (policy.v_max - policy.v_min) / (2.0 * _HARD_CORE)
        core = policy.midpoint + slope * np.clip(w_hat, -_HARD_CORE, _HARD_CORE)
        over = _RESIDUAL_SLOPE * (np.clip(w_hat, _HARD_CORE, None) - _HARD_CORE)
        under = _RESIDUAL_SLOPE * (np.clip(w_hat, None, -_HARD_CORE) + _HARD_CORE)
        out = core + over + under
    else:
        raise ValueError(f"unknown reparameterization kind {policy.kind!r}")
    return float(out) if out.ndim == 0 else out


def reparam_grad(w_hat, policy: ConstraintPolicy):
    """Exact derivative of reparam_forward; strictly positive everywhere."""
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if policy.kind == "sigmoid":
        sig = 1.0 / (1.0 + np.exp(-w_hat))
        out = (policy.v_max - policy.v_min) * sig * (1.0 - sig)
    elif policy.kind == "tanh":
        t = np.tanh(w_hat)
        out = policy.halfrange * (1.0 - t * t)
    elif policy.kind == "hard_sigmoid":
        slope = (policy.v_max - policy.v_min) / (2.0 * _HARD_CORE)
        out = np.where(np.abs(w_hat) <= _HARD_CORE, slope, _RESIDUAL_SLOPE)
        out = out.astype(np.float64)
    else:
        raise ValueError(f"unknown reparameterization kind {policy.kind!r}")
    return float(out) if out.ndim == 0 else out


def forward_gap(a, b, policy: ConstraintPolicy):
    """reparam_forward(b) - reparam_forward(a), computed in a form that
    stays nonzero where direct subtraction of saturated outputs would
    round to 0 (e.g. sigmoid beyond |w_hat| ~ 37). Used to verify strict
    monotonicity at sample points deep in the tails.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if policy.kind == "sigmoid":
        # sigma(b) - sigma(a) = e^a (e^(b-a) - 1) / ((1 + e^a)(1 + e^b))
        out = (policy.v_max - policy.v_min) * np.exp(a) * np.expm1(b - a) \
            / ((1.0 + np.exp(a)) * (1.0 + np.exp(b)))
    elif policy.kind == "tanh":
        # tanh(b) - tanh(a) = sinh(b - a) / (cosh(a) cosh(b))
        out = policy.halfrange * np.sinh(b - a) / (np.cosh(a) * np.cosh(b))
    elif policy.kind == "hard_sigmoid":
        # piecewise linear with slope >= the residual everywhere: direct
        # subtraction has no cancellation problem
        out = np.asarray(reparam_forward(b, policy)) \
            - np.asarray(reparam_forward(a, policy))
    else:
        raise ValueError(f"unknown reparameterization kind {policy.kind!r}")
    return float(out) if out.ndim == 0 else out


def reparam_invert(target, policy: ConstraintPolicy):
    """w_hat with reparam_forward(w_hat) == target, for targets strictly
    inside (v_min, v_max)."""
    target_arr = np.asarray(target, dtype=np.float64)
    if np.any(target_arr <= policy.v_min) or np.any(target_arr >= policy.v_max):
        raise ValueError(
            f"target must lie strictly inside ({policy.v_min}, {policy.v_max})")
    if policy.kind == "sigmoid":
        frac = (target_arr - policy.v_min) / (policy.v_max - policy.v_min)
        out = np.log(frac / (1.0 - frac))
    elif policy.kind == "tanh":
        out = np.arctanh((target_arr - policy.midpoint) / policy.halfrange)
    elif policy.kind == "hard_sigmoid":
        slope = (policy.v_max - policy.v_min) / (2.0 * _HARD_CORE)
        out = (target_arr - policy.midpoint) / slope
    else:
        raise ValueError(f"unknown reparameterization kind {policy.kind!r}")
    return float(out) if out.ndim == 0 else out


def effective_value(w_hat, policy: ConstraintPolicy):
    """The exponent actually used by a layer under reparameterization:
    the mapped value, clamped to the bounds (a no-op for smooth kinds)."""
    return np.clip(reparam_forward(w_hat, policy), policy.v_min, policy.v_max)


def effective_payload(ewm: EwmVariant, policy: ConstraintPolicy) -> EwmVariant:
    """Materialize the effective exponent payload for a layer forward pass.

    Under reparam the stored payload is unconstrained and gets mapped;
    under clip/project the stored payload is used as-is (training keeps it
    inside the bounds by projection).
    """
    if policy.mode != "reparam":
        return ewm
    return _payload_map(ewm, lambda a: effective_value(a, policy))


# --------------------------------------------------------------------------
# Initialization

def init_exponents(variant: str, k_h: int, k_w: int,
                   policy: ConstraintPolicy | None = None) -> EwmVariant:
    """Neutral initialization: all-ones exponents, identity mixing matrices.

    With a reparam-mode policy, the returned payload stores the
    unconstrained preimages of those targets, so the materialized layer
    still starts as a standard convolution. Matrix variants need v_min < 0
    in that case (the identity's zero entries must be invertible).
    """
    if variant not in VARIANT_TYPES:
        raise ValueError(f"unknown variant {variant!r}")
    if k_h < 1 or k_w < 1:
        raise ValueError("kernel dims must be >= 1")
    n = k_h * k_w
    if variant == "standard":
        return Standard()
    if variant == "elementwise":
        target: EwmVariant = Elementwise(np.ones((k_h, k_w)))
    elif variant == "row_shared":
        target = RowShared(np.ones(k_h))
    elif variant == "col_shared":
        target = ColShared(np.ones(k_w))
    elif variant == "bilinear":
        target = Bilinear(np.eye(k_h), np.eye(k_w))
    else:
        target = FullMatrix(np.eye(n))

    if policy is not None and policy.mode == "reparam":
        if variant in ("bilinear", "full_matrix") and policy.v_min >= 0.0:
            raise ValueError(
                "identity initialization needs v_min < 0 under "
                "reparameterization (zero entries must be invertible)")
        return _payload_map(target, lambda a: np.asarray(
            reparam_invert(a, policy), dtype=np.float64))
    return target
