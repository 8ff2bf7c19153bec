"""Analytic backward passes for every unit variant and whole layers, an
independent central finite-difference oracle, and a gradient-check harness.

The backward math, per unit with upstream scalar u, magnitude m = max(|x|, eps),
sign s (sign(0) = +1) and powered value p = s * m**e:

* d/d w      = u * p
* d/d bias   = u
* d/d e      = u * w * p * log(m)
* d/d x      = u * w * e * m**(e-1)   outside the clamp region, 0 inside

The matrix-mixing variants chain the same pieces through their log-space
products. Derivatives with respect to the exponent side always use the
clamped log; derivatives with respect to x treat the clamped magnitude as
locally constant, so the function/gradient pair stays consistent away from
the clamp boundary.
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
    LayerParams,
    RowShared,
    Standard,
    _unvec_patches,
    _vec_patches,
    activation_grad,
    channel_preact,
    expand_shared,
    extract_patches,
    layer_forward,
    vec,
)
from .numerics import DEFAULT_EPS, log_magnitude, make_rng

REL_ERR_FLOOR = 1e-8


@dataclass
class GradBundle:
    """Gradients of a scalar loss with respect to one layer's parameters
    and its input. Every array matches the shape of what it differentiates."""

    d_weights: np.ndarray   # (out_channels, k_h, k_w)
    d_biases: np.ndarray    # (out_channels,)
    d_ewms: list            # per-channel payload gradients (None for Standard)
    d_input: np.ndarray     # same shape as the layer input


# --------------------------------------------------------------------------
# Per-channel backward over a stack of patches (..., k_h, k_w) with
# upstream (...). Returns (d_weights, d_bias, d_ewm, d_patches).

def _backward_powered(patches, weights, exponents, upstream, eps):
    sign = np.where(patches >= 0.0, 1.0, -1.0)
    mag = np.maximum(np.abs(patches), eps)
    powered = sign * mag**exponents
    log_mag = np.log(mag)
    u = upstream[..., None, None]
    lead_axes = tuple(range(patches.ndim - 2))
    d_weights = np.sum(u * powered, axis=lead_axes)
    d_exponents = weights * np.sum(u * powered * log_mag, axis=lead_axes)
    mask = np.abs(patches) > eps
    d_patches = u * weights * exponents * mag**(exponents - 1.0) * mask
    return d_weights, d_exponents, d_patches


def channel_backward(patches: np.ndarray, weights: np.ndarray, bias: float,
                     ewm: EwmVariant, upstream: np.ndarray,
                     eps: float = DEFAULT_EPS):
    """Backward of channel_preact for one output channel."""
    k_h, k_w = weights.shape
    upstream = np.asarray(upstream, dtype=np.float64)
    d_bias = float(np.sum(upstream))
    lead_axes = tuple(range(patches.ndim - 2))
    u = upstream[..., None, None]

    if isinstance(ewm, Standard):
        d_weights = np.sum(u * patches, axis=lead_axes)
        d_patches = u * weights
        return d_weights, d_bias, None, d_patches

    if isinstance(ewm, (Elementwise, RowShared, ColShared)):
        if isinstance(ewm, Elementwise):
            exponents = ewm.exponents
        else:
            exponents = expand_shared(ewm, k_h, k_w)
        d_weights, d_exp, d_patches = _backward_powered(
            patches, weights, exponents, upstream, eps)
        if isinstance(ewm, Elementwise):
            d_ewm = Elementwise(d_exp)
        elif isinstance(ewm, RowShared):
            # tied positions accumulate: row sums of the expanded gradient
            d_ewm = RowShared(d_exp.sum(axis=1))
        else:
            d_ewm = ColShared(d_exp.sum(axis=0))
        return d_weights, d_bias, d_ewm, d_patches

    if isinstance(ewm, Bilinear):
        log_mag = log_magnitude(patches, eps)
        mixed = np.einsum("ab,...bc,cd->...ad", ewm.row_mix, log_mag, ewm.col_mix)
        sign = np.where(patches >= 0.0, 1.0, -1.0)
        powered = sign * np.exp(mixed)
        d_weights = np.sum(u * powered, axis=lead_axes)
        d_mixed = u * weights * powered
        lc = np.einsum("...bc,cd->...bd", log_mag, ewm.col_mix)   # L @ col_mix
        rl = np.einsum("ab,...bc->...ac", ewm.row_mix, log_mag)   # row_mix @ L
        d_mixed_f = d_mixed.reshape(-1, k_h, k_w)
        d_row_mix = np.einsum("xad,xbd->ab", d_mixed_f, lc.reshape(-1, k_h, k_w))
        d_col_mix = np.einsum("xac,xad->cd", rl.reshape(-1, k_h, k_w), d_mixed_f)
        d_log = np.einsum("ab,...ad,cd->...bc", ewm.row_mix, d_mixed, ewm.col_mix)
        mask = np.abs(patches) > eps
        mag = np.maximum(np.abs(patches), eps)
        d_patches = d_log * sign / mag * mask
        return d_weights, d_bias, Bilinear(d_row_mix, d_col_mix), d_patches

    if isinstance(ewm, FullMatrix):
        x_vec = _vec_patches(patches)
        sign = np.where(x_vec >= 0.0, 1.0, -1.0)
        mag = np.maximum(np.abs(x_vec), eps)
        log_mag = np.log(mag)
        z = sign * np.exp(np.einsum("ji,...i->...j", ewm.mix, log_mag))
        weight_vec = vec(weights)
        lead = tuple(range(x_vec.ndim - 1))
        d_weights = _unvec_patches(
            np.sum(upstream[..., None] * z, axis=lead), k_h, k_w)
        d_z = upstream[..., None] * weight_vec
        d_mixlog = d_z * z       # d/d(mix @ log) of sign * exp(...)
        n = k_h * k_w
        d_mix = np.einsum("xj,xi->ji", d_mixlog.reshape(-1, n),
                          log_mag.reshape(-1, n))
        d_logvec = np.einsum("...j,ji->...i", d_mixlog, ewm.mix)
        mask = np.abs(x_vec) > eps
        d_patches = _unvec_patches(d_logvec * sign / mag * mask, k_h, k_w)
        return d_weights, d_bias, FullMatrix(d_mix), d_patches

    raise TypeError(f"unknown variant {type(ewm).__name__}")


def unit_backward(x: np.ndarray, weights: np.ndarray, bias: float,
                  ewm: EwmVariant, upstream: float = 1.0,
                  eps: float = DEFAULT_EPS):
    """Single-receptive-field backward.

    Returns (d_weights, d_bias, d_ewm, d_x); d_ewm carries the payload
    gradient in the payload's own structure (None for Standard).
    """
    x = np.asarray(x, dtype=np.float64)
    patches = x[None, :, :]
    up = np.asarray([upstream], dtype=np.float64)
    d_w, d_b, d_ewm, d_patches = channel_backward(
        patches, np.asarray(weights, dtype=np.float64), bias, ewm, up, eps)
    return d_w, d_b, d_ewm, d_patches[0]


def scatter_patch_grads(d_patches: np.ndarray, input_shape: tuple,
                        stride_t: int, stride_c: int) -> np.ndarray:
    """Accumulate per-patch input gradients back onto the input grid
    (inverse of extract_patches for gradients; overlaps add)."""
    *lead, grid_t, grid_c, k_h, k_w = d_patches.shape
    d_input = np.zeros(input_shape, dtype=np.float64)
    for ky in range(k_h):
        t_stop = ky + stride_t * grid_t
        for kx in range(k_w):
            c_stop = kx + stride_c * grid_c
            d_input[..., ky:t_stop:stride_t, kx:c_stop:stride_c] += \
                d_patches[..., :, :, ky, kx]
    return d_input


def layer_backward(x: np.ndarray, params: LayerParams, upstream: np.ndarray,
                   eps: float = DEFAULT_EPS) -> GradBundle:
    """Backward through one layer (activation included).

    ``upstream`` is d(loss)/d(feature map), shaped like the layer output
    (..., grid_t, grid_c, out_channels).
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    patches = extract_patches(x, params.k_h, params.k_w,
                              params.stride_t, params.stride_c)
    d_weights = np.zeros_like(params.weights)
    d_biases = np.zeros_like(params.biases)
    d_ewms = []
    d_patches_total = np.zeros_like(patches)
    for m in range(params.out_channels):
        preact = channel_preact(patches, params.weights[m],
                                float(params.biases[m]), params.ewms[m], eps)
        u_eff = upstream[..., m] * activation_grad(preact, params.activation)
        d_w, d_b, d_ewm, d_p = channel_backward(
            patches, params.weights[m], float(params.biases[m]),
            params.ewms[m], u_eff, eps)
        d_weights[m] = d_w
        d_biases[m] = d_b
        d_ewms.append(d_ewm)
        d_patches_total += d_p
    d_input = scatter_patch_grads(d_patches_total, x.shape,
                                  params.stride_t, params.stride_c)
    return GradBundle(d_weights, d_biases, d_ewms, d_input)


# --------------------------------------------------------------------------
# Finite-difference oracle

def finite_diff(f, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences (f(t + h*e_i) - f(t - h*e_i)) / 2h per coordinate.

    ``f`` must be a pure scalar function of the parameter array.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(theta)
        flat[i] = orig - h
        f_minus = f(theta)
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"non-finite evaluation at coordinate {i}")
        grad.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_ERR_FLOOR)
    return np.abs(a - n) / denom


# --------------------------------------------------------------------------
# Gradient-check harness

@dataclass
class GroupCheck:
    group: str
    max_rel_err: float
    where: tuple
    analytic: float
    numeric: float
    passed: bool


@dataclass
class GradCheckReport:
    variant: str
    kernel: tuple
    seed: int
    tol: float
    groups: list

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    @property
    def max_rel_err(self) -> float:
        return max(g.max_rel_err for g in self.groups)

    def to_text(self) -> str:
        lines = [
            f"variant={self.variant} kernel={self.kernel[0]}x{self.kernel[1]} "
            f"seed={self.seed} tol={self.tol:g}",
            f"{'group':<14} {'max_rel_err':>12} {'at':>10} "
            f"{'analytic':>14} {'numeric':>14} {'status':>7}",
        ]
        for g in self.groups:
            where = ",".join(str(i) for i in g.where)
            lines.append(
                f"{g.group:<14} {g.max_rel_err:>12.3e} {where:>10} "
                f"{g.analytic:>14.6e} {g.numeric:>14.6e} "
                f"{'pass' if g.passed else 'FAIL':>7}")
        return "\n".join(lines)


def _payload_arrays(ewm: EwmVariant) -> list:
    """(group name, array) pairs for the trainable exponent parameters."""
    if isinstance(ewm, Standard):
        return []
    if isinstance(ewm, Elementwise):
        return [("exponents", ewm.exponents)]
    if isinstance(ewm, RowShared):
        return [("row_exponents", ewm.row_exponents)]
    if isinstance(ewm, ColShared):
        return [("col_exponents", ewm.col_exponents)]
    if isinstance(ewm, Bilinear):
        return [("row_mix", ewm.row_mix), ("col_mix", ewm.col_mix)]
    if isinstance(ewm, FullMatrix):
        return [("mix", ewm.mix)]
    raise TypeError(f"unknown variant {type(ewm).__name__}")


def grad_check(params: LayerParams, x: np.ndarray,
               loss_weights: np.ndarray | None = None,
               tol: float = 1e-6, h: float = 1e-5, seed: int = 0,
               eps: float = DEFAULT_EPS) -> GradCheckReport:
    """Compare analytic layer gradients against central finite differences.

    The scalar loss is sum(loss_weights * layer_forward(x)); a plain sum
    when loss_weights is None. Every parameter group (weights, biases,
    exponent payloads, input) is checked; failures are reported per
    coordinate, not raised.
    """
    x = np.array(x, dtype=np.float64)
    out = layer_forward(x, params, eps)
    weights_r = (np.ones_like(out) if loss_weights is None
                 else np.asarray(loss_weights, dtype=np.float64))
    if weights_r.shape != out.shape:
        raise ValueError("loss_weights must match the feature-map shape")

    def loss() -> float:
        return float(np.sum(weights_r * layer_forward(x, params, eps)))

    bundle = layer_backward(x, params, weights_r, eps)

    def check_group(name, live_arrays, analytic_arrays):
        worst = GroupCheck(name, 0.0, (), 0.0, 0.0, True)
        for idx, (live, analytic) in enumerate(zip(live_arrays, analytic_arrays)):
            def f(vals, _live=live):
                _live[...] = vals
                return loss()
            saved = live.copy()
            numeric = finite_diff(f, saved, h)
            live[...] = saved
            err = relative_error(analytic, numeric)
            k = np.unravel_index(np.argmax(err), err.shape) if err.size else ()
            if err.size and err[k] >= worst.max_rel_err:
                coord = ((idx,) + k) if len(live_arrays) > 1 else k
                worst = GroupCheck(name, float(err[k]), coord,
                                   float(np.asarray(analytic)[k]),
                                   float(numeric[k]),
                                   bool(err[k] <= tol))
        worst.passed = worst.max_rel_err <= tol
        return worst

    groups = [
        check_group("weights", [params.weights], [bundle.d_weights]),
        check_group("biases", [params.biases], [bundle.d_biases]),
    ]
    payload_names = [n for n, _ in _payload_arrays(params.ewms[0])]
    for pi, pname in enumerate(payload_names):
        live = [_payload_arrays(e)[pi][1] for e in params.ewms]
        analytic = [_payload_arrays(d)[pi][1] for d in bundle.d_ewms]
        groups.append(check_group(pname, live, analytic))

    def f_input(vals):
        x[...] = vals
        return loss()
    saved_x = x.copy()
    numeric_input = finite_diff(f_input, saved_x, h)
    x[...] = saved_x
    err = relative_error(bundle.d_input, numeric_input)
    k = np.unravel_index(np.argmax(err), err.shape)
    groups.append(GroupCheck("input", float(err[k]), k,
                             float(bundle.d_input[k]),
                             float(numeric_input[k]),
                             bool(err[k] <= tol)))

    return GradCheckReport(params.variant, (params.k_h, params.k_w),
                           seed, tol, groups)


# --------------------------------------------------------------------------
# Seeded random instances for the check suite. Sampling is deliberately
# well-conditioned: magnitudes stay clear of the eps clamp AND of |x| = 1
# (where exponent gradients vanish and the finite-difference quotient is
# dominated by rounding), weights are bounded away from zero, and the
# matrix-mixing variants use positive-orthant instances so that no
# gradient coordinate is a near-cancelling sum. Sign handling for the
# mixing variants is covered by dedicated tests.

CHECK_KERNELS = ((1, 1), (2, 2), (3, 2))
CHECK_VARIANTS = ("standard", "elementwise", "row_shared", "col_shared",
                  "bilinear", "full_matrix")


def _sample_magnitudes(rng, shape, lo=0.1, hi=3.0, log_gap=0.1):
    mags = np.empty(shape, dtype=np.float64)
    flat = mags.reshape(-1)
    for i in range(flat.size):
        while True:
            v = np.exp(rng.uniform(np.log(lo), np.log(hi)))
            if abs(np.log(v)) >= log_gap:
                flat[i] = v
                break
    return mags


def _sample_signed(rng, shape, lo, hi):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def make_check_instance(variant: str, k_h: int, k_w: int, seed: int):
    """One seeded gradient-check instance: (params, input, loss_weights).

    The input is exactly kernel-sized (a single receptive field) so that
    no gradient coordinate sums contributions of opposite sign.
    """
    rng = make_rng(seed)
    n = k_h * k_w
    positive_only = variant in ("bilinear", "full_matrix")
    if positive_only:
        # magnitudes in (1.11, 3]: log stays positive and bounded below
        x = np.exp(rng.uniform(np.log(1.11), np.log(3.0), size=(k_h, k_w)))
        weights = rng.uniform(0.3, 1.0, size=(1, k_h, k_w))
    else:
        mags = _sample_magnitudes(rng, (k_h, k_w))
        x = mags * rng.choice([-1.0, 1.0], size=(k_h, k_w))
        weights = _sample_signed(rng, (1, k_h, k_w), 0.3, 1.0)
    bias = rng.uniform(-0.5, 0.5, size=1)

    if variant == "standard":
        ewm = Standard()
    elif variant == "elementwise":
        ewm = Elementwise(_sample_signed(rng, (k_h, k_w), 0.2, 1.5))
    elif variant == "row_shared":
        ewm = RowShared(_sample_signed(rng, (k_h,), 0.2, 1.5))
    elif variant == "col_shared":
        ewm = ColShared(_sample_signed(rng, (k_w,), 0.2, 1.5))
    elif variant == "bilinear":
        ewm = Bilinear(np.eye(k_h) + rng.uniform(0.05, 0.3, size=(k_h, k_h)),
                       np.eye(k_w) + rng.uniform(0.05, 0.3, size=(k_w, k_w)))
    elif variant == "full_matrix":
        ewm = FullMatrix(np.eye(n) + rng.uniform(0.05, 0.3, size=(n, n)))
    else:
        raise ValueError(f"unknown variant {variant!r}")

    params = LayerParams(weights=weights, biases=bias, ewms=[ewm],
                         activation="identity")
    loss_weights = rng.uniform(0.5, 1.5, size=(1, 1, 1))
    return params, x, loss_weights


def run_variant_checks(variant: str, seeds=range(50), kernels=CHECK_KERNELS,
                       tol: float = 1e-6, h: float = 1e-5) -> list:
    """Gradient-check one variant over kernel shapes and seeds."""
    reports = []
    for k_h, k_w in kernels:
        for seed in seeds:
            params, x, lw = make_check_instance(variant, k_h, k_w, seed)
            reports.append(grad_check(params, x, loss_weights=lw,
                                      tol=tol, h=h, seed=seed))
    return reports
