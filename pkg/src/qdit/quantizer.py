"""Uniform asymmetric quantization with group-wise parameters.

A value ``x`` maps to ``clip(round(x / s) + Z, 0, 2**b - 1)`` and back to
``s * (code - Z)``, with ``s = (max - min) / (2**b - 1)`` and
``Z = -round(min / s)``. Rounding is half-away-from-zero. Scales are stored as
float32 (the bundle precision); all arithmetic on them runs in float64.

Weights ``W`` are laid out ``(d_in, d_out)`` and get one (s, Z) per
(input-channel group, output column). Activations ``X`` are ``(..., n, d_in)``
and get one (s, Z) per (sample, input-channel group), computed over the whole
``n x g`` slab.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .errors import ConfigError, ValidationError

EPS = 1e-8
MIN_BITS, MAX_BITS = 2, 8


class GroupSizeClampedWarning(UserWarning):
    pass


def round_half_away(x):
    """Round to nearest, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    r = np.trunc(x)
    return r + np.where(np.abs(x - r) >= 0.5, np.sign(x), 0.0)


def _check_bits(bits: int) -> int:
    if not MIN_BITS <= int(bits) <= MAX_BITS:
        raise ValidationError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")
    return int(bits)


@dataclass(frozen=True)
class QuantParams:
    """Scale(s) and signed, unclamped zero point(s); arrays broadcast together."""

    scale: np.ndarray
    zero_point: np.ndarray
    bits: int

    def __post_init__(self):
        _check_bits(self.bits)
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float32))
        object.__setattr__(self, "zero_point", np.asarray(self.zero_point, dtype=np.int64))
        if np.any(self.scale <= 0):
            raise ValidationError("scale must be positive")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1


def compute_params(min_val, max_val, bits: int) -> QuantParams:
    """Min/max quantization parameters (elementwise over array inputs)."""
    bits = _check_bits(bits)
    lo = np.asarray(min_val, dtype=np.float64)
    hi = np.asarray(max_val, dtype=np.float64)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValidationError("min/max must be finite")
    if np.any(lo > hi):
        raise ValidationError("min_val must not exceed max_val")
    scale = ((hi - lo) / ((1 << bits) - 1)).astype(np.float32)
    scale = np.maximum(scale, np.float32(EPS))
    zero = -round_half_away(lo / scale.astype(np.float64))
    return QuantParams(scale, zero.astype(np.int64), bits)


def quantize(x, p: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    codes = round_half_away(x / p.scale.astype(np.float64)) + p.zero_point
    return np.clip(codes, 0, p.qmax).astype(np.uint8)


def dequantize(codes, p: QuantParams) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > p.qmax):
        raise ValidationError(f"codes outside [0, {p.qmax}]")
    return p.scale.astype(np.float64) * (codes.astype(np.int64) - p.zero_point)


def fake_quant(x, p: QuantParams) -> np.ndarray:
    return dequantize(quantize(x, p), p)


@dataclass(frozen=True)
class GroupLayout:
    """Contiguous groups of ``group_size`` channels; the last may be shorter."""

    axis_len: int
    group_size: int

    def __post_init__(self):
        if self.axis_len < 1 or self.group_size < 1:
            raise ConfigError("axis length and group size must be positive")

    @property
    def group_count(self) -> int:
        return math.ceil(self.axis_len / self.group_size)

    @property
    def bounds(self) -> np.ndarray:
        starts = np.arange(0, self.axis_len, self.group_size, dtype=np.int64)
        return np.append(starts, self.axis_len)

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.bounds)

    @classmethod
    def clamped(cls, axis_len: int, group_size: int) -> "GroupLayout":
        if group_size > axis_len:
            warnings.warn(
                f"group size {group_size} exceeds axis length {axis_len}; clamped",
                GroupSizeClampedWarning,
                stacklevel=3,
            )
            group_size = axis_len
        return cls(axis_len, group_size)


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer codes with group-wise parameters along the input-channel axis.

    ``kind == "weight"``: codes ``(d_in, d_out)``, params ``(G, d_out)``.
    ``kind == "activation"``: codes ``(..., n, d_in)``, params ``(..., G)`` or
    ``(G,)`` for static parameters shared by every sample.
    """

    codes: np.ndarray
    layout: GroupLayout
    params: QuantParams
    kind: str

    def expanded_params(self) -> tuple[np.ndarray, np.ndarray]:
        sizes = self.layout.sizes
        if self.kind == "weight":
            return (
                np.repeat(self.params.scale, sizes, axis=0),
                np.repeat(self.params.zero_point, sizes, axis=0),
            )
        scale = np.repeat(self.params.scale, sizes, axis=-1)[..., None, :]
        zero = np.repeat(self.params.zero_point, sizes, axis=-1)[..., None, :]
        return scale, zero

    def dequantize(self) -> np.ndarray:
        scale, zero = self.expanded_params()
        return scale.astype(np.float64) * (self.codes.astype(np.int64) - zero)


def _weight_minmax(w: np.ndarray, layout: GroupLayout):
    starts = layout.bounds[:-1]
    return np.minimum.reduceat(w, starts, axis=0), np.maximum.reduceat(w, starts, axis=0)


def quantize_weights_with(w, layout: GroupLayout, params: QuantParams) -> QuantizedTensor:
    w = np.asarray(w)
    scale = np.repeat(params.scale, layout.sizes, axis=0)
    zero = np.repeat(params.zero_point, layout.sizes, axis=0)
    codes = quantize(w, QuantParams(scale, zero, params.bits))
    return QuantizedTensor(codes, layout, params, "weight")


def group_quantize_weights(w, g: int, bits: int) -> QuantizedTensor:
    """Round-to-nearest group quantization of a ``(d_in, d_out)`` weight."""
    w = np.asarray(w)
    if w.ndim != 2:
        raise ValidationError("weights must be 2-D (d_in, d_out)")
    layout = GroupLayout.clamped(w.shape[0], int(g))
    lo, hi = _weight_minmax(w, layout)
    return quantize_weights_with(w, layout, compute_params(lo, hi, bits))


def activation_minmax(x: np.ndarray, layout: GroupLayout):
    """Per-sample, per-group min/max over the tokens x channels slab."""
    starts = layout.bounds[:-1]
    lo = np.minimum.reduceat(x.min(axis=-2), starts, axis=-1)
    hi = np.maximum.reduceat(x.max(axis=-2), starts, axis=-1)
    return lo, hi


def _activation_codes(x: np.ndarray, layout: GroupLayout, params: QuantParams) -> np.ndarray:
    d = x.shape[-1]
    flat = np.ascontiguousarray(x.reshape(-1, d))
    G = layout.group_count
    scale = np.ascontiguousarray(params.scale.reshape(-1, G), dtype=np.float64)
    zero = np.ascontiguousarray(params.zero_point.reshape(-1, G), dtype=np.float64)
    rows = flat.shape[0] if params.scale.ndim == 1 else x.shape[-2]
    codes = np.empty(flat.shape, dtype=np.uint8)
    kernels.quantize_groups(flat, scale, zero, max(rows, 1), layout.bounds, params.qmax, codes)
    return codes.reshape(x.shape)


def quantize_activation_with(x, layout: GroupLayout, params: QuantParams) -> QuantizedTensor:
    x = np.asarray(x)
    if x.dtype == np.float32 and x.size:
        return QuantizedTensor(_activation_codes(x, layout, params), layout, params, "activation")
    scale = np.repeat(params.scale, layout.sizes, axis=-1)[..., None, :]
    zero = np.repeat(params.zero_point, layout.sizes, axis=-1)[..., None, :]
    codes = quantize(x, QuantParams(scale, zero, params.bits))
    return QuantizedTensor(codes, layout, params, "activation")


def dynamic_quantize_activation(x, g: int, bits: int) -> QuantizedTensor:
    """Quantize activations with parameters computed from ``x`` itself.

    ``x`` is one sample ``(n, d_in)`` or a batch ``(B, n, d_in)``; every sample
    gets its own parameters, and nothing is cached between calls.
    """
    x = np.asarray(x)
    if x.ndim < 2:
        raise ValidationError("activations must be at least 2-D (n, d_in)")
    layout = GroupLayout.clamped(x.shape[-1], int(g))
    lo, hi = activation_minmax(x, layout)
    return quantize_activation_with(x, layout, compute_params(lo, hi, bits))


def calibrate_static_activation(batches, g: int, bits: int) -> tuple[GroupLayout, QuantParams]:
    """Static per-group parameters from min/max over all calibration batches."""
    lo = hi = None
    layout = None
    for x in batches:
        x = np.asarray(x)
        if layout is None:
            layout = GroupLayout.clamped(x.shape[-1], int(g))
        blo, bhi = activation_minmax(x.reshape(-1, x.shape[-1])[None], layout)
        lo = blo[0] if lo is None else np.minimum(lo, blo[0])
        hi = bhi[0] if hi is None else np.maximum(hi, bhi[0])
    if layout is None:
        raise ValidationError("no calibration data")
    return layout, compute_params(lo, hi, bits)


def _rowwise_params(xq: QuantizedTensor, rows_per_sample: int, n_rows: int):
    scale = xq.params.scale.astype(np.float64)
    zero = xq.params.zero_point.astype(np.float64)
    G = xq.layout.group_count
    if scale.ndim == 1:
        return (
            np.ascontiguousarray(np.broadcast_to(scale, (n_rows, G))),
            np.ascontiguousarray(np.broadcast_to(zero, (n_rows, G))),
        )
    scale = np.repeat(scale.reshape(-1, G), rows_per_sample, axis=0)
    zero = np.repeat(zero.reshape(-1, G), rows_per_sample, axis=0)
    return np.ascontiguousarray(scale), np.ascontiguousarray(zero)


def weight_column_sums(wq: QuantizedTensor) -> np.ndarray:
    return np.add.reduceat(wq.codes.astype(np.float64), wq.layout.bounds[:-1], axis=0)


def quantized_matmul(xq: QuantizedTensor, wq: QuantizedTensor, wcolsum=None) -> np.ndarray:
    """Group-accumulated integer matmul ``X W`` with one rescale per group.

    For group ``u`` with centered codes ``x - Zx`` and ``w - Zw`` the integer
    dot product expands to ``sum(x w) - Zx sum(w) - Zw sum(x) + g Zx Zw``.
    Only ``sum(x w)`` needs the inner loop; it is accumulated in integers and
    the zero-point corrections are folded into the per-group rescale by
    ``sx * sw``.
    """
    if xq.kind != "activation" or wq.kind != "weight":
        raise ConfigError("expected (activation, weight) operands")
    if xq.layout != wq.layout:
        raise ConfigError(f"layout mismatch: {xq.layout} vs {wq.layout}")
    lead = xq.codes.shape[:-1]
    d_in = xq.codes.shape[-1]
    d_out = wq.codes.shape[1]
    xcodes = np.ascontiguousarray(xq.codes.reshape(-1, d_in))
    n_rows = xcodes.shape[0]
    rows_per_sample = xq.codes.shape[-2]
    xscale, xzero = _rowwise_params(xq, rows_per_sample, n_rows)
    if wcolsum is None:
        wcolsum = weight_column_sums(wq)
    out = np.zeros((n_rows, d_out))
    kernels.group_qgemm(
        xcodes,
        np.ascontiguousarray(wq.codes),
        xscale,
        xzero,
        np.ascontiguousarray(wq.params.scale, dtype=np.float64),
        np.ascontiguousarray(wq.params.zero_point, dtype=np.float64),
        np.ascontiguousarray(wcolsum),
        wq.layout.bounds,
        out,
    )
    return out.reshape(*lead, d_out)
