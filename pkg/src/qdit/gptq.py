"""Hessian-guided weight rounding (GPTQ).

Rows of ``W`` (input channels) are quantized one at a time in natural order.
After row ``k`` is fixed, its rounding error is pushed onto the rows that are
still unquantized, weighted by the upper Cholesky factor ``U`` of ``H^-1``:

    err = (w_k - q_k) / U[k, k]
    W[k+1:] -= U[k, k+1:]^T err

Group parameters are computed when the sweep enters a group, from the
already-compensated weights of that group.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .errors import DimensionError, NotPositiveDefiniteError, ValidationError
from .quantizer import (
    GroupLayout,
    QuantizedTensor,
    QuantParams,
    compute_params,
    quantize,
    quantize_weights_with,
)

log = logging.getLogger(__name__)

DEFAULT_DAMPING = 0.01


@dataclass
class HessianAccumulator:
    """Running ``sum(x^T x)`` over calibration rows, kept in float64."""

    h: np.ndarray
    sample_count: int = 0
    damping_fraction: float = DEFAULT_DAMPING

    @classmethod
    def zeros(cls, d_in: int, damping_fraction: float = DEFAULT_DAMPING) -> "HessianAccumulator":
        return cls(np.zeros((d_in, d_in)), 0, damping_fraction)

    @property
    def d_in(self) -> int:
        return self.h.shape[0]

    def accumulate(self, x) -> "HessianAccumulator":
        x = np.asarray(x, dtype=np.float64)
        x = x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x
        if x.shape[1] != self.d_in:
            raise DimensionError(f"expected {self.d_in} columns, got {x.shape[1]}")
        self.h += x.T @ x
        self.sample_count += x.shape[0]
        return self


def accumulate(acc: HessianAccumulator, x) -> HessianAccumulator:
    return acc.accumulate(x)


def _inverse_cholesky(h: np.ndarray, damping_fraction: float) -> np.ndarray:
    """Upper factor ``U`` with ``U^T U = (H + lambda I)^-1``; retries once with 10x damping."""
    h = np.array(h, dtype=np.float64)
    diag = np.diag(h).copy()
    dead = diag == 0
    h[dead, dead] = 1.0  # channel never active: any row value is exact
    mean_diag = float(np.mean(np.diag(h)))
    last = None
    for frac in (damping_fraction, 10 * damping_fraction):
        hd = h + frac * mean_diag * np.eye(h.shape[0])
        try:
            lower = numerics.cholesky(hd)
            linv = np.linalg.inv(lower)
            hinv = linv.T @ linv
            return numerics.cholesky(0.5 * (hinv + hinv.T)).T
        except NotPositiveDefiniteError as exc:
            log.warning("Cholesky failed at damping %.3g; retrying", frac)
            last = exc
    raise NotPositiveDefiniteError(f"Hessian not positive definite after damping: {last}")


def gptq_quantize_layer(
    w,
    h: HessianAccumulator | np.ndarray,
    g: int,
    bits: int,
    act_order: bool = False,
) -> QuantizedTensor:
    """Quantize a ``(d_in, d_out)`` weight with GPTQ error compensation.

    ``act_order`` processes input channels by descending Hessian diagonal;
    it is only available for ``g == d_in`` since a permutation would break the
    contiguous group layout.
    """
    w = np.asarray(w)
    if w.ndim != 2:
        raise ValidationError("weights must be 2-D (d_in, d_out)")
    if isinstance(h, HessianAccumulator):
        hmat, frac = h.h, h.damping_fraction
    else:
        hmat, frac = np.asarray(h, dtype=np.float64), DEFAULT_DAMPING
    d_in, d_out = w.shape
    if hmat.shape != (d_in, d_in):
        raise DimensionError(f"Hessian shape {hmat.shape} does not match d_in={d_in}")
    layout = GroupLayout.clamped(d_in, int(g))
    perm = None
    if act_order:
        if layout.group_count != 1:
            raise ValidationError("act_order requires a single group (g == d_in)")
        perm = np.argsort(-np.diag(hmat), kind="stable")
        hmat = hmat[np.ix_(perm, perm)]
        w = w[perm]

    u = _inverse_cholesky(hmat, frac)
    work = w.astype(np.float64)
    codes = np.empty((d_in, d_out), dtype=np.uint8)
    scales = np.empty((layout.group_count, d_out), dtype=np.float32)
    zeros = np.empty((layout.group_count, d_out), dtype=np.int64)
    bounds = layout.bounds
    for gi in range(layout.group_count):
        k0, k1 = int(bounds[gi]), int(bounds[gi + 1])
        block = work[k0:k1]
        p = compute_params(block.min(axis=0), block.max(axis=0), bits)
        scales[gi], zeros[gi] = p.scale, p.zero_point
        sf = p.scale.astype(np.float64)
        for k in range(k0, k1):
            row = work[k]
            q = quantize(row, p)
            codes[k] = q
            err = (row - sf * (q.astype(np.int64) - p.zero_point)) / u[k, k]
            work[k + 1 :] -= np.outer(u[k, k + 1 :], err)

    params = QuantParams(scales, zeros, bits)
    if perm is not None:
        inv = np.argsort(perm)
        return QuantizedTensor(codes[inv], layout, params, "weight")
    return QuantizedTensor(codes, layout, params, "weight")


def rtn_quantize_layer(w, g: int, bits: int) -> QuantizedTensor:
    """GPTQ with an identity Hessian, i.e. plain round-to-nearest."""
    w = np.asarray(w)
    return gptq_quantize_layer(w, np.eye(w.shape[0]), g, bits)


def weighted_error(w, wq: QuantizedTensor, h) -> float:
    """``tr(D^T H D)`` for ``D = dequantize(wq) - w``."""
    hmat = h.h if isinstance(h, HessianAccumulator) else np.asarray(h, dtype=np.float64)
    delta = wq.dequantize() - np.asarray(w, dtype=np.float64)
    return float(np.sum(delta * (hmat @ delta)))


__all__ = [
    "HessianAccumulator",
    "accumulate",
    "gptq_quantize_layer",
    "rtn_quantize_layer",
    "weighted_error",
    "quantize_weights_with",
]
