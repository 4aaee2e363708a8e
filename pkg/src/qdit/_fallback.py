"""Pure-Python twins of the compiled kernels in ``_kernels.pyx``.

Signatures, in-place semantics and floating-point operation order match the
extension exactly, so results are bit-identical across backends.
"""

import math

import numpy as np


def jacobi_sweep(a, v):
    n = a.shape[0]
    rotations = 0
    for p in range(n - 1):
        for q in range(p + 1, n):
            apq = a[p, q]
            if apq == 0.0:
                continue
            app = a[p, p]
            aqq = a[q, q]
            theta = (aqq - app) / (2.0 * apq)
            if abs(theta) > 1e150:
                t = 0.5 / theta
            elif theta >= 0.0:
                t = 1.0 / (theta + math.sqrt(theta * theta + 1.0))
            else:
                t = -1.0 / (-theta + math.sqrt(theta * theta + 1.0))
            c = 1.0 / math.sqrt(t * t + 1.0)
            s = t * c
            akp = a[:, p].copy()
            akq = a[:, q].copy()
            a[:, p] = c * akp - s * akq
            a[:, q] = s * akp + c * akq
            a[p, :] = a[:, p]
            a[q, :] = a[:, q]
            a[p, p] = app - t * apq
            a[q, q] = aqq + t * apq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vkp = v[:, p].copy()
            vkq = v[:, q].copy()
            v[:, p] = c * vkp - s * vkq
            v[:, q] = s * vkp + c * vkq
            rotations += 1
    return rotations


def group_qgemm(xcodes, wcodes, xscale, xzero, wscale, wzero, wcolsum, bounds, out):
    # Codes are < 2**8, so float64 products and partial sums stay exact integers
    # far below 2**53: the BLAS product is an exact integer accumulation.
    for u in range(len(bounds) - 1):
        k0, k1 = int(bounds[u]), int(bounds[u + 1])
        xc = xcodes[:, k0:k1].astype(np.float64)
        acc = xc @ wcodes[k0:k1].astype(np.float64)
        rowsum = xc.sum(axis=1)
        zx = xzero[:, u : u + 1]
        gz = float(k1 - k0) * zx
        corr = acc - zx * wcolsum[u]
        corr = corr - rowsum[:, None] * wzero[u]
        corr = corr + gz * wzero[u]
        out += (xscale[:, u : u + 1] * wscale[u]) * corr


def quantize_groups(x, scale, zero, rows_per_param, bounds, qmax, out):
    sizes = np.diff(bounds)
    s = np.repeat(np.repeat(scale, rows_per_param, axis=0), sizes, axis=1)
    z = np.repeat(np.repeat(zero, rows_per_param, axis=0), sizes, axis=1)
    v = x.astype(np.float64) / s
    r = np.trunc(v)
    r = r + np.where(np.abs(v - r) >= 0.5, np.sign(v), 0.0)
    out[...] = np.clip(r + z, 0, qmax).astype(np.uint8)
