# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops.

Every routine here has a twin in ``_fallback.py`` performing the same IEEE
operations in the same order, so both backends agree bit-for-bit as long as
the extension is built without floating-point contraction (see setup.py).
"""

from libc.math cimport sqrt, fabs, trunc
import numpy as np
cimport numpy as cnp

cnp.import_array()


def jacobi_sweep(double[:, ::1] a, double[:, ::1] v):
    """One cyclic Jacobi sweep over all (p, q), p < q, in row-major order.

    Rotates ``a`` in place towards diagonal form and accumulates the
    rotations into ``v``. Returns the number of rotations applied.
    """
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t p, q, k
    cdef double apq, app, aqq, theta, t, c, s, akp, akq, vkp, vkq
    cdef int rotations = 0
    for p in range(n - 1):
        for q in range(p + 1, n):
            apq = a[p, q]
            if apq == 0.0:
                continue
            app = a[p, p]
            aqq = a[q, q]
            theta = (aqq - app) / (2.0 * apq)
            if fabs(theta) > 1e150:
                t = 0.5 / theta
            elif theta >= 0.0:
                t = 1.0 / (theta + sqrt(theta * theta + 1.0))
            else:
                t = -1.0 / (-theta + sqrt(theta * theta + 1.0))
            c = 1.0 / sqrt(t * t + 1.0)
            s = t * c
            for k in range(n):
                akp = a[k, p]
                akq = a[k, q]
                a[k, p] = c * akp - s * akq
                a[k, q] = s * akp + c * akq
            for k in range(n):
                a[p, k] = a[k, p]
                a[q, k] = a[k, q]
            a[p, p] = app - t * apq
            a[q, q] = aqq + t * apq
            a[p, q] = 0.0
            a[q, p] = 0.0
            for k in range(n):
                vkp = v[k, p]
                vkq = v[k, q]
                v[k, p] = c * vkp - s * vkq
                v[k, q] = s * vkp + c * vkq
            rotations += 1
    return rotations


cdef extern from "_qgemm.h" nogil:
    int qdit_group_qgemm(Py_ssize_t R, Py_ssize_t d, Py_ssize_t o, Py_ssize_t G,
                         const unsigned char *x, const unsigned char *w,
                         const double *xs, const double *xz,
                         const double *ws, const double *wz,
                         const double *wcs, const long *bounds, double *out)
    void qdit_quantize_span(const float *x, Py_ssize_t n, double s, double z,
                            double qmax, unsigned char *out)


def group_qgemm(
    const unsigned char[:, ::1] xcodes,
    const unsigned char[:, ::1] wcodes,
    const double[:, ::1] xscale,
    const double[:, ::1] xzero,
    const double[:, ::1] wscale,
    const double[:, ::1] wzero,
    const double[:, ::1] wcolsum,
    const long[::1] bounds,
    double[:, ::1] out,
):
    """Group-accumulated integer GEMM with a fused per-group rescale.

    xcodes (R, d) and wcodes (d, o) hold unsigned codes; xscale/xzero are
    (R, G); wscale/wzero/wcolsum are (G, o); bounds has G + 1 entries.
    Accumulates into ``out`` (R, o), which the caller zero-fills.
    """
    cdef Py_ssize_t R = xcodes.shape[0]
    cdef Py_ssize_t d = xcodes.shape[1]
    cdef Py_ssize_t o = wcodes.shape[1]
    cdef Py_ssize_t G = bounds.shape[0] - 1
    cdef int status
    if wcodes.shape[0] != d or out.shape[0] != R or out.shape[1] != o:
        raise ValueError("operand shapes do not agree")
    if xscale.shape[0] != R or xscale.shape[1] != G or xzero.shape[0] != R or xzero.shape[1] != G:
        raise ValueError("activation parameters must be (R, G)")
    for params in (wscale, wzero, wcolsum):
        if params.shape[0] != G or params.shape[1] != o:
            raise ValueError("weight parameters must be (G, o)")
    if G < 1 or bounds[0] != 0 or bounds[G] != d:
        raise ValueError("group bounds must cover the input axis")
    if R == 0 or o == 0 or d == 0:
        return
    with nogil:
        status = qdit_group_qgemm(
            R, d, o, G, &xcodes[0, 0], &wcodes[0, 0], &xscale[0, 0], &xzero[0, 0],
            &wscale[0, 0], &wzero[0, 0], &wcolsum[0, 0], &bounds[0], &out[0, 0],
        )
    if status != 0:
        raise MemoryError()


def quantize_groups(
    const float[:, ::1] x,
    const double[:, ::1] scale,
    const double[:, ::1] zero,
    Py_ssize_t rows_per_param,
    const long[::1] bounds,
    int qmax,
    unsigned char[:, ::1] out,
):
    """Codes ``clip(round(x / s) + Z, 0, qmax)`` with per-(row block, group) parameters.

    Row ``r`` uses parameter row ``r // rows_per_param``; rounding is half away
    from zero, evaluated in double precision.
    """
    cdef Py_ssize_t R = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t G = bounds.shape[0] - 1
    cdef Py_ssize_t r, u, k, pr
    if out.shape[0] != R or out.shape[1] != d:
        raise ValueError("output shape does not match input")
    if rows_per_param < 1 or scale.shape[0] * rows_per_param < R:
        raise ValueError("not enough parameter rows")
    if scale.shape[1] != G or zero.shape[0] != scale.shape[0] or zero.shape[1] != G:
        raise ValueError("parameters must be (S, G)")
    if G < 1 or bounds[0] != 0 or bounds[G] != d:
        raise ValueError("group bounds must cover the input axis")
    if R == 0 or d == 0:
        return
    with nogil:
        for r in range(R):
            pr = r // rows_per_param
            for u in range(G):
                qdit_quantize_span(&x[r, bounds[u]], bounds[u + 1] - bounds[u],
                                   scale[pr, u], zero[pr, u], qmax, &out[r, bounds[u]])
