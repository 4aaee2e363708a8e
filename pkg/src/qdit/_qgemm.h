/* Group-accumulated integer GEMM with a fused per-group rescale.
 *
 * out[r, j] += sum_u (xs[r,u] * ws[u,j]) * (acc - xz*wcs[u,j] - rs*wz[u,j] + g*xz*wz[u,j])
 * where acc = sum_{k in group u} x[r,k] * w[k,j] is accumulated exactly in
 * int32 and rs = sum_{k in group u} x[r,k]. The floating-point expression
 * order matches the pure-Python fallback; build without FMA contraction.
 *
 * Codes are at most 255, so consecutive input channels are packed as int16
 * pairs and multiplied with a pairwise multiply-add (x0*w0 + x1*w1 in int32).
 * Each group is padded to an even length with zero codes, which leaves acc
 * unchanged. The inner tile is QDIT_RB rows by QDIT_JT columns. */
#ifndef QDIT_QGEMM_H
#define QDIT_QGEMM_H

#include <math.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>
#include <string.h>

#if defined(__AVX512BW__) || defined(__AVX2__)
#include <immintrin.h>
#endif

#define QDIT_RB 16
#define QDIT_JT 16

/* xp: QDIT_RB row pointers into packed pairs (uint32 = lo | hi << 16).
 * wp: packed weights, pair-major, each pair row holding ldw * 2 int16.
 * Computes acc[r][j] over pairs [p0, p1) for columns j0 .. j0 + QDIT_JT. */
static inline void qdit_tile(const uint32_t *const *xp, const int16_t *wp,
                             ptrdiff_t ldw, ptrdiff_t p0, ptrdiff_t p1,
                             ptrdiff_t j0, int32_t acc[QDIT_RB][QDIT_JT])
{
#if defined(__AVX512BW__)
    __m512i c[QDIT_RB];
    for (int r = 0; r < QDIT_RB; r++)
        c[r] = _mm512_setzero_si512();
    for (ptrdiff_t p = p0; p < p1; p++) {
        __m512i wv = _mm512_loadu_si512((const void *)(wp + (p * ldw + j0) * 2));
        for (int r = 0; r < QDIT_RB; r++) {
            __m512i xv = _mm512_set1_epi32((int)xp[r][p]);
#if defined(__AVX512VNNI__)
            c[r] = _mm512_dpwssd_epi32(c[r], xv, wv);
#else
            c[r] = _mm512_add_epi32(c[r], _mm512_madd_epi16(xv, wv));
#endif
        }
    }
    for (int r = 0; r < QDIT_RB; r++)
        _mm512_storeu_si512((void *)acc[r], c[r]);
#elif defined(__AVX2__)
    for (int h = 0; h < QDIT_JT; h += 8) {
        __m256i c[QDIT_RB];
        for (int r = 0; r < QDIT_RB; r++)
            c[r] = _mm256_setzero_si256();
        for (ptrdiff_t p = p0; p < p1; p++) {
            __m256i wv = _mm256_loadu_si256((const __m256i *)(wp + (p * ldw + j0 + h) * 2));
            for (int r = 0; r < QDIT_RB; r++) {
                __m256i xv = _mm256_set1_epi32((int)xp[r][p]);
                c[r] = _mm256_add_epi32(c[r], _mm256_madd_epi16(xv, wv));
            }
        }
        for (int r = 0; r < QDIT_RB; r++)
            _mm256_storeu_si256((__m256i *)(acc[r] + h), c[r]);
    }
#else
    memset(acc, 0, sizeof(int32_t) * QDIT_RB * QDIT_JT);
    for (ptrdiff_t p = p0; p < p1; p++) {
        const int16_t *wr = wp + (p * ldw + j0) * 2;
        for (int r = 0; r < QDIT_RB; r++) {
            int32_t lo = (int32_t)(xp[r][p] & 0xFFFFu);
            int32_t hi = (int32_t)(xp[r][p] >> 16);
            for (int j = 0; j < QDIT_JT; j++)
                acc[r][j] += lo * wr[2 * j] + hi * wr[2 * j + 1];
        }
    }
#endif
}

/* out[j] += (sx * ws[j]) * (((acc[j] - zx * wcs[j]) - rs * wz[j]) + gz * wz[j]) */
static inline void qdit_epilogue(const int32_t *acc, ptrdiff_t nj, double sx,
                                 double zx, double gz, double rs,
                                 const double *ws, const double *wz,
                                 const double *wcs, double *out)
{
    ptrdiff_t jj = 0;
#if defined(__AVX512F__)
    __m512d vzx = _mm512_set1_pd(zx), vrs = _mm512_set1_pd(rs);
    __m512d vgz = _mm512_set1_pd(gz), vsx = _mm512_set1_pd(sx);
    for (; jj + 8 <= nj; jj += 8) {
        __m512d a = _mm512_cvtepi32_pd(_mm256_loadu_si256((const __m256i *)(acc + jj)));
        __m512d vwz = _mm512_loadu_pd(wz + jj);
        __m512d corr = _mm512_sub_pd(a, _mm512_mul_pd(vzx, _mm512_loadu_pd(wcs + jj)));
        corr = _mm512_sub_pd(corr, _mm512_mul_pd(vrs, vwz));
        corr = _mm512_add_pd(corr, _mm512_mul_pd(vgz, vwz));
        __m512d scale = _mm512_mul_pd(vsx, _mm512_loadu_pd(ws + jj));
        _mm512_storeu_pd(out + jj, _mm512_add_pd(_mm512_loadu_pd(out + jj), _mm512_mul_pd(scale, corr)));
    }
#endif
    for (; jj < nj; jj++) {
        double corr = (double)acc[jj] - zx * wcs[jj];
        corr = corr - rs * wz[jj];
        corr = corr + gz * wz[jj];
        out[jj] += (sx * ws[jj]) * corr;
    }
}

/* Codes clip(round(x / s) + z, 0, qmax), rounding half away from zero. */
static inline void qdit_quantize_span(const float *x, ptrdiff_t n, double s, double z,
                                      double qmax, unsigned char *out)
{
    ptrdiff_t k = 0;
#if defined(__AVX512F__)
    __m512d vs = _mm512_set1_pd(s), vz = _mm512_set1_pd(z), vq = _mm512_set1_pd(qmax);
    __m512d half = _mm512_set1_pd(0.5), one = _mm512_set1_pd(1.0), zero = _mm512_setzero_pd();
    __m512d absmask = _mm512_castsi512_pd(_mm512_set1_epi64(0x7FFFFFFFFFFFFFFFLL));
    __m512d signmask = _mm512_castsi512_pd(_mm512_set1_epi64((long long)0x8000000000000000ULL));
    for (; k + 8 <= n; k += 8) {
        __m512d v = _mm512_div_pd(_mm512_cvtps_pd(_mm256_loadu_ps(x + k)), vs);
        __m512d t = _mm512_roundscale_pd(v, _MM_FROUND_TO_ZERO | _MM_FROUND_NO_EXC);
        __mmask8 up = _mm512_cmp_pd_mask(_mm512_and_pd(_mm512_sub_pd(v, t), absmask), half, _CMP_GE_OQ);
        __m512d step = _mm512_or_pd(one, _mm512_and_pd(v, signmask));
        t = _mm512_mask_add_pd(t, up, t, step);
        __m512d c = _mm512_min_pd(_mm512_max_pd(_mm512_add_pd(t, vz), zero), vq);
        __m256i ci = _mm512_cvttpd_epi32(c);
#if defined(__AVX512VL__)
        _mm_storel_epi64((__m128i *)(out + k), _mm256_cvtepi32_epi8(ci));
#else
        int32_t tmp[8];
        _mm256_storeu_si256((__m256i *)tmp, ci);
        for (int i = 0; i < 8; i++)
            out[k + i] = (unsigned char)tmp[i];
#endif
    }
#endif
    for (; k < n; k++) {
        double v = (double)x[k] / s;
        double t = trunc(v);
        t = t + (fabs(v - t) >= 0.5 ? copysign(1.0, v) : 0.0);
        double c = t + z;
        c = c < 0.0 ? 0.0 : c;
        c = c > qmax ? qmax : c;
        out[k] = (unsigned char)c;
    }
}

/* x (R, d) and w (d, o) hold codes; xs/xz are (R, G); ws/wz/wcs are (G, o);
 * bounds has G + 1 entries. Accumulates into out (R, o).
 * Returns 0 on success, -1 on allocation failure. */
static int qdit_group_qgemm(ptrdiff_t R, ptrdiff_t d, ptrdiff_t o, ptrdiff_t G,
                            const unsigned char *x, const unsigned char *w,
                            const double *xs, const double *xz,
                            const double *ws, const double *wz,
                            const double *wcs, const long *bounds,
                            double *out)
{
    ptrdiff_t opad = (o + QDIT_JT - 1) / QDIT_JT * QDIT_JT;
    ptrdiff_t *pstart = malloc(sizeof(ptrdiff_t) * (G + 1));
    if (!pstart)
        return -1;
    pstart[0] = 0;
    for (ptrdiff_t u = 0; u < G; u++)
        pstart[u + 1] = pstart[u] + (bounds[u + 1] - bounds[u] + 1) / 2;
    ptrdiff_t P = pstart[G];

    int16_t *wp = calloc((size_t)(P * opad * 2), sizeof(int16_t));
    uint32_t *xp = calloc((size_t)(P * QDIT_RB), sizeof(uint32_t));
    uint32_t *zero = calloc((size_t)P, sizeof(uint32_t));
    if (!wp || !xp || !zero) {
        free(pstart);
        free(wp);
        free(xp);
        free(zero);
        return -1;
    }
    for (ptrdiff_t u = 0; u < G; u++)
        for (ptrdiff_t k = bounds[u]; k < bounds[u + 1]; k++) {
            ptrdiff_t p = pstart[u] + (k - bounds[u]) / 2;
            int half = (int)((k - bounds[u]) & 1);
            for (ptrdiff_t j = 0; j < o; j++)
                wp[(p * opad + j) * 2 + half] = (int16_t)w[k * o + j];
        }

    const uint32_t *rows[QDIT_RB];
    long rowsum[QDIT_RB];
    int32_t acc[QDIT_RB][QDIT_JT];
    for (ptrdiff_t r0 = 0; r0 < R; r0 += QDIT_RB) {
        ptrdiff_t nr = R - r0 < QDIT_RB ? R - r0 : QDIT_RB;
        for (ptrdiff_t rr = 0; rr < QDIT_RB; rr++) {
            if (rr >= nr) {
                rows[rr] = zero;
                continue;
            }
            const unsigned char *xr = x + (r0 + rr) * d;
            uint32_t *dst = xp + rr * P;
            for (ptrdiff_t u = 0; u < G; u++) {
                ptrdiff_t k = bounds[u], k1 = bounds[u + 1], p = pstart[u];
                for (; k + 1 < k1; k += 2)
                    dst[p++] = (uint32_t)xr[k] | ((uint32_t)xr[k + 1] << 16);
                if (k < k1)
                    dst[p] = (uint32_t)xr[k];
            }
            rows[rr] = dst;
        }
        for (ptrdiff_t u = 0; u < G; u++) {
            ptrdiff_t k0 = bounds[u], k1 = bounds[u + 1];
            const double *wsu = ws + u * o, *wzu = wz + u * o, *wcsu = wcs + u * o;
            for (ptrdiff_t rr = 0; rr < nr; rr++) {
                const unsigned char *xr = x + (r0 + rr) * d;
                long s = 0;
                for (ptrdiff_t k = k0; k < k1; k++)
                    s += xr[k];
                rowsum[rr] = s;
            }
            for (ptrdiff_t j0 = 0; j0 < o; j0 += QDIT_JT) {
                ptrdiff_t nj = o - j0 < QDIT_JT ? o - j0 : QDIT_JT;
                qdit_tile(rows, wp, opad, pstart[u], pstart[u + 1], j0, acc);
                for (ptrdiff_t rr = 0; rr < nr; rr++) {
                    ptrdiff_t r = r0 + rr;
                    double zx = xz[r * G + u];
                    qdit_epilogue(acc[rr], nj, xs[r * G + u], zx, (double)(k1 - k0) * zx,
                                  (double)rowsum[rr], wsu + j0, wzu + j0, wcsu + j0,
                                  out + r * o + j0);
                }
            }
        }
    }
    free(pstart);
    free(wp);
    free(xp);
    free(zero);
    return 0;
}

#endif
