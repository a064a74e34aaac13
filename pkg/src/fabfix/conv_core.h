/* 3x3 same-padded convolution kernels, NHWC, kernel laid out (3,3,cin,cout).
 *
 * Pixels are processed in blocks of PB along a row: the 3x3xcin
 * neighbourhood of each is gathered into a column buffer, then the
 * (9*cin, cout) kernel matrix is applied with PB independent accumulators
 * so the FMA chains overlap. Output widths 8 and 16 get fixed-width loops.
 */
#ifndef FABFIX_CONV_CORE_H
#define FABFIX_CONV_CORE_H

#include <stddef.h>
#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define FABFIX_HAVE_AVX2 1
#endif

#define FABFIX_MAX_K (9 * 64)
#define FABFIX_PB 4

#define DEFINE_BLOCK_FWD(T, SFX, C)                                            \
static inline void blockfwd_##SFX##_##C(const T *restrict cols,                \
                                        ptrdiff_t kdim, ptrdiff_t np,          \
                                        const T *restrict kmat,                \
                                        const T *restrict bias,                \
                                        T *restrict out)                       \
{                                                                              \
    T acc[FABFIX_PB][C];                                                       \
    for (int p = 0; p < FABFIX_PB; p++)                                        \
        for (int c = 0; c < C; c++) acc[p][c] = bias[c];                       \
    for (ptrdiff_t k = 0; k < kdim; k++) {                                     \
        const T *row = kmat + k * C;                                           \
        for (int p = 0; p < FABFIX_PB; p++) {                                  \
            T v = cols[p * FABFIX_MAX_K + k];                                  \
            for (int c = 0; c < C; c++) acc[p][c] += v * row[c];               \
        }                                                                      \
    }                                                                          \
    for (ptrdiff_t p = 0; p < np; p++)                                         \
        for (int c = 0; c < C; c++) out[p * C + c] = acc[p][c];                \
}                                                                              \
                                                                               \
static inline void blockbwd_##SFX##_##C(const T *restrict cols,                \
                                        ptrdiff_t kdim,                        \
                                        const T *restrict g,                   \
                                        T *restrict grad_k)                    \
{                                                                              \
    T gv[FABFIX_PB][C];                                                        \
    for (int p = 0; p < FABFIX_PB; p++)                                        \
        for (int c = 0; c < C; c++) gv[p][c] = g[p * C + c];                   \
    for (ptrdiff_t k = 0; k < kdim; k++) {                                     \
        T *row = grad_k + k * C;                                               \
        T acc[C];                                                              \
        for (int c = 0; c < C; c++) acc[c] = row[c];                           \
        for (int p = 0; p < FABFIX_PB; p++) {                                  \
            T v = cols[p * FABFIX_MAX_K + k];                                  \
            for (int c = 0; c < C; c++) acc[c] += v * gv[p][c];                \
        }                                                                      \
        for (int c = 0; c < C; c++) row[c] = acc[c];                           \
    }                                                                          \
}

#ifdef FABFIX_HAVE_AVX2
/* float32, 8 or 16 output lanes: one or two ymm registers per pixel */
#define DEFINE_BLOCK_AVX(C, NV)                                                \
static inline void blockfwd_f32_##C(const float *restrict cols,                \
                                    ptrdiff_t kdim, ptrdiff_t np,              \
                                    const float *restrict kmat,                \
                                    const float *restrict bias,                \
                                    float *restrict out)                       \
{                                                                              \
    __m256 acc[FABFIX_PB][NV];                                                 \
    for (int p = 0; p < FABFIX_PB; p++)                                        \
        for (int j = 0; j < NV; j++) acc[p][j] = _mm256_loadu_ps(bias + 8 * j);\
    for (ptrdiff_t k = 0; k < kdim; k++) {                                     \
        __m256 row[NV];                                                        \
        for (int j = 0; j < NV; j++) row[j] = _mm256_loadu_ps(kmat + k * C + 8 * j); \
        for (int p = 0; p < FABFIX_PB; p++) {                                  \
            __m256 v = _mm256_broadcast_ss(cols + p * FABFIX_MAX_K + k);       \
            for (int j = 0; j < NV; j++)                                       \
                acc[p][j] = _mm256_fmadd_ps(v, row[j], acc[p][j]);             \
        }                                                                      \
    }                                                                          \
    for (ptrdiff_t p = 0; p < np; p++)                                         \
        for (int j = 0; j < NV; j++)                                           \
            _mm256_storeu_ps(out + p * C + 8 * j, acc[p][j]);                  \
}                                                                              \
                                                                               \
static inline void blockbwd_f32_##C(const float *restrict cols,                \
                                    ptrdiff_t kdim,                            \
                                    const float *restrict g,                   \
                                    float *restrict grad_k)                    \
{                                                                              \
    __m256 gv[FABFIX_PB][NV];                                                  \
    for (int p = 0; p < FABFIX_PB; p++)                                        \
        for (int j = 0; j < NV; j++) gv[p][j] = _mm256_loadu_ps(g + p * C + 8 * j); \
    for (ptrdiff_t k = 0; k < kdim; k++) {                                     \
        float *row = grad_k + k * C;                                           \
        __m256 acc[NV];                                                        \
        for (int j = 0; j < NV; j++) acc[j] = _mm256_loadu_ps(row + 8 * j);   \
        for (int p = 0; p < FABFIX_PB; p++) {                                  \
            __m256 v = _mm256_broadcast_ss(cols + p * FABFIX_MAX_K + k);       \
            for (int j = 0; j < NV; j++)                                       \
                acc[j] = _mm256_fmadd_ps(v, gv[p][j], acc[j]);                 \
        }                                                                      \
        for (int j = 0; j < NV; j++) _mm256_storeu_ps(row + 8 * j, acc[j]);    \
    }                                                                          \
}
DEFINE_BLOCK_AVX(8, 1)
DEFINE_BLOCK_AVX(16, 2)

/* single output channel with kdim a multiple of 8: vectorize along k */
static inline void blockfwd_f32_1(const float *restrict cols, ptrdiff_t kdim,
                                  ptrdiff_t np, const float *restrict kmat,
                                  const float *restrict bias,
                                  float *restrict out)
{
    for (ptrdiff_t p = 0; p < np; p++) {
        const float *cp = cols + p * FABFIX_MAX_K;
        __m256 acc = _mm256_setzero_ps();
        for (ptrdiff_t k = 0; k < kdim; k += 8)
            acc = _mm256_fmadd_ps(_mm256_loadu_ps(cp + k),
                                  _mm256_loadu_ps(kmat + k), acc);
        __m128 lo = _mm256_castps256_ps128(acc);
        __m128 hi = _mm256_extractf128_ps(acc, 1);
        lo = _mm_add_ps(lo, hi);
        lo = _mm_hadd_ps(lo, lo);
        lo = _mm_hadd_ps(lo, lo);
        out[p] = bias[0] + _mm_cvtss_f32(lo);
    }
}
#define FABFIX_HAVE_DOT1 1
#define BLOCK_SPECIALIZATIONS_f32
#else
#define BLOCK_SPECIALIZATIONS_f32 DEFINE_BLOCK_FWD(float, f32, 8) DEFINE_BLOCK_FWD(float, f32, 16)
#endif
#define BLOCK_SPECIALIZATIONS_f64 DEFINE_BLOCK_FWD(double, f64, 8) DEFINE_BLOCK_FWD(double, f64, 16)

#ifdef FABFIX_HAVE_DOT1
#define FABFIX_DOT1_OK_f32 1
#define FABFIX_DOT1_CALL_f32(...) blockfwd_f32_1(__VA_ARGS__)
#else
#define FABFIX_DOT1_OK_f32 0
#define FABFIX_DOT1_CALL_f32(...) ((void)0)
#endif
#define FABFIX_DOT1_OK_f64 0
#define FABFIX_DOT1_CALL_f64(...) ((void)0)
#define FABFIX_DOT1_OK(SFX) FABFIX_DOT1_OK_##SFX
#define FABFIX_DOT1_CALL(SFX, ...) FABFIX_DOT1_CALL_##SFX(__VA_ARGS__)

#define DEFINE_CONV_KERNELS(T, SFX)                                            \
static inline void gather_##SFX(const T *restrict x, ptrdiff_t h, ptrdiff_t w, \
                                ptrdiff_t cin, ptrdiff_t y, ptrdiff_t xx,      \
                                T *restrict col)                               \
{                                                                              \
    if (y > 0 && y < h - 1 && xx > 0 && xx < w - 1) {                          \
        ptrdiff_t run = 3 * cin;                                               \
        for (int dy = 0; dy < 3; dy++) {                                       \
            const T *src = x + ((y + dy - 1) * w + xx - 1) * cin;              \
            T *dst = col + dy * run;                                           \
            for (ptrdiff_t c = 0; c < run; c++) dst[c] = src[c];               \
        }                                                                      \
        return;                                                                \
    }                                                                          \
    for (int dy = 0; dy < 3; dy++) {                                           \
        ptrdiff_t yy = y + dy - 1;                                             \
        for (int dx = 0; dx < 3; dx++) {                                       \
            ptrdiff_t xs = xx + dx - 1;                                        \
            T *dst = col + (dy * 3 + dx) * cin;                                \
            if (yy < 0 || yy >= h || xs < 0 || xs >= w) {                      \
                for (ptrdiff_t c = 0; c < cin; c++) dst[c] = 0;                \
            } else {                                                           \
                const T *src = x + (yy * w + xs) * cin;                        \
                for (ptrdiff_t c = 0; c < cin; c++) dst[c] = src[c];           \
            }                                                                  \
        }                                                                      \
    }                                                                          \
}                                                                              \
                                                                               \
BLOCK_SPECIALIZATIONS_##SFX                                                    \
                                                                               \
static void blockfwd_##SFX##_any(const T *restrict cols, ptrdiff_t kdim,       \
                                 ptrdiff_t np, const T *restrict kmat,         \
                                 const T *restrict bias, ptrdiff_t cout,       \
                                 T *restrict out)                              \
{                                                                              \
    for (ptrdiff_t p = 0; p < np; p++) {                                       \
        T *o = out + p * cout;                                                 \
        for (ptrdiff_t c = 0; c < cout; c++) o[c] = bias[c];                   \
        for (ptrdiff_t k = 0; k < kdim; k++) {                                 \
            T v = cols[p * FABFIX_MAX_K + k];                                  \
            const T *row = kmat + k * cout;                                    \
            for (ptrdiff_t c = 0; c < cout; c++) o[c] += v * row[c];           \
        }                                                                      \
    }                                                                          \
}                                                                              \
                                                                               \
static void blockbwd_##SFX##_any(const T *restrict cols, ptrdiff_t kdim,       \
                                 ptrdiff_t np, const T *restrict g,            \
                                 ptrdiff_t cout, T *restrict grad_k)           \
{                                                                              \
    for (ptrdiff_t p = 0; p < np; p++) {                                       \
        const T *gp = g + p * cout;                                            \
        for (ptrdiff_t k = 0; k < kdim; k++) {                                 \
            T v = cols[p * FABFIX_MAX_K + k];                                  \
            T *row = grad_k + k * cout;                                        \
            for (ptrdiff_t c = 0; c < cout; c++) row[c] += v * gp[c];          \
        }                                                                      \
    }                                                                          \
}                                                                              \
                                                                               \
static void conv3x3_fwd_##SFX(const T *restrict x, ptrdiff_t n, ptrdiff_t h,   \
                              ptrdiff_t w, ptrdiff_t cin,                      \
                              const T *restrict kmat, const T *restrict bias,  \
                              ptrdiff_t cout, T *restrict out)                 \
{                                                                              \
    T cols[FABFIX_PB * FABFIX_MAX_K];                                          \
    ptrdiff_t kdim = 9 * cin;                                                  \
    for (ptrdiff_t b = 0; b < n; b++) {                                        \
        const T *xb = x + b * h * w * cin;                                     \
        T *ob = out + b * h * w * cout;                                        \
        for (ptrdiff_t y = 0; y < h; y++) {                                    \
            for (ptrdiff_t x0 = 0; x0 < w; x0 += FABFIX_PB) {                  \
                ptrdiff_t np = w - x0 < FABFIX_PB ? w - x0 : FABFIX_PB;        \
                for (ptrdiff_t p = 0; p < FABFIX_PB; p++) {                    \
                    if (p < np)                                                \
                        gather_##SFX(xb, h, w, cin, y, x0 + p,                 \
                                     cols + p * FABFIX_MAX_K);                 \
                    else                                                       \
                        for (ptrdiff_t k = 0; k < kdim; k++)                   \
                            cols[p * FABFIX_MAX_K + k] = 0;                    \
                }                                                              \
                T *o = ob + (y * w + x0) * cout;                               \
                if (cout == 8)                                                 \
                    blockfwd_##SFX##_8(cols, kdim, np, kmat, bias, o);         \
                else if (FABFIX_DOT1_OK(SFX) && cout == 1 && kdim % 8 == 0)    \
                    FABFIX_DOT1_CALL(SFX, cols, kdim, np, kmat, bias, o);      \
                else if (cout == 16)                                           \
                    blockfwd_##SFX##_16(cols, kdim, np, kmat, bias, o);        \
                else                                                           \
                    blockfwd_##SFX##_any(cols, kdim, np, kmat, bias, cout, o); \
            }                                                                  \
        }                                                                      \
    }                                                                          \
}                                                                              \
                                                                               \
/* grad_k (9*cin, cout) and grad_b (cout) are accumulated into. */             \
static void conv3x3_bwd_kernel_##SFX(const T *restrict x, ptrdiff_t n,         \
                                     ptrdiff_t h, ptrdiff_t w, ptrdiff_t cin,  \
                                     const T *restrict g, ptrdiff_t cout,      \
                                     T *restrict grad_k, T *restrict grad_b)   \
{                                                                              \
    T cols[FABFIX_PB * FABFIX_MAX_K];                                          \
    ptrdiff_t kdim = 9 * cin;                                                  \
    for (ptrdiff_t b = 0; b < n; b++) {                                        \
        const T *xb = x + b * h * w * cin;                                     \
        const T *gb = g + b * h * w * cout;                                    \
        for (ptrdiff_t y = 0; y < h; y++) {                                    \
            for (ptrdiff_t x0 = 0; x0 < w; x0 += FABFIX_PB) {                  \
                ptrdiff_t np = w - x0 < FABFIX_PB ? w - x0 : FABFIX_PB;        \
                const T *gp = gb + (y * w + x0) * cout;                        \
                for (ptrdiff_t p = 0; p < np; p++) {                           \
                    gather_##SFX(xb, h, w, cin, y, x0 + p,                     \
                                 cols + p * FABFIX_MAX_K);                     \
                    for (ptrdiff_t c = 0; c < cout; c++)                       \
                        grad_b[c] += gp[p * cout + c];                         \
                }                                                              \
                if (np == FABFIX_PB && cout == 8)                              \
                    blockbwd_##SFX##_8(cols, kdim, gp, grad_k);                \
                else if (np == FABFIX_PB && cout == 16)                        \
                    blockbwd_##SFX##_16(cols, kdim, gp, grad_k);               \
                else                                                           \
                    blockbwd_##SFX##_any(cols, kdim, np, gp, cout, grad_k);    \
            }                                                                  \
        }                                                                      \
    }                                                                          \
}

DEFINE_CONV_KERNELS(float, f32)
DEFINE_CONV_KERNELS(double, f64)

#endif
