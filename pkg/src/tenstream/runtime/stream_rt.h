/* Portable runtime for generated streaming kernels.
 *
 * Plain C99: streams are ring buffers sized at generation time, fixed
 * point is two's complement with round-to-nearest-even on the multiply,
 * and the reduced-precision float helper rounds through the nearest
 * representable value.  Under an HLS flow the stream type maps onto
 * hls::stream and the helpers onto ap_fixed arithmetic.
 */
#ifndef TS_STREAM_RT_H
#define TS_STREAM_RT_H

#include <stdint.h>
#include <math.h>

#define TS_DECLARE_STREAM(T) \
    typedef struct { T *buf; int cap; int head; int len; } ts_stream; \
    static inline void ts_push(ts_stream *s, T v) { \
        s->buf[(s->head + s->len) % s->cap] = v; s->len++; } \
    static inline T ts_pop(ts_stream *s) { \
        T v = s->buf[s->head]; s->head = (s->head + 1) % s->cap; s->len--; \
        return v; }

#define TS_STREAM_LOCAL(name, words) \
    ts_scalar name##_storage[words]; \
    ts_stream name = { name##_storage, (words), 0, 0 }

/* ---- fixed point ---------------------------------------------------- */

static inline int64_t ts_fx_rshift_rne(int64_t v, int s)
{
    int64_t fl = v >> s;
    int64_t rem = v - (fl << s);
    int64_t half = (int64_t)1 << (s - 1);
    if (rem > half || (rem == half && (fl & 1)))
        fl += 1;
    return fl;
}

static inline int32_t ts_fx_mul32(int32_t a, int32_t b, int frac)
{
    return (int32_t)ts_fx_rshift_rne((int64_t)a * (int64_t)b, frac);
}

/* 64x64 -> 128 widening multiply via 32-bit limbs, then RNE shift. */
static inline int64_t ts_fx_mul64(int64_t a, int64_t b, int frac)
{
    int neg = (a < 0) ^ (b < 0);
    uint64_t ua = (uint64_t)(a < 0 ? -a : a);
    uint64_t ub = (uint64_t)(b < 0 ? -b : b);

    uint64_t a_lo = ua & 0xffffffffu, a_hi = ua >> 32;
    uint64_t b_lo = ub & 0xffffffffu, b_hi = ub >> 32;

    uint64_t p0 = a_lo * b_lo;
    uint64_t p1 = a_lo * b_hi;
    uint64_t p2 = a_hi * b_lo;
    uint64_t p3 = a_hi * b_hi;

    uint64_t mid = p1 + (p0 >> 32);
    uint64_t mid2 = p2 + (mid & 0xffffffffu);
    uint64_t lo = (mid2 << 32) | (p0 & 0xffffffffu);
    uint64_t hi = p3 + (mid >> 32) + (mid2 >> 32);

    /* unsigned shift right by frac (1..63) with RNE on the dropped bits */
    uint64_t fl = (hi << (64 - frac)) | (lo >> frac);
    uint64_t rem = lo & (((uint64_t)1 << frac) - 1);
    uint64_t half = (uint64_t)1 << (frac - 1);
    if (rem > half || (rem == half && (fl & 1)))
        fl += 1;
    return neg ? -(int64_t)fl : (int64_t)fl;
}

/* ---- reduced-precision float ---------------------------------------- */

static inline double ts_cf_quant(double x, int exp_bits, int mant_bits)
{
    if (x == 0.0 || isinf(x) || isnan(x))
        return x;
    int e;
    double m = frexp(x, &e);
    double scale = ldexp(1.0, mant_bits + 1);
    m = rint(m * scale) / scale;
    double y = ldexp(m, e);
    frexp(y, &e);
    int bias = (1 << (exp_bits - 1)) - 1;
    if (e - 1 > bias)
        return x > 0 ? INFINITY : -INFINITY;
    if (e - 1 < 1 - bias)
        return 0.0;
    return y;
}

#endif /* TS_STREAM_RT_H */
