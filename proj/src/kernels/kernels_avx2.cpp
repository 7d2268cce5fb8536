// AVX2+FMA kernel variants. Compiled with -mavx2 -mfma; only reachable after
// the dispatcher has confirmed CPU support. Accumulation stays 64-bit: float
// lanes are widened to double before every FMA, matching the scalar
// reference's accumulator width (term order per output element is identical,
// so scalar/AVX2 agreement is at double rounding level).

#if defined(__x86_64__) || defined(_M_X64) || defined(__i386__)
#define VOXELSEG_X86 1
#else
#define VOXELSEG_X86 0
#endif

#if VOXELSEG_X86

#include <immintrin.h>

#include <cmath>
#include <vector>

#include "voxelseg/kernels.hpp"

namespace voxelseg::kernels {

namespace {

inline void widen8(const float* p, __m256d& lo, __m256d& hi) {
    const __m256 v = _mm256_loadu_ps(p);
    lo = _mm256_cvtps_pd(_mm256_castps256_ps128(v));
    hi = _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1));
}

inline void store8_from_pd(float* p, __m256d lo, __m256d hi) {
    const __m128 flo = _mm256_cvtpd_ps(lo);
    const __m128 fhi = _mm256_cvtpd_ps(hi);
    _mm256_storeu_ps(p, _mm256_set_m128(fhi, flo));
}

void conv_forward_avx2(const float* in, const float* weights, const float* bias, float* out,
                       const ConvGeom& g) {
    const int od = g.out_d(), oh = g.out_h(), ow = g.out_w();
    const std::int64_t in_plane = std::int64_t(g.in_h) * g.in_w;
    const std::int64_t in_chan = std::int64_t(g.in_d) * in_plane;
    const std::int64_t out_chan = std::int64_t(od) * oh * ow;
    const std::int64_t w_chan = std::int64_t(g.kd) * g.kh * g.kw;

#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < g.batch; ++b) {
        for (int co = 0; co < g.cout; ++co) {
            const float* in_b = in + std::int64_t(b) * g.cin * in_chan;
            const float* w_co = weights + std::int64_t(co) * g.cin * w_chan;
            float* out_co = out + (std::int64_t(b) * g.cout + co) * out_chan;
            const double b0 = bias ? double(bias[co]) : 0.0;
            for (int z = 0; z < od; ++z)
                for (int y = 0; y < oh; ++y) {
                    float* out_row = out_co + (std::int64_t(z) * oh + y) * ow;
                    int x = 0;
                    for (; x + 8 <= ow; x += 8) {
                        __m256d acc_lo = _mm256_set1_pd(b0);
                        __m256d acc_hi = acc_lo;
                        for (int ci = 0; ci < g.cin; ++ci) {
                            const float* in_c = in_b + ci * in_chan;
                            const float* w_c = w_co + ci * w_chan;
                            for (int dz = 0; dz < g.kd; ++dz)
                                for (int dy = 0; dy < g.kh; ++dy) {
                                    const float* row =
                                        in_c +
                                        (std::int64_t(z + dz) * g.in_h + (y + dy)) * g.in_w + x;
                                    const float* wr = w_c + (dz * g.kh + dy) * g.kw;
                                    for (int dx = 0; dx < g.kw; ++dx) {
                                        __m256d lo, hi;
                                        widen8(row + dx, lo, hi);
                                        const __m256d wv = _mm256_set1_pd(double(wr[dx]));
                                        acc_lo = _mm256_fmadd_pd(lo, wv, acc_lo);
                                        acc_hi = _mm256_fmadd_pd(hi, wv, acc_hi);
                                    }
                                }
                        }
                        store8_from_pd(out_row + x, acc_lo, acc_hi);
                    }
                    for (; x < ow; ++x) {
                        double acc = b0;
                        for (int ci = 0; ci < g.cin; ++ci) {
                            const float* in_c = in_b + ci * in_chan;
                            const float* w_c = w_co + ci * w_chan;
                            for (int dz = 0; dz < g.kd; ++dz)
                                for (int dy = 0; dy < g.kh; ++dy) {
                                    const float* row =
                                        in_c +
                                        (std::int64_t(z + dz) * g.in_h + (y + dy)) * g.in_w + x;
                                    const float* wr = w_c + (dz * g.kh + dy) * g.kw;
                                    for (int dx = 0; dx < g.kw; ++dx)
                                        acc = std::fma(double(row[dx]), double(wr[dx]), acc);
                                }
                        }
                        out_row[x] = float(acc);
                    }
                }
        }
    }
}

void conv_grad_input_avx2(const float* gout, const float* weights, float* gin,
                          const ConvGeom& g) {
    const int od = g.out_d(), oh = g.out_h(), ow = g.out_w();
    const std::int64_t in_plane = std::int64_t(g.in_h) * g.in_w;
    const std::int64_t in_chan = std::int64_t(g.in_d) * in_plane;
    const std::int64_t out_chan = std::int64_t(od) * oh * ow;
    const std::int64_t w_chan = std::int64_t(g.kd) * g.kh * g.kw;

#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < g.batch; ++b) {
        for (int ci = 0; ci < g.cin; ++ci) {
            std::vector<double> scratch(std::size_t(in_chan), 0.0);
            for (int co = 0; co < g.cout; ++co) {
                const float* go = gout + (std::int64_t(b) * g.cout + co) * out_chan;
                const float* w_c = weights + (std::int64_t(co) * g.cin + ci) * w_chan;
                for (int dz = 0; dz < g.kd; ++dz)
                    for (int dy = 0; dy < g.kh; ++dy)
                        for (int dx = 0; dx < g.kw; ++dx) {
                            const double wv = double(w_c[(dz * g.kh + dy) * g.kw + dx]);
                            if (wv == 0.0) continue;
                            const __m256d wvec = _mm256_set1_pd(wv);
                            for (int z = 0; z < od; ++z)
                                for (int y = 0; y < oh; ++y) {
                                    const float* go_row = go + (std::int64_t(z) * oh + y) * ow;
                                    double* dst = scratch.data() +
                                                  (std::int64_t(z + dz) * g.in_h + (y + dy)) *
                                                      g.in_w +
                                                  dx;
                                    int x = 0;
                                    for (; x + 4 <= ow; x += 4) {
                                        const __m256d gv = _mm256_cvtps_pd(
                                            _mm_loadu_ps(go_row + x));
                                        const __m256d cur = _mm256_loadu_pd(dst + x);
                                        _mm256_storeu_pd(dst + x,
                                                         _mm256_fmadd_pd(gv, wvec, cur));
                                    }
                                    for (; x < ow; ++x)
                                        dst[x] = std::fma(double(go_row[x]), wv, dst[x]);
                                }
                        }
            }
            float* gptr = gin + (std::int64_t(b) * g.cin + ci) * in_chan;
            for (std::int64_t i = 0; i < in_chan; ++i)
                gptr[i] = float(scratch[std::size_t(i)]);
        }
    }
}

void conv_grad_weights_avx2(const float* gout, const float* in, float* gweights, float* gbias,
                            const ConvGeom& g) {
    const int od = g.out_d(), oh = g.out_h(), ow = g.out_w();
    const std::int64_t in_plane = std::int64_t(g.in_h) * g.in_w;
    const std::int64_t in_chan = std::int64_t(g.in_d) * in_plane;
    const std::int64_t out_chan = std::int64_t(od) * oh * ow;
    const std::int64_t w_chan = std::int64_t(g.kd) * g.kh * g.kw;

#pragma omp parallel for schedule(static)
    for (int co = 0; co < g.cout; ++co) {
        for (int ci = 0; ci < g.cin; ++ci)
            for (int dz = 0; dz < g.kd; ++dz)
                for (int dy = 0; dy < g.kh; ++dy)
                    for (int dx = 0; dx < g.kw; ++dx) {
                        __m256d acc = _mm256_setzero_pd();
                        double tail = 0.0;
                        for (int b = 0; b < g.batch; ++b) {
                            const float* go = gout + (std::int64_t(b) * g.cout + co) * out_chan;
                            const float* in_c = in + (std::int64_t(b) * g.cin + ci) * in_chan;
                            for (int z = 0; z < od; ++z)
                                for (int y = 0; y < oh; ++y) {
                                    const float* go_row = go + (std::int64_t(z) * oh + y) * ow;
                                    const float* in_row =
                                        in_c +
                                        (std::int64_t(z + dz) * g.in_h + (y + dy)) * g.in_w + dx;
                                    int x = 0;
                                    for (; x + 4 <= ow; x += 4) {
                                        const __m256d gv =
                                            _mm256_cvtps_pd(_mm_loadu_ps(go_row + x));
                                        const __m256d iv =
                                            _mm256_cvtps_pd(_mm_loadu_ps(in_row + x));
                                        acc = _mm256_fmadd_pd(gv, iv, acc);
                                    }
                                    for (; x < ow; ++x)
                                        tail = std::fma(double(go_row[x]),
                                                        double(in_row[x]), tail);
                                }
                        }
                        alignas(32) double lanes[4];
                        _mm256_store_pd(lanes, acc);
                        gweights[(std::int64_t(co) * g.cin + ci) * w_chan +
                                 (dz * g.kh + dy) * g.kw + dx] =
                            float(lanes[0] + lanes[1] + lanes[2] + lanes[3] + tail);
                    }
        if (gbias) {
            __m256d acc = _mm256_setzero_pd();
            double tail = 0.0;
            for (int b = 0; b < g.batch; ++b) {
                const float* go = gout + (std::int64_t(b) * g.cout + co) * out_chan;
                std::int64_t i = 0;
                for (; i + 4 <= out_chan; i += 4)
                    acc = _mm256_add_pd(acc, _mm256_cvtps_pd(_mm_loadu_ps(go + i)));
                for (; i < out_chan; ++i)
                    tail += double(go[i]);
            }
            alignas(32) double lanes[4];
            _mm256_store_pd(lanes, acc);
            gbias[co] = float(lanes[0] + lanes[1] + lanes[2] + lanes[3] + tail);
        }
    }
}

void relu_forward_avx2(const float* in, float* out, std::size_t n) {
    const __m256 zero = _mm256_setzero_ps();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < std::int64_t(n) - 7; i += 8)
        _mm256_storeu_ps(out + i, _mm256_max_ps(_mm256_loadu_ps(in + i), zero));
    for (std::size_t i = n - n % 8; i < n; ++i)
        out[i] = in[i] > 0.0f ? in[i] : 0.0f;
}

void relu_backward_avx2(const float* gout, const float* in, float* gin, std::size_t n) {
    const __m256 zero = _mm256_setzero_ps();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < std::int64_t(n) - 7; i += 8) {
        const __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(in + i), zero, _CMP_GT_OQ);
        _mm256_storeu_ps(gin + i, _mm256_and_ps(_mm256_loadu_ps(gout + i), mask));
    }
    for (std::size_t i = n - n % 8; i < n; ++i)
        gin[i] = in[i] > 0.0f ? gout[i] : 0.0f;
}

void adam_update_avx2(float* theta, float* m, float* v, const float* grad, std::size_t n,
                      const AdamHyper& h) {
    const double bc1 = 1.0 - std::pow(h.beta1, double(h.step));
    const double bc2 = 1.0 - std::pow(h.beta2, double(h.step));
    const __m256d b1 = _mm256_set1_pd(h.beta1);
    const __m256d b2 = _mm256_set1_pd(h.beta2);
    const __m256d ob1 = _mm256_set1_pd(1.0 - h.beta1);
    const __m256d ob2 = _mm256_set1_pd(1.0 - h.beta2);
    const __m256d ibc1 = _mm256_set1_pd(1.0 / bc1);
    const __m256d ibc2 = _mm256_set1_pd(1.0 / bc2);
    const __m256d lr = _mm256_set1_pd(h.lr);
    const __m256d eps = _mm256_set1_pd(h.eps);

#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < std::int64_t(n) - 3; i += 4) {
        const __m256d gr = _mm256_cvtps_pd(_mm_loadu_ps(grad + i));
        const __m256d mi =
            _mm256_add_pd(_mm256_mul_pd(b1, _mm256_cvtps_pd(_mm_loadu_ps(m + i))),
                          _mm256_mul_pd(ob1, gr));
        const __m256d vi =
            _mm256_add_pd(_mm256_mul_pd(b2, _mm256_cvtps_pd(_mm_loadu_ps(v + i))),
                          _mm256_mul_pd(ob2, _mm256_mul_pd(gr, gr)));
        _mm_storeu_ps(m + i, _mm256_cvtpd_ps(mi));
        _mm_storeu_ps(v + i, _mm256_cvtpd_ps(vi));
        const __m256d mhat = _mm256_mul_pd(mi, ibc1);
        const __m256d vhat = _mm256_mul_pd(vi, ibc2);
        const __m256d denom = _mm256_add_pd(_mm256_sqrt_pd(vhat), eps);
        const __m256d step = _mm256_div_pd(_mm256_mul_pd(lr, mhat), denom);
        const __m256d th =
            _mm256_sub_pd(_mm256_cvtps_pd(_mm_loadu_ps(theta + i)), step);
        _mm_storeu_ps(theta + i, _mm256_cvtpd_ps(th));
    }
    for (std::size_t i = n - n % 4; i < n; ++i) {
        const double gr = double(grad[i]);
        const double mi = h.beta1 * double(m[i]) + (1.0 - h.beta1) * gr;
        const double vi = h.beta2 * double(v[i]) + (1.0 - h.beta2) * gr * gr;
        m[i] = float(mi);
        v[i] = float(vi);
        theta[i] = float(double(theta[i]) - h.lr * (mi / bc1) / (std::sqrt(vi / bc2) + h.eps));
    }
}

} // namespace

const KernelTable* avx2_kernels_impl() {
    static const KernelTable table{
        "avx2",
        conv_forward_avx2,
        conv_grad_input_avx2,
        conv_grad_weights_avx2,
        relu_forward_avx2,
        relu_backward_avx2,
        adam_update_avx2,
    };
    return &table;
}

} // namespace voxelseg::kernels

#else // !VOXELSEG_X86

namespace voxelseg::kernels {
const KernelTable* avx2_kernels_impl() { return nullptr; }
} // namespace voxelseg::kernels

#endif
