#pragma once
// Reference op bodies, templated on the storage scalar. The float
// instantiations back the scalar kernel table; the double instantiations back
// the grad-check mirror so finite differences see the same formulas without
// float32 storage noise. Accumulation is always 64-bit.

#include <cmath>
#include <cstdint>
#include <vector>

#include "voxelseg/kernels.hpp"

namespace voxelseg::kernels {

template <class T>
void conv_forward_ref(const T* in, const T* weights, const T* bias, T* out, const ConvGeom& g) {
    const int od = g.out_d(), oh = g.out_h(), ow = g.out_w();
    const std::int64_t in_plane = std::int64_t(g.in_h) * g.in_w;
    const std::int64_t in_chan = std::int64_t(g.in_d) * in_plane;
    const std::int64_t out_chan = std::int64_t(od) * oh * ow;
    const std::int64_t w_chan = std::int64_t(g.kd) * g.kh * g.kw;

#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < g.batch; ++b) {
        for (int co = 0; co < g.cout; ++co) {
            const T* in_b = in + std::int64_t(b) * g.cin * in_chan;
            const T* w_co = weights + std::int64_t(co) * g.cin * w_chan;
            T* out_p = out + (std::int64_t(b) * g.cout + co) * out_chan;
            for (int z = 0; z < od; ++z)
                for (int y = 0; y < oh; ++y)
                    for (int x = 0; x < ow; ++x) {
                        double acc = bias ? double(bias[co]) : 0.0;
                        for (int ci = 0; ci < g.cin; ++ci) {
                            const T* in_c = in_b + ci * in_chan;
                            const T* w_c = w_co + ci * w_chan;
                            for (int dz = 0; dz < g.kd; ++dz)
                                for (int dy = 0; dy < g.kh; ++dy) {
                                    const T* row =
                                        in_c + (std::int64_t(z + dz) * g.in_h + (y + dy)) * g.in_w +
                                        x;
                                    const T* wr = w_c + (dz * g.kh + dy) * g.kw;
                                    for (int dx = 0; dx < g.kw; ++dx)
                                        acc += double(row[dx]) * double(wr[dx]);
                                }
                        }
                        *out_p++ = T(acc);
                    }
        }
    }
}

template <class T>
void conv_grad_input_ref(const T* gout, const T* weights, T* gin, const ConvGeom& g) {
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
                const T* go = gout + (std::int64_t(b) * g.cout + co) * out_chan;
                const T* w_c = weights + (std::int64_t(co) * g.cin + ci) * w_chan;
                for (int dz = 0; dz < g.kd; ++dz)
                    for (int dy = 0; dy < g.kh; ++dy)
                        for (int dx = 0; dx < g.kw; ++dx) {
                            const double wv = double(w_c[(dz * g.kh + dy) * g.kw + dx]);
                            if (wv == 0.0) continue;
                            for (int z = 0; z < od; ++z)
                                for (int y = 0; y < oh; ++y) {
                                    const T* go_row = go + (std::int64_t(z) * oh + y) * ow;
                                    double* dst = scratch.data() +
                                                  (std::int64_t(z + dz) * g.in_h + (y + dy)) *
                                                      g.in_w +
                                                  dx;
                                    for (int x = 0; x < ow; ++x)
                                        dst[x] += double(go_row[x]) * wv;
                                }
                        }
            }
            T* gptr = gin + (std::int64_t(b) * g.cin + ci) * in_chan;
            for (std::int64_t i = 0; i < in_chan; ++i)
                gptr[i] = T(scratch[std::size_t(i)]);
        }
    }
}

template <class T>
void conv_grad_weights_ref(const T* gout, const T* in, T* gweights, T* gbias,
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
                        double acc = 0.0;
                        for (int b = 0; b < g.batch; ++b) {
                            const T* go = gout + (std::int64_t(b) * g.cout + co) * out_chan;
                            const T* in_c = in + (std::int64_t(b) * g.cin + ci) * in_chan;
                            for (int z = 0; z < od; ++z)
                                for (int y = 0; y < oh; ++y) {
                                    const T* go_row = go + (std::int64_t(z) * oh + y) * ow;
                                    const T* in_row =
                                        in_c + (std::int64_t(z + dz) * g.in_h + (y + dy)) * g.in_w +
                                        dx;
                                    for (int x = 0; x < ow; ++x)
                                        acc += double(go_row[x]) * double(in_row[x]);
                                }
                        }
                        gweights[(std::int64_t(co) * g.cin + ci) * w_chan +
                                 (dz * g.kh + dy) * g.kw + dx] = T(acc);
                    }
        if (gbias) {
            double acc = 0.0;
            for (int b = 0; b < g.batch; ++b) {
                const T* go = gout + (std::int64_t(b) * g.cout + co) * out_chan;
                for (std::int64_t i = 0; i < out_chan; ++i)
                    acc += double(go[i]);
            }
            gbias[co] = T(acc);
        }
    }
}

// ---------------------------------------------------------------------------
// Average pooling, per-axis window/stride
// ---------------------------------------------------------------------------

struct PoolGeom {
    int batch = 1, chan = 1;
    int in_d = 1, in_h = 1, in_w = 1;
    int wd = 3, wh = 3, ww = 3;
    int sd = 2, sh = 2, sw = 2;

    int out_d() const { return (in_d - wd) / sd + 1; }
    int out_h() const { return (in_h - wh) / sh + 1; }
    int out_w() const { return (in_w - ww) / sw + 1; }
};

template <class T>
void avg_pool_forward_ref(const T* in, T* out, const PoolGeom& g) {
    const int od = g.out_d(), oh = g.out_h(), ow = g.out_w();
    const double inv = 1.0 / (double(g.wd) * g.wh * g.ww);
    const std::int64_t in_chan = std::int64_t(g.in_d) * g.in_h * g.in_w;
    const std::int64_t out_chan = std::int64_t(od) * oh * ow;

#pragma omp parallel for schedule(static)
    for (std::int64_t bc = 0; bc < std::int64_t(g.batch) * g.chan; ++bc) {
        const T* in_c = in + bc * in_chan;
        T* out_c = out + bc * out_chan;
        for (int z = 0; z < od; ++z)
            for (int y = 0; y < oh; ++y)
                for (int x = 0; x < ow; ++x) {
                    double acc = 0.0;
                    for (int dz = 0; dz < g.wd; ++dz)
                        for (int dy = 0; dy < g.wh; ++dy) {
                            const T* row = in_c +
                                           (std::int64_t(z * g.sd + dz) * g.in_h +
                                            (y * g.sh + dy)) *
                                               g.in_w +
                                           x * g.sw;
                            for (int dx = 0; dx < g.ww; ++dx)
                                acc += double(row[dx]);
                        }
                    out_c[(std::int64_t(z) * oh + y) * ow + x] = T(acc * inv);
                }
    }
}

template <class T>
void avg_pool_backward_ref(const T* gout, T* gin, const PoolGeom& g) {
    const int od = g.out_d(), oh = g.out_h(), ow = g.out_w();
    const double inv = 1.0 / (double(g.wd) * g.wh * g.ww);
    const std::int64_t in_chan = std::int64_t(g.in_d) * g.in_h * g.in_w;
    const std::int64_t out_chan = std::int64_t(od) * oh * ow;

#pragma omp parallel for schedule(static)
    for (std::int64_t bc = 0; bc < std::int64_t(g.batch) * g.chan; ++bc) {
        std::vector<double> scratch(std::size_t(in_chan), 0.0);
        const T* go_c = gout + bc * out_chan;
        for (int z = 0; z < od; ++z)
            for (int y = 0; y < oh; ++y)
                for (int x = 0; x < ow; ++x) {
                    const double gv = double(go_c[(std::int64_t(z) * oh + y) * ow + x]) * inv;
                    for (int dz = 0; dz < g.wd; ++dz)
                        for (int dy = 0; dy < g.wh; ++dy) {
                            double* row = scratch.data() +
                                          (std::int64_t(z * g.sd + dz) * g.in_h +
                                           (y * g.sh + dy)) *
                                              g.in_w +
                                          x * g.sw;
                            for (int dx = 0; dx < g.ww; ++dx)
                                row[dx] += gv;
                        }
                }
        T* gin_c = gin + bc * in_chan;
        for (std::int64_t i = 0; i < in_chan; ++i)
            gin_c[i] = T(scratch[std::size_t(i)]);
    }
}

// ---------------------------------------------------------------------------
// Fixed-kernel transposed-convolution upsampling (stride 2, 3-tap kernel)
// Output length per upsampled axis is 2L+1, with no trimming: sample i of the
// input lands on output index 2i+1.
// ---------------------------------------------------------------------------

struct UpGeom {
    int batch = 1, chan = 1;
    int in_d = 1, in_h = 1, in_w = 1;
    bool up_d = true, up_h = true, up_w = true;

    int out_d() const { return up_d ? 2 * in_d + 1 : in_d; }
    int out_h() const { return up_h ? 2 * in_h + 1 : in_h; }
    int out_w() const { return up_w ? 2 * in_w + 1 : in_w; }
};

namespace detail {
// Contributions to output index k from input index i with tap j: k = 2i + j.
// For a non-upsampled axis the identity map contributes tap weight 1.
template <class T>
inline int up_taps(int k, int in_len, bool up, const T* taps, int idx[2], double wgt[2]) {
    if (!up) {
        idx[0] = k;
        wgt[0] = 1.0;
        return 1;
    }
    int n = 0;
    for (int j = (k % 2 == 0) ? 0 : 1; j <= 2; j += 2) {
        const int i = (k - j) / 2;
        if ((k - j) % 2 == 0 && i >= 0 && i < in_len) {
            idx[n] = i;
            wgt[n] = double(taps[j]);
            ++n;
        }
    }
    return n;
}
} // namespace detail

template <class T>
void upsample_forward_ref(const T* in, T* out, const UpGeom& g, const T* taps) {
    const int od = g.out_d(), oh = g.out_h(), ow = g.out_w();
    const std::int64_t in_chan = std::int64_t(g.in_d) * g.in_h * g.in_w;
    const std::int64_t out_chan = std::int64_t(od) * oh * ow;

#pragma omp parallel for schedule(static)
    for (std::int64_t bc = 0; bc < std::int64_t(g.batch) * g.chan; ++bc) {
        const T* in_c = in + bc * in_chan;
        T* out_c = out + bc * out_chan;
        for (int z = 0; z < od; ++z) {
            int zi[2];
            double zw[2];
            const int zn = detail::up_taps(z, g.in_d, g.up_d, taps, zi, zw);
            for (int y = 0; y < oh; ++y) {
                int yi[2];
                double yw[2];
                const int yn = detail::up_taps(y, g.in_h, g.up_h, taps, yi, yw);
                for (int x = 0; x < ow; ++x) {
                    int xi[2];
                    double xw[2];
                    const int xn = detail::up_taps(x, g.in_w, g.up_w, taps, xi, xw);
                    double acc = 0.0;
                    for (int a = 0; a < zn; ++a)
                        for (int b = 0; b < yn; ++b)
                            for (int c = 0; c < xn; ++c)
                                acc += zw[a] * yw[b] * xw[c] *
                                       double(in_c[(std::int64_t(zi[a]) * g.in_h + yi[b]) *
                                                       g.in_w +
                                                   xi[c]]);
                    out_c[(std::int64_t(z) * oh + y) * ow + x] = T(acc);
                }
            }
        }
    }
}

template <class T>
void upsample_backward_ref(const T* gout, T* gin, const UpGeom& g, const T* taps) {
    const int od = g.out_d(), oh = g.out_h(), ow = g.out_w();
    const std::int64_t in_chan = std::int64_t(g.in_d) * g.in_h * g.in_w;
    const std::int64_t out_chan = std::int64_t(od) * oh * ow;

#pragma omp parallel for schedule(static)
    for (std::int64_t bc = 0; bc < std::int64_t(g.batch) * g.chan; ++bc) {
        const T* go_c = gout + bc * out_chan;
        std::vector<double> scratch(std::size_t(in_chan), 0.0);
        for (int z = 0; z < od; ++z) {
            int zi[2];
            double zw[2];
            const int zn = detail::up_taps(z, g.in_d, g.up_d, taps, zi, zw);
            for (int y = 0; y < oh; ++y) {
                int yi[2];
                double yw[2];
                const int yn = detail::up_taps(y, g.in_h, g.up_h, taps, yi, yw);
                for (int x = 0; x < ow; ++x) {
                    int xi[2];
                    double xw[2];
                    const int xn = detail::up_taps(x, g.in_w, g.up_w, taps, xi, xw);
                    const double gv = double(go_c[(std::int64_t(z) * oh + y) * ow + x]);
                    for (int a = 0; a < zn; ++a)
                        for (int b = 0; b < yn; ++b)
                            for (int c = 0; c < xn; ++c)
                                scratch[std::size_t(
                                    (std::int64_t(zi[a]) * g.in_h + yi[b]) * g.in_w + xi[c])] +=
                                    zw[a] * yw[b] * xw[c] * gv;
                }
            }
        }
        T* gin_c = gin + bc * in_chan;
        for (std::int64_t i = 0; i < in_chan; ++i)
            gin_c[i] = T(scratch[std::size_t(i)]);
    }
}

// ---------------------------------------------------------------------------
// Per-voxel channel softmax
// ---------------------------------------------------------------------------

template <class T>
void softmax_channels_ref(const T* in, T* out, int batch, int chan, std::int64_t voxels) {
#pragma omp parallel for schedule(static)
    for (std::int64_t bv = 0; bv < std::int64_t(batch) * voxels; ++bv) {
        const std::int64_t b = bv / voxels;
        const std::int64_t v = bv % voxels;
        const T* in_b = in + b * chan * voxels;
        T* out_b = out + b * chan * voxels;
        double mx = -1e300;
        for (int c = 0; c < chan; ++c)
            mx = std::max(mx, double(in_b[c * voxels + v]));
        double sum = 0.0;
        for (int c = 0; c < chan; ++c)
            sum += std::exp(double(in_b[c * voxels + v]) - mx);
        for (int c = 0; c < chan; ++c)
            out_b[c * voxels + v] = T(std::exp(double(in_b[c * voxels + v]) - mx) / sum);
    }
}

/// gin = p .* (gout - sum_c gout_c p_c), computed per voxel.
template <class T>
void softmax_channels_backward_ref(const T* gout, const T* probs, T* gin, int batch, int chan,
                                   std::int64_t voxels) {
#pragma omp parallel for schedule(static)
    for (std::int64_t bv = 0; bv < std::int64_t(batch) * voxels; ++bv) {
        const std::int64_t b = bv / voxels;
        const std::int64_t v = bv % voxels;
        const T* go_b = gout + b * chan * voxels;
        const T* p_b = probs + b * chan * voxels;
        T* gi_b = gin + b * chan * voxels;
        double dot = 0.0;
        for (int c = 0; c < chan; ++c)
            dot += double(go_b[c * voxels + v]) * double(p_b[c * voxels + v]);
        for (int c = 0; c < chan; ++c)
            gi_b[c * voxels + v] =
                T(double(p_b[c * voxels + v]) * (double(go_b[c * voxels + v]) - dot));
    }
}

template <class T>
void relu_forward_ref(const T* in, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        out[i] = in[i] > T(0) ? in[i] : T(0);
}

template <class T>
void relu_backward_ref(const T* gout, const T* in, T* gin, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        gin[i] = in[i] > T(0) ? gout[i] : T(0);
}

} // namespace voxelseg::kernels
