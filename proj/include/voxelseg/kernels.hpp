#pragma once
#include <cstddef>
#include <cstdint>
#include <string>

namespace voxelseg::kernels {

/// Geometry of a valid (no padding, stride 1) cross-correlation.
/// Tensors are contiguous (batch, channel, depth, height, width).
/// Kernel extents are small odd numbers (1 or 3 in this project).
struct ConvGeom {
    int batch = 1;
    int cin = 1;
    int cout = 1;
    int in_d = 1, in_h = 1, in_w = 1;
    int kd = 1, kh = 1, kw = 1;

    int out_d() const { return in_d - kd + 1; }
    int out_h() const { return in_h - kh + 1; }
    int out_w() const { return in_w - kw + 1; }
    std::int64_t in_voxels() const { return std::int64_t(in_d) * in_h * in_w; }
    std::int64_t out_voxels() const { return std::int64_t(out_d()) * out_h() * out_w(); }
};

struct AdamHyper {
    double lr = 1e-6;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 1; // step count after increment; used for bias correction
};

// All reductions accumulate in 64-bit; storage stays 32-bit.
using ConvForwardFn = void (*)(const float* in, const float* weights, const float* bias,
                               float* out, const ConvGeom& g);
using ConvGradInputFn = void (*)(const float* gout, const float* weights, float* gin,
                                 const ConvGeom& g);
using ConvGradWeightsFn = void (*)(const float* gout, const float* in, float* gweights,
                                   float* gbias, const ConvGeom& g);
using ReluForwardFn = void (*)(const float* in, float* out, std::size_t n);
using ReluBackwardFn = void (*)(const float* gout, const float* in, float* gin, std::size_t n);
using AdamUpdateFn = void (*)(float* theta, float* m, float* v, const float* grad,
                              std::size_t n, const AdamHyper& h);

struct KernelTable {
    const char* name = "scalar";
    ConvForwardFn conv_forward = nullptr;
    ConvGradInputFn conv_grad_input = nullptr;
    ConvGradWeightsFn conv_grad_weights = nullptr;
    ReluForwardFn relu_forward = nullptr;
    ReluBackwardFn relu_backward = nullptr;
    AdamUpdateFn adam_update = nullptr;
};

/// Scalar reference implementations. Always available; the ground truth the
/// SIMD variants are equivalence-tested against.
const KernelTable& scalar_kernels();

/// AVX2+FMA implementations, or nullptr when the build or the CPU lacks them.
const KernelTable* avx2_kernels();

/// The table selected at startup: AVX2 when the CPU supports it, else scalar.
/// VOXELSEG_KERNEL=scalar|avx2 overrides (avx2 falls back to scalar with a
/// warning if unsupported).
const KernelTable& active_kernels();

/// Force a table by name ("scalar", "avx2", "auto"); returns the chosen name.
/// Throws if the name is unknown.
std::string select_kernels(const std::string& name);

} // namespace voxelseg::kernels
