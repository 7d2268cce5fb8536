#pragma once
// Tensor-level op surface: valid 3D cross-correlation, pointwise channel
// mixing, average pooling, fixed-kernel bilinear upsampling, crop/concat,
// activations, and the generalized Dice loss. These are the building blocks
// the architecture builders assemble; forward variants here are also used
// directly by preprocessing and tests.

#include <array>

#include "voxelseg/tensor.hpp"

namespace voxelseg::ops {

inline constexpr std::array<float, 3> bilinear_taps{0.5f, 1.0f, 0.5f};

/// Valid (no padding) cross-correlation. weights shaped (cout, cin, kd, kh, kw);
/// bias may be empty. Spatial dims shrink by extent-1 per axis.
Tensor conv3d(const Tensor& x, const Tensor& weights, const Tensor& bias);

/// 3x3x3 valid convolution per the network's layer vocabulary.
inline Tensor conv3d_valid(const Tensor& x, const Tensor& w, const Tensor& b) {
    return conv3d(x, w, b);
}

/// 1x1x1 pointwise channel mixing; spatial dims unchanged.
Tensor conv1x1(const Tensor& x, const Tensor& weights, const Tensor& bias);

/// Average pooling, kernel 3 stride 2 on all three spatial axes.
Tensor avg_pool3_s2(const Tensor& x);

/// General average pooling with per-axis window/stride.
Tensor avg_pool(const Tensor& x, std::array<int, 3> window, std::array<int, 3> stride);

/// Transposed convolution, stride 2, fixed separable taps (0.5, 1, 0.5) on
/// every spatial axis; output per axis is 2L+1 (no trimming), exact linear
/// interpolation of the input grid.
Tensor bilinear_up_x2(const Tensor& x);

/// Same, restricted to a chosen subset of spatial axes.
Tensor bilinear_up(const Tensor& x, std::array<bool, 3> axes);

/// Center-crop a's spatial dims to b's (margins must be even), then
/// concatenate channels as (a_cropped, b).
Tensor concat_crop(const Tensor& a, const Tensor& b);

/// Center-crop to the given spatial dims; margins must be even.
Tensor center_crop(const Tensor& x, std::array<int, 3> spatial);

Tensor relu(const Tensor& x);

/// Per-voxel channel softmax; outputs sum to 1 over channels.
Tensor softmax_channels(const Tensor& x);

struct DiceLossResult {
    double loss = 0.0;
    Tensor grad; // dL/dprobs, same shape as probs
};

/// Generalized Dice loss with inverse-squared-volume class weights
/// w_c = 1/(sum_v t_cv + eps)^2. Voxels are pooled across the whole batch.
/// target must be one-hot; probs per-voxel normalized (checked).
DiceLossResult generalized_dice_loss(const Tensor& probs, const Tensor& target,
                                     double eps = 1e-5);

/// Loss-only double-precision evaluation (shared formula; used by the
/// grad-check mirror and oracles).
double generalized_dice_loss_value(const DTensor& probs, const DTensor& target,
                                   double eps = 1e-5);
DTensor generalized_dice_loss_grad(const DTensor& probs, const DTensor& target,
                                   double eps = 1e-5);

} // namespace voxelseg::ops
