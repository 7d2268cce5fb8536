#pragma once
#include "voxelseg/rng.hpp"
#include "voxelseg/tensor.hpp"

namespace voxelseg {

/// Fan-in/fan-out for a kernel tensor shaped (cout, cin, kd, kh, kw):
/// fan_in = cin * kd*kh*kw, fan_out = cout * kd*kh*kw.
struct Fans {
    std::int64_t fan_in = 0;
    std::int64_t fan_out = 0;
};
Fans kernel_fans(const Shape& s);

/// Uniform on +-sqrt(6 / (fan_in + fan_out)).
Tensor init_glorot_uniform(Shape shape, Rng& rng);

/// Random orthogonal rows/columns: the tensor is flattened to
/// (shape.b) x (everything else), a Gaussian matrix is orthogonalized along
/// its smaller dimension (QR with positive-diagonal sign correction), and the
/// result reshaped back. Gram matrix of the smaller side equals identity.
Tensor init_orthogonal(Shape shape, Rng& rng);

} // namespace voxelseg
