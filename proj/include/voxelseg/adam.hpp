#pragma once
#include <vector>

#include "voxelseg/graph.hpp"

namespace voxelseg {

/// Per-parameter Adam moment accumulators plus the shared step counter.
/// Defaults follow the optimizer's standard constants; the learning rate is
/// passed per step.
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    std::vector<Tensor> m; // first moments, one per parameter (empty for non-trainable)
    std::vector<Tensor> v; // second moments

    static AdamState init_for(const NetworkGraph& g);
};

/// One Adam update with bias correction over every trainable parameter whose
/// gradient is populated. Non-trainable parameters are never touched.
/// Throws DataError if a trainable parameter has no gradient buffer.
void adam_step(NetworkGraph& g, AdamState& state, double lr);

} // namespace voxelseg
