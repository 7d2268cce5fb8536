#pragma once
#include <span>
#include <vector>

#include "voxelseg/graph.hpp"
#include "voxelseg/rng.hpp"

namespace voxelseg {

/// Finite-difference gradient verification. The fragment's scalar readout is
/// either a fixed random linear functional of the output (default) or the
/// generalized Dice loss against a provided one-hot target. Analytic
/// gradients come from the graph's double-precision mirror; differences are
/// central with step 1e-3 and 64-bit accumulation throughout.
struct GradCheckOptions {
    double step = 1e-3;
    int max_coords_per_tensor = 24; // sampled input/parameter coordinates
    int max_param_tensors = 1 << 20; // cap on how many parameter tensors to probe
    bool check_params = true;
    bool check_inputs = true;
    std::uint64_t seed = 17;
    const Tensor* dice_target = nullptr; // when set, readout = GDL vs this target
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_site;
    int probes_used = 0;
    int probes_skipped = 0; // coordinates rejected as non-differentiable in-step
};

/// Returns the max relative error over sampled coordinates; relative error is
/// |analytic - fd| / max(|analytic|, |fd|, 1e-8).
GradCheckReport grad_check(const NetworkGraph& g, std::span<const Tensor> inputs,
                           const GradCheckOptions& opt = {});

} // namespace voxelseg
