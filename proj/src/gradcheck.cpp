#include "voxelseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "voxelseg/ops.hpp"

namespace voxelseg {

namespace {

DTensor to_double(const Tensor& t) {
    DTensor out(t.shape());
    for (std::int64_t i = 0; i < t.size(); ++i)
        out.data()[i] = double(t.data()[i]);
    return out;
}

struct Readout {
    // Either a linear functional with fixed weights, or the dice loss.
    DTensor weights;    // empty when dice_target set
    DTensor dice_target;

    double value(const DTensor& out) const {
        if (dice_target.size()) {
            return ops::generalized_dice_loss_value(out, dice_target);
        }
        double acc = 0.0;
        for (std::int64_t i = 0; i < out.size(); ++i)
            acc += double(out.data()[i]) * weights.data()[i];
        return acc;
    }

    DTensor gradient(const DTensor& out) const {
        if (dice_target.size())
            return ops::generalized_dice_loss_grad(out, dice_target);
        return weights;
    }
};

} // namespace

GradCheckReport grad_check(const NetworkGraph& g, std::span<const Tensor> inputs,
                           const GradCheckOptions& opt) {
    Rng rng(opt.seed);

    std::vector<DTensor> dinputs;
    dinputs.reserve(inputs.size());
    for (const auto& t : inputs)
        dinputs.push_back(to_double(t));

    DoubleExec exec(g);
    const DTensor& out0 = exec.forward(dinputs);

    Readout readout;
    if (opt.dice_target) {
        readout.dice_target = to_double(*opt.dice_target);
    } else {
        readout.weights = DTensor(out0.shape());
        for (std::int64_t i = 0; i < readout.weights.size(); ++i)
            readout.weights.data()[i] = rng.uniform(-1.0, 1.0);
    }

    exec.backward(readout.gradient(out0));

    GradCheckReport report;
    const double h = opt.step;

    auto eval_at = [&](DTensor& storage, std::int64_t idx, double value) {
        const double saved = storage.data()[idx];
        storage.data()[idx] = value;
        const double f = readout.value(exec.forward(dinputs));
        storage.data()[idx] = saved;
        return f;
    };

    auto probe = [&](DTensor& storage, const DTensor& analytic, const std::string& site) {
        const std::int64_t n = storage.size();
        const int probes = int(std::min<std::int64_t>(n, opt.max_coords_per_tensor));
        for (int k = 0; k < probes; ++k) {
            // Sample without caring about collisions; coverage, not exactness.
            const std::int64_t idx =
                n <= opt.max_coords_per_tensor ? k : std::int64_t(rng.uniform_index(std::uint64_t(n)));
            const double x0 = storage.data()[idx];
            const double fp = eval_at(storage, idx, x0 + h);
            const double fm = eval_at(storage, idx, x0 - h);
            const double f0 = eval_at(storage, idx, x0);
            const double fd = (fp - fm) / (2.0 * h);
            const double fd_half =
                (eval_at(storage, idx, x0 + h / 2) - eval_at(storage, idx, x0 - h / 2)) / h;
            if (!std::isfinite(fd) || !std::isfinite(fd_half))
                throw NumericalError("non-finite value during gradient check at " + site);
            // The check is only defined where the fragment is differentiable
            // within the step. A ReLU kink off-center in (x0-h, x0+h) makes
            // the two step sizes disagree; a kink straddling x0 makes the
            // one-sided differences disagree in proportion to its weight.
            // Either signature skips the probe.
            const double consistency = std::abs(fd - fd_half) /
                                       std::max({std::abs(fd), std::abs(fd_half), 1e-8});
            if (consistency > 1e-4) {
                ++report.probes_skipped;
                continue;
            }
            const double fdp = (fp - f0) / h;
            const double fdm = (f0 - fm) / h;
            if (std::abs(fdp - fdm) / std::max({std::abs(fdp), std::abs(fdm), 1e-8}) > 2e-3) {
                ++report.probes_skipped;
                continue;
            }
            ++report.probes_used;
            const double an = analytic.data()[idx];
            const double rel =
                std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_site = site + "[" + std::to_string(idx) + "]";
            }
        }
    };

    if (opt.check_inputs) {
        for (std::size_t i = 0; i < dinputs.size(); ++i) {
            const DTensor analytic = exec.input_gradient(int(i));
            probe(dinputs[i], analytic, "input" + std::to_string(i));
        }
    }
    if (opt.check_params) {
        auto& dparams = exec.param_values();
        std::vector<std::size_t> trainable;
        for (std::size_t pi = 0; pi < dparams.size(); ++pi)
            if (g.parameters()[pi].trainable)
                trainable.push_back(pi);
        // Probe an evenly spaced subset when the graph has more parameter
        // tensors than the budget allows.
        const std::size_t take =
            std::min<std::size_t>(trainable.size(), std::size_t(opt.max_param_tensors));
        for (std::size_t k = 0; k < take; ++k) {
            const std::size_t pi = trainable[k * trainable.size() / take];
            const DTensor analytic = exec.param_gradient(int(pi));
            probe(dparams[pi], analytic, g.parameters()[pi].name);
        }
    }
    return report;
}

} // namespace voxelseg
