#include "voxelseg/adam.hpp"

#include "voxelseg/kernels.hpp"

namespace voxelseg {

AdamState AdamState::init_for(const NetworkGraph& g) {
    AdamState s;
    s.m.reserve(g.parameters().size());
    s.v.reserve(g.parameters().size());
    for (const auto& p : g.parameters()) {
        if (p.trainable) {
            s.m.emplace_back(p.tensor.shape());
            s.v.emplace_back(p.tensor.shape());
        } else {
            s.m.emplace_back();
            s.v.emplace_back();
        }
    }
    return s;
}

void adam_step(NetworkGraph& g, AdamState& state, double lr) {
    if (state.m.size() != g.parameters().size())
        throw DataError("Adam state does not match graph parameters");
    ++state.step;
    kernels::AdamHyper h;
    h.lr = lr;
    h.beta1 = state.beta1;
    h.beta2 = state.beta2;
    h.eps = state.eps;
    h.step = state.step;
    auto& params = g.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params[i];
        if (!p.trainable)
            continue;
        if (!p.tensor.has_grad())
            throw DataError("missing gradient for trainable parameter '" + p.name + "'");
        kernels::active_kernels().adam_update(p.tensor.data(), state.m[i].data(),
                                              state.v[i].data(), p.tensor.grad().data(),
                                              std::size_t(p.tensor.size()), h);
    }
}

} // namespace voxelseg
