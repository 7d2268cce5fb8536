#include <cmath>

#include "voxelseg/kernels.hpp"
#include "voxelseg/kernels_ref.hpp"

namespace voxelseg::kernels {

namespace {

void conv_forward_scalar(const float* in, const float* weights, const float* bias, float* out,
                         const ConvGeom& g) {
    conv_forward_ref<float>(in, weights, bias, out, g);
}

void conv_grad_input_scalar(const float* gout, const float* weights, float* gin,
                            const ConvGeom& g) {
    conv_grad_input_ref<float>(gout, weights, gin, g);
}

void conv_grad_weights_scalar(const float* gout, const float* in, float* gweights, float* gbias,
                              const ConvGeom& g) {
    conv_grad_weights_ref<float>(gout, in, gweights, gbias, g);
}

void relu_forward_scalar(const float* in, float* out, std::size_t n) {
    relu_forward_ref<float>(in, out, n);
}

void relu_backward_scalar(const float* gout, const float* in, float* gin, std::size_t n) {
    relu_backward_ref<float>(gout, in, gin, n);
}

void adam_update_scalar(float* theta, float* m, float* v, const float* grad, std::size_t n,
                        const AdamHyper& h) {
    const double bc1 = 1.0 - std::pow(h.beta1, double(h.step));
    const double bc2 = 1.0 - std::pow(h.beta2, double(h.step));
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < std::int64_t(n); ++i) {
        const double gr = double(grad[i]);
        const double mi = h.beta1 * double(m[i]) + (1.0 - h.beta1) * gr;
        const double vi = h.beta2 * double(v[i]) + (1.0 - h.beta2) * gr * gr;
        m[i] = float(mi);
        v[i] = float(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        theta[i] = float(double(theta[i]) - h.lr * mhat / (std::sqrt(vhat) + h.eps));
    }
}

} // namespace

const KernelTable& scalar_kernels() {
    static const KernelTable table{
        "scalar",
        conv_forward_scalar,
        conv_grad_input_scalar,
        conv_grad_weights_scalar,
        relu_forward_scalar,
        relu_backward_scalar,
        adam_update_scalar,
    };
    return table;
}

} // namespace voxelseg::kernels
