#include "voxelseg/graph.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "voxelseg/kernels.hpp"
#include "voxelseg/kernels_ref.hpp"

namespace voxelseg {

using kernels::ConvGeom;
using kernels::PoolGeom;
using kernels::UpGeom;

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

int NetworkGraph::add_parameter(std::string name, Tensor t, bool trainable) {
    for (const auto& p : params_)
        if (p.name == name)
            throw DataError("duplicate parameter name: " + name);
    params_.push_back(Parameter{std::move(name), std::move(t), trainable});
    return int(params_.size()) - 1;
}

int NetworkGraph::add_node(Node n) {
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
}

int NetworkGraph::add_input(int channels, std::string label) {
    Node n;
    n.kind = OpKind::input;
    n.label = std::move(label);
    const int id = add_node(std::move(n));
    input_nodes_.push_back(id);
    input_channels_.push_back(channels);
    return id;
}

int NetworkGraph::add_conv(int src, int weight_param, int bias_param, std::string label) {
    Node n;
    n.kind = OpKind::conv;
    n.in0 = src;
    n.weight = weight_param;
    n.bias = bias_param;
    n.label = std::move(label);
    return add_node(std::move(n));
}

int NetworkGraph::add_relu(int src, std::string label) {
    Node n;
    n.kind = OpKind::relu;
    n.in0 = src;
    n.label = std::move(label);
    return add_node(std::move(n));
}

int NetworkGraph::add_avg_pool(int src, std::array<int, 3> window, std::array<int, 3> stride,
                               std::string label) {
    Node n;
    n.kind = OpKind::avg_pool;
    n.in0 = src;
    n.window = window;
    n.stride = stride;
    n.label = std::move(label);
    return add_node(std::move(n));
}

int NetworkGraph::add_bilinear_up(int src, std::array<bool, 3> axes, std::string label) {
    Node n;
    n.kind = OpKind::bilinear_up;
    n.in0 = src;
    n.up_axes = axes;
    // The fixed interpolation taps live in a non-trainable parameter so the
    // optimizer contract (never updates them) is observable.
    Tensor taps(Shape{3, 1, 1, 1, 1});
    taps.vec() = {0.5f, 1.0f, 0.5f};
    n.taps = add_parameter(label.empty() ? "up" + std::to_string(nodes_.size()) + ".taps"
                                         : label + ".taps",
                           std::move(taps), false);
    n.label = std::move(label);
    return add_node(std::move(n));
}

int NetworkGraph::add_center_crop(int src, std::array<int, 3> spatial, std::string label) {
    Node n;
    n.kind = OpKind::center_crop;
    n.in0 = src;
    n.crop_to = spatial;
    n.label = std::move(label);
    return add_node(std::move(n));
}

int NetworkGraph::add_concat_crop(int a, int b, std::string label) {
    Node n;
    n.kind = OpKind::concat_crop;
    n.in0 = a;
    n.in1 = b;
    n.label = std::move(label);
    return add_node(std::move(n));
}

int NetworkGraph::add_softmax(int src, std::string label) {
    Node n;
    n.kind = OpKind::softmax;
    n.in0 = src;
    n.label = std::move(label);
    return add_node(std::move(n));
}

// ---------------------------------------------------------------------------
// Introspection
// ---------------------------------------------------------------------------

std::int64_t NetworkGraph::trainable_parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_)
        if (p.trainable)
            n += p.tensor.size();
    return n;
}

std::int64_t NetworkGraph::total_parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_)
        n += p.tensor.size();
    return n;
}

int NetworkGraph::count_convs(const std::function<bool(int, int, int)>& pred) const {
    int n = 0;
    for (const auto& node : nodes_)
        if (node.kind == OpKind::conv) {
            const Shape& w = params_[std::size_t(node.weight)].tensor.shape();
            if (pred(w.d, w.h, w.w))
                ++n;
        }
    return n;
}

std::vector<Shape> NetworkGraph::infer_shapes(std::span<const Shape> input_shapes) const {
    if (input_shapes.size() != input_nodes_.size())
        throw DataError("graph expects " + std::to_string(input_nodes_.size()) + " inputs, got " +
                        std::to_string(input_shapes.size()));
    std::vector<Shape> shapes(nodes_.size());
    std::size_t next_input = 0;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const Node& n = nodes_[i];
        switch (n.kind) {
            case OpKind::input: {
                shapes[i] = input_shapes[next_input];
                if (shapes[i].c != input_channels_[next_input])
                    throw DataError("graph input " + std::to_string(next_input) + " expects " +
                                    std::to_string(input_channels_[next_input]) + " channels, got " +
                                    std::to_string(shapes[i].c));
                ++next_input;
                break;
            }
            case OpKind::conv: {
                const Shape& x = shapes[std::size_t(n.in0)];
                const Shape& w = params_[std::size_t(n.weight)].tensor.shape();
                if (x.c != w.c)
                    throw DataError("conv '" + n.label + "': input channels " +
                                    std::to_string(x.c) + " != kernel cin " + std::to_string(w.c));
                if (x.d < w.d || x.h < w.h || x.w < w.w)
                    throw DataError("conv '" + n.label + "': spatial dim smaller than kernel");
                shapes[i] = Shape{x.b, w.b, x.d - w.d + 1, x.h - w.h + 1, x.w - w.w + 1};
                break;
            }
            case OpKind::relu:
            case OpKind::softmax:
                shapes[i] = shapes[std::size_t(n.in0)];
                break;
            case OpKind::avg_pool: {
                const Shape& x = shapes[std::size_t(n.in0)];
                if (x.d < n.window[0] || x.h < n.window[1] || x.w < n.window[2])
                    throw DataError("avg_pool '" + n.label + "': input smaller than window");
                shapes[i] = Shape{x.b, x.c, (x.d - n.window[0]) / n.stride[0] + 1,
                                  (x.h - n.window[1]) / n.stride[1] + 1,
                                  (x.w - n.window[2]) / n.stride[2] + 1};
                break;
            }
            case OpKind::bilinear_up: {
                const Shape& x = shapes[std::size_t(n.in0)];
                shapes[i] = Shape{x.b, x.c, n.up_axes[0] ? 2 * x.d + 1 : x.d,
                                  n.up_axes[1] ? 2 * x.h + 1 : x.h,
                                  n.up_axes[2] ? 2 * x.w + 1 : x.w};
                break;
            }
            case OpKind::center_crop: {
                const Shape& x = shapes[std::size_t(n.in0)];
                const int md = x.d - n.crop_to[0], mh = x.h - n.crop_to[1],
                          mw = x.w - n.crop_to[2];
                if (md < 0 || mh < 0 || mw < 0 || md % 2 || mh % 2 || mw % 2)
                    throw DataError("center_crop '" + n.label + "': bad margin");
                shapes[i] = Shape{x.b, x.c, n.crop_to[0], n.crop_to[1], n.crop_to[2]};
                break;
            }
            case OpKind::concat_crop: {
                const Shape& a = shapes[std::size_t(n.in0)];
                const Shape& b = shapes[std::size_t(n.in1)];
                const int md = a.d - b.d, mh = a.h - b.h, mw = a.w - b.w;
                if (a.b != b.b)
                    throw DataError("concat_crop '" + n.label + "': batch mismatch");
                if (md < 0 || mh < 0 || mw < 0 || md % 2 || mh % 2 || mw % 2)
                    throw DataError("concat_crop '" + n.label + "': margin not even/non-negative");
                shapes[i] = Shape{b.b, a.c + b.c, b.d, b.h, b.w};
                break;
            }
        }
    }
    return shapes;
}

// ---------------------------------------------------------------------------
// Templated execution core
// ---------------------------------------------------------------------------

namespace {

template <class T>
void add_into(std::vector<T>& dst, const std::vector<T>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i)
        dst[i] += src[i];
}

template <class T>
ConvGeom conv_geom_for(const Shape& x, const Shape& w) {
    ConvGeom g;
    g.batch = x.b;
    g.cin = x.c;
    g.cout = w.b;
    g.in_d = x.d;
    g.in_h = x.h;
    g.in_w = x.w;
    g.kd = w.d;
    g.kh = w.h;
    g.kw = w.w;
    return g;
}

template <class T>
PoolGeom pool_geom_for(const Shape& x, const Node& n) {
    PoolGeom g;
    g.batch = x.b;
    g.chan = x.c;
    g.in_d = x.d;
    g.in_h = x.h;
    g.in_w = x.w;
    g.wd = n.window[0];
    g.wh = n.window[1];
    g.ww = n.window[2];
    g.sd = n.stride[0];
    g.sh = n.stride[1];
    g.sw = n.stride[2];
    return g;
}

template <class T>
UpGeom up_geom_for(const Shape& x, const Node& n) {
    UpGeom g;
    g.batch = x.b;
    g.chan = x.c;
    g.in_d = x.d;
    g.in_h = x.h;
    g.in_w = x.w;
    g.up_d = n.up_axes[0];
    g.up_h = n.up_axes[1];
    g.up_w = n.up_axes[2];
    return g;
}

template <class T>
void crop_copy(const TensorT<T>& src, TensorT<T>& dst, int od, int oh, int ow) {
    const Shape& s = src.shape();
    const Shape& t = dst.shape();
    for (int b = 0; b < t.b; ++b)
        for (int c = 0; c < t.c; ++c)
            for (int d = 0; d < t.d; ++d)
                for (int h = 0; h < t.h; ++h) {
                    const T* sp = src.data() +
                                  ((((std::int64_t(b) * s.c + c) * s.d + (d + od)) * s.h +
                                    (h + oh)) *
                                   s.w) +
                                  ow;
                    T* dp = dst.data() +
                            ((((std::int64_t(b) * t.c + c) * t.d + d) * t.h + h) * t.w);
                    std::copy(sp, sp + t.w, dp);
                }
}

/// Adjoint of crop_copy: accumulates dst-shaped gradient into the interior of
/// a src-shaped buffer.
template <class T>
void crop_add_back(const TensorT<T>& gout, std::vector<T>& gin, const Shape& s, int od, int oh,
                   int ow) {
    const Shape& t = gout.shape();
    for (int b = 0; b < t.b; ++b)
        for (int c = 0; c < t.c; ++c)
            for (int d = 0; d < t.d; ++d)
                for (int h = 0; h < t.h; ++h) {
                    T* dp = gin.data() +
                            ((((std::int64_t(b) * s.c + c) * s.d + (d + od)) * s.h + (h + oh)) *
                             s.w) +
                            ow;
                    const T* sp = gout.data() +
                                  ((((std::int64_t(b) * t.c + c) * t.d + d) * t.h + h) * t.w);
                    for (int w = 0; w < t.w; ++w)
                        dp[w] += sp[w];
                }
}

struct FloatKernelOps {
    static void conv_forward(const float* in, const float* w, const float* b, float* out,
                             const ConvGeom& g) {
        kernels::active_kernels().conv_forward(in, w, b, out, g);
    }
    static void conv_grad_input(const float* go, const float* w, float* gi, const ConvGeom& g) {
        kernels::active_kernels().conv_grad_input(go, w, gi, g);
    }
    static void conv_grad_weights(const float* go, const float* in, float* gw, float* gb,
                                  const ConvGeom& g) {
        kernels::active_kernels().conv_grad_weights(go, in, gw, gb, g);
    }
    static void relu_forward(const float* in, float* out, std::size_t n) {
        kernels::active_kernels().relu_forward(in, out, n);
    }
    static void relu_backward(const float* go, const float* in, float* gi, std::size_t n) {
        kernels::active_kernels().relu_backward(go, in, gi, n);
    }
};

struct DoubleKernelOps {
    static void conv_forward(const double* in, const double* w, const double* b, double* out,
                             const ConvGeom& g) {
        kernels::conv_forward_ref<double>(in, w, b, out, g);
    }
    static void conv_grad_input(const double* go, const double* w, double* gi,
                                const ConvGeom& g) {
        kernels::conv_grad_input_ref<double>(go, w, gi, g);
    }
    static void conv_grad_weights(const double* go, const double* in, double* gw, double* gb,
                                  const ConvGeom& g) {
        kernels::conv_grad_weights_ref<double>(go, in, gw, gb, g);
    }
    static void relu_forward(const double* in, double* out, std::size_t n) {
        kernels::relu_forward_ref<double>(in, out, n);
    }
    static void relu_backward(const double* go, const double* in, double* gi, std::size_t n) {
        kernels::relu_backward_ref<double>(go, in, gi, n);
    }
};

template <class T>
using ParamPtrs = std::vector<const TensorT<T>*>;

template <class T, class K>
void exec_forward(const std::vector<Node>& nodes, std::span<const TensorT<T>> inputs,
                  const ParamPtrs<T>& params, std::vector<TensorT<T>>& values) {
    values.assign(nodes.size(), TensorT<T>());
    std::size_t next_input = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const Node& n = nodes[i];
        switch (n.kind) {
            case OpKind::input:
                values[i] = inputs[next_input++];
                break;
            case OpKind::conv: {
                const TensorT<T>& x = values[std::size_t(n.in0)];
                const TensorT<T>& w = *params[std::size_t(n.weight)];
                const TensorT<T>* b = n.bias >= 0 ? params[std::size_t(n.bias)] : nullptr;
                const ConvGeom g = conv_geom_for<T>(x.shape(), w.shape());
                values[i] = TensorT<T>(Shape{g.batch, g.cout, g.out_d(), g.out_h(), g.out_w()});
                K::conv_forward(x.data(), w.data(), b ? b->data() : nullptr, values[i].data(), g);
                break;
            }
            case OpKind::relu: {
                const TensorT<T>& x = values[std::size_t(n.in0)];
                values[i] = TensorT<T>(x.shape());
                K::relu_forward(x.data(), values[i].data(), std::size_t(x.size()));
                break;
            }
            case OpKind::avg_pool: {
                const TensorT<T>& x = values[std::size_t(n.in0)];
                const PoolGeom g = pool_geom_for<T>(x.shape(), n);
                values[i] =
                    TensorT<T>(Shape{g.batch, g.chan, g.out_d(), g.out_h(), g.out_w()});
                kernels::avg_pool_forward_ref<T>(x.data(), values[i].data(), g);
                break;
            }
            case OpKind::bilinear_up: {
                const TensorT<T>& x = values[std::size_t(n.in0)];
                const UpGeom g = up_geom_for<T>(x.shape(), n);
                values[i] =
                    TensorT<T>(Shape{g.batch, g.chan, g.out_d(), g.out_h(), g.out_w()});
                const TensorT<T>& taps = *params[std::size_t(n.taps)];
                kernels::upsample_forward_ref<T>(x.data(), values[i].data(), g, taps.data());
                break;
            }
            case OpKind::center_crop: {
                const TensorT<T>& x = values[std::size_t(n.in0)];
                const Shape& s = x.shape();
                values[i] = TensorT<T>(Shape{s.b, s.c, n.crop_to[0], n.crop_to[1], n.crop_to[2]});
                crop_copy(x, values[i], (s.d - n.crop_to[0]) / 2, (s.h - n.crop_to[1]) / 2,
                          (s.w - n.crop_to[2]) / 2);
                break;
            }
            case OpKind::concat_crop: {
                const TensorT<T>& a = values[std::size_t(n.in0)];
                const TensorT<T>& b = values[std::size_t(n.in1)];
                const Shape& sa = a.shape();
                const Shape& sb = b.shape();
                TensorT<T> ac(Shape{sa.b, sa.c, sb.d, sb.h, sb.w});
                crop_copy(a, ac, (sa.d - sb.d) / 2, (sa.h - sb.h) / 2, (sa.w - sb.w) / 2);
                values[i] = TensorT<T>(Shape{sb.b, sa.c + sb.c, sb.d, sb.h, sb.w});
                const std::int64_t voxels = sb.voxels();
                for (int bi = 0; bi < sb.b; ++bi) {
                    T* dst = values[i].data() + std::int64_t(bi) * (sa.c + sb.c) * voxels;
                    const T* pa = ac.data() + std::int64_t(bi) * sa.c * voxels;
                    const T* pb = b.data() + std::int64_t(bi) * sb.c * voxels;
                    std::copy(pa, pa + sa.c * voxels, dst);
                    std::copy(pb, pb + sb.c * voxels, dst + sa.c * voxels);
                }
                break;
            }
            case OpKind::softmax: {
                const TensorT<T>& x = values[std::size_t(n.in0)];
                values[i] = TensorT<T>(x.shape());
                kernels::softmax_channels_ref<T>(x.data(), values[i].data(), x.shape().b,
                                                 x.shape().c, x.shape().voxels());
                break;
            }
        }
    }
}

template <class T, class K>
void exec_backward(const std::vector<Node>& nodes, const std::vector<TensorT<T>>& values,
                   const ParamPtrs<T>& params, const std::vector<std::vector<T>*>& param_grads,
                   const TensorT<T>& grad_output, int output_node,
                   std::vector<TensorT<T>>& grads) {
    grads.assign(nodes.size(), TensorT<T>());
    for (std::size_t i = 0; i < nodes.size(); ++i)
        grads[i] = TensorT<T>(values[i].shape());
    if (grad_output.shape() != values[std::size_t(output_node)].shape())
        throw DataError("grad_output shape mismatch");
    grads[std::size_t(output_node)] = grad_output;

    for (std::size_t ri = nodes.size(); ri-- > 0;) {
        const Node& n = nodes[ri];
        const TensorT<T>& gout = grads[ri];
        switch (n.kind) {
            case OpKind::input:
                break;
            case OpKind::conv: {
                const TensorT<T>& x = values[std::size_t(n.in0)];
                const TensorT<T>& w = *params[std::size_t(n.weight)];
                const ConvGeom g = conv_geom_for<T>(x.shape(), w.shape());
                TensorT<T> gin(x.shape());
                K::conv_grad_input(gout.data(), w.data(), gin.data(), g);
                add_into(grads[std::size_t(n.in0)].vec(), gin.vec());
                TensorT<T> gw(w.shape());
                TensorT<T> gb;
                if (n.bias >= 0)
                    gb = TensorT<T>(params[std::size_t(n.bias)]->shape());
                K::conv_grad_weights(gout.data(), x.data(), gw.data(),
                                     n.bias >= 0 ? gb.data() : nullptr, g);
                add_into(*param_grads[std::size_t(n.weight)], gw.vec());
                if (n.bias >= 0)
                    add_into(*param_grads[std::size_t(n.bias)], gb.vec());
                break;
            }
            case OpKind::relu: {
                const TensorT<T>& x = values[std::size_t(n.in0)];
                TensorT<T> gin(x.shape());
                K::relu_backward(gout.data(), x.data(), gin.data(), std::size_t(x.size()));
                add_into(grads[std::size_t(n.in0)].vec(), gin.vec());
                break;
            }
            case OpKind::avg_pool: {
                const TensorT<T>& x = values[std::size_t(n.in0)];
                const PoolGeom g = pool_geom_for<T>(x.shape(), n);
                TensorT<T> gin(x.shape());
                kernels::avg_pool_backward_ref<T>(gout.data(), gin.data(), g);
                add_into(grads[std::size_t(n.in0)].vec(), gin.vec());
                break;
            }
            case OpKind::bilinear_up: {
                const TensorT<T>& x = values[std::size_t(n.in0)];
                const UpGeom g = up_geom_for<T>(x.shape(), n);
                TensorT<T> gin(x.shape());
                const TensorT<T>& taps = *params[std::size_t(n.taps)];
                kernels::upsample_backward_ref<T>(gout.data(), gin.data(), g, taps.data());
                add_into(grads[std::size_t(n.in0)].vec(), gin.vec());
                // Taps are non-trainable; their gradient is never formed.
                break;
            }
            case OpKind::center_crop: {
                const Shape& s = values[std::size_t(n.in0)].shape();
                crop_add_back(gout, grads[std::size_t(n.in0)].vec(), s,
                              (s.d - n.crop_to[0]) / 2, (s.h - n.crop_to[1]) / 2,
                              (s.w - n.crop_to[2]) / 2);
                break;
            }
            case OpKind::concat_crop: {
                const Shape& sa = values[std::size_t(n.in0)].shape();
                const Shape& sb = values[std::size_t(n.in1)].shape();
                const std::int64_t voxels = sb.voxels();
                // Split channel-wise, then un-crop the first part.
                TensorT<T> ga(Shape{sa.b, sa.c, sb.d, sb.h, sb.w});
                for (int bi = 0; bi < sb.b; ++bi) {
                    const T* src = gout.data() + std::int64_t(bi) * (sa.c + sb.c) * voxels;
                    std::copy(src, src + sa.c * voxels,
                              ga.data() + std::int64_t(bi) * sa.c * voxels);
                    T* gb = grads[std::size_t(n.in1)].data() + std::int64_t(bi) * sb.c * voxels;
                    const T* srcb = src + sa.c * voxels;
                    for (std::int64_t k = 0; k < sb.c * voxels; ++k)
                        gb[k] += srcb[k];
                }
                crop_add_back(ga, grads[std::size_t(n.in0)].vec(), sa, (sa.d - sb.d) / 2,
                              (sa.h - sb.h) / 2, (sa.w - sb.w) / 2);
                break;
            }
            case OpKind::softmax: {
                const TensorT<T>& p = values[ri];
                TensorT<T> gin(p.shape());
                kernels::softmax_channels_backward_ref<T>(gout.data(), p.data(), gin.data(),
                                                          p.shape().b, p.shape().c,
                                                          p.shape().voxels());
                add_into(grads[std::size_t(n.in0)].vec(), gin.vec());
                break;
            }
        }
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Float execution
// ---------------------------------------------------------------------------

const Tensor& NetworkGraph::forward(std::span<const Tensor> inputs) {
    if (inputs.size() != input_nodes_.size())
        throw DataError("graph expects " + std::to_string(input_nodes_.size()) + " inputs");
    std::vector<Shape> in_shapes;
    in_shapes.reserve(inputs.size());
    for (const auto& t : inputs)
        in_shapes.push_back(t.shape());
    infer_shapes(in_shapes); // validates arithmetic before any work
    ParamPtrs<float> ptensors;
    ptensors.reserve(params_.size());
    for (const auto& p : params_)
        ptensors.push_back(&p.tensor);
    exec_forward<float, FloatKernelOps>(nodes_, inputs, ptensors, values_);
    have_forward_ = true;
    return values_[std::size_t(output_)];
}

void NetworkGraph::backward(const Tensor& grad_output) {
    if (!have_forward_)
        throw DataError("backward called before forward");
    ParamPtrs<float> ptensors;
    ptensors.reserve(params_.size());
    std::vector<std::vector<float>*> pgrads;
    pgrads.reserve(params_.size());
    for (auto& p : params_) {
        ptensors.push_back(&p.tensor);
        pgrads.push_back(&p.tensor.grad());
    }
    exec_backward<float, FloatKernelOps>(nodes_, values_, ptensors, pgrads, grad_output, output_,
                                         grads_);
}

void NetworkGraph::zero_parameter_gradients() {
    for (auto& p : params_) {
        p.tensor.grad();
        p.tensor.zero_grad();
    }
}

const Tensor& NetworkGraph::input_gradient(int input_index) const {
    return grads_[std::size_t(input_nodes_[std::size_t(input_index)])];
}

// ---------------------------------------------------------------------------
// Double mirror
// ---------------------------------------------------------------------------

namespace {
template <class Src, class Dst>
TensorT<Dst> convert_tensor(const TensorT<Src>& t) {
    TensorT<Dst> out(t.shape());
    for (std::int64_t i = 0; i < t.size(); ++i)
        out.data()[i] = Dst(t.data()[i]);
    return out;
}
} // namespace

DoubleExec::DoubleExec(const NetworkGraph& g) : g_(g) {
    dparams_.reserve(g.parameters().size());
    dparam_grads_.reserve(g.parameters().size());
    for (const auto& p : g.parameters()) {
        dparams_.push_back(convert_tensor<float, double>(p.tensor));
        dparam_grads_.push_back(DTensor(p.tensor.shape()));
    }
}

const DTensor& DoubleExec::forward(std::span<const DTensor> inputs) {
    ParamPtrs<double> ptensors;
    ptensors.reserve(dparams_.size());
    for (const auto& p : dparams_)
        ptensors.push_back(&p);
    exec_forward<double, DoubleKernelOps>(g_.nodes(), inputs, ptensors, values_);
    return values_[std::size_t(g_.output_node())];
}

void DoubleExec::backward(const DTensor& grad_output) {
    ParamPtrs<double> ptensors;
    std::vector<std::vector<double>*> pgrads;
    ptensors.reserve(dparams_.size());
    pgrads.reserve(dparams_.size());
    for (std::size_t i = 0; i < dparams_.size(); ++i) {
        dparam_grads_[i] = DTensor(dparams_[i].shape());
        ptensors.push_back(&dparams_[i]);
        pgrads.push_back(&dparam_grads_[i].vec());
    }
    exec_backward<double, DoubleKernelOps>(g_.nodes(), values_, ptensors, pgrads,
                                           grad_output, g_.output_node(), grads_);
}

const DTensor& DoubleExec::output() const {
    return values_[std::size_t(g_.output_node())];
}

const DTensor& DoubleExec::input_gradient(int input_index) const {
    // Input nodes appear in declaration order at the front of the node list.
    int seen = -1;
    for (std::size_t i = 0; i < g_.nodes().size(); ++i) {
        if (g_.nodes()[i].kind == OpKind::input) {
            if (++seen == input_index)
                return grads_[i];
        }
    }
    throw DataError("bad input index");
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr char kCkptMagic[8] = {'V', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
}

void NetworkGraph::save_checkpoint(const std::filesystem::path& file) const {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out)
        throw DataError("cannot write checkpoint: " + file.string());
    out.write(kCkptMagic, 8);
    const std::uint32_t version = 1, count = std::uint32_t(params_.size());
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&count), 4);
    for (const auto& p : params_) {
        const std::uint32_t name_len = std::uint32_t(p.name.size());
        out.write(reinterpret_cast<const char*>(&name_len), 4);
        out.write(p.name.data(), name_len);
        const std::uint8_t trainable = p.trainable ? 1 : 0;
        out.write(reinterpret_cast<const char*>(&trainable), 1);
        const Shape& s = p.tensor.shape();
        const std::int32_t dims[5] = {s.b, s.c, s.d, s.h, s.w};
        out.write(reinterpret_cast<const char*>(dims), sizeof dims);
        out.write(reinterpret_cast<const char*>(p.tensor.data()),
                  std::streamsize(p.tensor.size() * 4));
    }
    if (!out)
        throw DataError("short write on checkpoint: " + file.string());
}

void NetworkGraph::load_checkpoint(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in)
        throw DataError("missing checkpoint: " + file.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw DataError("not a checkpoint file: " + file.string());
    std::uint32_t version = 0, count = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&count), 4);
    if (version != 1)
        throw DataError("unsupported checkpoint version");
    if (count != params_.size())
        throw DataError("checkpoint parameter count mismatch: file has " + std::to_string(count) +
                        ", graph has " + std::to_string(params_.size()));
    for (auto& p : params_) {
        std::uint32_t name_len = 0;
        in.read(reinterpret_cast<char*>(&name_len), 4);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        std::uint8_t trainable = 0;
        in.read(reinterpret_cast<char*>(&trainable), 1);
        std::int32_t dims[5];
        in.read(reinterpret_cast<char*>(dims), sizeof dims);
        if (!in)
            throw DataError("truncated checkpoint: " + file.string());
        if (name != p.name)
            throw DataError("checkpoint parameter order mismatch: expected '" + p.name +
                            "', found '" + name + "'");
        const Shape& s = p.tensor.shape();
        if (dims[0] != s.b || dims[1] != s.c || dims[2] != s.d || dims[3] != s.h ||
            dims[4] != s.w)
            throw DataError("checkpoint shape mismatch for parameter '" + name + "'");
        in.read(reinterpret_cast<char*>(p.tensor.data()),
                std::streamsize(p.tensor.size() * 4));
        if (!in)
            throw DataError("truncated checkpoint payload: " + file.string());
    }
}

} // namespace voxelseg
