#include "voxelseg/ops.hpp"

#include <algorithm>
#include <cmath>

#include "voxelseg/kernels.hpp"
#include "voxelseg/kernels_ref.hpp"

namespace voxelseg::ops {

using kernels::ConvGeom;
using kernels::PoolGeom;
using kernels::UpGeom;

namespace {

ConvGeom conv_geom(const Shape& x, const Shape& w) {
    if (x.c != w.c)
        throw DataError("conv input channels " + std::to_string(x.c) +
                        " != kernel cin " + std::to_string(w.c));
    if (x.d < w.d || x.h < w.h || x.w < w.w)
        throw DataError("conv spatial dims smaller than kernel extent");
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

} // namespace

Tensor conv3d(const Tensor& x, const Tensor& weights, const Tensor& bias) {
    const ConvGeom g = conv_geom(x.shape(), weights.shape());
    if (bias.size() != 0 && bias.size() != g.cout)
        throw DataError("conv bias length != cout");
    Tensor out(Shape{g.batch, g.cout, g.out_d(), g.out_h(), g.out_w()});
    kernels::active_kernels().conv_forward(x.data(), weights.data(),
                                           bias.size() ? bias.data() : nullptr, out.data(), g);
    return out;
}

Tensor conv1x1(const Tensor& x, const Tensor& weights, const Tensor& bias) {
    if (weights.shape().d != 1 || weights.shape().h != 1 || weights.shape().w != 1)
        throw DataError("conv1x1 expects 1x1x1 kernels");
    return conv3d(x, weights, bias);
}

Tensor avg_pool(const Tensor& x, std::array<int, 3> window, std::array<int, 3> stride) {
    PoolGeom g;
    g.batch = x.shape().b;
    g.chan = x.shape().c;
    g.in_d = x.shape().d;
    g.in_h = x.shape().h;
    g.in_w = x.shape().w;
    g.wd = window[0];
    g.wh = window[1];
    g.ww = window[2];
    g.sd = stride[0];
    g.sh = stride[1];
    g.sw = stride[2];
    if (g.in_d < g.wd || g.in_h < g.wh || g.in_w < g.ww)
        throw DataError("avg_pool input smaller than window");
    Tensor out(Shape{g.batch, g.chan, g.out_d(), g.out_h(), g.out_w()});
    kernels::avg_pool_forward_ref<float>(x.data(), out.data(), g);
    return out;
}

Tensor avg_pool3_s2(const Tensor& x) { return avg_pool(x, {3, 3, 3}, {2, 2, 2}); }

Tensor bilinear_up(const Tensor& x, std::array<bool, 3> axes) {
    UpGeom g;
    g.batch = x.shape().b;
    g.chan = x.shape().c;
    g.in_d = x.shape().d;
    g.in_h = x.shape().h;
    g.in_w = x.shape().w;
    g.up_d = axes[0];
    g.up_h = axes[1];
    g.up_w = axes[2];
    Tensor out(Shape{g.batch, g.chan, g.out_d(), g.out_h(), g.out_w()});
    kernels::upsample_forward_ref<float>(x.data(), out.data(), g, bilinear_taps.data());
    return out;
}

Tensor bilinear_up_x2(const Tensor& x) { return bilinear_up(x, {true, true, true}); }

Tensor center_crop(const Tensor& x, std::array<int, 3> spatial) {
    const Shape& s = x.shape();
    const int md = s.d - spatial[0], mh = s.h - spatial[1], mw = s.w - spatial[2];
    if (md < 0 || mh < 0 || mw < 0)
        throw DataError("center_crop target larger than input");
    if (md % 2 || mh % 2 || mw % 2)
        throw DataError("center_crop margin is odd; symmetric crop impossible");
    const int od = md / 2, oh = mh / 2, ow = mw / 2;
    Tensor out(Shape{s.b, s.c, spatial[0], spatial[1], spatial[2]});
    for (int b = 0; b < s.b; ++b)
        for (int c = 0; c < s.c; ++c)
            for (int d = 0; d < spatial[0]; ++d)
                for (int h = 0; h < spatial[1]; ++h)
                    for (int w = 0; w < spatial[2]; ++w)
                        out.at(b, c, d, h, w) = x.at(b, c, d + od, h + oh, w + ow);
    return out;
}

Tensor concat_crop(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.b != sb.b)
        throw DataError("concat_crop batch mismatch");
    Tensor ac = center_crop(a, {sb.d, sb.h, sb.w});
    Tensor out(Shape{sb.b, sa.c + sb.c, sb.d, sb.h, sb.w});
    const std::int64_t voxels = out.shape().voxels();
    for (int bi = 0; bi < sb.b; ++bi) {
        float* dst = out.data() + std::int64_t(bi) * out.shape().c * voxels;
        const float* pa = ac.data() + std::int64_t(bi) * sa.c * voxels;
        const float* pb = b.data() + std::int64_t(bi) * sb.c * voxels;
        std::copy(pa, pa + sa.c * voxels, dst);
        std::copy(pb, pb + sb.c * voxels, dst + sa.c * voxels);
    }
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out(x.shape());
    kernels::active_kernels().relu_forward(x.data(), out.data(), std::size_t(x.size()));
    return out;
}

Tensor softmax_channels(const Tensor& x) {
    Tensor out(x.shape());
    kernels::softmax_channels_ref<float>(x.data(), out.data(), x.shape().b, x.shape().c,
                                         x.shape().voxels());
    return out;
}

// ---------------------------------------------------------------------------
// Generalized Dice loss
// ---------------------------------------------------------------------------

namespace {

template <class T>
double gdl_core(const T* probs, const T* target, int batch, int chan, std::int64_t voxels,
                double eps, T* grad) {
    // Voxels pooled across the batch; class weights from target volumes.
    std::vector<double> t_sum(std::size_t(chan), 0.0);
    std::vector<double> pt_sum(std::size_t(chan), 0.0);
    std::vector<double> p_sum(std::size_t(chan), 0.0);
    for (int b = 0; b < batch; ++b)
        for (int c = 0; c < chan; ++c) {
            const T* p = probs + (std::int64_t(b) * chan + c) * voxels;
            const T* t = target + (std::int64_t(b) * chan + c) * voxels;
            double st = 0.0, spt = 0.0, sp = 0.0;
            for (std::int64_t v = 0; v < voxels; ++v) {
                st += double(t[v]);
                spt += double(p[v]) * double(t[v]);
                sp += double(p[v]);
            }
            t_sum[std::size_t(c)] += st;
            pt_sum[std::size_t(c)] += spt;
            p_sum[std::size_t(c)] += sp;
        }

    std::vector<double> wc(std::size_t(chan), 0.0);
    double A = 0.0, B = 0.0;
    for (int c = 0; c < chan; ++c) {
        const double denom = t_sum[std::size_t(c)] + eps;
        wc[std::size_t(c)] = 1.0 / (denom * denom);
        A += wc[std::size_t(c)] * pt_sum[std::size_t(c)];
        B += wc[std::size_t(c)] * (p_sum[std::size_t(c)] + t_sum[std::size_t(c)]);
    }
    if (B <= 0.0)
        throw NumericalError("generalized Dice loss denominator vanished");
    const double loss = std::clamp(1.0 - 2.0 * A / B, 0.0, 1.0);

    if (grad) {
        const double B2 = B * B;
        for (int b = 0; b < batch; ++b)
            for (int c = 0; c < chan; ++c) {
                const T* t = target + (std::int64_t(b) * chan + c) * voxels;
                T* gp = grad + (std::int64_t(b) * chan + c) * voxels;
                const double w = wc[std::size_t(c)];
                for (std::int64_t v = 0; v < voxels; ++v)
                    gp[v] = T(-2.0 * w * (double(t[v]) * B - A) / B2);
            }
    }
    return loss;
}

template <class T>
void gdl_validate(const TensorT<T>& probs, const TensorT<T>& target) {
    if (probs.shape() != target.shape())
        throw DataError("loss probs/target shape mismatch");
    const int chan = probs.shape().c;
    const std::int64_t voxels = probs.shape().voxels();
    for (int b = 0; b < probs.shape().b; ++b)
        for (std::int64_t v = 0; v < voxels; ++v) {
            double ps = 0.0, ts = 0.0;
            for (int c = 0; c < chan; ++c) {
                const T pv = probs.data()[(std::int64_t(b) * chan + c) * voxels + v];
                const T tv = target.data()[(std::int64_t(b) * chan + c) * voxels + v];
                if (tv != T(0) && tv != T(1))
                    throw DataError("loss target is not one-hot");
                ps += double(pv);
                ts += double(tv);
            }
            if (std::abs(ps - 1.0) > 1e-3)
                throw NumericalError("loss probs are not per-voxel normalized");
            if (ts != 1.0)
                throw DataError("loss target channel sum != 1");
        }
}

} // namespace

DiceLossResult generalized_dice_loss(const Tensor& probs, const Tensor& target, double eps) {
    gdl_validate(probs, target);
    DiceLossResult r;
    r.grad = Tensor(probs.shape());
    r.loss = gdl_core<float>(probs.data(), target.data(), probs.shape().b, probs.shape().c,
                             probs.shape().voxels(), eps, r.grad.data());
    return r;
}

double generalized_dice_loss_value(const DTensor& probs, const DTensor& target, double eps) {
    gdl_validate(probs, target);
    return gdl_core<double>(probs.data(), target.data(), probs.shape().b, probs.shape().c,
                            probs.shape().voxels(), eps, nullptr);
}

DTensor generalized_dice_loss_grad(const DTensor& probs, const DTensor& target, double eps) {
    gdl_validate(probs, target);
    DTensor grad(probs.shape());
    gdl_core<double>(probs.data(), target.data(), probs.shape().b, probs.shape().c,
                     probs.shape().voxels(), eps, grad.data());
    return grad;
}

} // namespace voxelseg::ops
