#include "voxelseg/models.hpp"

#include <cmath>

#include "voxelseg/init.hpp"
#include "voxelseg/ops.hpp"

namespace voxelseg::models {

namespace {

enum class Init { glorot, orthogonal };

struct LayerFactory {
    NetworkGraph& g;
    Rng& rng;
    Init kind;

    /// conv + ReLU; returns the activation node.
    int block(int src, int cin, int cout, std::array<int, 3> ext, const std::string& name) {
        const int c = conv(src, cin, cout, ext, name);
        return g.add_relu(c, name + ".relu");
    }

    /// conv without activation (classifier).
    int conv(int src, int cin, int cout, std::array<int, 3> ext, const std::string& name) {
        const Shape ws{cout, cin, ext[0], ext[1], ext[2]};
        Tensor w = kind == Init::glorot ? init_glorot_uniform(ws, rng)
                                        : init_orthogonal(ws, rng);
        const int wp = g.add_parameter(name + ".w", std::move(w), true);
        const int bp = g.add_parameter(name + ".b", Tensor(Shape{cout, 1, 1, 1, 1}), true);
        return g.add_conv(src, wp, bp, name);
    }
};

constexpr std::array<int, 3> k3{3, 3, 3};   // full 3^3
constexpr std::array<int, 3> k133{1, 3, 3}; // in-plane only
constexpr std::array<int, 3> k1{1, 1, 1};   // pointwise

} // namespace

// ---------------------------------------------------------------------------
// 3D U-Net
// ---------------------------------------------------------------------------

BuiltModel build_unet3d(const UNet3DConfig& cfg) {
    if (cfg.in_channels < 1 || cfg.base_channels < 1 || cfg.classes < 2)
        throw DataError("bad U-Net config");
    const int b1 = cfg.base_channels, b2 = 2 * b1, b4 = 4 * b1, b8 = 8 * b1;

    BuiltModel m;
    m.geom.input_patch = {19, 75, 75};
    m.geom.output_tile = {1, 37, 37};
    m.geom.in_channels = cfg.in_channels;
    m.geom.classes = cfg.classes;
    m.geom.has_prior = cfg.prior_mask;

    NetworkGraph& g = m.graph;
    Rng rng(cfg.init_seed);
    LayerFactory L{g, rng, Init::glorot};

    const int in = g.add_input(cfg.in_channels, "patch");

    // Encoder: three full-res blocks, one half-res block past the pool.
    int cur = L.block(in, cfg.in_channels, b1, k3, "enc1.conv1");
    const int skip1 = L.block(cur, b1, b1, k3, "enc1.conv2"); // (15,71,71)
    cur = L.block(skip1, b1, b2, k3, "enc2.conv1");
    const int skip2 = L.block(cur, b2, b2, k3, "enc2.conv2"); // (11,67,67)
    cur = L.block(skip2, b2, b4, k3, "enc3.conv1");
    const int skip3 = L.block(cur, b4, b4, k3, "enc3.conv2"); // (7,63,63)

    cur = g.add_avg_pool(skip3, {1, 3, 3}, {1, 2, 2}, "pool"); // (7,31,31)
    cur = L.block(cur, b4, b8, k3, "enc4.conv1");
    cur = L.block(cur, b8, b8, k3, "enc4.conv2"); // (3,27,27)

    // Fixed bilinear upsample; trim the two partial-support border samples so
    // the grid re-aligns with the full-res features.
    cur = g.add_bilinear_up(cur, {false, true, true}, "up"); // (3,55,55)
    cur = g.add_center_crop(cur, {3, 53, 53}, "up.trim");

    cur = g.add_concat_crop(skip3, cur, "skip3.cat"); // 12*b1 channels
    cur = L.block(cur, b4 + b8, b4, k3, "dec1.conv1");
    cur = L.block(cur, b4, b4, k133, "dec1.conv2"); // (1,49,49)

    cur = g.add_concat_crop(skip2, cur, "skip2.cat"); // 6*b1
    cur = L.block(cur, b2 + b4, b2, k133, "dec2.conv1");
    cur = L.block(cur, b2, b2, k133, "dec2.conv2"); // (1,45,45)

    cur = g.add_concat_crop(skip1, cur, "skip1.cat"); // 3*b1
    cur = L.block(cur, b1 + b2, b1, k133, "dec3.conv1");
    cur = L.block(cur, b1, b1, k133, "dec3.conv2"); // (1,41,41)

    cur = L.block(cur, b1, b1, k133, "dec4.conv1");
    cur = L.block(cur, b1, b1, k133, "dec4.conv2"); // (1,37,37)

    int cls_in = b1;
    if (cfg.prior_mask) {
        const int prior = g.add_input(1, "prior");
        cur = g.add_concat_crop(cur, prior, "prior.cat");
        cls_in += 1;
    }
    cur = L.conv(cur, cls_in, cfg.classes, k1, "classifier");
    g.set_output(g.add_softmax(cur, "probs"));

    // Contract checks: declared output tile, 16-conv census, parameter band.
    std::vector<Shape> in_shapes{Shape{1, cfg.in_channels, 19, 75, 75}};
    if (cfg.prior_mask)
        in_shapes.push_back(Shape{1, 1, 1, 37, 37});
    const auto shapes = g.infer_shapes(in_shapes);
    const Shape out = shapes[std::size_t(g.output_node())];
    if (out != Shape{1, cfg.classes, 1, 37, 37})
        throw DataError("U-Net shape arithmetic cannot reach the declared output tile, got " +
                        out.str());
    const int census = g.count_convs([](int, int kh, int kw) { return kh == 3 && kw == 3; });
    if (census != 16)
        throw DataError("U-Net conv census is " + std::to_string(census) + ", expected 16");
    if (cfg.base_channels == UNet3DConfig{}.base_channels) {
        const std::int64_t n = g.trainable_parameter_count();
        if (n < 2'500'000 || n > 3'500'000)
            throw DataError("U-Net trainable parameter count " + std::to_string(n) +
                            " outside [2.5M, 3.5M]");
    }
    return m;
}

// ---------------------------------------------------------------------------
// DeepMedic
// ---------------------------------------------------------------------------

namespace {

/// One 8-layer pathway; through-plane extent 3 on the first six layers
/// consumes 13 slices down to 1.
int deepmedic_pathway(LayerFactory& L, int in, int cin, const std::string& prefix) {
    static constexpr std::array<int, 8> widths{30, 30, 45, 45, 60, 60, 75, 75};
    int cur = in;
    int prev = cin;
    for (int i = 0; i < 8; ++i) {
        const std::array<int, 3> ext = i < 6 ? k3 : k133;
        cur = L.block(cur, prev, widths[std::size_t(i)], ext,
                      prefix + ".conv" + std::to_string(i + 1));
        prev = widths[std::size_t(i)];
    }
    return cur;
}

} // namespace

BuiltModel build_deepmedic(const DeepMedicConfig& cfg) {
    if (cfg.in_channels < 1 || cfg.classes < 2)
        throw DataError("bad DeepMedic config");

    BuiltModel m;
    m.geom.input_patch = {13, 35, 35};
    m.geom.output_tile = {1, 9, 9};
    m.geom.has_context = true;
    m.geom.context_field = {13, 77, 77};
    m.geom.context_input = {13, 38, 38};
    m.geom.has_prior = cfg.tpm_enabled;
    m.geom.in_channels = cfg.in_channels;
    m.geom.classes = cfg.classes;

    NetworkGraph& g = m.graph;
    Rng rng(cfg.init_seed);
    LayerFactory L{g, rng, Init::orthogonal};

    const int normal_in = g.add_input(cfg.in_channels, "normal");
    const int context_in = g.add_input(cfg.in_channels, "context");

    const int normal_out = deepmedic_pathway(L, normal_in, cfg.in_channels, "normal");
    const int context_out = deepmedic_pathway(L, context_in, cfg.in_channels, "context");

    const int normal_tile = g.add_center_crop(normal_out, {1, 9, 9}, "normal.tile");
    int ctx = g.add_bilinear_up(context_out, {false, true, true}, "context.up"); // (1,45,45)
    ctx = g.add_center_crop(ctx, {1, 9, 9}, "context.tile");

    int cat = g.add_concat_crop(normal_tile, ctx, "pathways.cat");
    int cls_in = 150;
    if (cfg.tpm_enabled) {
        const int tpm = g.add_input(1, "tpm");
        cat = g.add_concat_crop(cat, tpm, "tpm.cat");
        cls_in += 1;
    }
    int cur = L.block(cat, cls_in, 250, k1, "fc1");
    cur = L.block(cur, 250, 250, k1, "fc2");
    cur = L.conv(cur, 250, cfg.classes, k1, "classifier");
    g.set_output(g.add_softmax(cur, "probs"));

    std::vector<Shape> in_shapes{Shape{1, cfg.in_channels, 13, 35, 35},
                                 Shape{1, cfg.in_channels, 13, 38, 38}};
    if (cfg.tpm_enabled)
        in_shapes.push_back(Shape{1, 1, 1, 9, 9});
    const auto shapes = g.infer_shapes(in_shapes);
    const Shape out = shapes[std::size_t(g.output_node())];
    if (out != Shape{1, cfg.classes, 1, 9, 9})
        throw DataError("DeepMedic shape arithmetic cannot reach the 9x9 target, got " +
                        out.str());
    const std::int64_t n = g.trainable_parameter_count();
    if (n < 800'000 || n > 1'200'000)
        throw DataError("DeepMedic trainable parameter count " + std::to_string(n) +
                        " outside [0.8M, 1.2M]");
    return m;
}

// ---------------------------------------------------------------------------
// Breast-mask net
// ---------------------------------------------------------------------------

BuiltBreastMaskNet build_breast_mask_net(const BreastMaskNetConfig& cfg) {
    if (cfg.in_channels < 1 || cfg.base_channels < 1)
        throw DataError("bad breast-mask net config");
    const int b1 = cfg.base_channels, b2 = 2 * b1;

    BuiltBreastMaskNet net;
    net.in_channels = cfg.in_channels;
    NetworkGraph& g = net.graph;
    Rng rng(cfg.init_seed);
    LayerFactory L{g, rng, Init::glorot};

    const int in = g.add_input(cfg.in_channels, "frame");
    int cur = L.block(in, cfg.in_channels, b1, k3, "enc1.conv1");
    const int skip1 = L.block(cur, b1, b1, k3, "enc1.conv2");
    cur = g.add_avg_pool(skip1, {1, 3, 3}, {1, 2, 2}, "pool");
    cur = L.block(cur, b1, b2, k133, "enc2.conv1");
    cur = L.block(cur, b2, b2, k133, "enc2.conv2");
    cur = g.add_bilinear_up(cur, {false, true, true}, "up");
    // The skip concat's 4-voxel crop lands the upsampled grid voxel-exact on
    // the full-res features; the partial-support border samples fall inside
    // the reflect padding and are discarded with it.
    cur = g.add_concat_crop(skip1, cur, "skip1.cat");
    cur = L.block(cur, b1 + b2, b1, k133, "dec1.conv1");
    cur = L.block(cur, b1, b1, k133, "dec1.conv2");
    cur = L.block(cur, b1, b1, k133, "dec2.conv1");
    cur = L.block(cur, b1, b1, k133, "dec2.conv2");
    cur = L.conv(cur, b1, 2, k1, "classifier");
    g.set_output(g.add_softmax(cur, "probs"));
    return net;
}

Volume downsample_x4_inplane(const Volume& v) {
    const auto pool_once = [](const Volume& x) {
        Tensor t(Shape{1, 1, x.dims().slices, x.dims().rows, x.dims().cols},
                 std::vector<float>(x.data()));
        Tensor p = ops::avg_pool(t, {1, 3, 3}, {1, 2, 2});
        Spacing sp = x.spacing();
        sp.row_mm *= 2.0;
        sp.col_mm *= 2.0;
        return Volume(Dims{p.shape().d, p.shape().h, p.shape().w}, sp,
                      std::vector<float>(p.vec()));
    };
    return pool_once(pool_once(v));
}

SegmentationMask downsample_x4_inplane_mask(const SegmentationMask& m) {
    Volume v(m.dims(), Spacing{1, 1, 1});
    for (std::size_t i = 0; i < m.values().size(); ++i)
        v.data()[i] = float(m.values()[i]);
    Volume d = downsample_x4_inplane(v);
    SegmentationMask out(d.dims(), m.source());
    for (std::size_t i = 0; i < d.data().size(); ++i)
        out.values()[i] = d.data()[i] >= 0.5f ? 1 : 0;
    return out;
}

Volume predict_breast_mask(BuiltBreastMaskNet& net, const Volume& downsampled) {
    const Dims d = downsampled.dims();
    // Pad so the valid network covers the whole frame; in-plane pad keeps the
    // pool input odd, the extra voxel (if any) goes after.
    const int pd = 2;
    const int pr_before = 10, pc_before = 10;
    const int pr_after = 10 + ((d.rows % 2 == 0) ? 1 : 0);
    const int pc_after = 10 + ((d.cols % 2 == 0) ? 1 : 0);
    Volume padded = crop_reflect(
        downsampled, {-pd, -pr_before, -pc_before},
        Dims{d.slices + 2 * pd, d.rows + pr_before + pr_after, d.cols + pc_before + pc_after});

    Tensor x(Shape{1, 1, padded.dims().slices, padded.dims().rows, padded.dims().cols},
             std::vector<float>(padded.data()));
    const Tensor& y = net.graph.forward(std::span(&x, 1));
    if (y.shape().d != d.slices || y.shape().h < d.rows || y.shape().w < d.cols)
        throw DataError("breast-mask net output smaller than the frame");
    Volume out(d, downsampled.spacing());
    for (int s = 0; s < d.slices; ++s)
        for (int r = 0; r < d.rows; ++r)
            for (int c = 0; c < d.cols; ++c)
                out.at(s, r, c) = y.at(0, 1, s, r, c);
    return out;
}

// ---------------------------------------------------------------------------
// Tissue probability map
// ---------------------------------------------------------------------------

TissueProbabilityMap build_tpm(const std::vector<SegmentationMask>& masks) {
    if (masks.empty())
        throw DataError("build_tpm needs at least one mask");
    const Dims d = masks.front().dims();
    TissueProbabilityMap tpm{Volume(d, Spacing{1, 1, 1})};
    for (const auto& m : masks) {
        if (m.dims() != d)
            throw DataError("TPM masks must share a canonical frame");
        for (std::size_t i = 0; i < m.values().size(); ++i)
            tpm.probs.data()[i] += float(m.values()[i]);
    }
    const float inv = 1.0f / float(masks.size());
    for (auto& x : tpm.probs.data())
        x *= inv;
    return tpm;
}

std::array<double, 3> mask_center_of_mass(const SegmentationMask& m) {
    double ws = 0.0, wr = 0.0, wc = 0.0;
    std::int64_t n = 0;
    const Dims d = m.dims();
    for (int s = 0; s < d.slices; ++s)
        for (int r = 0; r < d.rows; ++r)
            for (int c = 0; c < d.cols; ++c)
                if (m.at(s, r, c)) {
                    ws += s;
                    wr += r;
                    wc += c;
                    ++n;
                }
    if (n == 0)
        throw DataError("center of mass of an empty mask");
    return {ws / double(n), wr / double(n), wc / double(n)};
}

SegmentationMask shift_mask(const SegmentationMask& m, std::array<int, 3> delta) {
    SegmentationMask out(m.dims(), m.source());
    out.set_rater_id(m.rater_id());
    const Dims d = m.dims();
    for (int s = 0; s < d.slices; ++s)
        for (int r = 0; r < d.rows; ++r)
            for (int c = 0; c < d.cols; ++c) {
                if (!m.at(s, r, c))
                    continue;
                const int ns = s + delta[0], nr = r + delta[1], nc = c + delta[2];
                if (ns >= 0 && ns < d.slices && nr >= 0 && nr < d.rows && nc >= 0 &&
                    nc < d.cols)
                    out.at(ns, nr, nc) = 1;
            }
    if (m.slice_index())
        out.set_slice_index(*m.slice_index() + delta[0]);
    return out;
}

// ---------------------------------------------------------------------------
// CRF
// ---------------------------------------------------------------------------

Volume apply_crf(const Volume& prob, const Volume& reference_image, const CrfParams& p) {
    if (prob.dims() != reference_image.dims())
        throw DataError("CRF probability/reference dims mismatch");
    if (p.gaussian_width <= 0 || p.bilateral_width <= 0)
        throw DataError("CRF filter widths must be positive");
    if (p.gaussian_weight < 0 || p.bilateral_weight < 0)
        throw DataError("CRF weights must be non-negative");
    for (float q : prob.data())
        if (q < 0.0f || q > 1.0f)
            throw DataError("CRF input probabilities must lie in [0,1]");

    if (p.gaussian_weight == 0.0 && p.bilateral_weight == 0.0)
        return prob; // zero pairwise terms: the mean-field update is the identity

    const Dims d = prob.dims();
    const int rg = std::max(1, int(std::ceil(4.0 * std::sqrt(p.gaussian_width))));
    const int rb = std::max(1, int(std::ceil(4.0 * std::sqrt(p.bilateral_width))));
    const int radius = std::max(rg, rb);

    Volume q = prob;
    Volume next(d, prob.spacing());
    for (int iter = 0; iter < p.iterations; ++iter) {
#pragma omp parallel for schedule(static)
        for (int s = 0; s < d.slices; ++s)
            for (int r = 0; r < d.rows; ++r)
                for (int c = 0; c < d.cols; ++c) {
                    double gw_sum = 0.0, gq_sum = 0.0;
                    double bw_sum = 0.0, bq_sum = 0.0;
                    const double iv = double(reference_image.at(s, r, c));
                    for (int ds = -radius; ds <= radius; ++ds)
                        for (int dr = -radius; dr <= radius; ++dr)
                            for (int dc = -radius; dc <= radius; ++dc) {
                                if (ds == 0 && dr == 0 && dc == 0)
                                    continue;
                                const int ns = s + ds, nr = r + dr, nc = c + dc;
                                if (ns < 0 || ns >= d.slices || nr < 0 || nr >= d.rows ||
                                    nc < 0 || nc >= d.cols)
                                    continue;
                                const double dist2 = double(ds) * ds + double(dr) * dr +
                                                     double(dc) * dc;
                                const double qn = double(q.at(ns, nr, nc));
                                if (std::abs(ds) <= rg && std::abs(dr) <= rg &&
                                    std::abs(dc) <= rg) {
                                    const double w =
                                        std::exp(-dist2 / (2.0 * p.gaussian_width));
                                    gw_sum += w;
                                    gq_sum += w * qn;
                                }
                                if (std::abs(ds) <= rb && std::abs(dr) <= rb &&
                                    std::abs(dc) <= rb) {
                                    const double di =
                                        iv - double(reference_image.at(ns, nr, nc));
                                    const double w =
                                        std::exp(-dist2 / (2.0 * p.bilateral_width) -
                                                 di * di / (2.0 * p.bilateral_width));
                                    bw_sum += w;
                                    bq_sum += w * qn;
                                }
                            }
                    const double g1 = gw_sum > 0.0 ? gq_sum / gw_sum : 0.5;
                    const double b1 = bw_sum > 0.0 ? bq_sum / bw_sum : 0.5;
                    const double msg1 = p.gaussian_weight * g1 + p.bilateral_weight * b1;
                    const double msg0 = p.gaussian_weight * (1.0 - g1) +
                                        p.bilateral_weight * (1.0 - b1);
                    const double u1 = double(prob.at(s, r, c));
                    const double e1 = u1 * std::exp(msg1);
                    const double e0 = (1.0 - u1) * std::exp(msg0);
                    next.at(s, r, c) = float(e1 / (e1 + e0 > 0.0 ? e1 + e0 : 1.0));
                }
        std::swap(q, next);
    }
    return q;
}

} // namespace voxelseg::models
