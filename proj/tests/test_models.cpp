#include <cmath>

#include "doctest.h"
#include "voxelseg/adam.hpp"
#include "voxelseg/gradcheck.hpp"
#include "voxelseg/harmonize.hpp"
#include "voxelseg/models.hpp"
#include "voxelseg/ops.hpp"
#include "voxelseg/phantom.hpp"
#include "voxelseg/rng.hpp"

using namespace voxelseg;
using namespace voxelseg::models;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(s);
    for (std::int64_t i = 0; i < t.size(); ++i)
        t.data()[i] = float(rng.uniform(lo, hi));
    return t;
}

} // namespace

TEST_CASE("U-Net forward (1,3,19,75,75) -> (1,2,1,37,37); census; parameters") {
    BuiltModel m = build_unet3d(UNet3DConfig{});
    Rng rng(91);
    const Tensor x = random_tensor(Shape{1, 3, 19, 75, 75}, rng);
    const Tensor& y = m.graph.forward(std::span(&x, 1));
    CHECK(y.shape() == Shape{1, 2, 1, 37, 37});

    CHECK(m.graph.count_convs([](int, int kh, int kw) { return kh == 3 && kw == 3; }) == 16);
    const std::int64_t params = m.graph.trainable_parameter_count();
    CHECK(params >= 2'500'000);
    CHECK(params <= 3'500'000);

    // Softmax probabilities at every output voxel sum to 1.
    for (int h = 0; h < 37; ++h)
        for (int w = 0; w < 37; ++w)
            CHECK(double(y.at(0, 0, 0, h, w)) + double(y.at(0, 1, 0, h, w)) ==
                  doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("U-Net shape contract holds for batch size 2 (reduced width)") {
    UNet3DConfig cfg;
    cfg.base_channels = 2;
    BuiltModel m = build_unet3d(cfg);
    Rng rng(92);
    const Tensor x = random_tensor(Shape{2, 3, 19, 75, 75}, rng);
    CHECK(m.graph.forward(std::span(&x, 1)).shape() == Shape{2, 2, 1, 37, 37});
}

TEST_CASE("U-Net prior-mask variant consumes a tile-shaped extra input") {
    UNet3DConfig cfg;
    cfg.base_channels = 2;
    cfg.prior_mask = true;
    BuiltModel m = build_unet3d(cfg);
    CHECK(m.geom.has_prior);
    Rng rng(93);
    const std::array<Tensor, 2> inputs{random_tensor(Shape{1, 3, 19, 75, 75}, rng),
                                       random_tensor(Shape{1, 1, 1, 37, 37}, rng, 0.0, 1.0)};
    CHECK(m.graph.forward(std::span(inputs.data(), 2)).shape() == Shape{1, 2, 1, 37, 37});
}

TEST_CASE("doubling base_channels roughly quadruples the parameter count") {
    UNet3DConfig small;
    small.base_channels = 12;
    UNet3DConfig big;
    big.base_channels = 24;
    const double ratio = double(build_unet3d(big).graph.trainable_parameter_count()) /
                         double(build_unet3d(small).graph.trainable_parameter_count());
    CHECK(ratio >= 3.5);
    CHECK(ratio <= 4.5);
}

TEST_CASE("U-Net end-to-end gradient check < 1e-3 (reduced width)") {
    UNet3DConfig cfg;
    cfg.base_channels = 2;
    cfg.init_seed = 7;
    BuiltModel m = build_unet3d(cfg);
    Rng rng(94);
    const Tensor x = random_tensor(Shape{1, 3, 19, 75, 75}, rng, 0.0, 1.0);

    Tensor target(Shape{1, 2, 1, 37, 37});
    for (int h = 0; h < 37; ++h)
        for (int w = 0; w < 37; ++w) {
            const bool fg = (h - 18) * (h - 18) + (w - 18) * (w - 18) < 60;
            target.at(0, fg ? 1 : 0, 0, h, w) = 1.0f;
        }
    GradCheckOptions opt;
    opt.dice_target = &target;
    // Deep ReLU stacks need a finer step than the op-level default so that
    // kink crossings stay rare; the double-precision mirror keeps small
    // steps well conditioned.
    opt.step = 1e-4;
    opt.max_coords_per_tensor = 12;
    opt.max_param_tensors = 5;
    const auto rep = grad_check(m.graph, std::span(&x, 1), opt);
    INFO("worst at " << rep.worst_site << ", probes " << rep.probes_used << "/"
                     << rep.probes_used + rep.probes_skipped);
    CHECK(rep.max_rel_error < 1e-3);
    CHECK(rep.probes_used >= 10); // the check must not be vacuous
}

TEST_CASE("DeepMedic forward shapes and parameter band") {
    BuiltModel m = build_deepmedic(DeepMedicConfig{});
    Rng rng(95);
    const std::array<Tensor, 2> inputs{random_tensor(Shape{1, 3, 13, 35, 35}, rng),
                                       random_tensor(Shape{1, 3, 13, 38, 38}, rng)};
    CHECK(m.graph.forward(std::span(inputs.data(), 2)).shape() == Shape{1, 2, 1, 9, 9});
    const std::int64_t params = m.graph.trainable_parameter_count();
    CHECK(params >= 800'000);
    CHECK(params <= 1'200'000);
    CHECK(m.geom.has_context);
    CHECK(m.geom.context_field == std::array<int, 3>{13, 77, 77});
}

TEST_CASE("DeepMedic with an all-0.5 TPM and zero TPM weights equals the TPM-less graph") {
    DeepMedicConfig off;
    off.init_seed = 3;
    DeepMedicConfig on = off;
    on.tpm_enabled = true;
    BuiltModel moff = build_deepmedic(off);
    BuiltModel mon = build_deepmedic(on);

    // Copy every weight; fc1.w gains one input channel (the TPM), zero it.
    auto& pon = mon.graph.parameters();
    const auto& poff = moff.graph.parameters();
    for (auto& p : pon) {
        for (const auto& q : poff) {
            if (q.name != p.name)
                continue;
            if (q.tensor.shape() == p.tensor.shape()) {
                p.tensor = q.tensor;
            } else if (p.name == "fc1.w") {
                // (250,151,1,1,1) <- (250,150,1,1,1), TPM channel zeroed.
                p.tensor = Tensor(p.tensor.shape());
                for (int co = 0; co < 250; ++co)
                    for (int ci = 0; ci < 150; ++ci)
                        p.tensor.at(co, ci, 0, 0, 0) = q.tensor.at(co, ci, 0, 0, 0);
            }
        }
    }

    Rng rng(96);
    const Tensor normal = random_tensor(Shape{1, 3, 13, 35, 35}, rng);
    const Tensor context = random_tensor(Shape{1, 3, 13, 38, 38}, rng);
    const Tensor tpm(Shape{1, 1, 1, 9, 9}, std::vector<float>(81, 0.5f));

    const std::array<Tensor, 2> in_off{normal, context};
    const Tensor y_off = moff.graph.forward(std::span(in_off.data(), 2));
    const std::array<Tensor, 3> in_on{normal, context, tpm};
    const Tensor y_on = mon.graph.forward(std::span(in_on.data(), 3));
    REQUIRE(y_on.shape() == y_off.shape());
    for (std::int64_t i = 0; i < y_on.size(); ++i)
        CHECK(y_on.data()[i] == doctest::Approx(y_off.data()[i]).epsilon(1e-6));
}

TEST_CASE("breast-mask net emits a frame-sized probability volume") {
    BuiltBreastMaskNet net = build_breast_mask_net(BreastMaskNetConfig{});
    phantom::PhantomSpec spec;
    spec.seed = 42;
    auto gen = phantom::generate_exam(spec);
    Volume down = downsample_x4_inplane(gen.exam.t1);
    Volume prob = predict_breast_mask(net, down);
    CHECK(prob.dims() == down.dims());
    for (float p : prob.data()) {
        CHECK(p >= 0.0f);
        CHECK(p <= 1.0f);
    }
    // Even-sized frames take the asymmetric-pad path.
    Volume even(Dims{10, 20, 20}, Spacing{1, 1, 1}, 0.5f);
    CHECK(predict_breast_mask(net, even).dims() == even.dims());
}

TEST_CASE("breast-mask net trained on 100 phantom masks reaches Dice >= 0.9") {
    BuiltBreastMaskNet net = build_breast_mask_net(BreastMaskNetConfig{});
    AdamState adam = AdamState::init_for(net.graph);

    // 100 training phantoms, 8 held out.
    std::vector<Tensor> frames, targets;
    std::vector<Volume> test_frames;
    std::vector<SegmentationMask> test_masks;
    for (int i = 0; i < 108; ++i) {
        phantom::PhantomSpec spec;
        spec.seed = 1000 + std::uint64_t(i);
        spec.lesion_count = i % 3;
        auto gen = phantom::generate_exam(spec);
        Volume down = downsample_x4_inplane(gen.exam.t1);
        SegmentationMask dmask = downsample_x4_inplane_mask(gen.breast_mask);
        if (i >= 100) {
            test_frames.push_back(std::move(down));
            test_masks.push_back(std::move(dmask));
            continue;
        }
        // Normalize intensities to keep the net in a sane regime.
        for (auto& x : down.data())
            x /= 100.0f;
        const Dims d = down.dims();
        const int pd = 2, pr = 10, pc = 10;
        Volume padded = crop_reflect(down, {-pd, -pr, -pc},
                                     Dims{d.slices + 4, d.rows + 20 + (d.rows % 2 == 0),
                                          d.cols + 20 + (d.cols % 2 == 0)});
        frames.emplace_back(
            Shape{1, 1, padded.dims().slices, padded.dims().rows, padded.dims().cols},
            std::vector<float>(padded.data()));
        Tensor t(Shape{1, 2, d.slices, d.rows + (d.rows % 2 == 0), d.cols + (d.cols % 2 == 0)});
        for (int s = 0; s < d.slices; ++s)
            for (int r = 0; r < t.shape().h; ++r)
                for (int c = 0; c < t.shape().w; ++c) {
                    const bool on = dmask.at(s, std::min(r, d.rows - 1), std::min(c, d.cols - 1));
                    t.at(0, on ? 1 : 0, s, r, c) = 1.0f;
                }
        targets.push_back(std::move(t));
    }

    Rng order(5);
    for (int it = 0; it < 240; ++it) {
        const std::size_t i = order.uniform_index(frames.size());
        const Tensor& y = net.graph.forward(std::span(&frames[i], 1));
        auto loss = ops::generalized_dice_loss(y, targets[i]);
        net.graph.zero_parameter_gradients();
        net.graph.backward(loss.grad);
        adam_step(net.graph, adam, 3e-3);
    }

    // Dice against the phantom ground-truth breast on held-out frames.
    double dice_sum = 0.0;
    for (std::size_t i = 0; i < test_frames.size(); ++i) {
        Volume frame = test_frames[i];
        for (auto& x : frame.data())
            x /= 100.0f;
        Volume prob = predict_breast_mask(net, frame);
        std::int64_t tp = 0, fp = 0, fn = 0;
        for (std::size_t v = 0; v < prob.data().size(); ++v) {
            const bool pred = prob.data()[v] >= 0.5f;
            const bool truth = test_masks[i].values()[v] != 0;
            tp += pred && truth;
            fp += pred && !truth;
            fn += !pred && truth;
        }
        dice_sum += 2.0 * double(tp) / double(2 * tp + fp + fn);
    }
    const double mean_dice = dice_sum / double(test_frames.size());
    INFO("mean breast dice " << mean_dice);
    CHECK(mean_dice >= 0.9);
}

TEST_CASE("build_tpm: identical, disjoint, counting oracle") {
    const Dims d{1, 8, 8};
    SegmentationMask a(d, MaskSource::radiologist);
    a.at(0, 2, 2) = a.at(0, 2, 3) = 1;
    TissueProbabilityMap same = build_tpm({a, a, a});
    for (std::size_t i = 0; i < same.probs.data().size(); ++i)
        CHECK(same.probs.data()[i] == float(a.values()[i]));

    SegmentationMask b(d, MaskSource::radiologist);
    b.at(0, 5, 5) = 1;
    TissueProbabilityMap half = build_tpm({a, b});
    for (float v : half.probs.data())
        CHECK((v == 0.0f || v == 0.5f));

    // Counting oracle on random masks.
    Rng rng(97);
    std::vector<SegmentationMask> masks;
    for (int k = 0; k < 7; ++k) {
        SegmentationMask m(d, MaskSource::radiologist);
        for (auto& v : m.values())
            v = rng.uniform() < 0.3 ? 1 : 0;
        masks.push_back(std::move(m));
    }
    TissueProbabilityMap tpm = build_tpm(masks);
    for (std::size_t i = 0; i < tpm.probs.data().size(); ++i) {
        int count = 0;
        for (const auto& m : masks)
            count += m.values()[i];
        CHECK(tpm.probs.data()[i] == doctest::Approx(count / 7.0).epsilon(1e-6));
    }
    CHECK_THROWS_AS(build_tpm({}), DataError);
}

namespace {

/// Dense mean-field oracle: same update rule, all pairs, no truncation.
Volume crf_dense_oracle(const Volume& prob, const Volume& ref, const CrfParams& p) {
    const Dims d = prob.dims();
    Volume q = prob;
    Volume next(d, prob.spacing());
    for (int iter = 0; iter < p.iterations; ++iter) {
        for (int s = 0; s < d.slices; ++s)
            for (int r = 0; r < d.rows; ++r)
                for (int c = 0; c < d.cols; ++c) {
                    double gw = 0, gq = 0, bw = 0, bq = 0;
                    for (int s2 = 0; s2 < d.slices; ++s2)
                        for (int r2 = 0; r2 < d.rows; ++r2)
                            for (int c2 = 0; c2 < d.cols; ++c2) {
                                if (s2 == s && r2 == r && c2 == c)
                                    continue;
                                const double dist2 = double(s2 - s) * (s2 - s) +
                                                     double(r2 - r) * (r2 - r) +
                                                     double(c2 - c) * (c2 - c);
                                const double qn = double(q.at(s2, r2, c2));
                                const double wg = std::exp(-dist2 / (2 * p.gaussian_width));
                                gw += wg;
                                gq += wg * qn;
                                const double di = double(ref.at(s, r, c)) -
                                                  double(ref.at(s2, r2, c2));
                                const double wb = std::exp(-dist2 / (2 * p.bilateral_width) -
                                                           di * di / (2 * p.bilateral_width));
                                bw += wb;
                                bq += wb * qn;
                            }
                    const double g1 = gq / gw, b1 = bq / bw;
                    const double m1 = p.gaussian_weight * g1 + p.bilateral_weight * b1;
                    const double m0 = p.gaussian_weight * (1 - g1) + p.bilateral_weight * (1 - b1);
                    const double u1 = double(prob.at(s, r, c));
                    const double e1 = u1 * std::exp(m1);
                    const double e0 = (1 - u1) * std::exp(m0);
                    next.at(s, r, c) = float(e1 / (e1 + e0));
                }
        std::swap(q, next);
    }
    return q;
}

} // namespace

TEST_CASE("CRF: zero weights are the exact identity") {
    Rng rng(98);
    Volume prob(Dims{2, 6, 6}, Spacing{1, 1, 1});
    Volume ref(Dims{2, 6, 6}, Spacing{1, 1, 1});
    for (std::size_t i = 0; i < prob.data().size(); ++i) {
        prob.data()[i] = float(rng.uniform());
        ref.data()[i] = float(rng.uniform(0.0, 2.0));
    }
    CrfParams p;
    p.gaussian_weight = 0.0;
    p.bilateral_weight = 0.0;
    Volume out = apply_crf(prob, ref, p);
    CHECK(out.data() == prob.data());
}

TEST_CASE("CRF: constant reference makes the bilateral term a Gaussian term") {
    Rng rng(99);
    Volume prob(Dims{1, 10, 10}, Spacing{1, 1, 1});
    for (auto& x : prob.data())
        x = float(rng.uniform());
    Volume cref(Dims{1, 10, 10}, Spacing{1, 1, 1}, 1.5f);

    CrfParams both;
    both.gaussian_weight = 0.1;
    both.bilateral_weight = 0.1;
    both.iterations = 3;
    CrfParams gauss_only;
    gauss_only.gaussian_weight = 0.2;
    gauss_only.bilateral_weight = 0.0;
    gauss_only.iterations = 3;

    Volume a = apply_crf(prob, cref, both);
    Volume b = apply_crf(prob, cref, gauss_only);
    for (std::size_t i = 0; i < a.data().size(); ++i)
        CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-6));
}

TEST_CASE("CRF matches the dense pairwise oracle on a 16x16 slice") {
    Rng rng(100);
    Volume prob(Dims{1, 16, 16}, Spacing{1, 1, 1});
    Volume ref(Dims{1, 16, 16}, Spacing{1, 1, 1});
    for (std::size_t i = 0; i < prob.data().size(); ++i) {
        prob.data()[i] = float(rng.uniform(0.02, 0.98));
        ref.data()[i] = float(rng.uniform(0.0, 2.0));
    }
    CrfParams p; // paper defaults: widths 1, weights 1
    p.iterations = 2;
    Volume impl = apply_crf(prob, ref, p);
    Volume oracle = crf_dense_oracle(prob, ref, p);
    double worst = 0.0;
    for (std::size_t i = 0; i < impl.data().size(); ++i)
        worst = std::max(worst, std::abs(double(impl.data()[i]) - double(oracle.data()[i])));
    INFO("max abs diff " << worst);
    CHECK(worst < 1e-4);
}

TEST_CASE("CRF with small weights never moves a well-separated argmax") {
    Rng rng(101);
    for (int trial = 0; trial < 5; ++trial) {
        Volume prob(Dims{1, 20, 20}, Spacing{1, 1, 1});
        for (auto& x : prob.data())
            x = float(rng.uniform(0.0, 0.05));
        // Strong peak with margin >= 0.5 over the secondary blob.
        const int pr = 4 + int(rng.uniform_index(4)), pc = 4 + int(rng.uniform_index(4));
        prob.at(0, pr, pc) = 0.95f;
        prob.at(0, pr + 1, pc) = 0.8f;
        prob.at(0, 14, 14) = 0.35f;
        Volume ref = prob;
        CrfParams p;
        p.gaussian_weight = 0.1;
        p.bilateral_weight = 0.1;
        Volume out = apply_crf(prob, ref, p);
        const auto argmax = [](const Volume& v) {
            return std::max_element(v.data().begin(), v.data().end()) - v.data().begin();
        };
        CHECK(argmax(out) == argmax(prob));
    }
}
