#include <cmath>

#include "doctest.h"
#include "voxelseg/gradcheck.hpp"
#include "voxelseg/init.hpp"
#include "voxelseg/ops.hpp"

using namespace voxelseg;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(s);
    for (std::int64_t i = 0; i < t.size(); ++i)
        t.data()[i] = float(rng.uniform(lo, hi));
    return t;
}

NetworkGraph conv_graph(int cin, int cout, std::array<int, 3> extents, Rng& rng) {
    NetworkGraph g;
    const int in = g.add_input(cin);
    const int w = g.add_parameter(
        "conv.w", init_glorot_uniform(Shape{cout, cin, extents[0], extents[1], extents[2]}, rng),
        true);
    const int b = g.add_parameter("conv.b", Tensor(Shape{cout, 1, 1, 1, 1}), true);
    g.set_output(g.add_conv(in, w, b, "conv"));
    return g;
}

} // namespace

TEST_CASE("grad check: conv3d on random 1x2x5x5x5 < 1e-4") {
    Rng rng(51);
    NetworkGraph g = conv_graph(2, 3, {3, 3, 3}, rng);
    const Tensor x = random_tensor(Shape{1, 2, 5, 5, 5}, rng);
    const auto rep = grad_check(g, std::span(&x, 1));
    INFO("worst at " << rep.worst_site);
    CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("grad check: pointwise conv < 1e-4") {
    Rng rng(52);
    NetworkGraph g = conv_graph(3, 2, {1, 1, 1}, rng);
    const Tensor x = random_tensor(Shape{2, 3, 2, 3, 3}, rng);
    CHECK(grad_check(g, std::span(&x, 1)).max_rel_error < 1e-4);
}

TEST_CASE("grad check: relu probed away from zero < 1e-6") {
    Rng rng(53);
    NetworkGraph g;
    const int in = g.add_input(2);
    g.set_output(g.add_relu(in));
    Tensor x(Shape{1, 2, 3, 3, 3});
    for (std::int64_t i = 0; i < x.size(); ++i) {
        // Keep probes away from the kink: |x| >= 0.1 > the 1e-3 step.
        const double v = rng.uniform(0.1, 1.0);
        x.data()[i] = float(rng.uniform() < 0.5 ? -v : v);
    }
    CHECK(grad_check(g, std::span(&x, 1)).max_rel_error < 1e-6);
}

TEST_CASE("grad check: avg_pool3_s2 < 1e-4") {
    Rng rng(54);
    NetworkGraph g;
    const int in = g.add_input(2);
    g.set_output(g.add_avg_pool(in, {3, 3, 3}, {2, 2, 2}));
    const Tensor x = random_tensor(Shape{1, 2, 5, 5, 7}, rng);
    CHECK(grad_check(g, std::span(&x, 1)).max_rel_error < 1e-4);
}

TEST_CASE("grad check: bilinear_up_x2 < 1e-4 and taps stay non-trainable") {
    Rng rng(55);
    NetworkGraph g;
    const int in = g.add_input(2);
    g.set_output(g.add_bilinear_up(in, {true, true, true}, "up"));
    REQUIRE(g.parameters().size() == 1);
    CHECK(!g.parameters()[0].trainable);
    const Tensor x = random_tensor(Shape{1, 2, 3, 4, 4}, rng);
    CHECK(grad_check(g, std::span(&x, 1)).max_rel_error < 1e-4);
}

TEST_CASE("grad check: center_crop and concat_crop < 1e-4") {
    Rng rng(56);
    NetworkGraph g;
    const int a = g.add_input(2);
    const int b = g.add_input(1);
    const int cat = g.add_concat_crop(a, b, "skip");
    g.set_output(g.add_center_crop(cat, {1, 3, 3}, "trim"));
    const Tensor xa = random_tensor(Shape{1, 2, 5, 7, 7}, rng);
    const Tensor xb = random_tensor(Shape{1, 1, 3, 5, 5}, rng);
    const std::array<Tensor, 2> inputs{xa, xb};
    CHECK(grad_check(g, std::span(inputs.data(), 2)).max_rel_error < 1e-4);
}

TEST_CASE("grad check: softmax + generalized dice loss < 1e-4") {
    Rng rng(57);
    NetworkGraph g;
    const int in = g.add_input(2);
    g.set_output(g.add_softmax(in));
    const Tensor x = random_tensor(Shape{1, 2, 1, 4, 4}, rng, -2.0, 2.0);

    Tensor target(Shape{1, 2, 1, 4, 4});
    for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 4; ++w) {
            const bool fg = rng.uniform() < 0.4;
            target.at(0, fg ? 1 : 0, 0, h, w) = 1.0f;
        }
    GradCheckOptions opt;
    opt.dice_target = &target;
    const auto rep = grad_check(g, std::span(&x, 1), opt);
    INFO("worst at " << rep.worst_site);
    CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("grad check: small conv stack end-to-end < 1e-3") {
    Rng rng(58);
    NetworkGraph g;
    const int in = g.add_input(2);
    const int w1 = g.add_parameter("c1.w", init_glorot_uniform(Shape{3, 2, 3, 3, 3}, rng), true);
    const int b1 = g.add_parameter("c1.b", Tensor(Shape{3, 1, 1, 1, 1}), true);
    const int c1 = g.add_conv(in, w1, b1, "c1");
    const int r1 = g.add_relu(c1);
    const int w2 = g.add_parameter("c2.w", init_glorot_uniform(Shape{2, 3, 1, 1, 1}, rng), true);
    const int b2 = g.add_parameter("c2.b", Tensor(Shape{2, 1, 1, 1, 1}), true);
    const int c2 = g.add_conv(r1, w2, b2, "c2");
    g.set_output(g.add_softmax(c2));

    const Tensor x = random_tensor(Shape{1, 2, 5, 6, 6}, rng);
    Tensor target(Shape{1, 2, 3, 4, 4});
    for (int d = 0; d < 3; ++d)
        for (int h = 0; h < 4; ++h)
            for (int w = 0; w < 4; ++w)
                target.at(0, rng.uniform() < 0.3 ? 1 : 0, d, h, w) = 1.0f;
    GradCheckOptions opt;
    opt.dice_target = &target;
    CHECK(grad_check(g, std::span(&x, 1), opt).max_rel_error < 1e-3);
}

TEST_CASE("float engine matches the double mirror") {
    Rng rng(59);
    NetworkGraph g;
    const int in = g.add_input(2);
    const int w1 = g.add_parameter("c1.w", init_glorot_uniform(Shape{4, 2, 3, 3, 3}, rng), true);
    const int b1 = g.add_parameter("c1.b", Tensor(Shape{4, 1, 1, 1, 1}), true);
    const int c1 = g.add_conv(in, w1, b1, "c1");
    const int r1 = g.add_relu(c1);
    const int p1 = g.add_avg_pool(r1, {1, 3, 3}, {1, 2, 2});
    const int u1 = g.add_bilinear_up(p1, {false, true, true}, "up1");
    g.set_output(g.add_softmax(u1));

    const Tensor x = random_tensor(Shape{2, 2, 3, 9, 9}, rng);
    const Tensor& yf = g.forward(std::span(&x, 1));

    DoubleExec mirror(g);
    DTensor dx(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i)
        dx.data()[i] = double(x.data()[i]);
    const DTensor& yd = mirror.forward(std::span(&dx, 1));

    REQUIRE(yf.shape() == yd.shape());
    for (std::int64_t i = 0; i < yf.size(); ++i)
        CHECK(double(yf.data()[i]) == doctest::Approx(yd.data()[i]).epsilon(1e-5));
}

TEST_CASE("forward passes are deterministic: same seed, same input, same bits") {
    Rng rng_a(60), rng_b(60);
    NetworkGraph ga = conv_graph(2, 3, {3, 3, 3}, rng_a);
    NetworkGraph gb = conv_graph(2, 3, {3, 3, 3}, rng_b);
    Rng xr_a(61), xr_b(61);
    const Tensor xa = random_tensor(Shape{1, 2, 5, 5, 5}, xr_a);
    const Tensor xb = random_tensor(Shape{1, 2, 5, 5, 5}, xr_b);
    const Tensor ya = ga.forward(std::span(&xa, 1));
    const Tensor yb = gb.forward(std::span(&xb, 1));
    CHECK(ya.vec() == yb.vec());
    // And twice through the same graph.
    const Tensor yc = ga.forward(std::span(&xa, 1));
    CHECK(ya.vec() == yc.vec());
}
