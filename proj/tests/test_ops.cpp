#include <cmath>
#include <vector>

#include "doctest.h"
#include "voxelseg/ops.hpp"
#include "voxelseg/rng.hpp"

using namespace voxelseg;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(s);
    for (std::int64_t i = 0; i < t.size(); ++i)
        t.data()[i] = float(rng.uniform(lo, hi));
    return t;
}

/// Naive 6-nested-loop valid cross-correlation in double; the independent
/// oracle for the kernel implementations.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, const Tensor& b) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    const int od = xs.d - ws.d + 1, oh = xs.h - ws.h + 1, ow = xs.w - ws.w + 1;
    std::vector<double> out(std::size_t(xs.b) * ws.b * od * oh * ow, 0.0);
    std::size_t idx = 0;
    for (int bi = 0; bi < xs.b; ++bi)
        for (int co = 0; co < ws.b; ++co)
            for (int z = 0; z < od; ++z)
                for (int y = 0; y < oh; ++y)
                    for (int xx = 0; xx < ow; ++xx) {
                        double acc = b.size() ? double(b.data()[co]) : 0.0;
                        for (int ci = 0; ci < xs.c; ++ci)
                            for (int dz = 0; dz < ws.d; ++dz)
                                for (int dy = 0; dy < ws.h; ++dy)
                                    for (int dx = 0; dx < ws.w; ++dx)
                                        acc += double(x.at(bi, ci, z + dz, y + dy, xx + dx)) *
                                               double(w.at(co, ci, dz, dy, dx));
                        out[idx++] = acc;
                    }
    return out;
}

} // namespace

TEST_CASE("conv3d with a delta kernel is a center crop") {
    Rng rng(31);
    Tensor x = random_tensor(Shape{1, 1, 5, 6, 7}, rng);
    Tensor w(Shape{1, 1, 3, 3, 3});
    w.at(0, 0, 1, 1, 1) = 1.0f;
    Tensor b(Shape{1, 1, 1, 1, 1});
    Tensor y = ops::conv3d_valid(x, w, b);
    CHECK(y.shape() == Shape{1, 1, 3, 4, 5});
    for (int d = 0; d < 3; ++d)
        for (int h = 0; h < 4; ++h)
            for (int ww = 0; ww < 5; ++ww)
                CHECK(y.at(0, 0, d, h, ww) == doctest::Approx(x.at(0, 0, d + 1, h + 1, ww + 1))
                                                   .epsilon(1e-12));
}

TEST_CASE("conv3d shape: 19x75x75 shrinks to 17x73x73") {
    Rng rng(32);
    Tensor x = random_tensor(Shape{1, 1, 19, 75, 75}, rng);
    Tensor w = random_tensor(Shape{1, 1, 3, 3, 3}, rng);
    Tensor y = ops::conv3d_valid(x, w, Tensor{});
    CHECK(y.shape() == Shape{1, 1, 17, 73, 73});
}

TEST_CASE("conv3d matches the naive 6-loop oracle") {
    Rng rng(33);
    Tensor x = random_tensor(Shape{1, 1, 4, 4, 4}, rng);
    Tensor w = random_tensor(Shape{2, 1, 3, 3, 3}, rng);
    Tensor b = random_tensor(Shape{2, 1, 1, 1, 1}, rng);
    Tensor y = ops::conv3d_valid(x, w, b);
    const auto oracle = naive_conv(x, w, b);
    REQUIRE(std::int64_t(oracle.size()) == y.size());
    for (std::size_t i = 0; i < oracle.size(); ++i)
        CHECK(double(y.data()[i]) == doctest::Approx(oracle[i]).epsilon(1e-5));
}

TEST_CASE("conv1x1 basics and matmul oracle") {
    Rng rng(34);
    Tensor x = random_tensor(Shape{1, 3, 2, 4, 5}, rng);

    // Identity channel matrix leaves the input unchanged.
    Tensor wid(Shape{3, 3, 1, 1, 1});
    for (int c = 0; c < 3; ++c)
        wid.at(c, c, 0, 0, 0) = 1.0f;
    Tensor y = ops::conv1x1(x, wid, Tensor{});
    CHECK(y.vec() == x.vec());

    // All-ones 3->1 kernel sums channels.
    Tensor wsum(Shape{1, 3, 1, 1, 1}, std::vector<float>(3, 1.0f));
    Tensor s = ops::conv1x1(x, wsum, Tensor{});
    for (int d = 0; d < 2; ++d)
        for (int h = 0; h < 4; ++h)
            for (int w = 0; w < 5; ++w)
                CHECK(s.at(0, 0, d, h, w) ==
                      doctest::Approx(x.at(0, 0, d, h, w) + x.at(0, 1, d, h, w) +
                                      x.at(0, 2, d, h, w))
                          .epsilon(1e-6));

    // Random case against a per-voxel matrix multiply.
    Tensor wr = random_tensor(Shape{4, 3, 1, 1, 1}, rng);
    Tensor br = random_tensor(Shape{4, 1, 1, 1, 1}, rng);
    Tensor r = ops::conv1x1(x, wr, br);
    for (int co = 0; co < 4; ++co)
        for (int d = 0; d < 2; ++d)
            for (int h = 0; h < 4; ++h)
                for (int w = 0; w < 5; ++w) {
                    double acc = br.data()[co];
                    for (int ci = 0; ci < 3; ++ci)
                        acc += double(wr.at(co, ci, 0, 0, 0)) * double(x.at(0, ci, d, h, w));
                    CHECK(double(r.at(0, co, d, h, w)) == doctest::Approx(acc).epsilon(1e-5));
                }

    // Channel mismatch is an error.
    CHECK_THROWS_AS(ops::conv1x1(x, random_tensor(Shape{2, 5, 1, 1, 1}, rng), Tensor{}),
                    DataError);
}

TEST_CASE("avg_pool3_s2 basics") {
    Rng rng(35);

    Tensor c(Shape{1, 2, 5, 5, 5}, std::vector<float>(250, 3.25f));
    Tensor pc = ops::avg_pool3_s2(c);
    CHECK(pc.shape() == Shape{1, 2, 2, 2, 2});
    for (float v : pc.vec())
        CHECK(v == 3.25f);

    Tensor line = random_tensor(Shape{1, 1, 3, 3, 75}, rng);
    CHECK(ops::avg_pool3_s2(line).shape().w == 37);

    // Windowed-mean oracle.
    Tensor x = random_tensor(Shape{1, 1, 5, 7, 9}, rng);
    Tensor p = ops::avg_pool3_s2(x);
    for (int z = 0; z < p.shape().d; ++z)
        for (int y = 0; y < p.shape().h; ++y)
            for (int w = 0; w < p.shape().w; ++w) {
                double acc = 0.0;
                for (int dz = 0; dz < 3; ++dz)
                    for (int dy = 0; dy < 3; ++dy)
                        for (int dx = 0; dx < 3; ++dx)
                            acc += double(x.at(0, 0, 2 * z + dz, 2 * y + dy, 2 * w + dx));
                CHECK(double(p.at(0, 0, z, y, w)) == doctest::Approx(acc / 27.0).epsilon(1e-6));
            }

    CHECK_THROWS_AS(ops::avg_pool3_s2(random_tensor(Shape{1, 1, 2, 5, 5}, rng)), DataError);
}

TEST_CASE("bilinear_up_x2 reproduces exact linear interpolation") {
    // 1-D ramp (0,1,2) along the w axis; interior of the upsampled axis must
    // read (0, 0.5, 1, 1.5, 2).
    Tensor x(Shape{1, 1, 1, 1, 3}, std::vector<float>{0.0f, 1.0f, 2.0f});
    Tensor u = ops::bilinear_up(x, {false, false, true});
    CHECK(u.shape().w == 7);
    const std::vector<float> expect_interior{0.0f, 0.5f, 1.0f, 1.5f, 2.0f};
    for (int i = 0; i < 5; ++i)
        CHECK(u.at(0, 0, 0, 0, i + 1) == doctest::Approx(expect_interior[std::size_t(i)])
                                              .epsilon(1e-9));
}

TEST_CASE("upsampled constant has exactly zero parity-subgrid difference") {
    Rng rng(36);
    const float cval = 0.8125f;
    Tensor c(Shape{1, 1, 3, 4, 5}, std::vector<float>(60, cval));
    Tensor u = ops::bilinear_up_x2(c);
    CHECK(u.shape() == Shape{1, 1, 7, 9, 11});
    // Interior: all voxels away from the first/last index per axis. Compare
    // even- vs odd-parity subgrids; the difference must be exactly zero.
    for (int d = 1; d + 1 < 7; ++d)
        for (int h = 1; h + 1 < 9; ++h)
            for (int w = 1; w + 2 < 11; ++w)
                CHECK(u.at(0, 0, d, h, w) - u.at(0, 0, d, h, w + 1) == 0.0f);
}

TEST_CASE("bilinear_up_x2 even-subgrid sampling recovers the input") {
    Rng rng(37);
    Tensor x = random_tensor(Shape{1, 2, 3, 4, 5}, rng);
    Tensor u = ops::bilinear_up_x2(x);
    for (int c = 0; c < 2; ++c)
        for (int d = 0; d < 3; ++d)
            for (int h = 0; h < 4; ++h)
                for (int w = 0; w < 5; ++w)
                    CHECK(u.at(0, c, 2 * d + 1, 2 * h + 1, 2 * w + 1) == x.at(0, c, d, h, w));
}

TEST_CASE("pool then upsample of a constant field is constant in the interior") {
    const float cval = -2.5f;
    Tensor c(Shape{1, 1, 7, 9, 9}, std::vector<float>(std::size_t(7 * 9 * 9), cval));
    Tensor u = ops::bilinear_up_x2(ops::avg_pool3_s2(c));
    const Shape& s = u.shape();
    for (int d = 1; d + 1 < s.d; ++d)
        for (int h = 1; h + 1 < s.h; ++h)
            for (int w = 1; w + 1 < s.w; ++w)
                CHECK(u.at(0, 0, d, h, w) == doctest::Approx(cval).epsilon(1e-12));
}

TEST_CASE("concat_crop") {
    Rng rng(38);
    Tensor a = random_tensor(Shape{1, 2, 3, 4, 5}, rng);
    Tensor b = random_tensor(Shape{1, 3, 3, 4, 5}, rng);

    Tensor eq = ops::concat_crop(a, b);
    CHECK(eq.shape() == Shape{1, 5, 3, 4, 5});
    CHECK(eq.at(0, 0, 1, 2, 3) == a.at(0, 0, 1, 2, 3));
    CHECK(eq.at(0, 2, 1, 2, 3) == b.at(0, 0, 1, 2, 3));

    // a spatially 2 larger per axis: crop 1 voxel per border, then concat.
    Tensor big = random_tensor(Shape{1, 2, 5, 6, 7}, rng);
    Tensor sm = random_tensor(Shape{1, 1, 3, 4, 5}, rng);
    Tensor cc = ops::concat_crop(big, sm);
    CHECK(cc.shape().c == 3);
    CHECK(cc.at(0, 0, 0, 0, 0) == big.at(0, 0, 1, 1, 1));

    // Odd margin: impossible to crop symmetrically.
    Tensor odd = random_tensor(Shape{1, 1, 4, 4, 5}, rng);
    CHECK_THROWS_AS(ops::concat_crop(odd, sm), DataError);
}

TEST_CASE("relu and softmax basics") {
    Tensor x(Shape{1, 1, 1, 1, 2}, std::vector<float>{-1.0f, 2.0f});
    Tensor r = ops::relu(x);
    CHECK(r.data()[0] == 0.0f);
    CHECK(r.data()[1] == 2.0f);

    Tensor logits(Shape{1, 2, 1, 1, 3}, std::vector<float>{0.7f, 0.7f, -2.0f,
                                                           0.7f, 0.7f, -2.0f});
    Tensor p = ops::softmax_channels(logits);
    for (int v = 0; v < 3; ++v) {
        CHECK(p.at(0, 0, 0, 0, v) == doctest::Approx(0.5).epsilon(1e-6));
        CHECK(p.at(0, 1, 0, 0, v) == doctest::Approx(0.5).epsilon(1e-6));
    }
}

TEST_CASE("softmax is shift-invariant and normalized") {
    Rng rng(39);
    Tensor x = random_tensor(Shape{2, 3, 2, 3, 4}, rng, -3.0, 3.0);
    Tensor p = ops::softmax_channels(x);

    Tensor shifted = x;
    const std::int64_t voxels = x.shape().voxels();
    for (int b = 0; b < 2; ++b)
        for (std::int64_t v = 0; v < voxels; ++v) {
            const float delta = float(rng.uniform(-2.0, 2.0));
            for (int c = 0; c < 3; ++c)
                shifted.data()[(std::int64_t(b) * 3 + c) * voxels + v] += delta;
        }
    Tensor q = ops::softmax_channels(shifted);
    for (std::int64_t i = 0; i < p.size(); ++i)
        CHECK(double(p.data()[i]) == doctest::Approx(double(q.data()[i])).epsilon(1e-6));

    for (int b = 0; b < 2; ++b)
        for (std::int64_t v = 0; v < voxels; ++v) {
            double sum = 0.0;
            for (int c = 0; c < 3; ++c)
                sum += double(p.data()[(std::int64_t(b) * 3 + c) * voxels + v]);
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
}
