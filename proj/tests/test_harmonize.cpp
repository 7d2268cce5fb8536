#include <algorithm>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "voxelseg/harmonize.hpp"
#include "voxelseg/rng.hpp"

using namespace voxelseg;
using namespace voxelseg::harmonize;
namespace fs = std::filesystem;

namespace {

Volume filled(Dims d, float v) { return Volume(d, Spacing{2.0, 0.7, 0.7}, v); }

ExamBundle simple_exam(Dims d, float t1v, std::vector<std::pair<float, double>> posts) {
    ExamBundle b;
    b.t1 = filled(d, t1v);
    for (auto [v, t] : posts)
        b.t1c_series.emplace_back(filled(d, v), t);
    b.scanner_id = "s";
    b.exam_id = "e";
    return b;
}

double ks_against_chi2_4(std::vector<double> sample) {
    std::sort(sample.begin(), sample.end());
    const double n = double(sample.size());
    double ks = 0.0;
    for (std::size_t i = 0; i < sample.size(); ++i) {
        const double F = chi2_4_cdf(sample[i]);
        ks = std::max(ks, std::abs(F - double(i + 1) / n));
        ks = std::max(ks, std::abs(F - double(i) / n));
    }
    return ks;
}

} // namespace

TEST_CASE("upsample_inplane_x2: constant, ramp, dims") {
    Volume c = filled(Dims{3, 4, 5}, 7.5f);
    Volume uc = upsample_inplane_x2(c);
    CHECK(uc.dims() == Dims{3, 8, 10});
    CHECK(uc.spacing().row_mm == doctest::Approx(0.35));
    for (float v : uc.data())
        CHECK(v == 7.5f);

    // In-plane ramp f(r,c) = r + c upsamples to the half-step ramp exactly.
    Volume ramp(Dims{2, 6, 7}, Spacing{2, 1, 1});
    for (int s = 0; s < 2; ++s)
        for (int r = 0; r < 6; ++r)
            for (int col = 0; col < 7; ++col)
                ramp.at(s, r, col) = float(r + col);
    Volume ur = upsample_inplane_x2(ramp);
    for (int s = 0; s < 2; ++s)
        for (int r = 0; r < 12; ++r)
            for (int col = 0; col < 14; ++col)
                CHECK(double(ur.at(s, r, col)) ==
                      doctest::Approx((r + col) / 2.0).epsilon(1e-6));

    CHECK(upsample_inplane_x2(filled(Dims{8, 64, 64}, 0.0f)).dims() == Dims{8, 128, 128});
}

TEST_CASE("scale_by_t1_p95 on the 1..100 exam (sort-based oracle)") {
    ExamBundle b = simple_exam(Dims{1, 10, 10}, 0.0f, {{2.0f, 1.0}});
    for (int i = 0; i < 100; ++i)
        b.t1.data()[std::size_t(i)] = float(i + 1);
    const double s = t1_p95_scale(b);
    // Order statistics 1..100, rank 0.95*99 = 94.05 -> 95 + 0.05*(96-95).
    CHECK(s == doctest::Approx(95.05).epsilon(1e-12));
    ExamBundle scaled = scale_by_t1_p95(b);
    CHECK(t1_p95_scale(scaled) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("scale_by_t1_p95 is homogeneous and idempotent; all-zero T1 errors") {
    Rng rng(81);
    ExamBundle b = simple_exam(Dims{2, 8, 8}, 0.0f, {{0.0f, 1.0}, {0.0f, 2.5}});
    for (auto& x : b.t1.data())
        x = float(rng.uniform(0.0, 50.0));
    for (auto& [vol, t] : b.t1c_series)
        for (auto& x : vol.data())
            x = float(rng.uniform(0.0, 80.0));

    ExamBundle pre = b;
    for (auto& x : pre.t1.data())
        x *= 3.0f;
    for (auto& [vol, t] : pre.t1c_series)
        for (auto& x : vol.data())
            x *= 3.0f;

    ExamBundle sb = scale_by_t1_p95(b);
    ExamBundle sp = scale_by_t1_p95(pre);
    for (std::size_t i = 0; i < sb.t1.data().size(); ++i)
        CHECK(double(sp.t1.data()[i]) == doctest::Approx(double(sb.t1.data()[i])).epsilon(1e-6));

    // Idempotence within 1e-6.
    ExamBundle twice = scale_by_t1_p95(sb);
    for (std::size_t i = 0; i < sb.t1.data().size(); ++i)
        CHECK(double(twice.t1.data()[i]) ==
              doctest::Approx(double(sb.t1.data()[i])).epsilon(1e-6));

    ExamBundle zero = simple_exam(Dims{1, 4, 4}, 0.0f, {{1.0f, 1.0}});
    CHECK_THROWS_AS(scale_by_t1_p95(zero), DataError);
}

TEST_CASE("chi2(4) closed form round-trips its inverse") {
    for (double p : {0.001, 0.01, 0.25, 0.5, 0.75, 0.99, 0.999}) {
        const double x = chi2_4_inv(p);
        CHECK(chi2_4_cdf(x) == doctest::Approx(p).epsilon(1e-8));
    }
    CHECK(chi2_4_cdf(0.0) == 0.0);
}

namespace {

/// Packs a sample into a (volume, full mask) pair for fitting.
struct MaskedSample {
    Volume vol;
    SegmentationMask mask;
};

MaskedSample pack(const std::vector<double>& sample) {
    const int n = int(sample.size());
    const int cols = 1000;
    const int rows = (n + cols - 1) / cols;
    MaskedSample ms{Volume(Dims{1, rows, cols}, Spacing{1, 1, 1}),
                    SegmentationMask(Dims{1, rows, cols}, MaskSource::ground_truth)};
    for (int i = 0; i < n; ++i) {
        ms.vol.data()[std::size_t(i)] = float(sample[std::size_t(i)]);
        ms.mask.values()[std::size_t(i)] = 1;
    }
    return ms;
}

} // namespace

TEST_CASE("fit_scanner_map on chi2(4) data is near-identity (quantile oracle)") {
    Rng rng(82);
    const int n = 1000000;
    std::vector<double> sample(std::size_t(n), 0.0);
    for (auto& x : sample) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) {
            const double z = rng.normal();
            acc += z * z;
        }
        x = acc;
    }
    MaskedSample ms = pack(sample);
    IntensityMap m = fit_scanner_map({{&ms.vol, &ms.mask}}, "chi");

    const double q01 = chi2_4_inv(0.01), q99 = chi2_4_inv(0.99);
    const double band = q99 - q01;
    double sup = 0.0;
    for (int k = 0; k <= 200; ++k) {
        const double x = q01 + band * double(k) / 200.0;
        sup = std::max(sup, std::abs(m(x) - x));
    }
    CHECK(sup < 0.02 * band);
}

TEST_CASE("fit_scanner_map sends exponential(1) data to chi2(4): KS oracle") {
    Rng rng(83);
    const int n = 1000000;
    std::vector<double> sample(std::size_t(n), 0.0);
    for (auto& x : sample)
        x = -std::log(1.0 - rng.uniform());
    MaskedSample ms = pack(sample);
    IntensityMap m = fit_scanner_map({{&ms.vol, &ms.mask}}, "exp");

    std::vector<double> mapped(sample.size());
    for (std::size_t i = 0; i < sample.size(); ++i)
        mapped[i] = m(sample[i]);
    CHECK(ks_against_chi2_4(std::move(mapped)) < 0.01);

    // Held-out draw from the同 source distribution, n = 1e5.
    std::vector<double> held(100000);
    for (auto& x : held)
        x = m(-std::log(1.0 - rng.uniform()));
    CHECK(ks_against_chi2_4(std::move(held)) < 0.05);
}

TEST_CASE("fit_scanner_map flags constant masked regions as degenerate") {
    std::vector<double> sample(std::size_t(500), 4.2);
    MaskedSample ms = pack(sample);
    CHECK_THROWS_AS(fit_scanner_map({{&ms.vol, &ms.mask}}, "flat"), NumericalError);

    // Empty mask is a data error.
    ms.mask.values().assign(ms.mask.values().size(), 0);
    CHECK_THROWS_AS(fit_scanner_map({{&ms.vol, &ms.mask}}, "empty"), DataError);
}

TEST_CASE("apply_intensity_map: identity, affine, argmax stability, CSV round-trip") {
    Rng rng(84);
    Volume v = filled(Dims{2, 6, 6}, 0.0f);
    for (auto& x : v.data())
        x = float(rng.uniform(0.0, 10.0));

    IntensityMap ident{"id", {0.0, 10.0}, {0.0, 10.0}};
    Volume vi = apply_intensity_map(v, ident);
    for (std::size_t i = 0; i < v.data().size(); ++i)
        CHECK(vi.data()[i] == doctest::Approx(v.data()[i]).epsilon(1e-6));

    IntensityMap affine{"aff", {0.0, 10.0}, {1.0, 21.0}}; // 2x + 1
    Volume va = apply_intensity_map(v, affine);
    for (std::size_t i = 0; i < v.data().size(); ++i)
        CHECK(double(va.data()[i]) ==
              doctest::Approx(2.0 * double(v.data()[i]) + 1.0).epsilon(1e-6));

    // Fitted map keeps the argmax where it was (monotonicity oracle).
    std::vector<double> sample(v.data().begin(), v.data().end());
    // Enlarge the sample so quantiles are well-posed.
    for (int i = 0; i < 5000; ++i)
        sample.push_back(rng.uniform(0.0, 10.0));
    MaskedSample ms = pack(sample);
    IntensityMap fitted = fit_scanner_map({{&ms.vol, &ms.mask}}, "fit");
    Volume vf = apply_intensity_map(v, fitted);
    const auto argmax = [](const Volume& x) {
        return std::max_element(x.data().begin(), x.data().end()) - x.data().begin();
    };
    CHECK(argmax(vf) == argmax(v));

    const auto dir = fs::temp_directory_path() / "voxelseg_maps";
    fs::create_directories(dir);
    fitted.save_csv(dir / "map.csv");
    IntensityMap loaded = IntensityMap::load_csv(dir / "map.csv");
    CHECK(loaded.scanner_id == "fit");
    REQUIRE(loaded.source.size() == fitted.source.size());
    for (std::size_t i = 0; i < loaded.source.size(); ++i) {
        CHECK(loaded.source[i] == doctest::Approx(fitted.source[i]).epsilon(1e-12));
        CHECK(loaded.target[i] == doctest::Approx(fitted.target[i]).epsilon(1e-12));
    }
    fs::remove_all(dir);
}

TEST_CASE("apply_intensity_map preserves voxel-value ordering") {
    Rng rng(85);
    std::vector<double> sample(20000);
    for (auto& x : sample)
        x = rng.uniform(0.0, 5.0);
    MaskedSample ms = pack(sample);
    IntensityMap m = fit_scanner_map({{&ms.vol, &ms.mask}}, "ord");
    for (int trial = 0; trial < 2000; ++trial) {
        const double a = rng.uniform(0.0, 5.0);
        const double b = rng.uniform(0.0, 5.0);
        if (a == b)
            continue;
        CHECK(((a < b) == (m(a) < m(b)) || m(a) == m(b)));
        // Strict ordering inside the fitted range:
        if (std::abs(a - b) > 1e-3)
            CHECK((a < b) == (m(a) < m(b)));
    }
}

TEST_CASE("compute_dce basics") {
    // t1c == t1 everywhere -> dce_in all zeros.
    ExamBundle same = simple_exam(Dims{1, 3, 3}, 5.0f, {{5.0f, 1.0}});
    DcePair d0 = compute_dce(same);
    for (float x : d0.dce_in.data())
        CHECK(x == 0.0f);
    for (float x : d0.dce_out.data())
        CHECK(x == 0.0f); // single post-contrast volume

    // Voxel series (1.0, 1.5, 2.0) at t = (1, 2, 3) -> slope 0.5 min^-1.
    ExamBundle b = simple_exam(Dims{1, 2, 2}, 0.5f,
                               {{1.0f, 1.0}, {1.5f, 2.0}, {2.0f, 3.0}});
    DcePair d1 = compute_dce(b);
    CHECK(double(d1.dce_out.at(0, 0, 0)) == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(double(d1.dce_in.at(0, 0, 0)) == doctest::Approx(0.5).epsilon(1e-9));

    // All posts identical -> zero slope.
    ExamBundle flat = simple_exam(Dims{1, 2, 2}, 0.0f,
                                  {{2.0f, 1.0}, {2.0f, 2.5}, {2.0f, 4.0}});
    const DcePair dflat = compute_dce(flat);
    for (float x : dflat.dce_out.data())
        CHECK(std::abs(x) < 1e-7f);
}

TEST_CASE("compute_dce recovers affine-in-time slopes exactly (<= 1e-6)") {
    Rng rng(86);
    const Dims d{2, 4, 4};
    ExamBundle b;
    b.t1 = filled(d, 1.0f);
    b.scanner_id = "s";
    b.exam_id = "aff";
    const std::vector<double> times{1.0, 2.5, 4.0, 6.5};
    std::vector<float> slopes(std::size_t(d.count()));
    std::vector<float> intercepts(std::size_t(d.count()));
    for (std::size_t i = 0; i < slopes.size(); ++i) {
        slopes[i] = float(rng.uniform(-1.0, 1.0));
        intercepts[i] = float(rng.uniform(0.0, 3.0));
    }
    for (double t : times) {
        Volume v = filled(d, 0.0f);
        for (std::size_t i = 0; i < slopes.size(); ++i)
            v.data()[i] = float(double(intercepts[i]) + double(slopes[i]) * t);
        b.t1c_series.emplace_back(std::move(v), t);
    }
    DcePair dce = compute_dce(b);
    for (std::size_t i = 0; i < slopes.size(); ++i)
        CHECK(std::abs(double(dce.dce_out.data()[i]) - double(slopes[i])) <= 1e-6);
}

TEST_CASE("make_model_input channel layout") {
    ExamBundle b = simple_exam(Dims{1, 3, 3}, 1.0f,
                               {{2.0f, 1.0}, {2.5f, 2.5}, {3.0f, 4.0}});
    ModelInput mi = make_model_input(b);
    REQUIRE(mi.channels.size() == 3);
    CHECK(mi.channels[0] == b.t1c_series[0].first);
    // channel 1 == channel 0 - t1 voxelwise
    for (std::size_t i = 0; i < mi.channels[1].data().size(); ++i)
        CHECK(mi.channels[1].data()[i] ==
              doctest::Approx(mi.channels[0].data()[i] - b.t1.data()[i]).epsilon(1e-7));

    ExamBundle one = simple_exam(Dims{1, 3, 3}, 1.0f, {{2.0f, 1.0}});
    ModelInput mo = make_model_input(one);
    REQUIRE(mo.channels.size() == 3);
    for (float x : mo.channels[2].data())
        CHECK(x == 0.0f);

    // T2 channel is appended when requested and present.
    ExamBundle witht2 = simple_exam(Dims{1, 3, 3}, 1.0f, {{2.0f, 1.0}});
    witht2.t2 = filled(Dims{1, 3, 3}, 9.0f);
    ModelInputOptions opt;
    opt.use_t2 = true;
    CHECK(make_model_input(witht2, opt).channels.size() == 4);
    ModelInputOptions no_dce;
    no_dce.use_dce = false;
    CHECK(make_model_input(witht2, no_dce).channels.size() == 1);
}
