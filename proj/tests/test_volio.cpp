#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "voxelseg/rng.hpp"
#include "voxelseg/volume.hpp"

using namespace voxelseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* suffix) {
    auto p = fs::temp_directory_path() / (std::string("voxelseg_volio_") + suffix);
    fs::remove_all(p);
    return p;
}

Volume random_volume(Dims d, Rng& rng, float lo = 0.0f, float hi = 100.0f) {
    Volume v(d, Spacing{2.0, 0.7, 0.7});
    for (auto& x : v.data())
        x = float(rng.uniform(lo, hi));
    return v;
}

ExamBundle random_bundle(Rng& rng, bool with_t2 = true) {
    const Dims d{4, 6, 5};
    ExamBundle b;
    b.t1 = random_volume(d, rng);
    b.t1c_series.emplace_back(random_volume(d, rng), 1.0);
    b.t1c_series.emplace_back(random_volume(d, rng), 2.5);
    b.t1c_series.emplace_back(random_volume(d, rng), 4.0);
    if (with_t2)
        b.t2 = random_volume(d, rng);
    b.scanner_id = "signa_excite_1p5";
    b.laterality = Laterality::right;
    b.exam_id = "exam_0001";
    return b;
}

} // namespace

TEST_CASE("exam bundle round-trips bit-exactly") {
    Rng rng(11);
    const auto dir = temp_dir("roundtrip");
    for (int trial = 0; trial < 8; ++trial) {
        ExamBundle b = random_bundle(rng, trial % 2 == 0);
        write_exam(b, dir);
        ExamBundle r = read_exam(dir);
        CHECK(r == b);
        CHECK(r.t1c_series.size() == 3);
    }
    fs::remove_all(dir);
}

TEST_CASE("read_exam rejects raw file vs meta dimension mismatch") {
    Rng rng(12);
    const auto dir = temp_dir("dimmismatch");
    ExamBundle b = random_bundle(rng);
    write_exam(b, dir);
    // Append one extra float to t1: 4*6*5=120 floats becomes 121.
    {
        std::ofstream f(dir / "t1.f32", std::ios::binary | std::ios::app);
        const float extra = 1.0f;
        f.write(reinterpret_cast<const char*>(&extra), 4);
    }
    CHECK_THROWS_AS(read_exam(dir), DataError);
    fs::remove_all(dir);
}

TEST_CASE("non-increasing timestamps are rejected") {
    Rng rng(13);
    ExamBundle b = random_bundle(rng);
    b.t1c_series[1].second = b.t1c_series[0].second; // (1.0, 1.0, ...)
    const auto dir = temp_dir("badtime");
    CHECK_THROWS_AS(write_exam(b, dir), DataError);
    // And via the reader: write valid, then edit meta times.
    ExamBundle ok = random_bundle(rng);
    write_exam(ok, dir);
    {
        std::ifstream in(dir / "meta.json");
        std::string meta((std::istreambuf_iterator<char>(in)), {});
        in.close();
        auto pos = meta.find("2.5");
        REQUIRE(pos != std::string::npos);
        meta.replace(pos, 3, "1.0");
        std::ofstream out(dir / "meta.json", std::ios::trunc);
        out << meta;
    }
    CHECK_THROWS_AS(read_exam(dir), DataError);
    fs::remove_all(dir);
}

TEST_CASE("absent T2 is recorded as null and reloads as absent") {
    Rng rng(14);
    const auto dir = temp_dir("not2");
    ExamBundle b = random_bundle(rng, false);
    write_exam(b, dir);
    std::ifstream in(dir / "meta.json");
    std::string meta((std::istreambuf_iterator<char>(in)), {});
    CHECK(meta.find("\"t2\": null") != std::string::npos);
    ExamBundle r = read_exam(dir);
    CHECK(!r.t2.has_value());
    fs::remove_all(dir);
}

TEST_CASE("write_exam refuses non-finite voxels") {
    Rng rng(15);
    ExamBundle b = random_bundle(rng);
    b.t1.data()[7] = std::nanf("");
    const auto dir = temp_dir("nan");
    CHECK_THROWS_AS(write_exam(b, dir), DataError);
    fs::remove_all(dir);
}

TEST_CASE("loaders reject injected NaN/Inf in raw files") {
    Rng rng(16);
    const auto dir = temp_dir("inject");
    for (int trial = 0; trial < 4; ++trial) {
        ExamBundle b = random_bundle(rng);
        write_exam(b, dir);
        const float bad = trial % 2 ? std::numeric_limits<float>::infinity() : std::nanf("");
        const std::int64_t slot = std::int64_t(rng.uniform_index(120));
        std::fstream f(dir / "t1c_1.f32", std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(slot * 4);
        f.write(reinterpret_cast<const char*>(&bad), 4);
        f.close();
        CHECK_THROWS_AS(read_exam(dir), DataError);
    }
    fs::remove_all(dir);
}

TEST_CASE("crop basics") {
    Rng rng(17);
    Volume v = random_volume(Dims{5, 7, 6}, rng);

    Volume full = crop(v, {0, 0, 0}, v.dims());
    CHECK(full == v);

    Volume one = crop(v, {0, 0, 0}, Dims{1, 1, 1});
    CHECK(one.data()[0] == v.at(0, 0, 0));

    CHECK_THROWS_AS(crop(v, {4, 0, 0}, Dims{2, 1, 1}), DataError);
}

TEST_CASE("crop then re-embed restores the region (index-arithmetic oracle)") {
    Rng rng(18);
    Volume v = random_volume(Dims{6, 8, 7}, rng);
    const std::array<int, 3> origin{2, 3, 1};
    const Dims size{3, 4, 5};
    Volume c = crop(v, origin, size);
    // Independent index arithmetic: every voxel of the crop must equal the
    // source voxel at origin+offset.
    for (int s = 0; s < size.slices; ++s)
        for (int r = 0; r < size.rows; ++r)
            for (int col = 0; col < size.cols; ++col)
                CHECK(c.at(s, r, col) ==
                      v.at(origin[0] + s, origin[1] + r, origin[2] + col));
}

TEST_CASE("crop composition property") {
    Rng rng(19);
    for (int trial = 0; trial < 20; ++trial) {
        Volume v = random_volume(Dims{8, 9, 10}, rng);
        const std::array<int, 3> a{int(rng.uniform_index(3)), int(rng.uniform_index(3)),
                                   int(rng.uniform_index(3))};
        const Dims s{5, 6, 7};
        const std::array<int, 3> b{int(rng.uniform_index(2)), int(rng.uniform_index(2)),
                                   int(rng.uniform_index(2))};
        const Dims t{3, 4, 5};
        Volume lhs = crop(crop(v, a, s), b, t);
        Volume rhs = crop(v, {a[0] + b[0], a[1] + b[1], a[2] + b[2]}, t);
        CHECK(lhs.data() == rhs.data());
    }
}

TEST_CASE("crop_reflect mirrors out-of-range indices") {
    Rng rng(20);
    Volume v = random_volume(Dims{4, 5, 5}, rng);
    Volume c = crop_reflect(v, {-2, 0, 0}, Dims{3, 5, 5});
    // reflect(-2)=2, reflect(-1)=1, reflect(0)=0
    for (int r = 0; r < 5; ++r)
        for (int col = 0; col < 5; ++col) {
            CHECK(c.at(0, r, col) == v.at(2, r, col));
            CHECK(c.at(1, r, col) == v.at(1, r, col));
            CHECK(c.at(2, r, col) == v.at(0, r, col));
        }
    CHECK(reflect_index(5, 5) == 3);
    CHECK(reflect_index(-1, 1) == 0);
}

TEST_CASE("mask round-trip and validation") {
    const Dims d{3, 6, 6};
    SegmentationMask m(d, MaskSource::radiologist, 1);
    m.set_rater_id("R2");
    m.at(1, 2, 3) = 1;
    m.at(1, 2, 4) = 1;
    const auto dir = temp_dir("mask");
    fs::create_directories(dir);
    write_mask(m, dir / "r2_mask");
    SegmentationMask r = read_mask(dir / "r2_mask");
    CHECK(r == m);
    CHECK(r.positive_count() == 2);

    // Positive voxel outside the declared slice is invalid.
    SegmentationMask bad(d, MaskSource::model, 0);
    bad.at(2, 0, 0) = 1;
    CHECK_THROWS_AS(bad.validate(), DataError);

    // Non-binary values are invalid.
    SegmentationMask nb(d, MaskSource::model);
    nb.values()[4] = 2;
    CHECK_THROWS_AS(nb.validate(), DataError);
    fs::remove_all(dir);
}
