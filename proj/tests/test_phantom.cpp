#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "voxelseg/harmonize.hpp"
#include "voxelseg/phantom.hpp"

using namespace voxelseg;
using namespace voxelseg::phantom;
namespace fs = std::filesystem;

TEST_CASE("lesion_count 0 gives an empty ground truth and a valid exam") {
    PhantomSpec spec;
    spec.lesion_count = 0;
    spec.seed = 5;
    auto gen = generate_exam(spec);
    CHECK(gen.ground_truth.positive_count() == 0);
    CHECK(gen.exam.t1c_series.size() == 3);
    gen.exam.validate();
    CHECK(gen.breast_mask.positive_count() > 0);
}

TEST_CASE("same seed twice gives bit-identical bundles") {
    PhantomSpec spec;
    spec.seed = 77;
    spec.lesion_count = 2;
    auto a = generate_exam(spec);
    auto b = generate_exam(spec);
    CHECK(a.exam == b.exam);
    CHECK(a.ground_truth == b.ground_truth);
    CHECK(a.breast_mask == b.breast_mask);
}

TEST_CASE("lesions wash out: mean lesion slope < mean parenchyma slope") {
    PhantomSpec spec;
    spec.seed = 9;
    spec.lesion_count = 2;
    spec.bpe_level = 0.5;
    auto gen = generate_exam(spec);
    const auto dce = harmonize::compute_dce(gen.exam);

    double lesion_slope = 0.0, parench_slope = 0.0;
    std::int64_t nl = 0, np = 0;
    const Dims d = gen.exam.dims();
    for (int s = 0; s < d.slices; ++s)
        for (int r = 0; r < d.rows; ++r)
            for (int c = 0; c < d.cols; ++c) {
                if (!gen.breast_mask.at(s, r, c))
                    continue;
                if (gen.ground_truth.at(s, r, c)) {
                    lesion_slope += dce.dce_out.at(s, r, c);
                    ++nl;
                } else {
                    parench_slope += dce.dce_out.at(s, r, c);
                    ++np;
                }
            }
    REQUIRE(nl > 0);
    REQUIRE(np > 0);
    CHECK(lesion_slope / double(nl) < parench_slope / double(np));
    CHECK(lesion_slope / double(nl) < 0.0); // washout proper
}

TEST_CASE("lesion DCE-in exceeds background DCE-in on average") {
    PhantomSpec spec;
    spec.seed = 21;
    auto gen = generate_exam(spec);
    const auto dce = harmonize::compute_dce(gen.exam);
    double les = 0.0, bg = 0.0;
    std::int64_t nl = 0, nb = 0;
    for (std::size_t i = 0; i < dce.dce_in.data().size(); ++i) {
        if (gen.ground_truth.values()[i]) {
            les += dce.dce_in.data()[i];
            ++nl;
        } else {
            bg += dce.dce_in.data()[i];
            ++nb;
        }
    }
    REQUIRE(nl > 0);
    CHECK(les / double(nl) > bg / double(nb) + 10.0);
}

TEST_CASE("ground-truth lesions lie inside the breast mask") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull}) {
        PhantomSpec spec;
        spec.seed = seed;
        spec.lesion_count = 3;
        auto gen = generate_exam(spec);
        for (std::size_t i = 0; i < gen.ground_truth.values().size(); ++i)
            if (gen.ground_truth.values()[i])
                CHECK(gen.breast_mask.values()[i] == 1);
    }
}

TEST_CASE("perturb_segmentation: identity at zero strength") {
    SegmentationMask m(Dims{3, 20, 20}, MaskSource::ground_truth, 1);
    for (int r = 5; r < 15; ++r)
        for (int c = 5; c < 15; ++c)
            m.at(1, r, c) = 1;
    VirtualRadiologistSpec vs;
    vs.dilation_erosion_range = 0;
    vs.boundary_jitter_probability = 0.0;
    SegmentationMask p = perturb_segmentation(m, vs);
    CHECK(p.values() == m.values());
}

TEST_CASE("dilating a 10x10 square by 1 gives Dice 0.8197 (counting oracle)") {
    SegmentationMask m(Dims{1, 20, 20}, MaskSource::ground_truth, 0);
    for (int r = 5; r < 15; ++r)
        for (int c = 5; c < 15; ++c)
            m.at(0, r, c) = 1;
    SegmentationMask d = dilate_mask(m, 1);
    CHECK(d.positive_count() == 144); // 12x12
    std::int64_t tp = 0;
    for (std::size_t i = 0; i < m.values().size(); ++i)
        tp += (m.values()[i] && d.values()[i]);
    CHECK(tp == 100);
    const double dice = 2.0 * double(tp) / double(100 + 144);
    CHECK(dice == doctest::Approx(0.819672).epsilon(1e-5));
}

TEST_CASE("virtual raters are reproducible per seed") {
    SegmentationMask m(Dims{1, 24, 24}, MaskSource::ground_truth, 0);
    for (int r = 8; r < 17; ++r)
        for (int c = 7; c < 18; ++c)
            m.at(0, r, c) = 1;
    for (int rater = 0; rater < 4; ++rater) {
        VirtualRadiologistSpec vs;
        vs.dilation_erosion_range = 2;
        vs.boundary_jitter_probability = 0.15;
        vs.seed = 100 + std::uint64_t(rater);
        SegmentationMask a = perturb_segmentation(m, vs);
        SegmentationMask b = perturb_segmentation(m, vs);
        CHECK(a.values() == b.values());
        CHECK(a.positive_count() > 0);
    }
}

TEST_CASE("erosion never empties the output (fallback to fewer steps)") {
    SegmentationMask tiny(Dims{1, 10, 10}, MaskSource::ground_truth, 0);
    tiny.at(0, 4, 4) = 1;
    VirtualRadiologistSpec vs;
    vs.dilation_erosion_range = 3;
    vs.boundary_jitter_probability = 0.0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        vs.seed = s;
        CHECK(perturb_segmentation(tiny, vs).positive_count() > 0);
    }
}

TEST_CASE("generate_dataset (0, 5): benign bundles with empty ground truths") {
    const auto dir = fs::temp_directory_path() / "voxelseg_phantom_ds1";
    fs::remove_all(dir);
    DatasetSpec spec;
    spec.n_benign = 5;
    spec.seed = 3;
    spec.proto.dims = Dims{12, 40, 40};
    Manifest m = generate_dataset(spec, dir);
    CHECK(m.exams.size() == 5);
    for (const auto& e : m.exams) {
        CHECK(e.label == "benign");
        ExamBundle bundle = read_exam(dir / e.path);
        CHECK(bundle.t1c_series.size() == 3);
        SegmentationMask gt = read_mask(dir / e.gt3d_stem);
        CHECK(gt.positive_count() == 0);
    }
    fs::remove_all(dir);
}

TEST_CASE("generate_dataset partitions (64, 64) at val fraction 0.2 into 52/12") {
    const auto dir = fs::temp_directory_path() / "voxelseg_phantom_ds2";
    fs::remove_all(dir);
    DatasetSpec spec;
    spec.n_malignant = 64;
    spec.n_benign = 64;
    spec.seed = 11;
    spec.proto.dims = Dims{12, 40, 40};
    spec.proto.lesion_radius_max = 5.0;
    Manifest m = generate_dataset(spec, dir);

    int mal_train = 0, mal_val = 0, ben_train = 0, ben_val = 0;
    std::vector<std::string> ids;
    for (const auto& e : m.exams) {
        ids.push_back(e.id);
        if (e.label == "malignant")
            (e.partition == "train" ? mal_train : mal_val)++;
        else
            (e.partition == "train" ? ben_train : ben_val)++;
    }
    CHECK(mal_train == 52);
    CHECK(mal_val == 12);
    CHECK(ben_train == 52);
    CHECK(ben_val == 12);
    std::sort(ids.begin(), ids.end());
    CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end()); // no exam in two partitions

    // Regeneration with the same seed is byte-identical.
    std::ifstream m1(dir / "manifest.json");
    const std::string manifest1((std::istreambuf_iterator<char>(m1)), {});
    std::ifstream t1a(dir / m.exams[0].path / "t1.f32", std::ios::binary);
    const std::string bytes1((std::istreambuf_iterator<char>(t1a)), {});
    fs::remove_all(dir);
    generate_dataset(spec, dir);
    std::ifstream m2(dir / "manifest.json");
    const std::string manifest2((std::istreambuf_iterator<char>(m2)), {});
    std::ifstream t1b(dir / m.exams[0].path / "t1.f32", std::ios::binary);
    const std::string bytes2((std::istreambuf_iterator<char>(t1b)), {});
    CHECK(manifest1 == manifest2);
    CHECK(bytes1 == bytes2);
    fs::remove_all(dir);
}

TEST_CASE("test partition carries rater masks restricted to the reference slice") {
    const auto dir = fs::temp_directory_path() / "voxelseg_phantom_ds3";
    fs::remove_all(dir);
    DatasetSpec spec;
    spec.n_test_malignant = 3;
    spec.seed = 23;
    spec.proto.dims = Dims{12, 40, 40};
    spec.proto.lesion_radius_max = 5.0;
    Manifest m = generate_dataset(spec, dir);
    REQUIRE(m.exams.size() == 3);
    for (const auto& e : m.exams) {
        CHECK(e.partition == "test");
        REQUIRE(e.rater_stems.size() == 4);
        SegmentationMask gts = read_mask(dir / e.gt_slice_stem);
        CHECK(gts.slice_index() == e.reference_slice);
        for (const auto& rs : e.rater_stems) {
            SegmentationMask rm = read_mask(dir / rs);
            CHECK(rm.slice_index() == e.reference_slice);
            CHECK(rm.positive_count() > 0);
        }
    }
    fs::remove_all(dir);
}
