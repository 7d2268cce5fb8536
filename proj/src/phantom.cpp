#include "voxelseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "voxelseg/rng.hpp"

namespace voxelseg::phantom {

using nlohmann::json;
namespace fs = std::filesystem;

void PhantomSpec::validate() const {
    if (dims.slices < 9 || dims.rows < 32 || dims.cols < 32)
        throw DataError("phantom dims too small for a breast region");
    if (lesion_count < 0 || lesion_count > 3)
        throw DataError("lesion_count must be 0..3");
    if (lesion_radius_min <= 0 || lesion_radius_max < lesion_radius_min)
        throw DataError("bad lesion radius range");
    if (lesion_radius_max > 0.2 * double(std::min(dims.rows, dims.cols)))
        throw DataError("lesion radius does not fit the breast region");
    if (bpe_level < 0 || bpe_level > 1)
        throw DataError("bpe_level must lie in [0,1]");
    if (noise_sigma < 0)
        throw DataError("noise_sigma must be >= 0");
    if (uptake_lesion < 0 || uptake_parenchyma < 0)
        throw DataError("uptake rates must be >= 0");
}

namespace {

constexpr double kScale = 100.0; // base intensity scale (arbitrary units)

/// Value noise: coarse lattice of uniforms, trilinearly interpolated.
struct ValueNoise {
    int gs, gr, gc;
    int cell;
    std::vector<double> lattice;

    ValueNoise(Dims d, int cell_size, Rng& rng) : cell(cell_size) {
        gs = d.slices / cell + 2;
        gr = d.rows / cell + 2;
        gc = d.cols / cell + 2;
        lattice.resize(std::size_t(gs) * gr * gc);
        for (auto& x : lattice)
            x = rng.uniform();
    }

    double at(double s, double r, double c) const {
        const double fs = s / cell, fr = r / cell, fc = c / cell;
        const int is = int(fs), ir = int(fr), ic = int(fc);
        const double ts = fs - is, tr = fr - ir, tc = fc - ic;
        auto g = [&](int a, int b, int e) {
            return lattice[(std::size_t(a) * gr + b) * gc + e];
        };
        double acc = 0.0;
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
                for (int e = 0; e < 2; ++e)
                    acc += g(is + a, ir + b, ic + e) * (a ? ts : 1 - ts) * (b ? tr : 1 - tr) *
                           (e ? tc : 1 - tc);
        return acc;
    }
};

struct Ellipsoid {
    double cs, cr, cc;
    double as, ar, ac;

    double dist2(double s, double r, double c) const {
        const double ds = (s - cs) / as, dr = (r - cr) / ar, dc = (c - cc) / ac;
        return ds * ds + dr * dr + dc * dc;
    }
};

/// Breast = half ellipsoid opening along +col (chest wall at col 0).
struct BreastShape {
    Ellipsoid e;
    explicit BreastShape(Dims d)
        : e{d.slices / 2.0, d.rows / 2.0, 0.0, 0.46 * d.slices, 0.46 * d.rows,
            0.88 * d.cols} {}
    bool inside(int s, int r, int c) const { return e.dist2(s, r, c) <= 1.0; }
};

/// Separable Gaussian blur of a scalar field, sigma in voxels.
void gaussian_blur(std::vector<float>& f, Dims d, double sigma) {
    const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(std::size_t(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[std::size_t(i + radius)] = std::exp(-double(i) * i / (2.0 * sigma * sigma));
        sum += kernel[std::size_t(i + radius)];
    }
    for (auto& k : kernel)
        k /= sum;

    std::vector<float> tmp(f.size());
    const auto idx = [&](int s, int r, int c) {
        return (std::size_t(s) * d.rows + r) * d.cols + c;
    };
    // axis 0
    for (int s = 0; s < d.slices; ++s)
        for (int r = 0; r < d.rows; ++r)
            for (int c = 0; c < d.cols; ++c) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[std::size_t(i + radius)] *
                           f[idx(reflect_index(s + i, d.slices), r, c)];
                tmp[idx(s, r, c)] = float(acc);
            }
    f.swap(tmp);
    // axis 1
    for (int s = 0; s < d.slices; ++s)
        for (int r = 0; r < d.rows; ++r)
            for (int c = 0; c < d.cols; ++c) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[std::size_t(i + radius)] *
                           f[idx(s, reflect_index(r + i, d.rows), c)];
                tmp[idx(s, r, c)] = float(acc);
            }
    f.swap(tmp);
    // axis 2
    for (int s = 0; s < d.slices; ++s)
        for (int r = 0; r < d.rows; ++r)
            for (int c = 0; c < d.cols; ++c) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[std::size_t(i + radius)] *
                           f[idx(s, r, reflect_index(c + i, d.cols))];
                tmp[idx(s, r, c)] = float(acc);
            }
    f.swap(tmp);
}

/// Lesion uptake curve: peak at 1 minute, washout afterwards.
double lesion_curve(double t) { return t * std::exp(1.0 - t); }
/// Parenchymal (BPE) uptake: slow persistent rise.
double parenchyma_curve(double t) { return 1.0 - std::exp(-t / 3.0); }

} // namespace

GeneratedExam generate_exam(const PhantomSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const Dims d = spec.dims;
    const Spacing spacing{3.0, 0.7, 0.7};
    const BreastShape breast(d);

    GeneratedExam out;
    out.bpe_level = spec.bpe_level;
    out.breast_mask = SegmentationMask(d, MaskSource::ground_truth);
    for (int s = 0; s < d.slices; ++s)
        for (int r = 0; r < d.rows; ++r)
            for (int c = 0; c < d.cols; ++c)
                out.breast_mask.at(s, r, c) = breast.inside(s, r, c) ? 1 : 0;

    // Parenchymal texture field in [0,1], concentrated mid-breast.
    const ValueNoise texture(d, 6, rng);
    std::vector<float> parench(std::size_t(d.count()), 0.0f);
    for (int s = 0; s < d.slices; ++s)
        for (int r = 0; r < d.rows; ++r)
            for (int c = 0; c < d.cols; ++c) {
                const double n = texture.at(s, r, c);
                parench[(std::size_t(s) * d.rows + r) * d.cols + c] =
                    float(std::clamp((n - 0.35) / 0.5, 0.0, 1.0));
            }

    // Lesions: union of 1-4 ellipsoids each, smoothed and thresholded.
    out.ground_truth = SegmentationMask(d, MaskSource::ground_truth);
    std::vector<float> lesion_field(std::size_t(d.count()), 0.0f);
    for (int li = 0; li < spec.lesion_count; ++li) {
        // Center placed so the largest radius fits inside the breast.
        double cs = 0, cr = 0, cc = 0;
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            cs = rng.uniform(2.0, d.slices - 3.0);
            cr = rng.uniform(spec.lesion_radius_max, d.rows - spec.lesion_radius_max);
            cc = rng.uniform(spec.lesion_radius_max, d.cols - spec.lesion_radius_max);
            // Require the bounding sphere inside the breast shape.
            placed = true;
            for (int k = 0; k < 6 && placed; ++k) {
                const double ang = k * 1.0471975511965976;
                const int ps = int(cs);
                const int pr = int(cr + spec.lesion_radius_max * std::cos(ang));
                const int pc = int(cc + spec.lesion_radius_max * std::sin(ang));
                if (ps < 0 || ps >= d.slices || pr < 0 || pr >= d.rows || pc < 0 ||
                    pc >= d.cols || !breast.inside(ps, pr, pc))
                    placed = false;
            }
        }
        if (!placed)
            throw DataError("phantom spec infeasible: lesion does not fit the breast");

        const int parts = 1 + int(rng.uniform_index(4));
        for (int k = 0; k < parts; ++k) {
            Ellipsoid e;
            const double base_r = rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max);
            e.as = std::max(1.0, base_r * rng.uniform(0.35, 0.7)); // thinner through-plane
            e.ar = base_r * rng.uniform(0.7, 1.2);
            e.ac = base_r * rng.uniform(0.7, 1.2);
            e.cs = cs + rng.uniform(-1.0, 1.0);
            e.cr = cr + rng.uniform(-base_r * 0.5, base_r * 0.5);
            e.cc = cc + rng.uniform(-base_r * 0.5, base_r * 0.5);
            for (int s = 0; s < d.slices; ++s)
                for (int r = 0; r < d.rows; ++r)
                    for (int c = 0; c < d.cols; ++c)
                        if (e.dist2(s, r, c) <= 1.0)
                            lesion_field[(std::size_t(s) * d.rows + r) * d.cols + c] = 1.0f;
        }
    }
    if (spec.lesion_count > 0) {
        gaussian_blur(lesion_field, d, 1.1);
        for (int s = 0; s < d.slices; ++s)
            for (int r = 0; r < d.rows; ++r)
                for (int c = 0; c < d.cols; ++c) {
                    const bool on =
                        lesion_field[(std::size_t(s) * d.rows + r) * d.cols + c] >= 0.5f &&
                        out.breast_mask.at(s, r, c);
                    out.ground_truth.at(s, r, c) = on ? 1 : 0;
                }
    }

    // Base T1 intensity: air ~ 2, fat ~ 100, parenchyma up to ~180, lesion ~ 90.
    Volume base(d, spacing);
    for (int s = 0; s < d.slices; ++s)
        for (int r = 0; r < d.rows; ++r)
            for (int c = 0; c < d.cols; ++c) {
                double v = 0.02 * kScale;
                if (out.breast_mask.at(s, r, c)) {
                    const double p =
                        parench[(std::size_t(s) * d.rows + r) * d.cols + c];
                    v = kScale * (1.0 + 0.8 * p);
                    if (out.ground_truth.at(s, r, c))
                        v = 0.9 * kScale;
                }
                base.at(s, r, c) = float(v);
            }

    const auto enhanced = [&](double t) {
        Volume v = base;
        for (int s = 0; s < d.slices; ++s)
            for (int r = 0; r < d.rows; ++r)
                for (int c = 0; c < d.cols; ++c) {
                    if (!out.breast_mask.at(s, r, c))
                        continue;
                    const double p = parench[(std::size_t(s) * d.rows + r) * d.cols + c];
                    double gain = 1.0;
                    if (out.ground_truth.at(s, r, c))
                        gain += spec.uptake_lesion * lesion_curve(t);
                    else
                        gain += spec.uptake_parenchyma * spec.bpe_level * p *
                                parenchyma_curve(t);
                    v.at(s, r, c) = float(double(v.at(s, r, c)) * gain);
                }
        return v;
    };

    ExamBundle& exam = out.exam;
    exam.t1 = base;
    for (double t : {1.0, 2.5, 4.0})
        exam.t1c_series.emplace_back(enhanced(t), t);
    if (spec.with_t2) {
        Volume t2 = base;
        for (int s = 0; s < d.slices; ++s)
            for (int r = 0; r < d.rows; ++r)
                for (int c = 0; c < d.cols; ++c)
                    if (out.breast_mask.at(s, r, c)) {
                        const double p = parench[(std::size_t(s) * d.rows + r) * d.cols + c];
                        double v = kScale * (0.4 + 1.1 * p);
                        if (out.ground_truth.at(s, r, c))
                            v = kScale * 1.3;
                        t2.at(s, r, c) = float(v);
                    }
        exam.t2 = std::move(t2);
    }

    // Independent Gaussian noise per volume.
    const double sigma = spec.noise_sigma * kScale;
    const auto add_noise = [&](Volume& v) {
        if (sigma <= 0)
            return;
        for (auto& x : v.data())
            x = float(std::max(0.0, double(x) + sigma * rng.normal()));
    };
    add_noise(exam.t1);
    for (auto& [vol, t] : exam.t1c_series)
        add_noise(vol);
    if (exam.t2)
        add_noise(*exam.t2);

    exam.scanner_id = "phantom_ge_1p5";
    exam.laterality = (spec.seed % 2) ? Laterality::left : Laterality::right;
    exam.exam_id = "phantom_" + std::to_string(spec.seed);
    exam.validate();
    return out;
}

// ---------------------------------------------------------------------------
// Morphology and virtual radiologists
// ---------------------------------------------------------------------------

namespace {

SegmentationMask morph(const SegmentationMask& m, int steps, bool dilate) {
    SegmentationMask cur = m;
    const Dims d = m.dims();
    const int s_lo = m.slice_index() ? *m.slice_index() : 0;
    const int s_hi = m.slice_index() ? *m.slice_index() + 1 : d.slices;
    for (int step = 0; step < steps; ++step) {
        SegmentationMask next = cur;
        for (int s = s_lo; s < s_hi; ++s)
            for (int r = 0; r < d.rows; ++r)
                for (int c = 0; c < d.cols; ++c) {
                    bool hit = !dilate;
                    for (int dr = -1; dr <= 1 && (dilate ? !hit : hit); ++dr)
                        for (int dc = -1; dc <= 1 && (dilate ? !hit : hit); ++dc) {
                            const int nr = r + dr, nc = c + dc;
                            const bool v = nr >= 0 && nr < d.rows && nc >= 0 && nc < d.cols
                                               ? cur.at(s, nr, nc) != 0
                                               : false;
                            if (dilate && v)
                                hit = true;
                            if (!dilate && !v)
                                hit = false;
                        }
                    next.at(s, r, c) = hit ? 1 : 0;
                }
        cur = std::move(next);
    }
    return cur;
}

} // namespace

SegmentationMask dilate_mask(const SegmentationMask& m, int steps) {
    return morph(m, steps, true);
}
SegmentationMask erode_mask(const SegmentationMask& m, int steps) {
    return morph(m, steps, false);
}

SegmentationMask perturb_segmentation(const SegmentationMask& mask,
                                      const VirtualRadiologistSpec& spec) {
    if (mask.positive_count() == 0)
        throw DataError("perturb_segmentation needs a non-empty mask");
    Rng rng(spec.seed);

    SegmentationMask out = mask;
    if (spec.dilation_erosion_range > 0) {
        int steps = int(rng.uniform_index(std::uint64_t(spec.dilation_erosion_range) + 1));
        const bool dilate = rng.uniform() < 0.5;
        SegmentationMask candidate = dilate ? dilate_mask(mask, steps) : erode_mask(mask, steps);
        while (!dilate && candidate.positive_count() == 0 && steps > 0) {
            --steps;
            candidate = erode_mask(mask, steps);
        }
        out = std::move(candidate);
    }

    if (spec.boundary_jitter_probability > 0) {
        const Dims d = out.dims();
        const int s_lo = out.slice_index() ? *out.slice_index() : 0;
        const int s_hi = out.slice_index() ? *out.slice_index() + 1 : d.slices;
        SegmentationMask jittered = out;
        for (int s = s_lo; s < s_hi; ++s)
            for (int r = 0; r < d.rows; ++r)
                for (int c = 0; c < d.cols; ++c) {
                    bool boundary = false;
                    const bool self = out.at(s, r, c) != 0;
                    for (int dr = -1; dr <= 1 && !boundary; ++dr)
                        for (int dc = -1; dc <= 1 && !boundary; ++dc) {
                            const int nr = r + dr, nc = c + dc;
                            if (nr < 0 || nr >= d.rows || nc < 0 || nc >= d.cols)
                                continue;
                            if ((out.at(s, nr, nc) != 0) != self)
                                boundary = true;
                        }
                    if (boundary && rng.uniform() < spec.boundary_jitter_probability)
                        jittered.at(s, r, c) = self ? 0 : 1;
                }
        out = std::move(jittered);
    }
    if (out.positive_count() == 0)
        throw DataError("perturbation emptied the mask");
    out.set_source(MaskSource::radiologist);
    return out;
}

int largest_area_slice(const SegmentationMask& m) {
    const Dims d = m.dims();
    int best = 0;
    std::int64_t best_area = -1;
    for (int s = 0; s < d.slices; ++s) {
        std::int64_t area = 0;
        for (int r = 0; r < d.rows; ++r)
            for (int c = 0; c < d.cols; ++c)
                area += m.at(s, r, c);
        if (area > best_area) {
            best_area = area;
            best = s;
        }
    }
    return best;
}

SegmentationMask slice_mask(const SegmentationMask& m, int slice, MaskSource source) {
    SegmentationMask out(m.dims(), source, slice);
    const Dims d = m.dims();
    for (int r = 0; r < d.rows; ++r)
        for (int c = 0; c < d.cols; ++c)
            out.at(slice, r, c) = m.at(slice, r, c);
    return out;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

void Manifest::save(const fs::path& dir) const {
    json j;
    j["seed"] = seed;
    json arr = json::array();
    for (const auto& e : exams) {
        json je;
        je["id"] = e.id;
        je["path"] = e.path;
        je["label"] = e.label;
        je["partition"] = e.partition;
        je["bpe_level"] = e.bpe_level;
        je["reference_slice"] = e.reference_slice;
        je["gt_slice"] = e.gt_slice_stem;
        je["gt3d"] = e.gt3d_stem;
        je["breast"] = e.breast_stem;
        je["raters"] = e.rater_stems;
        arr.push_back(std::move(je));
    }
    j["exams"] = std::move(arr);
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out)
        throw DataError("cannot write manifest in " + dir.string());
    out << j.dump(2) << "\n";
}

Manifest Manifest::load(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in)
        throw DataError("missing manifest.json in " + dir.string());
    json j;
    try {
        in >> j;
        Manifest m;
        m.seed = j.at("seed").get<std::uint64_t>();
        m.root = dir;
        for (const auto& je : j.at("exams")) {
            ManifestEntry e;
            e.id = je.at("id").get<std::string>();
            e.path = je.at("path").get<std::string>();
            e.label = je.at("label").get<std::string>();
            e.partition = je.at("partition").get<std::string>();
            e.bpe_level = je.at("bpe_level").get<double>();
            e.reference_slice = je.at("reference_slice").get<int>();
            e.gt_slice_stem = je.at("gt_slice").get<std::string>();
            e.gt3d_stem = je.at("gt3d").get<std::string>();
            e.breast_stem = je.at("breast").get<std::string>();
            for (const auto& r : je.at("raters"))
                e.rater_stems.push_back(r.get<std::string>());
            m.exams.push_back(std::move(e));
        }
        return m;
    } catch (const json::exception& ex) {
        throw DataError("malformed manifest in " + dir.string() + ": " + ex.what());
    }
}

std::vector<const ManifestEntry*> Manifest::partition(const std::string& name) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : exams)
        if (e.partition == name)
            out.push_back(&e);
    return out;
}

Manifest generate_dataset(const DatasetSpec& spec, const fs::path& out_dir) {
    if (spec.n_malignant < 0 || spec.n_benign < 0 || spec.n_test_malignant < 0)
        throw DataError("dataset counts must be >= 0");
    fs::create_directories(out_dir / "exams");

    Manifest manifest;
    manifest.seed = spec.seed;
    manifest.root = out_dir;
    Rng meta_rng(spec.seed);

    const int val_mal = int(spec.val_fraction * double(spec.n_malignant));
    const int val_ben = int(spec.val_fraction * double(spec.n_benign));

    std::uint64_t stream = 0;
    const auto make_exam = [&](const std::string& label, const std::string& partition,
                               int index) {
        PhantomSpec ps = spec.proto;
        ps.seed = derive_seed(spec.seed, ++stream);
        if (label == "benign")
            ps.lesion_count = 0;
        else
            ps.lesion_count = 1 + int(meta_rng.uniform_index(
                                  std::uint64_t(std::max(1, spec.proto.lesion_count))));
        if (spec.vary_bpe)
            ps.bpe_level = meta_rng.uniform(0.05, 0.95);

        GeneratedExam gen = generate_exam(ps);
        ManifestEntry e;
        e.id = label.substr(0, 3) + "_" + partition + "_" + std::to_string(index);
        gen.exam.exam_id = e.id;
        e.path = "exams/" + e.id;
        e.label = label;
        e.partition = partition;
        e.bpe_level = ps.bpe_level;

        const fs::path exam_dir = out_dir / e.path;
        write_exam(gen.exam, exam_dir);
        e.breast_stem = e.path + "/breast";
        write_mask(gen.breast_mask, out_dir / e.breast_stem);
        e.gt3d_stem = e.path + "/gt3d";
        write_mask(gen.ground_truth, out_dir / e.gt3d_stem);
        if (label == "malignant") {
            e.reference_slice = largest_area_slice(gen.ground_truth);
            SegmentationMask gts =
                slice_mask(gen.ground_truth, e.reference_slice, MaskSource::ground_truth);
            e.gt_slice_stem = e.path + "/gt_slice";
            write_mask(gts, out_dir / e.gt_slice_stem);
            if (partition == "test") {
                for (int ri = 0; ri < spec.raters; ++ri) {
                    VirtualRadiologistSpec vs;
                    // Graded severity: rater 1 mildest.
                    vs.dilation_erosion_range = ri < 2 ? 1 : 2;
                    vs.boundary_jitter_probability = 0.04 + 0.04 * ri;
                    vs.seed = derive_seed(spec.seed, 1000003ull * (stream + 1) + std::uint64_t(ri));
                    SegmentationMask rm = perturb_segmentation(gts, vs);
                    rm.set_rater_id("R" + std::to_string(ri + 1));
                    const std::string stem = e.path + "/rater_" + std::to_string(ri + 1);
                    write_mask(rm, out_dir / stem);
                    e.rater_stems.push_back(stem);
                }
            }
        }
        manifest.exams.push_back(std::move(e));
    };

    for (int i = 0; i < spec.n_malignant; ++i)
        make_exam("malignant", i < spec.n_malignant - val_mal ? "train" : "val", i);
    for (int i = 0; i < spec.n_benign; ++i)
        make_exam("benign", i < spec.n_benign - val_ben ? "train" : "val", i);
    for (int i = 0; i < spec.n_test_malignant; ++i)
        make_exam("malignant", "test", i);

    manifest.save(out_dir);
    return manifest;
}

} // namespace voxelseg::phantom
