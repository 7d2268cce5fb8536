#include "voxelseg/harmonize.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace voxelseg::harmonize {

// ---------------------------------------------------------------------------
// IntensityMap
// ---------------------------------------------------------------------------

void IntensityMap::validate() const {
    if (source.size() != target.size() || source.size() < 2)
        throw DataError("intensity map needs >= 2 matched knots");
    for (std::size_t i = 1; i < source.size(); ++i) {
        if (!(source[i] > source[i - 1]))
            throw DataError("intensity map source knots must be strictly increasing");
        if (target[i] < target[i - 1])
            throw DataError("intensity map must be non-decreasing");
    }
}

double IntensityMap::operator()(double x) const {
    if (x <= source.front())
        return target.front();
    if (x >= source.back())
        return target.back();
    const auto it = std::upper_bound(source.begin(), source.end(), x);
    const std::size_t hi = std::size_t(it - source.begin());
    const std::size_t lo = hi - 1;
    const double t = (x - source[lo]) / (source[hi] - source[lo]);
    return target[lo] + t * (target[hi] - target[lo]);
}

void IntensityMap::save_csv(const std::filesystem::path& file) const {
    std::ofstream out(file, std::ios::trunc);
    if (!out)
        throw DataError("cannot write intensity map: " + file.string());
    out << "# scanner_id=" << scanner_id << "\n";
    out << "source_intensity,target_intensity\n";
    out.precision(17);
    for (std::size_t i = 0; i < source.size(); ++i)
        out << source[i] << "," << target[i] << "\n";
    if (!out)
        throw DataError("short write on intensity map: " + file.string());
}

IntensityMap IntensityMap::load_csv(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in)
        throw DataError("missing intensity map: " + file.string());
    IntensityMap m;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        if (line[0] == '#') {
            const auto pos = line.find("scanner_id=");
            if (pos != std::string::npos)
                m.scanner_id = line.substr(pos + 11);
            continue;
        }
        if (line.rfind("source_intensity", 0) == 0)
            continue;
        std::istringstream row(line);
        double s = 0.0, t = 0.0;
        char comma = 0;
        if (!(row >> s >> comma >> t) || comma != ',')
            throw DataError("malformed intensity map row: " + line);
        m.source.push_back(s);
        m.target.push_back(t);
    }
    m.validate();
    return m;
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

Volume upsample_inplane_x2(const Volume& v) {
    const Dims d = v.dims();
    const Dims od{d.slices, 2 * d.rows, 2 * d.cols};
    Spacing sp = v.spacing();
    sp.row_mm /= 2.0;
    sp.col_mm /= 2.0;
    Volume out(od, sp);

    // sample(i, n): piecewise-linear read at coordinate i/2 with the last
    // segment extended past the final sample.
    const auto lerp_1d = [](double x, int n, auto&& fetch) -> double {
        if (n == 1)
            return fetch(0);
        int lo = int(std::floor(x));
        lo = std::clamp(lo, 0, n - 2);
        const double t = x - lo;
        return (1.0 - t) * fetch(lo) + t * fetch(lo + 1);
    };

    for (int s = 0; s < od.slices; ++s)
        for (int r = 0; r < od.rows; ++r) {
            const double xr = double(r) / 2.0;
            for (int c = 0; c < od.cols; ++c) {
                const double xc = double(c) / 2.0;
                const double val = lerp_1d(xr, d.rows, [&](int rr) {
                    return lerp_1d(xc, d.cols,
                                   [&](int cc) { return double(v.at(s, rr, cc)); });
                });
                out.at(s, r, c) = float(val);
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Exam-level intensity scaling
// ---------------------------------------------------------------------------

double percentile(std::vector<double> values, double p) {
    if (values.empty())
        throw DataError("percentile of an empty sample");
    std::sort(values.begin(), values.end());
    const double rank = p * double(values.size() - 1);
    const std::size_t lo = std::size_t(std::floor(rank));
    if (lo + 1 >= values.size())
        return values.back();
    const double t = rank - double(lo);
    return values[lo] * (1.0 - t) + values[lo + 1] * t;
}

double t1_p95_scale(const ExamBundle& exam) {
    std::vector<double> positives;
    positives.reserve(exam.t1.data().size());
    for (float x : exam.t1.data())
        if (x > 0.0f)
            positives.push_back(double(x));
    if (positives.empty())
        throw DataError("degenerate exam: T1 has no strictly positive voxel");
    return percentile(std::move(positives), 0.95);
}

namespace {
Volume scaled(const Volume& v, double s) {
    Volume out = v;
    const float inv = float(1.0 / s);
    for (auto& x : out.data())
        x *= inv;
    return out;
}
} // namespace

ExamBundle scale_by_t1_p95(const ExamBundle& exam) {
    const double s = t1_p95_scale(exam);
    ExamBundle out = exam;
    out.t1 = scaled(exam.t1, s);
    for (std::size_t i = 0; i < exam.t1c_series.size(); ++i)
        out.t1c_series[i].first = scaled(exam.t1c_series[i].first, s);
    if (exam.t2)
        out.t2 = scaled(*exam.t2, s);
    return out;
}

// ---------------------------------------------------------------------------
// Scanner harmonization to chi-square(4)
// ---------------------------------------------------------------------------

double chi2_4_cdf(double x) {
    if (x <= 0.0)
        return 0.0;
    return 1.0 - std::exp(-x / 2.0) * (1.0 + x / 2.0);
}

double chi2_4_inv(double p) {
    if (p <= 0.0)
        return 0.0;
    if (p >= 1.0)
        throw NumericalError("chi2_4_inv needs p < 1");
    double lo = 0.0, hi = 1.0;
    while (chi2_4_cdf(hi) < p)
        hi *= 2.0;
    while (hi - lo > 1e-10) {
        const double mid = 0.5 * (lo + hi);
        (chi2_4_cdf(mid) < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

IntensityMap fit_scanner_map(
    const std::vector<std::pair<const Volume*, const SegmentationMask*>>& masked_volumes,
    std::string scanner_id) {
    if (masked_volumes.empty())
        throw DataError("fit_scanner_map needs at least one volume");
    std::vector<double> sample;
    for (const auto& [vol, mask] : masked_volumes) {
        if (vol->dims() != mask->dims())
            throw DataError("mask dims differ from volume dims");
        const auto& data = vol->data();
        const auto& sel = mask->values();
        for (std::size_t i = 0; i < data.size(); ++i)
            if (sel[i])
                sample.push_back(double(data[i]));
    }
    if (sample.empty())
        throw DataError("fit_scanner_map: empty breast mask");
    std::sort(sample.begin(), sample.end());
    if (sample.back() - sample.front() < 1e-9)
        throw NumericalError("fit_scanner_map: constant masked intensities, CDF not invertible");

    constexpr int knots = 4096;
    IntensityMap m;
    m.scanner_id = std::move(scanner_id);
    m.source.reserve(knots + 1);
    m.target.reserve(knots + 1);

    const auto quantile_sorted = [&](double p) {
        const double rank = p * double(sample.size() - 1);
        const std::size_t lo = std::size_t(std::floor(rank));
        if (lo + 1 >= sample.size())
            return sample.back();
        const double t = rank - double(lo);
        return sample[lo] * (1.0 - t) + sample[lo + 1] * t;
    };

    // Anchor at zero so the map is defined on [0, max_source].
    if (sample.front() > 0.0) {
        m.source.push_back(0.0);
        m.target.push_back(0.0);
    }
    double prev_src = m.source.empty() ? -1e300 : m.source.back();
    double prev_dst = m.target.empty() ? 0.0 : m.target.back();
    for (int i = 0; i < knots; ++i) {
        const double p = (double(i) + 0.5) / double(knots);
        const double src = quantile_sorted(p);
        const double dst = chi2_4_inv(p);
        if (src <= prev_src)
            continue; // duplicate order statistics collapse to one knot
        m.source.push_back(src);
        m.target.push_back(std::max(dst, prev_dst));
        prev_src = src;
        prev_dst = m.target.back();
    }
    if (m.source.size() < 2)
        throw NumericalError("fit_scanner_map: degenerate quantile spread");
    m.validate();
    return m;
}

Volume apply_intensity_map(const Volume& v, const IntensityMap& m) {
    m.validate();
    Volume out = v;
    for (auto& x : out.data())
        x = float(m(double(x)));
    return out;
}

ExamBundle apply_intensity_map_exam(const ExamBundle& exam, const IntensityMap& m) {
    ExamBundle out = exam;
    out.t1 = apply_intensity_map(exam.t1, m);
    for (auto& [vol, t] : out.t1c_series)
        vol = apply_intensity_map(vol, m);
    if (out.t2)
        out.t2 = apply_intensity_map(*out.t2, m);
    return out;
}

// ---------------------------------------------------------------------------
// Contrast dynamics
// ---------------------------------------------------------------------------

DcePair compute_dce(const ExamBundle& exam) {
    exam.validate();
    const Dims d = exam.dims();
    DcePair out{Volume(d, exam.t1.spacing()), Volume(d, exam.t1.spacing())};

    const auto& first_post = exam.t1c_series.front().first;
    for (std::size_t i = 0; i < out.dce_in.data().size(); ++i)
        out.dce_in.data()[i] = first_post.data()[i] - exam.t1.data()[i];

    const std::size_t n = exam.t1c_series.size();
    if (n < 2)
        return out; // slope undefined with a single post-contrast point

    // OLS slope per voxel over (time, intensity), times exactly as stored.
    double t_mean = 0.0;
    for (const auto& [vol, t] : exam.t1c_series)
        t_mean += t;
    t_mean /= double(n);
    double denom = 0.0;
    std::vector<double> t_centered(n);
    for (std::size_t j = 0; j < n; ++j) {
        t_centered[j] = exam.t1c_series[j].second - t_mean;
        denom += t_centered[j] * t_centered[j];
    }
    const std::size_t voxels = out.dce_out.data().size();
    for (std::size_t i = 0; i < voxels; ++i) {
        double num = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            num += t_centered[j] * double(exam.t1c_series[j].first.data()[i]);
        out.dce_out.data()[i] = float(num / denom);
    }
    return out;
}

ModelInput make_model_input(const ExamBundle& exam, const ModelInputOptions& opt) {
    ModelInput mi;
    mi.channels.push_back(exam.t1c_series.front().first);
    if (opt.use_dce) {
        DcePair dce = compute_dce(exam);
        mi.channels.push_back(std::move(dce.dce_in));
        mi.channels.push_back(std::move(dce.dce_out));
    }
    if (opt.use_t2) {
        if (!exam.t2)
            throw DataError("model input requested T2 but the exam has none");
        mi.channels.push_back(*exam.t2);
    }
    return mi;
}

} // namespace voxelseg::harmonize
