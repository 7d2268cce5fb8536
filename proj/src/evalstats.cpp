#include "voxelseg/evalstats.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>

namespace voxelseg::evalstats {

namespace {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

double percentile_sorted(const std::vector<double>& sorted, double p) {
    if (sorted.empty())
        return 0.0;
    const double rank = p * double(sorted.size() - 1);
    const std::size_t lo = std::size_t(std::floor(rank));
    if (lo + 1 >= sorted.size())
        return sorted.back();
    const double t = rank - double(lo);
    return sorted[lo] * (1.0 - t) + sorted[lo + 1] * t;
}

/// Average ranks (1-based) with ties; returns ranks and the tie-group sizes.
std::pair<std::vector<double>, std::vector<std::int64_t>> average_ranks(
    const std::vector<double>& values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i)
        order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n, 0.0);
    std::vector<std::int64_t> tie_sizes;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]])
            ++j;
        const double avg = (double(i + 1) + double(j + 1)) / 2.0;
        for (std::size_t k = i; k <= j; ++k)
            ranks[order[k]] = avg;
        tie_sizes.push_back(std::int64_t(j - i + 1));
        i = j + 1;
    }
    return {std::move(ranks), std::move(tie_sizes)};
}

} // namespace

double median(std::vector<double> values) {
    if (values.empty())
        throw DataError("median of an empty sample");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

// ---------------------------------------------------------------------------
// Dice and consensus
// ---------------------------------------------------------------------------

ConfusionCounts confusion(const SegmentationMask& a, const SegmentationMask& b) {
    if (a.dims() != b.dims())
        throw DataError("confusion: mask dims mismatch");
    if (a.slice_index() && b.slice_index() && *a.slice_index() != *b.slice_index())
        throw DataError("confusion: masks refer to different slices");
    ConfusionCounts c;
    for (std::size_t i = 0; i < a.values().size(); ++i) {
        const bool pa = a.values()[i] != 0;
        const bool pb = b.values()[i] != 0;
        c.tp += pa && pb;
        c.fp += pa && !pb;
        c.fn += !pa && pb;
        c.tn += !pa && !pb;
    }
    return c;
}

double dice(const SegmentationMask& a, const SegmentationMask& b) {
    const ConfusionCounts c = confusion(a, b);
    if (c.tp + c.fp + c.fn == 0)
        return 1.0; // both empty
    return 2.0 * double(c.tp) / double(2 * c.tp + c.fp + c.fn);
}

SegmentationMask consensus_reference(const std::vector<SegmentationMask>& masks,
                                     const std::string& exclude_rater_id) {
    std::vector<const SegmentationMask*> kept;
    for (const auto& m : masks)
        if (m.rater_id() != exclude_rater_id)
            kept.push_back(&m);
    if (kept.size() < 2)
        throw DataError("consensus needs >= 2 masks after exclusion");
    SegmentationMask out(kept.front()->dims(), MaskSource::consensus,
                         kept.front()->slice_index());
    for (std::size_t i = 0; i < out.values().size(); ++i) {
        std::uint8_t v = 1;
        for (const auto* m : kept) {
            if (m->dims() != out.dims())
                throw DataError("consensus mask dims mismatch");
            v = std::uint8_t(v & (m->values()[i] != 0 ? 1 : 0));
        }
        out.values()[i] = v;
    }
    return out;
}

// ---------------------------------------------------------------------------
// ROC
// ---------------------------------------------------------------------------

RocCurve roc(const std::vector<float>& scores, const std::vector<std::uint8_t>& labels) {
    if (scores.size() != labels.size())
        throw DataError("roc: score/label length mismatch");
    std::int64_t pos = 0, neg = 0;
    for (auto l : labels)
        (l ? pos : neg)++;
    if (pos == 0 || neg == 0)
        throw DataError("roc: reference needs at least one positive and one negative");

    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    RocCurve curve;
    curve.points.emplace_back(0.0, 0.0);
    std::int64_t tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]])
            ++j;
        for (std::size_t k = i; k <= j; ++k)
            (labels[order[k]] ? tp : fp)++;
        curve.points.emplace_back(double(fp) / double(neg), double(tp) / double(pos));
        i = j + 1;
    }
    double auc = 0.0;
    for (std::size_t k = 1; k < curve.points.size(); ++k) {
        const auto& [x0, y0] = curve.points[k - 1];
        const auto& [x1, y1] = curve.points[k];
        auc += (x1 - x0) * (y0 + y1) / 2.0;
    }
    curve.auc = auc;
    return curve;
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank
// ---------------------------------------------------------------------------

RankTestResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                    Alternative alt) {
    if (a.size() != b.size())
        throw DataError("wilcoxon: paired series must have equal length");
    std::vector<double> abs_d;
    std::vector<int> signs;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        if (d != 0.0) {
            abs_d.push_back(std::abs(d));
            signs.push_back(d > 0 ? 1 : -1);
        }
    }
    RankTestResult res;
    res.n_effective = int(abs_d.size());
    if (abs_d.empty()) {
        res.method = "degenerate";
        res.p_value = 1.0;
        return res;
    }
    auto [ranks, ties] = average_ranks(abs_d);
    double w = 0.0;
    for (std::size_t i = 0; i < ranks.size(); ++i)
        if (signs[i] > 0)
            w += ranks[i];
    res.statistic = w;

    const int n = res.n_effective;
    if (n <= 12) {
        res.method = "exact";
        const std::uint64_t total = 1ull << n;
        std::uint64_t ge = 0, le = 0;
        for (std::uint64_t mask = 0; mask < total; ++mask) {
            double ws = 0.0;
            for (int i = 0; i < n; ++i)
                if (mask & (1ull << i))
                    ws += ranks[std::size_t(i)];
            if (ws >= w - 1e-9)
                ++ge;
            if (ws <= w + 1e-9)
                ++le;
        }
        const double p_ge = double(ge) / double(total);
        const double p_le = double(le) / double(total);
        switch (alt) {
            case Alternative::greater: res.p_value = p_ge; break;
            case Alternative::less: res.p_value = p_le; break;
            case Alternative::two_sided:
                res.p_value = std::min(1.0, 2.0 * std::min(p_ge, p_le));
                break;
        }
        return res;
    }

    res.method = "normal_approx";
    const double mu = double(n) * (n + 1) / 4.0;
    double tie_term = 0.0;
    for (auto t : ties)
        tie_term += double(t) * t * t - double(t);
    const double sigma2 = double(n) * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0;
    if (sigma2 <= 0) {
        res.method = "degenerate";
        res.p_value = 1.0;
        return res;
    }
    const double sigma = std::sqrt(sigma2);
    switch (alt) {
        case Alternative::greater:
            res.p_value = 1.0 - normal_cdf((w - mu - 0.5) / sigma);
            break;
        case Alternative::less:
            res.p_value = normal_cdf((w - mu + 0.5) / sigma);
            break;
        case Alternative::two_sided: {
            const double p_hi = 1.0 - normal_cdf((w - mu - 0.5) / sigma);
            const double p_lo = normal_cdf((w - mu + 0.5) / sigma);
            res.p_value = std::min(1.0, 2.0 * std::min(p_hi, p_lo));
            break;
        }
    }
    return res;
}

TostResult tost_equivalence(const std::vector<double>& scores,
                            const std::vector<double>& lower_ref,
                            const std::vector<double>& upper_ref, double alpha) {
    TostResult r;
    r.p_lower = wilcoxon_signed_rank(scores, lower_ref, Alternative::greater).p_value;
    r.p_upper = wilcoxon_signed_rank(scores, upper_ref, Alternative::less).p_value;
    r.equivalent = r.p_lower < alpha && r.p_upper < alpha;
    return r;
}

// ---------------------------------------------------------------------------
// Mann-Whitney U
// ---------------------------------------------------------------------------

namespace {

double binomial(std::int64_t n, std::int64_t k) {
    double r = 1.0;
    for (std::int64_t i = 1; i <= k; ++i)
        r = r * double(n - k + i) / double(i);
    return r;
}

/// Enumerates size-k subsets of {0..n-1}; calls f with the rank sum.
void enumerate_rank_sums(const std::vector<double>& ranks, int k,
                         const std::function<void(double)>& f) {
    const int n = int(ranks.size());
    std::vector<int> idx(std::size_t(k), 0);
    for (int i = 0; i < k; ++i)
        idx[std::size_t(i)] = i;
    while (true) {
        double sum = 0.0;
        for (int i = 0; i < k; ++i)
            sum += ranks[std::size_t(idx[std::size_t(i)])];
        f(sum);
        int i = k - 1;
        while (i >= 0 && idx[std::size_t(i)] == n - k + i)
            --i;
        if (i < 0)
            break;
        ++idx[std::size_t(i)];
        for (int j = i + 1; j < k; ++j)
            idx[std::size_t(j)] = idx[std::size_t(j - 1)] + 1;
    }
}

} // namespace

RankTestResult mann_whitney_u(const std::vector<double>& group_a,
                              const std::vector<double>& group_b, Alternative alt) {
    if (group_a.empty() || group_b.empty())
        throw DataError("mann_whitney_u: both groups must be non-empty");
    const std::int64_t n = std::int64_t(group_a.size());
    const std::int64_t m = std::int64_t(group_b.size());

    std::vector<double> pooled = group_a;
    pooled.insert(pooled.end(), group_b.begin(), group_b.end());
    auto [ranks, ties] = average_ranks(pooled);

    double rank_sum_a = 0.0;
    for (std::size_t i = 0; i < group_a.size(); ++i)
        rank_sum_a += ranks[i];
    const double u = rank_sum_a - double(n) * (n + 1) / 2.0;

    RankTestResult res;
    res.statistic = u;
    res.n_effective = int(n + m);

    const std::int64_t k = std::min(n, m);
    if (k <= 8 && binomial(n + m, k) <= 200000.0) {
        res.method = "exact";
        // Enumerate placements of the smaller group; U of group a relates to
        // U of group b by U_a + U_b = n*m.
        const bool small_is_a = n <= m;
        std::int64_t total = 0, ge = 0, le = 0;
        enumerate_rank_sums(ranks, int(k), [&](double rsum) {
            const double u_small = rsum - double(k) * (k + 1) / 2.0;
            const double u_a = small_is_a ? u_small : double(n) * m - u_small;
            ++total;
            if (u_a >= u - 1e-9)
                ++ge;
            if (u_a <= u + 1e-9)
                ++le;
        });
        const double p_ge = double(ge) / double(total);
        const double p_le = double(le) / double(total);
        switch (alt) {
            case Alternative::greater: res.p_value = p_ge; break;
            case Alternative::less: res.p_value = p_le; break;
            case Alternative::two_sided:
                res.p_value = std::min(1.0, 2.0 * std::min(p_ge, p_le));
                break;
        }
        return res;
    }

    res.method = "normal_approx";
    const double nm = double(n) * double(m);
    const double big_n = double(n + m);
    double tie_term = 0.0;
    for (auto t : ties)
        tie_term += double(t) * t * t - double(t);
    const double sigma2 = nm / 12.0 * (big_n + 1.0 - tie_term / (big_n * (big_n - 1.0)));
    if (sigma2 <= 0) {
        res.method = "degenerate";
        res.p_value = 1.0;
        return res;
    }
    const double mu = nm / 2.0;
    const double sigma = std::sqrt(sigma2);
    switch (alt) {
        case Alternative::greater:
            res.p_value = 1.0 - normal_cdf((u - mu - 0.5) / sigma);
            break;
        case Alternative::less:
            res.p_value = normal_cdf((u - mu + 0.5) / sigma);
            break;
        case Alternative::two_sided: {
            const double p_hi = 1.0 - normal_cdf((u - mu - 0.5) / sigma);
            const double p_lo = normal_cdf((u - mu + 0.5) / sigma);
            res.p_value = std::min(1.0, 2.0 * std::min(p_hi, p_lo));
            break;
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Test-set evaluation
// ---------------------------------------------------------------------------

EvalReport evaluate_test_set(const std::vector<ExamEval>& exams, double alpha,
                             double threshold_used) {
    if (exams.empty())
        throw DataError("evaluate_test_set: no exams");
    EvalReport report;
    report.threshold_used = threshold_used;

    for (const auto& m : exams.front().rater_masks)
        report.rater_ids.push_back(m.rater_id());
    const std::size_t n_raters = report.rater_ids.size();
    if (n_raters < 3)
        throw DataError("evaluate_test_set needs >= 3 raters for consensus references");

    std::map<std::string, std::vector<double>> rater_series;
    std::vector<double> aucs;

    for (const auto& exam : exams) {
        if (exam.rater_masks.size() != n_raters)
            throw DataError("exam " + exam.exam_id + " has an inconsistent rater count");
        double model_sum = 0.0, rater_sum = 0.0;
        for (std::size_t r = 0; r < n_raters; ++r) {
            const std::string& rid = exam.rater_masks[r].rater_id();
            SegmentationMask ref = consensus_reference(exam.rater_masks, rid);
            const double dm = dice(exam.model_mask, ref);
            const double dr = dice(exam.rater_masks[r], ref);
            model_sum += dm;
            rater_sum += dr;
            rater_series[rid].push_back(dr);
            report.rows.push_back(
                {exam.exam_id, "Ref" + std::to_string(r + 1), dm, dr, dm - dr});
            if (!exam.prob_slice.empty()) {
                // Labels from the reference restricted to its slice.
                const int slice = ref.slice_index().value_or(0);
                const Dims d = ref.dims();
                std::vector<std::uint8_t> labels;
                labels.reserve(std::size_t(d.rows) * d.cols);
                for (int rr = 0; rr < d.rows; ++rr)
                    for (int cc = 0; cc < d.cols; ++cc)
                        labels.push_back(ref.at(slice, rr, cc));
                if (exam.prob_slice.size() != labels.size())
                    throw DataError("prob_slice length mismatch for exam " + exam.exam_id);
                bool has_pos = false, has_neg = false;
                for (auto l : labels)
                    (l ? has_pos : has_neg) = true;
                if (has_pos && has_neg)
                    aucs.push_back(roc(exam.prob_slice, labels).auc);
            }
        }
        report.per_exam_model_dice.push_back(model_sum / double(n_raters));
        report.per_exam_rater_dice.push_back(rater_sum / double(n_raters));
    }

    report.median_model_dice = median(report.per_exam_model_dice);
    report.median_rater_dice = median(report.per_exam_rater_dice);
    {
        auto sorted = report.per_exam_model_dice;
        std::sort(sorted.begin(), sorted.end());
        report.model_dice_p5_p95 = {percentile_sorted(sorted, 0.05),
                                    percentile_sorted(sorted, 0.95)};
        sorted = report.per_exam_rater_dice;
        std::sort(sorted.begin(), sorted.end());
        report.rater_dice_p5_p95 = {percentile_sorted(sorted, 0.05),
                                    percentile_sorted(sorted, 0.95)};
    }

    report.wilcoxon_model_vs_rater =
        wilcoxon_signed_rank(report.per_exam_model_dice, report.per_exam_rater_dice);

    // TOST bounds: weakest and strongest rater by median of their own series.
    std::string lo_id, hi_id;
    double lo_med = std::numeric_limits<double>::infinity();
    double hi_med = -std::numeric_limits<double>::infinity();
    for (const auto& [rid, series] : rater_series) {
        const double med = median(series);
        if (med < lo_med) {
            lo_med = med;
            lo_id = rid;
        }
        if (med > hi_med) {
            hi_med = med;
            hi_id = rid;
        }
    }
    report.tost_lower_rater = lo_id;
    report.tost_upper_rater = hi_id;
    report.tost = tost_equivalence(report.per_exam_model_dice, rater_series[lo_id],
                                   rater_series[hi_id], alpha);

    if (!aucs.empty()) {
        double s = 0.0;
        for (double a : aucs)
            s += a;
        report.mean_auc = s / double(aucs.size());
    }

    // BPE stratification (high vs low) when levels are informative.
    std::vector<double> high, low;
    for (std::size_t i = 0; i < exams.size(); ++i)
        ((exams[i].bpe_level >= 0.75) ? high : low).push_back(report.per_exam_model_dice[i]);
    if (!high.empty() && !low.empty())
        report.bpe_mannwhitney = mann_whitney_u(high, low);

    return report;
}

} // namespace voxelseg::evalstats
