#pragma once
#include <optional>
#include <string>
#include <vector>

#include "voxelseg/volume.hpp"

namespace voxelseg::evalstats {

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

ConfusionCounts confusion(const SegmentationMask& a, const SegmentationMask& b);

/// Dice = 2TP / (2TP + FP + FN); both-empty pairs score 1.0.
double dice(const SegmentationMask& a, const SegmentationMask& b);

/// Voxelwise AND of all masks except the excluded rater's. At least two masks
/// must remain.
SegmentationMask consensus_reference(const std::vector<SegmentationMask>& masks,
                                     const std::string& exclude_rater_id);

struct RocCurve {
    std::vector<std::pair<double, double>> points; // (fpr, tpr), increasing
    double auc = 0.0;
};

/// Threshold sweep over the unique score values; AUC by trapezoid, which with
/// tie-grouped points equals the normalized Mann-Whitney statistic exactly.
RocCurve roc(const std::vector<float>& scores, const std::vector<std::uint8_t>& labels);

enum class Alternative { two_sided, greater, less };

struct RankTestResult {
    double statistic = 0.0; // W (positive-rank sum) or U
    double p_value = 1.0;
    int n_effective = 0;
    std::string method; // "exact" | "normal_approx" | "degenerate"
};

/// Paired signed-rank test. Zero differences dropped, tied |d| get average
/// ranks, W = positive-rank sum. Exact conditional enumeration (2^n sign
/// patterns over the observed ranks) for n <= 12; tie-corrected normal
/// approximation with continuity correction otherwise. `greater` tests the
/// alternative median(a - b) > 0.
RankTestResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                    Alternative alt = Alternative::two_sided);

struct TostResult {
    double p_lower = 1.0; // H1: scores > lower_ref
    double p_upper = 1.0; // H1: scores < upper_ref
    bool equivalent = false;
};

/// Two one-sided signed-rank tests against the paired lower/upper reference
/// series; equivalence declared when both p-values fall below alpha.
TostResult tost_equivalence(const std::vector<double>& scores,
                            const std::vector<double>& lower_ref,
                            const std::vector<double>& upper_ref, double alpha = 0.05);

/// U = #(a_i > b_j) + 0.5 #(a_i == b_j). Exact enumeration over
/// C(n+m, n) arrangements for min(n, m) <= 8, tie-corrected normal
/// approximation otherwise.
RankTestResult mann_whitney_u(const std::vector<double>& group_a,
                              const std::vector<double>& group_b,
                              Alternative alt = Alternative::two_sided);

// ---------------------------------------------------------------------------
// Test-set evaluation with consensus references
// ---------------------------------------------------------------------------

struct ExamEval {
    std::string exam_id;
    SegmentationMask model_mask;
    std::vector<SegmentationMask> rater_masks; // rater_id set on each
    std::vector<float> prob_slice;             // reference-slice probabilities (optional)
    double bpe_level = 0.0;
};

struct ReportRow {
    std::string exam_id;
    std::string reference_id; // "RefK" = intersection of the other raters
    double dice_model = 0.0;
    double dice_rater = 0.0;
    double delta_dice = 0.0;
};

struct EvalReport {
    std::vector<ReportRow> rows;
    std::vector<std::string> rater_ids;
    double median_model_dice = 0.0;  // per-exam mean over references, median
    double median_rater_dice = 0.0;
    std::pair<double, double> model_dice_p5_p95{0.0, 0.0};
    std::pair<double, double> rater_dice_p5_p95{0.0, 0.0};
    std::vector<double> per_exam_model_dice; // mean over references
    std::vector<double> per_exam_rater_dice;
    RankTestResult wilcoxon_model_vs_rater;
    TostResult tost;
    std::string tost_lower_rater, tost_upper_rater;
    std::optional<double> mean_auc; // when probability slices are provided
    std::optional<RankTestResult> bpe_mannwhitney; // high vs low BPE strata
    double threshold_used = 0.0;
};

/// The full consensus protocol: per exam and per rater, the reference is the
/// intersection of the remaining raters; the model and the held-out rater are
/// both scored against it. Aggregates medians, percentile ranges, the paired
/// Wilcoxon test, and TOST with the weakest/strongest rater as bounds.
EvalReport evaluate_test_set(const std::vector<ExamEval>& exams, double alpha = 0.05,
                             double threshold_used = 0.6);

double median(std::vector<double> values);

} // namespace voxelseg::evalstats
