#pragma once
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "voxelseg/volume.hpp"

namespace voxelseg::harmonize {

/// Monotone piecewise-linear intensity lookup fitted per scanner.
/// Defined on [0, max_source]; inputs outside the knot range are clamped.
struct IntensityMap {
    std::string scanner_id;
    std::vector<double> source; // strictly increasing knots
    std::vector<double> target; // non-decreasing

    double operator()(double x) const;
    void validate() const;

    /// Two-column CSV (source_intensity, target_intensity) with a header
    /// comment carrying the scanner id.
    void save_csv(const std::filesystem::path& file) const;
    static IntensityMap load_csv(const std::filesystem::path& file);
};

/// Contrast-dynamics summary: initial uptake and post-contrast slope (min^-1).
struct DcePair {
    Volume dce_in;
    Volume dce_out;
};

struct ModelInputOptions {
    bool use_dce = true; // emit (t1c, dce_in, dce_out) vs (t1c) only
    bool use_t2 = false; // append the T2 volume as an extra channel
};

/// Ordered network input channels; channel 0 is always the first
/// post-contrast T1c.
struct ModelInput {
    std::vector<Volume> channels;

    const Dims& dims() const { return channels.front().dims(); }
};

/// Doubles the in-plane (row, col) dims by separable linear interpolation;
/// slice count unchanged, in-plane spacing halved. Sample r' of the output
/// reads source coordinate r'/2, with the last segment extended linearly at
/// the top edge (exact on ramps).
Volume upsample_inplane_x2(const Volume& v);

/// Linear-interpolation percentile between order statistics; p in [0,1].
double percentile(std::vector<double> values, double p);

/// The exam's intensity scale: 95th percentile of strictly positive
/// pre-contrast T1 voxels. Throws DataError when T1 has no positive voxel.
double t1_p95_scale(const ExamBundle& exam);

/// Divides every volume in the exam by t1_p95_scale(exam).
ExamBundle scale_by_t1_p95(const ExamBundle& exam);

/// Chi-square(4) distribution via its elementary closed form
/// F(x) = 1 - e^{-x/2}(1 + x/2); inverse by bisection to 1e-10.
double chi2_4_cdf(double x);
double chi2_4_inv(double p);

/// Quantile matching of masked breast voxels onto chi-square(4), on 4096
/// uniformly spaced quantiles with piecewise-linear interpolation between
/// knots. Throws DataError on an empty mask, NumericalError when the masked
/// intensities are (near-)constant and the CDF cannot be inverted.
IntensityMap fit_scanner_map(
    const std::vector<std::pair<const Volume*, const SegmentationMask*>>& masked_volumes,
    std::string scanner_id);

/// Voxelwise monotone transform; inputs clamped to the map's domain.
Volume apply_intensity_map(const Volume& v, const IntensityMap& m);
ExamBundle apply_intensity_map_exam(const ExamBundle& exam, const IntensityMap& m);

/// dce_in = first post-contrast minus pre-contrast; dce_out = per-voxel OLS
/// slope of intensity over acquisition time across all post-contrast volumes
/// (all zeros when only one post-contrast volume exists).
DcePair compute_dce(const ExamBundle& exam);

/// Assembles the network input channels from an already intensity-scaled exam.
ModelInput make_model_input(const ExamBundle& exam, const ModelInputOptions& opt = {});

} // namespace voxelseg::harmonize
