#pragma once
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "voxelseg/volume.hpp"

namespace voxelseg::phantom {

/// Synthetic breast exam recipe. Everything downstream is a pure function of
/// the spec (seed included).
struct PhantomSpec {
    Dims dims{19, 74, 74};
    int lesion_count = 1;            // 0..3
    double lesion_radius_min = 3.0;  // voxels
    double lesion_radius_max = 6.0;
    double bpe_level = 0.3;          // parenchymal enhancement strength, [0,1]
    double noise_sigma = 0.02;       // relative to the base intensity scale
    double uptake_lesion = 1.0;      // min^-1-scale uptake amplitudes
    double uptake_parenchyma = 0.5;
    std::uint64_t seed = 1;
    bool with_t2 = true;

    void validate() const;
};

struct GeneratedExam {
    ExamBundle exam;
    SegmentationMask ground_truth; // 3D lesion mask
    SegmentationMask breast_mask;  // 3D breast region
    double bpe_level = 0.0;
};

/// Half-ellipsoid breast over dark background, parenchymal texture with
/// BPE-scaled persistent uptake, lesions as smoothed ellipsoid unions with
/// fast uptake and washout (negative post-contrast slope). Post-contrast
/// volumes at 1, 2.5 and 4 minutes.
GeneratedExam generate_exam(const PhantomSpec& spec);

struct VirtualRadiologistSpec {
    int dilation_erosion_range = 1;        // morphological steps, 8-connected
    double boundary_jitter_probability = 0.1;
    std::uint64_t seed = 1;
};

/// Morphological dilation/erosion by a random number of steps plus boundary
/// voxel flips; 2D masks perturb within their slice. Throws DataError when
/// the perturbation would empty the mask.
SegmentationMask perturb_segmentation(const SegmentationMask& mask,
                                      const VirtualRadiologistSpec& spec);

/// One 8-connected morphological step on a (possibly slice-restricted) mask.
SegmentationMask dilate_mask(const SegmentationMask& m, int steps);
SegmentationMask erode_mask(const SegmentationMask& m, int steps);

/// Index of the slice with the largest positive area (ties to the lowest).
int largest_area_slice(const SegmentationMask& m);
/// Extracts one slice as a 2D (slice-indexed) mask.
SegmentationMask slice_mask(const SegmentationMask& m, int slice, MaskSource source);

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

struct DatasetSpec {
    int n_malignant = 0;
    int n_benign = 0;
    int n_test_malignant = 0; // held-out exams carrying virtual-rater masks
    double val_fraction = 0.2;
    int raters = 4;
    std::uint64_t seed = 1;
    PhantomSpec proto; // per-exam seeds derived from `seed`
    bool vary_bpe = true; // draw per-exam BPE in [0.05, 0.95]
};

struct ManifestEntry {
    std::string id;
    std::string path;      // exam bundle directory, relative to the manifest
    std::string label;     // malignant | benign
    std::string partition; // train | val | test
    double bpe_level = 0.0;
    int reference_slice = -1; // -1 when no lesion
    std::string gt_slice_stem;   // 2D mask at the reference slice (malignant)
    std::string gt3d_stem;       // full 3D lesion mask
    std::string breast_stem;     // 3D breast mask
    std::vector<std::string> rater_stems; // test exams only
};

struct Manifest {
    std::uint64_t seed = 0;
    std::vector<ManifestEntry> exams;
    std::filesystem::path root; // directory holding manifest.json

    void save(const std::filesystem::path& dir) const;
    static Manifest load(const std::filesystem::path& dir);

    std::vector<const ManifestEntry*> partition(const std::string& name) const;
};

/// Writes exam bundles, masks and manifest.json under out_dir. Train/val
/// split: floor(val_fraction * n) exams of each label go to validation.
/// Test exams are generated on top of n_malignant and carry `raters`
/// virtual-radiologist masks of graded strength.
Manifest generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir);

} // namespace voxelseg::phantom
