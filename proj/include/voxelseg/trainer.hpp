#pragma once
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "voxelseg/adam.hpp"
#include "voxelseg/harmonize.hpp"
#include "voxelseg/models.hpp"
#include "voxelseg/phantom.hpp"
#include "voxelseg/rng.hpp"

namespace voxelseg::trainer {

struct SamplerConfig {
    int non_tumor_parts = 4;          // tumor : non-tumor = 1 : parts
    double enrichment_quantile = 0.9; // high-T1c threshold within benign breasts
    std::uint64_t rng_seed = 2;
};

struct TrainConfig {
    int batch_size = 16;
    double lr = 1e-6;
    int iterations_per_epoch = 2976;
    int patches_per_epoch = 48000;
    int scans_per_epoch = 4800;
    int max_epochs = 50;
    int patience = 5;
    std::uint64_t init_seed = 1;
    std::uint64_t sample_seed = 2;
    double rel_threshold = 0.6;
    double rotate_max_degrees = 15.0;
    bool augment = true;

    /// batch_size * iterations_per_epoch must match patches_per_epoch
    /// within 2%.
    void validate() const;
};

/// One exam held in memory with its harmonized channels and sampling pools.
struct LoadedExam {
    std::string id;
    harmonize::ModelInput input;
    SegmentationMask breast;   // 3D
    SegmentationMask gt_slice; // 2D at reference_slice (malignant only)
    int reference_slice = -1;
    bool malignant = false;
    double bpe_level = 0.0;
    std::vector<std::int64_t> tumor_voxels;  // linear indices (segmented slice)
    std::vector<std::int64_t> breast_voxels; // benign sampling pool
    std::vector<std::int64_t> bright_voxels; // benign pool above the quantile
    std::array<double, 3> breast_com{0, 0, 0};
};

struct HarmonizeOptions {
    std::string mode = "exam"; // exam | scanner | none
    bool use_dce = true;
    bool use_t2 = false;
    double enrichment_quantile = 0.9;
    const harmonize::IntensityMap* scanner_map = nullptr; // for mode == scanner
};

/// Loads one partition into memory, harmonizing on the fly.
std::vector<LoadedExam> load_partition(const phantom::Manifest& manifest,
                                       const std::string& partition,
                                       const HarmonizeOptions& opt);

/// Same loading path for an in-memory generated exam (tests, experiments).
LoadedExam load_exam_from_generated(const phantom::GeneratedExam& gen, const std::string& id,
                                    const HarmonizeOptions& opt);

struct SampleLoc {
    const LoadedExam* exam = nullptr;
    std::array<int, 3> center{0, 0, 0};
    bool is_tumor = false;
};

/// The sampling distribution alone: tumor draws with probability
/// 1/(1+parts) centered on a uniform tumor voxel of a malignant exam; other
/// draws land in a benign exam, mixing uniform-in-breast with
/// high-T1c-enriched locations.
SampleLoc sample_location(const std::vector<const LoadedExam*>& malignant,
                          const std::vector<const LoadedExam*>& benign,
                          const SamplerConfig& cfg, Rng& rng);

struct Patch {
    std::vector<Tensor> inputs; // patch [+context] [+prior], no batch axis
    Tensor target;              // one-hot (classes, tile)
    bool is_tumor = false;
};

/// Extracts the network inputs and the one-hot tile target at a location,
/// reading through reflect padding.
Patch extract_patch(const LoadedExam& exam, std::array<int, 3> center,
                    const models::ArchGeometry& geom, const models::TissueProbabilityMap* tpm,
                    std::array<int, 3> tpm_offset);

/// Rotates a (C, D, H, W) stack about one spatial axis by `degrees`, linear
/// interpolation, reflect padding, dims preserved.
Tensor rotate_tensor(const Tensor& t, int axis, double degrees, bool nearest);

/// Draws the axis uniformly from the three spatial axes and an angle uniform
/// in +-max_degrees; images interpolate linearly, the target nearest-neighbor.
void augment_rotate(Patch& patch, double max_degrees, Rng& rng);

struct EpochStats {
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_dice = 0.0;
};

struct TrainState {
    models::BuiltModel model;
    AdamState adam;
    int epoch = 0;
    double best_val_loss = 1e300;
    int best_epoch = -1;
    std::vector<EpochStats> history;
};

/// Median 2D Dice over validation exams: full slice inference at the
/// reference slice, relative-max thresholding, Dice vs the 2D ground truth.
/// `predict_slice` is injectable for tests; the default runs the tiled
/// network inference.
using PredictSliceFn = std::function<Volume(const LoadedExam&, int slice)>;
double validate_median_dice(const std::vector<const LoadedExam*>& val_exams,
                            double rel_threshold, const PredictSliceFn& predict_slice);

/// Halt when the validation loss has not improved for `patience` epochs.
bool early_stop(const TrainState& state, int patience);

struct EpochContext {
    std::vector<const LoadedExam*> train_malignant;
    std::vector<const LoadedExam*> train_benign;
    std::vector<const LoadedExam*> val;
    SamplerConfig sampler;
    const models::TissueProbabilityMap* tpm = nullptr;
    std::function<std::array<int, 3>(const LoadedExam&)> tpm_offset_for;
};

/// One epoch: iterations_per_epoch Adam steps over sampled, augmented
/// batches; appends train/val statistics to the history. Aborts with
/// NumericalError if the loss turns non-finite.
void train_epoch(TrainState& state, const EpochContext& ctx, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Full runs (CLI surface)
// ---------------------------------------------------------------------------

struct RunOptions {
    std::string arch = "unet3d"; // unet3d | deepmedic
    int base_channels = 24;
    bool prior_mask = false;
    bool use_t2 = false;
    bool use_dce = true;
    std::string harmonize_mode = "exam"; // exam | scanner
    bool crf = false;
    std::filesystem::path out_dir;
    int train_malignant_limit = -1; // subset for data-size experiments (-1 = all)
};

struct RunResult {
    std::filesystem::path checkpoint; // best epoch
    std::filesystem::path log_csv;
    std::vector<EpochStats> history;
    double best_val_dice = 0.0;
    std::int64_t trainable_parameters = 0;
    int epochs_run = 0;
};

/// End-to-end training driver: loads partitions, builds the architecture,
/// runs epochs with early stopping, writes the CSV log and the best-epoch
/// checkpoint.
RunResult train_run(const phantom::Manifest& manifest, const TrainConfig& cfg,
                    const RunOptions& opt);

/// Builds the model the same way train_run does (for prediction drivers).
models::BuiltModel build_for_options(const RunOptions& opt, std::uint64_t init_seed);

/// Tiled inference over the whole exam (or one slice), wiring the prior /
/// TPM auxiliary inputs consistently with training.
Volume predict_full(models::BuiltModel& model, const LoadedExam& exam,
                    const models::TissueProbabilityMap* tpm = nullptr);
Volume predict_one_slice(models::BuiltModel& model, const LoadedExam& exam, int slice,
                         const models::TissueProbabilityMap* tpm = nullptr);

/// Canonical-frame offset of an exam: frame center minus breast COM.
std::array<int, 3> tpm_offset_for_exam(const LoadedExam& exam);

} // namespace voxelseg::trainer
