#pragma once
#include <array>
#include <optional>
#include <vector>

#include "voxelseg/harmonize.hpp"
#include "voxelseg/models.hpp"
#include "voxelseg/volume.hpp"

namespace voxelseg::inference {

struct Tile {
    std::array<int, 3> output_origin{0, 0, 0};
};

/// Output tiles stride by the tile size and cover every voxel; when a dim is
/// not divisible the last tile shifts inward and overlaps, and because tiles
/// are written in plan order the later (shifted) tile deterministically
/// overrides the overlap. Input patches extend symmetrically by the
/// receptive-field margin and read through reflect padding.
struct TilingPlan {
    std::array<int, 3> input_patch{19, 75, 75};
    std::array<int, 3> output_tile{1, 37, 37};
    Dims volume_dims;
    std::vector<Tile> tiles;
};

TilingPlan plan_tiling(Dims volume_dims, std::array<int, 3> input_patch,
                       std::array<int, 3> output_tile);

/// Restricts a plan to the tiles covering one slice (their union of output
/// rows is exactly that slice for through-plane tile extent 1).
TilingPlan plan_for_slice(const TilingPlan& plan, int slice);

/// Per-tile auxiliary inputs.
struct AuxInputs {
    const Volume* prior_mask = nullptr; // exam-frame prior, sampled per tile
    const Volume* tpm = nullptr;        // canonical-frame tumor prior
    std::array<int, 3> tpm_offset{0, 0, 0}; // exam voxel + offset -> tpm voxel
};

/// Runs the network over the plan and assembles the malignancy-probability
/// volume (softmax channel 1). Deterministic: fixed tile order, per-voxel
/// write semantics, independent of batching. Maps agree bit-exactly across
/// plans whose tile origins differ by stride-compatible (even) offsets; an
/// odd relative shift re-aligns the internal pooling grid and perturbs the
/// overlap at interpolation level, which the ordered override resolves
/// deterministically.
Volume predict_volume(models::BuiltModel& model, const harmonize::ModelInput& input,
                      const TilingPlan& plan, const AuxInputs& aux = {}, int batch_tiles = 8);

/// Relative-max thresholding of one slice: mask = {p >= rel_threshold * max},
/// restricted to 8-connected 2D components containing a voxel within 1e-6 of
/// the slice maximum (unless keep_all_components). An all-zero slice gives an
/// empty mask.
SegmentationMask threshold_slice(const Volume& prob_map, int slice_idx, double rel_threshold,
                                 bool keep_all_components = false);

/// 8-connected component labels within one slice of a binary mask;
/// 0 = background, components numbered from 1.
std::vector<int> label_components_2d(const SegmentationMask& mask, int slice);

/// Mean-Dice grid search for the relative threshold; ties break toward the
/// lower threshold. references[i] holds >= 1 reference masks for exam i.
double select_threshold(const std::vector<const Volume*>& maps,
                        const std::vector<std::vector<const SegmentationMask*>>& references,
                        const std::vector<int>& slices, const std::vector<double>& grid);

/// The sweep grid used for threshold tuning: 0.05, 0.10, ..., 0.95.
std::vector<double> default_threshold_grid();

} // namespace voxelseg::inference
