#pragma once
#include <array>
#include <cstdint>
#include <vector>

#include "voxelseg/graph.hpp"
#include "voxelseg/volume.hpp"

namespace voxelseg::models {

/// Patch geometry an architecture exposes to the sampler and the tiler.
struct ArchGeometry {
    std::array<int, 3> input_patch{19, 75, 75};
    std::array<int, 3> output_tile{1, 37, 37};
    bool has_context = false;
    std::array<int, 3> context_field{0, 0, 0}; // full-res extent feeding the context input
    std::array<int, 3> context_input{0, 0, 0}; // graph-facing dims after x2 in-plane pooling
    bool has_prior = false;                    // tile-shaped prior-probability input
    int in_channels = 3;
    int classes = 2;

    std::array<int, 3> margin() const {
        return {(input_patch[0] - output_tile[0]) / 2, (input_patch[1] - output_tile[1]) / 2,
                (input_patch[2] - output_tile[2]) / 2};
    }
};

struct BuiltModel {
    NetworkGraph graph;
    ArchGeometry geom;
};

// ---------------------------------------------------------------------------
// 3D U-Net
//
// Input (B, C, 19, 75, 75) -> probabilities (B, classes, 1, 37, 37) for the
// center 37x37 area of the middle sagittal slice, full resolution.
//
// Census: 16 convolutions with 3x3 in-plane extent arranged as 4 down blocks
// (three at full res, one at half in-plane res past the single avg-pool) and
// 4 up blocks, plus the final 1x1x1 classifier. The bilinear upsample's two
// partial-support border samples are trimmed (the 1-voxel border crop), which
// re-aligns the upsampled grid voxel-exactly with the skip features. Nine of
// the sixteen convs carry through-plane extent 3, consuming 19 slices down to
// the middle one; the rest act in-plane only. The slice axis is never pooled.
// ---------------------------------------------------------------------------

struct UNet3DConfig {
    int in_channels = 3;
    int base_channels = 24; // doubling ladder: 24/48/96/192; ~2.9M parameters
    int classes = 2;
    bool prior_mask = false; // extra tile-shaped channel before the classifier
    std::uint64_t init_seed = 1;
};

BuiltModel build_unet3d(const UNet3DConfig& cfg);

// ---------------------------------------------------------------------------
// DeepMedic
//
// Two parallel 8-layer 3^3-conv pathways (normal: 13x35x35; context: 13x38x38
// at half in-plane resolution, pooled from a 13x77x77 field), outputs cropped
// to the 9x9 target, upsampling the context path back to full resolution.
// Three 1x1x1 layers classify the concatenated pathway features plus, when
// enabled, the tumor-prior probabilities for the target patch. 11 layers deep.
// ---------------------------------------------------------------------------

struct DeepMedicConfig {
    int in_channels = 3;
    int classes = 2;
    bool tpm_enabled = false;
    std::uint64_t init_seed = 1;
};

BuiltModel build_deepmedic(const DeepMedicConfig& cfg);

// ---------------------------------------------------------------------------
// Breast-mask net: a reduced U-Net (2 down / 2 up blocks) over the whole
// volume at x4 in-plane downsampling, emitting per-voxel breast probability.
// ---------------------------------------------------------------------------

struct BreastMaskNetConfig {
    int in_channels = 1;
    int base_channels = 8;
    std::uint64_t init_seed = 1;
};

struct BuiltBreastMaskNet {
    NetworkGraph graph;
    // Reflect padding applied around the downsampled frame before the graph
    // runs; the output voxel at index i corresponds to input voxel i.
    std::array<int, 3> pad_before{2, 10, 10};
    int in_channels = 1;
};

BuiltBreastMaskNet build_breast_mask_net(const BreastMaskNetConfig& cfg);

/// Runs the net over a x4-downsampled frame of any dims; returns the
/// breast-probability volume with exactly the input dims.
Volume predict_breast_mask(BuiltBreastMaskNet& net, const Volume& downsampled);

/// Two rounds of in-plane 3-tap stride-2 average pooling; slices unchanged.
Volume downsample_x4_inplane(const Volume& v);
SegmentationMask downsample_x4_inplane_mask(const SegmentationMask& m);

// ---------------------------------------------------------------------------
// Tissue probability map
// ---------------------------------------------------------------------------

struct TissueProbabilityMap {
    Volume probs; // values in [0, 1], canonical (center-of-mass aligned) frame
};

/// Voxelwise mean of binary masks; masks must share dims and already sit in
/// the canonical frame. Throws DataError on an empty list.
TissueProbabilityMap build_tpm(const std::vector<SegmentationMask>& masks);

/// Center of mass of a mask's positive voxels (slice, row, col).
std::array<double, 3> mask_center_of_mass(const SegmentationMask& m);

/// Translates a mask by an integer offset, zero-filling.
SegmentationMask shift_mask(const SegmentationMask& m, std::array<int, 3> delta);

// ---------------------------------------------------------------------------
// CRF post-processing: mean-field smoothing with a Gaussian and a bilateral
// pairwise term, binary labels.
// ---------------------------------------------------------------------------

struct CrfParams {
    double gaussian_width = 1.0;  // spatial variance of the Gaussian kernel
    double bilateral_width = 1.0; // variance of both bilateral components
    double gaussian_weight = 1.0;
    double bilateral_weight = 1.0;
    int iterations = 5;
};

/// Each iteration multiplies the unary probabilities by exp(weighted filtered
/// agreement messages) and renormalizes per voxel. Both filters are
/// neighborhood-normalized and exclude the center voxel. With both weights
/// zero the update is the identity.
Volume apply_crf(const Volume& prob, const Volume& reference_image, const CrfParams& p);

} // namespace voxelseg::models
