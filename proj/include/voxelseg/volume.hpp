#pragma once
#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "voxelseg/errors.hpp"

namespace voxelseg {

/// Voxel index convention used everywhere: (slice, row, col), where the slice
/// axis is the sagittal through-plane axis. Raw files are slice-major, then
/// row, then column.
struct Dims {
    int slices = 0;
    int rows = 0;
    int cols = 0;

    std::int64_t count() const {
        return std::int64_t(slices) * rows * cols;
    }
    bool operator==(const Dims&) const = default;
};

struct Spacing {
    double slice_mm = 1.0;
    double row_mm = 1.0;
    double col_mm = 1.0;
    bool operator==(const Spacing&) const = default;
};

/// A 3D scalar field with voxel spacing. 32-bit float semantics on disk and
/// in memory; all values finite.
class Volume {
public:
    Volume() = default;
    Volume(Dims dims, Spacing spacing, float fill = 0.0f)
        : dims_(dims), spacing_(spacing),
          data_(static_cast<std::size_t>(dims.count()), fill) {}
    Volume(Dims dims, Spacing spacing, std::vector<float> data);

    const Dims& dims() const { return dims_; }
    const Spacing& spacing() const { return spacing_; }
    Spacing& spacing() { return spacing_; }

    float& at(int s, int r, int c) {
        return data_[(static_cast<std::size_t>(s) * dims_.rows + r) * dims_.cols + c];
    }
    float at(int s, int r, int c) const {
        return data_[(static_cast<std::size_t>(s) * dims_.rows + r) * dims_.cols + c];
    }

    std::vector<float>& data() { return data_; }
    const std::vector<float>& data() const { return data_; }

    /// Throws DataError if any voxel is NaN or infinite.
    void require_finite(const std::string& what) const;

    bool operator==(const Volume&) const = default;

private:
    Dims dims_{};
    Spacing spacing_{};
    std::vector<float> data_;
};

enum class MaskSource : std::uint8_t {
    ground_truth,
    model,
    consensus,
    radiologist,
};

std::string mask_source_name(MaskSource s);
MaskSource mask_source_from_name(const std::string& name);

/// Binary voxel labeling, possibly restricted to a single 2D slice.
class SegmentationMask {
public:
    SegmentationMask() = default;
    SegmentationMask(Dims dims, MaskSource source, std::optional<int> slice_index = {})
        : dims_(dims), source_(source), slice_index_(slice_index),
          values_(static_cast<std::size_t>(dims.count()), 0) {}

    const Dims& dims() const { return dims_; }
    MaskSource source() const { return source_; }
    void set_source(MaskSource s) { source_ = s; }
    const std::string& rater_id() const { return rater_id_; }
    void set_rater_id(std::string id) { rater_id_ = std::move(id); }
    std::optional<int> slice_index() const { return slice_index_; }
    void set_slice_index(std::optional<int> s) { slice_index_ = s; }

    std::uint8_t& at(int s, int r, int c) {
        return values_[(static_cast<std::size_t>(s) * dims_.rows + r) * dims_.cols + c];
    }
    std::uint8_t at(int s, int r, int c) const {
        return values_[(static_cast<std::size_t>(s) * dims_.rows + r) * dims_.cols + c];
    }

    std::vector<std::uint8_t>& values() { return values_; }
    const std::vector<std::uint8_t>& values() const { return values_; }

    std::int64_t positive_count() const;

    /// Checks binarity and, when slice_index is set, that all positive voxels
    /// lie in that slice. Throws DataError otherwise.
    void validate() const;

    bool operator==(const SegmentationMask&) const = default;

private:
    Dims dims_{};
    MaskSource source_ = MaskSource::ground_truth;
    std::string rater_id_;
    std::optional<int> slice_index_;
    std::vector<std::uint8_t> values_;
};

enum class Laterality : std::uint8_t { left, right };

/// One breast exam: pre-contrast T1, ordered post-contrast series with
/// acquisition times in minutes, optional T2.
struct ExamBundle {
    Volume t1;
    std::vector<std::pair<Volume, double>> t1c_series;
    std::optional<Volume> t2;
    std::string scanner_id;
    Laterality laterality = Laterality::left;
    std::string exam_id;

    const Dims& dims() const { return t1.dims(); }

    /// Checks all ExamBundle invariants; throws DataError on violation.
    void validate() const;

    bool operator==(const ExamBundle&) const = default;
};

// ---------------------------------------------------------------------------
// Exam bundle directory format
//
// <dir>/meta.json  with keys: dims, spacing_mm, volumes (name -> file),
//                  times_min, scanner_id, laterality, exam_id
// one raw IEEE-754 binary32 little-endian file per volume, slice-major.
// Masks use the same mechanism: <stem>.json + <stem>.u8 ({0,1} bytes).
// ---------------------------------------------------------------------------

ExamBundle read_exam(const std::filesystem::path& dir);
void write_exam(const ExamBundle& bundle, const std::filesystem::path& dir);

SegmentationMask read_mask(const std::filesystem::path& stem);
void write_mask(const SegmentationMask& mask, const std::filesystem::path& stem);

Volume read_volume_raw(const std::filesystem::path& file, Dims dims, Spacing spacing);
void write_volume_raw(const Volume& v, const std::filesystem::path& file);

/// Probability/float volumes written standalone (prediction maps).
void write_volume_with_meta(const Volume& v, const std::filesystem::path& stem);
Volume read_volume_with_meta(const std::filesystem::path& stem);

// ---------------------------------------------------------------------------
// Cropping
// ---------------------------------------------------------------------------

/// Plain crop; origin and size must be fully inside the volume.
Volume crop(const Volume& v, std::array<int, 3> origin, Dims size);

/// Crop with reflect padding: out-of-range indices are mirrored about the
/// volume border (index -1 -> 1, L -> L-2). Supports any origin.
Volume crop_reflect(const Volume& v, std::array<int, 3> origin, Dims size);

/// Mirror an index into [0, n). n == 1 maps everything to 0.
int reflect_index(int i, int n);

} // namespace voxelseg
