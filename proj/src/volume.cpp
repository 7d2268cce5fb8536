#include "voxelseg/volume.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "raw volume format is little-endian; big-endian hosts unsupported");

namespace voxelseg {

using nlohmann::json;
namespace fs = std::filesystem;

Volume::Volume(Dims dims, Spacing spacing, std::vector<float> data)
    : dims_(dims), spacing_(spacing), data_(std::move(data)) {
    if (std::int64_t(data_.size()) != dims_.count())
        throw DataError("volume data length does not match dims");
}

void Volume::require_finite(const std::string& what) const {
    for (float v : data_)
        if (!std::isfinite(v))
            throw DataError("non-finite voxel value in " + what);
}

std::string mask_source_name(MaskSource s) {
    switch (s) {
        case MaskSource::ground_truth: return "ground_truth";
        case MaskSource::model: return "model";
        case MaskSource::consensus: return "consensus";
        case MaskSource::radiologist: return "radiologist";
    }
    return "ground_truth";
}

MaskSource mask_source_from_name(const std::string& name) {
    if (name == "ground_truth") return MaskSource::ground_truth;
    if (name == "model") return MaskSource::model;
    if (name == "consensus") return MaskSource::consensus;
    if (name == "radiologist") return MaskSource::radiologist;
    throw DataError("unknown mask source: " + name);
}

std::int64_t SegmentationMask::positive_count() const {
    std::int64_t n = 0;
    for (auto v : values_) n += (v != 0);
    return n;
}

void SegmentationMask::validate() const {
    if (std::int64_t(values_.size()) != dims_.count())
        throw DataError("mask value count does not match dims");
    for (auto v : values_)
        if (v > 1)
            throw DataError("mask contains non-binary value");
    if (slice_index_) {
        const int s = *slice_index_;
        if (s < 0 || s >= dims_.slices)
            throw DataError("mask slice_index out of range");
        for (int sl = 0; sl < dims_.slices; ++sl) {
            if (sl == s) continue;
            for (int r = 0; r < dims_.rows; ++r)
                for (int c = 0; c < dims_.cols; ++c)
                    if (at(sl, r, c))
                        throw DataError("2D mask has positive voxels outside its slice");
        }
    }
}

void ExamBundle::validate() const {
    if (t1.dims().count() <= 0)
        throw DataError("exam has empty T1 volume");
    if (t1.dims().slices <= 0 || t1.dims().rows <= 0 || t1.dims().cols <= 0)
        throw DataError("exam T1 has non-positive dims");
    if (t1.spacing().slice_mm <= 0 || t1.spacing().row_mm <= 0 || t1.spacing().col_mm <= 0)
        throw DataError("exam has non-positive spacing");
    if (t1c_series.empty())
        throw DataError("exam needs at least one post-contrast volume");
    t1.require_finite("t1");
    double prev = -1e300;
    for (std::size_t i = 0; i < t1c_series.size(); ++i) {
        const auto& [vol, t] = t1c_series[i];
        if (vol.dims() != t1.dims())
            throw DataError("post-contrast volume dims differ from T1");
        if (!(t > prev))
            throw DataError("acquisition times must be strictly increasing");
        prev = t;
        vol.require_finite("t1c[" + std::to_string(i) + "]");
    }
    if (t2) {
        if (t2->dims() != t1.dims())
            throw DataError("T2 dims differ from T1");
        t2->require_finite("t2");
    }
}

// ---------------------------------------------------------------------------
// Raw IO
// ---------------------------------------------------------------------------

Volume read_volume_raw(const fs::path& file, Dims dims, Spacing spacing) {
    std::ifstream in(file, std::ios::binary);
    if (!in)
        throw DataError("missing volume file: " + file.string());
    in.seekg(0, std::ios::end);
    const std::int64_t bytes = in.tellg();
    in.seekg(0);
    if (bytes != dims.count() * 4)
        throw DataError("volume file size mismatch vs declared dims: " + file.string() +
                        " has " + std::to_string(bytes / 4) + " floats, expected " +
                        std::to_string(dims.count()));
    std::vector<float> data(static_cast<std::size_t>(dims.count()));
    in.read(reinterpret_cast<char*>(data.data()), bytes);
    if (!in)
        throw DataError("short read on volume file: " + file.string());
    Volume v(dims, spacing, std::move(data));
    v.require_finite(file.filename().string());
    return v;
}

void write_volume_raw(const Volume& v, const fs::path& file) {
    v.require_finite(file.filename().string());
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out)
        throw DataError("cannot open for writing: " + file.string());
    out.write(reinterpret_cast<const char*>(v.data().data()),
              std::streamsize(v.data().size() * 4));
    if (!out)
        throw DataError("short write on volume file: " + file.string());
}

// ---------------------------------------------------------------------------
// Exam bundle directory
// ---------------------------------------------------------------------------

static json spacing_to_json(const Spacing& s) {
    return json::array({s.slice_mm, s.row_mm, s.col_mm});
}

static Spacing spacing_from_json(const json& j) {
    if (!j.is_array() || j.size() != 3)
        throw DataError("meta spacing_mm must be a 3-array");
    Spacing s{j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
    if (s.slice_mm <= 0 || s.row_mm <= 0 || s.col_mm <= 0)
        throw DataError("spacing components must be positive");
    return s;
}

void write_exam(const ExamBundle& bundle, const fs::path& dir) {
    bundle.validate();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec)
        throw DataError("cannot create bundle directory: " + dir.string());

    json meta;
    meta["dims"] = {bundle.dims().slices, bundle.dims().rows, bundle.dims().cols};
    meta["spacing_mm"] = spacing_to_json(bundle.t1.spacing());
    meta["scanner_id"] = bundle.scanner_id;
    meta["laterality"] = bundle.laterality == Laterality::left ? "left" : "right";
    meta["exam_id"] = bundle.exam_id;

    json volumes;
    volumes["t1"] = "t1.f32";
    write_volume_raw(bundle.t1, dir / "t1.f32");
    json times = json::array();
    for (std::size_t i = 0; i < bundle.t1c_series.size(); ++i) {
        const std::string name = "t1c_" + std::to_string(i) + ".f32";
        volumes["t1c_" + std::to_string(i)] = name;
        write_volume_raw(bundle.t1c_series[i].first, dir / name);
        times.push_back(bundle.t1c_series[i].second);
    }
    if (bundle.t2) {
        volumes["t2"] = "t2.f32";
        write_volume_raw(*bundle.t2, dir / "t2.f32");
    } else {
        volumes["t2"] = nullptr;
    }
    meta["volumes"] = volumes;
    meta["times_min"] = times;

    std::ofstream out(dir / "meta.json", std::ios::trunc);
    if (!out)
        throw DataError("cannot write meta.json in " + dir.string());
    out << meta.dump(2) << "\n";
    if (!out)
        throw DataError("short write on meta.json in " + dir.string());
}

ExamBundle read_exam(const fs::path& dir) {
    std::ifstream in(dir / "meta.json");
    if (!in)
        throw DataError("missing meta.json in " + dir.string());
    json meta;
    try {
        in >> meta;
    } catch (const json::exception& e) {
        throw DataError("malformed meta.json in " + dir.string() + ": " + e.what());
    }

    Dims dims;
    try {
        dims = Dims{meta.at("dims").at(0).get<int>(), meta.at("dims").at(1).get<int>(),
                    meta.at("dims").at(2).get<int>()};
        if (dims.slices <= 0 || dims.rows <= 0 || dims.cols <= 0)
            throw DataError("non-positive dims in meta.json");

        const Spacing spacing = spacing_from_json(meta.at("spacing_mm"));
        const auto& volumes = meta.at("volumes");

        ExamBundle bundle;
        bundle.scanner_id = meta.at("scanner_id").get<std::string>();
        bundle.exam_id = meta.at("exam_id").get<std::string>();
        const std::string lat = meta.at("laterality").get<std::string>();
        if (lat == "left")
            bundle.laterality = Laterality::left;
        else if (lat == "right")
            bundle.laterality = Laterality::right;
        else
            throw DataError("laterality must be left or right");

        bundle.t1 = read_volume_raw(dir / volumes.at("t1").get<std::string>(), dims, spacing);

        const auto& times = meta.at("times_min");
        for (std::size_t i = 0; i < times.size(); ++i) {
            const std::string key = "t1c_" + std::to_string(i);
            Volume v = read_volume_raw(dir / volumes.at(key).get<std::string>(), dims, spacing);
            bundle.t1c_series.emplace_back(std::move(v), times[i].get<double>());
        }
        if (volumes.contains("t2") && !volumes.at("t2").is_null())
            bundle.t2 = read_volume_raw(dir / volumes.at("t2").get<std::string>(), dims, spacing);

        bundle.validate();
        return bundle;
    } catch (const json::exception& e) {
        throw DataError("meta.json in " + dir.string() + " missing or bad key: " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

void write_mask(const SegmentationMask& mask, const fs::path& stem) {
    mask.validate();
    json meta;
    meta["dims"] = {mask.dims().slices, mask.dims().rows, mask.dims().cols};
    meta["source"] = mask_source_name(mask.source());
    if (!mask.rater_id().empty())
        meta["rater_id"] = mask.rater_id();
    if (mask.slice_index())
        meta["slice_index"] = *mask.slice_index();
    else
        meta["slice_index"] = nullptr;

    fs::path meta_path = stem;
    meta_path += ".json";
    std::ofstream out(meta_path, std::ios::trunc);
    if (!out)
        throw DataError("cannot write mask meta: " + meta_path.string());
    out << meta.dump(2) << "\n";

    fs::path raw_path = stem;
    raw_path += ".u8";
    std::ofstream raw(raw_path, std::ios::binary | std::ios::trunc);
    if (!raw)
        throw DataError("cannot write mask data: " + raw_path.string());
    raw.write(reinterpret_cast<const char*>(mask.values().data()),
              std::streamsize(mask.values().size()));
    if (!raw)
        throw DataError("short write on mask: " + raw_path.string());
}

SegmentationMask read_mask(const fs::path& stem) {
    fs::path meta_path = stem;
    meta_path += ".json";
    std::ifstream in(meta_path);
    if (!in)
        throw DataError("missing mask meta: " + meta_path.string());
    json meta;
    try {
        in >> meta;
        Dims dims{meta.at("dims").at(0).get<int>(), meta.at("dims").at(1).get<int>(),
                  meta.at("dims").at(2).get<int>()};
        std::optional<int> slice;
        if (meta.contains("slice_index") && !meta.at("slice_index").is_null())
            slice = meta.at("slice_index").get<int>();
        SegmentationMask mask(dims, mask_source_from_name(meta.at("source").get<std::string>()),
                              slice);
        if (meta.contains("rater_id"))
            mask.set_rater_id(meta.at("rater_id").get<std::string>());

        fs::path raw_path = stem;
        raw_path += ".u8";
        std::ifstream raw(raw_path, std::ios::binary);
        if (!raw)
            throw DataError("missing mask data: " + raw_path.string());
        raw.seekg(0, std::ios::end);
        if (raw.tellg() != std::streamoff(dims.count()))
            throw DataError("mask file size mismatch vs meta dims: " + raw_path.string());
        raw.seekg(0);
        raw.read(reinterpret_cast<char*>(mask.values().data()), dims.count());
        if (!raw)
            throw DataError("short read on mask: " + raw_path.string());
        mask.validate();
        return mask;
    } catch (const json::exception& e) {
        throw DataError("bad mask meta " + meta_path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Standalone float volumes (probability maps)
// ---------------------------------------------------------------------------

void write_volume_with_meta(const Volume& v, const fs::path& stem) {
    json meta;
    meta["dims"] = {v.dims().slices, v.dims().rows, v.dims().cols};
    meta["spacing_mm"] = spacing_to_json(v.spacing());
    fs::path meta_path = stem;
    meta_path += ".json";
    std::ofstream out(meta_path, std::ios::trunc);
    if (!out)
        throw DataError("cannot write volume meta: " + meta_path.string());
    out << meta.dump(2) << "\n";
    fs::path raw_path = stem;
    raw_path += ".f32";
    write_volume_raw(v, raw_path);
}

Volume read_volume_with_meta(const fs::path& stem) {
    fs::path meta_path = stem;
    meta_path += ".json";
    std::ifstream in(meta_path);
    if (!in)
        throw DataError("missing volume meta: " + meta_path.string());
    json meta;
    try {
        in >> meta;
        Dims dims{meta.at("dims").at(0).get<int>(), meta.at("dims").at(1).get<int>(),
                  meta.at("dims").at(2).get<int>()};
        const Spacing spacing = spacing_from_json(meta.at("spacing_mm"));
        fs::path raw_path = stem;
        raw_path += ".f32";
        return read_volume_raw(raw_path, dims, spacing);
    } catch (const json::exception& e) {
        throw DataError("bad volume meta " + meta_path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Cropping
// ---------------------------------------------------------------------------

int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

Volume crop(const Volume& v, std::array<int, 3> origin, Dims size) {
    const auto& d = v.dims();
    if (origin[0] < 0 || origin[1] < 0 || origin[2] < 0 || size.slices <= 0 ||
        size.rows <= 0 || size.cols <= 0 || origin[0] + size.slices > d.slices ||
        origin[1] + size.rows > d.rows || origin[2] + size.cols > d.cols)
        throw DataError("crop region out of bounds");
    Volume out(size, v.spacing());
    for (int s = 0; s < size.slices; ++s)
        for (int r = 0; r < size.rows; ++r) {
            const float* src = &v.data()[(std::size_t(origin[0] + s) * d.rows +
                                          (origin[1] + r)) * d.cols + origin[2]];
            float* dst = &out.data()[(std::size_t(s) * size.rows + r) * size.cols];
            std::memcpy(dst, src, std::size_t(size.cols) * 4);
        }
    return out;
}

Volume crop_reflect(const Volume& v, std::array<int, 3> origin, Dims size) {
    const auto& d = v.dims();
    if (size.slices <= 0 || size.rows <= 0 || size.cols <= 0)
        throw DataError("crop size must be positive");
    // Fast path when fully in bounds.
    if (origin[0] >= 0 && origin[1] >= 0 && origin[2] >= 0 &&
        origin[0] + size.slices <= d.slices && origin[1] + size.rows <= d.rows &&
        origin[2] + size.cols <= d.cols)
        return crop(v, origin, size);
    Volume out(size, v.spacing());
    for (int s = 0; s < size.slices; ++s) {
        const int ss = reflect_index(origin[0] + s, d.slices);
        for (int r = 0; r < size.rows; ++r) {
            const int rr = reflect_index(origin[1] + r, d.rows);
            for (int c = 0; c < size.cols; ++c)
                out.at(s, r, c) = v.at(ss, rr, reflect_index(origin[2] + c, d.cols));
        }
    }
    return out;
}

} // namespace voxelseg
