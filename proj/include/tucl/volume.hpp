#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tucl/container.hpp"
#include "tucl/errors.hpp"
#include "tucl/tensor.hpp"

namespace tucl {

inline constexpr std::array<const char*, 4> kModalityNames = {"T1", "T2", "T1ce", "FLAIR"};
inline constexpr std::array<const char*, 3> kRegionNames = {"WT", "TC", "ET"};

inline int modality_index(const std::string& name) {
    for (int i = 0; i < 4; ++i)
        if (name == kModalityNames[static_cast<size_t>(i)]) return i;
    throw param_error("unknown modality '" + name + "' (expected T1, T2, T1ce, FLAIR)");
}

struct Dims3 {
    int64_t w = 0, h = 0, d = 0;
    int64_t voxels() const { return w * h * d; }
    bool operator==(const Dims3&) const = default;
};

/// 4-channel intensity volume (T1, T2, T1ce, FLAIR). Channels whose present
/// flag is false are all-zero by construction.
struct MultiContrastVolume {
    Tensor intensities; // 4 x W x H x D
    std::array<bool, 4> present{true, true, true, true};

    Dims3 dims() const {
        return {intensities.dim(1), intensities.dim(2), intensities.dim(3)};
    }

    void validate() const {
        if (intensities.ndim() != 4 || intensities.dim(0) != 4)
            throw shape_error("volume must be 4xWxHxD, got " + shape_str(intensities.shape()));
        const Dims3 dm = dims();
        if (dm.w < 8 || dm.h < 8 || dm.d < 8)
            throw shape_error("volume dims must be >= 8, got " + shape_str(intensities.shape()));
        const int64_t n = dm.voxels();
        for (int c = 0; c < 4; ++c) {
            if (present[static_cast<size_t>(c)]) continue;
            for (int64_t i = 0; i < n; ++i)
                if (intensities.data()[c * n + i] != 0.0)
                    throw contract_error(std::string("absent modality ") +
                                         kModalityNames[static_cast<size_t>(c)] +
                                         " contains nonzero data");
        }
    }
};

/// 3-channel region map (WT, TC, ET), probabilistic in [0,1] or binarized.
/// Binarized masks satisfy the nesting ET <= TC <= WT voxelwise.
struct RegionMask {
    Tensor values; // 3 x W x H x D
    bool binarized = false;

    Dims3 dims() const { return {values.dim(1), values.dim(2), values.dim(3)}; }

    void validate() const {
        if (values.ndim() != 4 || values.dim(0) != 3)
            throw shape_error("mask must be 3xWxHxD, got " + shape_str(values.shape()));
        const int64_t n = dims().voxels();
        const auto& v = values.data();
        for (double x : v)
            if (x < 0.0 || x > 1.0)
                throw contract_error("mask values must lie in [0,1]");
        if (binarized) {
            for (double x : v)
                if (x != 0.0 && x != 1.0)
                    throw contract_error("binarized mask contains non-binary value");
            for (int64_t i = 0; i < n; ++i) {
                const double wt = v[0 * n + i], tc = v[1 * n + i], et = v[2 * n + i];
                if (et > tc || tc > wt)
                    throw contract_error("binarized mask violates region hierarchy ET<=TC<=WT");
            }
        }
    }
};

// ---------------------------------------------------------------------------
// container I/O

inline void write_volume(const MultiContrastVolume& v, const std::filesystem::path& base) {
    v.validate();
    const Dims3 dm = v.dims();
    json header;
    header["kind"] = "volume";
    header["dims"] = {dm.w, dm.h, dm.d};
    header["channels"] = kModalityNames;
    header["present"] = v.present;
    write_container(base, std::move(header), v.intensities.data());
}

inline void write_volume(const RegionMask& m, const std::filesystem::path& base) {
    m.validate();
    const Dims3 dm = m.dims();
    json header;
    header["kind"] = "mask";
    header["dims"] = {dm.w, dm.h, dm.d};
    header["channels"] = kRegionNames;
    header["binarized"] = m.binarized;
    write_container(base, std::move(header), m.values.data());
}

/// Write an arbitrary named-channel field (e.g. a 1-channel uncertainty map).
inline void write_field(const Tensor& field, const std::vector<std::string>& channels,
                        const std::filesystem::path& base) {
    if (field.ndim() != 4 || field.dim(0) != static_cast<int64_t>(channels.size()))
        throw shape_error("field/channel mismatch: " + shape_str(field.shape()));
    json header;
    header["kind"] = "volume";
    header["dims"] = {field.dim(1), field.dim(2), field.dim(3)};
    header["channels"] = channels;
    header["present"] = std::vector<bool>(channels.size(), true);
    write_container(base, std::move(header), field.data());
}

inline Dims3 header_dims(const json& header, const std::filesystem::path& base) {
    if (!header.contains("dims") || header["dims"].size() != 3)
        throw io_error("corrupt file " + base.string() + ": bad dims field");
    return {header["dims"][0].get<int64_t>(), header["dims"][1].get<int64_t>(),
            header["dims"][2].get<int64_t>()};
}

inline MultiContrastVolume read_multicontrast_volume(const std::filesystem::path& base) {
    auto [header, payload] = read_container(base);
    if (header.value("kind", "") != "volume")
        throw io_error("expected kind 'volume' in " + base.string());
    const Dims3 dm = header_dims(header, base);
    if (static_cast<int64_t>(payload.size()) != 4 * dm.voxels())
        throw io_error("corrupt file " + base.string() + ": payload length does not match dims");
    MultiContrastVolume v;
    v.intensities = Tensor::from_data({4, dm.w, dm.h, dm.d}, std::move(payload));
    const auto present = header.value("present", std::vector<bool>(4, true));
    if (present.size() != 4) throw io_error("corrupt file " + base.string() + ": bad present flags");
    for (int i = 0; i < 4; ++i) v.present[static_cast<size_t>(i)] = present[static_cast<size_t>(i)];
    v.validate();
    return v;
}

inline RegionMask read_region_mask(const std::filesystem::path& base) {
    auto [header, payload] = read_container(base);
    if (header.value("kind", "") != "mask")
        throw io_error("expected kind 'mask' in " + base.string());
    const Dims3 dm = header_dims(header, base);
    if (static_cast<int64_t>(payload.size()) != 3 * dm.voxels())
        throw io_error("corrupt file " + base.string() + ": payload length does not match dims");
    RegionMask m;
    m.values = Tensor::from_data({3, dm.w, dm.h, dm.d}, std::move(payload));
    m.binarized = header.value("binarized", false);
    m.validate();
    return m;
}

/// Generic single-channel field reader (uncertainty maps).
inline Tensor read_field(const std::filesystem::path& base) {
    auto [header, payload] = read_container(base);
    const Dims3 dm = header_dims(header, base);
    const auto channels = header.value("channels", std::vector<std::string>{});
    if (channels.empty() ||
        static_cast<int64_t>(payload.size()) != static_cast<int64_t>(channels.size()) * dm.voxels())
        throw io_error("corrupt file " + base.string() + ": payload length does not match dims");
    return Tensor::from_data({static_cast<int64_t>(channels.size()), dm.w, dm.h, dm.d},
                             std::move(payload));
}

// ---------------------------------------------------------------------------
// modality ablation

/// Copy with the named channel zeroed and flagged absent. Idempotent.
inline MultiContrastVolume drop_modality(const MultiContrastVolume& v, const std::string& name) {
    const int idx = modality_index(name);
    MultiContrastVolume out;
    out.intensities = Tensor::from_data(v.intensities.shape(), v.intensities.data());
    out.present = v.present;
    const int64_t n = v.dims().voxels();
    auto& data = out.intensities.mutable_data();
    std::fill(data.begin() + idx * n, data.begin() + (idx + 1) * n, 0.0);
    out.present[static_cast<size_t>(idx)] = false;
    return out;
}

} // namespace tucl
