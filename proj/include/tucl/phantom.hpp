#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tucl/container.hpp"
#include "tucl/rng.hpp"
#include "tucl/volume.hpp"

namespace tucl {

/// Synthetic tumor phantom: nested anisotropic ellipsoids (ET inside TC
/// inside WT) over a constant background, with per-modality intensity
/// offsets and additive Gaussian noise.
struct PhantomSpec {
    Dims3 dims{24, 24, 24};
    std::array<double, 3> center{12.0, 12.0, 12.0};
    std::array<double, 3> radii{7.0, 5.0, 3.0}; // r_WT >= r_TC >= r_ET
    std::array<double, 3> anisotropy{1.0, 0.85, 1.1};
    double noise_sigma = 0.25;
    double base_intensity = 0.2;
    // rows: modality (T1, T2, T1ce, FLAIR); cols: region (WT, TC, ET).
    // WT signal is spread over T1/T2/FLAIR so no single channel is load
    // bearing for it; TC/ET signal lives almost entirely in T1ce.
    std::array<std::array<double, 3>, 4> contrast_profile{{
        {0.30, 0.00, 0.00},  // T1
        {0.50, 0.00, 0.00},  // T2
        {0.10, 0.80, 0.60},  // T1ce
        {0.70, 0.00, 0.00},  // FLAIR
    }};
    uint64_t seed = 1;

    void validate() const {
        if (dims.w < 8 || dims.h < 8 || dims.d < 8)
            throw param_error("phantom dims must be >= 8");
        if (!(radii[2] <= radii[1] && radii[1] <= radii[0]))
            throw param_error("phantom radii must satisfy r_ET <= r_TC <= r_WT");
        const double max_r = static_cast<double>(std::min({dims.w, dims.h, dims.d})) / 2.0;
        if (radii[0] > max_r)
            throw param_error("phantom r_WT exceeds half the smallest dimension");
        if (noise_sigma < 0.0) throw param_error("phantom noise_sigma must be >= 0");
        for (double a : anisotropy)
            if (a <= 0.0) throw param_error("phantom anisotropy factors must be > 0");
    }

    json to_json() const {
        json j;
        j["dims"] = {dims.w, dims.h, dims.d};
        j["center"] = center;
        j["radii"] = radii;
        j["anisotropy"] = anisotropy;
        j["noise_sigma"] = noise_sigma;
        j["base_intensity"] = base_intensity;
        j["contrast_profile"] = contrast_profile;
        j["seed"] = seed;
        return j;
    }

    static PhantomSpec from_json(const json& j) {
        PhantomSpec s;
        if (j.contains("dims"))
            s.dims = {j["dims"][0].get<int64_t>(), j["dims"][1].get<int64_t>(),
                      j["dims"][2].get<int64_t>()};
        if (j.contains("center")) s.center = j["center"].get<std::array<double, 3>>();
        if (j.contains("radii")) s.radii = j["radii"].get<std::array<double, 3>>();
        if (j.contains("anisotropy")) s.anisotropy = j["anisotropy"].get<std::array<double, 3>>();
        s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
        s.base_intensity = j.value("base_intensity", s.base_intensity);
        if (j.contains("contrast_profile"))
            s.contrast_profile = j["contrast_profile"].get<std::array<std::array<double, 3>, 4>>();
        s.seed = j.value("seed", s.seed);
        return s;
    }
};

inline bool inside_ellipsoid(int64_t x, int64_t y, int64_t z, const PhantomSpec& spec,
                             double radius) {
    if (radius <= 0.0) return false;
    const double dx = (static_cast<double>(x) - spec.center[0]) / (radius * spec.anisotropy[0]);
    const double dy = (static_cast<double>(y) - spec.center[1]) / (radius * spec.anisotropy[1]);
    const double dz = (static_cast<double>(z) - spec.center[2]) / (radius * spec.anisotropy[2]);
    return dx * dx + dy * dy + dz * dz <= 1.0;
}

inline std::pair<MultiContrastVolume, RegionMask> generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    const int64_t W = spec.dims.w, H = spec.dims.h, D = spec.dims.d;
    const int64_t n = spec.dims.voxels();

    std::vector<double> mask(static_cast<size_t>(3 * n), 0.0);
    for (int64_t x = 0; x < W; ++x)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t z = 0; z < D; ++z) {
                const int64_t i = (x * H + y) * D + z;
                for (int r = 0; r < 3; ++r)
                    if (inside_ellipsoid(x, y, z, spec, spec.radii[static_cast<size_t>(r)]))
                        mask[r * n + i] = 1.0;
            }

    std::vector<double> vol(static_cast<size_t>(4 * n));
    RngStream noise = RngStream::derive(spec.seed, "phantom/noise");
    for (int m = 0; m < 4; ++m)
        for (int64_t i = 0; i < n; ++i) {
            double v = spec.base_intensity;
            for (int r = 0; r < 3; ++r)
                if (mask[r * n + i] > 0.0)
                    v += spec.contrast_profile[static_cast<size_t>(m)][static_cast<size_t>(r)];
            if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise.next_normal();
            vol[m * n + i] = v;
        }

    MultiContrastVolume volume;
    volume.intensities = Tensor::from_data({4, W, H, D}, std::move(vol));
    RegionMask rm;
    rm.values = Tensor::from_data({3, W, H, D}, std::move(mask));
    rm.binarized = true;
    rm.validate();
    return {std::move(volume), std::move(rm)};
}

// ---------------------------------------------------------------------------
// datasets

struct DatasetItem {
    MultiContrastVolume volume;
    std::optional<RegionMask> mask;
    bool labeled = false;
};

using Dataset = std::vector<DatasetItem>;

/// Per-item jittered phantoms with a deterministic labeled/unlabeled split.
/// Masks are generated for every item but retained only for the labeled ones.
inline Dataset make_dataset(int n, const PhantomSpec& base, double labeled_fraction,
                            uint64_t seed) {
    if (n < 1) throw param_error("make_dataset: n must be >= 1");
    if (labeled_fraction <= 0.0 || labeled_fraction > 1.0)
        throw param_error("make_dataset: labeled_fraction must be in (0,1]");

    const int n_labeled = static_cast<int>(
        std::ceil(labeled_fraction * static_cast<double>(n) - 1e-12));

    // Seeded permutation; the first ceil(f*n) positions are the labeled ones.
    std::vector<int> perm(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
    RngStream split = RngStream::derive(seed, "dataset/split");
    for (int i = n - 1; i > 0; --i)
        std::swap(perm[static_cast<size_t>(i)],
                  perm[static_cast<size_t>(split.next_below(static_cast<uint64_t>(i + 1)))]);
    std::vector<bool> labeled(static_cast<size_t>(n), false);
    for (int i = 0; i < n_labeled; ++i) labeled[static_cast<size_t>(perm[static_cast<size_t>(i)])] = true;

    Dataset out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        RngStream jitter = RngStream::derive(seed, "dataset/jitter", static_cast<uint64_t>(i));
        PhantomSpec s = base;
        s.seed = RngStream::derive(seed, "dataset/item", static_cast<uint64_t>(i)).next_u64();
        for (int a = 0; a < 3; ++a)
            s.center[static_cast<size_t>(a)] += 4.0 * (jitter.next_double() - 0.5);
        const double rscale = 0.8 + 0.4 * jitter.next_double();
        const double max_r = static_cast<double>(std::min({s.dims.w, s.dims.h, s.dims.d})) / 2.0;
        for (int r = 0; r < 3; ++r)
            s.radii[static_cast<size_t>(r)] =
                std::min(s.radii[static_cast<size_t>(r)] * rscale, max_r);
        for (int a = 0; a < 3; ++a)
            s.anisotropy[static_cast<size_t>(a)] *= 0.9 + 0.2 * jitter.next_double();

        auto [vol, mask] = generate_phantom(s);
        DatasetItem item;
        item.volume = std::move(vol);
        item.labeled = labeled[static_cast<size_t>(i)];
        if (item.labeled) item.mask = std::move(mask);
        out.push_back(std::move(item));
    }
    return out;
}

/// Write a generated dataset as volume/mask container pairs plus a
/// dataset.json manifest.
inline void write_dataset(const Dataset& ds, const PhantomSpec& base, double labeled_fraction,
                          uint64_t seed, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    json manifest;
    manifest["n"] = ds.size();
    manifest["seed"] = seed;
    manifest["labeled_fraction"] = labeled_fraction;
    manifest["spec"] = base.to_json();
    manifest["items"] = json::array();
    for (size_t i = 0; i < ds.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "case_%04zu", i);
        const std::string id(buf);
        write_volume(ds[i].volume, dir / (id + "_vol"));
        json item;
        item["id"] = id;
        item["volume"] = id + "_vol";
        item["labeled"] = ds[i].labeled;
        if (ds[i].mask) {
            write_volume(*ds[i].mask, dir / (id + "_mask"));
            item["mask"] = id + "_mask";
        } else {
            item["mask"] = nullptr;
        }
        manifest["items"].push_back(std::move(item));
    }
    atomic_write(dir / "dataset.json", manifest.dump(2) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream in(dir / "dataset.json");
    if (!in) throw io_error("missing dataset manifest: " + (dir / "dataset.json").string());
    json manifest;
    try {
        in >> manifest;
    } catch (const std::exception& e) {
        throw io_error("corrupt dataset manifest: " + std::string(e.what()));
    }
    Dataset out;
    for (const auto& item : manifest["items"]) {
        DatasetItem di;
        di.volume = read_multicontrast_volume(dir / item["volume"].get<std::string>());
        di.labeled = item.value("labeled", false);
        if (!item["mask"].is_null())
            di.mask = read_region_mask(dir / item["mask"].get<std::string>());
        out.push_back(std::move(di));
    }
    return out;
}

} // namespace tucl
