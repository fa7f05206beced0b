#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "tucl/volume.hpp"

using namespace tucl;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    static fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "tucl_volume_io_test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

MultiContrastVolume random_volume(uint64_t seed, Dims3 dm = {8, 8, 8}) {
    RngStream rng = RngStream::derive(seed, "test/vol");
    std::vector<double> d(static_cast<size_t>(4 * dm.voxels()));
    for (double& v : d) v = rng.next_normal();
    MultiContrastVolume out;
    out.intensities = Tensor::from_data({4, dm.w, dm.h, dm.d}, std::move(d));
    return out;
}

RegionMask nested_mask(Dims3 dm = {8, 8, 8}) {
    const int64_t n = dm.voxels();
    std::vector<double> d(static_cast<size_t>(3 * n), 0.0);
    for (int64_t i = 0; i < n / 2; ++i) d[0 * n + i] = 1.0;
    for (int64_t i = 0; i < n / 4; ++i) d[1 * n + i] = 1.0;
    for (int64_t i = 0; i < n / 8; ++i) d[2 * n + i] = 1.0;
    RegionMask m;
    m.values = Tensor::from_data({3, dm.w, dm.h, dm.d}, std::move(d));
    m.binarized = true;
    return m;
}

void corrupt_byte(const fs::path& p, size_t offset) {
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(static_cast<std::streamoff>(offset));
    char c = 0;
    f.get(c);
    f.seekp(static_cast<std::streamoff>(offset));
    f.put(static_cast<char>(c ^ 0x5A));
}

} // namespace

TEST_CASE("volume write/read roundtrip is bit-identical") {
    MultiContrastVolume v = random_volume(1);
    v.present[2] = false;
    const int64_t n = v.dims().voxels();
    auto& d = v.intensities.mutable_data();
    std::fill(d.begin() + 2 * n, d.begin() + 3 * n, 0.0);

    const fs::path base = temp_dir() / "vol_rt";
    write_volume(v, base);
    MultiContrastVolume r = read_multicontrast_volume(base);
    REQUIRE(r.intensities.data() == v.intensities.data());
    REQUIRE(r.present == v.present);
}

TEST_CASE("mask roundtrip preserves binarized flag") {
    RegionMask m = nested_mask();
    const fs::path base = temp_dir() / "mask_rt";
    write_volume(m, base);
    RegionMask r = read_region_mask(base);
    REQUIRE(r.values.data() == m.values.data());
    REQUIRE(r.binarized);
}

TEST_CASE("checksum corruption is rejected") {
    MultiContrastVolume v = random_volume(2);
    const fs::path base = temp_dir() / "vol_bad_crc";
    write_volume(v, base);
    corrupt_byte(fs::path(base) += ".raw", 10);
    REQUIRE_THROWS_MATCHES(read_multicontrast_volume(base), io_error,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("checksum")));
}

TEST_CASE("header/payload length mismatch is rejected") {
    MultiContrastVolume v = random_volume(3);
    const fs::path base = temp_dir() / "vol_bad_len";
    write_volume(v, base);
    // Truncate the payload; length check fires before shape validation.
    std::vector<double> payload = v.intensities.data();
    payload.pop_back();
    json header;
    {
        std::ifstream in(fs::path(base) += ".json");
        in >> header;
    }
    header.erase("checksum");
    write_container(base, header, payload);
    REQUIRE_THROWS_AS(read_multicontrast_volume(base), io_error);
}

TEST_CASE("nonzero data in an absent channel is rejected") {
    MultiContrastVolume v = random_volume(4);
    const fs::path base = temp_dir() / "vol_absent";
    write_volume(v, base);
    json header;
    {
        std::ifstream in(fs::path(base) += ".json");
        in >> header;
    }
    header["present"] = std::vector<bool>{true, false, true, true};
    header.erase("checksum");
    write_container(base, header, v.intensities.data());
    REQUIRE_THROWS_AS(read_multicontrast_volume(base), contract_error);
}

TEST_CASE("hierarchy-violating binarized mask is rejected") {
    RegionMask m = nested_mask();
    const int64_t n = m.dims().voxels();
    m.values.mutable_data()[2 * n + (n - 1)] = 1.0; // ET outside TC
    REQUIRE_THROWS_AS(m.validate(), contract_error);
    const fs::path base = temp_dir() / "mask_bad";
    json header;
    header["kind"] = "mask";
    header["dims"] = {8, 8, 8};
    header["channels"] = kRegionNames;
    header["binarized"] = true;
    write_container(base, header, m.values.data());
    REQUIRE_THROWS_AS(read_region_mask(base), contract_error);
}

TEST_CASE("drop_modality is idempotent and commutes") {
    MultiContrastVolume v = random_volume(5);
    MultiContrastVolume once = drop_modality(v, "T1");
    MultiContrastVolume twice = drop_modality(once, "T1");
    REQUIRE(once.intensities.data() == twice.intensities.data());
    REQUIRE(once.present == twice.present);

    MultiContrastVolume ab = drop_modality(drop_modality(v, "T2"), "FLAIR");
    MultiContrastVolume ba = drop_modality(drop_modality(v, "FLAIR"), "T2");
    REQUIRE(ab.intensities.data() == ba.intensities.data());
    REQUIRE(ab.present == ba.present);
}

TEST_CASE("drop_modality leaves other channels bit-identical") {
    MultiContrastVolume v = random_volume(6);
    MultiContrastVolume d = drop_modality(v, "FLAIR");
    const int64_t n = v.dims().voxels();
    for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < n; ++i)
            REQUIRE(d.intensities.data()[c * n + i] == v.intensities.data()[c * n + i]);
    for (int64_t i = 0; i < n; ++i) REQUIRE(d.intensities.data()[3 * n + i] == 0.0);
    REQUIRE_FALSE(d.present[3]);
}

TEST_CASE("dropping all four modalities zeroes everything") {
    MultiContrastVolume v = random_volume(7);
    for (const char* m : kModalityNames) v = drop_modality(v, m);
    for (double x : v.intensities.data()) REQUIRE(x == 0.0);
    for (bool p : v.present) REQUIRE_FALSE(p);
}

TEST_CASE("unknown modality name is a parameter error") {
    MultiContrastVolume v = random_volume(8);
    REQUIRE_THROWS_AS(drop_modality(v, "T3"), param_error);
}
