#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tucl/errors.hpp"

namespace tucl {

using json = nlohmann::json;

inline uint32_t crc32_bytes(const uint8_t* data, size_t len) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t c = 0xFFFFFFFFu;
    for (size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

inline uint32_t crc32_doubles(const std::vector<double>& v) {
    return crc32_bytes(reinterpret_cast<const uint8_t*>(v.data()), v.size() * sizeof(double));
}

/// Write a file atomically: temp file in the same directory, then rename.
inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw io_error("cannot open for writing: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw io_error("write failed: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw io_error("rename failed: " + path.string() + " (" + ec.message() + ")");
}

/// Emit `<base>.json` header + `<base>.raw` little-endian float64 payload.
/// The header carries a CRC-32 of the payload bytes.
inline void write_container(const std::filesystem::path& base, json header,
                            const std::vector<double>& payload) {
    header["dtype"] = "f64le";
    header["checksum"] = crc32_doubles(payload);
    std::filesystem::path jpath = base;
    jpath += ".json";
    std::filesystem::path rpath = base;
    rpath += ".raw";
    std::string raw(reinterpret_cast<const char*>(payload.data()), payload.size() * sizeof(double));
    atomic_write(rpath, raw);
    atomic_write(jpath, header.dump(2) + "\n");
}

/// Read back a header+payload pair written by write_container, validating
/// dtype, payload length, and checksum.
inline std::pair<json, std::vector<double>> read_container(const std::filesystem::path& base) {
    std::filesystem::path jpath = base;
    jpath += ".json";
    std::filesystem::path rpath = base;
    rpath += ".raw";
    std::ifstream jin(jpath, std::ios::binary);
    if (!jin) throw io_error("missing header file: " + jpath.string());
    json header;
    try {
        jin >> header;
    } catch (const std::exception& e) {
        throw io_error("corrupt header " + jpath.string() + ": " + e.what());
    }
    std::ifstream rin(rpath, std::ios::binary | std::ios::ate);
    if (!rin) throw io_error("missing payload file: " + rpath.string());
    const auto nbytes = static_cast<size_t>(rin.tellg());
    rin.seekg(0);
    if (nbytes % sizeof(double) != 0)
        throw io_error("corrupt payload (not a multiple of 8 bytes): " + rpath.string());
    std::vector<double> payload(nbytes / sizeof(double));
    rin.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(nbytes));
    if (!rin) throw io_error("short read: " + rpath.string());

    if (header.value("dtype", "") != "f64le")
        throw io_error("corrupt file " + jpath.string() + ": unsupported dtype");
    if (!header.contains("checksum") ||
        header["checksum"].get<uint32_t>() != crc32_doubles(payload))
        throw io_error("corrupt file " + base.string() + ": checksum mismatch");
    return {std::move(header), std::move(payload)};
}

} // namespace tucl
