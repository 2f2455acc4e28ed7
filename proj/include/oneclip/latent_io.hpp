#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "core.hpp"

namespace oneclip {

// Latent file format: magic "OCLA", version u16, kind u8 (0=W, 1=W+), L u16,
// d u16, then consecutive codes as little-endian 32-bit floats, row-major.
// The code count is implied by the file size.
inline void save_latents(const std::filesystem::path& path, const std::vector<LatentCode>& codes) {
    if (codes.empty()) throw ArgumentError("save_latents: no codes");
    const LatentCode& first = codes[0];
    for (const auto& c : codes)
        if (c.kind != first.kind || c.layers() != first.layers() || c.dim() != first.dim())
            throw ArgumentError("save_latents: codes must share kind and shape");

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write("OCLA", 4);
    std::uint16_t version = 1;
    out.write(reinterpret_cast<const char*>(&version), 2);
    std::uint8_t kind = first.kind == LatentCode::Kind::W ? 0 : 1;
    out.write(reinterpret_cast<const char*>(&kind), 1);
    std::uint16_t L = static_cast<std::uint16_t>(first.kind == LatentCode::Kind::W ? 1 : first.layers());
    std::uint16_t d = static_cast<std::uint16_t>(first.dim());
    out.write(reinterpret_cast<const char*>(&L), 2);
    out.write(reinterpret_cast<const char*>(&d), 2);
    for (const auto& c : codes) {
        for (std::size_t i = 0; i < c.data.size(); ++i) {
            float f = static_cast<float>(c.data[i]);
            out.write(reinterpret_cast<const char*>(&f), 4);
        }
    }
    if (!out) throw IoError("short write to " + path.string());
}

inline std::vector<LatentCode> load_latents(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 11) throw ParseError("latent file too short: " + path.string());
    if (std::memcmp(bytes.data(), "OCLA", 4) != 0) throw ParseError("bad latent file magic: " + path.string());
    std::uint16_t version;
    std::memcpy(&version, bytes.data() + 4, 2);
    if (version != 1) throw ParseError("unsupported latent file version");
    std::uint8_t kind = static_cast<std::uint8_t>(bytes[6]);
    if (kind > 1) throw ParseError("bad latent kind byte");
    std::uint16_t L, d;
    std::memcpy(&L, bytes.data() + 7, 2);
    std::memcpy(&d, bytes.data() + 9, 2);
    if (L == 0 || d == 0) throw ParseError("bad latent dimensions");

    std::size_t payload = bytes.size() - 11;
    std::size_t per_code = static_cast<std::size_t>(L) * d * 4;
    if (kind == 0) per_code = static_cast<std::size_t>(d) * 4;
    if (per_code == 0 || payload % per_code != 0) throw ParseError("latent payload size mismatch");
    std::size_t count = payload / per_code;
    if (count == 0) throw ParseError("latent file holds no codes");

    std::vector<LatentCode> codes;
    codes.reserve(count);
    const char* p = bytes.data() + 11;
    for (std::size_t c = 0; c < count; ++c) {
        std::size_t n = per_code / 4;
        std::vector<double> data(n);
        for (std::size_t i = 0; i < n; ++i) {
            float f;
            std::memcpy(&f, p, 4);
            p += 4;
            data[i] = static_cast<double>(f);
        }
        if (kind == 0)
            codes.push_back(LatentCode::w(Tensor::from_data({static_cast<int>(d)}, std::move(data))));
        else
            codes.push_back(LatentCode::wplus(Tensor::from_data({static_cast<int>(L), static_cast<int>(d)}, std::move(data))));
    }
    return codes;
}

}  // namespace oneclip
