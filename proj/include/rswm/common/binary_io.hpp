#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

#include "rswm/common/errors.hpp"

namespace rswm::io {

static_assert(std::endian::native == std::endian::little, "tensor blobs are written little-endian");

inline void write_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

inline std::uint32_t read_u32(std::istream& in) {
    std::uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4)) throw FormatError("truncated file (u32)");
    return v;
}
inline std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 8)) throw FormatError("truncated file (u64)");
    return v;
}

/// Appends values as little-endian fp32.
template <typename T>
void append_f32(std::vector<std::uint8_t>& blob, std::span<const T> values) {
    const std::size_t offset = blob.size();
    blob.resize(offset + values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const float f = static_cast<float>(values[i]);
        std::memcpy(blob.data() + offset + i * 4, &f, 4);
    }
}

template <typename T>
void read_f32(std::span<const std::uint8_t> blob, std::size_t& offset, std::span<T> out) {
    if (offset + out.size() * 4 > blob.size()) throw FormatError("tensor blob truncated");
    for (std::size_t i = 0; i < out.size(); ++i) {
        float f = 0.0f;
        std::memcpy(&f, blob.data() + offset + i * 4, 4);
        out[i] = static_cast<T>(f);
    }
    offset += out.size() * 4;
}

} // namespace rswm::io
