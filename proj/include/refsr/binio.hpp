#pragma once

// Little-endian binary helpers shared by the field and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "refsr/error.hpp"

namespace refsr::binio {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_i32(std::ostream& out, std::int32_t v) { put_u32(out, static_cast<std::uint32_t>(v)); }

inline void put_f32(std::ostream& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline void put_floats(std::ostream& out, std::span<const float> v) {
    for (float f : v) put_f32(out, f);
}

inline void put_string(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), std::streamsize(s.size()));
}

inline void read_exact(std::istream& in, char* dst, std::size_t n) {
    in.read(dst, std::streamsize(n));
    if (std::size_t(in.gcount()) != n) fail(ErrorCode::Truncated, "unexpected end of binary stream");
}

inline std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    read_exact(in, reinterpret_cast<char*>(b), 4);
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

inline std::int32_t get_i32(std::istream& in) { return static_cast<std::int32_t>(get_u32(in)); }

inline float get_f32(std::istream& in) { return std::bit_cast<float>(get_u32(in)); }

// Fills `dst` (already sized) from the stream.
inline void get_floats(std::istream& in, std::vector<float>& dst) {
    for (float& f : dst) f = get_f32(in);
}

inline std::string get_string(std::istream& in, std::size_t max_len = 1 << 20) {
    const std::uint32_t n = get_u32(in);
    if (n > max_len) fail(ErrorCode::CorruptFile, "string length");
    std::string s(n, '\0');
    read_exact(in, s.data(), n);
    return s;
}

}  // namespace refsr::binio
