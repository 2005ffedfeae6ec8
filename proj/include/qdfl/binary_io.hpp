#pragma once

// Little-endian primitive encoding shared by the tensor and model formats.

#include <array>
#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "qdfl/errors.hpp"

namespace qdfl::binary {

inline void put_u64(std::ostream& out, std::uint64_t v) {
    std::array<char, 8> bytes{};
    for (std::size_t i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
    out.write(bytes.data(), bytes.size());
}

inline void put_u32(std::ostream& out, std::uint32_t v) {
    std::array<char, 4> bytes{};
    for (std::size_t i = 0; i < 4; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
    out.write(bytes.data(), bytes.size());
}

inline void put_u8(std::ostream& out, std::uint8_t v) { out.put(static_cast<char>(v)); }

inline void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline void put_string(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void read_exact(std::istream& in, char* dst, std::size_t n) {
    in.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) throw FormatError("unexpected end of file");
}

inline std::uint64_t get_u64(std::istream& in) {
    std::array<unsigned char, 8> bytes{};
    read_exact(in, reinterpret_cast<char*>(bytes.data()), bytes.size());
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return v;
}

inline std::uint32_t get_u32(std::istream& in) {
    std::array<unsigned char, 4> bytes{};
    read_exact(in, reinterpret_cast<char*>(bytes.data()), bytes.size());
    std::uint32_t v = 0;
    for (std::size_t i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
    return v;
}

inline std::uint8_t get_u8(std::istream& in) {
    char c = 0;
    read_exact(in, &c, 1);
    return static_cast<std::uint8_t>(c);
}

inline double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

inline std::string get_string(std::istream& in, std::size_t max_len = 1u << 20) {
    const std::uint32_t len = get_u32(in);
    if (len > max_len) throw FormatError("string field too long");
    std::string s(len, '\0');
    read_exact(in, s.data(), len);
    return s;
}

}  // namespace qdfl::binary
