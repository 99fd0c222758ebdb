#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "nerfca/errors.hpp"

// Little-endian primitives for the project's binary files.
namespace nerfca::binio {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

template <typename T>
void write(std::ostream& os, T value) {
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read(std::istream& is, const std::string& what) {
    T value{};
    if (!is.read(reinterpret_cast<char*>(&value), sizeof(T)))
        throw FormatError("truncated data while reading " + what);
    return value;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const std::string& what) {
    const auto n = read<std::uint32_t>(is, what);
    if (n > (1u << 28)) throw FormatError("implausible string length in " + what);
    std::string s(n, '\0');
    if (n > 0 && !is.read(s.data(), n)) throw FormatError("truncated string in " + what);
    return s;
}

}  // namespace nerfca::binio
