#ifndef HSAE_BINARY_IO_HPP
#define HSAE_BINARY_IO_HPP

// Little-endian primitive encoding shared by the shard and checkpoint formats.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "hsae/errors.hpp"

namespace hsae::io {

template <typename T>
void put_le(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<unsigned char, sizeof(T)> bytes{};
    std::memcpy(bytes.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

/// Reads one value; a short read raises CorruptionError mentioning `what`.
template <typename T>
T get_le(std::istream& is, const std::string& what) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<unsigned char, sizeof(T)> bytes{};
    if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) {
        throw CorruptionError(what + ": unexpected end of file");
    }
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    T value;
    std::memcpy(&value, bytes.data(), sizeof(T));
    return value;
}

inline void put_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline bool check_magic(std::istream& is, const char (&magic)[5]) {
    char got[4] = {};
    if (!is.read(got, 4)) return false;
    return std::memcmp(got, magic, 4) == 0;
}

/// Bulk f32 payload write; byte-swaps per element only on big-endian hosts.
inline void put_f32_block(std::ostream& os, const float* data, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
    } else {
        for (std::size_t i = 0; i < n; ++i) put_le(os, data[i]);
    }
}

inline void get_f32_block(std::istream& is, float* data, std::size_t n, const std::string& what) {
    if constexpr (std::endian::native == std::endian::little) {
        if (!is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(float)))) {
            throw CorruptionError(what + ": unexpected end of file");
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) data[i] = get_le<float>(is, what);
    }
}

}  // namespace hsae::io

#endif  // HSAE_BINARY_IO_HPP
