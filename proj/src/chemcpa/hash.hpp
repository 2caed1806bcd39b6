#pragma once

#include <cstdint>
#include <string_view>

namespace chemcpa {

// XXH64 (Yann Collet's xxHash, 64-bit variant), computed over the raw bytes
// and read little-endian regardless of host byte order. Fingerprint bits and
// checkpoint checksums both use seed 0, so outputs are stable across hosts.
std::uint64_t Xxh64(std::string_view bytes, std::uint64_t seed = 0) noexcept;

}  // namespace chemcpa
