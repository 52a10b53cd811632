#pragma once

#include <cstdint>
#include <cstddef>
#include <string>
#include <vector>

namespace flowmimic {

// FNV-1a, used for config hashes, checkpoint/vocabulary binding and
// deriving per-call seeds. Not cryptographic; collisions are harmless here.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

inline uint64_t fnv1a64(const std::vector<int>& v, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(v.data(), v.size() * sizeof(int), h);
}

inline std::string hash_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

}  // namespace flowmimic
