#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <string_view>

namespace cotprobe {

// 64-bit FNV-1a. Used for config fingerprints and artifact digests.
class Fnv1a {
public:
    void update(std::string_view bytes) {
        for (const unsigned char c : bytes) {
            state_ ^= c;
            state_ *= 0x100000001b3ULL;
        }
    }
    std::uint64_t digest() const { return state_; }
    std::string hex() const;

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string to_hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string Fnv1a::hex() const { return to_hex(state_); }

inline std::string fingerprint(std::string_view bytes) {
    Fnv1a h;
    h.update(bytes);
    return h.hex();
}

// Digest of a file's bytes; throws MissingArtifact when unreadable.
std::string file_fingerprint(const std::filesystem::path& path);

}  // namespace cotprobe
