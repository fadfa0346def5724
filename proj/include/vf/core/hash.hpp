#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace vf {

// 64-bit FNV-1a. Stable across platforms; used for config hashes, manifests, seeds.
class Fnv1a {
public:
    Fnv1a& update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001b3ULL;
        }
        return *this;
    }
    Fnv1a& update(std::string_view s) { return update(s.data(), s.size()); }
    Fnv1a& update(std::uint64_t v) { return update(&v, sizeof(v)); }
    std::uint64_t digest() const { return state_; }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t hash_string(std::string_view s) { return Fnv1a{}.update(s).digest(); }

std::uint64_t hash_file(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

// splitmix64 finalizer over (master, name).
std::uint64_t derive_seed(std::uint64_t master, std::string_view name);

}  // namespace vf
