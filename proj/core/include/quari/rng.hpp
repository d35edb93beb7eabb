#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace quari {

// All randomness in the project flows from one u64 seed through named
// substreams. Adding a new consumer with a fresh name never perturbs the
// draws seen by existing consumers, which keeps golden files stable.
class SeedSplitter {
 public:
  explicit SeedSplitter(std::uint64_t seed) : seed_(seed) {}

  // FNV-1a over the stream name, mixed with the root seed via splitmix64.
  std::uint64_t derive(std::string_view stream) const {
    std::uint64_t h = 14695981039346656037ull;
    for (char c : stream) {
      h ^= static_cast<std::uint8_t>(c);
      h *= 1099511628211ull;
    }
    return mix(seed_ ^ mix(h));
  }

  std::mt19937_64 stream(std::string_view name) const {
    return std::mt19937_64(derive(name));
  }

  std::uint64_t seed() const { return seed_; }

 private:
  static std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::uint64_t seed_;
};

}  // namespace quari
