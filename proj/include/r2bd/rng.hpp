#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "r2bd/tensor.hpp"

namespace r2bd {

/// splitmix64 finalizer; used to derive independent substream seeds.
std::uint64_t mix_seed(std::uint64_t x);
/// Deterministic 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ULL);
/// Seed for the named substream `name` of the stream `seed`.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    Rng(std::uint64_t seed, std::string_view stream) : engine_(derive_seed(seed, stream)) {}

    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }
    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    int uniform_int(int lo, int hi) {  // inclusive
        return std::uniform_int_distribution<int>(lo, hi)(engine_);
    }
    std::uint64_t next_u64() { return engine_(); }

    Tensor normal_tensor(const Shape& shape, double stddev = 1.0);
    Tensor uniform_tensor(const Shape& shape, double lo, double hi);

    template <typename Container>
    void shuffle(Container& c) {
        for (std::size_t i = c.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(engine_() % i);
            std::swap(c[i - 1], c[j]);
        }
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace r2bd
