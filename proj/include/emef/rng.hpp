#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace emef {

// Seeded random source. Distribution mappings are written out explicitly so
// that streams are stable across standard library versions; every consumer
// (data synthesis, parameter init, soft labels) derives its own named
// substream from the single run seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    static std::uint64_t mix(std::uint64_t seed, std::string_view name) {
        // FNV-1a over the name, then a splitmix64 finalizer.
        std::uint64_t h = 1469598103934665603ull;
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ull + h;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static Rng substream(std::uint64_t seed, std::string_view name) {
        return Rng(mix(seed, name));
    }

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    int uniform_int(int lo, int hi) { // inclusive bounds
        return lo + static_cast<int>(next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
    }

    // Box-Muller; consumes two uniform draws per call.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = 1.0 - uniform(); // (0, 1]
        double u2 = uniform();
        double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
        return mean + stddev * z;
    }

private:
    std::mt19937_64 gen_;
};

} // namespace emef
