#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace marrowcast {

constexpr std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// All randomness in the pipeline flows from one global seed through named
// substreams ("phantom", "init-bone", "shuffle", "folds", ...), so any
// subsystem can be re-run in isolation with a reproducible stream.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
    return splitmix64(seed ^ fnv1a64(label));
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view label,
                                    std::uint64_t index) {
    return splitmix64(derive_seed(seed, label) + 0x100000001b3ull * (index + 1));
}

// mt19937_64 with hand-rolled distributions. The standard pins the engine's
// output sequence but not the library distributions, so uniform/normal/shuffle
// are implemented here to make streams identical across toolchains.
class rng_stream {
public:
    explicit rng_stream(std::uint64_t seed) : engine_(splitmix64(seed)) {}
    rng_stream(std::uint64_t seed, std::string_view label)
        : engine_(derive_seed(seed, label)) {}
    rng_stream(std::uint64_t seed, std::string_view label, std::uint64_t index)
        : engine_(derive_seed(seed, label, index)) {}

    std::uint64_t bits() { return engine_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    // Unbiased draw from [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = ~0ull - ~0ull % n;
        std::uint64_t v = 0;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    // Inclusive bounds.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    bool coin(double p_true = 0.5) { return uniform() < p_true; }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace marrowcast
