#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace pbfm {

// splitmix64 finalizer. Derives independent stream seeds from (seed, stream),
// so per-sample / per-iteration streams can be regenerated without storing
// engine state.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// mt19937_64 plus explicit transforms. The standard pins the engine's output
// sequence but not the distributions', so uniform/normal are done by hand to
// keep runs bit-reproducible across toolchains.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}
    Rng(std::uint64_t seed, std::uint64_t stream) : eng_(mix_seed(seed, stream)) {}

    // uniform on the open interval (0,1)
    double uniform() {
        const std::uint64_t k = eng_() >> 11;  // top 53 bits
        return (static_cast<double>(k) + 0.5) * 0x1p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal, Box-Muller with the second value cached
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    std::uint64_t bits() { return eng_(); }

    // uniform index in [0, n). Modulo bias is ~n/2^64, irrelevant at the
    // dataset sizes used here.
    std::uint64_t index(std::uint64_t n) { return eng_() % n; }

  private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace pbfm
