#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace adapt {

// Deterministic random source. Every consumer derives a named sub-stream from
// one root seed, so enabling or disabling a pipeline stage never perturbs the
// draws of another stage. Distribution transforms are implemented here rather
// than taken from <random> because the standard leaves those unspecified.
class SplitRng {
public:
    explicit SplitRng(std::uint64_t seed) : engine_(seed) {}

    static SplitRng stream(std::uint64_t root_seed, std::string_view name);

    std::uint64_t next();

    // Uniform draw in [0, 1) with 53 bits of mantissa.
    double uniform();
    double uniform(double lo, double hi);

    // Standard normal via Box-Muller; consumes two uniforms per draw.
    double normal();

    // Inclusive bounds. Modulo bias is irrelevant at the range sizes used here.
    int uniform_int(int lo, int hi);

    // Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<int>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace adapt
