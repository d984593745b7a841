#include "adapt/rng.hpp"

#include <cmath>

#include "adapt/common.hpp"

namespace adapt {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

SplitRng SplitRng::stream(std::uint64_t root_seed, std::string_view name) {
    std::uint64_t tag = fnv1a64(name.data(), name.size());
    return SplitRng(splitmix64(root_seed ^ tag));
}

std::uint64_t SplitRng::next() { return engine_(); }

double SplitRng::uniform() {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
}

double SplitRng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double SplitRng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();  // log(0) guard; hit with probability 2^-53
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

int SplitRng::uniform_int(int lo, int hi) {
    if (hi < lo) throw std::domain_error("uniform_int: empty range");
    std::uint64_t span = static_cast<std::uint64_t>(hi) - static_cast<std::uint64_t>(lo) + 1;
    return lo + static_cast<int>(next() % span);
}

}  // namespace adapt
