#include "adapt/common.hpp"

#include <cstdio>

namespace adapt {

int class_index(std::uint8_t label) {
    switch (label) {
        case 0: return 0;
        case 3: return 1;
        case 4: return 2;
        case 5: return 3;
        default: break;
    }
    throw std::domain_error("invalid class label " + std::to_string(int(label)) +
                            " (expected 0, 3, 4 or 5)");
}

int grade_slot(std::uint8_t grade) {
    switch (grade) {
        case 3: return 0;
        case 4: return 1;
        case 5: return 2;
        default: break;
    }
    throw std::domain_error("invalid grade label " + std::to_string(int(grade)) +
                            " (expected 3, 4 or 5)");
}

std::uint8_t grade_of_slot(int slot) {
    if (slot < 0 || slot >= kNumGrades) {
        throw std::out_of_range("grade slot out of range: " + std::to_string(slot));
    }
    return kGradeLabels[static_cast<std::size_t>(slot)];
}

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

}  // namespace adapt
