#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace adapt {

// Error taxonomy used across the library. The CLI maps these to exit codes:
// config/format -> 2, dependency -> 3, numeric -> 4.
class config_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class layout_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class numeric_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class format_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class dependency_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Class labels: 0 = benign, 3/4/5 = tumour grades. Bags carry only grade labels.
inline constexpr std::array<std::uint8_t, 4> kClassLabels{0, 3, 4, 5};
inline constexpr std::array<std::uint8_t, 3> kGradeLabels{3, 4, 5};
inline constexpr int kNumClasses = 4;
inline constexpr int kNumGrades = 3;

int class_index(std::uint8_t label);         // 0,3,4,5 -> 0..3, throws std::domain_error
int grade_slot(std::uint8_t grade);          // 3,4,5 -> 0..2, throws std::domain_error
std::uint8_t grade_of_slot(int slot);        // 0..2 -> 3,4,5

// FNV-1a over arbitrary bytes; used for config hashes and freeze checks.
std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed = 1469598103934665603ull);
std::uint64_t fnv1a64(const std::string& s);
std::string hex64(std::uint64_t v);

}  // namespace adapt
