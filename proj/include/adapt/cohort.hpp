#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "adapt/common.hpp"

namespace adapt {

// One image patch: a small grid of raw feature vectors. cell_grades records
// which archetype produced each cell; that field exists for diagnostics and
// oracles only and is never visible to the bag-level trainers.
struct RawPatch {
    int rows = 0;
    int cols = 0;
    int depth = 0;  // raw feature dimension
    std::vector<double> cells;               // rows*cols*depth, row-major cells
    std::uint8_t grade = 0;                  // 0, 3, 4 or 5
    std::vector<std::uint8_t> cell_grades;   // rows*cols

    std::span<const double> cell(int r, int c) const;
    std::span<double> cell(int r, int c);
    int cell_count() const { return rows * cols; }

    bool operator==(const RawPatch&) const = default;
};

// A slide-level bag. target is the multilabel vector over grades {3,4,5};
// target[slot] = 1 iff the grade equals the primary or secondary label.
struct WsiBag {
    std::string id;
    std::uint8_t primary = 3;
    std::uint8_t secondary = 3;
    std::array<std::uint8_t, 3> target{};
    std::vector<RawPatch> patches;

    bool operator==(const WsiBag&) const = default;
};

// Labeled patch for the patch-level stage. Entries keep provenance back to
// the bag they were sampled from; synthetic fill-in patches use source_patch
// = -1 and an empty source id.
struct PdEntry {
    std::int64_t id = 0;
    std::string source_wsi;
    int source_patch = -1;
    RawPatch patch;

    bool operator==(const PdEntry&) const = default;
};

struct GradeMixEntry {
    std::uint8_t primary = 3;
    std::uint8_t secondary = 3;
    double prob = 0.0;

    bool operator==(const GradeMixEntry&) const = default;
};

std::vector<GradeMixEntry> default_grade_mix();

// Generation parameters. Archetypes are unit vectors in raw feature space;
// the first archetype of every class sits on an orthonormal base direction
// and later ones are blended toward a neighbouring grade by archetype_blend,
// which is what makes neighbouring grades partially confusable.
struct CohortConfig {
    int n_wsis = 400;
    int patches_per_wsi = 32;
    int grid_rows = 4;
    int grid_cols = 4;
    int d_raw = 16;
    int archetypes_per_grade = 2;
    double noise_sigma = 0.2;
    double benign_fraction = 0.30;       // benign patches per bag
    double secondary_fraction = 0.25;    // secondary-grade patches per bag
    double cell_fraction_min = 0.35;     // graded cells per graded patch, lower bound
    double cell_fraction_max = 0.90;
    double archetype_blend = 0.45;
    int pd_per_class = 500;
    std::vector<GradeMixEntry> grade_mix = default_grade_mix();
    std::uint64_t seed = 0;

    void validate() const;  // throws config_error

    bool operator==(const CohortConfig&) const = default;
};

struct Cohort {
    CohortConfig config;
    std::vector<double> archetypes;  // [class][archetype][d_raw] flattened
    std::vector<PdEntry> pd;
    std::vector<WsiBag> bags;

    std::span<const double> archetype(int class_idx, int which) const;

    bool operator==(const Cohort&) const = default;
};

Cohort generate_cohort(const CohortConfig& config);

struct SplitRatios {
    double train = 0.7;
    double val = 0.1;
    double test = 0.2;

    void validate() const;  // each in (0,1), sum == 1

    bool operator==(const SplitRatios&) const = default;
};

// Bag indices per split, stratified by (primary, secondary). Strata smaller
// than 3 force a global shuffled split; the flag records that fallback.
struct CohortSplit {
    std::vector<int> train, val, test;
    bool stratified = true;
};

CohortSplit split_cohort(std::span<const WsiBag> bags, const SplitRatios& ratios,
                         std::uint64_t seed);

// Versioned binary container: text header (format version, seed, config echo)
// followed by length-prefixed little-endian records. Field order is described
// in docs/formats.md. Writes are atomic (temp file + rename).
void save_cohort(const Cohort& cohort, const std::filesystem::path& path);
Cohort load_cohort(const std::filesystem::path& path);

nlohmann::json cohort_config_json(const CohortConfig& c);
CohortConfig cohort_config_from_json(const nlohmann::json& j);  // strict

std::vector<const WsiBag*> select_bags(const Cohort& cohort, std::span<const int> indices);

}  // namespace adapt
