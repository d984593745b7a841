#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "adapt/checkpoint.hpp"
#include "adapt/cohort.hpp"
#include "adapt/common.hpp"

using namespace adapt;

namespace {

CohortConfig small_config(std::uint64_t seed) {
    CohortConfig c;
    c.n_wsis = 60;
    c.patches_per_wsi = 8;
    c.grid_rows = 2;
    c.grid_cols = 2;
    c.d_raw = 8;
    c.pd_per_class = 40;
    c.seed = seed;
    return c;
}

int popcount3(const std::array<std::uint8_t, 3>& t) {
    return t[0] + t[1] + t[2];
}

std::filesystem::path temp_dir() {
    auto dir = std::filesystem::temp_directory_path() / "adapt_cohort_test";
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("bag targets encode exactly the primary and secondary grades") {
    const Cohort cohort = generate_cohort(small_config(1));
    CHECK(cohort.bags.size() == 60);
    for (const WsiBag& bag : cohort.bags) {
        const int bits = popcount3(bag.target);
        CHECK(bits >= 1);
        CHECK(bits <= 2);
        CHECK(bag.target[grade_slot(bag.primary)] == 1);
        CHECK(bag.target[grade_slot(bag.secondary)] == 1);
        CHECK((bits == 2) == (bag.primary != bag.secondary));
        for (const RawPatch& p : bag.patches) {
            CHECK(p.rows == 2);
            CHECK(p.cols == 2);
            CHECK(p.depth == 8);
            CHECK(p.cells.size() == 2u * 2u * 8u);
            CHECK(p.cell_grades.size() == 4u);
        }
    }
}

TEST_CASE("zero noise with one archetype per grade reproduces archetypes exactly") {
    CohortConfig c = small_config(2);
    c.noise_sigma = 0.0;
    c.archetypes_per_grade = 1;
    const Cohort cohort = generate_cohort(c);
    for (const WsiBag& bag : cohort.bags) {
        for (const RawPatch& patch : bag.patches) {
            for (int cell = 0; cell < patch.cell_count(); ++cell) {
                const int ci = class_index(patch.cell_grades[static_cast<std::size_t>(cell)]);
                const auto proto = cohort.archetype(ci, 0);
                const auto got = patch.cell(cell / patch.cols, cell % patch.cols);
                for (int d = 0; d < c.d_raw; ++d) {
                    CHECK(got[static_cast<std::size_t>(d)] ==
                          doctest::Approx(proto[static_cast<std::size_t>(d)]).epsilon(1e-12));
                }
            }
        }
    }
}

TEST_CASE("with modest noise every cell stays nearest to one of its own grade's archetypes") {
    // One archetype per grade puts the classes on orthonormal directions with
    // no blended mid-points, so tiny noise cannot flip the nearest class.
    CohortConfig c = small_config(3);
    c.noise_sigma = 0.05;
    c.archetypes_per_grade = 1;
    const Cohort cohort = generate_cohort(c);
    long total = 0, correct = 0;
    for (const PdEntry& e : cohort.pd) {
        for (int cell = 0; cell < e.patch.cell_count(); ++cell) {
            const auto x = e.patch.cell(cell / e.patch.cols, cell % e.patch.cols);
            double best = 1e300;
            int best_class = -1;
            for (int ci = 0; ci < kNumClasses; ++ci) {
                for (int a = 0; a < c.archetypes_per_grade; ++a) {
                    const auto proto = cohort.archetype(ci, a);
                    double d2 = 0;
                    for (int d = 0; d < c.d_raw; ++d) {
                        const double diff =
                            x[static_cast<std::size_t>(d)] - proto[static_cast<std::size_t>(d)];
                        d2 += diff * diff;
                    }
                    if (d2 < best) {
                        best = d2;
                        best_class = ci;
                    }
                }
            }
            total++;
            correct += best_class == class_index(e.patch.cell_grades[static_cast<std::size_t>(cell)]);
        }
    }
    CHECK(total > 0);
    CHECK(correct == total);
}

TEST_CASE("generation is deterministic in the seed") {
    const Cohort a = generate_cohort(small_config(9));
    const Cohort b = generate_cohort(small_config(9));
    CHECK(a == b);
    const Cohort c = generate_cohort(small_config(10));
    CHECK(a.bags != c.bags);
}

TEST_CASE("patch grade composition follows the configured fractions") {
    CohortConfig c = small_config(4);
    c.n_wsis = 200;
    c.patches_per_wsi = 16;
    const Cohort cohort = generate_cohort(c);
    long benign = 0, primary = 0, secondary = 0, total = 0;
    for (const WsiBag& bag : cohort.bags) {
        for (const RawPatch& p : bag.patches) {
            total++;
            if (p.grade == 0) benign++;
            else if (p.grade == bag.primary) primary++;
            else if (p.grade == bag.secondary) secondary++;
        }
    }
    CHECK(benign + primary + secondary == total);
    const double benign_frac = static_cast<double>(benign) / static_cast<double>(total);
    CHECK(benign_frac == doctest::Approx(c.benign_fraction).epsilon(0.15));
}

TEST_CASE("labeled patch set covers every class with provenance") {
    const Cohort cohort = generate_cohort(small_config(5));
    std::array<int, 4> per_class{};
    std::set<std::int64_t> ids;
    for (const PdEntry& e : cohort.pd) {
        per_class[static_cast<std::size_t>(class_index(e.patch.grade))]++;
        CHECK(ids.insert(e.id).second);  // ids unique
        if (e.source_patch >= 0) {
            CHECK(!e.source_wsi.empty());
        } else {
            CHECK(e.patch.grade == 0);  // only benign entries are synthesized
        }
    }
    // Benign is topped up synthetically to the exact quota; graded classes are
    // capped by how many such patches the bags actually contain.
    CHECK(per_class[0] == 40);
    for (int ci = 1; ci < 4; ++ci) {
        CHECK(per_class[static_cast<std::size_t>(ci)] >= 1);
        CHECK(per_class[static_cast<std::size_t>(ci)] <= 40);
    }
}

TEST_CASE("split is disjoint, covering and close to the requested ratios") {
    CohortConfig c = small_config(6);
    c.n_wsis = 300;
    const Cohort cohort = generate_cohort(c);
    const SplitRatios ratios;
    const CohortSplit split = split_cohort(cohort.bags, ratios, 6);
    std::set<int> seen;
    for (const auto* part : {&split.train, &split.val, &split.test}) {
        for (int i : *part) {
            CHECK(i >= 0);
            CHECK(i < 300);
            CHECK(seen.insert(i).second);
        }
    }
    CHECK(seen.size() == 300);
    CHECK(std::abs(static_cast<double>(split.train.size()) / 300.0 - 0.7) < 0.05);
    CHECK(std::abs(static_cast<double>(split.test.size()) / 300.0 - 0.2) < 0.05);
    CHECK(split_cohort(cohort.bags, ratios, 6).train == split.train);  // deterministic

    // Stratification: every (primary, secondary) stratum with >= 3 bags keeps
    // at least one member in train.
    CHECK(split.stratified);
    std::map<std::pair<int, int>, int> strata_total, strata_train;
    for (std::size_t i = 0; i < cohort.bags.size(); ++i) {
        const auto key = std::make_pair<int, int>(cohort.bags[i].primary, cohort.bags[i].secondary);
        strata_total[key]++;
    }
    for (int i : split.train) {
        const auto& b = cohort.bags[static_cast<std::size_t>(i)];
        strata_train[{b.primary, b.secondary}]++;
    }
    for (const auto& [key, count] : strata_total) {
        if (count >= 3) CHECK(strata_train[key] >= 1);
    }
}

TEST_CASE("tiny strata fall back to a global split") {
    CohortConfig c = small_config(7);
    c.n_wsis = 8;
    const Cohort cohort = generate_cohort(c);
    const CohortSplit split = split_cohort(cohort.bags, SplitRatios{}, 7);
    CHECK(!split.stratified);
    CHECK(split.train.size() + split.val.size() + split.test.size() == 8);
}

TEST_CASE("split ratios validate") {
    SplitRatios bad;
    bad.train = 0.9;  // sum > 1
    CHECK_THROWS_AS(bad.validate(), config_error);
    SplitRatios zero{0.0, 0.5, 0.5};
    CHECK_THROWS_AS(zero.validate(), config_error);
    CHECK_NOTHROW(SplitRatios{}.validate());
}

TEST_CASE("cohort file round trip preserves every field") {
    const auto dir = temp_dir();
    const Cohort cohort = generate_cohort(small_config(8));
    const auto path = dir / "roundtrip.bin";
    save_cohort(cohort, path);
    const Cohort loaded = load_cohort(path);
    CHECK(loaded == cohort);

    // Saving again wins the same bytes.
    const std::string first = read_file(path);
    save_cohort(loaded, path);
    CHECK(read_file(path) == first);
    std::filesystem::remove(path);
}

TEST_CASE("corrupted cohort files are format errors") {
    const auto dir = temp_dir();
    const Cohort cohort = generate_cohort(small_config(12));
    const auto path = dir / "corrupt.bin";
    save_cohort(cohort, path);
    std::string bytes = read_file(path);

    std::string magic_broken = bytes;
    magic_broken[0] = 'X';
    write_atomic(path, magic_broken);
    CHECK_THROWS_AS(load_cohort(path), format_error);

    write_atomic(path, bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_cohort(path), format_error);

    CHECK_THROWS_AS(load_cohort(dir / "does_not_exist.bin"), dependency_error);
    std::filesystem::remove(path);
}

TEST_CASE("cohort config validation rejects out-of-range values") {
    CohortConfig c = small_config(1);
    c.n_wsis = 0;
    CHECK_THROWS_AS(c.validate(), config_error);
    c = small_config(1);
    c.noise_sigma = -0.1;
    CHECK_THROWS_AS(c.validate(), config_error);
    c = small_config(1);
    c.cell_fraction_min = 0.9;
    c.cell_fraction_max = 0.5;
    CHECK_THROWS_AS(c.validate(), config_error);
    c = small_config(1);
    c.grade_mix.clear();
    CHECK_THROWS_AS(c.validate(), config_error);
    CHECK_NOTHROW(small_config(1).validate());
}

TEST_CASE("cohort config json round trips strictly") {
    const CohortConfig c = small_config(21);
    const CohortConfig back = cohort_config_from_json(cohort_config_json(c));
    CHECK(back == c);
    nlohmann::json j = cohort_config_json(c);
    j["unknown_knob"] = 1;
    CHECK_THROWS_AS(cohort_config_from_json(j), config_error);
}

TEST_CASE("select_bags maps indices to stable pointers") {
    const Cohort cohort = generate_cohort(small_config(13));
    const std::vector<int> idx{5, 0, 59};
    const auto sel = select_bags(cohort, idx);
    REQUIRE(sel.size() == 3);
    CHECK(sel[0] == &cohort.bags[5]);
    CHECK(sel[1] == &cohort.bags[0]);
    CHECK(sel[2] == &cohort.bags[59]);
}
