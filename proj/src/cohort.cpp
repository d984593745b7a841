#include "adapt/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "adapt/checkpoint.hpp"
#include "adapt/rng.hpp"
#include "wire.hpp"

namespace adapt {

using nlohmann::json;

std::span<const double> RawPatch::cell(int r, int c) const {
    return std::span<const double>(cells).subspan(
        (static_cast<std::size_t>(r) * cols + c) * depth, depth);
}

std::span<double> RawPatch::cell(int r, int c) {
    return std::span<double>(cells).subspan((static_cast<std::size_t>(r) * cols + c) * depth,
                                            depth);
}

std::vector<GradeMixEntry> default_grade_mix() {
    // Rough slide-level grade-pair frequencies: mostly 3+3 / 3+4 / 4+3, a thin
    // tail of high-grade combinations.
    return {
        {3, 3, 0.24}, {3, 4, 0.20}, {4, 3, 0.20}, {4, 4, 0.12}, {3, 5, 0.02},
        {5, 3, 0.02}, {4, 5, 0.09}, {5, 4, 0.08}, {5, 5, 0.03},
    };
}

namespace {

struct BagCounts {
    int primary = 0, secondary = 0, benign = 0;
};

BagCounts bag_counts(const CohortConfig& cfg, std::uint8_t pg, std::uint8_t sg) {
    const int l = cfg.patches_per_wsi;
    BagCounts n;
    n.benign = static_cast<int>(std::lround(cfg.benign_fraction * l));
    if (pg == sg) {
        n.secondary = 0;
        n.primary = l - n.benign;
    } else {
        n.secondary = std::max(1, static_cast<int>(std::lround(cfg.secondary_fraction * l)));
        n.primary = l - n.benign - n.secondary;
    }
    if (n.primary < 1 || n.secondary < 0 || n.benign < 0 || n.primary + n.secondary + n.benign != l) {
        throw config_error("patches_per_wsi = " + std::to_string(l) +
                           " cannot realize grade pair " + std::to_string(int(pg)) + "+" +
                           std::to_string(int(sg)) + " with the configured fractions");
    }
    return n;
}

void check_prob(const char* name, double v, double lo, double hi) {
    if (!(v >= lo && v <= hi)) {
        throw config_error(std::string(name) + " must lie in [" + std::to_string(lo) + ", " +
                           std::to_string(hi) + "]");
    }
}

}  // namespace

void CohortConfig::validate() const {
    if (n_wsis < 1) throw config_error("n_wsis must be >= 1");
    if (patches_per_wsi < 1) throw config_error("patches_per_wsi must be >= 1");
    if (grid_rows < 1 || grid_cols < 1) throw config_error("grid dimensions must be >= 1");
    if (d_raw < 4) throw config_error("d_raw must be >= 4 (one base direction per class)");
    if (archetypes_per_grade < 1) throw config_error("archetypes_per_grade must be >= 1");
    if (!(noise_sigma >= 0.0)) throw config_error("noise_sigma must be >= 0");
    check_prob("benign_fraction", benign_fraction, 0.0, 0.999);
    check_prob("secondary_fraction", secondary_fraction, 0.0, 0.999);
    check_prob("cell_fraction_min", cell_fraction_min, 0.0, 1.0);
    check_prob("cell_fraction_max", cell_fraction_max, 0.0, 1.0);
    if (cell_fraction_min > cell_fraction_max) {
        throw config_error("cell_fraction_min exceeds cell_fraction_max");
    }
    check_prob("archetype_blend", archetype_blend, 0.0, 0.95);
    if (pd_per_class < 1) throw config_error("pd_per_class must be >= 1");
    if (grade_mix.empty()) throw config_error("grade_mix must not be empty");
    double total = 0.0;
    for (const auto& e : grade_mix) {
        grade_slot(e.primary);
        grade_slot(e.secondary);
        if (!(e.prob >= 0.0)) throw config_error("grade_mix probabilities must be >= 0");
        total += e.prob;
        if (e.prob > 0.0) bag_counts(*this, e.primary, e.secondary);  // feasibility
    }
    if (std::fabs(total - 1.0) > 1e-9) throw config_error("grade_mix probabilities must sum to 1");
}

std::span<const double> Cohort::archetype(int class_idx, int which) const {
    const std::size_t stride = static_cast<std::size_t>(config.d_raw);
    const std::size_t idx =
        (static_cast<std::size_t>(class_idx) * config.archetypes_per_grade + which) * stride;
    return std::span<const double>(archetypes).subspan(idx, stride);
}

namespace {

// Orthonormal base directions, one per class, via Gram-Schmidt on Gaussian
// draws. Blended archetypes lean toward a neighbouring grade so neighbouring
// grades overlap partially.
std::vector<double> make_archetypes(const CohortConfig& cfg, SplitRng& rng) {
    const int d = cfg.d_raw;
    const int a = cfg.archetypes_per_grade;
    std::vector<std::vector<double>> base(kNumClasses, std::vector<double>(d));
    for (int c = 0; c < kNumClasses; ++c) {
        auto& v = base[c];
        while (true) {
            for (double& x : v) x = rng.normal();
            for (int p = 0; p < c; ++p) {
                double dot = std::inner_product(v.begin(), v.end(), base[p].begin(), 0.0);
                for (int i = 0; i < d; ++i) v[i] -= dot * base[p][i];
            }
            double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
            if (norm > 1e-6) {
                for (double& x : v) x /= norm;
                break;
            }
        }
    }
    // Class index of the grade each class bleeds into.
    const std::array<int, 4> neighbour{1, 2, 3, 2};
    // Benign stays better separated than the grades.
    const std::array<double, 4> blend_scale{0.5, 1.0, 1.0, 1.0};

    std::vector<double> out(static_cast<std::size_t>(kNumClasses) * a * d);
    for (int c = 0; c < kNumClasses; ++c) {
        for (int k = 0; k < a; ++k) {
            const double frac = (a == 1) ? 0.0 : static_cast<double>(k) / (a - 1);
            const double gamma = cfg.archetype_blend * blend_scale[static_cast<std::size_t>(c)] * frac;
            std::vector<double> v(d);
            const auto& nb = base[static_cast<std::size_t>(neighbour[static_cast<std::size_t>(c)])];
            for (int i = 0; i < d; ++i) v[i] = (1.0 - gamma) * base[c][i] + gamma * nb[i];
            double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
            for (int i = 0; i < d; ++i) {
                out[(static_cast<std::size_t>(c) * a + k) * d + i] = v[i] / norm;
            }
        }
    }
    return out;
}

RawPatch make_patch(const CohortConfig& cfg, const std::vector<double>& archetypes,
                    std::uint8_t grade, SplitRng& rng) {
    RawPatch p;
    p.rows = cfg.grid_rows;
    p.cols = cfg.grid_cols;
    p.depth = cfg.d_raw;
    const int cells = p.rows * p.cols;
    p.cells.resize(static_cast<std::size_t>(cells) * cfg.d_raw);
    p.cell_grades.assign(static_cast<std::size_t>(cells), 0);
    p.grade = grade;

    if (grade != 0) {
        const double f = rng.uniform(cfg.cell_fraction_min, cfg.cell_fraction_max);
        bool any = false;
        for (int i = 0; i < cells; ++i) {
            if (rng.uniform() < f) {
                p.cell_grades[static_cast<std::size_t>(i)] = grade;
                any = true;
            }
        }
        if (!any) p.cell_grades[static_cast<std::size_t>(rng.uniform_int(0, cells - 1))] = grade;
    }

    for (int i = 0; i < cells; ++i) {
        const int ci = class_index(p.cell_grades[static_cast<std::size_t>(i)]);
        const int k = rng.uniform_int(0, cfg.archetypes_per_grade - 1);
        const double* arch =
            &archetypes[(static_cast<std::size_t>(ci) * cfg.archetypes_per_grade + k) *
                        cfg.d_raw];
        double* dst = &p.cells[static_cast<std::size_t>(i) * cfg.d_raw];
        for (int j = 0; j < cfg.d_raw; ++j) dst[j] = arch[j] + cfg.noise_sigma * rng.normal();
    }
    return p;
}

}  // namespace

Cohort generate_cohort(const CohortConfig& config) {
    config.validate();
    Cohort cohort;
    cohort.config = config;

    SplitRng arch_rng = SplitRng::stream(config.seed, "archetypes");
    cohort.archetypes = make_archetypes(config, arch_rng);

    // Cumulative mix table for pair selection.
    std::vector<double> cum;
    cum.reserve(config.grade_mix.size());
    double acc = 0.0;
    for (const auto& e : config.grade_mix) {
        acc += e.prob;
        cum.push_back(acc);
    }

    cohort.bags.reserve(static_cast<std::size_t>(config.n_wsis));
    for (int b = 0; b < config.n_wsis; ++b) {
        SplitRng rng = SplitRng::stream(config.seed, "bag-" + std::to_string(b));
        const double u = rng.uniform() * acc;
        std::size_t pick = 0;
        while (pick + 1 < cum.size() && u >= cum[pick]) ++pick;
        const auto& mix = config.grade_mix[pick];

        WsiBag bag;
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "wsi-%05d", b);
        bag.id = idbuf;
        bag.primary = mix.primary;
        bag.secondary = mix.secondary;
        bag.target = {0, 0, 0};
        bag.target[static_cast<std::size_t>(grade_slot(mix.primary))] = 1;
        bag.target[static_cast<std::size_t>(grade_slot(mix.secondary))] = 1;

        const BagCounts n = bag_counts(config, mix.primary, mix.secondary);
        std::vector<std::uint8_t> grades;
        grades.insert(grades.end(), static_cast<std::size_t>(n.primary), mix.primary);
        grades.insert(grades.end(), static_cast<std::size_t>(n.secondary), mix.secondary);
        grades.insert(grades.end(), static_cast<std::size_t>(n.benign), 0);
        rng.shuffle(grades);

        bag.patches.reserve(grades.size());
        for (std::uint8_t g : grades) bag.patches.push_back(make_patch(config, cohort.archetypes, g, rng));
        cohort.bags.push_back(std::move(bag));
    }

    // Class-balanced labeled patch set: existing patches per class, plus
    // synthetic benign fill when the bags cannot cover the benign quota.
    SplitRng pd_rng = SplitRng::stream(config.seed, "pd");
    std::int64_t next_id = 0;
    for (std::uint8_t label : kClassLabels) {
        std::vector<std::pair<int, int>> pool;
        for (int b = 0; b < static_cast<int>(cohort.bags.size()); ++b) {
            const auto& patches = cohort.bags[static_cast<std::size_t>(b)].patches;
            for (int i = 0; i < static_cast<int>(patches.size()); ++i) {
                if (patches[static_cast<std::size_t>(i)].grade == label) pool.emplace_back(b, i);
            }
        }
        const int want = config.pd_per_class;
        const int take = std::min<int>(want, static_cast<int>(pool.size()));
        // Partial Fisher-Yates: the first `take` entries are a uniform sample.
        for (int i = 0; i < take; ++i) {
            int j = pd_rng.uniform_int(i, static_cast<int>(pool.size()) - 1);
            std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
        }
        for (int i = 0; i < take; ++i) {
            const auto [b, pi] = pool[static_cast<std::size_t>(i)];
            PdEntry e;
            e.id = next_id++;
            e.source_wsi = cohort.bags[static_cast<std::size_t>(b)].id;
            e.source_patch = pi;
            e.patch = cohort.bags[static_cast<std::size_t>(b)].patches[static_cast<std::size_t>(pi)];
            cohort.pd.push_back(std::move(e));
        }
        if (label == 0) {
            for (int i = take; i < want; ++i) {
                PdEntry e;
                e.id = next_id++;
                e.source_patch = -1;
                e.patch = make_patch(config, cohort.archetypes, 0, pd_rng);
                cohort.pd.push_back(std::move(e));
            }
        }
    }
    return cohort;
}

void SplitRatios::validate() const {
    for (double r : {train, val, test}) {
        if (!(r > 0.0 && r < 1.0)) {
            throw config_error("split ratios must each lie strictly inside (0, 1)");
        }
    }
    if (std::fabs(train + val + test - 1.0) > 1e-9) {
        throw config_error("split ratios must sum to 1");
    }
}

namespace {

// Largest-remainder apportionment of n into three parts; remainder order
// train > val > test.
std::array<int, 3> apportion(int n, const SplitRatios& r) {
    const std::array<double, 3> exact{r.train * n, r.val * n, r.test * n};
    std::array<int, 3> base{};
    int used = 0;
    for (int i = 0; i < 3; ++i) {
        base[static_cast<std::size_t>(i)] = static_cast<int>(std::floor(exact[static_cast<std::size_t>(i)] + 1e-12));
        used += base[static_cast<std::size_t>(i)];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        const double fa = exact[static_cast<std::size_t>(a)] - std::floor(exact[static_cast<std::size_t>(a)] + 1e-12);
        const double fb = exact[static_cast<std::size_t>(b)] - std::floor(exact[static_cast<std::size_t>(b)] + 1e-12);
        return fa > fb;
    });
    for (int k = 0; k < n - used; ++k) base[static_cast<std::size_t>(order[static_cast<std::size_t>(k % 3)])] += 1;
    return base;
}

}  // namespace

CohortSplit split_cohort(std::span<const WsiBag> bags, const SplitRatios& ratios,
                         std::uint64_t seed) {
    ratios.validate();
    if (bags.empty()) throw std::domain_error("split_cohort: no bags");

    std::map<int, std::vector<int>> strata;
    for (int i = 0; i < static_cast<int>(bags.size()); ++i) {
        const auto& b = bags[static_cast<std::size_t>(i)];
        strata[(int(b.primary) << 8) | int(b.secondary)].push_back(i);
    }
    bool small = false;
    for (const auto& [key, idx] : strata) {
        if (static_cast<int>(idx.size()) < 3) small = true;
    }

    SplitRng rng = SplitRng::stream(seed, "split");
    CohortSplit out;
    auto assign = [&out](std::vector<int>& idx, const std::array<int, 3>& counts) {
        int p = 0;
        for (int i = 0; i < counts[0]; ++i) out.train.push_back(idx[static_cast<std::size_t>(p++)]);
        for (int i = 0; i < counts[1]; ++i) out.val.push_back(idx[static_cast<std::size_t>(p++)]);
        for (int i = 0; i < counts[2]; ++i) out.test.push_back(idx[static_cast<std::size_t>(p++)]);
    };

    if (small) {
        out.stratified = false;
        std::vector<int> all(bags.size());
        std::iota(all.begin(), all.end(), 0);
        rng.shuffle(all);
        assign(all, apportion(static_cast<int>(all.size()), ratios));
    } else {
        for (auto& [key, idx] : strata) {
            rng.shuffle(idx);
            assign(idx, apportion(static_cast<int>(idx.size()), ratios));
        }
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

// ---- serialization ----

nlohmann::json cohort_config_json(const CohortConfig& c) {
    json mix = json::array();
    for (const auto& e : c.grade_mix) {
        mix.push_back(json{{"primary", e.primary}, {"secondary", e.secondary}, {"prob", e.prob}});
    }
    return json{{"n_wsis", c.n_wsis},
                {"patches_per_wsi", c.patches_per_wsi},
                {"grid_rows", c.grid_rows},
                {"grid_cols", c.grid_cols},
                {"d_raw", c.d_raw},
                {"archetypes_per_grade", c.archetypes_per_grade},
                {"noise_sigma", c.noise_sigma},
                {"benign_fraction", c.benign_fraction},
                {"secondary_fraction", c.secondary_fraction},
                {"cell_fraction_min", c.cell_fraction_min},
                {"cell_fraction_max", c.cell_fraction_max},
                {"archetype_blend", c.archetype_blend},
                {"pd_per_class", c.pd_per_class},
                {"grade_mix", mix},
                {"seed", c.seed}};
}

namespace {

void put_patch(std::string& out, const RawPatch& p) {
    wire::put_u32(out, static_cast<std::uint32_t>(p.rows));
    wire::put_u32(out, static_cast<std::uint32_t>(p.cols));
    wire::put_u32(out, static_cast<std::uint32_t>(p.depth));
    wire::put_u8(out, p.grade);
    for (double v : p.cells) wire::put_f64(out, v);
    for (std::uint8_t g : p.cell_grades) wire::put_u8(out, g);
}

RawPatch get_patch(wire::Reader& r) {
    RawPatch p;
    p.rows = static_cast<int>(r.u32());
    p.cols = static_cast<int>(r.u32());
    p.depth = static_cast<int>(r.u32());
    if (p.rows < 0 || p.cols < 0 || p.depth < 0 || p.rows * p.cols > (1 << 20)) {
        throw format_error("implausible patch dimensions at byte offset " + std::to_string(r.pos()));
    }
    p.grade = r.u8();
    const std::size_t cells = static_cast<std::size_t>(p.rows) * p.cols;
    p.cells.resize(cells * static_cast<std::size_t>(p.depth));
    for (double& v : p.cells) v = r.f64();
    p.cell_grades.resize(cells);
    for (auto& g : p.cell_grades) g = r.u8();
    return p;
}

}  // namespace

void save_cohort(const Cohort& cohort, const std::filesystem::path& path) {
    std::string out;
    out += "ADAPT-COHORT 1\n";
    out += "seed " + std::to_string(cohort.config.seed) + "\n";
    out += "config " + cohort_config_json(cohort.config).dump() + "\n";
    out += "counts " + std::to_string(cohort.bags.size()) + " " + std::to_string(cohort.pd.size()) + "\n";
    out += "archetypes " + std::to_string(kNumClasses) + " " +
           std::to_string(cohort.config.archetypes_per_grade) + " " +
           std::to_string(cohort.config.d_raw) + "\n";
    out += "end\n";

    for (double v : cohort.archetypes) wire::put_f64(out, v);

    for (const auto& e : cohort.pd) {
        std::string rec;
        wire::put_i64(rec, e.id);
        wire::put_string(rec, e.source_wsi);
        wire::put_i64(rec, e.source_patch);
        put_patch(rec, e.patch);
        wire::put_u64(out, rec.size());
        out += rec;
    }
    for (const auto& b : cohort.bags) {
        std::string rec;
        wire::put_string(rec, b.id);
        wire::put_u8(rec, b.primary);
        wire::put_u8(rec, b.secondary);
        for (auto t : b.target) wire::put_u8(rec, t);
        wire::put_u32(rec, static_cast<std::uint32_t>(b.patches.size()));
        for (const auto& p : b.patches) put_patch(rec, p);
        wire::put_u64(out, rec.size());
        out += rec;
    }
    write_atomic(path, out);
}

Cohort load_cohort(const std::filesystem::path& path) {
    const std::string data = read_file(path);
    std::size_t pos = 0;
    auto line = [&]() {
        std::size_t nl = data.find('\n', pos);
        if (nl == std::string::npos) throw format_error("cohort header truncated at byte offset " + std::to_string(pos));
        std::string s = data.substr(pos, nl - pos);
        pos = nl + 1;
        return s;
    };

    if (line() != "ADAPT-COHORT 1") throw format_error("not a cohort file or unsupported version");
    Cohort cohort;
    std::size_t n_bags = 0, n_pd = 0;
    int arch_classes = 0, arch_per = 0, arch_d = 0;
    while (true) {
        std::string l = line();
        if (l == "end") break;
        std::istringstream is(l);
        std::string key;
        is >> key;
        if (key == "seed") {
            is >> cohort.config.seed;
        } else if (key == "config") {
            std::string rest = l.substr(7);
            json j = json::parse(rest, nullptr, false);
            if (j.is_discarded()) throw format_error("cohort header config echo is not valid JSON");
            cohort.config = cohort_config_from_json(j);
        } else if (key == "counts") {
            is >> n_bags >> n_pd;
        } else if (key == "archetypes") {
            is >> arch_classes >> arch_per >> arch_d;
        } else {
            throw format_error("unknown cohort header line: " + l);
        }
        if (is.fail()) throw format_error("malformed cohort header line: " + l);
    }

    wire::Reader r(data, pos);
    cohort.archetypes.resize(static_cast<std::size_t>(arch_classes) * arch_per * arch_d);
    for (double& v : cohort.archetypes) v = r.f64();

    cohort.pd.reserve(n_pd);
    for (std::size_t i = 0; i < n_pd; ++i) {
        const std::uint64_t len = r.u64();
        const std::size_t start = r.pos();
        PdEntry e;
        e.id = r.i64();
        e.source_wsi = r.str();
        e.source_patch = static_cast<int>(r.i64());
        e.patch = get_patch(r);
        if (r.pos() - start != len) {
            throw format_error("labeled patch record length mismatch at byte offset " + std::to_string(start));
        }
        cohort.pd.push_back(std::move(e));
    }
    cohort.bags.reserve(n_bags);
    for (std::size_t i = 0; i < n_bags; ++i) {
        const std::uint64_t len = r.u64();
        const std::size_t start = r.pos();
        WsiBag b;
        b.id = r.str();
        b.primary = r.u8();
        b.secondary = r.u8();
        for (auto& t : b.target) t = r.u8();
        const std::uint32_t np = r.u32();
        b.patches.reserve(np);
        for (std::uint32_t k = 0; k < np; ++k) b.patches.push_back(get_patch(r));
        if (r.pos() - start != len) {
            throw format_error("bag record length mismatch at byte offset " + std::to_string(start));
        }
        cohort.bags.push_back(std::move(b));
    }
    if (!r.done()) throw format_error("trailing bytes after last record at byte offset " + std::to_string(r.pos()));
    return cohort;
}

std::vector<const WsiBag*> select_bags(const Cohort& cohort, std::span<const int> indices) {
    std::vector<const WsiBag*> out;
    out.reserve(indices.size());
    for (int i : indices) {
        if (i < 0 || i >= static_cast<int>(cohort.bags.size())) {
            throw std::out_of_range("bag index " + std::to_string(i) + " outside cohort");
        }
        out.push_back(&cohort.bags[static_cast<std::size_t>(i)]);
    }
    return out;
}

}  // namespace adapt
