#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "adapt/cohort.hpp"
#include "adapt/common.hpp"
#include "adapt/model.hpp"
#include "adapt/protolayer.hpp"
#include "adapt/rng.hpp"

using namespace adapt;

namespace {

ModelConfig tiny_model_config() {
    ModelConfig cfg;
    cfg.grid_rows = 2;
    cfg.grid_cols = 2;
    cfg.d_raw = 6;
    cfg.d_hidden = 8;
    cfg.d_latent = 5;
    cfg.protos_per_class = 2;
    return cfg;
}

LatentGrid random_grid(int rows, int cols, int depth, SplitRng& rng) {
    LatentGrid g;
    g.rows = rows;
    g.cols = cols;
    g.depth = depth;
    g.values.resize(static_cast<std::size_t>(rows * cols * depth));
    for (double& v : g.values) v = rng.normal();
    return g;
}

}  // namespace

TEST_CASE("similarity at zero distance is log(1e4) and decreases monotonically") {
    CHECK(similarity(0.0) == doctest::Approx(std::log(1e4)).epsilon(1e-15));
    CHECK(similarity(0.0) == doctest::Approx(9.210340371976184).epsilon(1e-15));
    double prev = similarity(0.0);
    for (double d : {1e-6, 1e-3, 0.1, 1.0, 10.0, 1e4}) {
        const double s = similarity(d);
        CHECK(s < prev);
        CHECK(s > 0.0);
        prev = s;
    }
    CHECK_THROWS_AS(similarity(-1e-12), std::domain_error);
}

TEST_CASE("similarity slope matches finite differences") {
    for (double d : {1e-3, 0.07, 1.3, 42.0}) {
        const double h = 1e-7 * std::max(1.0, d);
        const double num = (similarity(d + h) - similarity(d - h)) / (2 * h);
        CHECK(similarity_slope(d) == doctest::Approx(num).epsilon(1e-6));
    }
}

TEST_CASE("distance map equals the direct double loop") {
    const ModelConfig cfg = tiny_model_config();
    ModelState model = init_model(cfg, 5);
    SplitRng rng = SplitRng::stream(6, "test");
    for (double& v : model.prototype_values()) v = rng.normal();
    const PrototypeBankView bank = bank_view(model);
    const LatentGrid grid = random_grid(2, 2, cfg.d_latent, rng);

    std::vector<double> out(static_cast<std::size_t>(bank.count() * grid.cell_count()));
    distance_map(grid, bank, out);
    for (int g = 0; g < bank.count(); ++g) {
        for (int c = 0; c < grid.cell_count(); ++c) {
            double d2 = 0;
            const auto proto = bank.prototype(g);
            const auto cell = grid.cell_flat(c);
            for (int d = 0; d < cfg.d_latent; ++d) {
                const double diff =
                    proto[static_cast<std::size_t>(d)] - cell[static_cast<std::size_t>(d)];
                d2 += diff * diff;
            }
            CHECK(out[static_cast<std::size_t>(g * grid.cell_count() + c)] ==
                  doctest::Approx(d2).epsilon(1e-12));
        }
    }
}

TEST_CASE("softmax4 is a shift-invariant distribution") {
    const std::array<double, 4> logits{1.0, 2.0, 3.0, 4.0};
    std::array<double, 4> p{};
    softmax4(logits, p);
    double sum = 0;
    for (double v : p) {
        CHECK(v > 0.0);
        sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p[3] > p[2]);
    CHECK(p[2] > p[1]);

    std::array<double, 4> shifted{};
    softmax4({1.0 + 100, 2.0 + 100, 3.0 + 100, 4.0 + 100}, shifted);
    for (int i = 0; i < 4; ++i) {
        CHECK(shifted[static_cast<std::size_t>(i)] ==
              doctest::Approx(p[static_cast<std::size_t>(i)]).epsilon(1e-12));
    }

    std::array<double, 4> uniform{};
    softmax4({0, 0, 0, 0}, uniform);
    for (double v : uniform) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("fixed classifier pattern is +1 own class, -0.5 elsewhere") {
    const int per = 3;
    std::vector<double> fc(static_cast<std::size_t>(4 * 4 * per));
    fc_fixed(per, fc);
    for (int row = 0; row < 4; ++row) {
        for (int g = 0; g < 4 * per; ++g) {
            const double v = fc[static_cast<std::size_t>(row * 4 * per + g)];
            CHECK(v == (g / per == row ? 1.0 : -0.5));
        }
    }
}

TEST_CASE("patch forward composes min distance, similarity and the classifier") {
    const ModelConfig cfg = tiny_model_config();
    ModelState model = init_model(cfg, 7);
    SplitRng rng = SplitRng::stream(8, "test");
    for (double& v : model.prototype_values()) v = rng.normal();
    const PrototypeBankView bank = bank_view(model);
    const LatentGrid grid = random_grid(2, 2, cfg.d_latent, rng);

    const PatchForward fwd = forward_patch(grid, bank, model.fc());
    REQUIRE(static_cast<int>(fwd.min_distance.size()) == bank.count());
    for (int g = 0; g < bank.count(); ++g) {
        double mn = 1e300;
        int arg = -1;
        for (int c = 0; c < grid.cell_count(); ++c) {
            const double d = fwd.distances[static_cast<std::size_t>(g * grid.cell_count() + c)];
            if (d < mn) {
                mn = d;
                arg = c;
            }
        }
        CHECK(fwd.min_distance[static_cast<std::size_t>(g)] == mn);
        CHECK(fwd.argmin_cell[static_cast<std::size_t>(g)] == arg);
        CHECK(fwd.similarities[static_cast<std::size_t>(g)] == doctest::Approx(similarity(mn)));
    }
    for (int row = 0; row < 4; ++row) {
        double z = 0;
        for (int g = 0; g < bank.count(); ++g) {
            z += model.fc()[static_cast<std::size_t>(row * bank.count() + g)] *
                 fwd.similarities[static_cast<std::size_t>(g)];
        }
        CHECK(fwd.logits[static_cast<std::size_t>(row)] == doctest::Approx(z).epsilon(1e-12));
    }

    // The attention path scales the similarity vector entrywise.
    std::vector<double> attn(static_cast<std::size_t>(bank.count()), 0.5);
    const PatchForward half = forward_patch(grid, bank, model.fc(), attn);
    for (int row = 0; row < 4; ++row) {
        CHECK(half.logits[static_cast<std::size_t>(row)] ==
              doctest::Approx(0.5 * fwd.logits[static_cast<std::size_t>(row)]).epsilon(1e-12));
    }
}

TEST_CASE("push snaps each prototype to its nearest same-class labeled cell") {
    const ModelConfig cfg = tiny_model_config();
    ModelState model = init_model(cfg, 9);
    SplitRng rng = SplitRng::stream(10, "test");
    for (double& v : model.prototype_values()) v = rng.normal();

    CohortConfig cc;
    cc.n_wsis = 12;
    cc.patches_per_wsi = 6;
    cc.grid_rows = 2;
    cc.grid_cols = 2;
    cc.d_raw = 6;
    cc.pd_per_class = 25;
    cc.seed = 11;
    const Cohort cohort = generate_cohort(cc);

    ModelState pushed = model;
    push_prototypes(pushed, cohort.pd);

    const PrototypeBankView before = bank_view(model);
    const PrototypeBankView after = bank_view(pushed);
    for (int g = 0; g < after.count(); ++g) {
        const std::uint8_t label = after.class_label(g);
        // Oracle: scan every same-class latent cell for the smallest squared
        // distance to the original prototype, ties to lowest (id, row, col).
        double best = 1e300;
        std::vector<double> best_cell;
        for (const PdEntry& e : cohort.pd) {
            if (e.patch.grade != label) continue;
            const LatentGrid lg = encode(cfg.encoder(), model.encoder_params(), e.patch);
            for (int c = 0; c < lg.cell_count(); ++c) {
                double d2 = 0;
                const auto cell = lg.cell_flat(c);
                const auto proto = before.prototype(g);
                for (int d = 0; d < cfg.d_latent; ++d) {
                    const double diff =
                        proto[static_cast<std::size_t>(d)] - cell[static_cast<std::size_t>(d)];
                    d2 += diff * diff;
                }
                if (d2 < best) {
                    best = d2;
                    best_cell.assign(cell.begin(), cell.end());
                }
            }
        }
        REQUIRE(!best_cell.empty());
        const auto got = after.prototype(g);
        for (int d = 0; d < cfg.d_latent; ++d) {
            CHECK(got[static_cast<std::size_t>(d)] == best_cell[static_cast<std::size_t>(d)]);
        }
        CHECK(pushed.provenance[static_cast<std::size_t>(g)].patch_id >= 0);
    }

    // A second push from the already-snapped state is a no-op.
    ModelState again = pushed;
    push_prototypes(again, cohort.pd);
    CHECK(again.params.values == pushed.params.values);
    CHECK(again.provenance == pushed.provenance);
}

TEST_CASE("push with a class missing from the labeled set is a config error") {
    const ModelConfig cfg = tiny_model_config();
    ModelState model = init_model(cfg, 12);
    CohortConfig cc;
    cc.n_wsis = 10;
    cc.patches_per_wsi = 4;
    cc.grid_rows = 2;
    cc.grid_cols = 2;
    cc.d_raw = 6;
    cc.pd_per_class = 10;
    cc.seed = 13;
    Cohort cohort = generate_cohort(cc);
    std::erase_if(cohort.pd, [](const PdEntry& e) { return e.patch.grade == 5; });
    CHECK_THROWS_AS(push_prototypes(model, cohort.pd), config_error);
}

TEST_CASE("prototype bank view partitions class-major") {
    const ModelConfig cfg = tiny_model_config();
    const ModelState model = init_model(cfg, 14);
    const PrototypeBankView bank = bank_view(model);
    CHECK(bank.count() == 8);
    CHECK(bank.per_class == 2);
    CHECK(bank.depth == cfg.d_latent);
    CHECK(bank.class_of(0) == 0);
    CHECK(bank.class_of(1) == 0);
    CHECK(bank.class_of(2) == 1);
    CHECK(bank.class_label(2) == 3);
    CHECK(bank.class_label(7) == 5);
    CHECK(bank.class_begin(3) == 6);
}
