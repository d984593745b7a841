#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "adapt/cohort.hpp"
#include "adapt/common.hpp"
#include "adapt/gradcheck.hpp"
#include "adapt/model.hpp"
#include "adapt/protolayer.hpp"
#include "adapt/rng.hpp"
#include "adapt/stage1.hpp"

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

CohortConfig tiny_cohort_config(std::uint64_t seed) {
    CohortConfig c;
    c.n_wsis = 16;
    c.patches_per_wsi = 6;
    c.grid_rows = 2;
    c.grid_cols = 2;
    c.d_raw = 6;
    c.pd_per_class = 30;
    c.seed = seed;
    return c;
}

}  // namespace

TEST_CASE("cluster and separation equal the brute-force double minimum") {
    const ModelConfig cfg = tiny_model_config();
    ModelState model = init_model(cfg, 1);
    SplitRng rng = SplitRng::stream(2, "test");
    for (int instance = 0; instance < 200; ++instance) {
        for (double& v : model.prototype_values()) v = rng.normal();
        const PrototypeBankView bank = bank_view(model);
        const LatentGrid grid = random_grid(2, 2, cfg.d_latent, rng);
        const std::uint8_t label =
            kClassLabels[static_cast<std::size_t>(rng.uniform_int(0, 3))];

        double best_same = 1e300, best_other = 1e300;
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
                if (bank.class_label(g) == label) best_same = std::min(best_same, d2);
                else best_other = std::min(best_other, d2);
            }
        }
        const ClusterSeparation cs = cluster_separation(grid, label, bank);
        CHECK(cs.clst == best_same);
        CHECK(cs.sep == -best_other);
        CHECK(cs.sep <= 0.0);
        CHECK(bank.class_label(cs.clst_proto) == label);
        CHECK(bank.class_label(cs.sep_proto) != label);
    }
}

TEST_CASE("a cell equal to a same-class prototype drives clst to zero") {
    const ModelConfig cfg = tiny_model_config();
    ModelState model = init_model(cfg, 3);
    SplitRng rng = SplitRng::stream(4, "test");
    for (double& v : model.prototype_values()) v = rng.normal();
    const PrototypeBankView bank = bank_view(model);
    LatentGrid grid = random_grid(2, 2, cfg.d_latent, rng);
    // Plant the first grade-4 prototype into cell 3.
    const int proto_id = bank.class_begin(class_index(4));
    const auto proto = bank.prototype(proto_id);
    std::copy(proto.begin(), proto.end(), grid.cell(1, 1).begin());
    const ClusterSeparation cs = cluster_separation(grid, 4, bank);
    CHECK(cs.clst == 0.0);
    CHECK(cs.clst_proto == proto_id);
    CHECK(cs.clst_cell == 3);
}

TEST_CASE("patch loss composes CE with the weighted distance terms") {
    // Uniform probabilities with zero cluster and separation terms cost ln 4.
    const ModelConfig cfg = tiny_model_config();
    ModelState model = init_model(cfg, 5);
    model.params.fill_segment(kSegEncoder, 0.0);  // zero latents everywhere
    model.params.fill_segment(kSegPrototypes, 0.0);
    const PrototypeBankView bank = bank_view(model);
    RawPatch patch;
    patch.rows = 2;
    patch.cols = 2;
    patch.depth = 6;
    patch.cells.assign(2 * 2 * 6, 0.3);
    patch.cell_grades.assign(4, 0);
    const LatentGrid grid = encode(cfg.encoder(), model.encoder_params(), patch);
    const PatchForward fwd = forward_patch(grid, bank, model.fc());

    Stage1Config s1;
    const PatchLossTerms terms = patch_loss(fwd, grid, 0, bank, s1);
    CHECK(terms.ce == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(terms.clst == 0.0);
    CHECK(terms.sep == 0.0);
    CHECK(terms.total == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("separation reward enters with its negative sign") {
    // With clst = 0 and |sep| = 5 at the default weights the distance terms
    // contribute 0.8 * 0 + 0.08 * (-5) = -0.4.
    Stage1Config s1;
    const double contribution = s1.lambda_clst * 0.0 + s1.lambda_sep * (-5.0);
    CHECK(contribution == doctest::Approx(-0.4).epsilon(1e-12));
}

TEST_CASE("patch loss gradients agree with finite differences") {
    const auto results = run_loss_gradchecks(17, 8);
    REQUIRE(!results.empty());
    const auto& patch = results.front();
    CHECK(patch.loss_name == "patch");
    CHECK(patch.instances == 8);
    CHECK(patch.pass);
    CHECK(patch.max_rel_err < 1e-5);
}

TEST_CASE("stage-1 training sets provenance, freezes the classifier and converges on easy data") {
    CohortConfig cc = tiny_cohort_config(19);
    cc.noise_sigma = 0.02;
    cc.archetypes_per_grade = 1;
    const Cohort cohort = generate_cohort(cc);

    ModelConfig mc = tiny_model_config();
    mc.protos_per_class = 3;
    ModelState model = init_model(mc, 19);
    Stage1Config s1;
    s1.epochs = 12;
    s1.phase1_epochs = 6;
    s1.phase3_epochs = 3;
    s1.batch_size = 16;

    const TrainReport rep = train_stage1(model, cohort.pd, s1, 19);
    CHECK(rep.stage == 1);
    CHECK(model.stage == 1);
    CHECK(!rep.aborted);
    CHECK(rep.fc_frozen_ok);       // classifier untouched during phase 1
    CHECK(rep.final_accuracy > 0.9);
    for (const PushProvenance& p : model.provenance) {
        CHECK(p.patch_id >= 0);
        CHECK(p.row >= 0);
        CHECK(p.col >= 0);
    }
    REQUIRE(!rep.stage1_rows.empty());
    for (const auto& row : rep.stage1_rows) {
        CHECK((row.phase == "joint" || row.phase == "push" || row.phase == "classifier"));
    }

    // After the final push, the provenance patch of every prototype has a cell
    // exactly on the prototype, so its cluster term vanishes.
    const PrototypeBankView bank = bank_view(model);
    for (int g = 0; g < bank.count(); ++g) {
        const auto& prov = model.provenance[static_cast<std::size_t>(g)];
        const PdEntry* src = nullptr;
        for (const PdEntry& e : cohort.pd) {
            if (e.id == prov.patch_id) src = &e;
        }
        REQUIRE(src != nullptr);
        CHECK(src->patch.grade == bank.class_label(g));
        const LatentGrid lg = encode(mc.encoder(), model.encoder_params(), src->patch);
        const ClusterSeparation cs = cluster_separation(lg, bank.class_label(g), bank);
        CHECK(cs.clst <= 1e-18);
    }
}

TEST_CASE("stage-1 training is deterministic in the seed") {
    const Cohort cohort = generate_cohort(tiny_cohort_config(23));
    Stage1Config s1;
    s1.epochs = 4;
    s1.phase1_epochs = 2;
    s1.phase3_epochs = 1;
    s1.batch_size = 16;

    ModelState a = init_model(tiny_model_config(), 23);
    ModelState b = init_model(tiny_model_config(), 23);
    train_stage1(a, cohort.pd, s1, 23);
    train_stage1(b, cohort.pd, s1, 23);
    CHECK(a.params.values == b.params.values);
    CHECK(a.provenance == b.provenance);

    ModelState c = init_model(tiny_model_config(), 23);
    train_stage1(c, cohort.pd, s1, 24);  // different shuffle stream
    CHECK(a.params.values != c.params.values);
}

TEST_CASE("stage-1 config validation") {
    Stage1Config bad;
    bad.lambda_clst = -0.1;
    CHECK_THROWS_AS(bad.validate(), config_error);
    bad = Stage1Config{};
    bad.epochs = 0;
    CHECK_THROWS_AS(bad.validate(), config_error);
    bad = Stage1Config{};
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), config_error);
    CHECK_NOTHROW(Stage1Config{}.validate());
}
