#include "adapt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "adapt/model.hpp"
#include "adapt/rng.hpp"
#include "adapt/stage1.hpp"
#include "adapt/stage2.hpp"
#include "adapt/stage3.hpp"

namespace adapt {

namespace {

// Margins below which a central difference of step h could flip a discrete
// selection; such draws are rejected.
constexpr double kMinSelectionGap = 1e-3;
constexpr double kMinDistance = 1e-2;
constexpr int kMaxRedrawFactor = 400;

// Small shapes keep each finite-difference sweep cheap without removing any
// code path: two prototypes per class, 2x2 grids, a handful of patches.
ModelConfig check_config() {
    ModelConfig mc;
    mc.grid_rows = 2;
    mc.grid_cols = 2;
    mc.d_raw = 6;
    mc.d_hidden = 8;
    mc.d_latent = 5;
    mc.protos_per_class = 2;
    return mc;
}

ModelState random_model(const ModelConfig& mc, SplitRng& rng, double proto_scale,
                        double fc_scale, double attn_scale) {
    ModelState model = init_model(mc, rng.next());
    for (double& v : model.params.segment(kSegPrototypes)) v = rng.normal() * proto_scale;
    for (double& v : model.params.segment(kSegFc)) v = rng.normal() * fc_scale;
    if (attn_scale > 0.0) {
        for (double& v : model.params.segment(kSegAttention)) v = rng.normal() * attn_scale;
    }
    return model;
}

RawPatch random_patch(const ModelConfig& mc, SplitRng& rng) {
    RawPatch p;
    p.rows = mc.grid_rows;
    p.cols = mc.grid_cols;
    p.depth = mc.d_raw;
    p.cells.resize(static_cast<std::size_t>(p.cell_count()) * mc.d_raw);
    for (double& v : p.cells) v = rng.normal();
    p.grade = kClassLabels[static_cast<std::size_t>(rng.uniform_int(0, kNumClasses - 1))];
    p.cell_grades.assign(static_cast<std::size_t>(p.cell_count()), p.grade);
    return p;
}

bool tie_free(const TieReport& tie) {
    return tie.selection_margin > kMinSelectionGap && tie.min_distance > kMinDistance &&
           !tie.clamped;
}

LossCheckResult check_patch_loss(std::uint64_t seed, int instances, double h, double tol) {
    LossCheckResult result;
    result.loss_name = "patch";
    const ModelConfig mc = check_config();
    const Stage1Config cfg;
    SplitRng rng = SplitRng::stream(seed, "gradcheck-patch");
    int attempts = 0;
    while (result.instances < instances) {
        if (++attempts > kMaxRedrawFactor * instances) {
            throw numeric_error("gradcheck: cannot draw a tie-free patch instance");
        }
        ModelState model = random_model(mc, rng, 0.8, 0.7, 0.0);
        const RawPatch patch = random_patch(mc, rng);
        ParamVector grads = ParamVector::zeros(model.params.layout);
        TieReport tie;
        patch_loss_and_grad(model, patch, patch.grade, cfg, 1.0, &grads, &tie);
        if (!tie_free(tie)) {
            ++result.redraws;
            continue;
        }
        auto loss = [&](const ParamVector& p) {
            ModelState probe = model;
            probe.params = p;
            return patch_loss_and_grad(probe, patch, patch.grade, cfg, 1.0, nullptr, nullptr)
                .total;
        };
        const GradCheckReport rep = finite_diff_check(loss, model.params, grads, h, tol);
        result.max_rel_err = std::max(result.max_rel_err, rep.max_rel_err);
        ++result.instances;
    }
    result.pass = result.max_rel_err < tol;
    return result;
}

WsiBag random_bag(const ModelConfig& mc, SplitRng& rng, int n_patches) {
    WsiBag bag;
    bag.id = "check";
    for (int i = 0; i < n_patches; ++i) bag.patches.push_back(random_patch(mc, rng));
    for (auto& y : bag.target) y = static_cast<std::uint8_t>(rng.uniform_int(0, 1));
    return bag;
}

LossCheckResult check_bag_loss(std::uint64_t seed, int instances, double h, double tol) {
    LossCheckResult result;
    result.loss_name = "wsi";
    const ModelConfig mc = check_config();
    Stage2Config cfg;
    cfg.top_j = 2;
    SplitRng rng = SplitRng::stream(seed, "gradcheck-wsi");
    int attempts = 0;
    while (result.instances < instances) {
        if (++attempts > kMaxRedrawFactor * instances) {
            throw numeric_error("gradcheck: cannot draw a tie-free slide instance");
        }
        ModelState model = random_model(mc, rng, 0.8, 1.4, 0.0);
        std::vector<WsiBag> bags;
        bags.push_back(random_bag(mc, rng, 3));
        bags.push_back(random_bag(mc, rng, 3));
        // Flip the first bag's target against its own predictions so both
        // missed-grade and over-call event paths keep appearing.
        {
            const std::vector<BagView> probe = make_bag_views(bags);
            const BagForward fwd = forward_bag(model, probe[0], cfg.top_j, false);
            for (int s = 0; s < kNumGrades; ++s) {
                bags[0].target[static_cast<std::size_t>(s)] =
                    fwd.bag_probs[static_cast<std::size_t>(s)] > cfg.threshold ? 0 : 1;
            }
        }
        const std::vector<BagView> views = make_bag_views(bags);
        ParamVector grads = ParamVector::zeros(model.params.layout);
        TieReport tie;
        wsi_loss_and_grad(model, views, cfg, &grads, &tie);
        if (!tie_free(tie)) {
            ++result.redraws;
            continue;
        }
        auto loss = [&](const ParamVector& p) {
            ModelState probe = model;
            probe.params = p;
            return wsi_loss_and_grad(probe, views, cfg, nullptr, nullptr).total;
        };
        const GradCheckReport rep = finite_diff_check(loss, model.params, grads, h, tol);
        result.max_rel_err = std::max(result.max_rel_err, rep.max_rel_err);
        ++result.instances;
    }
    result.pass = result.max_rel_err < tol;
    return result;
}

LossCheckResult check_pruning_loss(std::uint64_t seed, int instances, double h, double tol) {
    LossCheckResult result;
    result.loss_name = "pruning";
    const ModelConfig mc = check_config();
    Stage3Config cfg;
    const int top_j = 2;
    const int k = mc.num_prototypes();
    SplitRng rng = SplitRng::stream(seed, "gradcheck-pruning");

    // Only the gate and classifier vary during pruning; the check walks a
    // reduced two-segment layout and holds the similarities fixed.
    const ParamLayout full = model_layout(mc);
    std::vector<Segment> reduced_segments;
    for (const Segment& s : full.segments()) {
        if (s.name == kSegFc || s.name == kSegAttention) reduced_segments.push_back(s);
    }
    std::size_t offset = 0;
    for (Segment& s : reduced_segments) {
        s.offset = offset;
        offset += s.size;
    }
    const ParamLayout reduced(reduced_segments);

    int attempts = 0;
    while (result.instances < instances) {
        if (++attempts > kMaxRedrawFactor * instances) {
            throw numeric_error("gradcheck: cannot draw a tie-free pruning instance");
        }
        ModelState model = random_model(mc, rng, 0.0, 0.9, 0.6);
        const int n_patches = 3;
        std::vector<std::vector<double>> ps(2);
        for (auto& mat : ps) {
            mat.resize(static_cast<std::size_t>(n_patches) * k);
            for (double& v : mat) v = rng.uniform(0.05, 4.0);
        }
        std::vector<std::array<std::uint8_t, 3>> targets(2);
        for (int s = 0; s < kNumGrades; ++s) {
            targets[0][static_cast<std::size_t>(s)] = static_cast<std::uint8_t>(rng.uniform_int(0, 1));
            targets[1][static_cast<std::size_t>(s)] = static_cast<std::uint8_t>(
                attempts % 3 == 0 ? rng.uniform_int(0, 1)
                                  : 1 - targets[0][static_cast<std::size_t>(s)]);
        }
        ParamVector grads = ParamVector::zeros(model.params.layout);
        TieReport tie;
        stage3_loss_and_grad(model, ps, targets, cfg, top_j, &grads, &tie);
        if (!tie_free(tie)) {
            ++result.redraws;
            continue;
        }

        ParamVector reduced_params = ParamVector::zeros(reduced);
        ParamVector reduced_grads = ParamVector::zeros(reduced);
        for (const Segment& s : reduced_segments) {
            const auto src = model.params.segment(s.name);
            std::copy(src.begin(), src.end(), reduced_params.segment(s.name).begin());
            const auto g = grads.segment(s.name);
            std::copy(g.begin(), g.end(), reduced_grads.segment(s.name).begin());
        }
        auto loss = [&](const ParamVector& p) {
            ModelState probe = model;
            for (const Segment& s : reduced_segments) {
                const auto src = p.segment(s.name);
                std::copy(src.begin(), src.end(), probe.params.segment(s.name).begin());
            }
            return stage3_loss_and_grad(probe, ps, targets, cfg, top_j, nullptr, nullptr).total;
        };
        const GradCheckReport rep = finite_diff_check(loss, reduced_params, reduced_grads, h, tol);
        result.max_rel_err = std::max(result.max_rel_err, rep.max_rel_err);
        ++result.instances;
    }
    result.pass = result.max_rel_err < tol;
    return result;
}

}  // namespace

std::vector<LossCheckResult> run_loss_gradchecks(std::uint64_t seed, int instances_per_loss,
                                                 double h, double tol) {
    if (instances_per_loss < 1) throw config_error("gradcheck: instances must be >= 1");
    std::vector<LossCheckResult> results;
    results.push_back(check_patch_loss(seed, instances_per_loss, h, tol));
    results.push_back(check_bag_loss(seed, instances_per_loss, h, tol));
    results.push_back(check_pruning_loss(seed, instances_per_loss, h, tol));
    return results;
}

}  // namespace adapt
