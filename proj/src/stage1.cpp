#include "adapt/stage1.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "adapt/rng.hpp"

namespace adapt {

namespace {
constexpr double kProbFloor = 1e-12;
constexpr double kProbMargin = 1e-9;  // tie-free draws keep CE off the clamp
}  // namespace

void Stage1Config::validate() const {
    if (!(lambda_clst >= 0.0) || !(lambda_sep >= 0.0)) {
        throw config_error("stage1 loss weights must be >= 0");
    }
    if (epochs < 1) throw config_error("stage1 epochs must be >= 1");
    if (batch_size < 1) throw config_error("stage1 batch_size must be >= 1");
    if (!(initial_lr >= 0.0)) throw config_error("stage1 initial_lr must be >= 0");
    if (phase1_epochs < 1) throw config_error("stage1 phase1_epochs must be >= 1");
    if (push_every < 1) throw config_error("stage1 push_every must be >= 1");
    if (phase3_epochs < 0) throw config_error("stage1 phase3_epochs must be >= 0");
    if (!(convergence_delta >= 0.0)) throw config_error("stage1 convergence_delta must be >= 0");
    if (!(val_fraction >= 0.0 && val_fraction <= 0.5)) {
        throw config_error("stage1 val_fraction must lie in [0, 0.5]");
    }
}

ClusterSeparation cluster_separation(const LatentGrid& grid, std::uint8_t label,
                                     const PrototypeBankView& bank) {
    if (bank.per_class < 1) throw config_error("cluster_separation: empty prototype classes");
    const int ci = class_index(label);
    const int cells = grid.cell_count();
    ClusterSeparation out;
    double best_same = std::numeric_limits<double>::infinity();
    double best_other = std::numeric_limits<double>::infinity();
    for (int g = 0; g < bank.count(); ++g) {
        const double* p = bank.values.data() + static_cast<std::size_t>(g) * bank.depth;
        for (int r = 0; r < cells; ++r) {
            const double* e = grid.values.data() + static_cast<std::size_t>(r) * bank.depth;
            double acc = 0.0;
            for (int j = 0; j < bank.depth; ++j) {
                const double diff = e[j] - p[j];
                acc += diff * diff;
            }
            if (bank.class_of(g) == ci) {
                if (acc < best_same) {
                    best_same = acc;
                    out.clst_proto = g;
                    out.clst_cell = r;
                }
            } else if (acc < best_other) {
                best_other = acc;
                out.sep_proto = g;
                out.sep_cell = r;
            }
        }
    }
    out.clst = best_same;
    out.sep = -best_other;
    return out;
}

PatchLossTerms patch_loss(const PatchForward& fwd, const LatentGrid& grid, std::uint8_t label,
                          const PrototypeBankView& bank, const Stage1Config& cfg) {
    PatchLossTerms t;
    const double p = fwd.probs[static_cast<std::size_t>(class_index(label))];
    t.ce_clamped = p < kProbFloor;
    t.ce = -std::log(std::max(p, kProbFloor));
    const ClusterSeparation cs = cluster_separation(grid, label, bank);
    t.clst = cs.clst;
    t.sep = cs.sep;
    t.total = t.ce + cfg.lambda_clst * t.clst + cfg.lambda_sep * t.sep;
    return t;
}

namespace {

// Selection data shared between value and gradient computation: per-prototype
// minima plus the class-restricted double minima.
struct PatchSelections {
    int clst_proto = -1;
    int sep_proto = -1;
};

// Min over same/other-class prototypes of the per-prototype min distances,
// with margins for every selection the gradient routes through.
PatchSelections select_extremes(const PatchForward& fwd, int ci, const PrototypeBankView& bank,
                                TieReport* tie) {
    PatchSelections sel;
    double best_same = std::numeric_limits<double>::infinity();
    double second_same = best_same, best_other = best_same, second_other = best_same;
    for (int g = 0; g < bank.count(); ++g) {
        const double md = fwd.min_distance[static_cast<std::size_t>(g)];
        if (bank.class_of(g) == ci) {
            if (md < best_same) {
                second_same = best_same;
                best_same = md;
                sel.clst_proto = g;
            } else {
                second_same = std::min(second_same, md);
            }
        } else {
            if (md < best_other) {
                second_other = best_other;
                best_other = md;
                sel.sep_proto = g;
            } else {
                second_other = std::min(second_other, md);
            }
        }
    }
    if (tie) {
        if (std::isfinite(second_same)) tie->observe_gap(second_same - best_same);
        if (std::isfinite(second_other)) tie->observe_gap(second_other - best_other);
    }
    return sel;
}

}  // namespace

PatchLossTerms patch_loss_and_grad(const ModelState& model, const RawPatch& patch,
                                   std::uint8_t label, const Stage1Config& cfg, double weight,
                                   ParamVector* grads, TieReport* tie) {
    const ModelConfig& mc = model.config;
    const EncoderConfig enc = mc.encoder();
    const int cells = patch.cell_count();
    const int k = mc.num_prototypes();
    const int dl = mc.d_latent;
    const int ci = class_index(label);

    LatentGrid grid;
    grid.rows = patch.rows;
    grid.cols = patch.cols;
    grid.depth = dl;
    grid.values.resize(static_cast<std::size_t>(cells) * dl);
    std::vector<double> hidden(static_cast<std::size_t>(cells) * enc.d_hidden);
    encode_cells(enc, model.encoder_params(), patch.cells, cells, grid.values, hidden);
    if (tie) {
        for (double u : hidden) tie->observe_gap(std::fabs(u));
    }

    const PrototypeBankView bank = bank_view(model);
    PatchForward fwd = forward_patch(grid, bank, model.fc());
    if (tie) {
        for (int g = 0; g < k; ++g) {
            const double* row = fwd.distances.data() + static_cast<std::size_t>(g) * cells;
            const int best = fwd.argmin_cell[static_cast<std::size_t>(g)];
            double second = std::numeric_limits<double>::infinity();
            for (int r = 0; r < cells; ++r) {
                if (r != best) second = std::min(second, row[r]);
            }
            if (std::isfinite(second)) tie->observe_gap(second - row[best]);
            tie->observe_distance(fwd.min_distance[static_cast<std::size_t>(g)]);
        }
        if (fwd.probs[static_cast<std::size_t>(ci)] < kProbMargin) tie->clamped = true;
    }

    const PatchSelections sel = select_extremes(fwd, ci, bank, tie);

    PatchLossTerms t;
    const double p = fwd.probs[static_cast<std::size_t>(ci)];
    t.ce_clamped = p < kProbFloor;
    t.ce = -std::log(std::max(p, kProbFloor));
    t.clst = fwd.min_distance[static_cast<std::size_t>(sel.clst_proto)];
    t.sep = -fwd.min_distance[static_cast<std::size_t>(sel.sep_proto)];
    t.total = t.ce + cfg.lambda_clst * t.clst + cfg.lambda_sep * t.sep;

    if (grads == nullptr) return t;

    // Softmax cross-entropy composite: dlogits = probs - onehot.
    std::array<double, 4> dlogits{};
    for (int c = 0; c < kNumClasses; ++c) {
        dlogits[static_cast<std::size_t>(c)] =
            weight * (fwd.probs[static_cast<std::size_t>(c)] - (c == ci ? 1.0 : 0.0));
    }

    auto dfc = grads->segment(kSegFc);
    const auto fc = model.fc();
    std::vector<double> dps(static_cast<std::size_t>(k), 0.0);
    for (int c = 0; c < kNumClasses; ++c) {
        const double dl_c = dlogits[static_cast<std::size_t>(c)];
        for (int g = 0; g < k; ++g) {
            dfc[static_cast<std::size_t>(c) * k + g] += dl_c * fwd.similarities[static_cast<std::size_t>(g)];
            dps[static_cast<std::size_t>(g)] += dl_c * fc[static_cast<std::size_t>(c) * k + g];
        }
    }

    // Per-prototype coefficients on the min distance. The cluster/separation
    // picks act at the same argmin cell as the similarity path.
    std::vector<double> dmd(static_cast<std::size_t>(k), 0.0);
    for (int g = 0; g < k; ++g) {
        dmd[static_cast<std::size_t>(g)] =
            dps[static_cast<std::size_t>(g)] *
            similarity_slope(fwd.min_distance[static_cast<std::size_t>(g)]);
    }
    dmd[static_cast<std::size_t>(sel.clst_proto)] += weight * cfg.lambda_clst;
    dmd[static_cast<std::size_t>(sel.sep_proto)] -= weight * cfg.lambda_sep;

    std::vector<double> dlatent(static_cast<std::size_t>(cells) * dl, 0.0);
    auto dprotos = grads->segment(kSegPrototypes);
    for (int g = 0; g < k; ++g) {
        const double coeff = dmd[static_cast<std::size_t>(g)];
        if (coeff == 0.0) continue;
        const int r = fwd.argmin_cell[static_cast<std::size_t>(g)];
        const double* e = grid.values.data() + static_cast<std::size_t>(r) * dl;
        const double* pr = bank.values.data() + static_cast<std::size_t>(g) * dl;
        double* de = dlatent.data() + static_cast<std::size_t>(r) * dl;
        double* dp = dprotos.data() + static_cast<std::size_t>(g) * dl;
        for (int j = 0; j < dl; ++j) {
            const double diff = 2.0 * coeff * (e[j] - pr[j]);
            de[j] += diff;
            dp[j] -= diff;
        }
    }

    encode_backward(enc, model.encoder_params(), patch.cells, cells, hidden, dlatent,
                    grads->segment(kSegEncoder));
    return t;
}

namespace {

double patch_accuracy(const ModelState& model, std::span<const PdEntry* const> entries) {
    if (entries.empty()) return 0.0;
    long hits = 0;
    const PrototypeBankView bank = bank_view(model);
    for (const PdEntry* e : entries) {
        const LatentGrid grid = encode(model.config.encoder(), model.encoder_params(), e->patch);
        const PatchForward fwd = forward_patch(grid, bank, model.fc());
        int best = 0;
        for (int c = 1; c < kNumClasses; ++c) {
            if (fwd.probs[static_cast<std::size_t>(c)] > fwd.probs[static_cast<std::size_t>(best)]) best = c;
        }
        if (best == class_index(e->patch.grade)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(entries.size());
}

// Seed prototypes on encoded cells of class-matched labeled patches so the
// first joint epochs start from plausible latent positions.
void seed_prototypes(ModelState& model, std::span<const PdEntry* const> train, SplitRng& rng) {
    const ModelConfig& cfg = model.config;
    const int per = cfg.protos_per_class;
    auto protos = model.prototype_values();
    for (int ci = 0; ci < kNumClasses; ++ci) {
        std::vector<const PdEntry*> pool;
        for (const PdEntry* e : train) {
            if (class_index(e->patch.grade) == ci) pool.push_back(e);
        }
        if (pool.empty()) {
            throw config_error("stage1: no labeled patches for class " +
                               std::to_string(int(kClassLabels[static_cast<std::size_t>(ci)])));
        }
        rng.shuffle(pool);
        for (int m = 0; m < per; ++m) {
            const PdEntry* e = pool[static_cast<std::size_t>(m) % pool.size()];
            const LatentGrid grid = encode(cfg.encoder(), model.encoder_params(), e->patch);
            const int r = rng.uniform_int(0, grid.rows - 1);
            const int c = rng.uniform_int(0, grid.cols - 1);
            const auto cell = grid.cell(r, c);
            std::copy(cell.begin(), cell.end(),
                      protos.begin() + (static_cast<std::ptrdiff_t>(ci) * per + m) * cfg.d_latent);
        }
    }
}

std::uint64_t segment_hash(const ParamVector& params, const char* name) {
    auto s = params.segment(name);
    return fnv1a64(s.data(), s.size() * sizeof(double));
}

}  // namespace

TrainReport train_stage1(ModelState& model, std::span<const PdEntry> pd, const Stage1Config& cfg,
                         std::uint64_t root_seed) {
    cfg.validate();
    if (pd.empty()) throw std::domain_error("train_stage1: empty labeled patch set");
    for (const auto& e : pd) {
        if (e.patch.rows != model.config.grid_rows || e.patch.cols != model.config.grid_cols ||
            e.patch.depth != model.config.d_raw) {
            throw layout_error("train_stage1: patch dimensions disagree with the model config");
        }
    }

    TrainReport report;
    report.stage = 1;

    // Held-out patches for the accuracy plateau check, split per class.
    SplitRng split_rng = SplitRng::stream(root_seed, "split-pd");
    std::vector<const PdEntry*> train, val;
    for (int ci = 0; ci < kNumClasses; ++ci) {
        std::vector<const PdEntry*> pool;
        for (const auto& e : pd) {
            if (class_index(e.patch.grade) == ci) pool.push_back(&e);
        }
        split_rng.shuffle(pool);
        const int n_val = static_cast<int>(std::floor(cfg.val_fraction * static_cast<double>(pool.size())));
        for (int i = 0; i < static_cast<int>(pool.size()); ++i) {
            (i < n_val ? val : train).push_back(pool[static_cast<std::size_t>(i)]);
        }
    }
    if (train.empty()) throw std::domain_error("train_stage1: validation split consumed all patches");
    auto held_out = [&]() -> std::span<const PdEntry* const> {
        return val.empty() ? std::span<const PdEntry* const>(train)
                           : std::span<const PdEntry* const>(val);
    };

    SplitRng init_rng = SplitRng::stream(root_seed, "init-prototypes");
    seed_prototypes(model, train, init_rng);

    SplitRng shuffle_rng = SplitRng::stream(root_seed, "shuffle-stage1");

    const long steps_per_epoch =
        (static_cast<long>(train.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const LrSchedule schedule{cfg.initial_lr > 0.0 ? cfg.initial_lr : 1.0,
                              std::max<long>(1, cfg.epochs * steps_per_epoch), 1e-6};
    long global_step = 0;

    ParamVector grads = ParamVector::zeros(model.params.layout);
    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    ParamVector last_good = model.params;
    std::vector<PushProvenance> last_good_prov = model.provenance;
    double prev_cycle_acc = -1.0;
    bool pushed_once = false;
    int epoch = 0;

    auto run_epoch = [&](bool joint, AdamState& adam) -> bool {
        shuffle_rng.shuffle(order);
        double sum_ce = 0, sum_clst = 0, sum_sep = 0, sum_total = 0;
        for (long b = 0; b < steps_per_epoch; ++b) {
            const std::size_t begin = static_cast<std::size_t>(b) * cfg.batch_size;
            const std::size_t end = std::min(begin + cfg.batch_size, order.size());
            const double w = 1.0 / static_cast<double>(end - begin);
            grads.set_zero();
            for (std::size_t i = begin; i < end; ++i) {
                const PdEntry* e = train[static_cast<std::size_t>(order[i])];
                const PatchLossTerms t =
                    patch_loss_and_grad(model, e->patch, e->patch.grade, cfg, w, &grads, nullptr);
                if (t.ce_clamped) ++report.ce_clamp_events;
                sum_ce += t.ce;
                sum_clst += t.clst;
                sum_sep += t.sep;
                sum_total += t.total;
                if (!std::isfinite(t.total)) {
                    report.aborted = true;
                    report.abort_reason = "non-finite patch loss at epoch " + std::to_string(epoch);
                    return false;
                }
            }
            if (joint) {
                grads.fill_segment(kSegFc, 0.0);
            } else {
                grads.fill_segment(kSegEncoder, 0.0);
                grads.fill_segment(kSegPrototypes, 0.0);
            }
            if (cfg.initial_lr > 0.0) {
                const double lr = cosine_lr(global_step, schedule);
                const std::uint64_t fc_before = segment_hash(model.params, kSegFc);
                const std::uint64_t enc_before = segment_hash(model.params, kSegEncoder);
                const std::uint64_t proto_before = segment_hash(model.params, kSegPrototypes);
                adam_step(model.params, grads, adam, lr);
                if (joint) {
                    report.fc_frozen_ok &= segment_hash(model.params, kSegFc) == fc_before;
                } else {
                    report.encoder_frozen_ok &= segment_hash(model.params, kSegEncoder) == enc_before;
                    report.prototypes_frozen_ok &=
                        segment_hash(model.params, kSegPrototypes) == proto_before;
                }
            }
            ++global_step;
        }
        const double n = static_cast<double>(train.size());
        Stage1EpochRow row;
        row.epoch = epoch;
        row.phase = joint ? "joint" : "classifier";
        row.ce = sum_ce / n;
        row.clst = sum_clst / n;
        row.sep = sum_sep / n;
        row.total = sum_total / n;
        row.accuracy = patch_accuracy(model, held_out());
        report.stage1_rows.push_back(row);
        last_good = model.params;
        last_good_prov = model.provenance;
        ++epoch;
        return true;
    };

    while (epoch < cfg.epochs && !report.aborted) {
        // Joint block under the fixed classifier pattern.
        fc_fixed(model.config.protos_per_class, model.fc());
        AdamState joint_adam = AdamState::init(model.params.values.size());
        const int block = std::min(cfg.phase1_epochs, cfg.epochs - epoch);
        for (int e = 0; e < block; ++e) {
            if (!run_epoch(true, joint_adam)) break;
            if ((e + 1) % cfg.push_every == 0 || e + 1 == block) {
                push_prototypes(model, train);
                pushed_once = true;
                Stage1EpochRow row;
                row.epoch = epoch - 1;
                row.phase = "push";
                row.accuracy = patch_accuracy(model, held_out());
                report.stage1_rows.push_back(row);
                last_good = model.params;
                last_good_prov = model.provenance;
            }
        }
        if (report.aborted) break;

        if (epoch < cfg.epochs && cfg.phase3_epochs > 0) {
            AdamState fc_adam = AdamState::init(model.params.values.size());
            const int block3 = std::min(cfg.phase3_epochs, cfg.epochs - epoch);
            for (int e = 0; e < block3; ++e) {
                if (!run_epoch(false, fc_adam)) break;
            }
            if (report.aborted) break;
        }

        const double acc = report.stage1_rows.empty() ? 0.0 : report.stage1_rows.back().accuracy;
        if (prev_cycle_acc >= 0.0 && acc - prev_cycle_acc < cfg.convergence_delta) {
            report.converged_early = true;
            report.stop_epoch = epoch;
            break;
        }
        prev_cycle_acc = acc;
    }

    if (report.aborted) {
        model.params = last_good;
        model.provenance = last_good_prov;
    }
    if (!pushed_once) push_prototypes(model, train);
    report.final_accuracy = patch_accuracy(model, held_out());
    model.stage = 1;
    return report;
}

}  // namespace adapt
