#include "adapt/stage2.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "adapt/metrics.hpp"
#include "adapt/rng.hpp"
#include "adapt/stage3.hpp"

namespace adapt {

namespace {
constexpr double kProbFloor = 1e-12;
constexpr double kProbMargin = 1e-9;
}  // namespace

void Stage2Config::validate() const {
    if (top_j < 1) throw config_error("stage2 top_j must be >= 1");
    if (!(lambda_align >= 0.0) || !(lambda_repel >= 0.0)) {
        throw config_error("stage2 loss weights must be >= 0");
    }
    if (epochs < 1) throw config_error("stage2 epochs must be >= 1");
    if (batch_size < 1) throw config_error("stage2 batch_size must be >= 1");
    if (!(initial_lr >= 0.0)) throw config_error("stage2 initial_lr must be >= 0");
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw config_error("stage2 threshold must lie in (0, 1)");
    }
}

std::vector<int> topj_indices(std::span<const double> values, int j) {
    if (j < 1) throw std::domain_error("topj_indices: j must be >= 1");
    std::vector<int> idx(values.size());
    std::iota(idx.begin(), idx.end(), 0);
    const int take = std::min<int>(j, static_cast<int>(values.size()));
    std::partial_sort(idx.begin(), idx.begin() + take, idx.end(), [&](int a, int b) {
        const double va = values[static_cast<std::size_t>(a)];
        const double vb = values[static_cast<std::size_t>(b)];
        if (va != vb) return va > vb;
        return a < b;
    });
    idx.resize(static_cast<std::size_t>(take));
    return idx;
}

double aggregate_topj(std::span<const double> values, int j) {
    if (values.empty()) throw std::domain_error("aggregate_topj: empty value set");
    const std::vector<int> idx = topj_indices(values, j);
    double acc = 0.0;
    for (int i : idx) acc += values[static_cast<std::size_t>(i)];
    return acc / static_cast<double>(idx.size());
}

namespace {

// Everything the backward pass needs about one patch of a bag.
struct PatchState {
    LatentGrid grid;
    std::vector<double> hidden;
    PatchForward fwd;
    AttentionForward attn;
};

BagForward forward_bag_impl(const ModelState& model, const BagView& bag, int top_j,
                            bool use_attention, std::vector<PatchState>* keep) {
    const ModelConfig& mc = model.config;
    if (bag.num_patches() < 1) throw std::domain_error("forward_bag: bag without patches");
    if (bag.patch_rows() != mc.grid_rows || bag.patch_cols() != mc.grid_cols) {
        throw layout_error("forward_bag: patch dimensions disagree with the model config");
    }
    const int l = bag.num_patches();
    const int k = mc.num_prototypes();
    const EncoderConfig enc = mc.encoder();
    const PrototypeBankView bank = bank_view(model);

    BagForward out;
    out.num_patches = l;
    out.patch_probs.resize(static_cast<std::size_t>(l) * 4);
    out.min_distance.resize(static_cast<std::size_t>(l) * k);
    out.argmin_cell.resize(static_cast<std::size_t>(l) * k);
    out.similarities.resize(static_cast<std::size_t>(l) * k);
    if (use_attention) out.attention.resize(static_cast<std::size_t>(l) * k);
    if (keep) keep->resize(static_cast<std::size_t>(l));

    const int cells = mc.grid_rows * mc.grid_cols;
    for (int i = 0; i < l; ++i) {
        LatentGrid grid;
        grid.rows = mc.grid_rows;
        grid.cols = mc.grid_cols;
        grid.depth = mc.d_latent;
        grid.values.resize(static_cast<std::size_t>(cells) * mc.d_latent);
        std::vector<double> hidden;
        if (keep) hidden.resize(static_cast<std::size_t>(cells) * enc.d_hidden);
        encode_cells(enc, model.encoder_params(), bag.patch_cells(i), cells, grid.values, hidden);

        AttentionForward attn;
        PatchForward fwd;
        if (use_attention) {
            fwd = forward_patch(grid, bank, model.fc(), {});
            attention_forward(mc, model.attention_params(), fwd.similarities, attn);
            // Reclassify on the gated similarities.
            std::array<double, 4> logits{};
            for (int c = 0; c < kNumClasses; ++c) {
                double acc = 0.0;
                for (int g = 0; g < k; ++g) {
                    acc += model.fc()[static_cast<std::size_t>(c) * k + g] *
                           attn.weighted[static_cast<std::size_t>(g)];
                }
                logits[static_cast<std::size_t>(c)] = acc;
            }
            fwd.logits = logits;
            softmax4(logits, fwd.probs);
            std::copy(attn.attn.begin(), attn.attn.end(),
                      out.attention.begin() + static_cast<std::ptrdiff_t>(i) * k);
        } else {
            fwd = forward_patch(grid, bank, model.fc(), {});
        }

        for (int c = 0; c < kNumClasses; ++c) {
            out.patch_probs[static_cast<std::size_t>(i) * 4 + static_cast<std::size_t>(c)] =
                fwd.probs[static_cast<std::size_t>(c)];
        }
        std::copy(fwd.min_distance.begin(), fwd.min_distance.end(),
                  out.min_distance.begin() + static_cast<std::ptrdiff_t>(i) * k);
        std::copy(fwd.argmin_cell.begin(), fwd.argmin_cell.end(),
                  out.argmin_cell.begin() + static_cast<std::ptrdiff_t>(i) * k);
        std::copy(fwd.similarities.begin(), fwd.similarities.end(),
                  out.similarities.begin() + static_cast<std::ptrdiff_t>(i) * k);
        if (keep) {
            PatchState& st = (*keep)[static_cast<std::size_t>(i)];
            st.grid = std::move(grid);
            st.hidden = std::move(hidden);
            st.fwd = std::move(fwd);
            st.attn = std::move(attn);
        }
    }

    for (int s = 0; s < kNumGrades; ++s) {
        const int ci = s + 1;  // grade slots map onto classes {3,4,5}
        std::vector<double> probs(static_cast<std::size_t>(l));
        for (int i = 0; i < l; ++i) {
            probs[static_cast<std::size_t>(i)] = out.patch_prob(i, ci);
        }
        out.topj[static_cast<std::size_t>(s)] = topj_indices(probs, top_j);
        double acc = 0.0;
        for (int i : out.topj[static_cast<std::size_t>(s)]) {
            acc += probs[static_cast<std::size_t>(i)];
        }
        out.bag_probs[static_cast<std::size_t>(s)] =
            acc / static_cast<double>(out.topj[static_cast<std::size_t>(s)].size());
    }
    return out;
}

struct FnEvent {
    int bag = -1, slot = -1;
    int istar = -1;   // most confident patch for the missed grade
    int proto = -1;   // nearest same-grade prototype (global index)
    double dist = 0.0;
};

struct FpEvent {
    int bag = -1, slot = -1;
    std::vector<int> offenders;  // patches whose grade probability clears the threshold
    std::vector<int> protos;     // nearest same-grade prototype per offender
    double mean_dist = 0.0;
};

struct EventSets {
    std::vector<FnEvent> fn;
    std::vector<FpEvent> fp;
    long empty_fp = 0;
};

// Nearest prototype of one class to patch i, from the per-prototype min
// distances. Reports the selection gap when a tie report is attached.
std::pair<int, double> nearest_class_proto(const BagForward& fwd, int patch, int ci, int per_class,
                                           int k, TieReport* tie) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    double second = best_d;
    for (int g = ci * per_class; g < (ci + 1) * per_class; ++g) {
        const double d = fwd.min_distance[static_cast<std::size_t>(patch) * k + g];
        if (d < best_d) {
            second = best_d;
            best_d = d;
            best = g;
        } else {
            second = std::min(second, d);
        }
    }
    if (tie && std::isfinite(second)) tie->observe_gap(second - best_d);
    return {best, best_d};
}

EventSets find_events(std::span<const BagForward> forwards,
                      std::span<const std::array<std::uint8_t, 3>> targets, int per_class,
                      double threshold, TieReport* tie) {
    EventSets ev;
    for (int n = 0; n < static_cast<int>(forwards.size()); ++n) {
        const BagForward& fwd = forwards[static_cast<std::size_t>(n)];
        const int k = kNumClasses * per_class;
        for (int s = 0; s < kNumGrades; ++s) {
            const double b = fwd.bag_probs[static_cast<std::size_t>(s)];
            const bool y = targets[static_cast<std::size_t>(n)][static_cast<std::size_t>(s)] != 0;
            if (tie) tie->observe_gap(std::fabs(b - threshold));
            const int ci = s + 1;
            if (y && b < threshold) {  // strict on both sides: b == threshold is neither event
                FnEvent e;
                e.bag = n;
                e.slot = s;
                double best_p = -1.0, second_p = -1.0;
                for (int i = 0; i < fwd.num_patches; ++i) {
                    const double p = fwd.patch_prob(i, ci);
                    if (p > best_p) {
                        second_p = best_p;
                        best_p = p;
                        e.istar = i;
                    } else {
                        second_p = std::max(second_p, p);
                    }
                }
                if (tie && second_p >= 0.0) tie->observe_gap(best_p - second_p);
                const auto [proto, dist] = nearest_class_proto(fwd, e.istar, ci, per_class, k, tie);
                e.proto = proto;
                e.dist = dist;
                ev.fn.push_back(std::move(e));
            } else if (!y && b > threshold) {
                FpEvent e;
                e.bag = n;
                e.slot = s;
                double acc = 0.0;
                for (int i = 0; i < fwd.num_patches; ++i) {
                    const double p = fwd.patch_prob(i, ci);
                    if (tie) tie->observe_gap(std::fabs(p - threshold));
                    if (p > threshold) {
                        const auto [proto, dist] =
                            nearest_class_proto(fwd, i, ci, per_class, k, tie);
                        e.offenders.push_back(i);
                        e.protos.push_back(proto);
                        acc += dist;
                    }
                }
                if (e.offenders.empty()) {
                    ++ev.empty_fp;
                } else {
                    e.mean_dist = acc / static_cast<double>(e.offenders.size());
                }
                ev.fp.push_back(std::move(e));
            }
        }
    }
    return ev;
}

double bce_mean(std::span<const BagForward> forwards,
                std::span<const std::array<std::uint8_t, 3>> targets, TieReport* tie) {
    double acc = 0.0;
    for (std::size_t n = 0; n < forwards.size(); ++n) {
        for (int s = 0; s < kNumGrades; ++s) {
            const double b = forwards[n].bag_probs[static_cast<std::size_t>(s)];
            const bool y = targets[n][static_cast<std::size_t>(s)] != 0;
            if (tie && (b < kProbMargin || 1.0 - b < kProbMargin)) tie->clamped = true;
            acc -= y ? std::log(std::max(b, kProbFloor))
                     : std::log(std::max(1.0 - b, kProbFloor));
        }
    }
    return acc / (3.0 * static_cast<double>(forwards.size()));
}

}  // namespace

BagForward forward_bag(const ModelState& model, const BagView& bag, int top_j,
                       bool use_attention) {
    return forward_bag_impl(model, bag, top_j, use_attention, nullptr);
}

double alignment_loss(std::span<const BagForward> forwards,
                      std::span<const std::array<std::uint8_t, 3>> targets, int per_class,
                      double threshold) {
    const EventSets ev = find_events(forwards, targets, per_class, threshold, nullptr);
    if (ev.fn.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& e : ev.fn) acc += e.dist;
    return acc / static_cast<double>(ev.fn.size());
}

double repulsion_loss(std::span<const BagForward> forwards,
                      std::span<const std::array<std::uint8_t, 3>> targets, int per_class,
                      double threshold, long* empty_events) {
    const EventSets ev = find_events(forwards, targets, per_class, threshold, nullptr);
    if (empty_events) *empty_events += ev.empty_fp;
    if (ev.fp.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& e : ev.fp) acc += e.mean_dist;
    return -acc / static_cast<double>(ev.fp.size());
}

WsiLossTerms wsi_loss(std::span<const BagForward> forwards,
                      std::span<const std::array<std::uint8_t, 3>> targets,
                      const Stage2Config& cfg) {
    if (forwards.empty()) throw std::domain_error("wsi_loss: empty batch");
    if (forwards.size() != targets.size()) throw layout_error("wsi_loss: target count mismatch");
    // K is recoverable from any per-patch row; the per-class count is K / 4.
    const int k = static_cast<int>(forwards.front().similarities.size() /
                                   static_cast<std::size_t>(forwards.front().num_patches));
    const EventSets ev = find_events(forwards, targets, k / kNumClasses, cfg.threshold, nullptr);

    WsiLossTerms t;
    t.bce = bce_mean(forwards, targets, nullptr);
    t.n_fn = static_cast<int>(ev.fn.size());
    t.n_fp = static_cast<int>(ev.fp.size());
    t.empty_fp = ev.empty_fp;
    if (!ev.fn.empty()) {
        for (const auto& e : ev.fn) t.align += e.dist;
        t.align /= static_cast<double>(ev.fn.size());
    }
    if (!ev.fp.empty()) {
        for (const auto& e : ev.fp) t.repel += e.mean_dist;
        t.repel = -t.repel / static_cast<double>(ev.fp.size());
    }
    t.total = t.bce + cfg.lambda_align * t.align + cfg.lambda_repel * t.repel;
    return t;
}

WsiLossTerms wsi_loss_and_grad(const ModelState& model, std::span<const BagView> batch,
                               const Stage2Config& cfg, ParamVector* grads, TieReport* tie) {
    if (batch.empty()) throw std::domain_error("wsi_loss_and_grad: empty batch");
    const ModelConfig& mc = model.config;
    const int k = mc.num_prototypes();
    const int dl = mc.d_latent;
    const int n = static_cast<int>(batch.size());

    std::vector<std::vector<PatchState>> states(static_cast<std::size_t>(n));
    std::vector<BagForward> forwards;
    forwards.reserve(batch.size());
    std::vector<std::array<std::uint8_t, 3>> targets;
    targets.reserve(batch.size());
    for (int b = 0; b < n; ++b) {
        forwards.push_back(forward_bag_impl(model, batch[static_cast<std::size_t>(b)], cfg.top_j,
                                            false,
                                            grads ? &states[static_cast<std::size_t>(b)] : nullptr));
        targets.push_back(batch[static_cast<std::size_t>(b)].target());
    }

    if (tie) {
        // Rectifier, argmin-cell, top-j and min-distance margins per patch.
        for (int b = 0; b < n; ++b) {
            const BagForward& fwd = forwards[static_cast<std::size_t>(b)];
            for (const PatchState& st : states[static_cast<std::size_t>(b)]) {
                for (double u : st.hidden) tie->observe_gap(std::fabs(u));
                const int cells = st.grid.cell_count();
                for (int g = 0; g < k; ++g) {
                    const double* row = st.fwd.distances.data() + static_cast<std::size_t>(g) * cells;
                    const int best = st.fwd.argmin_cell[static_cast<std::size_t>(g)];
                    double second = std::numeric_limits<double>::infinity();
                    for (int r = 0; r < cells; ++r) {
                        if (r != best) second = std::min(second, row[r]);
                    }
                    if (std::isfinite(second)) tie->observe_gap(second - row[best]);
                    tie->observe_distance(st.fwd.min_distance[static_cast<std::size_t>(g)]);
                }
            }
            for (int s = 0; s < kNumGrades; ++s) {
                const auto& sel = fwd.topj[static_cast<std::size_t>(s)];
                if (static_cast<int>(sel.size()) < fwd.num_patches) {
                    const int ci = s + 1;
                    double boundary = fwd.patch_prob(sel.back(), ci);
                    double runner_up = -1.0;
                    for (int i = 0; i < fwd.num_patches; ++i) {
                        if (std::find(sel.begin(), sel.end(), i) == sel.end()) {
                            runner_up = std::max(runner_up, fwd.patch_prob(i, ci));
                        }
                    }
                    if (runner_up >= 0.0) tie->observe_gap(boundary - runner_up);
                }
            }
        }
    }

    const EventSets ev =
        find_events(forwards, targets, mc.protos_per_class, cfg.threshold, tie);

    WsiLossTerms t;
    t.bce = bce_mean(forwards, targets, tie);
    t.n_fn = static_cast<int>(ev.fn.size());
    t.n_fp = static_cast<int>(ev.fp.size());
    t.empty_fp = ev.empty_fp;
    if (!ev.fn.empty()) {
        for (const auto& e : ev.fn) t.align += e.dist;
        t.align /= static_cast<double>(ev.fn.size());
    }
    if (!ev.fp.empty()) {
        for (const auto& e : ev.fp) t.repel += e.mean_dist;
        t.repel = -t.repel / static_cast<double>(ev.fp.size());
    }
    t.total = t.bce + cfg.lambda_align * t.align + cfg.lambda_repel * t.repel;
    if (grads == nullptr) return t;

    // dp: per-bag l x 4 probability gradients from the BCE path.
    std::vector<std::vector<double>> dp(static_cast<std::size_t>(n));
    for (int b = 0; b < n; ++b) {
        dp[static_cast<std::size_t>(b)].assign(
            static_cast<std::size_t>(forwards[static_cast<std::size_t>(b)].num_patches) * 4, 0.0);
    }
    const double bce_w = 1.0 / (3.0 * static_cast<double>(n));
    for (int b = 0; b < n; ++b) {
        const BagForward& fwd = forwards[static_cast<std::size_t>(b)];
        for (int s = 0; s < kNumGrades; ++s) {
            const double bag_p = fwd.bag_probs[static_cast<std::size_t>(s)];
            const bool y = targets[static_cast<std::size_t>(b)][static_cast<std::size_t>(s)] != 0;
            const double dB = bce_w * (bag_p - (y ? 1.0 : 0.0)) / (bag_p * (1.0 - bag_p));
            const auto& sel = fwd.topj[static_cast<std::size_t>(s)];
            const double share = dB / static_cast<double>(sel.size());
            for (int i : sel) {
                dp[static_cast<std::size_t>(b)][static_cast<std::size_t>(i) * 4 +
                                                static_cast<std::size_t>(s + 1)] += share;
            }
        }
    }

    // dmd: per-bag l x K min-distance gradients from the event losses.
    std::vector<std::vector<double>> dmd(static_cast<std::size_t>(n));
    for (int b = 0; b < n; ++b) {
        dmd[static_cast<std::size_t>(b)].assign(
            static_cast<std::size_t>(forwards[static_cast<std::size_t>(b)].num_patches) * k, 0.0);
    }
    if (!ev.fn.empty()) {
        const double w = cfg.lambda_align / static_cast<double>(ev.fn.size());
        for (const auto& e : ev.fn) {
            dmd[static_cast<std::size_t>(e.bag)][static_cast<std::size_t>(e.istar) * k +
                                                 static_cast<std::size_t>(e.proto)] += w;
        }
    }
    if (!ev.fp.empty()) {
        for (const auto& e : ev.fp) {
            if (e.offenders.empty()) continue;
            const double w = -cfg.lambda_repel /
                             (static_cast<double>(ev.fp.size()) *
                              static_cast<double>(e.offenders.size()));
            for (std::size_t o = 0; o < e.offenders.size(); ++o) {
                dmd[static_cast<std::size_t>(e.bag)]
                   [static_cast<std::size_t>(e.offenders[o]) * k +
                    static_cast<std::size_t>(e.protos[o])] += w;
            }
        }
    }

    const PrototypeBankView bank = bank_view(model);
    auto dfc = grads->segment(kSegFc);
    auto dprotos = grads->segment(kSegPrototypes);
    const auto fc = model.fc();
    const EncoderConfig enc = mc.encoder();

    for (int b = 0; b < n; ++b) {
        const BagForward& fwd = forwards[static_cast<std::size_t>(b)];
        auto& bag_states = states[static_cast<std::size_t>(b)];
        for (int i = 0; i < fwd.num_patches; ++i) {
            const PatchState& st = bag_states[static_cast<std::size_t>(i)];
            const double* dpi = dp[static_cast<std::size_t>(b)].data() + static_cast<std::size_t>(i) * 4;
            double* dmdi = dmd[static_cast<std::size_t>(b)].data() + static_cast<std::size_t>(i) * k;

            // Softmax backward: dlogit[a] = p[a] (dp[a] - sum_c dp[c] p[c]).
            bool any_dp = false;
            for (int c = 0; c < kNumClasses; ++c) any_dp |= dpi[c] != 0.0;
            if (any_dp) {
                double dot = 0.0;
                for (int c = 0; c < kNumClasses; ++c) {
                    dot += dpi[c] * st.fwd.probs[static_cast<std::size_t>(c)];
                }
                std::array<double, 4> dlogit{};
                for (int c = 0; c < kNumClasses; ++c) {
                    dlogit[static_cast<std::size_t>(c)] =
                        st.fwd.probs[static_cast<std::size_t>(c)] * (dpi[c] - dot);
                }
                for (int c = 0; c < kNumClasses; ++c) {
                    const double dl_c = dlogit[static_cast<std::size_t>(c)];
                    if (dl_c == 0.0) continue;
                    for (int g = 0; g < k; ++g) {
                        dfc[static_cast<std::size_t>(c) * k + g] +=
                            dl_c * st.fwd.similarities[static_cast<std::size_t>(g)];
                        dmdi[g] += dl_c * fc[static_cast<std::size_t>(c) * k + g] *
                                   similarity_slope(st.fwd.min_distance[static_cast<std::size_t>(g)]);
                    }
                }
            }

            bool any_dmd = false;
            for (int g = 0; g < k; ++g) any_dmd |= dmdi[g] != 0.0;
            if (!any_dmd) continue;
            std::vector<double> dlatent(st.grid.values.size(), 0.0);
            for (int g = 0; g < k; ++g) {
                const double coeff = dmdi[g];
                if (coeff == 0.0) continue;
                const int r = st.fwd.argmin_cell[static_cast<std::size_t>(g)];
                const double* e = st.grid.values.data() + static_cast<std::size_t>(r) * dl;
                const double* pr = bank.values.data() + static_cast<std::size_t>(g) * dl;
                double* de = dlatent.data() + static_cast<std::size_t>(r) * dl;
                double* dpr = dprotos.data() + static_cast<std::size_t>(g) * dl;
                for (int j = 0; j < dl; ++j) {
                    const double diff = 2.0 * coeff * (e[j] - pr[j]);
                    de[j] += diff;
                    dpr[j] -= diff;
                }
            }
            encode_backward(enc, model.encoder_params(), batch[static_cast<std::size_t>(b)].patch_cells(i),
                            st.grid.cell_count(), st.hidden, dlatent, grads->segment(kSegEncoder));
        }
    }
    return t;
}

namespace {

std::uint64_t segment_hash(const ParamVector& params, const char* name) {
    auto s = params.segment(name);
    return fnv1a64(s.data(), s.size() * sizeof(double));
}

}  // namespace

TrainReport train_stage2(ModelState& model, std::span<const WsiBag* const> train,
                         std::span<const WsiBag* const> val, const Stage2Config& cfg,
                         std::uint64_t root_seed) {
    cfg.validate();
    if (train.empty()) throw std::domain_error("train_stage2: empty training set");
    const std::vector<BagView> views = make_bag_views(train);
    const std::span<const WsiBag* const> eval_bags = val.empty() ? train : val;

    TrainReport report;
    report.stage = 2;
    if (val.empty()) report.warnings.push_back("stage2: no validation bags, selecting on train");

    SplitRng shuffle_rng = SplitRng::stream(root_seed, "shuffle-stage2");
    const long steps_per_epoch =
        (static_cast<long>(views.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const LrSchedule schedule{cfg.initial_lr > 0.0 ? cfg.initial_lr : 1.0,
                              std::max<long>(1, cfg.epochs * steps_per_epoch), 1e-6};
    long global_step = 0;
    AdamState adam = AdamState::init(model.params.values.size());
    ParamVector grads = ParamVector::zeros(model.params.layout);

    std::vector<int> order(views.size());
    std::iota(order.begin(), order.end(), 0);

    const EvalResult initial = evaluate(model, eval_bags, cfg.top_j, cfg.threshold);
    ParamVector best_params = model.params;
    report.best_val_f1 = initial.macro_f1;
    report.best_val_hamming = initial.hamming;
    report.best_epoch = -1;
    ParamVector last_good = model.params;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double sum_bce = 0, sum_align = 0, sum_repel = 0, sum_total = 0;
        bool diverged = false;
        for (long b = 0; b < steps_per_epoch; ++b) {
            const std::size_t begin = static_cast<std::size_t>(b) * cfg.batch_size;
            const std::size_t end = std::min(begin + cfg.batch_size, order.size());
            std::vector<BagView> batch;
            batch.reserve(end - begin);
            for (std::size_t i = begin; i < end; ++i) {
                batch.push_back(views[static_cast<std::size_t>(order[i])]);
            }
            grads.set_zero();
            const WsiLossTerms t = wsi_loss_and_grad(model, batch, cfg, &grads, nullptr);
            report.empty_fp_events += t.empty_fp;
            const double nb = static_cast<double>(batch.size());
            sum_bce += t.bce * nb;
            sum_align += t.align * nb;
            sum_repel += t.repel * nb;
            sum_total += t.total * nb;
            if (!std::isfinite(t.total)) {
                report.aborted = true;
                report.abort_reason = "non-finite bag loss at epoch " + std::to_string(epoch);
                diverged = true;
                break;
            }
            if (!cfg.update_prototypes) grads.fill_segment(kSegPrototypes, 0.0);
            grads.fill_segment(kSegAttention, 0.0);
            if (cfg.initial_lr > 0.0) {
                const double lr = cosine_lr(global_step, schedule);
                const std::uint64_t proto_before = segment_hash(model.params, kSegPrototypes);
                adam_step(model.params, grads, adam, lr);
                if (!cfg.update_prototypes) {
                    report.prototypes_frozen_ok &=
                        segment_hash(model.params, kSegPrototypes) == proto_before;
                }
            }
            ++global_step;
        }
        if (diverged) break;

        const double n = static_cast<double>(views.size());
        const EvalResult ev = evaluate(model, eval_bags, cfg.top_j, cfg.threshold);
        Stage2EpochRow row;
        row.epoch = epoch;
        row.bce = sum_bce / n;
        row.align = sum_align / n;
        row.repel = sum_repel / n;
        row.total = sum_total / n;
        row.val_f1 = ev.macro_f1;
        row.val_hamming = ev.hamming;
        report.stage2_rows.push_back(row);
        last_good = model.params;
        // Ties go to the later epoch: among equally scoring snapshots the most
        // recent one carries the most optimized auxiliary terms.
        const bool better = ev.macro_f1 > report.best_val_f1 ||
                            (ev.macro_f1 == report.best_val_f1 &&
                             ev.hamming <= report.best_val_hamming);
        if (better) {
            report.best_val_f1 = ev.macro_f1;
            report.best_val_hamming = ev.hamming;
            report.best_epoch = epoch;
            best_params = model.params;
        }
    }

    model.params = report.aborted ? last_good : best_params;
    model.stage = 2;
    return report;
}

}  // namespace adapt
