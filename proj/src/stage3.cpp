#include "adapt/stage3.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "adapt/metrics.hpp"
#include "adapt/protolayer.hpp"
#include "adapt/rng.hpp"

namespace adapt {

namespace {
constexpr double kProbFloor = 1e-12;
constexpr double kProbMargin = 1e-9;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }
}  // namespace

void Stage3Config::validate() const {
    if (!(alpha > beta && beta > 0.0)) {
        throw config_error("stage3 requires alpha > beta > 0");
    }
    if (epochs < 1) throw config_error("stage3 epochs must be >= 1");
    if (batch_size < 1) throw config_error("stage3 batch_size must be >= 1");
    if (!(initial_lr >= 0.0)) throw config_error("stage3 initial_lr must be >= 0");
}

void attention_forward(const ModelConfig& cfg, std::span<const double> attn_params,
                       std::span<const double> ps, AttentionForward& out) {
    const int k = cfg.num_prototypes();
    const int ha = cfg.attn_hidden_dim();
    if (static_cast<int>(ps.size()) != k) {
        throw layout_error("attention_forward: similarity vector length mismatch");
    }
    const double* a1 = attn_params.data();              // k x ha
    const double* b1 = a1 + static_cast<std::size_t>(k) * ha;
    const double* a2 = b1 + ha;                         // ha x k
    const double* b2 = a2 + static_cast<std::size_t>(ha) * k;

    out.hidden_preact.assign(static_cast<std::size_t>(ha), 0.0);
    out.hidden.resize(static_cast<std::size_t>(ha));
    out.attn.resize(static_cast<std::size_t>(k));
    out.weighted.resize(static_cast<std::size_t>(k));

    for (int h = 0; h < ha; ++h) {
        double acc = b1[h];
        for (int g = 0; g < k; ++g) {
            acc += ps[static_cast<std::size_t>(g)] * a1[static_cast<std::size_t>(g) * ha + h];
        }
        out.hidden_preact[static_cast<std::size_t>(h)] = acc;
        out.hidden[static_cast<std::size_t>(h)] = std::tanh(acc);
    }
    for (int g = 0; g < k; ++g) {
        double acc = b2[g];
        for (int h = 0; h < ha; ++h) {
            acc += out.hidden[static_cast<std::size_t>(h)] * a2[static_cast<std::size_t>(h) * k + g];
        }
        out.attn[static_cast<std::size_t>(g)] = sigmoid(acc);
        out.weighted[static_cast<std::size_t>(g)] =
            ps[static_cast<std::size_t>(g)] * out.attn[static_cast<std::size_t>(g)];
    }
}

std::vector<double> wsi_attention_vector(const BagForward& fwd, int slot, int per_class) {
    if (fwd.attention.empty()) {
        throw std::domain_error("wsi_attention_vector: forward lacks attention weights");
    }
    const int k = static_cast<int>(fwd.attention.size() /
                                   static_cast<std::size_t>(fwd.num_patches));
    const int ci = slot + 1;
    const auto& sel = fwd.topj[static_cast<std::size_t>(slot)];
    std::vector<double> mean(static_cast<std::size_t>(per_class), 0.0);
    for (int i : sel) {
        const double* row = fwd.attention.data() + static_cast<std::size_t>(i) * k;
        for (int m = 0; m < per_class; ++m) {
            mean[static_cast<std::size_t>(m)] += row[ci * per_class + m];
        }
    }
    for (double& v : mean) v /= static_cast<double>(sel.size());
    return mean;
}

ClassAttentionStats class_attention_stats(std::span<const BagForward> forwards,
                                          std::span<const std::array<std::uint8_t, 3>> targets,
                                          int slot, int per_class) {
    ClassAttentionStats st;
    st.mu_plus.assign(static_cast<std::size_t>(per_class), 0.0);
    st.mu_minus.assign(static_cast<std::size_t>(per_class), 0.0);
    for (std::size_t n = 0; n < forwards.size(); ++n) {
        const std::vector<double> abar = wsi_attention_vector(forwards[n], slot, per_class);
        const bool pos = targets[n][static_cast<std::size_t>(slot)] != 0;
        auto& mu = pos ? st.mu_plus : st.mu_minus;
        for (int m = 0; m < per_class; ++m) mu[static_cast<std::size_t>(m)] += abar[static_cast<std::size_t>(m)];
        (pos ? st.n_pos : st.n_neg) += 1;
    }
    if (st.n_pos > 0) {
        for (double& v : st.mu_plus) v /= static_cast<double>(st.n_pos);
    }
    if (st.n_neg > 0) {
        for (double& v : st.mu_minus) v /= static_cast<double>(st.n_neg);
    }
    st.w = forwards.empty() ? 0.0
                            : static_cast<double>(st.n_pos) / static_cast<double>(forwards.size());
    return st;
}

double classwise_loss(const ClassAttentionStats& stats, double alpha, double beta) {
    double dot = 0.0, l1 = 0.0;
    for (std::size_t m = 0; m < stats.mu_minus.size(); ++m) {
        dot += stats.mu_plus[m] * stats.mu_minus[m];
        l1 += std::fabs(stats.mu_minus[m]);
    }
    return stats.w * (alpha * dot + beta * l1);
}

double negative_activity_term(std::span<const double> mu_minus, double w, double beta) {
    double l1 = 0.0;
    for (double v : mu_minus) l1 += std::fabs(v);
    return w * beta * l1;
}

namespace {

// Per-bag forward state on precomputed similarities: attention, gated
// classifier probabilities and the top-j selections.
struct Bag3 {
    int l = 0;
    std::vector<AttentionForward> af;
    std::vector<double> probs;  // l x 4
    std::array<std::vector<int>, 3> topj{};
    std::array<double, 3> bag_probs{};

    double prob(int patch, int ci) const {
        return probs[static_cast<std::size_t>(patch) * 4 + static_cast<std::size_t>(ci)];
    }
};

Bag3 forward_bag3(const ModelConfig& mc, std::span<const double> attn_params,
                  std::span<const double> fc, const std::vector<double>& ps, int top_j) {
    const int k = mc.num_prototypes();
    if (ps.size() % static_cast<std::size_t>(k) != 0 || ps.empty()) {
        throw layout_error("stage3: similarity matrix shape mismatch");
    }
    Bag3 bag;
    bag.l = static_cast<int>(ps.size() / static_cast<std::size_t>(k));
    bag.af.resize(static_cast<std::size_t>(bag.l));
    bag.probs.resize(static_cast<std::size_t>(bag.l) * 4);
    for (int i = 0; i < bag.l; ++i) {
        const std::span<const double> row(ps.data() + static_cast<std::size_t>(i) * k,
                                          static_cast<std::size_t>(k));
        AttentionForward& af = bag.af[static_cast<std::size_t>(i)];
        attention_forward(mc, attn_params, row, af);
        std::array<double, 4> logits{};
        for (int c = 0; c < kNumClasses; ++c) {
            double acc = 0.0;
            for (int g = 0; g < k; ++g) {
                acc += fc[static_cast<std::size_t>(c) * k + g] * af.weighted[static_cast<std::size_t>(g)];
            }
            logits[static_cast<std::size_t>(c)] = acc;
        }
        std::array<double, 4> probs{};
        softmax4(logits, probs);
        for (int c = 0; c < kNumClasses; ++c) {
            bag.probs[static_cast<std::size_t>(i) * 4 + static_cast<std::size_t>(c)] =
                probs[static_cast<std::size_t>(c)];
        }
    }
    for (int s = 0; s < kNumGrades; ++s) {
        std::vector<double> col(static_cast<std::size_t>(bag.l));
        for (int i = 0; i < bag.l; ++i) col[static_cast<std::size_t>(i)] = bag.prob(i, s + 1);
        bag.topj[static_cast<std::size_t>(s)] = topj_indices(col, top_j);
        double acc = 0.0;
        for (int i : bag.topj[static_cast<std::size_t>(s)]) acc += col[static_cast<std::size_t>(i)];
        bag.bag_probs[static_cast<std::size_t>(s)] =
            acc / static_cast<double>(bag.topj[static_cast<std::size_t>(s)].size());
    }
    return bag;
}

// Minimal BagForward carrying what the attention statistics consume.
BagForward to_bag_forward(const Bag3& bag, int k) {
    BagForward fwd;
    fwd.num_patches = bag.l;
    fwd.patch_probs = bag.probs;
    fwd.bag_probs = bag.bag_probs;
    fwd.topj = bag.topj;
    fwd.attention.resize(static_cast<std::size_t>(bag.l) * k);
    for (int i = 0; i < bag.l; ++i) {
        std::copy(bag.af[static_cast<std::size_t>(i)].attn.begin(),
                  bag.af[static_cast<std::size_t>(i)].attn.end(),
                  fwd.attention.begin() + static_cast<std::ptrdiff_t>(i) * k);
    }
    return fwd;
}

}  // namespace

Stage3LossTerms stage3_loss_and_grad(const ModelState& model,
                                     std::span<const std::vector<double>> ps,
                                     std::span<const std::array<std::uint8_t, 3>> targets,
                                     const Stage3Config& cfg, int top_j, ParamVector* grads,
                                     TieReport* tie) {
    if (ps.empty()) throw std::domain_error("stage3_loss_and_grad: empty batch");
    if (ps.size() != targets.size()) throw layout_error("stage3_loss_and_grad: target count mismatch");
    const ModelConfig& mc = model.config;
    const int k = mc.num_prototypes();
    const int ha = mc.attn_hidden_dim();
    const int per = mc.protos_per_class;
    const int n = static_cast<int>(ps.size());

    std::vector<Bag3> bags;
    bags.reserve(ps.size());
    std::vector<BagForward> fwds;
    fwds.reserve(ps.size());
    for (const auto& mat : ps) {
        bags.push_back(forward_bag3(mc, model.attention_params(), model.fc(), mat, top_j));
        fwds.push_back(to_bag_forward(bags.back(), k));
    }

    Stage3LossTerms t;
    for (int b = 0; b < n; ++b) {
        for (int s = 0; s < kNumGrades; ++s) {
            const double bp = bags[static_cast<std::size_t>(b)].bag_probs[static_cast<std::size_t>(s)];
            const bool y = targets[static_cast<std::size_t>(b)][static_cast<std::size_t>(s)] != 0;
            if (tie && (bp < kProbMargin || 1.0 - bp < kProbMargin)) tie->clamped = true;
            t.bce -= y ? std::log(std::max(bp, kProbFloor))
                       : std::log(std::max(1.0 - bp, kProbFloor));
        }
    }
    t.bce /= 3.0 * static_cast<double>(n);

    std::array<ClassAttentionStats, 3> stats;
    for (int s = 0; s < kNumGrades; ++s) {
        stats[static_cast<std::size_t>(s)] = class_attention_stats(fwds, targets, s, per);
        t.grade_weight[static_cast<std::size_t>(s)] = stats[static_cast<std::size_t>(s)].w;
        if (cfg.use_attention_loss && stats[static_cast<std::size_t>(s)].n_pos > 0 &&
            stats[static_cast<std::size_t>(s)].n_neg > 0) {
            t.per_grade[static_cast<std::size_t>(s)] =
                classwise_loss(stats[static_cast<std::size_t>(s)], cfg.alpha, cfg.beta);
        }
        t.attn += t.per_grade[static_cast<std::size_t>(s)];
    }
    t.attn /= 3.0;
    t.total = t.bce + t.attn;

    if (tie) {
        for (int b = 0; b < n; ++b) {
            const Bag3& bag = bags[static_cast<std::size_t>(b)];
            for (int s = 0; s < kNumGrades; ++s) {
                const auto& sel = bag.topj[static_cast<std::size_t>(s)];
                if (static_cast<int>(sel.size()) < bag.l) {
                    double runner_up = -1.0;
                    for (int i = 0; i < bag.l; ++i) {
                        if (std::find(sel.begin(), sel.end(), i) == sel.end()) {
                            runner_up = std::max(runner_up, bag.prob(i, s + 1));
                        }
                    }
                    if (runner_up >= 0.0) {
                        tie->observe_gap(bag.prob(sel.back(), s + 1) - runner_up);
                    }
                }
            }
        }
    }

    if (grads == nullptr) return t;

    // Per-bag, per-patch cotangents on attention weights and gated similarities.
    std::vector<std::vector<double>> da(static_cast<std::size_t>(n));
    std::vector<std::vector<double>> dweighted(static_cast<std::size_t>(n));
    for (int b = 0; b < n; ++b) {
        da[static_cast<std::size_t>(b)].assign(
            static_cast<std::size_t>(bags[static_cast<std::size_t>(b)].l) * k, 0.0);
        dweighted[static_cast<std::size_t>(b)].assign(
            static_cast<std::size_t>(bags[static_cast<std::size_t>(b)].l) * k, 0.0);
    }

    // Classification path: BCE -> top-j mean -> softmax -> logits.
    auto dfc = grads->segment(kSegFc);
    const auto fc = model.fc();
    const double bce_w = 1.0 / (3.0 * static_cast<double>(n));
    for (int b = 0; b < n; ++b) {
        const Bag3& bag = bags[static_cast<std::size_t>(b)];
        std::vector<double> dp(static_cast<std::size_t>(bag.l) * 4, 0.0);
        for (int s = 0; s < kNumGrades; ++s) {
            const double bp = bag.bag_probs[static_cast<std::size_t>(s)];
            const bool y = targets[static_cast<std::size_t>(b)][static_cast<std::size_t>(s)] != 0;
            const double dB = bce_w * (bp - (y ? 1.0 : 0.0)) / (bp * (1.0 - bp));
            const auto& sel = bag.topj[static_cast<std::size_t>(s)];
            const double share = dB / static_cast<double>(sel.size());
            for (int i : sel) {
                dp[static_cast<std::size_t>(i) * 4 + static_cast<std::size_t>(s + 1)] += share;
            }
        }
        for (int i = 0; i < bag.l; ++i) {
            const double* dpi = dp.data() + static_cast<std::size_t>(i) * 4;
            bool any = false;
            for (int c = 0; c < kNumClasses; ++c) any |= dpi[c] != 0.0;
            if (!any) continue;
            const AttentionForward& af = bag.af[static_cast<std::size_t>(i)];
            double dot = 0.0;
            for (int c = 0; c < kNumClasses; ++c) dot += dpi[c] * bag.prob(i, c);
            for (int c = 0; c < kNumClasses; ++c) {
                const double dlogit = bag.prob(i, c) * (dpi[c] - dot);
                if (dlogit == 0.0) continue;
                for (int g = 0; g < k; ++g) {
                    dfc[static_cast<std::size_t>(c) * k + g] +=
                        dlogit * af.weighted[static_cast<std::size_t>(g)];
                    dweighted[static_cast<std::size_t>(b)][static_cast<std::size_t>(i) * k + g] +=
                        dlogit * fc[static_cast<std::size_t>(c) * k + g];
                }
            }
        }
    }

    // Attention-loss path: classwise terms -> group means -> slide means.
    if (cfg.use_attention_loss) {
        for (int s = 0; s < kNumGrades; ++s) {
            const ClassAttentionStats& st = stats[static_cast<std::size_t>(s)];
            if (st.n_pos == 0 || st.n_neg == 0) continue;
            const int ci = s + 1;
            std::vector<double> dmu_plus(static_cast<std::size_t>(per));
            std::vector<double> dmu_minus(static_cast<std::size_t>(per));
            for (int m = 0; m < per; ++m) {
                // d/dmu of w (alpha <mu+, mu-> + beta sum |mu-|) / 3; attention
                // weights are strictly positive so |mu-| differentiates to +1.
                dmu_plus[static_cast<std::size_t>(m)] =
                    st.w * cfg.alpha * st.mu_minus[static_cast<std::size_t>(m)] / 3.0;
                dmu_minus[static_cast<std::size_t>(m)] =
                    st.w * (cfg.alpha * st.mu_plus[static_cast<std::size_t>(m)] + cfg.beta) / 3.0;
            }
            for (int b = 0; b < n; ++b) {
                const bool pos = targets[static_cast<std::size_t>(b)][static_cast<std::size_t>(s)] != 0;
                const auto& dmu = pos ? dmu_plus : dmu_minus;
                const double group = static_cast<double>(pos ? st.n_pos : st.n_neg);
                const Bag3& bag = bags[static_cast<std::size_t>(b)];
                const auto& sel = bag.topj[static_cast<std::size_t>(s)];
                const double share = 1.0 / (group * static_cast<double>(sel.size()));
                for (int i : sel) {
                    for (int m = 0; m < per; ++m) {
                        da[static_cast<std::size_t>(b)][static_cast<std::size_t>(i) * k +
                                                        static_cast<std::size_t>(ci * per + m)] +=
                            dmu[static_cast<std::size_t>(m)] * share;
                    }
                }
            }
        }
    }

    // Through the gate: weighted = ps * a, a = sigmoid(z2), z2 = a2^T h + b2,
    // h = tanh(z1), z1 = a1^T ps + b1.
    auto dattn = grads->segment(kSegAttention);
    double* da1 = dattn.data();
    double* db1 = da1 + static_cast<std::size_t>(k) * ha;
    double* da2 = db1 + ha;
    double* db2 = da2 + static_cast<std::size_t>(ha) * k;
    const double* a2 = model.attention_params().data() + static_cast<std::size_t>(k) * ha + ha;

    std::vector<double> dz2(static_cast<std::size_t>(k));
    std::vector<double> dh(static_cast<std::size_t>(ha));
    for (int b = 0; b < n; ++b) {
        const Bag3& bag = bags[static_cast<std::size_t>(b)];
        const std::vector<double>& mat = ps[static_cast<std::size_t>(b)];
        for (int i = 0; i < bag.l; ++i) {
            const AttentionForward& af = bag.af[static_cast<std::size_t>(i)];
            const double* psi = mat.data() + static_cast<std::size_t>(i) * k;
            bool any = false;
            for (int g = 0; g < k; ++g) {
                const std::size_t idx = static_cast<std::size_t>(i) * k + g;
                const double dag = da[static_cast<std::size_t>(b)][idx] +
                                   dweighted[static_cast<std::size_t>(b)][idx] * psi[g];
                const double ag = af.attn[static_cast<std::size_t>(g)];
                dz2[static_cast<std::size_t>(g)] = dag * ag * (1.0 - ag);
                any |= dz2[static_cast<std::size_t>(g)] != 0.0;
            }
            if (!any) continue;
            for (int g = 0; g < k; ++g) {
                db2[g] += dz2[static_cast<std::size_t>(g)];
            }
            for (int h = 0; h < ha; ++h) {
                double acc = 0.0;
                const double hv = af.hidden[static_cast<std::size_t>(h)];
                for (int g = 0; g < k; ++g) {
                    da2[static_cast<std::size_t>(h) * k + g] += dz2[static_cast<std::size_t>(g)] * hv;
                    acc += dz2[static_cast<std::size_t>(g)] * a2[static_cast<std::size_t>(h) * k + g];
                }
                dh[static_cast<std::size_t>(h)] = acc * (1.0 - hv * hv);
            }
            for (int h = 0; h < ha; ++h) {
                const double dzh = dh[static_cast<std::size_t>(h)];
                if (dzh == 0.0) continue;
                db1[h] += dzh;
                for (int g = 0; g < k; ++g) {
                    da1[static_cast<std::size_t>(g) * ha + h] += dzh * psi[g];
                }
            }
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

TrainReport train_stage3(ModelState& model, std::span<const WsiBag* const> train,
                         std::span<const WsiBag* const> val, const Stage3Config& cfg, int top_j,
                         std::uint64_t root_seed) {
    cfg.validate();
    if (top_j < 1) throw config_error("stage3 top_j must be >= 1");
    if (train.empty()) throw std::domain_error("train_stage3: empty training set");
    const std::vector<BagView> views = make_bag_views(train);
    const std::span<const WsiBag* const> eval_bags = val.empty() ? train : val;

    TrainReport report;
    report.stage = 3;
    if (val.empty()) report.warnings.push_back("stage3: no validation bags, selecting on train");

    // Encoder and prototypes are constants here, so the similarity matrices
    // are computed once.
    std::vector<std::vector<double>> all_ps;
    all_ps.reserve(views.size());
    std::vector<std::array<std::uint8_t, 3>> all_targets;
    all_targets.reserve(views.size());
    for (const BagView& v : views) {
        all_ps.push_back(forward_bag(model, v, top_j, false).similarities);
        all_targets.push_back(v.target());
    }

    model.stage = 3;  // evaluation below runs through the attention head

    SplitRng shuffle_rng = SplitRng::stream(root_seed, "shuffle-stage3");
    const long steps_per_epoch =
        (static_cast<long>(views.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const LrSchedule schedule{cfg.initial_lr > 0.0 ? cfg.initial_lr : 1.0,
                              std::max<long>(1, cfg.epochs * steps_per_epoch), 1e-6};
    long global_step = 0;
    AdamState adam = AdamState::init(model.params.values.size());
    ParamVector grads = ParamVector::zeros(model.params.layout);

    std::vector<int> order(views.size());
    std::iota(order.begin(), order.end(), 0);

    const EvalResult initial = evaluate(model, eval_bags, top_j);
    ParamVector best_params = model.params;
    report.best_val_f1 = initial.macro_f1;
    report.best_val_hamming = initial.hamming;
    report.best_epoch = -1;
    ParamVector last_good = model.params;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double sum_bce = 0, sum_attn = 0, sum_total = 0;
        std::array<double, 3> sum_grade{};
        bool diverged = false;
        for (long b = 0; b < steps_per_epoch; ++b) {
            const std::size_t begin = static_cast<std::size_t>(b) * cfg.batch_size;
            const std::size_t end = std::min(begin + cfg.batch_size, order.size());
            std::vector<std::vector<double>> batch_ps;
            batch_ps.reserve(end - begin);
            std::vector<std::array<std::uint8_t, 3>> batch_targets;
            batch_targets.reserve(end - begin);
            for (std::size_t i = begin; i < end; ++i) {
                batch_ps.push_back(all_ps[static_cast<std::size_t>(order[i])]);
                batch_targets.push_back(all_targets[static_cast<std::size_t>(order[i])]);
            }
            grads.set_zero();
            const Stage3LossTerms t =
                stage3_loss_and_grad(model, batch_ps, batch_targets, cfg, top_j, &grads, nullptr);
            const double nb = static_cast<double>(batch_ps.size());
            sum_bce += t.bce * nb;
            sum_attn += t.attn * nb;
            sum_total += t.total * nb;
            for (int s = 0; s < kNumGrades; ++s) {
                sum_grade[static_cast<std::size_t>(s)] += t.per_grade[static_cast<std::size_t>(s)] * nb;
            }
            if (!std::isfinite(t.total)) {
                report.aborted = true;
                report.abort_reason = "non-finite pruning loss at epoch " + std::to_string(epoch);
                diverged = true;
                break;
            }
            if (cfg.initial_lr > 0.0) {
                const double lr = cosine_lr(global_step, schedule);
                const std::uint64_t enc_before = segment_hash(model.params, kSegEncoder);
                const std::uint64_t proto_before = segment_hash(model.params, kSegPrototypes);
                adam_step(model.params, grads, adam, lr);
                report.encoder_frozen_ok &= segment_hash(model.params, kSegEncoder) == enc_before;
                report.prototypes_frozen_ok &=
                    segment_hash(model.params, kSegPrototypes) == proto_before;
            }
            ++global_step;
        }
        if (diverged) break;

        const double n = static_cast<double>(views.size());
        const EvalResult ev = evaluate(model, eval_bags, top_j);
        Stage3EpochRow row;
        row.epoch = epoch;
        row.bce = sum_bce / n;
        row.attn = sum_attn / n;
        for (int s = 0; s < kNumGrades; ++s) {
            row.per_grade[static_cast<std::size_t>(s)] = sum_grade[static_cast<std::size_t>(s)] / n;
        }
        row.total = sum_total / n;
        row.val_f1 = ev.macro_f1;
        row.val_hamming = ev.hamming;
        report.stage3_rows.push_back(row);
        last_good = model.params;
        // Ties go to the later epoch: among equally scoring snapshots the most
        // recent one carries the most converged attention loss.
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
    model.stage = 3;
    return report;
}

ImportanceReport prototype_importance(const ModelState& model,
                                      std::span<const WsiBag* const> bags, int top_j) {
    const int per = model.config.protos_per_class;
    ImportanceReport report;
    std::array<std::vector<double>, 3> sums;
    std::array<long, 3> counts{};
    for (int s = 0; s < kNumGrades; ++s) {
        sums[static_cast<std::size_t>(s)].assign(static_cast<std::size_t>(per), 0.0);
    }
    for (const WsiBag* bag : bags) {
        const BagView view{bag};
        const BagForward fwd = forward_bag(model, view, top_j, true);
        for (int s = 0; s < kNumGrades; ++s) {
            if (bag->target[static_cast<std::size_t>(s)] == 0) continue;
            const std::vector<double> abar = wsi_attention_vector(fwd, s, per);
            for (int m = 0; m < per; ++m) {
                sums[static_cast<std::size_t>(s)][static_cast<std::size_t>(m)] +=
                    abar[static_cast<std::size_t>(m)];
            }
            ++counts[static_cast<std::size_t>(s)];
        }
    }
    for (int s = 0; s < kNumGrades; ++s) {
        if (counts[static_cast<std::size_t>(s)] == 0) continue;
        auto& entries = report.per_grade[static_cast<std::size_t>(s)];
        for (int m = 0; m < per; ++m) {
            entries.push_back(ImportanceEntry{
                (s + 1) * per + m,
                sums[static_cast<std::size_t>(s)][static_cast<std::size_t>(m)] /
                    static_cast<double>(counts[static_cast<std::size_t>(s)])});
        }
        std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.prototype_id < b.prototype_id;
        });
    }
    return report;
}

Lemma1GradeResult lemma1_check(const ClassAttentionStats& stats, std::uint8_t grade, double alpha,
                               double beta, double tau) {
    Lemma1GradeResult r;
    r.grade = grade;
    r.w = stats.w;
    if (stats.n_pos == 0 || stats.n_neg == 0) {
        r.skipped = true;
        return r;
    }
    r.observed_loss = classwise_loss(stats, alpha, beta);
    for (std::size_t m = 0; m < stats.mu_minus.size(); ++m) {
        r.inner_product += stats.mu_plus[m] * stats.mu_minus[m];
        if (stats.mu_plus[m] > tau && stats.mu_minus[m] > tau) ++r.support_overlap;
    }
    r.bound = r.observed_loss / (stats.w * alpha) + 1e-9;
    r.holds = r.inner_product <= r.bound;
    return r;
}

namespace {

std::array<ClassAttentionStats, 3> batch_stats(const ModelState& model,
                                               std::span<const WsiBag* const> bags, int top_j) {
    if (bags.empty()) throw std::domain_error("attention statistics need at least one bag");
    std::vector<BagForward> fwds;
    fwds.reserve(bags.size());
    std::vector<std::array<std::uint8_t, 3>> targets;
    targets.reserve(bags.size());
    for (const WsiBag* bag : bags) {
        fwds.push_back(forward_bag(model, BagView{bag}, top_j, true));
        targets.push_back(bag->target);
    }
    std::array<ClassAttentionStats, 3> stats;
    for (int s = 0; s < kNumGrades; ++s) {
        stats[static_cast<std::size_t>(s)] =
            class_attention_stats(fwds, targets, s, model.config.protos_per_class);
    }
    return stats;
}

}  // namespace

Lemma1Report verify_lemma1(const ModelState& model, std::span<const WsiBag* const> bags,
                           const Stage3Config& cfg, int top_j, double tau) {
    const auto stats = batch_stats(model, bags, top_j);
    Lemma1Report report;
    report.tau = tau;
    for (int s = 0; s < kNumGrades; ++s) {
        report.grades[static_cast<std::size_t>(s)] = lemma1_check(
            stats[static_cast<std::size_t>(s)], grade_of_slot(s), cfg.alpha, cfg.beta, tau);
        if (!report.grades[static_cast<std::size_t>(s)].skipped) {
            report.all_hold &= report.grades[static_cast<std::size_t>(s)].holds;
        }
    }
    return report;
}

Lemma2GradeResult lemma2_check(const ClassAttentionStats& stats, std::uint8_t grade, double beta,
                               double tol) {
    Lemma2GradeResult r;
    r.grade = grade;
    r.w = stats.w;
    if (stats.n_pos == 0 || stats.n_neg == 0) {
        r.skipped = true;
        return r;
    }
    r.expected = stats.w * beta;
    // The pruning pressure is magnitude-independent: probe the derivative of
    // the negative-activity term far from and close to zero.
    const std::array<double, 3> magnitudes{1e-6, 1e-3, 0.5};
    std::vector<double> probe = stats.mu_minus;
    for (double mag : magnitudes) {
        // Keep the probe interval away from the kink at zero.
        const double h = std::min(1e-5, mag / 2.0);
        for (std::size_t m = 0; m < probe.size(); ++m) {
            const double saved = probe[m];
            probe[m] = mag + h;
            const double up = negative_activity_term(probe, stats.w, beta);
            probe[m] = mag - h;
            const double down = negative_activity_term(probe, stats.w, beta);
            probe[m] = saved;
            const double fd = (up - down) / (2.0 * h);
            r.max_deviation = std::max(r.max_deviation, std::fabs(fd - r.expected));
        }
    }
    r.holds = r.max_deviation <= tol;
    return r;
}

Lemma2Report verify_lemma2(const ModelState& model, std::span<const WsiBag* const> bags,
                           const Stage3Config& cfg, int top_j, double tol) {
    const auto stats = batch_stats(model, bags, top_j);
    Lemma2Report report;
    for (int s = 0; s < kNumGrades; ++s) {
        report.grades[static_cast<std::size_t>(s)] =
            lemma2_check(stats[static_cast<std::size_t>(s)], grade_of_slot(s), cfg.beta, tol);
        if (!report.grades[static_cast<std::size_t>(s)].skipped) {
            report.all_hold &= report.grades[static_cast<std::size_t>(s)].holds;
        }
    }
    return report;
}

}  // namespace adapt
