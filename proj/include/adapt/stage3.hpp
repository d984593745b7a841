#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "adapt/model.hpp"
#include "adapt/stage2.hpp"
#include "adapt/training.hpp"

namespace adapt {

struct Stage3Config {
    double alpha = 1.0;  // overlap weight
    double beta = 0.3;   // negative-activity weight; alpha > beta > 0 required
    int epochs = 20;
    int batch_size = 8;
    double initial_lr = 1e-3;
    bool use_attention_loss = true;

    void validate() const;

    bool operator==(const Stage3Config&) const = default;
};

// Two-layer gate over the similarity vector: a = sigmoid(A2^T tanh(A1^T ps +
// b1) + b2). With the second layer at zero every weight is exactly 0.5.
struct AttentionForward {
    std::vector<double> hidden_preact;  // H_a
    std::vector<double> hidden;         // tanh(hidden_preact)
    std::vector<double> attn;           // K
    std::vector<double> weighted;       // K, ps * attn
};

void attention_forward(const ModelConfig& cfg, std::span<const double> attn_params,
                       std::span<const double> ps, AttentionForward& out);

// Slide-level attention summary for one grade: mean attention sub-vector over
// that grade's top-j patches. Requires the attention-weighted forward.
std::vector<double> wsi_attention_vector(const BagForward& fwd, int slot, int per_class);

// Batch statistics feeding the classwise loss: per-grade means of the slide
// attention vectors over positive and negative slides, and the positive-slide
// weight w = |positives| / batch.
struct ClassAttentionStats {
    std::vector<double> mu_plus;
    std::vector<double> mu_minus;
    double w = 0.0;
    int n_pos = 0;
    int n_neg = 0;
};

ClassAttentionStats class_attention_stats(std::span<const BagForward> forwards,
                                          std::span<const std::array<std::uint8_t, 3>> targets,
                                          int slot, int per_class);

// w * (alpha * |mu_plus . mu_minus|_1 + beta * |mu_minus|_1). Both vectors are
// entrywise nonnegative, so the L1 norms reduce to sums.
double classwise_loss(const ClassAttentionStats& stats, double alpha, double beta);
double negative_activity_term(std::span<const double> mu_minus, double w, double beta);

struct Stage3LossTerms {
    double bce = 0, attn = 0, total = 0;
    std::array<double, 3> per_grade{};
    std::array<double, 3> grade_weight{};
};

// Batch objective BCE + mean classwise loss, with gradients for the attention
// and fc segments. ps holds one l x K similarity matrix per bag, precomputed
// from the frozen encoder and prototypes.
Stage3LossTerms stage3_loss_and_grad(const ModelState& model,
                                     std::span<const std::vector<double>> ps,
                                     std::span<const std::array<std::uint8_t, 3>> targets,
                                     const Stage3Config& cfg, int top_j, ParamVector* grads,
                                     TieReport* tie);

// Trains attention and classifier; encoder and prototypes stay bit-frozen.
TrainReport train_stage3(ModelState& model, std::span<const WsiBag* const> train,
                         std::span<const WsiBag* const> val, const Stage3Config& cfg, int top_j,
                         std::uint64_t root_seed);

struct ImportanceEntry {
    int prototype_id = -1;
    double score = 0.0;
};

// Per grade: prototypes ranked by mean slide attention over positive slides,
// descending, ties by lower id. Grades with no positive slide come back empty.
struct ImportanceReport {
    std::array<std::vector<ImportanceEntry>, 3> per_grade{};
};

ImportanceReport prototype_importance(const ModelState& model,
                                      std::span<const WsiBag* const> bags, int top_j);

struct Lemma1GradeResult {
    std::uint8_t grade = 0;
    bool skipped = false;   // no positive or no negative slides
    double w = 0.0;
    double observed_loss = 0.0;
    double inner_product = 0.0;
    double bound = 0.0;
    bool holds = false;
    int support_overlap = 0;  // coordinates above tau in both means
};

struct Lemma1Report {
    std::array<Lemma1GradeResult, 3> grades{};
    double tau = 1e-3;
    bool all_hold = true;
};

// Checks <mu_plus, mu_minus> <= L_c / (w alpha) + 1e-9 per grade on the given
// bags evaluated as one batch, and counts support overlap at tau.
Lemma1GradeResult lemma1_check(const ClassAttentionStats& stats, std::uint8_t grade,
                               double alpha, double beta, double tau);
Lemma1Report verify_lemma1(const ModelState& model, std::span<const WsiBag* const> bags,
                           const Stage3Config& cfg, int top_j, double tau = 1e-3);

struct Lemma2GradeResult {
    std::uint8_t grade = 0;
    bool skipped = false;
    double w = 0.0;
    double expected = 0.0;       // w * beta
    double max_deviation = 0.0;  // over coordinates and probe magnitudes
    bool holds = false;
};

struct Lemma2Report {
    std::array<Lemma2GradeResult, 3> grades{};
    bool all_hold = true;
};

// Central finite differences of the negative-activity term at coordinate
// magnitudes {1e-6, 1e-3, 0.5}: the derivative is w * beta regardless of
// magnitude, which is what keeps suppression pressure from fading.
Lemma2GradeResult lemma2_check(const ClassAttentionStats& stats, std::uint8_t grade, double beta,
                               double tol = 1e-9);
Lemma2Report verify_lemma2(const ModelState& model, std::span<const WsiBag* const> bags,
                           const Stage3Config& cfg, int top_j, double tol = 1e-9);

}  // namespace adapt
