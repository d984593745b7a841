#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "adapt/cohort.hpp"
#include "adapt/model.hpp"

namespace adapt {

struct GradeCounts {
    long tp = 0, fp = 0, fn = 0, tn = 0;
};

struct EvalResult {
    std::array<double, 3> f1{};         // per grade 3, 4, 5; 0/0 counts as 0
    double macro_f1 = 0.0;
    double hamming = 0.0;               // mean label disagreement
    std::array<GradeCounts, 3> counts{};
    int n_bags = 0;
};

// Thresholded multilabel evaluation. Models that completed the pruning stage
// are evaluated through the attention-weighted head, earlier ones through the
// plain head. Empty bag sets are a domain error.
EvalResult evaluate(const ModelState& model, std::span<const WsiBag* const> bags, int top_j,
                    double threshold = 0.5);

struct CrossActivationMatrix {
    // rows: true patch class; cols: prototype class; entry = mean over patches
    // of the max attention-weighted similarity within the column's class.
    std::array<std::array<double, 4>, 4> values{};
    std::array<long, 4> row_counts{};
};

CrossActivationMatrix cross_activation(const ModelState& model, std::span<const PdEntry> patches);

struct LowAttentionFractions {
    std::array<double, 3> per_grade{};
    std::array<bool, 3> defined{};
    double overall = 0.0;  // over all graded prototypes with a defined score
    double threshold = 0.5;
};

// Fraction of prototypes whose importance score falls below the threshold.
LowAttentionFractions low_attention_fraction(const ModelState& model,
                                             std::span<const WsiBag* const> bags, int top_j,
                                             double threshold = 0.5);

std::string eval_csv(const EvalResult& r, const std::string& meta_comment);
std::string cross_activation_csv(const CrossActivationMatrix& m, const std::string& meta_comment);

}  // namespace adapt
