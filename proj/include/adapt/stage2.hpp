#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "adapt/model.hpp"
#include "adapt/protolayer.hpp"
#include "adapt/training.hpp"

namespace adapt {

struct Stage2Config {
    int top_j = 5;                 // paper-supported range [3, 7]
    double lambda_align = 0.05;
    double lambda_repel = 0.02;
    int epochs = 25;
    int batch_size = 8;
    double initial_lr = 1e-4;
    double threshold = 0.5;        // bag and patch decision threshold
    bool update_prototypes = false;

    void validate() const;

    bool operator==(const Stage2Config&) const = default;
};

// Indices of the j largest values, ordered by value descending with ties
// broken by lower index. j > size returns all indices.
std::vector<int> topj_indices(std::span<const double> values, int j);

// Mean of the top-j values. Empty input is a domain error.
double aggregate_topj(std::span<const double> values, int j);

// Per-bag forward state shared by the losses, the evaluator and the
// diagnostics. attention is filled only on the attention-weighted path.
struct BagForward {
    int num_patches = 0;
    std::vector<double> patch_probs;            // l x 4
    std::array<double, 3> bag_probs{};          // top-j means per grade
    std::array<std::vector<int>, 3> topj{};     // selected patch indices per grade
    std::vector<double> min_distance;           // l x K
    std::vector<int> argmin_cell;               // l x K
    std::vector<double> similarities;           // l x K (unweighted)
    std::vector<double> attention;              // l x K when use_attention

    double patch_prob(int patch, int class_idx) const {
        return patch_probs[static_cast<std::size_t>(patch) * 4 + static_cast<std::size_t>(class_idx)];
    }
};

BagForward forward_bag(const ModelState& model, const BagView& bag, int top_j,
                       bool use_attention);

// Mean over false-negative slides of the distance between the slide's most
// confident patch for the missed grade and that grade's nearest prototype.
double alignment_loss(std::span<const BagForward> forwards,
                      std::span<const std::array<std::uint8_t, 3>> targets, int per_class,
                      double threshold);

// Negated mean distance between over-confident patches and the falsely
// predicted grade's prototypes, averaged per false-positive slide. Slides
// whose offending-patch set is empty contribute zero; empty_events counts
// them when non-null.
double repulsion_loss(std::span<const BagForward> forwards,
                      std::span<const std::array<std::uint8_t, 3>> targets, int per_class,
                      double threshold, long* empty_events);

struct WsiLossTerms {
    double bce = 0, align = 0, repel = 0, total = 0;
    int n_fn = 0, n_fp = 0;
    long empty_fp = 0;
};

// Multilabel BCE over (bag, grade) pairs plus the weighted event losses.
WsiLossTerms wsi_loss(std::span<const BagForward> forwards,
                      std::span<const std::array<std::uint8_t, 3>> targets,
                      const Stage2Config& cfg);

// Batch loss with gradients for the encoder, prototype and fc segments.
// Event sets and top-j selections are treated as constants of the draw.
WsiLossTerms wsi_loss_and_grad(const ModelState& model, std::span<const BagView> batch,
                               const Stage2Config& cfg, ParamVector* grads, TieReport* tie);

// Fine-tunes encoder and classifier on bag labels; prototypes stay bit-frozen
// unless cfg.update_prototypes. Keeps the best validation macro-F1 weights.
TrainReport train_stage2(ModelState& model, std::span<const WsiBag* const> train,
                         std::span<const WsiBag* const> val, const Stage2Config& cfg,
                         std::uint64_t root_seed);

}  // namespace adapt
