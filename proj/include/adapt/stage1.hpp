#pragma once

#include <cstdint>
#include <span>

#include "adapt/model.hpp"
#include "adapt/protolayer.hpp"
#include "adapt/training.hpp"

namespace adapt {

// Patch-level pretraining. A cycle runs phase1_epochs of joint encoder +
// prototype training under the fixed classifier pattern, pushes prototypes
// onto labeled cells, then trains the classifier alone for phase3_epochs.
// Cycles repeat until the epoch budget is used or held-out patch accuracy
// stops improving by more than convergence_delta per cycle.
struct Stage1Config {
    double lambda_clst = 0.8;
    double lambda_sep = 0.08;
    int epochs = 30;
    int batch_size = 64;
    double initial_lr = 3e-4;
    int phase1_epochs = 10;
    int push_every = 10;       // pushes inside a joint block, measured in epochs
    int phase3_epochs = 5;
    double convergence_delta = 1e-3;
    double val_fraction = 0.1;

    void validate() const;

    bool operator==(const Stage1Config&) const = default;
};

struct ClusterSeparation {
    double clst = 0.0;
    double sep = 0.0;  // already negated: more negative = larger other-class distance
    int clst_proto = -1, clst_cell = -1;
    int sep_proto = -1, sep_cell = -1;
};

// Double min over (same-class prototypes x cells) and the negated double min
// over (other-class prototypes x cells).
ClusterSeparation cluster_separation(const LatentGrid& grid, std::uint8_t label,
                                     const PrototypeBankView& bank);

struct PatchLossTerms {
    double ce = 0, clst = 0, sep = 0, total = 0;
    bool ce_clamped = false;
};

// Loss value from a completed forward; total = ce + lambda_clst*clst +
// lambda_sep*sep (sep enters negated, so a positive lambda_sep rewards
// distance from other classes).
PatchLossTerms patch_loss(const PatchForward& fwd, const LatentGrid& grid, std::uint8_t label,
                          const PrototypeBankView& bank, const Stage1Config& cfg);

// Value plus hand-derived reverse-mode gradients, accumulated into grads
// (encoder, prototypes, fc segments) scaled by weight. Either out pointer may
// be null.
PatchLossTerms patch_loss_and_grad(const ModelState& model, const RawPatch& patch,
                                   std::uint8_t label, const Stage1Config& cfg, double weight,
                                   ParamVector* grads, TieReport* tie);

// Trains in place; model.stage becomes 1 and every prototype carries push
// provenance afterwards. root_seed feeds the named streams init-prototypes
// and shuffle-stage1.
TrainReport train_stage1(ModelState& model, std::span<const PdEntry> pd, const Stage1Config& cfg,
                         std::uint64_t root_seed);

}  // namespace adapt
