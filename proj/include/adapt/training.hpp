#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "adapt/cohort.hpp"

namespace adapt {

// What the bag-level trainers are allowed to see: patch features, bag id and
// the slide-level multilabel target. Patch grades and cell grades stay behind
// this view.
struct BagView {
    const WsiBag* bag = nullptr;

    int num_patches() const { return static_cast<int>(bag->patches.size()); }
    std::span<const double> patch_cells(int i) const { return bag->patches[static_cast<std::size_t>(i)].cells; }
    int patch_rows() const { return bag->patches.empty() ? 0 : bag->patches.front().rows; }
    int patch_cols() const { return bag->patches.empty() ? 0 : bag->patches.front().cols; }
    const std::array<std::uint8_t, 3>& target() const { return bag->target; }
    const std::string& id() const { return bag->id; }
};

std::vector<BagView> make_bag_views(std::span<const WsiBag> bags);
std::vector<BagView> make_bag_views(std::span<const WsiBag* const> bags);

struct Stage1EpochRow {
    int epoch = 0;
    std::string phase;  // "joint", "push" or "classifier"
    double ce = 0, clst = 0, sep = 0, total = 0, accuracy = 0;
};

struct Stage2EpochRow {
    int epoch = 0;
    double bce = 0, align = 0, repel = 0, total = 0, val_f1 = 0, val_hamming = 0;
};

struct Stage3EpochRow {
    int epoch = 0;
    double bce = 0, attn = 0;
    std::array<double, 3> per_grade{};
    double total = 0, val_f1 = 0, val_hamming = 0;
};

struct TrainReport {
    int stage = 0;
    bool aborted = false;          // divergence; model holds the last good state
    std::string abort_reason;
    bool converged_early = false;  // patch-stage accuracy plateau
    int stop_epoch = -1;
    int best_epoch = -1;
    double best_val_f1 = 0.0;
    double best_val_hamming = 1.0;
    double final_accuracy = 0.0;   // patch stage: held-out patch accuracy
    // Freeze audits: hashes of frozen segments compared around every step.
    bool fc_frozen_ok = true;
    bool prototypes_frozen_ok = true;
    bool encoder_frozen_ok = true;
    long empty_fp_events = 0;      // false-positive slides with no offending patch
    long ce_clamp_events = 0;
    std::vector<std::string> warnings;
    std::vector<Stage1EpochRow> stage1_rows;
    std::vector<Stage2EpochRow> stage2_rows;
    std::vector<Stage3EpochRow> stage3_rows;
};

std::string stage1_csv(const TrainReport& report, const std::string& meta_comment);
std::string stage2_csv(const TrainReport& report, const std::string& meta_comment);
std::string stage3_csv(const TrainReport& report, const std::string& meta_comment);

}  // namespace adapt
