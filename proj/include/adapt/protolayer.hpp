#pragma once

#include <array>
#include <span>
#include <vector>

#include "adapt/encoder.hpp"
#include "adapt/model.hpp"

namespace adapt {

// Read-only view over the prototype segment. Prototypes are stored class-major:
// indices [ci*per_class, (ci+1)*per_class) belong to class ci in label order
// benign, 3, 4, 5.
struct PrototypeBankView {
    std::span<const double> values;  // K x depth, row-major
    int per_class = 0;
    int depth = 0;

    int count() const { return kNumClasses * per_class; }
    std::span<const double> prototype(int g) const { return values.subspan(static_cast<std::size_t>(g) * depth, depth); }
    int class_of(int g) const { return g / per_class; }
    std::uint8_t class_label(int g) const { return kClassLabels[static_cast<std::size_t>(class_of(g))]; }
    int class_begin(int ci) const { return ci * per_class; }
};

PrototypeBankView bank_view(const ModelState& model);

inline constexpr double kSimilarityEpsilon = 1e-4;

// Monotone decreasing map from squared distance to activation:
// s(d) = log((d + 1) / (d + 1e-4)). s(0) = log(1e4). Negative d is a domain
// error.
double similarity(double d);
double similarity_slope(double d);

// Squared L2 distance from every prototype to every cell; out is K x cells,
// prototype-major.
void distance_map(const LatentGrid& grid, const PrototypeBankView& bank, std::span<double> out);

// Shift-invariant softmax over the four class logits.
void softmax4(const std::array<double, 4>& logits, std::array<double, 4>& probs);

struct PatchForward {
    std::vector<double> distances;      // K x cells
    std::vector<double> min_distance;   // per prototype, min over cells
    std::vector<int> argmin_cell;       // first index wins on ties
    std::vector<double> similarities;   // per prototype
    std::array<double, 4> logits{};
    std::array<double, 4> probs{};
};

// Full patch head: distances -> per-prototype min -> similarity -> linear
// classifier -> softmax. attention, when non-empty, scales the similarity
// vector entrywise before the classifier (the pruning-stage path).
PatchForward forward_patch(const LatentGrid& grid, const PrototypeBankView& bank,
                           std::span<const double> fc,
                           std::span<const double> attention = {});

// Classifier pattern used while the latent space is shaped: +1 toward the
// prototype's own class, -0.5 toward every other class.
void fc_fixed(int per_class, std::span<double> fc_out);

// Snap every prototype to the nearest latent cell among same-class labeled
// patches, recording provenance. Ties resolve to the lowest (patch id, row,
// col). A class with no labeled patches is a config error.
void push_prototypes(ModelState& model, std::span<const PdEntry> pd);
void push_prototypes(ModelState& model, std::span<const PdEntry* const> pd);

}  // namespace adapt
