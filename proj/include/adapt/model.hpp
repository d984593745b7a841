#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "adapt/encoder.hpp"
#include "adapt/numerics.hpp"

namespace adapt {

inline constexpr const char* kSegEncoder = "encoder";
inline constexpr const char* kSegPrototypes = "prototypes";
inline constexpr const char* kSegFc = "fc";
inline constexpr const char* kSegAttention = "attention";

// Model shape. attn_hidden == 0 selects the default of twice the prototype
// count. Prototypes are 1x1 in grid terms: one latent vector each.
struct ModelConfig {
    int grid_rows = 4;
    int grid_cols = 4;
    int d_raw = 16;
    int d_hidden = 32;
    int d_latent = 24;
    int protos_per_class = 4;
    int attn_hidden = 0;

    int num_prototypes() const { return kNumClasses * protos_per_class; }
    int attn_hidden_dim() const { return attn_hidden > 0 ? attn_hidden : 2 * num_prototypes(); }
    EncoderConfig encoder() const { return {d_raw, d_hidden, d_latent}; }
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// Segments: encoder | prototypes (K x d_latent) | fc (4 x K) | attention
// (a1 K x H_a, b1 H_a, a2 H_a x K, b2 K).
ParamLayout model_layout(const ModelConfig& cfg);

// After a push each prototype records the labeled patch and cell it was
// snapped to. patch_id refers to a PdEntry id; -1 means never pushed.
struct PushProvenance {
    std::int64_t patch_id = -1;
    int row = -1;
    int col = -1;

    bool operator==(const PushProvenance&) const = default;
};

struct ModelState {
    ModelConfig config;
    ParamVector params;
    std::vector<PushProvenance> provenance;  // one per prototype
    int stage = 0;                           // last completed training stage

    std::span<const double> encoder_params() const { return params.segment(kSegEncoder); }
    std::span<double> encoder_params() { return params.segment(kSegEncoder); }
    std::span<const double> prototype_values() const { return params.segment(kSegPrototypes); }
    std::span<double> prototype_values() { return params.segment(kSegPrototypes); }
    std::span<const double> fc() const { return params.segment(kSegFc); }
    std::span<double> fc() { return params.segment(kSegFc); }
    std::span<const double> attention_params() const { return params.segment(kSegAttention); }
    std::span<double> attention_params() { return params.segment(kSegAttention); }
};

// Fresh model: encoder drawn from stream "init-encoder", attention first layer
// from "init-attention" (second layer zero so every gate starts at exactly
// 0.5), classifier set to the fixed +1 / -0.5 pattern, prototypes zero until
// the patch stage seeds them.
ModelState init_model(const ModelConfig& cfg, std::uint64_t root_seed);

}  // namespace adapt
