#pragma once

#include <span>
#include <vector>

#include "adapt/cohort.hpp"
#include "adapt/rng.hpp"

namespace adapt {

// Shared two-layer perceptron applied to every cell of a patch independently:
// latent = W2^T max(W1^T x + b1, 0) + b2. Parameters are packed row-major as
// [w1 (d_raw x d_hidden), b1, w2 (d_hidden x d_latent), b2].
struct EncoderConfig {
    int d_raw = 16;
    int d_hidden = 32;
    int d_latent = 24;

    void validate() const;
    std::size_t param_count() const;

    bool operator==(const EncoderConfig&) const = default;
};

// Uniform init with per-layer bound sqrt(6 / (fan_in + fan_out)); biases zero.
void init_encoder(const EncoderConfig& cfg, SplitRng& rng, std::span<double> params);

struct LatentGrid {
    int rows = 0;
    int cols = 0;
    int depth = 0;
    std::vector<double> values;  // rows*cols*depth

    std::span<const double> cell(int r, int c) const;
    std::span<double> cell(int r, int c);
    std::span<const double> cell_flat(int idx) const;
    int cell_count() const { return rows * cols; }
};

// Forward over n_cells cells. hidden_preact (n_cells x d_hidden), when
// non-empty, receives the pre-rectifier activations needed for the backward
// pass and for rectifier tie margins.
void encode_cells(const EncoderConfig& cfg, std::span<const double> params,
                  std::span<const double> raw_cells, int n_cells,
                  std::span<double> latent_out, std::span<double> hidden_preact);

LatentGrid encode(const EncoderConfig& cfg, std::span<const double> params, const RawPatch& patch);

// Accumulates parameter gradients for cells whose latent gradient is nonzero.
// hidden_preact must come from the matching forward call.
void encode_backward(const EncoderConfig& cfg, std::span<const double> params,
                     std::span<const double> raw_cells, int n_cells,
                     std::span<const double> hidden_preact,
                     std::span<const double> dlatent, std::span<double> dparams);

}  // namespace adapt
