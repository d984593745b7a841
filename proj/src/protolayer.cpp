#include "adapt/protolayer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace adapt {

PrototypeBankView bank_view(const ModelState& model) {
    return PrototypeBankView{model.prototype_values(), model.config.protos_per_class,
                             model.config.d_latent};
}

double similarity(double d) {
    if (d < 0.0) throw std::domain_error("similarity: negative squared distance");
    return std::log((d + 1.0) / (d + kSimilarityEpsilon));
}

double similarity_slope(double d) {
    if (d < 0.0) throw std::domain_error("similarity_slope: negative squared distance");
    return 1.0 / (d + 1.0) - 1.0 / (d + kSimilarityEpsilon);
}

void distance_map(const LatentGrid& grid, const PrototypeBankView& bank, std::span<double> out) {
    const int cells = grid.cell_count();
    const int k = bank.count();
    const int d = bank.depth;
    if (grid.depth != d) throw layout_error("distance_map: latent depth disagrees with bank");
    if (out.size() != static_cast<std::size_t>(k) * cells) {
        throw layout_error("distance_map: output span has wrong size");
    }
    for (int g = 0; g < k; ++g) {
        const double* p = bank.values.data() + static_cast<std::size_t>(g) * d;
        double* row = out.data() + static_cast<std::size_t>(g) * cells;
        for (int r = 0; r < cells; ++r) {
            const double* e = grid.values.data() + static_cast<std::size_t>(r) * d;
            double acc = 0.0;
            for (int j = 0; j < d; ++j) {
                const double diff = e[j] - p[j];
                acc += diff * diff;
            }
            row[r] = acc;
        }
    }
}

void softmax4(const std::array<double, 4>& logits, std::array<double, 4>& probs) {
    const double mx = std::max({logits[0], logits[1], logits[2], logits[3]});
    double z = 0.0;
    for (int c = 0; c < 4; ++c) {
        probs[static_cast<std::size_t>(c)] = std::exp(logits[static_cast<std::size_t>(c)] - mx);
        z += probs[static_cast<std::size_t>(c)];
    }
    for (int c = 0; c < 4; ++c) probs[static_cast<std::size_t>(c)] /= z;
}

PatchForward forward_patch(const LatentGrid& grid, const PrototypeBankView& bank,
                           std::span<const double> fc, std::span<const double> attention) {
    const int k = bank.count();
    const int cells = grid.cell_count();
    if (fc.size() != static_cast<std::size_t>(kNumClasses) * k) {
        throw layout_error("forward_patch: classifier span has wrong size");
    }
    if (!attention.empty() && attention.size() != static_cast<std::size_t>(k)) {
        throw layout_error("forward_patch: attention span has wrong size");
    }

    PatchForward f;
    f.distances.resize(static_cast<std::size_t>(k) * cells);
    distance_map(grid, bank, f.distances);
    f.min_distance.resize(static_cast<std::size_t>(k));
    f.argmin_cell.resize(static_cast<std::size_t>(k));
    f.similarities.resize(static_cast<std::size_t>(k));
    for (int g = 0; g < k; ++g) {
        const double* row = f.distances.data() + static_cast<std::size_t>(g) * cells;
        int best = 0;
        for (int r = 1; r < cells; ++r) {
            if (row[r] < row[best]) best = r;  // first index wins on ties
        }
        f.min_distance[static_cast<std::size_t>(g)] = row[best];
        f.argmin_cell[static_cast<std::size_t>(g)] = best;
        f.similarities[static_cast<std::size_t>(g)] = similarity(row[best]);
    }
    for (int c = 0; c < kNumClasses; ++c) {
        double acc = 0.0;
        const double* wrow = fc.data() + static_cast<std::size_t>(c) * k;
        for (int g = 0; g < k; ++g) {
            const double ps = f.similarities[static_cast<std::size_t>(g)];
            const double a = attention.empty() ? 1.0 : attention[static_cast<std::size_t>(g)];
            acc += wrow[g] * ps * a;
        }
        f.logits[static_cast<std::size_t>(c)] = acc;
    }
    softmax4(f.logits, f.probs);
    return f;
}

void fc_fixed(int per_class, std::span<double> fc_out) {
    const int k = kNumClasses * per_class;
    if (fc_out.size() != static_cast<std::size_t>(kNumClasses) * k) {
        throw layout_error("fc_fixed: output span has wrong size");
    }
    for (int c = 0; c < kNumClasses; ++c) {
        for (int g = 0; g < k; ++g) {
            fc_out[static_cast<std::size_t>(c) * k + g] = (g / per_class == c) ? 1.0 : -0.5;
        }
    }
}

void push_prototypes(ModelState& model, std::span<const PdEntry> pd) {
    std::vector<const PdEntry*> ptrs;
    ptrs.reserve(pd.size());
    for (const auto& e : pd) ptrs.push_back(&e);
    push_prototypes(model, ptrs);
}

void push_prototypes(ModelState& model, std::span<const PdEntry* const> pd) {
    const ModelConfig& cfg = model.config;
    const int d = cfg.d_latent;
    const int per = cfg.protos_per_class;
    const int k = cfg.num_prototypes();

    struct Best {
        double dist = std::numeric_limits<double>::infinity();
        std::int64_t patch_id = -1;
        int row = -1, col = -1;
        std::vector<double> latent;
    };
    std::vector<Best> best(static_cast<std::size_t>(k));

    auto better = [](const Best& cand, const Best& cur) {
        if (cand.dist != cur.dist) return cand.dist < cur.dist;
        if (cand.patch_id != cur.patch_id) return cand.patch_id < cur.patch_id;
        if (cand.row != cur.row) return cand.row < cur.row;
        return cand.col < cur.col;
    };

    std::array<bool, kNumClasses> seen{};
    for (const PdEntry* entry_ptr : pd) {
        const PdEntry& entry = *entry_ptr;
        const int ci = class_index(entry.patch.grade);
        seen[static_cast<std::size_t>(ci)] = true;
        const LatentGrid grid = encode(cfg.encoder(), model.encoder_params(), entry.patch);
        for (int r = 0; r < grid.rows; ++r) {
            for (int c = 0; c < grid.cols; ++c) {
                const auto cell = grid.cell(r, c);
                for (int g = ci * per; g < (ci + 1) * per; ++g) {
                    const double* p = model.prototype_values().data() + static_cast<std::size_t>(g) * d;
                    double acc = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double diff = cell[static_cast<std::size_t>(j)] - p[j];
                        acc += diff * diff;
                    }
                    Best cand;
                    cand.dist = acc;
                    cand.patch_id = entry.id;
                    cand.row = r;
                    cand.col = c;
                    if (better(cand, best[static_cast<std::size_t>(g)])) {
                        cand.latent.assign(cell.begin(), cell.end());
                        best[static_cast<std::size_t>(g)] = std::move(cand);
                    }
                }
            }
        }
    }

    for (int ci = 0; ci < kNumClasses; ++ci) {
        if (!seen[static_cast<std::size_t>(ci)]) {
            throw config_error("push: no labeled patches for class " +
                               std::to_string(int(kClassLabels[static_cast<std::size_t>(ci)])));
        }
    }

    auto protos = model.prototype_values();
    for (int g = 0; g < k; ++g) {
        const Best& b = best[static_cast<std::size_t>(g)];
        std::copy(b.latent.begin(), b.latent.end(),
                  protos.begin() + static_cast<std::ptrdiff_t>(g) * d);
        model.provenance[static_cast<std::size_t>(g)] = PushProvenance{b.patch_id, b.row, b.col};
    }
}

}  // namespace adapt
