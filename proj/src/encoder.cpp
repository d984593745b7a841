#include "adapt/encoder.hpp"

#include <cmath>

namespace adapt {

void EncoderConfig::validate() const {
    if (d_raw < 1 || d_hidden < 1 || d_latent < 1) {
        throw config_error("encoder dimensions must be >= 1");
    }
}

std::size_t EncoderConfig::param_count() const {
    return static_cast<std::size_t>(d_raw) * d_hidden + d_hidden +
           static_cast<std::size_t>(d_hidden) * d_latent + d_latent;
}

void init_encoder(const EncoderConfig& cfg, SplitRng& rng, std::span<double> params) {
    cfg.validate();
    if (params.size() != cfg.param_count()) throw layout_error("init_encoder: bad parameter span");
    std::size_t p = 0;
    const double bound1 = std::sqrt(6.0 / (cfg.d_raw + cfg.d_hidden));
    for (int i = 0; i < cfg.d_raw * cfg.d_hidden; ++i) params[p++] = rng.uniform(-bound1, bound1);
    for (int i = 0; i < cfg.d_hidden; ++i) params[p++] = 0.0;
    const double bound2 = std::sqrt(6.0 / (cfg.d_hidden + cfg.d_latent));
    for (int i = 0; i < cfg.d_hidden * cfg.d_latent; ++i) params[p++] = rng.uniform(-bound2, bound2);
    for (int i = 0; i < cfg.d_latent; ++i) params[p++] = 0.0;
}

std::span<const double> LatentGrid::cell(int r, int c) const {
    return std::span<const double>(values).subspan((static_cast<std::size_t>(r) * cols + c) * depth,
                                                   depth);
}

std::span<double> LatentGrid::cell(int r, int c) {
    return std::span<double>(values).subspan((static_cast<std::size_t>(r) * cols + c) * depth,
                                             depth);
}

std::span<const double> LatentGrid::cell_flat(int idx) const {
    return std::span<const double>(values).subspan(static_cast<std::size_t>(idx) * depth, depth);
}

void encode_cells(const EncoderConfig& cfg, std::span<const double> params,
                  std::span<const double> raw_cells, int n_cells, std::span<double> latent_out,
                  std::span<double> hidden_preact) {
    const int dr = cfg.d_raw, dh = cfg.d_hidden, dl = cfg.d_latent;
    if (params.size() != cfg.param_count()) throw layout_error("encode_cells: bad parameter span");
    if (raw_cells.size() != static_cast<std::size_t>(n_cells) * dr ||
        latent_out.size() != static_cast<std::size_t>(n_cells) * dl) {
        throw layout_error("encode_cells: cell buffer sizes disagree with config");
    }
    const bool keep_hidden = !hidden_preact.empty();
    if (keep_hidden && hidden_preact.size() != static_cast<std::size_t>(n_cells) * dh) {
        throw layout_error("encode_cells: hidden buffer size disagrees with config");
    }

    const double* w1 = params.data();
    const double* b1 = w1 + static_cast<std::size_t>(dr) * dh;
    const double* w2 = b1 + dh;
    const double* b2 = w2 + static_cast<std::size_t>(dh) * dl;

    std::vector<double> local(static_cast<std::size_t>(dh));
    for (int n = 0; n < n_cells; ++n) {
        const double* x = raw_cells.data() + static_cast<std::size_t>(n) * dr;
        double* u = keep_hidden ? hidden_preact.data() + static_cast<std::size_t>(n) * dh
                                : local.data();
        for (int j = 0; j < dh; ++j) u[j] = b1[j];
        for (int i = 0; i < dr; ++i) {
            const double xi = x[i];
            const double* row = w1 + static_cast<std::size_t>(i) * dh;
            for (int j = 0; j < dh; ++j) u[j] += xi * row[j];
        }
        double* e = latent_out.data() + static_cast<std::size_t>(n) * dl;
        for (int j = 0; j < dl; ++j) e[j] = b2[j];
        for (int k = 0; k < dh; ++k) {
            const double hk = u[k] > 0.0 ? u[k] : 0.0;
            if (hk == 0.0) continue;
            const double* row = w2 + static_cast<std::size_t>(k) * dl;
            for (int j = 0; j < dl; ++j) e[j] += hk * row[j];
        }
    }
}

LatentGrid encode(const EncoderConfig& cfg, std::span<const double> params, const RawPatch& patch) {
    LatentGrid g;
    g.rows = patch.rows;
    g.cols = patch.cols;
    g.depth = cfg.d_latent;
    g.values.resize(static_cast<std::size_t>(patch.cell_count()) * cfg.d_latent);
    encode_cells(cfg, params, patch.cells, patch.cell_count(), g.values, {});
    return g;
}

void encode_backward(const EncoderConfig& cfg, std::span<const double> params,
                     std::span<const double> raw_cells, int n_cells,
                     std::span<const double> hidden_preact, std::span<const double> dlatent,
                     std::span<double> dparams) {
    const int dr = cfg.d_raw, dh = cfg.d_hidden, dl = cfg.d_latent;
    if (dparams.size() != cfg.param_count()) throw layout_error("encode_backward: bad gradient span");

    const double* w2 = params.data() + static_cast<std::size_t>(dr) * dh + dh;
    double* dw1 = dparams.data();
    double* db1 = dw1 + static_cast<std::size_t>(dr) * dh;
    double* dw2 = db1 + dh;
    double* db2 = dw2 + static_cast<std::size_t>(dh) * dl;

    std::vector<double> du(static_cast<std::size_t>(dh));
    for (int n = 0; n < n_cells; ++n) {
        const double* de = dlatent.data() + static_cast<std::size_t>(n) * dl;
        bool live = false;
        for (int j = 0; j < dl; ++j) {
            if (de[j] != 0.0) {
                live = true;
                break;
            }
        }
        if (!live) continue;

        const double* u = hidden_preact.data() + static_cast<std::size_t>(n) * dh;
        const double* x = raw_cells.data() + static_cast<std::size_t>(n) * dr;
        for (int j = 0; j < dl; ++j) db2[j] += de[j];
        for (int k = 0; k < dh; ++k) {
            const double hk = u[k] > 0.0 ? u[k] : 0.0;
            const double* row = w2 + static_cast<std::size_t>(k) * dl;
            double* drow = dw2 + static_cast<std::size_t>(k) * dl;
            double acc = 0.0;
            for (int j = 0; j < dl; ++j) {
                drow[j] += hk * de[j];
                acc += row[j] * de[j];
            }
            du[static_cast<std::size_t>(k)] = u[k] > 0.0 ? acc : 0.0;
        }
        for (int k = 0; k < dh; ++k) db1[k] += du[static_cast<std::size_t>(k)];
        for (int i = 0; i < dr; ++i) {
            const double xi = x[i];
            if (xi == 0.0) continue;
            double* drow = dw1 + static_cast<std::size_t>(i) * dh;
            for (int k = 0; k < dh; ++k) drow[k] += xi * du[static_cast<std::size_t>(k)];
        }
    }
}

}  // namespace adapt
