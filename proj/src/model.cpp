#include "adapt/model.hpp"

#include <cmath>

#include "adapt/protolayer.hpp"
#include "adapt/rng.hpp"

namespace adapt {

void ModelConfig::validate() const {
    encoder().validate();
    if (grid_rows < 1 || grid_cols < 1) throw config_error("grid dimensions must be >= 1");
    if (protos_per_class < 1) throw config_error("protos_per_class must be >= 1");
    if (attn_hidden < 0) throw config_error("attn_hidden must be >= 0 (0 selects the default)");
}

ParamLayout model_layout(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t enc = cfg.encoder().param_count();
    const std::size_t k = static_cast<std::size_t>(cfg.num_prototypes());
    const std::size_t protos = k * cfg.d_latent;
    const std::size_t fc = static_cast<std::size_t>(kNumClasses) * k;
    const std::size_t ha = static_cast<std::size_t>(cfg.attn_hidden_dim());
    const std::size_t attn = k * ha + ha + ha * k + k;
    std::vector<Segment> segs{
        {kSegEncoder, 0, enc},
        {kSegPrototypes, enc, protos},
        {kSegFc, enc + protos, fc},
        {kSegAttention, enc + protos + fc, attn},
    };
    return ParamLayout(std::move(segs));
}

ModelState init_model(const ModelConfig& cfg, std::uint64_t root_seed) {
    ModelState m;
    m.config = cfg;
    m.params = ParamVector::zeros(model_layout(cfg));
    m.provenance.assign(static_cast<std::size_t>(cfg.num_prototypes()), PushProvenance{});
    m.stage = 0;

    SplitRng enc_rng = SplitRng::stream(root_seed, "init-encoder");
    init_encoder(cfg.encoder(), enc_rng, m.encoder_params());

    fc_fixed(cfg.protos_per_class, m.fc());

    // First attention layer random so its gradient is nonzero once the second
    // layer moves; second layer zero pins every initial gate at exactly 0.5,
    // an unbiased symmetric start.
    SplitRng attn_rng = SplitRng::stream(root_seed, "init-attention");
    const int k = cfg.num_prototypes();
    const int ha = cfg.attn_hidden_dim();
    auto attn = m.attention_params();
    const double bound = std::sqrt(6.0 / (k + ha));
    for (int i = 0; i < k * ha; ++i) attn[static_cast<std::size_t>(i)] = attn_rng.uniform(-bound, bound);
    return m;
}

}  // namespace adapt
