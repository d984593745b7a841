#include "adapt/config.hpp"

#include <fstream>
#include <set>

#include "adapt/checkpoint.hpp"

namespace adapt {

using nlohmann::json;

namespace {

// Strict object reader: every key must be known, wrong types are config
// errors, missing keys keep the caller's default.
class Fields {
public:
    Fields(const json& j, std::string ctx) : j_(j), ctx_(std::move(ctx)) {
        if (!j_.is_object()) throw config_error(ctx_ + " must be a JSON object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->get<T>();
        } catch (const json::exception&) {
            throw config_error(ctx_ + "." + key + " has the wrong type");
        }
    }

    const json* object(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return nullptr;
        return &*it;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.contains(it.key())) {
                throw config_error("unknown key '" + it.key() + "' in " + ctx_);
            }
        }
    }

private:
    const json& j_;
    std::string ctx_;
    std::set<std::string> seen_;
};

void read_cohort_fields(Fields& f, CohortConfig& c) {
    f.get("n_wsis", c.n_wsis);
    f.get("patches_per_wsi", c.patches_per_wsi);
    f.get("grid_rows", c.grid_rows);
    f.get("grid_cols", c.grid_cols);
    f.get("d_raw", c.d_raw);
    f.get("archetypes_per_grade", c.archetypes_per_grade);
    f.get("noise_sigma", c.noise_sigma);
    f.get("benign_fraction", c.benign_fraction);
    f.get("secondary_fraction", c.secondary_fraction);
    f.get("cell_fraction_min", c.cell_fraction_min);
    f.get("cell_fraction_max", c.cell_fraction_max);
    f.get("archetype_blend", c.archetype_blend);
    f.get("pd_per_class", c.pd_per_class);
    if (const json* mix = f.object("grade_mix")) {
        if (!mix->is_array()) throw config_error("grade_mix must be an array");
        c.grade_mix.clear();
        for (const auto& e : *mix) {
            Fields fe(e, "grade_mix entry");
            GradeMixEntry g;
            int primary = g.primary, secondary = g.secondary;
            fe.get("primary", primary);
            fe.get("secondary", secondary);
            fe.get("prob", g.prob);
            fe.finish();
            g.primary = static_cast<std::uint8_t>(primary);
            g.secondary = static_cast<std::uint8_t>(secondary);
            c.grade_mix.push_back(g);
        }
    }
}

}  // namespace

CohortConfig cohort_config_from_json(const json& j) {
    CohortConfig c;
    Fields f(j, "cohort");
    read_cohort_fields(f, c);
    f.get("seed", c.seed);
    f.finish();
    return c;
}

ModelConfig RunConfig::model() const {
    ModelConfig m;
    m.grid_rows = cohort.grid_rows;
    m.grid_cols = cohort.grid_cols;
    m.d_raw = cohort.d_raw;
    m.d_hidden = d_hidden;
    m.d_latent = d_latent;
    m.protos_per_class = protos_per_class;
    m.attn_hidden = attn_hidden;
    return m;
}

CohortConfig RunConfig::cohort_resolved() const {
    CohortConfig c = cohort;
    c.seed = seed;
    return c;
}

void RunConfig::validate() const {
    if (protos_per_class < 3 || protos_per_class > 6) {
        throw config_error("prototypes_per_class must lie in [3, 6]");
    }
    if (output_dir.empty()) throw config_error("output_dir must not be empty");
    cohort.validate();
    split.validate();
    model().validate();
    stage1.validate();
    stage2.validate();
    stage3.validate();
}

RunConfig parse_run_config(const json& j) {
    RunConfig cfg;
    Fields f(j, "config");
    if (const json* s = f.object("seed")) {
        if (s->is_number_unsigned()) {
            cfg.seed = s->get<std::uint64_t>();
        } else if (s->is_number_integer() && s->get<std::int64_t>() >= 0) {
            cfg.seed = static_cast<std::uint64_t>(s->get<std::int64_t>());
        } else {
            throw config_error("config.seed must be a non-negative integer");
        }
    }
    f.get("output_dir", cfg.output_dir);
    f.get("prototypes_per_class", cfg.protos_per_class);
    if (const json* c = f.object("cohort")) {
        Fields fc(*c, "cohort");
        read_cohort_fields(fc, cfg.cohort);
        fc.finish();
    }
    if (const json* s = f.object("split")) {
        Fields fs(*s, "split");
        fs.get("train", cfg.split.train);
        fs.get("val", cfg.split.val);
        fs.get("test", cfg.split.test);
        fs.finish();
    }
    if (const json* m = f.object("model")) {
        Fields fm(*m, "model");
        fm.get("d_hidden", cfg.d_hidden);
        fm.get("d_latent", cfg.d_latent);
        fm.get("attn_hidden", cfg.attn_hidden);
        fm.finish();
    }
    if (const json* s = f.object("stage1")) {
        Fields fs(*s, "stage1");
        fs.get("lambda_clst", cfg.stage1.lambda_clst);
        fs.get("lambda_sep", cfg.stage1.lambda_sep);
        fs.get("epochs", cfg.stage1.epochs);
        fs.get("batch_size", cfg.stage1.batch_size);
        fs.get("initial_lr", cfg.stage1.initial_lr);
        fs.get("phase1_epochs", cfg.stage1.phase1_epochs);
        fs.get("push_every", cfg.stage1.push_every);
        fs.get("phase3_epochs", cfg.stage1.phase3_epochs);
        fs.get("convergence_delta", cfg.stage1.convergence_delta);
        fs.get("val_fraction", cfg.stage1.val_fraction);
        fs.finish();
    }
    if (const json* s = f.object("stage2")) {
        Fields fs(*s, "stage2");
        fs.get("top_j", cfg.stage2.top_j);
        fs.get("lambda_align", cfg.stage2.lambda_align);
        fs.get("lambda_repel", cfg.stage2.lambda_repel);
        fs.get("epochs", cfg.stage2.epochs);
        fs.get("batch_size", cfg.stage2.batch_size);
        fs.get("initial_lr", cfg.stage2.initial_lr);
        fs.get("threshold", cfg.stage2.threshold);
        fs.get("update_prototypes", cfg.stage2.update_prototypes);
        fs.finish();
    }
    if (const json* s = f.object("stage3")) {
        Fields fs(*s, "stage3");
        fs.get("alpha", cfg.stage3.alpha);
        fs.get("beta", cfg.stage3.beta);
        fs.get("epochs", cfg.stage3.epochs);
        fs.get("batch_size", cfg.stage3.batch_size);
        fs.get("initial_lr", cfg.stage3.initial_lr);
        fs.get("use_attention_loss", cfg.stage3.use_attention_loss);
        fs.finish();
    }
    f.finish();
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::exception& e) {
        throw config_error("cannot read config file " + path.string() + ": " + e.what());
    }
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw config_error("config file " + path.string() + " is not valid JSON");
    return parse_run_config(j);
}

json run_config_json(const RunConfig& cfg) {
    json cohort = cohort_config_json(cfg.cohort);
    cohort.erase("seed");  // the run seed governs generation
    return json{
        {"seed", cfg.seed},
        {"output_dir", cfg.output_dir},
        {"prototypes_per_class", cfg.protos_per_class},
        {"cohort", cohort},
        {"split", {{"train", cfg.split.train}, {"val", cfg.split.val}, {"test", cfg.split.test}}},
        {"model",
         {{"d_hidden", cfg.d_hidden}, {"d_latent", cfg.d_latent}, {"attn_hidden", cfg.attn_hidden}}},
        {"stage1",
         {{"lambda_clst", cfg.stage1.lambda_clst},
          {"lambda_sep", cfg.stage1.lambda_sep},
          {"epochs", cfg.stage1.epochs},
          {"batch_size", cfg.stage1.batch_size},
          {"initial_lr", cfg.stage1.initial_lr},
          {"phase1_epochs", cfg.stage1.phase1_epochs},
          {"push_every", cfg.stage1.push_every},
          {"phase3_epochs", cfg.stage1.phase3_epochs},
          {"convergence_delta", cfg.stage1.convergence_delta},
          {"val_fraction", cfg.stage1.val_fraction}}},
        {"stage2",
         {{"top_j", cfg.stage2.top_j},
          {"lambda_align", cfg.stage2.lambda_align},
          {"lambda_repel", cfg.stage2.lambda_repel},
          {"epochs", cfg.stage2.epochs},
          {"batch_size", cfg.stage2.batch_size},
          {"initial_lr", cfg.stage2.initial_lr},
          {"threshold", cfg.stage2.threshold},
          {"update_prototypes", cfg.stage2.update_prototypes}}},
        {"stage3",
         {{"alpha", cfg.stage3.alpha},
          {"beta", cfg.stage3.beta},
          {"epochs", cfg.stage3.epochs},
          {"batch_size", cfg.stage3.batch_size},
          {"initial_lr", cfg.stage3.initial_lr},
          {"use_attention_loss", cfg.stage3.use_attention_loss}}}};
}

std::string config_hash(const RunConfig& cfg) {
    json j = run_config_json(cfg);
    j.erase("output_dir");  // where artifacts land does not change what they are
    return hex64(fnv1a64(j.dump()));
}

}  // namespace adapt
