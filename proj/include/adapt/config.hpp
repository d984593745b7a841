#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "adapt/cohort.hpp"
#include "adapt/model.hpp"
#include "adapt/stage1.hpp"
#include "adapt/stage2.hpp"
#include "adapt/stage3.hpp"

namespace adapt {

// Whole-run configuration. JSON parsing is strict: unknown keys are config
// errors, and every value is validated after defaults are applied. The config
// hash is taken over the fully resolved form, so an explicit default and an
// omitted field hash identically.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "run";
    int protos_per_class = 4;  // 3..6
    CohortConfig cohort;
    SplitRatios split;
    int d_hidden = 32;
    int d_latent = 24;
    int attn_hidden = 0;
    Stage1Config stage1;
    Stage2Config stage2;
    Stage3Config stage3;

    ModelConfig model() const;
    CohortConfig cohort_resolved() const;  // cohort with the run seed applied
    void validate() const;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json run_config_json(const RunConfig& cfg);  // canonical resolved form
std::string config_hash(const RunConfig& cfg);

}  // namespace adapt
