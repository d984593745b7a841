#pragma once

#include <filesystem>
#include <iosfwd>
#include <set>
#include <string>

#include <json.hpp>

#include "adapt/config.hpp"

namespace adapt {

enum class StageId { Gen, Stage1, Stage2, Stage3, Eval };

std::set<StageId> parse_stage_list(const std::string& spec);  // "gen,1,2,3,eval"

struct PipelineOptions {
    std::set<StageId> stages{StageId::Gen, StageId::Stage1, StageId::Stage2, StageId::Stage3,
                             StageId::Eval};
    bool allow_mismatch = false;
};

// Artifact names inside a run directory.
std::filesystem::path cohort_path(const std::filesystem::path& dir);
std::filesystem::path split_path(const std::filesystem::path& dir);
std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int stage);
std::filesystem::path bce_only_checkpoint_path(const std::filesystem::path& dir);
std::filesystem::path stage_log_path(const std::filesystem::path& dir, int stage);

// Runs the requested stages against config.output_dir. Each stage loads its
// prerequisites from disk, so stages can run in separate invocations; a
// missing prerequisite is a dependency error and a checkpoint whose config
// hash disagrees with the current config is rejected unless allow_mismatch.
void run_pipeline(const RunConfig& cfg, const PipelineOptions& opts, std::ostream& log);

// Assembles report.json / report.csv from the artifacts already present.
// Returns false when sections had to be marked missing.
bool emit_report(const std::filesystem::path& run_dir, std::ostream& log);

}  // namespace adapt
