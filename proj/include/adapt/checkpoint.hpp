#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "adapt/model.hpp"

namespace adapt {

struct CheckpointMeta {
    int stage = 0;
    std::uint64_t seed = 0;
    std::string config_hash;
    nlohmann::json metrics = nlohmann::json::object();
};

// Canonical binary serialization: text header carrying stage, seed, config
// hash, dims and a metric snapshot, then the raw little-endian parameter
// vector and push provenance. Loading and re-saving reproduces the bytes.
void save_checkpoint(const ModelState& model, const CheckpointMeta& meta,
                     const std::filesystem::path& path);
std::pair<ModelState, CheckpointMeta> load_checkpoint(const std::filesystem::path& path);

// Shared atomic write: temp file in the target directory, then rename.
void write_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace adapt
