#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "adapt/checkpoint.hpp"
#include "adapt/common.hpp"
#include "adapt/config.hpp"
#include "adapt/model.hpp"
#include "adapt/pipeline.hpp"

using namespace adapt;
namespace fs = std::filesystem;
using nlohmann::json;

#ifndef ADAPT_CLI_PATH
#error "ADAPT_CLI_PATH must point at the pipeline executable"
#endif

namespace {

constexpr const char* kCli = ADAPT_CLI_PATH;

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("adapt_artifacts_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Small enough that a full five-stage run finishes in well under a second.
json tiny_config(std::uint64_t seed, const fs::path& out) {
    return json{
        {"seed", seed},
        {"output_dir", out.string()},
        {"cohort",
         {{"n_wsis", 30},
          {"patches_per_wsi", 6},
          {"grid_rows", 2},
          {"grid_cols", 2},
          {"d_raw", 8},
          {"pd_per_class", 60},
          {"noise_sigma", 0.1}}},
        {"model", {{"d_hidden", 10}, {"d_latent", 6}}},
        {"prototypes_per_class", 3},
        {"stage1", {{"epochs", 6}, {"phase1_epochs", 3}, {"phase3_epochs", 1}, {"batch_size", 32}}},
        {"stage2", {{"epochs", 2}, {"top_j", 3}}},
        {"stage3", {{"epochs", 2}}}};
}

fs::path write_config(const json& j, const fs::path& dir, const std::string& name) {
    const fs::path path = dir / name;
    std::ofstream out(path);
    out << j.dump(2) << "\n";
    return path;
}

int run_cli(const std::string& args, const std::string& env = "",
            const fs::path& capture = {}) {
    std::string cmd;
    if (!env.empty()) cmd += env + " ";
    cmd += std::string(kCli) + " " + args;
    if (capture.empty()) {
        cmd += " > /dev/null 2>&1";
    } else {
        cmd += " > " + capture.string() + " 2>&1";
    }
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WIFEXITED(status) ? WEXITSTATUS(status) : -2;
}

ModelConfig small_model_config() {
    ModelConfig cfg;
    cfg.grid_rows = 2;
    cfg.grid_cols = 2;
    cfg.d_raw = 8;
    cfg.d_hidden = 10;
    cfg.d_latent = 6;
    cfg.protos_per_class = 3;
    return cfg;
}

}  // namespace

TEST_CASE("checkpoint round trip preserves everything and re-saves byte-identically") {
    const fs::path dir = fresh_dir("ckpt");
    ModelState model = init_model(small_model_config(), 211);
    SplitRng rng = SplitRng::stream(211, "test");
    for (double& v : model.params.values) v = rng.normal();
    for (std::size_t g = 0; g < model.provenance.size(); ++g) {
        model.provenance[g] = {static_cast<long>(g) * 7, static_cast<int>(g % 2), 1};
    }
    model.stage = 2;

    CheckpointMeta meta;
    meta.stage = 2;
    meta.seed = 211;
    meta.config_hash = "deadbeef01234567";
    meta.metrics = json{{"best_val_f1", 0.75}, {"aborted", false}};
    save_checkpoint(model, meta, dir / "a.bin");

    const auto [loaded, lmeta] = load_checkpoint(dir / "a.bin");
    CHECK(loaded.params.values == model.params.values);
    CHECK(loaded.config == model.config);
    CHECK(loaded.stage == 2);
    CHECK(lmeta.stage == 2);
    CHECK(lmeta.seed == 211);
    CHECK(lmeta.config_hash == meta.config_hash);
    CHECK(lmeta.metrics == meta.metrics);
    REQUIRE(loaded.provenance.size() == model.provenance.size());
    for (std::size_t g = 0; g < model.provenance.size(); ++g) {
        CHECK(loaded.provenance[g].patch_id == model.provenance[g].patch_id);
        CHECK(loaded.provenance[g].row == model.provenance[g].row);
        CHECK(loaded.provenance[g].col == model.provenance[g].col);
    }

    save_checkpoint(loaded, lmeta, dir / "b.bin");
    CHECK(read_file(dir / "a.bin") == read_file(dir / "b.bin"));
}

TEST_CASE("checkpoint corruption is a format error, absence a dependency error") {
    const fs::path dir = fresh_dir("ckpt_bad");
    const ModelState model = init_model(small_model_config(), 223);
    CheckpointMeta meta;
    meta.stage = 1;
    meta.seed = 223;
    meta.config_hash = "0";
    meta.metrics = json::object();
    save_checkpoint(model, meta, dir / "good.bin");
    const std::string bytes = read_file(dir / "good.bin");

    auto write_bytes = [&](const std::string& b) {
        write_atomic(dir / "bad.bin", b);
        return dir / "bad.bin";
    };

    std::string magic = bytes;
    magic[0] = 'X';
    CHECK_THROWS_AS(load_checkpoint(write_bytes(magic)), format_error);

    std::string keys = bytes;
    keys.replace(keys.find("stage "), 6, "stag  ");
    CHECK_THROWS_AS(load_checkpoint(write_bytes(keys)), format_error);

    CHECK_THROWS_AS(load_checkpoint(write_bytes(bytes.substr(0, bytes.size() - 9))), format_error);
    CHECK_THROWS_AS(load_checkpoint(write_bytes(bytes + "x")), format_error);

    // Declared dimensions that disagree with the stored parameter count.
    std::string dims = bytes;
    const std::size_t mpos = dims.find("model ");
    const std::size_t mend = dims.find('\n', mpos);
    dims.replace(mpos, mend - mpos, "model 2 2 8 10 6 4 0");
    CHECK_THROWS_AS(load_checkpoint(write_bytes(dims)), format_error);

    CHECK_THROWS_AS(load_checkpoint(dir / "never_written.bin"), dependency_error);
}

TEST_CASE("run config parsing is strict and the hash ignores the output directory") {
    const RunConfig defaults = parse_run_config(json{{"seed", 5}});
    CHECK(defaults.seed == 5);
    CHECK(defaults.protos_per_class == 4);
    CHECK(defaults.stage2.top_j == 5);

    CHECK_THROWS_AS(parse_run_config(json{{"sed", 5}}), config_error);
    CHECK_THROWS_AS(parse_run_config(json{{"cohort", {{"noise", 0.2}}}}), config_error);
    CHECK_THROWS_AS(parse_run_config(json{{"stage2", {{"top_j", "five"}}}}), config_error);
    CHECK_THROWS_AS(parse_run_config(json{{"seed", -1}}), config_error);
    CHECK_THROWS_AS(parse_run_config(json{{"seed", 1.5}}), config_error);
    CHECK_THROWS_AS(parse_run_config(json{{"prototypes_per_class", 7}}), config_error);
    CHECK_THROWS_AS(parse_run_config(json::array()), config_error);

    RunConfig a = defaults;
    RunConfig b = defaults;
    b.output_dir = "elsewhere";
    CHECK(config_hash(a) == config_hash(b));
    b.seed = 6;
    CHECK(config_hash(a) != config_hash(b));

    // The canonical form resolves omitted fields, so re-parsing it is stable.
    const RunConfig reparsed = parse_run_config(run_config_json(defaults));
    CHECK(config_hash(reparsed) == config_hash(defaults));
}

TEST_CASE("two pipeline runs with one seed produce byte-identical artifacts") {
    const fs::path dir_a = fresh_dir("twin_a");
    const fs::path dir_b = fresh_dir("twin_b");
    std::ostringstream log;

    json j = tiny_config(31, dir_a);
    RunConfig cfg_a = parse_run_config(j);
    j["output_dir"] = dir_b.string();
    RunConfig cfg_b = parse_run_config(j);

    PipelineOptions opts;
    run_pipeline(cfg_a, opts, log);
    run_pipeline(cfg_b, opts, log);

    int compared = 0;
    for (const auto& entry : fs::directory_iterator(dir_a)) {
        const fs::path twin = dir_b / entry.path().filename();
        REQUIRE(fs::exists(twin));
        if (entry.path().filename() == "config_resolved.json") {
            // Identical up to the directory the artifacts land in.
            json ja = json::parse(read_file(entry.path()));
            json jb = json::parse(read_file(twin));
            ja.erase("output_dir");
            jb.erase("output_dir");
            CHECK(ja == jb);
        } else {
            CHECK(read_file(entry.path()) == read_file(twin));
        }
        ++compared;
    }
    CHECK(compared >= 10);  // cohort, split, three checkpoints, logs, evals...
    CHECK(fs::exists(checkpoint_path(dir_a, 3)));
    CHECK(fs::exists(bce_only_checkpoint_path(dir_a)));

    CHECK(emit_report(dir_a, log));
    const json report = json::parse(read_file(dir_a / "report.json"));
    CHECK(report.at("complete").get<bool>());
    CHECK(report.at("missing").empty());
    CHECK(report.at("ablation").contains("no_attention"));
    CHECK(report.at("lemmas").at("lemma1").contains("all_hold"));
}

TEST_CASE("stages run in separate invocations from on-disk prerequisites") {
    const fs::path dir = fresh_dir("staged");
    std::ostringstream log;
    const RunConfig cfg = parse_run_config(tiny_config(37, dir));

    PipelineOptions opts;
    opts.stages = {StageId::Gen};
    run_pipeline(cfg, opts, log);
    CHECK(fs::exists(cohort_path(dir)));
    CHECK(fs::exists(split_path(dir)));

    opts.stages = {StageId::Stage1};
    run_pipeline(cfg, opts, log);
    CHECK(fs::exists(checkpoint_path(dir, 1)));

    // Stage 3 without stage 2 is a missing prerequisite.
    opts.stages = {StageId::Stage3};
    CHECK_THROWS_AS(run_pipeline(cfg, opts, log), dependency_error);

    opts.stages = {StageId::Stage2, StageId::Stage3, StageId::Eval};
    run_pipeline(cfg, opts, log);
    CHECK(fs::exists(checkpoint_path(dir, 3)));
    CHECK(fs::exists(dir / "eval_stage3.json"));
    CHECK(fs::exists(dir / "lemmas.json"));
    CHECK(fs::exists(dir / "prototypes.json"));

    // A stale checkpoint trained under different settings is rejected, but
    // --allow-mismatch style override lets it pass with a warning.
    RunConfig changed = cfg;
    changed.stage1.lambda_clst = 0.5;
    opts.stages = {StageId::Stage2};
    CHECK_THROWS_AS(run_pipeline(changed, opts, log), config_error);
    PipelineOptions tolerant = opts;
    tolerant.allow_mismatch = true;
    run_pipeline(changed, tolerant, log);
}

TEST_CASE("cli maps error classes onto exit codes") {
    const fs::path dir = fresh_dir("cli");
    const fs::path cfg = write_config(tiny_config(41, dir / "run"), dir, "run.json");

    // Missing prerequisites before anything was generated.
    CHECK(run_cli("train --stage 1 --config " + cfg.string()) == 3);
    CHECK(run_cli("eval --config " + cfg.string()) == 3);
    CHECK(run_cli("lemmas --config " + cfg.string()) == 3);
    CHECK(run_cli("report --out " + (dir / "run").string()) == 3);

    // Malformed configuration files.
    const fs::path bad_key = write_config(json{{"sed", 1}}, dir, "bad_key.json");
    CHECK(run_cli("gen --config " + bad_key.string()) == 2);
    const fs::path bad_json = dir / "bad_syntax.json";
    std::ofstream(bad_json) << "{ not json";
    CHECK(run_cli("gen --config " + bad_json.string()) == 2);
    CHECK(run_cli("train --stage 5 --config " + cfg.string()) == 2);

    // The full pipeline, then idempotent re-evaluation and reporting.
    CHECK(run_cli("run --config " + cfg.string()) == 0);
    CHECK(fs::exists(checkpoint_path(dir / "run", 3)));
    CHECK(run_cli("eval --config " + cfg.string()) == 0);
    CHECK(run_cli("report --config " + cfg.string()) == 0);
    CHECK(run_cli("lemmas --config " + cfg.string()) == 0);
    const json report = json::parse(read_file(dir / "run" / "report.json"));
    CHECK(report.at("complete").get<bool>());

    // A config whose hash disagrees with the stored artifacts.
    json changed = tiny_config(41, dir / "run");
    changed["stage2"]["epochs"] = 3;
    const fs::path changed_cfg = write_config(changed, dir, "changed.json");
    CHECK(run_cli("train --stage 2 --config " + changed_cfg.string()) == 2);
    CHECK(run_cli("train --stage 2 --config " + changed_cfg.string() + " --allow-mismatch") == 0);

    // Numeric failure surfaces as its own exit code.
    CHECK(run_cli("gradcheck --instances 2") == 0);
    CHECK(run_cli("gradcheck --instances 2 --tol 1e-16") == 4);
}

TEST_CASE("cli seed precedence: flag beats environment beats config") {
    const fs::path dir = fresh_dir("cli_seed");

    auto gen_into = [&](const std::string& sub, const std::string& extra_args,
                        const std::string& env) {
        const fs::path out = dir / sub;
        const fs::path cfg = write_config(tiny_config(43, out), dir, sub + ".json");
        const fs::path log = dir / (sub + ".log");
        CHECK(run_cli("gen --config " + cfg.string() + extra_args, env, log) == 0);
        return std::pair{read_file(cohort_path(out)), read_file(log)};
    };

    const auto [plain, plain_log] = gen_into("plain", "", "");
    const auto [env_override, env_log] = gen_into("env", "", "ADAPT_SEED=777");
    const auto [env_explicit, _] = gen_into("env_explicit", " --seed 777", "");
    const auto [flag_wins, flag_log] = gen_into("flag", " --seed 43", "ADAPT_SEED=777");

    CHECK(env_override != plain);                 // environment replaced the config seed
    CHECK(env_override == env_explicit);          // and matches the explicit equivalent
    CHECK(flag_wins == plain);                    // --seed outranks the environment
    CHECK(env_log.find("overridden by ADAPT_SEED=777") != std::string::npos);
    CHECK(flag_log.find("overridden") == std::string::npos);
    CHECK(plain_log.find("overridden") == std::string::npos);

    const fs::path cfg = write_config(tiny_config(43, dir / "junk"), dir, "junk.json");
    CHECK(run_cli("gen --config " + cfg.string(), "ADAPT_SEED=abc") == 2);
}
