#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "adapt/checkpoint.hpp"
#include "adapt/gradcheck.hpp"
#include "adapt/pipeline.hpp"

namespace {

// Exit codes: 0 success, 2 config or format problem, 3 missing prerequisite,
// 4 numeric failure.
constexpr int kExitConfig = 2;
constexpr int kExitDependency = 3;
constexpr int kExitNumeric = 4;

// Seed precedence: --seed beats ADAPT_SEED beats the config file. The
// environment override is logged so runs stay attributable.
adapt::RunConfig resolve_config(const std::string& config_path, bool seed_set,
                                std::uint64_t seed, const std::string& out_dir,
                                std::ostream& log) {
    adapt::RunConfig cfg = adapt::load_run_config(config_path);
    if (seed_set) {
        cfg.seed = seed;
    } else if (const char* env = std::getenv("ADAPT_SEED")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (end == env || *end != '\0') {
            throw adapt::config_error("ADAPT_SEED is not an unsigned integer: '" +
                                      std::string(env) + "'");
        }
        cfg.seed = v;
        log << "[seed] overridden by ADAPT_SEED=" << v << "\n";
    }
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    cfg.validate();
    return cfg;
}

int guarded(const std::function<int()>& body) {
    try {
        return body();
    } catch (const adapt::config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const adapt::format_error& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const adapt::layout_error& e) {
        std::cerr << "layout error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const adapt::dependency_error& e) {
        std::cerr << "dependency error: " << e.what() << "\n";
        return kExitDependency;
    } catch (const adapt::numeric_error& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::domain_error& e) {
        std::cerr << "domain error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prototype-based weakly supervised grading pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool allow_mismatch = false;

    auto add_common = [&](CLI::App* cmd, bool config_required) {
        auto* c = cmd->add_option("--config", config_path, "run configuration JSON");
        if (config_required) c->required();
        cmd->add_option("--seed", seed, "override the config seed");
        cmd->add_option("--out", out_dir, "override the output directory");
        cmd->add_flag("--allow-mismatch", allow_mismatch,
                      "accept artifacts whose config hash disagrees");
    };

    auto* gen = app.add_subcommand("gen", "generate and split a synthetic cohort");
    add_common(gen, true);

    int train_stage = 0;
    auto* train = app.add_subcommand("train", "train one pipeline stage");
    add_common(train, true);
    train->add_option("--stage", train_stage, "stage to train (1, 2 or 3)")->required();

    auto* eval = app.add_subcommand("eval", "evaluate existing checkpoints on the test split");
    add_common(eval, true);

    std::string stages_spec = "gen,1,2,3,eval";
    auto* run = app.add_subcommand("run", "run a sequence of pipeline stages");
    add_common(run, true);
    run->add_option("--stages", stages_spec, "comma list from {gen,1,2,3,eval}");

    auto* report = app.add_subcommand("report", "bundle run artifacts into report.json/csv");
    add_common(report, false);

    std::uint64_t check_seed = 1;
    int check_instances = 50;
    double check_h = 1e-5;
    double check_tol = 1e-5;
    auto* gradcheck = app.add_subcommand("gradcheck",
                                         "finite-difference verification of all stage losses");
    gradcheck->add_option("--seed", check_seed, "seed for instance draws");
    gradcheck->add_option("--instances", check_instances, "tie-free instances per loss");
    gradcheck->add_option("--step", check_h, "central difference step");
    gradcheck->add_option("--tol", check_tol, "max relative error accepted");

    auto* lemmas = app.add_subcommand("lemmas",
                                      "verify the pruning-loss bound and gradient constancy");
    add_common(lemmas, true);

    CLI11_PARSE(app, argc, argv);

    const bool seed_set = gen->count("--seed") || train->count("--seed") ||
                          eval->count("--seed") || run->count("--seed") ||
                          report->count("--seed") || lemmas->count("--seed");

    return guarded([&]() -> int {
        if (gradcheck->parsed()) {
            const auto results =
                adapt::run_loss_gradchecks(check_seed, check_instances, check_h, check_tol);
            bool all_pass = true;
            for (const auto& r : results) {
                std::printf("%-8s instances=%d redraws=%d max_rel_err=%.3e %s\n",
                            r.loss_name.c_str(), r.instances, r.redraws, r.max_rel_err,
                            r.pass ? "pass" : "FAIL");
                all_pass &= r.pass;
            }
            return all_pass ? 0 : kExitNumeric;
        }

        if (report->parsed()) {
            std::filesystem::path dir;
            if (!out_dir.empty()) {
                dir = out_dir;
            } else if (!config_path.empty()) {
                dir = resolve_config(config_path, seed_set, seed, out_dir, std::cout).output_dir;
            } else {
                throw adapt::config_error("report needs --out or --config");
            }
            return adapt::emit_report(dir, std::cout) ? 0 : kExitDependency;
        }

        const adapt::RunConfig cfg =
            resolve_config(config_path, seed_set, seed, out_dir, std::cout);
        adapt::PipelineOptions opts;
        opts.allow_mismatch = allow_mismatch;

        if (gen->parsed()) {
            opts.stages = {adapt::StageId::Gen};
        } else if (train->parsed()) {
            switch (train_stage) {
                case 1: opts.stages = {adapt::StageId::Stage1}; break;
                case 2: opts.stages = {adapt::StageId::Stage2}; break;
                case 3: opts.stages = {adapt::StageId::Stage3}; break;
                default: throw adapt::config_error("--stage must be 1, 2 or 3");
            }
        } else if (eval->parsed()) {
            opts.stages = {adapt::StageId::Eval};
        } else if (run->parsed()) {
            opts.stages = adapt::parse_stage_list(stages_spec);
        } else if (lemmas->parsed()) {
            opts.stages = {};  // handled below
        }

        if (lemmas->parsed()) {
            const auto dir = std::filesystem::path(cfg.output_dir);
            const auto ckpt = adapt::checkpoint_path(dir, 3);
            if (!std::filesystem::exists(ckpt)) {
                throw adapt::dependency_error("missing checkpoint " + ckpt.string() +
                                              " (run stage 3 first)");
            }
            // Evaluation already writes lemmas.json; this entry point re-runs
            // the verifiers standalone and reports to stdout.
            adapt::PipelineOptions eval_opts;
            eval_opts.allow_mismatch = allow_mismatch;
            eval_opts.stages = {adapt::StageId::Eval};
            adapt::run_pipeline(cfg, eval_opts, std::cout);
            const std::string lemma_bytes = adapt::read_file(dir / "lemmas.json");
            std::cout << lemma_bytes;
            const auto j = nlohmann::json::parse(lemma_bytes);
            const bool ok = j.at("lemma1").at("all_hold").get<bool>() &&
                            j.at("lemma2").at("all_hold").get<bool>();
            return ok ? 0 : kExitNumeric;
        }

        adapt::run_pipeline(cfg, opts, std::cout);
        return 0;
    });
}
