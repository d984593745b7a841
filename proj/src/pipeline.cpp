#include "adapt/pipeline.hpp"

#include <fstream>
#include <ostream>
#include <sstream>

#include "adapt/checkpoint.hpp"
#include "adapt/metrics.hpp"
#include "adapt/stage1.hpp"
#include "adapt/stage2.hpp"
#include "adapt/stage3.hpp"

namespace adapt {

namespace fs = std::filesystem;
using nlohmann::json;

std::set<StageId> parse_stage_list(const std::string& spec) {
    std::set<StageId> stages;
    std::string token;
    std::istringstream in(spec);
    while (std::getline(in, token, ',')) {
        const auto first = token.find_first_not_of(" \t");
        if (first == std::string::npos) throw config_error("empty stage name in '" + spec + "'");
        const auto last = token.find_last_not_of(" \t");
        const std::string name = token.substr(first, last - first + 1);
        if (name == "gen") {
            stages.insert(StageId::Gen);
        } else if (name == "1") {
            stages.insert(StageId::Stage1);
        } else if (name == "2") {
            stages.insert(StageId::Stage2);
        } else if (name == "3") {
            stages.insert(StageId::Stage3);
        } else if (name == "eval") {
            stages.insert(StageId::Eval);
        } else {
            throw config_error("unknown stage '" + name + "' (expected gen, 1, 2, 3 or eval)");
        }
    }
    if (stages.empty()) throw config_error("stage list '" + spec + "' selects nothing");
    return stages;
}

fs::path cohort_path(const fs::path& dir) { return dir / "cohort.bin"; }
fs::path split_path(const fs::path& dir) { return dir / "split.json"; }
fs::path checkpoint_path(const fs::path& dir, int stage) {
    return dir / ("checkpoint_stage" + std::to_string(stage) + ".bin");
}
fs::path bce_only_checkpoint_path(const fs::path& dir) {
    return dir / "checkpoint_stage3_bce_only.bin";
}
fs::path stage_log_path(const fs::path& dir, int stage) {
    return dir / ("stage" + std::to_string(stage) + "_log.csv");
}

namespace {

json split_json(const CohortSplit& split, std::uint64_t seed) {
    return json{{"seed", seed},
                {"stratified", split.stratified},
                {"train", split.train},
                {"val", split.val},
                {"test", split.test}};
}

CohortSplit load_split(const fs::path& dir, std::size_t n_bags) {
    const fs::path path = split_path(dir);
    if (!fs::exists(path)) throw dependency_error("missing split file " + path.string());
    const json j = json::parse(read_file(path), nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        throw format_error(path.string() + ": not a JSON object");
    }
    CohortSplit split;
    try {
        split.stratified = j.at("stratified").get<bool>();
        split.train = j.at("train").get<std::vector<int>>();
        split.val = j.at("val").get<std::vector<int>>();
        split.test = j.at("test").get<std::vector<int>>();
    } catch (const json::exception& e) {
        throw format_error(path.string() + ": " + e.what());
    }
    std::vector<char> seen(n_bags, 0);
    for (const auto* part : {&split.train, &split.val, &split.test}) {
        for (int i : *part) {
            if (i < 0 || static_cast<std::size_t>(i) >= n_bags) {
                throw format_error(path.string() + ": slide index " + std::to_string(i) +
                                   " out of range");
            }
            if (seen[static_cast<std::size_t>(i)]++) {
                throw format_error(path.string() + ": slide index " + std::to_string(i) +
                                   " appears twice");
            }
        }
    }
    if (split.train.size() + split.val.size() + split.test.size() != n_bags) {
        throw format_error(path.string() + ": split does not cover the cohort");
    }
    return split;
}

Cohort load_cohort_checked(const RunConfig& cfg, const PipelineOptions& opts, std::ostream& log) {
    const fs::path path = cohort_path(cfg.output_dir);
    if (!fs::exists(path)) throw dependency_error("missing cohort file " + path.string());
    Cohort cohort = load_cohort(path);
    if (!(cohort.config == cfg.cohort_resolved())) {
        if (!opts.allow_mismatch) {
            throw config_error(path.string() +
                               " was generated with a different cohort configuration");
        }
        log << "[warn] cohort configuration mismatch accepted\n";
    }
    return cohort;
}

ModelState load_checkpoint_checked(const RunConfig& cfg, const PipelineOptions& opts, int stage,
                                   const fs::path& path, std::ostream& log) {
    if (!fs::exists(path)) {
        throw dependency_error("missing checkpoint " + path.string() + " (run stage " +
                               std::to_string(stage) + " first)");
    }
    auto [model, meta] = load_checkpoint(path);
    if (meta.stage != stage) {
        throw format_error(path.string() + ": expected a stage " + std::to_string(stage) +
                           " checkpoint, found stage " + std::to_string(meta.stage));
    }
    if (meta.config_hash != config_hash(cfg)) {
        if (!opts.allow_mismatch) {
            throw config_error(path.string() +
                               " was trained under a different configuration (hash " +
                               meta.config_hash + ")");
        }
        log << "[warn] checkpoint configuration mismatch accepted\n";
    }
    return std::move(model);
}

std::string csv_meta(const RunConfig& cfg, int stage) {
    return "stage=" + std::to_string(stage) + " seed=" + std::to_string(cfg.seed) +
           " config=" + config_hash(cfg);
}

json eval_json(const EvalResult& r) {
    json counts = json::array();
    for (int s = 0; s < kNumGrades; ++s) {
        const GradeCounts& c = r.counts[static_cast<std::size_t>(s)];
        counts.push_back(json{{"grade", int(grade_of_slot(s))},
                              {"tp", c.tp},
                              {"fp", c.fp},
                              {"fn", c.fn},
                              {"tn", c.tn}});
    }
    return json{{"f1", r.f1}, {"macro_f1", r.macro_f1}, {"hamming", r.hamming},
                {"counts", counts}, {"n_bags", r.n_bags}};
}

json lemma1_json(const Lemma1Report& r) {
    json grades = json::array();
    for (const auto& g : r.grades) {
        grades.push_back(json{{"grade", int(g.grade)},
                              {"skipped", g.skipped},
                              {"w", g.w},
                              {"observed_loss", g.observed_loss},
                              {"inner_product", g.inner_product},
                              {"bound", g.bound},
                              {"holds", g.holds},
                              {"support_overlap", g.support_overlap}});
    }
    return json{{"tau", r.tau}, {"all_hold", r.all_hold}, {"grades", grades}};
}

json lemma2_json(const Lemma2Report& r) {
    json grades = json::array();
    for (const auto& g : r.grades) {
        grades.push_back(json{{"grade", int(g.grade)},
                              {"skipped", g.skipped},
                              {"w", g.w},
                              {"expected", g.expected},
                              {"max_deviation", g.max_deviation},
                              {"holds", g.holds}});
    }
    return json{{"all_hold", r.all_hold}, {"grades", grades}};
}

void write_json(const fs::path& path, const json& j) { write_atomic(path, j.dump(2) + "\n"); }

void run_gen(const RunConfig& cfg, std::ostream& log) {
    const Cohort cohort = generate_cohort(cfg.cohort_resolved());
    save_cohort(cohort, cohort_path(cfg.output_dir));
    const CohortSplit split = split_cohort(cohort.bags, cfg.split, cfg.seed);
    write_json(split_path(cfg.output_dir), split_json(split, cfg.seed));
    log << "[gen] " << cohort.bags.size() << " slides, " << cohort.pd.size()
        << " labeled patches; split " << split.train.size() << "/" << split.val.size() << "/"
        << split.test.size() << (split.stratified ? "" : " (global fallback)") << "\n";
}

void run_stage1(const RunConfig& cfg, const PipelineOptions& opts, std::ostream& log) {
    const Cohort cohort = load_cohort_checked(cfg, opts, log);
    ModelState model = init_model(cfg.model(), cfg.seed);
    const TrainReport report = train_stage1(model, cohort.pd, cfg.stage1, cfg.seed);

    CheckpointMeta meta;
    meta.stage = 1;
    meta.seed = cfg.seed;
    meta.config_hash = config_hash(cfg);
    meta.metrics = json{{"final_accuracy", report.final_accuracy},
                        {"converged_early", report.converged_early},
                        {"ce_clamp_events", report.ce_clamp_events},
                        {"fc_frozen_ok", report.fc_frozen_ok},
                        {"encoder_frozen_ok", report.encoder_frozen_ok},
                        {"prototypes_frozen_ok", report.prototypes_frozen_ok},
                        {"aborted", report.aborted}};
    save_checkpoint(model, meta, checkpoint_path(cfg.output_dir, 1));
    write_atomic(stage_log_path(cfg.output_dir, 1), stage1_csv(report, csv_meta(cfg, 1)));
    log << "[stage1] epochs=" << report.stage1_rows.size()
        << " final_accuracy=" << report.final_accuracy
        << (report.converged_early ? " (early stop)" : "") << "\n";
    if (report.aborted) {
        throw numeric_error("stage 1 aborted: " + report.abort_reason +
                            " (last good state saved)");
    }
}

void run_stage2(const RunConfig& cfg, const PipelineOptions& opts, std::ostream& log) {
    const Cohort cohort = load_cohort_checked(cfg, opts, log);
    const CohortSplit split = load_split(cfg.output_dir, cohort.bags.size());
    ModelState model =
        load_checkpoint_checked(cfg, opts, 1, checkpoint_path(cfg.output_dir, 1), log);
    const auto train = select_bags(cohort, split.train);
    const auto val = select_bags(cohort, split.val);
    const TrainReport report = train_stage2(model, train, val, cfg.stage2, cfg.seed);

    CheckpointMeta meta;
    meta.stage = 2;
    meta.seed = cfg.seed;
    meta.config_hash = config_hash(cfg);
    meta.metrics = json{{"best_val_f1", report.best_val_f1},
                        {"best_val_hamming", report.best_val_hamming},
                        {"best_epoch", report.best_epoch},
                        {"empty_fp_events", report.empty_fp_events},
                        {"prototypes_frozen_ok", report.prototypes_frozen_ok},
                        {"aborted", report.aborted}};
    save_checkpoint(model, meta, checkpoint_path(cfg.output_dir, 2));
    write_atomic(stage_log_path(cfg.output_dir, 2), stage2_csv(report, csv_meta(cfg, 2)));
    log << "[stage2] best_val_f1=" << report.best_val_f1 << " best_epoch=" << report.best_epoch
        << "\n";
    if (report.aborted) {
        throw numeric_error("stage 2 aborted: " + report.abort_reason +
                            " (last good state saved)");
    }
}

void run_stage3(const RunConfig& cfg, const PipelineOptions& opts, std::ostream& log) {
    const Cohort cohort = load_cohort_checked(cfg, opts, log);
    const CohortSplit split = load_split(cfg.output_dir, cohort.bags.size());
    const auto train = select_bags(cohort, split.train);
    const auto val = select_bags(cohort, split.val);

    const auto train_variant = [&](bool use_attention_loss, const fs::path& out) -> TrainReport {
        ModelState model =
            load_checkpoint_checked(cfg, opts, 2, checkpoint_path(cfg.output_dir, 2), log);
        Stage3Config variant = cfg.stage3;
        variant.use_attention_loss = use_attention_loss;
        const TrainReport report =
            train_stage3(model, train, val, variant, cfg.stage2.top_j, cfg.seed);
        CheckpointMeta meta;
        meta.stage = 3;
        meta.seed = cfg.seed;
        meta.config_hash = config_hash(cfg);
        meta.metrics = json{{"best_val_f1", report.best_val_f1},
                            {"best_val_hamming", report.best_val_hamming},
                            {"best_epoch", report.best_epoch},
                            {"use_attention_loss", use_attention_loss},
                            {"encoder_frozen_ok", report.encoder_frozen_ok},
                            {"prototypes_frozen_ok", report.prototypes_frozen_ok},
                            {"aborted", report.aborted}};
        save_checkpoint(model, meta, out);
        return report;
    };

    const TrainReport report = train_variant(cfg.stage3.use_attention_loss,
                                             checkpoint_path(cfg.output_dir, 3));
    write_atomic(stage_log_path(cfg.output_dir, 3), stage3_csv(report, csv_meta(cfg, 3)));
    log << "[stage3] best_val_f1=" << report.best_val_f1 << " best_epoch=" << report.best_epoch
        << "\n";

    // Ablation twin: same starting point trained on the classification term
    // alone, kept for the pruning-objective comparison at evaluation time.
    const TrainReport bce_report = train_variant(false, bce_only_checkpoint_path(cfg.output_dir));
    log << "[stage3] classification-only twin best_val_f1=" << bce_report.best_val_f1 << "\n";

    if (report.aborted) {
        throw numeric_error("stage 3 aborted: " + report.abort_reason +
                            " (last good state saved)");
    }
    if (bce_report.aborted) {
        throw numeric_error("stage 3 classification-only twin aborted: " +
                            bce_report.abort_reason);
    }
}

void run_eval(const RunConfig& cfg, const PipelineOptions& opts, std::ostream& log) {
    const Cohort cohort = load_cohort_checked(cfg, opts, log);
    const CohortSplit split = load_split(cfg.output_dir, cohort.bags.size());
    const auto test = select_bags(cohort, split.test);
    const fs::path dir = cfg.output_dir;

    bool any = false;
    for (int stage = 1; stage <= 3; ++stage) {
        const fs::path path = checkpoint_path(dir, stage);
        if (!fs::exists(path)) continue;
        const ModelState model = load_checkpoint_checked(cfg, opts, stage, path, log);
        const EvalResult r = evaluate(model, test, cfg.stage2.top_j, cfg.stage2.threshold);
        write_json(dir / ("eval_stage" + std::to_string(stage) + ".json"), eval_json(r));
        write_atomic(dir / ("eval_stage" + std::to_string(stage) + ".csv"),
                     eval_csv(r, csv_meta(cfg, stage)));
        log << "[eval] stage" << stage << " test macro_f1=" << r.macro_f1
            << " hamming=" << r.hamming << "\n";
        any = true;

        if (stage == 3) {
            const Stage3Config& s3 = cfg.stage3;
            const Lemma1Report l1 = verify_lemma1(model, test, s3, cfg.stage2.top_j);
            const Lemma2Report l2 = verify_lemma2(model, test, s3, cfg.stage2.top_j);
            write_json(dir / "lemmas.json",
                       json{{"lemma1", lemma1_json(l1)}, {"lemma2", lemma2_json(l2)}});

            const ImportanceReport imp = prototype_importance(model, test, cfg.stage2.top_j);
            const LowAttentionFractions low =
                low_attention_fraction(model, test, cfg.stage2.top_j);
            json grades = json::array();
            for (int s = 0; s < kNumGrades; ++s) {
                json entries = json::array();
                for (const auto& e : imp.per_grade[static_cast<std::size_t>(s)]) {
                    const PushProvenance& prov =
                        model.provenance[static_cast<std::size_t>(e.prototype_id)];
                    entries.push_back(json{{"prototype", e.prototype_id},
                                           {"score", e.score},
                                           {"source_patch", prov.patch_id},
                                           {"cell_row", prov.row},
                                           {"cell_col", prov.col}});
                }
                grades.push_back(json{{"grade", int(grade_of_slot(s))},
                                      {"ranked", entries},
                                      {"low_attention_fraction",
                                       low.per_grade[static_cast<std::size_t>(s)]},
                                      {"defined", low.defined[static_cast<std::size_t>(s)]}});
            }
            write_json(dir / "prototypes.json",
                       json{{"grades", grades},
                            {"low_attention_overall", low.overall},
                            {"threshold", low.threshold}});

            const CrossActivationMatrix cam = cross_activation(model, cohort.pd);
            write_atomic(dir / "cross_activation.csv", cross_activation_csv(cam, csv_meta(cfg, 3)));
            json rows = json::array();
            static const char* kClassNames[] = {"benign", "grade3", "grade4", "grade5"};
            for (int row = 0; row < kNumClasses; ++row) {
                rows.push_back(json{
                    {"true_class", kClassNames[row]},
                    {"values", cam.values[static_cast<std::size_t>(row)]},
                    {"patches", cam.row_counts[static_cast<std::size_t>(row)]}});
            }
            write_json(dir / "cross_activation.json", json{{"rows", rows}});
        }
    }
    const fs::path bce_path = bce_only_checkpoint_path(dir);
    if (fs::exists(bce_path)) {
        const ModelState model = load_checkpoint_checked(cfg, opts, 3, bce_path, log);
        const EvalResult r = evaluate(model, test, cfg.stage2.top_j, cfg.stage2.threshold);
        write_json(dir / "eval_stage3_bce_only.json", eval_json(r));
        log << "[eval] stage3 classification-only twin test macro_f1=" << r.macro_f1 << "\n";
        any = true;
    }
    if (!any) throw dependency_error("no checkpoints to evaluate in " + dir.string());
}

}  // namespace

void run_pipeline(const RunConfig& cfg, const PipelineOptions& opts, std::ostream& log) {
    cfg.validate();
    std::error_code ec;
    fs::create_directories(cfg.output_dir, ec);
    if (ec) {
        throw dependency_error("cannot create output directory " + cfg.output_dir + ": " +
                               ec.message());
    }
    write_json(fs::path(cfg.output_dir) / "config_resolved.json", run_config_json(cfg));

    if (opts.stages.count(StageId::Gen)) run_gen(cfg, log);
    if (opts.stages.count(StageId::Stage1)) run_stage1(cfg, opts, log);
    if (opts.stages.count(StageId::Stage2)) run_stage2(cfg, opts, log);
    if (opts.stages.count(StageId::Stage3)) run_stage3(cfg, opts, log);
    if (opts.stages.count(StageId::Eval)) run_eval(cfg, opts, log);
}

namespace {

// Loads a JSON artifact, records its absence, and keeps the report assembly
// below declarative.
json load_section(const fs::path& path, const std::string& name,
                  std::vector<std::string>& missing) {
    if (!fs::exists(path)) {
        missing.push_back(name);
        return json("missing");
    }
    const json j = json::parse(read_file(path), nullptr, false);
    if (j.is_discarded()) throw format_error(path.string() + ": invalid JSON");
    return j;
}

}  // namespace

bool emit_report(const fs::path& run_dir, std::ostream& log) {
    json report;
    std::vector<std::string> missing;

    const fs::path cfg_path = run_dir / "config_resolved.json";
    if (fs::exists(cfg_path)) {
        const json cfg_json = json::parse(read_file(cfg_path), nullptr, false);
        if (cfg_json.is_discarded()) throw format_error(cfg_path.string() + ": invalid JSON");
        const RunConfig cfg = parse_run_config(cfg_json);
        report["config_hash"] = config_hash(cfg);
        report["seed"] = cfg.seed;
    } else {
        missing.push_back("config");
    }

    if (fs::exists(split_path(run_dir))) {
        const json j = json::parse(read_file(split_path(run_dir)), nullptr, false);
        if (j.is_discarded()) throw format_error("split.json: invalid JSON");
        report["split"] = json{{"train", j.at("train").size()},
                               {"val", j.at("val").size()},
                               {"test", j.at("test").size()},
                               {"stratified", j.at("stratified")}};
    } else {
        missing.push_back("split");
    }

    json stage_metrics = json::object();
    for (int stage = 1; stage <= 3; ++stage) {
        const fs::path path = checkpoint_path(run_dir, stage);
        const std::string key = "stage" + std::to_string(stage);
        if (!fs::exists(path)) {
            missing.push_back(key + "_checkpoint");
            stage_metrics[key] = "missing";
            continue;
        }
        stage_metrics[key] = load_checkpoint(path).second.metrics;
    }
    report["stage_metrics"] = stage_metrics;

    // Section 1: stage-wise test scores.
    json stage_f1 = json::object();
    std::string csv = "section,macro_f1,hamming\n";
    auto add_csv_row = [&csv](const std::string& name, const json& j) {
        if (!j.is_object()) return;
        std::ostringstream row;
        row << name << ',' << j.at("macro_f1").get<double>() << ','
            << j.at("hamming").get<double>() << '\n';
        csv += row.str();
    };
    for (int stage = 1; stage <= 3; ++stage) {
        const std::string key = "stage" + std::to_string(stage);
        stage_f1[key] = load_section(run_dir / ("eval_" + key + ".json"), "eval_" + key, missing);
        add_csv_row(key, stage_f1[key]);
    }
    report["stage_f1"] = stage_f1;

    // Section 2 + 5: low-attention fractions and prototype provenance.
    const json protos = load_section(run_dir / "prototypes.json", "prototypes", missing);
    if (protos.is_object()) {
        json low = json{{"overall", protos.at("low_attention_overall")},
                        {"threshold", protos.at("threshold")},
                        {"per_grade", json::array()}};
        for (const auto& g : protos.at("grades")) {
            low["per_grade"].push_back(json{{"grade", g.at("grade")},
                                            {"fraction", g.at("low_attention_fraction")},
                                            {"defined", g.at("defined")}});
        }
        report["low_attention"] = low;
        report["prototypes"] = protos.at("grades");
    } else {
        report["low_attention"] = "missing";
        report["prototypes"] = "missing";
    }

    // Section 3: cross-activation matrix.
    report["cross_activation"] =
        load_section(run_dir / "cross_activation.json", "cross_activation", missing);

    // Section 4: pruning-stage module ablation. The no-attention row is the
    // bag-stage model, then the gated model without and with the attention
    // objective.
    json ablation = json::object();
    ablation["no_attention"] = stage_f1["stage2"];
    ablation["attention_bce"] = load_section(run_dir / "eval_stage3_bce_only.json",
                                             "eval_stage3_bce_only", missing);
    ablation["attention_bce_attn"] = stage_f1["stage3"];
    add_csv_row("ablation_attention_bce", ablation["attention_bce"]);
    report["ablation"] = ablation;

    report["lemmas"] = load_section(run_dir / "lemmas.json", "lemmas", missing);

    report["missing"] = missing;
    report["complete"] = missing.empty();
    write_json(run_dir / "report.json", report);
    write_atomic(run_dir / "report.csv", csv);
    if (missing.empty()) {
        log << "[report] complete\n";
    } else {
        log << "[report] incomplete, missing:";
        for (const auto& m : missing) log << ' ' << m;
        log << "\n";
    }
    return missing.empty();
}

}  // namespace adapt
