#include "cdr/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>

#include "cdr/io.hpp"
#include "cdr/narrative.hpp"

namespace cdr {

namespace {

namespace fs = std::filesystem;

std::string seed_dir(const std::string& run_dir, std::uint64_t seed) {
    return run_dir + "/seed_" + std::to_string(seed);
}

nlohmann::json read_json(const std::string& path) {
    const std::string text = read_text_file(path);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(path + ": malformed JSON: " + e.what());
    }
}

void write_json(const std::string& path, const nlohmann::ordered_json& j) { write_text_file(path, j.dump(2) + "\n"); }

// Test-split indices stored by train, resolved against the cohort.
std::vector<std::size_t> load_test_split(const std::string& dir, const std::vector<PatientRecord>& cohort) {
    const auto j = read_json(dir + "/split.json");
    std::map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        by_id[cohort[i].patient_id] = i;
    }
    std::vector<std::size_t> idx;
    for (const auto& id : j.at("test")) {
        auto it = by_id.find(id.get<std::string>());
        if (it == by_id.end()) {
            throw std::runtime_error(dir + "/split.json: patient " + id.get<std::string>() +
                                     " is not in the configured cohort");
        }
        idx.push_back(it->second);
    }
    return idx;
}

void write_report_pair(const std::string& out_dir, const std::string& stem, const MetricsReport& test,
                       const MetricsReport& ood, const nlohmann::ordered_json& config) {
    test.check_consistency();
    ood.check_consistency();
    write_text_file(out_dir + "/metrics_" + stem + ".csv", metrics_csv(test));
    write_text_file(out_dir + "/metrics_" + stem + "_test_ood.csv", metrics_csv(ood));
    nlohmann::ordered_json j;
    j["config"] = config;
    j["reports"] = {to_json(test), to_json(ood)};
    write_json(out_dir + "/metrics_" + stem + ".json", j);
}

}  // namespace

std::string model_tag(const RunConfig& config) {
    const auto& w = config.weights;
    return w.confounder == 0.0 && w.joint == 0.0 && w.mix == 0.0 ? "erm_ablation" : "causal_network";
}

void run_generate(const CohortConfig& config, const std::string& out_dir) {
    const auto cohort = generate(config);
    write_jsonl(out_dir + "/cohort.jsonl", cohort);
    write_json(out_dir + "/cohort.manifest.json", cohort_manifest(config, OracleSpec{}));
}

ProtocolResult run_train(const RunConfig& config, const std::string& out_dir) {
    config.validate();
    const std::string tag = model_tag(config);
    auto res = run_protocol(config, out_dir, tag);
    write_json(out_dir + "/config.json", config.to_json());
    nlohmann::ordered_json summary;
    summary["model"] = tag;
    summary["config"] = config.to_json();
    auto seeds = nlohmann::ordered_json::array();
    for (const auto& run : res.runs) {
        nlohmann::ordered_json s;
        s["seed"] = run.seed;
        s["n_train"] = run.split.train.size();
        s["n_test"] = run.split.test.size();
        if (!run.trace.empty()) {
            const auto& last = run.trace.back();
            s["final_epoch"] = {{"epoch", last.epoch},   {"L_o", last.causal}, {"L_c", last.confounder},
                                {"L_co", last.joint},    {"L_mix", last.mix},  {"total", last.total}};
        }
        seeds.push_back(std::move(s));
    }
    summary["seeds"] = std::move(seeds);
    write_json(out_dir + "/train.json", summary);
    return res;
}

RunConfig load_run_config(const std::string& run_dir) {
    return RunConfig::from_json(read_json(run_dir + "/config.json"));
}

std::vector<MetricsReport> run_evaluate(const std::string& run_dir) {
    const RunConfig config = load_run_config(run_dir);
    const auto cohort = load_training_cohort(config);
    const auto ood = load_ood_cohort(config);
    const Vocabulary vocab = build_vocabulary();
    const auto seqs = encode_cohort(cohort, vocab);
    const auto ood_seqs = encode_cohort(ood, vocab);
    std::vector<std::size_t> ood_idx(ood.size());
    std::iota(ood_idx.begin(), ood_idx.end(), 0);
    std::vector<double> ood_y;
    for (const auto& r : ood) {
        ood_y.push_back(r.pasc_score_future);
    }

    MetricsReport test, test_ood;
    test.model = test_ood.model = model_tag(config);
    test_ood.evaluation = "test_ood";
    test.threshold = test_ood.threshold = config.severity_threshold;
    for (std::uint64_t seed : config.seeds) {
        const std::string dir = seed_dir(run_dir, seed);
        const Model model = load_checkpoint(dir);
        const auto idx = load_test_split(dir, cohort);
        std::vector<double> y;
        for (std::size_t i : idx) {
            y.push_back(cohort[i].pasc_score_future);
        }
        test.rows.push_back(evaluate_predictions(seed, predict_indices(model, seqs, idx), y, config.severity_threshold));
        test_ood.rows.push_back(
            evaluate_predictions(seed, predict_indices(model, ood_seqs, ood_idx), ood_y, config.severity_threshold));
    }
    write_report_pair(run_dir, test.model, test, test_ood, config.to_json());
    return {test, test_ood};
}

std::vector<SaliencyTable> run_saliency(const std::string& run_dir) {
    const RunConfig config = load_run_config(run_dir);
    const auto cohort = load_training_cohort(config);
    const Vocabulary vocab = build_vocabulary();
    const auto seqs = encode_cohort(cohort, vocab);
    std::vector<SaliencyTable> tables;
    for (std::uint64_t seed : config.seeds) {
        const std::string dir = seed_dir(run_dir, seed);
        const Model model = load_checkpoint(dir);
        std::vector<TokenSequence> test_seqs;
        for (std::size_t i : load_test_split(dir, cohort)) {
            test_seqs.push_back(seqs[i]);
        }
        SaliencyTable t = extract_saliency(model, test_seqs, vocab);
        t.seed = seed;
        tables.push_back(std::move(t));
    }
    write_text_file(run_dir + "/saliency.csv", saliency_csv(tables));
    nlohmann::ordered_json j;
    j["config"] = config.to_json();
    j["tables"] = nlohmann::ordered_json::array();
    for (const auto& t : tables) {
        j["tables"].push_back(to_json(t));
    }
    write_json(run_dir + "/saliency.json", j);
    return tables;
}

BaselineResult run_baseline(const RunConfig& config, const std::string& out_dir) {
    auto res = run_baselines(config);
    const auto cfg = config.to_json();
    write_report_pair(out_dir, "gbt_baseline", res.gbt_test, res.gbt_ood, cfg);
    write_report_pair(out_dir, "mean_predictor", res.mean_test, res.mean_ood, cfg);
    for (std::size_t s = 0; s < res.models.size(); ++s) {
        write_json(out_dir + "/gbt/seed_" + std::to_string(config.seeds[s]) + ".json", res.models[s].to_json());
    }
    return res;
}

ReportInputs run_report(const std::vector<std::string>& inputs, const std::string& out_dir) {
    ReportInputs merged;
    auto sources = nlohmann::ordered_json::array();
    std::vector<std::string> dirs;
    for (const auto& d : inputs) {
        if (std::find(dirs.begin(), dirs.end(), d) == dirs.end()) {
            dirs.push_back(d);
        }
    }
    for (const auto& dir : dirs) {
        if (!fs::is_directory(dir)) {
            throw IoError("report input '" + dir + "' is not a directory");
        }
        std::vector<std::string> files;
        for (const auto& entry : fs::directory_iterator(dir)) {
            const std::string name = entry.path().filename().string();
            if (name.rfind("metrics_", 0) == 0 && entry.path().extension() == ".json") {
                files.push_back(name);
            }
        }
        std::sort(files.begin(), files.end());
        for (const auto& name : files) {
            const auto j = read_json(dir + "/" + name);
            for (const auto& r : j.at("reports")) {
                merged.reports.push_back(metrics_report_from_json(r));
            }
            sources.push_back({{"file", name}, {"config", j.at("config")}});
        }
        if (fs::exists(dir + "/saliency.json")) {
            const auto j = read_json(dir + "/saliency.json");
            for (const auto& t : j.at("tables")) {
                merged.saliency.push_back(saliency_table_from_json(t));
            }
            sources.push_back({{"file", "saliency.json"}, {"config", j.at("config")}});
        }
    }
    if (merged.reports.empty()) {
        throw IoError("report: no metrics_*.json found in the input directories");
    }
    merged.provenance = {{"sources", std::move(sources)}};
    emit_report(out_dir, merged);
    return merged;
}

}  // namespace cdr
