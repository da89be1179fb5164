// cdr: generate cohorts, train and evaluate the disentangled regressor, fit
// baselines and emit reports.
//
// Exit codes: 0 success, 1 gradient check failure or internal error,
// 2 invalid configuration or arguments, 3 missing or unreadable files,
// 4 training divergence.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "cdr/cohort.hpp"
#include "cdr/io.hpp"
#include "cdr/model_check.hpp"
#include "cdr/pipeline.hpp"
#include "cdr/tensor.hpp"
#include "cdr/trainer.hpp"

namespace {

struct Options {
    std::string config_path;
    std::string out_dir;
    std::vector<std::string> overrides;
    std::vector<std::string> inputs;

    std::size_t n = 1155;
    std::uint64_t seed = 42;
    double rho = 0.6;
    std::string env = "train";
    double noise_sd = 2.5;

    std::uint64_t check_seed = 7;
};

cdr::RunConfig resolve_config(const Options& o) {
    cdr::RunConfig c;
    if (!o.config_path.empty()) {
        c = cdr::RunConfig::from_json(nlohmann::json::parse(cdr::read_text_file(o.config_path)));
    }
    for (const auto& kv : o.overrides) {
        c.apply_override(kv);
    }
    c.validate();
    return c;
}

void print_reports(const std::vector<cdr::MetricsReport>& reports) {
    for (const auto& r : reports) {
        const auto agg = r.aggregate();
        std::printf("%-16s %-9s rmse %.4f ± %.4f  accuracy %.3f ± %.3f  (%zu seeds)\n", r.model.c_str(),
                    r.evaluation.c_str(), agg.at("rmse").mean, agg.at("rmse").sd, agg.at("accuracy").mean,
                    agg.at("accuracy").sd, r.rows.size());
    }
}

int gradcheck(const Options& o) {
    constexpr double kTolerance = 1e-4;
    bool ok = true;
    for (auto mode : {cdr::CombineMode::add, cdr::CombineMode::concat}) {
        cdr::ModelCheckSettings s;
        s.seed = o.check_seed;
        s.combine = mode;
        double worst = 0.0;
        for (const auto& r : cdr::check_model_gradients(s)) {
            const bool pass = r.max_rel_error <= kTolerance;
            ok = ok && pass;
            worst = std::max(worst, r.max_rel_error);
            if (!pass) {
                std::printf("FAIL %-28s rel %.3e abs %.3e\n", r.name.c_str(), r.max_rel_error, r.max_abs_error);
            }
        }
        std::printf("combine=%s: max relative error %.3e (tolerance %.0e)\n", cdr::to_string(mode).c_str(), worst,
                    kTolerance);
    }
    std::printf("gradcheck %s\n", ok ? "passed" : "FAILED");
    return ok ? 0 : 1;
}

int dispatch(const std::string& cmd, const Options& o) {
    if (cmd == "generate") {
        cdr::CohortConfig c;
        c.n_patients = o.n;
        c.seed = o.seed;
        c.spurious_strength = o.rho;
        c.environment = cdr::environment_from_string(o.env);
        c.noise_sd = o.noise_sd;
        c.validate();
        cdr::run_generate(c, o.out_dir);
        std::printf("wrote %zu records to %s/cohort.jsonl\n", c.n_patients, o.out_dir.c_str());
    } else if (cmd == "train") {
        const auto c = resolve_config(o);
        auto res = cdr::run_train(c, o.out_dir);
        print_reports({res.test, res.ood});
    } else if (cmd == "evaluate") {
        print_reports(cdr::run_evaluate(o.out_dir));
    } else if (cmd == "saliency") {
        for (const auto& t : cdr::run_saliency(o.out_dir)) {
            std::printf("seed %llu: causal-vs-confounder AUC %.4f, mean saliency causal %.4f confounder %.4f "
                        "administrative %.4f\n",
                        static_cast<unsigned long long>(t.seed), cdr::saliency_auc(t),
                        cdr::category_mean(t, cdr::TokenCategory::causal_symptom),
                        cdr::category_mean(t, cdr::TokenCategory::confounder),
                        cdr::category_mean(t, cdr::TokenCategory::administrative));
        }
    } else if (cmd == "baseline") {
        const auto res = cdr::run_baseline(resolve_config(o), o.out_dir);
        print_reports({res.gbt_test, res.gbt_ood, res.mean_test, res.mean_ood});
    } else if (cmd == "report") {
        std::vector<std::string> inputs = o.inputs.empty() ? std::vector<std::string>{o.out_dir} : o.inputs;
        const auto merged = cdr::run_report(inputs, o.out_dir);
        std::cout << cdr::format_report_text(merged);
    } else if (cmd == "gradcheck") {
        return gradcheck(o);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    cdr::retain_heap_buffers();
    CLI::App app{"Causal-disentangled severity regression on synthetic cohorts"};
    app.require_subcommand(1);
    Options o;

    auto add_run_options = [&](CLI::App* sub) {
        sub->add_option("--config", o.config_path, "Run configuration JSON");
        sub->add_option("--out", o.out_dir, "Output directory")->required();
        sub->add_option("overrides", o.overrides, "Config overrides as key=value");
    };

    auto* gen = app.add_subcommand("generate", "Write a synthetic cohort as JSONL plus manifest");
    gen->add_option("--n", o.n, "Number of patients")->capture_default_str();
    gen->add_option("--seed", o.seed, "Cohort seed")->capture_default_str();
    gen->add_option("--rho", o.rho, "Symptom/confounder latent correlation in [-1, 1]")->capture_default_str();
    gen->add_option("--env", o.env, "train | test_iid | test_ood")->capture_default_str();
    gen->add_option("--noise-sd", o.noise_sd, "Label noise sd")->capture_default_str();
    gen->add_option("--out", o.out_dir, "Output directory")->required();

    add_run_options(app.add_subcommand("train", "Train every configured seed and write checkpoints"));
    app.add_subcommand("evaluate", "Metrics of a train run on its test split and the OOD cohort")
        ->add_option("--out", o.out_dir, "Train run directory")
        ->required();
    app.add_subcommand("saliency", "Per-token causal-channel saliency of a train run")
        ->add_option("--out", o.out_dir, "Train run directory")
        ->required();
    add_run_options(app.add_subcommand("baseline", "Fit gradient-boosted trees and the mean predictor"));
    auto* rep = app.add_subcommand("report", "Merge metrics and saliency into report tables");
    rep->add_option("--out", o.out_dir, "Output directory")->required();
    rep->add_option("--input", o.inputs, "Directories holding metrics_*.json (default: --out)");
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every parameter group");
    gc->add_option("--seed", o.check_seed, "Seed of the probe model and batch")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    const std::string cmd = app.get_subcommands().front()->get_name();
    try {
        return dispatch(cmd, o);
    } catch (const cdr::DivergenceError& e) {
        std::cerr << "error: training diverged (seed " << e.seed << ", epoch " << e.epoch << ", step " << e.step
                  << "): " << e.what() << '\n';
        return 4;
    } catch (const cdr::IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: malformed JSON input: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
