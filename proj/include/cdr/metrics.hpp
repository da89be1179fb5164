#pragma once

// Regression and severity metrics, multi-seed aggregation, token saliency
// tables and report emission.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdr/disentangle.hpp"
#include "cdr/narrative.hpp"

namespace cdr {

struct RegressionMetrics {
    double mse = 0.0;
    double rmse = 0.0;
    double mae = 0.0;
};

// Throws std::invalid_argument on empty or mismatched inputs.
RegressionMetrics regression_metrics(const std::vector<double>& y_hat, const std::vector<double>& y);

struct SeverityMetrics {
    double accuracy = 0.0;
    std::optional<double> precision;  // none when nothing is predicted positive
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

// Positive means score >= theta on either side.
SeverityMetrics severity_metrics(const std::vector<double>& y_hat, const std::vector<double>& y, double theta);

struct SeedMetrics {
    std::uint64_t seed = 0;
    double mse = 0.0;
    double rmse = 0.0;
    double mae = 0.0;
    double accuracy = 0.0;
    std::optional<double> precision;
};

// Raw predictions feed the regression metrics; clipped ones the severity metrics.
SeedMetrics evaluate_predictions(std::uint64_t seed, const std::vector<double>& y_hat, const std::vector<double>& y,
                                 double theta);

struct Summary {
    double mean = 0.0;
    double sd = 0.0;  // sample sd; 0 when n == 1
    std::size_t n = 0;
    bool single = false;  // n == 1, sd not estimable
    std::size_t excluded = 0;  // null values left out
};

Summary summarize(const std::vector<double>& values);

inline const std::vector<std::string>& metric_names() {
    static const std::vector<std::string> names{"mse", "rmse", "mae", "accuracy", "precision"};
    return names;
}

struct MetricsReport {
    std::string model;  // causal_network | gbt_baseline | mean_predictor | erm_ablation
    std::string evaluation = "test";
    double threshold = 12.0;
    std::vector<SeedMetrics> rows;

    std::map<std::string, Summary> aggregate() const;
    // Throws std::logic_error when RMSE != sqrt(MSE) beyond 1e-9 on any row.
    void check_consistency() const;
};

struct SaliencyRow {
    std::string token;
    TokenCategory category = TokenCategory::structural;
    double max_saliency = 0.0;
    double mean_saliency = 0.0;
    std::size_t count = 0;
};

struct SaliencyTable {
    std::uint64_t seed = 0;
    std::vector<SaliencyRow> rows;  // vocabulary order, absent tokens omitted
    // Every occurrence's causal-channel weight, grouped by category.
    std::map<TokenCategory, std::vector<double>> occurrences;
};

// Gathers A[·,·,1] at every token occurrence over the sequences.
SaliencyTable extract_saliency(const Model& model, const std::vector<TokenSequence>& seqs, const Vocabulary& vocab,
                               std::size_t batch_size = 64);

// Probability that a random positive outranks a random negative; ties count 1/2.
double roc_auc(const std::vector<double>& positives, const std::vector<double>& negatives);

// Occurrence-level AUC of CAUSAL_SYMPTOM against CONFOUNDER saliency.
double saliency_auc(const SaliencyTable& table);
// Mean saliency over all occurrences of a category (NaN if none).
double category_mean(const SaliencyTable& table, TokenCategory category);

struct ReportInputs {
    std::vector<MetricsReport> reports;
    std::vector<SaliencyTable> saliency;  // one per seed; may be empty
    nlohmann::ordered_json provenance;    // resolved config and defaults
};

// Writes metrics_<model>.csv per report, saliency.csv, report.json and
// report.txt under out_dir. Deterministic byte output.
void emit_report(const std::string& out_dir, const ReportInputs& inputs);

std::string format_report_text(const ReportInputs& inputs);
nlohmann::ordered_json report_json(const ReportInputs& inputs);
nlohmann::ordered_json to_json(const MetricsReport& report);
MetricsReport metrics_report_from_json(const nlohmann::json& j);
std::string metrics_csv(const MetricsReport& report);
std::string saliency_csv(const std::vector<SaliencyTable>& tables);
// Includes every occurrence so AUC and category means survive a round trip.
nlohmann::ordered_json to_json(const SaliencyTable& table);
SaliencyTable saliency_table_from_json(const nlohmann::json& j);

}  // namespace cdr
