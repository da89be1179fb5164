#pragma once

// Squared-error gradient boosting with exact greedy splits, plus the
// training-mean predictor. Both run on a fixed tabular view of a record.

#include <array>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cdr/metrics.hpp"
#include "cdr/record.hpp"

namespace cdr {

// age, 4 comorbidity flags, 6 symptom flags, 8 four-week channel means,
// prior score.
inline constexpr std::size_t kNumFeatures = 20;

const std::array<std::string_view, kNumFeatures>& feature_names();
std::vector<double> features(const PatientRecord& record);
std::vector<std::vector<double>> feature_matrix(const std::vector<PatientRecord>& records);

struct TreeNode {
    // Internal when feature >= 0: x[feature] <= threshold goes left.
    int feature = -1;
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;  // leaf output
};

struct RegressionTree {
    std::vector<TreeNode> nodes;  // nodes[0] is the root

    double predict(const std::vector<double>& x) const;
    std::size_t depth() const;
};

struct BoostedModel {
    double base = 0.0;
    double eta = 0.1;
    std::size_t max_depth = 4;
    std::size_t n_features = kNumFeatures;
    std::vector<RegressionTree> trees;

    double predict(const std::vector<double>& x) const;
    std::vector<double> predict(const std::vector<std::vector<double>>& X) const;

    nlohmann::ordered_json to_json() const;
    static BoostedModel from_json(const nlohmann::json& j);
};

struct BestSplit {
    bool found = false;
    std::size_t feature = 0;
    double threshold = 0.0;
    double gain = 0.0;  // reduction in squared error
};

// Best variance-reduction split of rows `idx`, thresholds at midpoints of
// consecutive distinct values. Ties prefer the lower feature, then the lower
// threshold.
BestSplit best_split(const std::vector<std::vector<double>>& X, const std::vector<double>& r,
                     const std::vector<std::size_t>& idx);

RegressionTree fit_tree(const std::vector<std::vector<double>>& X, const std::vector<double>& r,
                        std::size_t max_depth);

// Stops early once a round finds no split (residuals are then constant).
BoostedModel fit_gbt(const std::vector<std::vector<double>>& X, const std::vector<double>& y, std::size_t rounds,
                     double eta, std::size_t max_depth);

struct RunConfig;

struct BaselineResult {
    MetricsReport gbt_test, gbt_ood;
    MetricsReport mean_test, mean_ood;
    std::vector<BoostedModel> models;  // one per seed
};

// Fits both baselines on each seed's split of the training cohort.
BaselineResult run_baselines(const RunConfig& config);

}  // namespace cdr
