#include "cdr/gbt.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "cdr/cohort.hpp"
#include "cdr/tensor.hpp"
#include "cdr/trainer.hpp"

namespace cdr {

namespace {

using Orders = std::vector<std::vector<std::size_t>>;

Orders sorted_orders(const std::vector<std::vector<double>>& X, const std::vector<std::size_t>& idx,
                     std::size_t n_features) {
    Orders orders(n_features, idx);
    for (std::size_t f = 0; f < n_features; ++f) {
        std::sort(orders[f].begin(), orders[f].end(), [&](std::size_t a, std::size_t b) {
            return X[a][f] < X[b][f] || (X[a][f] == X[b][f] && a < b);
        });
    }
    return orders;
}

BestSplit scan(const std::vector<std::vector<double>>& X, const std::vector<double>& r, const Orders& orders) {
    BestSplit best;
    if (orders.empty() || orders.front().size() < 2) {
        return best;
    }
    const auto& any = orders.front();
    const double n = static_cast<double>(any.size());
    double total = 0.0, total_sq = 0.0;
    for (std::size_t i : any) {
        total += r[i];
        total_sq += r[i] * r[i];
    }
    const double parent = total * total / n;
    const double min_gain = 1e-12 * std::max(1.0, total_sq);
    for (std::size_t f = 0; f < orders.size(); ++f) {
        const auto& order = orders[f];
        double left = 0.0;
        for (std::size_t k = 1; k < order.size(); ++k) {
            left += r[order[k - 1]];
            const double a = X[order[k - 1]][f];
            const double b = X[order[k]][f];
            if (!(a < b)) {
                continue;
            }
            const double nl = static_cast<double>(k);
            const double right = total - left;
            const double gain = left * left / nl + right * right / (n - nl) - parent;
            if (gain > min_gain && gain > best.gain) {
                double mid = a + (b - a) / 2.0;
                if (!(mid < b)) {
                    mid = a;
                }
                best = {true, f, mid, gain};
            }
        }
    }
    return best;
}

double mean_of(const std::vector<double>& r, const std::vector<std::size_t>& idx) {
    double s = 0.0;
    for (std::size_t i : idx) {
        s += r[i];
    }
    return s / static_cast<double>(idx.size());
}

int grow(RegressionTree& tree, const std::vector<std::vector<double>>& X, const std::vector<double>& r,
         const Orders& orders, std::size_t depth_left) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back({});
    const auto& idx = orders.front();
    const BestSplit split = depth_left > 0 ? scan(X, r, orders) : BestSplit{};
    if (!split.found) {
        tree.nodes[id].value = mean_of(r, idx);
        return id;
    }
    Orders left(orders.size()), right(orders.size());
    for (std::size_t f = 0; f < orders.size(); ++f) {
        for (std::size_t i : orders[f]) {
            (X[i][split.feature] <= split.threshold ? left[f] : right[f]).push_back(i);
        }
    }
    tree.nodes[id].feature = static_cast<int>(split.feature);
    tree.nodes[id].threshold = split.threshold;
    const int l = grow(tree, X, r, left, depth_left - 1);
    const int rr = grow(tree, X, r, right, depth_left - 1);
    tree.nodes[id].left = l;
    tree.nodes[id].right = rr;
    return id;
}

void check_matrix(const std::vector<std::vector<double>>& X, std::size_t n_rows, std::size_t n_features) {
    if (X.size() != n_rows) {
        throw ShapeError("gbt: " + std::to_string(X.size()) + " feature rows for " + std::to_string(n_rows) +
                         " targets");
    }
    for (const auto& row : X) {
        if (row.size() != n_features) {
            throw ShapeError("gbt: feature row of width " + std::to_string(row.size()) + ", expected " +
                             std::to_string(n_features));
        }
    }
}

std::size_t node_depth(const RegressionTree& t, int id) {
    const auto& n = t.nodes[static_cast<std::size_t>(id)];
    if (n.feature < 0) {
        return 0;
    }
    return 1 + std::max(node_depth(t, n.left), node_depth(t, n.right));
}

}  // namespace

const std::array<std::string_view, kNumFeatures>& feature_names() {
    static const std::array<std::string_view, kNumFeatures> names{
        "age_years",        "menopause",      "sleep_disorder",     "heart_condition",  "mental_health",
        "breathlessness",   "malaise",        "unrefreshing_sleep", "brain_fog",        "insomnia",
        "joint_pain",       "resting_hr",     "hrv_rmssd",          "breathing_rate",   "sleep_latency",
        "rem_onset",        "restless_periods", "sedentary_min",    "very_active_min",  "prior_pasc_score"};
    return names;
}

std::vector<double> features(const PatientRecord& rec) {
    std::vector<double> x;
    x.reserve(kNumFeatures);
    x.push_back(rec.age_years);
    for (bool b : {rec.menopause, rec.sleep_disorder, rec.heart_condition, rec.mental_health}) {
        x.push_back(b ? 1.0 : 0.0);
    }
    for (bool b : rec.symptom_flags) {
        x.push_back(b ? 1.0 : 0.0);
    }
    for (std::size_t c = 0; c < kNumChannels; ++c) {
        x.push_back(rec.channel_mean(static_cast<Channel>(c)));
    }
    x.push_back(rec.prior_pasc_score);
    return x;
}

std::vector<std::vector<double>> feature_matrix(const std::vector<PatientRecord>& records) {
    std::vector<std::vector<double>> X;
    X.reserve(records.size());
    for (const auto& r : records) {
        X.push_back(features(r));
    }
    return X;
}

double RegressionTree::predict(const std::vector<double>& x) const {
    std::size_t i = 0;
    while (nodes[i].feature >= 0) {
        const auto& n = nodes[i];
        i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right);
    }
    return nodes[i].value;
}

std::size_t RegressionTree::depth() const { return nodes.empty() ? 0 : node_depth(*this, 0); }

double BoostedModel::predict(const std::vector<double>& x) const {
    if (x.size() != n_features) {
        throw ShapeError("gbt predict: feature vector of width " + std::to_string(x.size()) + ", expected " +
                         std::to_string(n_features));
    }
    double s = 0.0;
    for (const auto& t : trees) {
        s += t.predict(x);
    }
    return base + eta * s;
}

std::vector<double> BoostedModel::predict(const std::vector<std::vector<double>>& X) const {
    std::vector<double> out;
    out.reserve(X.size());
    for (const auto& x : X) {
        out.push_back(predict(x));
    }
    return out;
}

nlohmann::ordered_json BoostedModel::to_json() const {
    nlohmann::ordered_json j;
    j["base"] = base;
    j["eta"] = eta;
    j["max_depth"] = max_depth;
    j["n_features"] = n_features;
    j["trees"] = nlohmann::ordered_json::array();
    for (const auto& t : trees) {
        auto nodes = nlohmann::ordered_json::array();
        for (const auto& n : t.nodes) {
            if (n.feature >= 0) {
                nodes.push_back({{"feature", n.feature}, {"threshold", n.threshold}, {"left", n.left},
                                 {"right", n.right}});
            } else {
                nodes.push_back({{"value", n.value}});
            }
        }
        j["trees"].push_back(std::move(nodes));
    }
    return j;
}

BoostedModel BoostedModel::from_json(const nlohmann::json& j) {
    BoostedModel m;
    m.base = j.at("base").get<double>();
    m.eta = j.at("eta").get<double>();
    m.max_depth = j.at("max_depth").get<std::size_t>();
    m.n_features = j.at("n_features").get<std::size_t>();
    for (const auto& jt : j.at("trees")) {
        RegressionTree t;
        for (const auto& jn : jt) {
            TreeNode n;
            if (jn.contains("feature")) {
                n.feature = jn.at("feature").get<int>();
                n.threshold = jn.at("threshold").get<double>();
                n.left = jn.at("left").get<int>();
                n.right = jn.at("right").get<int>();
            } else {
                n.value = jn.at("value").get<double>();
            }
            t.nodes.push_back(n);
        }
        if (t.nodes.empty()) {
            throw std::runtime_error("gbt model: empty tree");
        }
        const auto size = static_cast<int>(t.nodes.size());
        for (const auto& n : t.nodes) {
            const bool bad_child = n.feature >= 0 && (n.left <= 0 || n.right <= 0 || n.left >= size || n.right >= size);
            if (n.feature >= static_cast<int>(m.n_features) || bad_child) {
                throw std::runtime_error("gbt model: malformed tree node");
            }
        }
        m.trees.push_back(std::move(t));
    }
    return m;
}

BestSplit best_split(const std::vector<std::vector<double>>& X, const std::vector<double>& r,
                     const std::vector<std::size_t>& idx) {
    if (idx.empty()) {
        return {};
    }
    return scan(X, r, sorted_orders(X, idx, X[idx.front()].size()));
}

RegressionTree fit_tree(const std::vector<std::vector<double>>& X, const std::vector<double>& r,
                        std::size_t max_depth) {
    if (X.empty()) {
        throw std::invalid_argument("fit_tree: no rows");
    }
    check_matrix(X, r.size(), X.front().size());
    std::vector<std::size_t> idx(X.size());
    std::iota(idx.begin(), idx.end(), 0);
    RegressionTree tree;
    grow(tree, X, r, sorted_orders(X, idx, X.front().size()), max_depth);
    return tree;
}

BoostedModel fit_gbt(const std::vector<std::vector<double>>& X, const std::vector<double>& y, std::size_t rounds,
                     double eta, std::size_t max_depth) {
    if (y.size() < 2) {
        throw std::invalid_argument("fit_gbt: need at least 2 rows");
    }
    if (rounds < 1) {
        throw std::invalid_argument("fit_gbt: rounds must be >= 1");
    }
    if (!(eta >= 0.0)) {
        throw std::invalid_argument("fit_gbt: eta must be >= 0");
    }
    check_matrix(X, y.size(), X.front().size());
    BoostedModel m;
    m.eta = eta;
    m.max_depth = max_depth;
    m.n_features = X.front().size();
    m.base = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());

    std::vector<std::size_t> idx(X.size());
    std::iota(idx.begin(), idx.end(), 0);
    const Orders root = sorted_orders(X, idx, m.n_features);
    std::vector<double> fitted(y.size(), m.base);
    std::vector<double> r(y.size());
    for (std::size_t round = 0; round < rounds; ++round) {
        for (std::size_t i = 0; i < y.size(); ++i) {
            r[i] = y[i] - fitted[i];
        }
        RegressionTree tree;
        grow(tree, X, r, root, max_depth);
        if (tree.nodes.size() == 1) {
            break;
        }
        for (std::size_t i = 0; i < y.size(); ++i) {
            fitted[i] += eta * tree.predict(X[i]);
        }
        m.trees.push_back(std::move(tree));
    }
    return m;
}

BaselineResult run_baselines(const RunConfig& config) {
    config.validate();
    const auto cohort = load_training_cohort(config);
    const auto ood = load_ood_cohort(config);
    const auto X = feature_matrix(cohort);
    const auto X_ood = feature_matrix(ood);
    std::vector<double> y, y_ood;
    for (const auto& r : cohort) {
        y.push_back(r.pasc_score_future);
    }
    for (const auto& r : ood) {
        y_ood.push_back(r.pasc_score_future);
    }

    BaselineResult res;
    for (MetricsReport* rep : {&res.gbt_test, &res.gbt_ood, &res.mean_test, &res.mean_ood}) {
        rep->threshold = config.severity_threshold;
    }
    res.gbt_test.model = res.gbt_ood.model = "gbt_baseline";
    res.mean_test.model = res.mean_ood.model = "mean_predictor";
    res.gbt_ood.evaluation = res.mean_ood.evaluation = "test_ood";

    for (std::uint64_t seed : config.seeds) {
        const Split split = split_stratified(cohort, config.split_fraction, seed);
        std::vector<std::vector<double>> X_tr, X_te;
        std::vector<double> y_tr, y_te;
        for (std::size_t i : split.train) {
            X_tr.push_back(X[i]);
            y_tr.push_back(y[i]);
        }
        for (std::size_t i : split.test) {
            X_te.push_back(X[i]);
            y_te.push_back(y[i]);
        }
        BoostedModel model = fit_gbt(X_tr, y_tr, config.gbt_rounds, config.gbt_eta, config.gbt_depth);
        res.gbt_test.rows.push_back(evaluate_predictions(seed, model.predict(X_te), y_te, config.severity_threshold));
        res.gbt_ood.rows.push_back(evaluate_predictions(seed, model.predict(X_ood), y_ood, config.severity_threshold));

        const double mean = std::accumulate(y_tr.begin(), y_tr.end(), 0.0) / static_cast<double>(y_tr.size());
        res.mean_test.rows.push_back(
            evaluate_predictions(seed, std::vector<double>(y_te.size(), mean), y_te, config.severity_threshold));
        res.mean_ood.rows.push_back(
            evaluate_predictions(seed, std::vector<double>(y_ood.size(), mean), y_ood, config.severity_threshold));
        res.models.push_back(std::move(model));
    }
    return res;
}

}  // namespace cdr
