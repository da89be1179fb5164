#include "cdr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "cdr/io.hpp"

namespace cdr {

namespace {

void check_pair(const std::vector<double>& y_hat, const std::vector<double>& y, const char* what) {
    if (y.empty()) {
        throw std::invalid_argument(std::string(what) + ": empty input");
    }
    if (y_hat.size() != y.size()) {
        throw std::invalid_argument(std::string(what) + ": " + std::to_string(y_hat.size()) + " predictions for " +
                                    std::to_string(y.size()) + " labels");
    }
}

nlohmann::ordered_json opt_json(const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

std::string opt_csv(const std::optional<double>& v) { return v ? format_double(*v) : "null"; }

std::string pm(const Summary& s, int digits) {
    if (s.n == 0) {
        return "n/a";
    }
    std::string out = format_fixed(s.mean, digits) + " ± " + format_fixed(s.sd, digits);
    if (s.single) {
        out += "*";
    }
    return out;
}

std::string pad(std::string s, std::size_t width) {
    // Column widths count code points so that "±" occupies one cell.
    std::size_t cells = 0;
    for (unsigned char c : s) {
        cells += (c & 0xC0) != 0x80;
    }
    if (cells < width) {
        s.append(width - cells, ' ');
    }
    return s;
}

std::string report_file_stem(const MetricsReport& r) {
    return r.evaluation == "test" ? r.model : r.model + "_" + r.evaluation;
}

}  // namespace

RegressionMetrics regression_metrics(const std::vector<double>& y_hat, const std::vector<double>& y) {
    check_pair(y_hat, y, "regression_metrics");
    double se = 0.0, ae = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double e = y_hat[i] - y[i];
        se += e * e;
        ae += std::abs(e);
    }
    const double n = static_cast<double>(y.size());
    RegressionMetrics m;
    m.mse = se / n;
    m.rmse = std::sqrt(m.mse);
    m.mae = ae / n;
    return m;
}

SeverityMetrics severity_metrics(const std::vector<double>& y_hat, const std::vector<double>& y, double theta) {
    check_pair(y_hat, y, "severity_metrics");
    if (!std::isfinite(theta)) {
        throw std::invalid_argument("severity_metrics: threshold must be finite");
    }
    SeverityMetrics m;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const bool pred = y_hat[i] >= theta;
        const bool truth = y[i] >= theta;
        m.tp += pred && truth;
        m.fp += pred && !truth;
        m.tn += !pred && !truth;
        m.fn += !pred && truth;
    }
    m.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(y.size());
    if (m.tp + m.fp > 0) {
        m.precision = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
    }
    return m;
}

SeedMetrics evaluate_predictions(std::uint64_t seed, const std::vector<double>& y_hat, const std::vector<double>& y,
                                 double theta) {
    const auto reg = regression_metrics(y_hat, y);
    std::vector<double> clipped(y_hat);
    for (auto& v : clipped) {
        v = std::clamp(v, 0.0, kMaxScore);
    }
    const auto sev = severity_metrics(clipped, y, theta);
    return {seed, reg.mse, reg.rmse, reg.mae, sev.accuracy, sev.precision};
}

Summary summarize(const std::vector<double>& values) {
    Summary s;
    s.n = values.size();
    if (s.n == 0) {
        return s;
    }
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
    if (s.n == 1) {
        s.single = true;
        return s;
    }
    double ss = 0.0;
    for (double v : values) {
        ss += (v - s.mean) * (v - s.mean);
    }
    s.sd = std::sqrt(ss / static_cast<double>(s.n - 1));
    return s;
}

std::map<std::string, Summary> MetricsReport::aggregate() const {
    std::vector<double> mse, rmse, mae, acc, prec;
    std::size_t nulls = 0;
    for (const auto& r : rows) {
        mse.push_back(r.mse);
        rmse.push_back(r.rmse);
        mae.push_back(r.mae);
        acc.push_back(r.accuracy);
        if (r.precision) {
            prec.push_back(*r.precision);
        } else {
            ++nulls;
        }
    }
    std::map<std::string, Summary> out{{"mse", summarize(mse)},
                                       {"rmse", summarize(rmse)},
                                       {"mae", summarize(mae)},
                                       {"accuracy", summarize(acc)},
                                       {"precision", summarize(prec)}};
    out["precision"].excluded = nulls;
    return out;
}

void MetricsReport::check_consistency() const {
    for (const auto& r : rows) {
        if (std::abs(r.rmse - std::sqrt(r.mse)) > 1e-9) {
            throw std::logic_error(model + ": seed " + std::to_string(r.seed) + " has RMSE " + format_double(r.rmse) +
                                   " but sqrt(MSE) " + format_double(std::sqrt(r.mse)));
        }
        if (r.accuracy < 0.0 || r.accuracy > 1.0 || (r.precision && (*r.precision < 0.0 || *r.precision > 1.0))) {
            throw std::logic_error(model + ": seed " + std::to_string(r.seed) + " has a rate outside [0, 1]");
        }
    }
}

SaliencyTable extract_saliency(const Model& model, const std::vector<TokenSequence>& seqs, const Vocabulary& vocab,
                               std::size_t batch_size) {
    SaliencyTable table;
    std::vector<double> max_s(vocab.size(), 0.0), sum_s(vocab.size(), 0.0);
    std::vector<std::size_t> count(vocab.size(), 0);
    for (std::size_t start = 0; start < seqs.size(); start += batch_size) {
        std::vector<const TokenSequence*> chunk;
        for (std::size_t i = start; i < std::min(seqs.size(), start + batch_size); ++i) {
            chunk.push_back(&seqs[i]);
        }
        const PackedBatch batch = pack(chunk);
        const auto s = causal_saliency(model, batch);
        for (std::size_t r = 0; r < batch.rows(); ++r) {
            const std::size_t id = batch.token_ids[r];
            max_s[id] = count[id] == 0 ? s[r] : std::max(max_s[id], s[r]);
            sum_s[id] += s[r];
            ++count[id];
            table.occurrences[batch.categories[r]].push_back(s[r]);
        }
    }
    for (const auto& e : vocab.entries()) {
        const auto id = static_cast<std::size_t>(e.id);
        if (count[id] == 0) {
            if (e.id != Vocabulary::kPad) {
                std::clog << "saliency: token '" << e.token << "' never occurs (count 0); row omitted\n";
            }
            continue;
        }
        table.rows.push_back(
            {e.token, e.category, max_s[id], sum_s[id] / static_cast<double>(count[id]), count[id]});
    }
    return table;
}

double roc_auc(const std::vector<double>& positives, const std::vector<double>& negatives) {
    if (positives.empty() || negatives.empty()) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    // Rank-sum form of the Mann-Whitney statistic with mid-ranks for ties.
    std::vector<std::pair<double, bool>> all;
    all.reserve(positives.size() + negatives.size());
    for (double v : positives) {
        all.emplace_back(v, true);
    }
    for (double v : negatives) {
        all.emplace_back(v, false);
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < all.size();) {
        std::size_t j = i;
        std::size_t pos = 0;
        while (j < all.size() && all[j].first == all[i].first) {
            pos += all[j].second;
            ++j;
        }
        const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
        rank_sum += mid_rank * static_cast<double>(pos);
        i = j;
    }
    const double np = static_cast<double>(positives.size());
    const double nn = static_cast<double>(negatives.size());
    return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double saliency_auc(const SaliencyTable& table) {
    static const std::vector<double> none;
    auto get = [&](TokenCategory c) -> const std::vector<double>& {
        auto it = table.occurrences.find(c);
        return it == table.occurrences.end() ? none : it->second;
    };
    return roc_auc(get(TokenCategory::causal_symptom), get(TokenCategory::confounder));
}

double category_mean(const SaliencyTable& table, TokenCategory category) {
    auto it = table.occurrences.find(category);
    if (it == table.occurrences.end() || it->second.empty()) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    return std::accumulate(it->second.begin(), it->second.end(), 0.0) / static_cast<double>(it->second.size());
}

nlohmann::ordered_json to_json(const MetricsReport& report) {
    nlohmann::ordered_json j;
    j["model"] = report.model;
    j["evaluation"] = report.evaluation;
    j["severity_threshold"] = report.threshold;
    auto rows = nlohmann::ordered_json::array();
    for (const auto& r : report.rows) {
        rows.push_back({{"seed", r.seed},
                        {"mse", r.mse},
                        {"rmse", r.rmse},
                        {"mae", r.mae},
                        {"accuracy", r.accuracy},
                        {"precision", opt_json(r.precision)},
                        {"precision_null", !r.precision.has_value()}});
    }
    j["rows"] = std::move(rows);
    nlohmann::ordered_json agg;
    const auto summary = report.aggregate();
    for (const auto& name : metric_names()) {
        const auto& s = summary.at(name);
        agg[name] = {{"mean", s.mean}, {"sd", s.sd}, {"n", s.n}, {"sd_flag_single_seed", s.single},
                     {"excluded_null", s.excluded}};
    }
    j["aggregate"] = std::move(agg);
    return j;
}

MetricsReport metrics_report_from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.model = j.at("model").get<std::string>();
    r.evaluation = j.at("evaluation").get<std::string>();
    r.threshold = j.at("severity_threshold").get<double>();
    for (const auto& row : j.at("rows")) {
        SeedMetrics m;
        m.seed = row.at("seed").get<std::uint64_t>();
        m.mse = row.at("mse").get<double>();
        m.rmse = row.at("rmse").get<double>();
        m.mae = row.at("mae").get<double>();
        m.accuracy = row.at("accuracy").get<double>();
        if (!row.at("precision").is_null()) {
            m.precision = row.at("precision").get<double>();
        }
        r.rows.push_back(m);
    }
    return r;
}

std::string metrics_csv(const MetricsReport& report) {
    std::ostringstream out;
    out << "row,seed,mse,rmse,mae,accuracy,precision\n";
    for (const auto& r : report.rows) {
        out << "seed," << r.seed << ',' << format_double(r.mse) << ',' << format_double(r.rmse) << ','
            << format_double(r.mae) << ',' << format_double(r.accuracy) << ',' << opt_csv(r.precision) << '\n';
    }
    const auto agg = report.aggregate();
    for (const char* stat : {"mean", "sd"}) {
        out << stat << ',';
        for (const auto& name : metric_names()) {
            const auto& s = agg.at(name);
            out << ',' << (s.n == 0 ? std::string("null") : format_double(stat[0] == 'm' ? s.mean : s.sd));
        }
        out << '\n';
    }
    return out.str();
}

std::string saliency_csv(const std::vector<SaliencyTable>& tables) {
    std::ostringstream out;
    out << "seed,token,category,max_saliency,mean_saliency,count\n";
    for (const auto& t : tables) {
        for (const auto& r : t.rows) {
            out << t.seed << ',' << r.token << ',' << to_string(r.category) << ',' << format_double(r.max_saliency)
                << ',' << format_double(r.mean_saliency) << ',' << r.count << '\n';
        }
    }
    return out.str();
}

nlohmann::ordered_json report_json(const ReportInputs& inputs) {
    nlohmann::ordered_json j;
    j["format"] = "cdr-report";
    j["format_version"] = 1;
    j["provenance"] = inputs.provenance;
    auto models = nlohmann::ordered_json::array();
    for (const auto& r : inputs.reports) {
        models.push_back(to_json(r));
    }
    j["models"] = std::move(models);
    nlohmann::ordered_json sal;
    sal["present"] = !inputs.saliency.empty();
    auto seeds = nlohmann::ordered_json::array();
    for (const auto& t : inputs.saliency) {
        nlohmann::ordered_json s;
        s["seed"] = t.seed;
        const double auc = saliency_auc(t);
        s["auc_causal_vs_confounder"] = std::isfinite(auc) ? nlohmann::ordered_json(auc) : nullptr;
        nlohmann::ordered_json means;
        for (auto c : {TokenCategory::causal_symptom, TokenCategory::confounder, TokenCategory::administrative,
                       TokenCategory::wearable_bin, TokenCategory::structural}) {
            const double m = category_mean(t, c);
            means[std::string(to_string(c))] = std::isfinite(m) ? nlohmann::ordered_json(m) : nullptr;
        }
        s["category_mean_saliency"] = std::move(means);
        auto rows = nlohmann::ordered_json::array();
        for (const auto& r : t.rows) {
            rows.push_back({{"token", r.token},
                            {"category", std::string(to_string(r.category))},
                            {"max_saliency", r.max_saliency},
                            {"mean_saliency", r.mean_saliency},
                            {"count", r.count}});
        }
        s["rows"] = std::move(rows);
        seeds.push_back(std::move(s));
    }
    sal["seeds"] = std::move(seeds);
    j["saliency"] = std::move(sal);
    return j;
}

std::string format_report_text(const ReportInputs& inputs) {
    std::ostringstream out;
    // Group reports by evaluation set so each table compares like with like.
    std::vector<std::string> evaluations;
    for (const auto& r : inputs.reports) {
        if (std::find(evaluations.begin(), evaluations.end(), r.evaluation) == evaluations.end()) {
            evaluations.push_back(r.evaluation);
        }
    }
    for (const auto& ev : evaluations) {
        std::vector<const MetricsReport*> cols;
        for (const auto& r : inputs.reports) {
            if (r.evaluation == ev) {
                cols.push_back(&r);
            }
        }
        out << "Model performance on " << ev << " (mean ± sample sd over seeds; severity threshold "
            << format_fixed(cols.front()->threshold, 2) << ")\n\n";
        out << pad("Metric", 12);
        for (const auto* c : cols) {
            out << pad(c->model, 24);
        }
        out << '\n';
        std::vector<std::map<std::string, Summary>> aggs;
        for (const auto* c : cols) {
            aggs.push_back(c->aggregate());
        }
        const std::vector<std::pair<std::string, std::string>> labels{
            {"mse", "MSE"}, {"rmse", "RMSE"}, {"mae", "MAE"}, {"accuracy", "Accuracy"}, {"precision", "Precision"}};
        for (const auto& [key, label] : labels) {
            out << pad(label, 12);
            for (const auto& a : aggs) {
                out << pad(pm(a.at(key), key == "accuracy" || key == "precision" ? 3 : 2), 24);
            }
            out << '\n';
        }
        out << pad("Seeds", 12);
        for (const auto* c : cols) {
            out << pad(std::to_string(c->rows.size()), 24);
        }
        out << '\n';
        bool any_single = false, any_null = false;
        for (const auto& a : aggs) {
            any_single |= a.at("mse").single;
            any_null |= a.at("precision").excluded > 0;
        }
        if (any_single) {
            out << "* single seed: sd reported as 0\n";
        }
        if (any_null) {
            out << "precision excludes seeds with no predicted positives\n";
        }
        out << '\n';
    }

    if (inputs.saliency.empty()) {
        out << "Causal attribution and saliency: absent\n";
        return out.str();
    }
    // Per token: seed-mean of the max and mean causal-channel weight.
    struct Acc {
        TokenCategory category;
        double max_sum = 0.0, mean_sum = 0.0;
        std::size_t seeds = 0;
    };
    std::vector<std::pair<std::string, Acc>> tokens;
    for (const auto& t : inputs.saliency) {
        for (const auto& r : t.rows) {
            auto it = std::find_if(tokens.begin(), tokens.end(), [&](const auto& p) { return p.first == r.token; });
            if (it == tokens.end()) {
                tokens.push_back({r.token, Acc{r.category}});
                it = tokens.end() - 1;
            }
            it->second.max_sum += r.max_saliency;
            it->second.mean_sum += r.mean_saliency;
            ++it->second.seeds;
        }
    }
    out << "Causal attribution and saliency (causal-channel gate weight; seed means over "
        << inputs.saliency.size() << " seed(s))\n\n";
    out << pad("Category", 17) << pad("Representative tokens", 40) << pad("Max saliency", 15) << "Mean saliency\n";
    for (auto c : {TokenCategory::causal_symptom, TokenCategory::wearable_bin, TokenCategory::confounder,
                   TokenCategory::administrative, TokenCategory::structural}) {
        std::vector<std::pair<double, std::string>> ranked;
        double cat_mean = 0.0;
        std::size_t seeds = 0;
        for (const auto& t : inputs.saliency) {
            const double m = category_mean(t, c);
            if (std::isfinite(m)) {
                cat_mean += m;
                ++seeds;
            }
        }
        for (const auto& [tok, acc] : tokens) {
            if (acc.category == c) {
                ranked.emplace_back(acc.max_sum / static_cast<double>(acc.seeds), tok);
            }
        }
        if (ranked.empty()) {
            continue;
        }
        std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
        std::string names;
        for (std::size_t i = 0; i < std::min<std::size_t>(3, ranked.size()); ++i) {
            names += (i ? ", " : "") + ranked[i].second;
        }
        out << pad(std::string(to_string(c)), 17) << pad(names, 40) << pad(format_fixed(ranked.front().first, 4), 15)
            << format_fixed(cat_mean / static_cast<double>(std::max<std::size_t>(seeds, 1)), 4) << '\n';
    }
    std::vector<double> aucs;
    for (const auto& t : inputs.saliency) {
        const double a = saliency_auc(t);
        if (std::isfinite(a)) {
            aucs.push_back(a);
        }
    }
    if (!aucs.empty()) {
        const auto s = summarize(aucs);
        out << "\nToken-level ROC-AUC, CAUSAL_SYMPTOM vs CONFOUNDER: " << pm(s, 3) << '\n';
    }
    out << "\nPer-token saliency\n\n";
    out << pad("Token", 18) << pad("Category", 17) << pad("Max", 10) << "Mean\n";
    for (const auto& [tok, acc] : tokens) {
        out << pad(tok, 18) << pad(std::string(to_string(acc.category)), 17)
            << pad(format_fixed(acc.max_sum / static_cast<double>(acc.seeds), 4), 10)
            << format_fixed(acc.mean_sum / static_cast<double>(acc.seeds), 4) << '\n';
    }
    return out.str();
}

void emit_report(const std::string& out_dir, const ReportInputs& inputs) {
    if (inputs.reports.empty()) {
        throw std::invalid_argument("emit_report: at least one model report is required");
    }
    for (const auto& r : inputs.reports) {
        r.check_consistency();
    }
    for (const auto& r : inputs.reports) {
        write_text_file(out_dir + "/metrics_" + report_file_stem(r) + ".csv", metrics_csv(r));
    }
    write_text_file(out_dir + "/saliency.csv", saliency_csv(inputs.saliency));
    write_text_file(out_dir + "/report.json", report_json(inputs).dump(2) + "\n");
    write_text_file(out_dir + "/report.txt", format_report_text(inputs));
}

nlohmann::ordered_json to_json(const SaliencyTable& table) {
    nlohmann::ordered_json j;
    j["seed"] = table.seed;
    auto rows = nlohmann::ordered_json::array();
    for (const auto& r : table.rows) {
        rows.push_back({{"token", r.token},
                        {"category", std::string(to_string(r.category))},
                        {"max_saliency", r.max_saliency},
                        {"mean_saliency", r.mean_saliency},
                        {"count", r.count}});
    }
    j["rows"] = std::move(rows);
    nlohmann::ordered_json occ = nlohmann::ordered_json::object();
    for (const auto& [c, v] : table.occurrences) {
        occ[std::string(to_string(c))] = v;
    }
    j["occurrences"] = std::move(occ);
    return j;
}

SaliencyTable saliency_table_from_json(const nlohmann::json& j) {
    SaliencyTable t;
    t.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& r : j.at("rows")) {
        SaliencyRow row;
        row.token = r.at("token").get<std::string>();
        row.category = category_from_string(r.at("category").get<std::string>());
        row.max_saliency = r.at("max_saliency").get<double>();
        row.mean_saliency = r.at("mean_saliency").get<double>();
        row.count = r.at("count").get<std::size_t>();
        t.rows.push_back(std::move(row));
    }
    for (const auto& [key, v] : j.at("occurrences").items()) {
        t.occurrences[category_from_string(key)] = v.get<std::vector<double>>();
    }
    return t;
}

}  // namespace cdr
