#include "cdr/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>
#include <span>

#include "cdr/rng.hpp"

namespace cdr {

namespace {

// Stream ids for derive_seed; fixed so that each consumer owns its stream.
constexpr std::uint64_t kSplitStream = 101;

constexpr std::array<double, kNumSymptoms> kSymptomPrevalence{0.35, 0.40, 0.35, 0.30, 0.30, 0.25};

// Share of each flag's latent variance explained by its parent factor.
constexpr double kSymptomLoading2 = 0.5;
constexpr double kConfounderLoading2 = 0.6;
constexpr double kAgeLoading2 = 0.3;

constexpr double kAgeCenter = 61.0;
constexpr double kAgeScale = 8.15;  // normal IQR 1.349 sd ~ 11 years

constexpr std::array<ChannelModel, kNumChannels> kChannelModels{{
    {72.5, 17.0, 7.0, 0.5},
    {38.0, 12.0, 6.0, -0.5},
    {15.5, 2.2, 1.0, 0.4},
    {22.0, 8.0, 5.0, 0.4},
    {95.0, 18.0, 10.0, 0.3},
    {14.0, 5.0, 3.0, 0.4},
    {620.0, 110.0, 60.0, 0.4},
    {30.0, 11.0, 8.0, -0.4},
}};

double clamp(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

void check_prevalence(const char* name, double p) {
    if (!(p > 0.0 && p < 1.0)) {
        throw ConfigError(std::string("cohort config: prevalence of ") + name + " must lie in (0, 1)");
    }
}

}  // namespace

std::string to_string(Environment env) {
    switch (env) {
        case Environment::train:
            return "train";
        case Environment::test_iid:
            return "test_iid";
        case Environment::test_ood:
            return "test_ood";
    }
    return "train";
}

Environment environment_from_string(const std::string& s) {
    if (s == "train" || s == "TRAIN") {
        return Environment::train;
    }
    if (s == "test_iid" || s == "TEST_IID") {
        return Environment::test_iid;
    }
    if (s == "test_ood" || s == "TEST_OOD") {
        return Environment::test_ood;
    }
    throw ConfigError("unknown environment '" + s + "' (expected train, test_iid or test_ood)");
}

void CohortConfig::validate() const {
    if (n_patients < 10) {
        throw ConfigError("cohort config: n_patients must be >= 10");
    }
    if (!(spurious_strength >= -1.0 && spurious_strength <= 1.0)) {
        throw ConfigError("cohort config: rho must lie in [-1, 1]");
    }
    if (!(noise_sd > 0.0) || !std::isfinite(noise_sd)) {
        throw ConfigError("cohort config: noise_sd must be > 0");
    }
    check_prevalence("menopause", marginals.menopause);
    check_prevalence("heart_condition", marginals.heart_condition);
    check_prevalence("sleep_disorder", marginals.sleep_disorder);
    check_prevalence("mental_health", marginals.mental_health);
}

nlohmann::ordered_json CohortConfig::to_json() const {
    nlohmann::ordered_json j;
    j["n_patients"] = n_patients;
    j["seed"] = seed;
    j["rho"] = spurious_strength;
    j["environment"] = cdr::to_string(environment);
    j["marginals"] = {{"menopause", marginals.menopause},
                      {"heart_condition", marginals.heart_condition},
                      {"sleep_disorder", marginals.sleep_disorder},
                      {"mental_health", marginals.mental_health}};
    j["noise_sd"] = noise_sd;
    return j;
}

nlohmann::ordered_json OracleSpec::to_json() const {
    nlohmann::ordered_json j;
    nlohmann::ordered_json ws, wc;
    for (std::size_t s = 0; s < kNumSymptoms; ++s) {
        ws[std::string(kSymptomNames[s])] = symptom_weights[s];
    }
    for (std::size_t c = 0; c < kNumChannels; ++c) {
        wc[std::string(kChannels[c].name)] = wearable_weights[c];
    }
    j["intercept"] = intercept;
    j["symptom_weights"] = ws;
    j["wearable_weights"] = wc;
    j["confounder_weights"] = "structural zero";
    return j;
}

double ChannelModel::mean_sd() const {
    return std::sqrt(between_sd * between_sd + week_sd * week_sd / static_cast<double>(kWeeks));
}

const std::array<ChannelModel, kNumChannels>& channel_models() { return kChannelModels; }

double channel_z(Channel channel, double four_week_mean) {
    const auto& m = kChannelModels[static_cast<std::size_t>(channel)];
    return (four_week_mean - m.mean) / m.mean_sd();
}

double oracle_label(const PatientRecord& record, const OracleSpec& oracle) {
    double y = oracle.intercept;
    for (std::size_t s = 0; s < kNumSymptoms; ++s) {
        if (record.symptom_flags[s]) {
            y += oracle.symptom_weights[s];
        }
    }
    for (std::size_t c = 0; c < kNumChannels; ++c) {
        const auto ch = static_cast<Channel>(c);
        y += oracle.wearable_weights[c] * channel_z(ch, record.channel_mean(ch));
    }
    return y;
}

std::vector<PatientRecord> generate(const CohortConfig& config, const OracleSpec& oracle) {
    config.validate();
    Rng rng(config.seed);
    const double rho =
        config.environment == Environment::test_ood ? -config.spurious_strength : config.spurious_strength;
    const double rho_c = std::sqrt(std::max(0.0, 1.0 - rho * rho));

    const std::array<double, 4> confounder_prev{config.marginals.menopause, config.marginals.sleep_disorder,
                                                config.marginals.heart_condition, config.marginals.mental_health};
    std::array<double, 4> confounder_cut{};
    for (std::size_t k = 0; k < 4; ++k) {
        confounder_cut[k] = normal_quantile(1.0 - confounder_prev[k]);
    }
    std::array<double, kNumSymptoms> symptom_cut{};
    for (std::size_t s = 0; s < kNumSymptoms; ++s) {
        symptom_cut[s] = normal_quantile(1.0 - kSymptomPrevalence[s]);
    }

    const double sl = std::sqrt(kSymptomLoading2), sr = std::sqrt(1.0 - kSymptomLoading2);
    const double cl = std::sqrt(kConfounderLoading2), cr = std::sqrt(1.0 - kConfounderLoading2);
    const double al = std::sqrt(kAgeLoading2), ar = std::sqrt(1.0 - kAgeLoading2);

    std::vector<PatientRecord> cohort;
    cohort.reserve(config.n_patients);
    for (std::size_t i = 0; i < config.n_patients; ++i) {
        PatientRecord r;
        char id[32];
        std::snprintf(id, sizeof id, "synth-%06zu", i + 1);
        r.patient_id = id;

        // Draw order is part of the reproducibility contract.
        const double burden = rng.normal();
        const double liability = rho * burden + rho_c * rng.normal();

        const double age_latent = al * liability + ar * rng.normal();
        r.age_years = static_cast<int>(clamp(std::round(kAgeCenter + kAgeScale * age_latent), kMinAge, kMaxAge));

        std::array<bool, 4> conf{};
        for (std::size_t k = 0; k < 4; ++k) {
            conf[k] = cl * liability + cr * rng.normal() > confounder_cut[k];
        }
        r.menopause = conf[0];
        r.sleep_disorder = conf[1];
        r.heart_condition = conf[2];
        r.mental_health = conf[3];

        for (std::size_t s = 0; s < kNumSymptoms; ++s) {
            r.symptom_flags[s] = sl * burden + sr * rng.normal() > symptom_cut[s];
        }

        for (std::size_t c = 0; c < kNumChannels; ++c) {
            const auto& m = kChannelModels[c];
            const double lr = std::sqrt(1.0 - m.loading * m.loading);
            const double level = m.mean + m.between_sd * (m.loading * burden + lr * rng.normal());
            for (std::size_t w = 0; w < kWeeks; ++w) {
                r.wearable_weekly_means[c][w] =
                    clamp(level + m.week_sd * rng.normal(), kChannels[c].lower, kChannels[c].upper);
            }
        }

        r.prior_pasc_score = clamp(10.0 + 5.0 * (0.8 * burden + 0.6 * rng.normal()), 0.0, kMaxScore);
        r.pasc_score_future = clamp(oracle_label(r, oracle) + config.noise_sd * rng.normal(), 0.0, kMaxScore);
        cohort.push_back(std::move(r));
    }
    return cohort;
}

nlohmann::ordered_json cohort_manifest(const CohortConfig& config, const OracleSpec& oracle) {
    nlohmann::ordered_json j;
    j["format"] = "cdr-cohort-jsonl";
    j["format_version"] = 1;
    j["prng"] = kRngAlgorithm;
    j["seed"] = config.seed;
    j["config"] = config.to_json();
    j["oracle"] = oracle.to_json();
    return j;
}

std::vector<int> severity_strata(const std::vector<PatientRecord>& cohort) {
    std::vector<double> sorted;
    sorted.reserve(cohort.size());
    for (const auto& r : cohort) {
        sorted.push_back(r.pasc_score_future);
    }
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    std::array<double, 3> cuts{};
    for (std::size_t q = 0; q < 3; ++q) {
        // Nearest-rank quartile.
        const std::size_t rank = (n * (q + 1) + 3) / 4;
        cuts[q] = sorted[std::max<std::size_t>(rank, 1) - 1];
    }
    std::vector<int> strata;
    strata.reserve(n);
    for (const auto& r : cohort) {
        int b = 0;
        for (double c : cuts) {
            b += r.pasc_score_future > c ? 1 : 0;
        }
        strata.push_back(b);
    }
    return strata;
}

Split split_stratified(const std::vector<PatientRecord>& cohort, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw ConfigError("split: fraction must lie in (0, 1)");
    }
    const std::size_t n = cohort.size();
    const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * fraction));
    if (n_train == 0 || n_train >= n) {
        throw ConfigError("split: fraction leaves an empty partition for n = " + std::to_string(n));
    }

    const std::vector<int> strata_of = severity_strata(cohort);
    std::vector<std::vector<std::size_t>> strata(4);
    for (std::size_t i = 0; i < n; ++i) {
        strata[static_cast<std::size_t>(strata_of[i])].push_back(i);
    }
    std::vector<std::size_t> pool;
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t b = 0; b < strata.size(); ++b) {
        if (strata[b].empty()) {
            continue;
        }
        if (strata[b].size() < 2) {
            std::clog << "split: severity stratum " << b << " has " << strata[b].size()
                      << " member(s); pooled with the global remainder\n";
            pool.insert(pool.end(), strata[b].begin(), strata[b].end());
            continue;
        }
        groups.push_back(std::move(strata[b]));
    }
    if (!pool.empty()) {
        groups.push_back(std::move(pool));
    }

    // Largest-remainder allocation hits the exact total while keeping every
    // group within one patient of its proportional share.
    std::vector<std::size_t> take(groups.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t allocated = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const double ideal = static_cast<double>(groups[g].size()) * fraction;
        take[g] = static_cast<std::size_t>(std::floor(ideal));
        allocated += take[g];
        remainders.emplace_back(ideal - std::floor(ideal), g);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; allocated < n_train && r < remainders.size(); ++r) {
        ++take[remainders[r].second];
        ++allocated;
    }
    for (std::size_t r = remainders.size(); allocated > n_train && r > 0; --r) {
        const std::size_t g = remainders[r - 1].second;
        if (take[g] > 0) {
            --take[g];
            --allocated;
        }
    }

    Rng rng(derive_seed(seed, kSplitStream));
    Split split;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        auto& members = groups[g];
        rng.shuffle(std::span<std::size_t>(members));
        split.train.insert(split.train.end(), members.begin(), members.begin() + static_cast<long>(take[g]));
        split.test.insert(split.test.end(), members.begin() + static_cast<long>(take[g]), members.end());
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

}  // namespace cdr
