#pragma once

// Confounded synthetic cohorts with a known linear label oracle.
//
// Each patient draws a latent symptom burden S and a latent confounder
// liability C with corr(S, C) = rho under TRAIN / TEST_IID and -rho under
// TEST_OOD (Gaussian copula). Symptom flags, wearable channels and the prior
// score load on S; comorbidity flags and age load on C. The label depends on
// symptom flags and wearable means only, so confounders are predictive solely
// through the sampling correlation.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdr/record.hpp"

namespace cdr {

enum class Environment { train, test_iid, test_ood };

std::string to_string(Environment env);
Environment environment_from_string(const std::string& s);

class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

struct Marginals {
    double menopause = 0.6891;
    double heart_condition = 0.5992;
    double sleep_disorder = 0.2745;
    double mental_health = 0.3143;
};

struct CohortConfig {
    std::size_t n_patients = 1155;
    std::uint64_t seed = 42;
    double spurious_strength = 0.6;  // rho
    Environment environment = Environment::train;
    Marginals marginals;
    double noise_sd = 2.5;

    void validate() const;
    nlohmann::ordered_json to_json() const;
};

struct OracleSpec {
    std::array<double, kNumSymptoms> symptom_weights{3.0, 3.0, 2.0, 2.5, 1.5, 1.0};
    std::array<double, kNumChannels> wearable_weights{0.8, -0.8, 0.6, 0.4, 0.3, 0.4, 0.4, -0.4};
    double intercept = 6.0;

    nlohmann::ordered_json to_json() const;
};

// Generator model of one wearable channel. The patient level is
// mean + between_sd * (loading * S + sqrt(1 - loading^2) * e); each week adds
// week_sd noise.
struct ChannelModel {
    double mean;
    double between_sd;
    double week_sd;
    double loading;

    // Population sd of the four-week mean.
    double mean_sd() const;
};

const std::array<ChannelModel, kNumChannels>& channel_models();

// Population z-score of a four-week channel mean.
double channel_z(Channel channel, double four_week_mean);

// Noiseless, unclipped label: intercept + symptom terms + wearable z terms.
double oracle_label(const PatientRecord& record, const OracleSpec& oracle);

std::vector<PatientRecord> generate(const CohortConfig& config, const OracleSpec& oracle = {});

// Sidecar manifest recording the PRNG algorithm, seed and both configs.
nlohmann::ordered_json cohort_manifest(const CohortConfig& config, const OracleSpec& oracle);

struct Split {
    std::vector<std::size_t> train;  // ascending cohort indices
    std::vector<std::size_t> test;
};

// Stratified over quartile bins of pasc_score_future. Train size is
// round(n * fraction); every stratum contributes within one patient of its
// proportional share. Strata of fewer than two patients are pooled.
Split split_stratified(const std::vector<PatientRecord>& cohort, double fraction, std::uint64_t seed);

// Severity-quartile stratum of each record (the stratification variable).
std::vector<int> severity_strata(const std::vector<PatientRecord>& cohort);

}  // namespace cdr
