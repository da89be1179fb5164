#pragma once

// Training loop, checkpoints and the multi-seed protocol.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdr/cohort.hpp"
#include "cdr/disentangle.hpp"
#include "cdr/metrics.hpp"

namespace cdr {

// Loss became non-finite during training.
class DivergenceError : public std::runtime_error {
  public:
    DivergenceError(const std::string& what, std::uint64_t seed, std::size_t epoch, std::size_t step)
        : std::runtime_error(what), seed(seed), epoch(epoch), step(step) {}
    std::uint64_t seed;
    std::size_t epoch;
    std::size_t step;
};

struct RunConfig {
    std::vector<std::uint64_t> seeds{42, 100, 2024, 555, 777};
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    double lr = 3e-3;
    double momentum = 0.9;
    LossWeights weights;
    MixSettings mix;
    ConfounderObjective confounder_objective = ConfounderObjective::label;
    ModelDims dims;  // vocab_size and seq_len are filled from the vocabulary
    double split_fraction = 0.8;
    double severity_threshold = 12.0;

    // Cohort sources. Empty paths mean "generate from the settings below".
    std::string cohort_path;
    std::string ood_cohort_path;
    CohortConfig cohort;        // training cohort (TRAIN environment)
    std::size_t ood_n_patients = 1000;
    std::uint64_t ood_seed = 4242;

    // Baseline settings.
    std::size_t gbt_rounds = 200;
    double gbt_eta = 0.1;
    std::size_t gbt_depth = 4;

    // Throws ConfigError naming the offending key.
    void validate() const;
    nlohmann::ordered_json to_json() const;
    // Flat object; unknown keys throw ConfigError listing the valid keys.
    static RunConfig from_json(const nlohmann::json& j);
    // "key=value" with the value parsed as JSON, falling back to a string.
    void apply_override(const std::string& assignment);
    static const std::vector<std::string>& keys();

    CohortConfig ood_cohort_config() const;
};

struct EpochTrace {
    std::size_t epoch = 0;
    double causal = 0.0;
    double confounder = 0.0;
    double joint = 0.0;
    double mix = 0.0;
    double total = 0.0;
};

struct TrainResult {
    std::uint64_t seed = 0;
    Model model;
    Split split;
    std::vector<EpochTrace> trace;
};

// Encodes every record once with the fixed vocabulary.
std::vector<TokenSequence> encode_cohort(const std::vector<PatientRecord>& cohort, const Vocabulary& vocab);

TrainResult train_one_seed(const RunConfig& config,
                           const std::vector<PatientRecord>& cohort,
                           const std::vector<TokenSequence>& sequences,
                           std::uint64_t seed);

std::vector<double> predict_indices(const Model& model,
                                    const std::vector<TokenSequence>& sequences,
                                    const std::vector<std::size_t>& indices,
                                    std::size_t batch_size = 64);

std::string trace_csv(const std::vector<EpochTrace>& trace);

struct CheckpointInfo {
    nlohmann::ordered_json manifest;
};

// Writes <dir>/checkpoint.json and <dir>/checkpoint.bin (little-endian f64).
void save_checkpoint(const std::string& dir,
                     const Model& model,
                     const nlohmann::ordered_json& config,
                     std::uint64_t seed,
                     std::size_t epoch);
// Throws IoError on missing files and std::runtime_error on malformed ones.
Model load_checkpoint(const std::string& dir, CheckpointInfo* info = nullptr);

// Cohorts named by the config (loaded or generated).
std::vector<PatientRecord> load_training_cohort(const RunConfig& config);
std::vector<PatientRecord> load_ood_cohort(const RunConfig& config);

struct ProtocolResult {
    MetricsReport test;  // held-out split of the training cohort
    MetricsReport ood;   // TEST_OOD cohort
    std::vector<SaliencyTable> saliency;
    std::vector<TrainResult> runs;
};

// Trains and evaluates every seed; writes per-seed artifacts under out_dir
// when it is non-empty. Per-seed failures are rethrown naming the seed.
ProtocolResult run_protocol(const RunConfig& config, const std::string& out_dir, const std::string& model_tag);

nlohmann::ordered_json split_json(const Split& split, const std::vector<PatientRecord>& cohort);

}  // namespace cdr
