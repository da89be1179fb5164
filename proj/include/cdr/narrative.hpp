#pragma once

// Controlled vocabulary and the fixed narrative template that turns a
// PatientRecord into a token sequence:
//
//   <bos> patient age_XX <sep> history: {comorbidities | none} <sep>
//   symptoms: that include {symptom tokens | none} <sep>
//   wearables: by device {one bin per channel} <sep> prior: prior_k to follow
//
// followed by <pad> up to the sequence length.

#include <array>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cdr/record.hpp"

namespace cdr {

enum class TokenCategory { causal_symptom, confounder, administrative, wearable_bin, structural };

std::string_view to_string(TokenCategory c);
TokenCategory category_from_string(std::string_view s);

struct VocabEntry {
    std::string token;
    int id;
    TokenCategory category;
};

// Values <= low_max bin low, values <= mid_max bin mid, the rest high.
struct BinThresholds {
    double low_max;
    double mid_max;
};

inline constexpr std::size_t kSequenceLength = 48;
inline constexpr std::size_t kMaxEmission = 39;
inline constexpr std::size_t kPriorBins = 4;

class UnknownTokenError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class OverflowError : public std::length_error {
  public:
    using std::length_error::length_error;
};

class Vocabulary {
  public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;

    explicit Vocabulary(std::vector<std::pair<std::string, TokenCategory>> tokens);

    std::size_t size() const { return entries_.size(); }
    const std::vector<VocabEntry>& entries() const { return entries_; }
    const VocabEntry& entry(int id) const;
    TokenCategory category(int id) const { return entry(id).category; }
    const std::string& token(int id) const { return entry(id).token; }

    std::optional<int> find(std::string_view token) const;
    // Throws UnknownTokenError.
    int id(std::string_view token) const;

    // Token list plus bin thresholds, as checked into data/vocabulary.json.
    nlohmann::ordered_json manifest() const;

  private:
    std::vector<VocabEntry> entries_;
};

Vocabulary build_vocabulary();

// Frozen tercile thresholds of the four-week channel mean.
const std::array<BinThresholds, kNumChannels>& wearable_thresholds();
// Frozen quartile cutpoints of the prior score.
const std::array<double, kPriorBins - 1>& prior_cutpoints();

std::string bin_wearable(Channel channel, double mean_value);
// Throws UnknownTokenError for a channel name that is not recognised.
std::string bin_wearable(std::string_view channel, double mean_value);
std::string bin_prior(double prior_score);
std::string age_token(int age_years);

struct TokenSequence {
    std::vector<int> ids;
    std::vector<TokenCategory> categories;
    std::string patient_id;

    // Number of leading non-PAD tokens.
    std::size_t valid_length() const;
};

// Throws OverflowError when the emission does not fit in T tokens.
TokenSequence encode(const PatientRecord& record, const Vocabulary& vocab, std::size_t T = kSequenceLength);

std::vector<std::string> token_strings(const TokenSequence& seq, const Vocabulary& vocab);

}  // namespace cdr
