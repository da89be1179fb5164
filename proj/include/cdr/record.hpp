#pragma once

// Patient records: static profile, comorbidity flags, four weekly means per
// wearable channel, and the future severity label.

#include <array>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace cdr {

inline constexpr std::size_t kWeeks = 4;
inline constexpr int kMinAge = 37;
inline constexpr int kMaxAge = 89;
inline constexpr double kMaxScore = 30.0;

enum class Symptom : std::size_t {
    breathlessness,
    malaise,
    unrefreshing_sleep,
    brain_fog,
    insomnia,
    joint_pain,
};
inline constexpr std::size_t kNumSymptoms = 6;
inline constexpr std::array<std::string_view, kNumSymptoms> kSymptomNames{
    "breathlessness", "malaise", "unrefreshing_sleep", "brain_fog", "insomnia", "joint_pain"};

enum class Channel : std::size_t {
    resting_hr,
    hrv_rmssd,
    breathing_rate,
    sleep_latency,
    rem_onset,
    restless_periods,
    sedentary_min,
    very_active_min,
};
inline constexpr std::size_t kNumChannels = 8;

struct ChannelInfo {
    std::string_view name;
    std::string_view unit;
    double lower;  // plausibility bounds on weekly means
    double upper;
};

inline constexpr std::array<ChannelInfo, kNumChannels> kChannels{{
    {"resting_hr", "bpm", 35.0, 140.0},
    {"hrv_rmssd", "ms", 3.0, 200.0},
    {"breathing_rate", "brpm", 6.0, 35.0},
    {"sleep_latency", "min", 0.0, 180.0},
    {"rem_onset", "min", 30.0, 240.0},
    {"restless_periods", "count", 0.0, 80.0},
    {"sedentary_min", "min", 60.0, 1440.0},
    {"very_active_min", "min", 0.0, 300.0},
}};

std::optional<Channel> channel_from_name(std::string_view name);
std::optional<Symptom> symptom_from_name(std::string_view name);

class RecordError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

struct PatientRecord {
    std::string patient_id;
    int age_years = 60;
    bool menopause = false;
    bool sleep_disorder = false;
    bool heart_condition = false;
    bool mental_health = false;
    std::array<bool, kNumSymptoms> symptom_flags{};
    std::array<std::array<double, kWeeks>, kNumChannels> wearable_weekly_means{};
    double prior_pasc_score = 0.0;
    double pasc_score_future = 0.0;

    bool has(Symptom s) const { return symptom_flags[static_cast<std::size_t>(s)]; }
    double channel_mean(Channel c) const;
    int confounder_count() const;
    int symptom_count() const;
};

// Throws RecordError naming the first violated invariant.
void validate(const PatientRecord& record);

nlohmann::ordered_json to_json(const PatientRecord& record);
PatientRecord record_from_json(const nlohmann::json& j);

// One record per line; records are validated on read.
void write_jsonl(const std::string& path, const std::vector<PatientRecord>& records);
std::vector<PatientRecord> read_jsonl(const std::string& path);

}  // namespace cdr
