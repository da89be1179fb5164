#include "cdr/record.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "cdr/io.hpp"

namespace cdr {

std::optional<Channel> channel_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kNumChannels; ++i) {
        if (kChannels[i].name == name) {
            return static_cast<Channel>(i);
        }
    }
    return std::nullopt;
}

std::optional<Symptom> symptom_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kNumSymptoms; ++i) {
        if (kSymptomNames[i] == name) {
            return static_cast<Symptom>(i);
        }
    }
    return std::nullopt;
}

double PatientRecord::channel_mean(Channel c) const {
    const auto& weeks = wearable_weekly_means[static_cast<std::size_t>(c)];
    double s = 0.0;
    for (double v : weeks) {
        s += v;
    }
    return s / static_cast<double>(kWeeks);
}

int PatientRecord::confounder_count() const {
    return int(menopause) + int(sleep_disorder) + int(heart_condition) + int(mental_health);
}

int PatientRecord::symptom_count() const {
    int n = 0;
    for (bool f : symptom_flags) {
        n += int(f);
    }
    return n;
}

void validate(const PatientRecord& r) {
    auto fail = [&](const std::string& what) {
        throw RecordError("record '" + r.patient_id + "': " + what);
    };
    if (r.age_years < kMinAge || r.age_years > kMaxAge) {
        fail("age_years " + std::to_string(r.age_years) + " outside [37, 89]");
    }
    for (std::size_t c = 0; c < kNumChannels; ++c) {
        for (double v : r.wearable_weekly_means[c]) {
            if (!std::isfinite(v) || v < kChannels[c].lower || v > kChannels[c].upper) {
                std::ostringstream msg;
                msg << kChannels[c].name << " weekly mean " << v << " outside plausibility bounds ["
                    << kChannels[c].lower << ", " << kChannels[c].upper << "]";
                fail(msg.str());
            }
        }
    }
    if (!std::isfinite(r.prior_pasc_score) || r.prior_pasc_score < 0.0) {
        fail("prior_pasc_score must be finite and >= 0");
    }
    if (!std::isfinite(r.pasc_score_future) || r.pasc_score_future < 0.0) {
        fail("pasc_score_future must be finite and >= 0");
    }
}

nlohmann::ordered_json to_json(const PatientRecord& r) {
    nlohmann::ordered_json j;
    j["patient_id"] = r.patient_id;
    j["age_years"] = r.age_years;
    j["menopause"] = r.menopause;
    j["sleep_disorder"] = r.sleep_disorder;
    j["heart_condition"] = r.heart_condition;
    j["mental_health"] = r.mental_health;
    auto flags = nlohmann::ordered_json::array();
    for (std::size_t s = 0; s < kNumSymptoms; ++s) {
        if (r.symptom_flags[s]) {
            flags.push_back(kSymptomNames[s]);
        }
    }
    j["symptom_flags"] = std::move(flags);
    nlohmann::ordered_json wear;
    for (std::size_t c = 0; c < kNumChannels; ++c) {
        wear[std::string(kChannels[c].name)] = r.wearable_weekly_means[c];
    }
    j["wearable_weekly_means"] = std::move(wear);
    j["prior_pasc_score"] = r.prior_pasc_score;
    j["pasc_score_future"] = r.pasc_score_future;
    return j;
}

PatientRecord record_from_json(const nlohmann::json& j) {
    PatientRecord r;
    try {
        r.patient_id = j.at("patient_id").get<std::string>();
        r.age_years = j.at("age_years").get<int>();
        r.menopause = j.at("menopause").get<bool>();
        r.sleep_disorder = j.at("sleep_disorder").get<bool>();
        r.heart_condition = j.at("heart_condition").get<bool>();
        r.mental_health = j.at("mental_health").get<bool>();
        for (const auto& name : j.at("symptom_flags")) {
            auto s = symptom_from_name(name.get<std::string>());
            if (!s) {
                throw RecordError("unknown symptom flag '" + name.get<std::string>() + "'");
            }
            r.symptom_flags[static_cast<std::size_t>(*s)] = true;
        }
        const auto& wear = j.at("wearable_weekly_means");
        for (std::size_t c = 0; c < kNumChannels; ++c) {
            const auto& weeks = wear.at(std::string(kChannels[c].name));
            if (!weeks.is_array() || weeks.size() != kWeeks) {
                throw RecordError(std::string(kChannels[c].name) + " must hold exactly 4 weekly means");
            }
            for (std::size_t w = 0; w < kWeeks; ++w) {
                r.wearable_weekly_means[c][w] = weeks[w].get<double>();
            }
        }
        r.prior_pasc_score = j.at("prior_pasc_score").get<double>();
        r.pasc_score_future = j.at("pasc_score_future").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw RecordError(std::string("malformed record: ") + e.what());
    }
    validate(r);
    return r;
}

void write_jsonl(const std::string& path, const std::vector<PatientRecord>& records) {
    std::ostringstream out;
    for (const auto& r : records) {
        out << to_json(r).dump() << '\n';
    }
    write_text_file(path, out.str());
}

std::vector<PatientRecord> read_jsonl(const std::string& path) {
    std::istringstream in(read_text_file(path));
    std::vector<PatientRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            records.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error& e) {
            throw RecordError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return records;
}

}  // namespace cdr
