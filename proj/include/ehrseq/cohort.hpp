#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ehrseq/common.hpp"

namespace ehrseq {

enum class EventKind {
    demographic,
    age_bin,
    diagnosis_code,
    medication_code,
    lab_code_with_value,
};

const char* event_kind_tag(EventKind kind);
std::optional<EventKind> event_kind_from_tag(const std::string& tag);

// Age and lab events carry a continuous value; the tokenizer quantile-bins
// both with the same mechanism.
struct EventDescriptor {
    EventKind kind = EventKind::diagnosis_code;
    std::string code;
    std::optional<double> value;

    bool has_value_kind() const {
        return kind == EventKind::lab_code_with_value || kind == EventKind::age_bin;
    }
    bool operator==(const EventDescriptor& o) const {
        return kind == o.kind && code == o.code && value == o.value;
    }
    bool operator<(const EventDescriptor& o) const {
        if (kind != o.kind) return kind < o.kind;
        if (code != o.code) return code < o.code;
        return value < o.value;
    }
};

struct Visit {
    int64_t time_days = 0;  // days since the patient's first visit
    std::vector<EventDescriptor> events;  // deduplicated by (kind, code)

    bool contains_code(const std::string& code) const;
};

struct PatientTrajectory {
    std::string patient_id;
    std::vector<Visit> visits;  // chronological, first at day 0
    std::vector<EventDescriptor> static_demographics;
};

struct Cohort {
    std::vector<PatientTrajectory> patients;
};

enum class RulePersistence { once, chronic_repeat };

// Triggers fire when all trigger codes co-occur in one visit; each firing
// realizes independently with `probability`.
struct PlantedRule {
    std::vector<std::string> trigger_codes;
    std::string effect_code;
    int lag_visits = 1;
    RulePersistence persistence = RulePersistence::once;
    double probability = 1.0;
};

struct CohortConfig {
    int n_patients = 1000;
    int n_diagnosis_codes = 40;
    int n_medication_codes = 20;
    int n_lab_codes = 4;
    int n_demographic_groups = 4;
    double mean_visits = 12.0;
    double mean_gap_days = 60.0;
    double diag_per_visit = 2.0;
    double med_per_visit = 1.0;
    double labs_per_visit = 1.0;
    std::vector<PlantedRule> planted_rules;
    uint64_t rng_seed = 0;

    void validate() const;  // throws ConfigError
};

struct CohortSplit {
    Cohort train;
    Cohort val;
    Cohort test;
};

Cohort generate_cohort(const CohortConfig& config);

// Patient-level disjoint partition; sizes within +-1 of the fractions.
CohortSplit split_cohort(const Cohort& cohort, const std::array<double, 3>& fractions,
                         uint64_t seed);

// Line-delimited records, one patient per line; lossless round-trip.
void write_cohort_jsonl(const Cohort& cohort, std::ostream& out);
void write_cohort_jsonl(const Cohort& cohort, const std::string& path);
Cohort read_cohort_jsonl(std::istream& in);
Cohort read_cohort_jsonl_file(const std::string& path);

// Scan-based oracle for planted-rule satisfaction: fraction of trigger
// firings (all trigger codes in visit i, i+lag in range) whose effect code
// is present in visit i+lag.
struct RuleScan {
    int64_t opportunities = 0;
    int64_t satisfied = 0;
    double rate() const { return opportunities == 0 ? 0.0 : double(satisfied) / double(opportunities); }
};
RuleScan scan_rule_satisfaction(const Cohort& cohort, const PlantedRule& rule);

}  // namespace ehrseq
