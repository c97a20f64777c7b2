#include "ehrseq/cohort.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

using json = nlohmann::json;

namespace ehrseq {

std::string to_hex(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)v);
    return std::string(buf);
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
}

const char* event_kind_tag(EventKind kind) {
    switch (kind) {
        case EventKind::demographic: return "dem";
        case EventKind::age_bin: return "age";
        case EventKind::diagnosis_code: return "dx";
        case EventKind::medication_code: return "rx";
        case EventKind::lab_code_with_value: return "lab";
    }
    return "?";
}

std::optional<EventKind> event_kind_from_tag(const std::string& tag) {
    if (tag == "dem") return EventKind::demographic;
    if (tag == "age") return EventKind::age_bin;
    if (tag == "dx") return EventKind::diagnosis_code;
    if (tag == "rx") return EventKind::medication_code;
    if (tag == "lab") return EventKind::lab_code_with_value;
    return std::nullopt;
}

bool Visit::contains_code(const std::string& code) const {
    for (const auto& e : events)
        if (e.code == code) return true;
    return false;
}

void CohortConfig::validate() const {
    if (n_patients <= 0) throw ConfigError("cohort: n_patients must be positive");
    if (n_diagnosis_codes <= 0 || n_medication_codes <= 0 || n_lab_codes <= 0 ||
        n_demographic_groups <= 0)
        throw ConfigError("cohort: vocabulary sizes must be positive");
    if (mean_visits < 2.0) throw ConfigError("cohort: mean_visits must be >= 2");
    if (mean_gap_days < 1.0) throw ConfigError("cohort: mean_gap_days must be >= 1");
    for (const auto& rule : planted_rules) {
        if (rule.trigger_codes.empty()) throw ConfigError("cohort: rule without trigger codes");
        if (rule.effect_code.empty()) throw ConfigError("cohort: rule without effect code");
        if (rule.lag_visits < 1) throw ConfigError("cohort: rule lag_visits must be >= 1");
        if (rule.probability < 0.0 || rule.probability > 1.0)
            throw ConfigError("cohort: rule probability outside [0,1]");
    }
}

namespace {

std::string padded_code(const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%03d", prefix, i);
    return std::string(buf);
}

// Lab value distributions are fixed per code so quantile binning sees
// nontrivial, reproducible edges.
void lab_params(int code_index, double* mean, double* sd) {
    *mean = 20.0 + 15.0 * code_index;
    *sd = 4.0 + 0.5 * code_index;
}

struct VisitDraft {
    int64_t time_days = 0;
    // deduplicated by (kind, code); value of first draw wins
    std::map<std::pair<EventKind, std::string>, std::optional<double>> events;

    bool has(const std::string& code) const {
        for (const auto& [key, value] : events)
            if (key.second == code) return true;
        return false;
    }
    void add(EventKind kind, std::string code, std::optional<double> value = std::nullopt) {
        events.emplace(std::make_pair(kind, std::move(code)), value);
    }
};

PatientTrajectory generate_patient(const CohortConfig& cfg, int patient_index) {
    Rng rng(mix_seed(cfg.rng_seed, uint64_t(patient_index), 0x636f686fULL));

    PatientTrajectory patient;
    {
        char buf[24];
        std::snprintf(buf, sizeof(buf), "P%06d", patient_index);
        patient.patient_id = buf;
    }

    patient.static_demographics.push_back(
        {EventKind::demographic, "sex=" + std::string(rng.bernoulli(0.5) ? "F" : "M"),
         std::nullopt});
    patient.static_demographics.push_back(
        {EventKind::demographic,
         "group=" + std::to_string(rng.uniform_index(uint64_t(cfg.n_demographic_groups))),
         std::nullopt});

    const int n_visits = 2 + rng.poisson(cfg.mean_visits - 2.0);
    std::vector<VisitDraft> drafts(n_visits);

    // Irregular spacing: gaps are 1 + geometric, giving the long-tailed
    // inter-visit intervals the downstream time handling has to cope with.
    const double p_gap = 1.0 / std::max(1.0, cfg.mean_gap_days);
    int64_t t = 0;
    for (int i = 0; i < n_visits; ++i) {
        if (i > 0) t += 1 + rng.geometric(p_gap);
        drafts[i].time_days = t;
    }

    // Effect codes are reserved for planted rules: background draws skip
    // them so rule-satisfaction scans stay clean Bernoulli trials.
    std::set<std::string> reserved;
    for (const auto& rule : cfg.planted_rules) reserved.insert(rule.effect_code);

    const double age0_years = rng.uniform(20.0, 80.0);
    for (auto& visit : drafts) {
        visit.add(EventKind::age_bin, "years", age0_years + double(visit.time_days) / 365.25);

        const int n_dx = rng.poisson(cfg.diag_per_visit);
        for (int j = 0; j < n_dx; ++j) {
            auto code = padded_code("D", int(rng.uniform_index(uint64_t(cfg.n_diagnosis_codes))));
            if (!reserved.count(code)) visit.add(EventKind::diagnosis_code, code);
        }
        const int n_rx = rng.poisson(cfg.med_per_visit);
        for (int j = 0; j < n_rx; ++j) {
            auto code = padded_code("M", int(rng.uniform_index(uint64_t(cfg.n_medication_codes))));
            if (!reserved.count(code)) visit.add(EventKind::medication_code, code);
        }
        const int n_lab = rng.poisson(cfg.labs_per_visit);
        for (int j = 0; j < n_lab; ++j) {
            const int li = int(rng.uniform_index(uint64_t(cfg.n_lab_codes)));
            auto code = padded_code("L", li);
            if (reserved.count(code)) continue;
            double mean = 0.0, sd = 1.0;
            lab_params(li, &mean, &sd);
            visit.add(EventKind::lab_code_with_value, code, rng.normal(mean, sd));
        }
        while (visit.events.size() == 1) {  // only the age event; visits must carry content
            auto code = padded_code("D", int(rng.uniform_index(uint64_t(cfg.n_diagnosis_codes))));
            if (!reserved.count(code)) visit.add(EventKind::diagnosis_code, code);
        }
    }

    // Planted dynamics. Visits are scanned in order; effects land in later
    // visits, so insertions can themselves trigger rules downstream.
    for (int i = 0; i < n_visits; ++i) {
        for (const auto& rule : cfg.planted_rules) {
            bool triggered = true;
            for (const auto& code : rule.trigger_codes)
                if (!drafts[i].has(code)) {
                    triggered = false;
                    break;
                }
            if (!triggered) continue;
            if (!rng.bernoulli(rule.probability)) continue;
            const int target = i + rule.lag_visits;
            if (target >= n_visits) continue;
            const EventKind kind = rule.effect_code[0] == 'M' ? EventKind::medication_code
                                                              : EventKind::diagnosis_code;
            const int last = rule.persistence == RulePersistence::chronic_repeat
                                 ? n_visits - 1
                                 : target;
            for (int v = target; v <= last; ++v) drafts[v].add(kind, rule.effect_code);
        }
    }

    patient.visits.reserve(n_visits);
    for (const auto& draft : drafts) {
        Visit visit;
        visit.time_days = draft.time_days;
        for (const auto& [key, value] : draft.events)
            visit.events.push_back({key.first, key.second, value});
        patient.visits.push_back(std::move(visit));
    }
    return patient;
}

}  // namespace

Cohort generate_cohort(const CohortConfig& config) {
    config.validate();
    {
        std::set<std::string> reserved;
        for (const auto& rule : config.planted_rules) reserved.insert(rule.effect_code);
        int free_dx = 0;
        for (int i = 0; i < config.n_diagnosis_codes; ++i)
            free_dx += reserved.count(padded_code("D", i)) ? 0 : 1;
        if (free_dx == 0)
            throw ConfigError("cohort: every diagnosis code is reserved by a planted rule");
    }
    Cohort cohort;
    cohort.patients.reserve(config.n_patients);
    for (int i = 0; i < config.n_patients; ++i)
        cohort.patients.push_back(generate_patient(config, i));
    return cohort;
}

CohortSplit split_cohort(const Cohort& cohort, const std::array<double, 3>& fractions,
                         uint64_t seed) {
    double sum = 0.0;
    for (double f : fractions) {
        if (f < 0.0) throw ConfigError("split: negative fraction");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split: fractions must sum to 1");

    const size_t n = cohort.patients.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t(0));
    Rng rng(mix_seed(seed, 0x73706c69ULL));
    rng.shuffle(order);

    const size_t cut1 = size_t(std::llround(fractions[0] * double(n)));
    const size_t cut2 = size_t(std::llround((fractions[0] + fractions[1]) * double(n)));

    CohortSplit split;
    for (size_t i = 0; i < n; ++i) {
        const auto& p = cohort.patients[order[i]];
        if (i < cut1)
            split.train.patients.push_back(p);
        else if (i < cut2)
            split.val.patients.push_back(p);
        else
            split.test.patients.push_back(p);
    }
    return split;
}

namespace {

json event_to_json(const EventDescriptor& e) {
    json j;
    j["kind"] = event_kind_tag(e.kind);
    j["code"] = e.code;
    if (e.value) j["value"] = *e.value;
    return j;
}

EventDescriptor event_from_json(const json& j) {
    EventDescriptor e;
    auto kind = event_kind_from_tag(j.at("kind").get<std::string>());
    if (!kind) throw DataError("cohort file: unknown event kind '" + j.at("kind").get<std::string>() + "'");
    e.kind = *kind;
    e.code = j.at("code").get<std::string>();
    if (e.code.empty()) throw DataError("cohort file: empty event code");
    if (j.contains("value")) e.value = j.at("value").get<double>();
    if (e.has_value_kind() != e.value.has_value())
        throw DataError("cohort file: value presence does not match event kind for " + e.code);
    return e;
}

}  // namespace

void write_cohort_jsonl(const Cohort& cohort, std::ostream& out) {
    for (const auto& p : cohort.patients) {
        json j;
        j["patient_id"] = p.patient_id;
        j["demographics"] = json::array();
        for (const auto& e : p.static_demographics) j["demographics"].push_back(event_to_json(e));
        j["visits"] = json::array();
        for (const auto& v : p.visits) {
            json jv;
            jv["time_days"] = v.time_days;
            jv["events"] = json::array();
            for (const auto& e : v.events) jv["events"].push_back(event_to_json(e));
            j["visits"].push_back(std::move(jv));
        }
        out << j.dump() << "\n";
    }
}

void write_cohort_jsonl(const Cohort& cohort, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    write_cohort_jsonl(cohort, out);
}

Cohort read_cohort_jsonl(std::istream& in) {
    Cohort cohort;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError("cohort file line " + std::to_string(line_no) + ": " + e.what());
        }
        PatientTrajectory p;
        p.patient_id = j.at("patient_id").get<std::string>();
        for (const auto& je : j.at("demographics")) p.static_demographics.push_back(event_from_json(je));
        int64_t prev_time = -1;
        for (const auto& jv : j.at("visits")) {
            Visit v;
            v.time_days = jv.at("time_days").get<int64_t>();
            if (v.time_days <= prev_time)
                throw DataError("cohort file: visit times not strictly increasing for " + p.patient_id);
            prev_time = v.time_days;
            for (const auto& je : jv.at("events")) v.events.push_back(event_from_json(je));
            if (v.events.empty()) throw DataError("cohort file: empty visit for " + p.patient_id);
            p.visits.push_back(std::move(v));
        }
        if (p.visits.size() < 2) throw DataError("cohort file: fewer than 2 visits for " + p.patient_id);
        if (p.visits.front().time_days != 0)
            throw DataError("cohort file: first visit not at day 0 for " + p.patient_id);
        cohort.patients.push_back(std::move(p));
    }
    return cohort;
}

Cohort read_cohort_jsonl_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open cohort file: " + path);
    return read_cohort_jsonl(in);
}

RuleScan scan_rule_satisfaction(const Cohort& cohort, const PlantedRule& rule) {
    RuleScan scan;
    for (const auto& p : cohort.patients) {
        const int n = int(p.visits.size());
        for (int i = 0; i + rule.lag_visits < n; ++i) {
            bool triggered = true;
            for (const auto& code : rule.trigger_codes)
                if (!p.visits[i].contains_code(code)) {
                    triggered = false;
                    break;
                }
            if (!triggered) continue;
            ++scan.opportunities;
            if (p.visits[i + rule.lag_visits].contains_code(rule.effect_code)) ++scan.satisfied;
        }
    }
    return scan;
}

}  // namespace ehrseq
