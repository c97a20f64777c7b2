#include "ehrseq/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace ehrseq {

Vocabulary::Vocabulary() {
    id_to_key_ = {kPadKey, kSepKey};
    token_to_id_[kPadKey] = kPadId;
    token_to_id_[kSepKey] = kSepId;
}

TokenId Vocabulary::add_token(const std::string& key) {
    auto it = token_to_id_.find(key);
    if (it != token_to_id_.end()) return it->second;
    const TokenId id = TokenId(id_to_key_.size());
    token_to_id_[key] = id;
    id_to_key_.push_back(key);
    return id;
}

std::optional<TokenId> Vocabulary::lookup(const std::string& key) const {
    auto it = token_to_id_.find(key);
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
}

const std::string& Vocabulary::key_of(TokenId id) const {
    if (id < 0 || size_t(id) >= id_to_key_.size())
        throw DataError("vocabulary: id out of range: " + std::to_string(id));
    return id_to_key_[size_t(id)];
}

void Vocabulary::set_bin_edges(const std::string& code_key, std::vector<double> edges) {
    bin_edges_[code_key] = std::move(edges);
}

const std::vector<double>* Vocabulary::edges_for(const std::string& code_key) const {
    auto it = bin_edges_.find(code_key);
    return it == bin_edges_.end() ? nullptr : &it->second;
}

void Vocabulary::save(std::ostream& out) const {
    out << "# ehrseq vocabulary v1\n";
    out << "size " << size() << "\n";
    for (int id = 0; id < size(); ++id) out << "token " << id << " " << id_to_key_[size_t(id)] << "\n";
    for (const auto& [code, edges] : bin_edges_) {
        out << "edges " << code;
        for (double e : edges) out << " " << format_double(e);
        out << "\n";
    }
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    save(out);
}

Vocabulary Vocabulary::load(std::istream& in) {
    Vocabulary vocab;
    vocab.id_to_key_.clear();
    vocab.token_to_id_.clear();

    std::string line;
    int declared_size = -1;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "size") {
            ls >> declared_size;
        } else if (tag == "token") {
            int id = -1;
            std::string key;
            ls >> id >> key;
            if (id != int(vocab.id_to_key_.size()))
                throw DataError("vocabulary file: non-dense id " + std::to_string(id));
            vocab.id_to_key_.push_back(key);
            vocab.token_to_id_[key] = TokenId(id);
        } else if (tag == "edges") {
            std::string code;
            ls >> code;
            std::vector<double> edges;
            double e = 0.0;
            while (ls >> e) edges.push_back(e);
            vocab.bin_edges_[code] = std::move(edges);
        } else {
            throw DataError("vocabulary file: unknown line tag '" + tag + "'");
        }
    }
    if (declared_size >= 0 && declared_size != vocab.size())
        throw DataError("vocabulary file: size mismatch");
    if (vocab.size() < 2 || vocab.id_to_key_[0] != kPadKey || vocab.id_to_key_[1] != kSepKey)
        throw DataError("vocabulary file: missing special tokens");
    return vocab;
}

Vocabulary Vocabulary::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary file: " + path);
    return load(in);
}

std::vector<double> quantile_edges(std::vector<double> values, int n_bins) {
    if (n_bins < 2) throw ConfigError("quantile_edges: n_bins must be >= 2");
    if (values.empty()) throw DataError("quantile_edges: no values");
    std::sort(values.begin(), values.end());
    const size_t n = values.size();
    std::vector<double> edges;
    for (int k = 1; k < n_bins; ++k) {
        // nearest-rank: p-th quantile is the value at index ceil(p*n), 1-based
        size_t rank = size_t(std::ceil(double(k) * double(n) / double(n_bins)));
        rank = std::max<size_t>(1, std::min(rank, n));
        const double edge = values[rank - 1];
        if (edges.empty() || edge > edges.back()) edges.push_back(edge);
    }
    return edges;
}

int bin_value(double value, const std::vector<double>& edges) {
    if (std::isnan(value)) throw DataError("bin_value: NaN value");
    auto it = std::upper_bound(edges.begin(), edges.end(), value);
    return int(std::distance(edges.begin(), it));
}

namespace {

std::string continuous_code_key(const EventDescriptor& e) {
    return std::string(event_kind_tag(e.kind)) + ":" + e.code;
}

}  // namespace

std::optional<std::string> event_token_key(const EventDescriptor& event, const Vocabulary& vocab) {
    if (event.has_value_kind()) {
        if (!event.value) throw DataError("event missing value: " + event.code);
        const auto code_key = continuous_code_key(event);
        const auto* edges = vocab.edges_for(code_key);
        if (!edges) return std::nullopt;
        return code_key + "#" + std::to_string(bin_value(*event.value, *edges));
    }
    return std::string(event_kind_tag(event.kind)) + ":" + event.code;
}

Vocabulary build_vocabulary(const Cohort& train_cohort, int n_bins_per_code,
                            VocabBuildStats* stats) {
    if (n_bins_per_code < 2) throw ConfigError("build_vocabulary: n_bins must be >= 2");
    if (train_cohort.patients.empty()) throw DataError("build_vocabulary: empty train cohort");

    std::set<std::string> categorical_keys;
    std::map<std::string, std::vector<double>> continuous_values;

    auto absorb = [&](const EventDescriptor& e) {
        if (e.has_value_kind()) {
            if (!e.value) throw DataError("event missing value: " + e.code);
            continuous_values[continuous_code_key(e)].push_back(*e.value);
        } else {
            categorical_keys.insert(std::string(event_kind_tag(e.kind)) + ":" + e.code);
        }
    };
    for (const auto& p : train_cohort.patients) {
        for (const auto& e : p.static_demographics) absorb(e);
        for (const auto& v : p.visits)
            for (const auto& e : v.events) absorb(e);
    }

    Vocabulary vocab;
    for (const auto& key : categorical_keys) vocab.add_token(key);
    for (auto& [code_key, values] : continuous_values) {
        auto edges = quantile_edges(std::move(values), n_bins_per_code);
        if (int(edges.size()) < n_bins_per_code - 1 && stats)
            stats->collapsed_codes.push_back(code_key);
        for (int b = 0; b <= int(edges.size()); ++b)
            vocab.add_token(code_key + "#" + std::to_string(b));
        vocab.set_bin_edges(code_key, std::move(edges));
    }
    return vocab;
}

std::optional<TokenizedTrajectory> tokenize_trajectory(const PatientTrajectory& patient,
                                                       const Vocabulary& vocab,
                                                       TokenizeStats* stats) {
    TokenizedTrajectory out;
    out.patient_id = patient.patient_id;
    bool first_kept = true;
    for (size_t i = 0; i < patient.visits.size(); ++i) {
        std::set<TokenId> ids;
        auto add_event = [&](const EventDescriptor& e) {
            auto key = event_token_key(e, vocab);
            if (!key) {
                if (stats) ++stats->dropped_unknown_events;
                return;
            }
            auto id = vocab.lookup(*key);
            if (!id) {
                if (stats) ++stats->dropped_unknown_events;
                return;
            }
            ids.insert(*id);
        };
        if (first_kept)
            for (const auto& e : patient.static_demographics) add_event(e);
        for (const auto& e : patient.visits[i].events) add_event(e);
        if (ids.empty()) {
            if (stats) ++stats->dropped_empty_visits;
            continue;
        }
        first_kept = false;
        TokenizedVisit tv;
        tv.time_days = patient.visits[i].time_days;
        tv.token_ids.assign(ids.begin(), ids.end());
        out.visits.push_back(std::move(tv));
    }
    if (out.visits.size() < 2) {
        if (stats) ++stats->excluded_trajectories;
        return std::nullopt;
    }
    return out;
}

std::vector<TokenizedTrajectory> tokenize_cohort(const Cohort& cohort, const Vocabulary& vocab,
                                                 TokenizeStats* stats) {
    std::vector<TokenizedTrajectory> out;
    out.reserve(cohort.patients.size());
    for (const auto& p : cohort.patients) {
        auto t = tokenize_trajectory(p, vocab, stats);
        if (t) out.push_back(std::move(*t));
    }
    return out;
}

}  // namespace ehrseq
