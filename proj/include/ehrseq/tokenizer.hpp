#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ehrseq/cohort.hpp"

namespace ehrseq {

using TokenId = int32_t;

constexpr TokenId kPadId = 0;
constexpr TokenId kSepId = 1;
inline constexpr const char* kPadKey = "<pad>";
inline constexpr const char* kSepKey = "<sep>";

// Token keys are "tag:code" for categorical events and "tag:code#bin" for
// quantile-binned continuous events (tag in {dem, age, dx, rx, lab}).
class Vocabulary {
  public:
    Vocabulary();

    TokenId add_token(const std::string& key);
    std::optional<TokenId> lookup(const std::string& key) const;
    const std::string& key_of(TokenId id) const;
    int size() const { return int(id_to_key_.size()); }

    // ascending bin edges per continuous code key ("lab:L000", "age:years")
    const std::map<std::string, std::vector<double>>& bin_edges() const { return bin_edges_; }
    void set_bin_edges(const std::string& code_key, std::vector<double> edges);
    const std::vector<double>* edges_for(const std::string& code_key) const;

    void save(std::ostream& out) const;
    void save(const std::string& path) const;
    static Vocabulary load(std::istream& in);
    static Vocabulary load_file(const std::string& path);

    bool operator==(const Vocabulary& o) const {
        return id_to_key_ == o.id_to_key_ && bin_edges_ == o.bin_edges_;
    }

  private:
    std::map<std::string, TokenId> token_to_id_;
    std::vector<std::string> id_to_key_;
    std::map<std::string, std::vector<double>> bin_edges_;
};

struct VocabBuildStats {
    // codes whose distinct train values could not fill n_bins; duplicate
    // edges were collapsed
    std::vector<std::string> collapsed_codes;
};

// Nearest-rank empirical quantiles at k/n_bins, k = 1..n_bins-1, duplicates
// collapsed. `values` need not be sorted.
std::vector<double> quantile_edges(std::vector<double> values, int n_bins);

// Bin index = number of edges <= value: left-closed/right-open bins, a value
// equal to edge k lands in bin k. Range [0, edges.size()]. NaN is rejected.
int bin_value(double value, const std::vector<double>& edges);

// Vocabulary is built from the train split only.
Vocabulary build_vocabulary(const Cohort& train_cohort, int n_bins_per_code,
                            VocabBuildStats* stats = nullptr);

struct TokenizedVisit {
    std::vector<TokenId> token_ids;  // deduplicated, ascending by id
    int64_t time_days = 0;
};

struct TokenizedTrajectory {
    std::string patient_id;
    std::vector<TokenizedVisit> visits;
};

struct TokenizeStats {
    int64_t dropped_unknown_events = 0;
    int64_t dropped_empty_visits = 0;
    int64_t excluded_trajectories = 0;  // reduced below 2 visits
};

// Demographics are injected into the first visit only; age arrives per visit
// from the generator. Unknown codes are dropped and counted, never mapped to
// a catch-all token. Returns nullopt when fewer than 2 visits survive.
std::optional<TokenizedTrajectory> tokenize_trajectory(const PatientTrajectory& patient,
                                                       const Vocabulary& vocab,
                                                       TokenizeStats* stats = nullptr);

std::vector<TokenizedTrajectory> tokenize_cohort(const Cohort& cohort, const Vocabulary& vocab,
                                                 TokenizeStats* stats = nullptr);

// key for the token an event maps to under `vocab`; nullopt when unknown
std::optional<std::string> event_token_key(const EventDescriptor& event, const Vocabulary& vocab);

}  // namespace ehrseq
