#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "ehrseq/tokenizer.hpp"

using namespace ehrseq;

namespace {

// hand-built two-patient cohort with one lab code
Cohort tiny_cohort() {
    Cohort cohort;
    PatientTrajectory p;
    p.patient_id = "P0";
    p.static_demographics = {{EventKind::demographic, "sex=F", std::nullopt}};
    Visit v0;
    v0.time_days = 0;
    v0.events = {{EventKind::diagnosis_code, "A", std::nullopt},
                 {EventKind::lab_code_with_value, "X", 5.0},
                 {EventKind::age_bin, "years", 40.0}};
    Visit v1;
    v1.time_days = 30;
    v1.events = {{EventKind::diagnosis_code, "B", std::nullopt},
                 {EventKind::age_bin, "years", 40.1}};
    p.visits = {v0, v1};
    cohort.patients.push_back(p);

    PatientTrajectory q = p;
    q.patient_id = "P1";
    q.visits[0].events.push_back({EventKind::medication_code, "M1", std::nullopt});
    q.visits[0].events[1].value = 7.5;  // lab X
    q.visits[1].events[1].value = 41.0;
    cohort.patients.push_back(q);
    return cohort;
}

}  // namespace

TEST_SUITE("tokenizer") {

TEST_CASE("quantile edges of 1..100 with 10 bins are the decile values") {
    std::vector<double> values;
    for (int i = 1; i <= 100; ++i) values.push_back(double(i));
    const auto edges = quantile_edges(values, 10);
    REQUIRE(edges.size() == 9);
    for (int k = 1; k <= 9; ++k) CHECK(edges[size_t(k - 1)] == double(10 * k));
}

TEST_CASE("two bins put the single edge at the median") {
    std::vector<double> values;
    for (int i = 1; i <= 101; ++i) values.push_back(double(i));
    const auto edges = quantile_edges(values, 2);
    REQUIRE(edges.size() == 1);
    CHECK(edges[0] == 51.0);  // nearest-rank ceil(101/2) = 51
}

TEST_CASE("duplicate-heavy values collapse edges") {
    std::vector<double> values(50, 1.0);
    values.insert(values.end(), 50, 2.0);
    const auto edges = quantile_edges(values, 10);
    CHECK(edges.size() < 9);
    for (size_t i = 1; i < edges.size(); ++i) CHECK(edges[i] > edges[i - 1]);
}

TEST_CASE("bin_value follows the upper-bin boundary convention") {
    const std::vector<double> edges{10.0, 20.0, 30.0};
    CHECK(bin_value(-5.0, edges) == 0);  // below first edge
    CHECK(bin_value(9.999, edges) == 0);
    CHECK(bin_value(10.0, edges) == 1);  // value equal to edge e_k lands in bin k
    CHECK(bin_value(20.0, edges) == 2);
    CHECK(bin_value(30.0, edges) == 3);
    CHECK(bin_value(35.0, edges) == 3);  // above last edge: len(edges)
    CHECK_THROWS_AS(bin_value(std::nan(""), edges), DataError);
}

TEST_CASE("bin_value equals the brute-force count of edges at or below") {
    const std::vector<double> edges{-2.0, 0.5, 0.5001, 3.0, 9.0};
    Rng rng(11);
    for (int i = 0; i < 500; ++i) {
        const double v = i % 7 == 0 ? edges[rng.uniform_index(edges.size())]
                                    : rng.uniform(-5.0, 12.0);
        int brute = 0;
        for (double e : edges)
            if (e <= v) ++brute;
        CHECK(bin_value(v, edges) == brute);
    }
}

TEST_CASE("vocabulary is a dense bijection with reserved specials") {
    const auto vocab = build_vocabulary(tiny_cohort(), 2);
    CHECK(vocab.key_of(kPadId) == kPadKey);
    CHECK(vocab.key_of(kSepId) == kSepKey);
    for (int id = 0; id < vocab.size(); ++id) {
        const auto back = vocab.lookup(vocab.key_of(TokenId(id)));
        REQUIRE(back.has_value());
        CHECK(*back == TokenId(id));
    }
    CHECK(vocab.lookup("dx:A").has_value());
    CHECK(vocab.lookup("rx:M1").has_value());
    CHECK(vocab.lookup("dem:sex=F").has_value());
    CHECK(vocab.lookup("lab:X#0").has_value());
    CHECK(vocab.lookup("lab:X#1").has_value());
    CHECK(!vocab.lookup("dx:ZZZ").has_value());
}

TEST_CASE("n_bins below 2 is a config error") {
    CHECK_THROWS_AS(build_vocabulary(tiny_cohort(), 1), ConfigError);
    CHECK_THROWS_AS(quantile_edges({1.0, 2.0}, 0), ConfigError);
}

TEST_CASE("collapsed codes are reported") {
    VocabBuildStats stats;
    build_vocabulary(tiny_cohort(), 10, &stats);  // lab X has 2 distinct train values
    bool found = false;
    for (const auto& c : stats.collapsed_codes) found = found || c == "lab:X";
    CHECK(found);
}

TEST_CASE("quantile bins receive balanced mass on train data") {
    Cohort cohort;
    Rng rng(3);
    PatientTrajectory p;
    p.patient_id = "P";
    for (int v = 0; v < 1000; ++v) {
        Visit visit;
        visit.time_days = v;
        visit.events = {{EventKind::lab_code_with_value, "L", rng.normal(10.0, 2.0)}};
        p.visits.push_back(visit);
    }
    cohort.patients.push_back(p);
    const int n_bins = 10;
    const auto vocab = build_vocabulary(cohort, n_bins);
    const auto* edges = vocab.edges_for("lab:L");
    REQUIRE(edges != nullptr);
    REQUIRE(edges->size() == size_t(n_bins - 1));

    std::map<int, int> counts;
    for (const auto& visit : p.visits) counts[bin_value(*visit.events[0].value, *edges)]++;
    const double expected = 1000.0 / n_bins;
    for (const auto& [bin, count] : counts) {
        CHECK(double(count) >= 0.5 * expected);
        CHECK(double(count) <= 2.0 * expected);
    }
}

TEST_CASE("tokenized visits are deduplicated id sets") {
    const auto cohort = tiny_cohort();
    auto patient = cohort.patients[0];
    patient.visits[0].events.push_back({EventKind::diagnosis_code, "A", std::nullopt});  // dup
    const auto vocab = build_vocabulary(cohort, 2);
    const auto traj = tokenize_trajectory(patient, vocab);
    REQUIRE(traj.has_value());
    const auto& ids = traj->visits[0].token_ids;
    for (size_t i = 1; i < ids.size(); ++i) CHECK(ids[i] > ids[i - 1]);
    // demographics live in the first visit only
    const auto dem_id = *vocab.lookup("dem:sex=F");
    CHECK(std::count(ids.begin(), ids.end(), dem_id) == 1);
    const auto& ids1 = traj->visits[1].token_ids;
    CHECK(std::count(ids1.begin(), ids1.end(), dem_id) == 0);
    // no specials inside event lists
    for (const auto& v : traj->visits)
        for (TokenId id : v.token_ids) CHECK(id > kSepId);
}

TEST_CASE("unknown codes are dropped and counted, never mapped") {
    const auto cohort = tiny_cohort();
    const auto vocab = build_vocabulary(cohort, 2);
    auto patient = cohort.patients[0];
    patient.visits[1].events.push_back({EventKind::diagnosis_code, "UNSEEN", std::nullopt});
    TokenizeStats stats;
    const auto traj = tokenize_trajectory(patient, vocab, &stats);
    REQUIRE(traj.has_value());
    CHECK(stats.dropped_unknown_events == 1);
    for (const auto& v : traj->visits)
        for (TokenId id : v.token_ids) CHECK(vocab.key_of(id).find("UNSEEN") == std::string::npos);
}

TEST_CASE("trajectories shrinking below two visits are excluded") {
    const auto cohort = tiny_cohort();
    const auto vocab = build_vocabulary(cohort, 2);
    PatientTrajectory alien;
    alien.patient_id = "ALIEN";
    Visit v0;
    v0.time_days = 0;
    v0.events = {{EventKind::diagnosis_code, "NOPE", std::nullopt}};
    Visit v1;
    v1.time_days = 10;
    v1.events = {{EventKind::diagnosis_code, "A", std::nullopt}};
    alien.visits = {v0, v1};
    TokenizeStats stats;
    const auto traj = tokenize_trajectory(alien, vocab, &stats);
    CHECK(!traj.has_value());
    CHECK(stats.dropped_empty_visits == 1);
    CHECK(stats.excluded_trajectories == 1);
}

TEST_CASE("detokenization inverts every continuous mapping") {
    const auto cohort = tiny_cohort();
    const auto vocab = build_vocabulary(cohort, 2);
    EventDescriptor lab{EventKind::lab_code_with_value, "X", 6.1};
    const auto key = event_token_key(lab, vocab);
    REQUIRE(key.has_value());
    const auto id = vocab.lookup(*key);
    REQUIRE(id.has_value());
    CHECK(vocab.key_of(*id) == *key);
    const auto* edges = vocab.edges_for("lab:X");
    REQUIRE(edges != nullptr);
    CHECK(*key == "lab:X#" + std::to_string(bin_value(6.1, *edges)));
}

TEST_CASE("vocabulary persistence is byte-stable") {
    const auto vocab = build_vocabulary(tiny_cohort(), 2);
    std::ostringstream first;
    vocab.save(first);
    std::istringstream in(first.str());
    const auto loaded = Vocabulary::load(in);
    CHECK(loaded == vocab);
    std::ostringstream second;
    loaded.save(second);
    CHECK(second.str() == first.str());
}

TEST_CASE("corrupt vocabulary files are rejected") {
    std::istringstream missing_special("token 0 foo\n");
    CHECK_THROWS_AS(Vocabulary::load(missing_special), DataError);
    std::istringstream gap("token 0 <pad>\ntoken 2 <sep>\n");
    CHECK_THROWS_AS(Vocabulary::load(gap), DataError);
}

}  // TEST_SUITE
