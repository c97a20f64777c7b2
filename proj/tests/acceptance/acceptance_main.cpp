// Acceptance suite: one checkable criterion per function, each printing a
// single [PASS]/[FAIL] line. Run all with no arguments or one with
// --criterion N. Exit code is the number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iostream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "ehrseq/cohort.hpp"
#include "ehrseq/eval.hpp"
#include "ehrseq/loss_opt.hpp"
#include "ehrseq/model.hpp"
#include "ehrseq/run_config.hpp"
#include "ehrseq/sequence.hpp"
#include "ehrseq/tokenizer.hpp"
#include "ehrseq/train.hpp"

using namespace ehrseq;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

// ------------------------------------------------------------------ helpers

TokenizedTrajectory random_traj(Rng& rng, int vocab, int max_visits = 5) {
    TokenizedTrajectory traj;
    traj.patient_id = "R";
    const int n = 2 + int(rng.uniform_index(uint64_t(max_visits - 1)));
    int64_t t = 0;
    for (int i = 0; i < n; ++i) {
        TokenizedVisit v;
        v.time_days = t;
        std::set<TokenId> ids;
        const int k = 1 + int(rng.uniform_index(3));
        for (int j = 0; j < k; ++j) ids.insert(TokenId(2 + rng.uniform_index(uint64_t(vocab - 2))));
        v.token_ids.assign(ids.begin(), ids.end());
        traj.visits.push_back(v);
        t += 1 + int64_t(rng.uniform_index(90));
    }
    return traj;
}

struct Experiment {
    RunConfig cfg;
    Vocabulary vocab;
    std::vector<TokenizedTrajectory> train;
    std::vector<TokenizedTrajectory> val;
    std::vector<TokenizedTrajectory> test;
};

Experiment prepare_experiment(const std::string& config_text) {
    Experiment e;
    e.cfg = RunConfig::from_string(config_text);
    const Cohort cohort = generate_cohort(e.cfg.cohort);
    const auto split = split_cohort(cohort, e.cfg.split_fractions, e.cfg.seed);
    e.vocab = build_vocabulary(split.train, e.cfg.n_bins);
    e.train = tokenize_cohort(split.train, e.vocab);
    e.val = tokenize_cohort(split.val, e.vocab);
    e.test = tokenize_cohort(split.test, e.vocab);
    e.cfg.model.vocab_size = e.vocab.size();
    e.cfg.model.validate();
    return e;
}

ModelParams train_experiment(Experiment& e, const RunConfig& cfg) {
    PackedDataset ds = build_packed_dataset(e.train, e.val, cfg);
    Trainer trainer(init_params(cfg.model, cfg.seed), cfg, std::move(ds.train_rows),
                    std::move(ds.val_rows));
    trainer.run();
    return trainer.params();
}

ResolvedLabelSet effect_label(const Experiment& e, const std::string& code) {
    ResolvedLabelSet labels;
    labels.name = "cond_" + code;
    const auto id = e.vocab.lookup("dx:" + code);
    if (!id) throw DataError("effect code missing from vocabulary: " + code);
    labels.ids = {*id};
    return labels;
}

// --------------------------------------------------------------- criterion 1

Outcome criterion_1() {
    const auto start = Clock::now();
    ModelConfig cfg;
    cfg.n_layer = 2;
    cfg.n_head = 2;
    cfg.n_embd = 32;
    cfg.vocab_size = 64;
    cfg.block_size = 64;
    auto params = init_params(cfg, 2024);
    // unit-scale embeddings keep the layer-norm inputs well conditioned so
    // the h=1e-3 central differences stay within their convergence regime;
    // gradients are checked at every parameter, not a sample
    params.wte *= 50.0;

    Rng rng(71);
    const auto traj = random_traj(rng, cfg.vocab_size, 4);
    PackedBatch row;
    row.seq = assign_positions(traj);
    row.targets = build_targets_and_weights(traj, 0.5, 0.01);
    const auto mask = build_attention_mask(row.seq, PackMode::isolated);
    LossConfig lc;

    const auto analytic = loss_and_grads(params, {row}, PackMode::isolated, lc);

    auto loss_at = [&]() {
        const auto acc = accumulate_loss(params, row, mask, lc);
        return acc.loss_sum / double(acc.n_seps);
    };

    std::vector<Mat*> tensors;
    params.for_each_tensor([&](const std::string&, Mat& m, bool) { tensors.push_back(&m); });
    std::vector<const Mat*> grads;
    analytic.grads.for_each_tensor(
        [&](const std::string&, const Mat& m, bool) { grads.push_back(&m); });

    const double h = 1e-3;
    double max_rel = 0.0;
    int64_t checked = 0;
    for (size_t t = 0; t < tensors.size(); ++t) {
        Mat& m = *tensors[t];
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            const double orig = m.data()[i];
            m.data()[i] = orig + h;
            const double up = loss_at();
            m.data()[i] = orig - h;
            const double down = loss_at();
            m.data()[i] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double an = grads[t]->data()[i];
            const double rel = std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-6);
            max_rel = std::max(max_rel, rel);
            ++checked;
        }
    }
    const double elapsed = seconds_since(start);

    Outcome out;
    out.pass = max_rel < 1e-4 && elapsed < 60.0;
    out.detail = "max relative error " + std::to_string(max_rel) + " over " +
                 std::to_string(checked) + " parameters, " + std::to_string(elapsed) + "s";
    return out;
}

// --------------------------------------------------------------- criterion 2

Outcome criterion_2() {
    Outcome out;
    out.pass = true;
    int64_t checked = 0;
    for (double delta : {0.25, 0.5, 0.75, 1.0}) {
        for (double w_min : {0.0, 0.01, 0.1}) {
            for (int c = 0; c <= 30; ++c) {
                const double want = std::max(std::pow(delta, double(c)), w_min);
                if (repeat_weight(c, delta, w_min) != want) out.pass = false;
                ++checked;
            }
        }
    }
    // worked examples: delta=0.5 gives weight 1 at c=0 and 0.5 at c=1
    if (repeat_weight(0, 0.5, 0.01) != 1.0) out.pass = false;
    if (repeat_weight(1, 0.5, 0.01) != 0.5) out.pass = false;
    out.detail = std::to_string(checked) + " grid points exact, worked values exact";
    return out;
}

// --------------------------------------------------------------- criterion 3

Outcome criterion_3() {
    const char* config_text = R"(
seed = 33
n_patients = 200
mean_visits = 8
mean_gap_days = 30
n_diagnosis_codes = 24
n_medication_codes = 8
n_lab_codes = 2
planted_rule = D001->D020 lag=1 prob=0.7 chronic
n_layer = 2
n_head = 2
n_embd = 32
block_size = 96
batch_size = 4
max_iters = 4
warmup_iters = 1
lr_decay_iters = 4
learning_rate = 0.002
min_lr = 0.0002
n_bins = 4
temporal_decay = 1.0
)";
    Experiment e = prepare_experiment(config_text);
    PackedDataset ds = build_packed_dataset(e.train, e.val, e.cfg);

    auto run_steps = [&](bool decay_enabled) {
        RunConfig cfg = e.cfg;
        cfg.loss.decay_enabled = decay_enabled;
        Trainer trainer(init_params(cfg.model, cfg.seed), cfg,
                        std::vector<PackedBatch>(ds.train_rows),
                        std::vector<PackedBatch>(ds.val_rows));
        for (int64_t s = 0; s < cfg.opt.max_iters; ++s) trainer.step_once(s);
        return trainer.params();
    };
    const auto with_path = run_steps(true);
    const auto without_path = run_steps(false);

    bool identical = true;
    int64_t compared = 0;
    std::vector<const Mat*> rhs;
    without_path.for_each_tensor([&](const std::string&, const Mat& m, bool) { rhs.push_back(&m); });
    size_t i = 0;
    with_path.for_each_tensor([&](const std::string&, const Mat& m, bool) {
        for (Eigen::Index k = 0; k < m.size(); ++k) {
            if (std::memcmp(&m.data()[k], &rhs[i]->data()[k], sizeof(double)) != 0)
                identical = false;
            ++compared;
        }
        ++i;
    });

    Outcome out;
    out.pass = identical;
    out.detail = std::to_string(compared) +
                 " parameter doubles bitwise identical after 4 full training steps";
    return out;
}

// --------------------------------------------------------------- criterion 4

Outcome criterion_4() {
    ModelConfig cfg;
    cfg.n_layer = 2;
    cfg.n_head = 2;
    cfg.n_embd = 16;
    cfg.vocab_size = 24;
    cfg.block_size = 64;
    const auto params = init_params(cfg, 44);

    Rng rng(90);
    int64_t positions_checked = 0;
    bool pass = true;
    for (int trial = 0; trial < 100; ++trial) {
        auto traj = random_traj(rng, cfg.vocab_size, 5);
        const int n = int(traj.visits.size());
        const int future = 1 + int(rng.uniform_index(uint64_t(n - 1)));

        const auto seq = assign_positions(traj);
        const auto base = forward(params, seq, PackMode::isolated);

        // perturb one token of the chosen future visit
        auto& ids = traj.visits[size_t(future)].token_ids;
        const size_t which = rng.uniform_index(ids.size());
        TokenId replacement = TokenId(2 + rng.uniform_index(uint64_t(cfg.vocab_size - 2)));
        while (std::find(ids.begin(), ids.end(), replacement) != ids.end())
            replacement = TokenId(2 + (replacement - 1) % (cfg.vocab_size - 2));
        ids[which] = replacement;

        const auto seq2 = assign_positions(traj);
        const auto changed = forward(params, seq2, PackMode::isolated);

        for (int t = 0; t < seq.length(); ++t) {
            if (seq.visit_index[size_t(t)] >= future) continue;
            for (int v = 0; v < cfg.vocab_size; ++v) {
                if (base.logits(t, v) != changed.logits(t, v)) pass = false;
                ++positions_checked;
            }
        }
    }
    Outcome out;
    out.pass = pass;
    out.detail = "100 random sequences, " + std::to_string(positions_checked) +
                 " earlier logits exactly equal";
    return out;
}

// --------------------------------------------------------------- criterion 5

Outcome criterion_5() {
    ModelConfig cfg;
    cfg.n_layer = 2;
    cfg.n_head = 2;
    cfg.n_embd = 16;
    cfg.vocab_size = 32;
    cfg.block_size = 96;
    const auto params = init_params(cfg, 55);

    Rng rng(91);
    double max_diff = 0.0;
    int64_t spans_checked = 0;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<TokenizedTrajectory> trajs;
        const int n_traj = 2 + int(rng.uniform_index(3));
        for (int i = 0; i < n_traj; ++i) trajs.push_back(random_traj(rng, cfg.vocab_size, 4));

        const auto rows = pack_sequences(trajs, cfg.block_size, PackMode::isolated, 1.0, 0.0);
        for (const auto& row : rows) {
            const auto packed = forward(params, row.seq, PackMode::isolated);
            for (const auto& span : row.seq.patient_spans) {
                const auto solos =
                    trajectory_sequences(trajs[size_t(span.traj_index)], span.traj_index,
                                         cfg.block_size);
                const PositionedSequence* solo = nullptr;
                for (const auto& s : solos)
                    if (s.patient_spans[0].first_visit == span.first_visit) solo = &s;
                if (!solo) return {false, "span without matching unpacked chunk"};
                const auto lone = forward(params, *solo, PackMode::isolated);
                for (int t = 0; t < solo->length(); ++t)
                    for (int v = 0; v < cfg.vocab_size; ++v)
                        max_diff = std::max(max_diff,
                                            std::abs(lone.logits(t, v) -
                                                     packed.logits(span.begin + t, v)));
                ++spans_checked;
            }
        }
    }
    Outcome out;
    out.pass = max_diff < 1e-6;
    out.detail = "50 packings, " + std::to_string(spans_checked) + " spans, max |diff| " +
                 std::to_string(max_diff);
    return out;
}

// --------------------------------------------------------------- criterion 6

double pairwise_auroc(const std::vector<double>& s, const std::vector<int>& y) {
    double wins = 0.0;
    int64_t pairs = 0;
    for (size_t i = 0; i < s.size(); ++i)
        for (size_t j = 0; j < s.size(); ++j) {
            if (y[i] != 1 || y[j] != 0) continue;
            ++pairs;
            if (s[i] > s[j]) wins += 1.0;
            else if (s[i] == s[j]) wins += 0.5;
        }
    return wins / double(pairs);
}

double rank_auprc(const std::vector<double>& s, const std::vector<int>& y) {
    std::vector<size_t> order(s.size());
    std::iota(order.begin(), order.end(), size_t(0));
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return s[a] > s[b]; });
    int64_t n_pos = 0;
    for (int v : y) n_pos += v;
    double sum = 0.0;
    int64_t tp = 0;
    for (size_t r = 0; r < order.size(); ++r)
        if (y[order[r]] == 1) {
            ++tp;
            sum += double(tp) / double(r + 1);
        }
    return sum / double(n_pos);
}

Outcome criterion_6() {
    Rng rng(92);
    bool pass = true;
    std::string why;

    for (int trial = 0; trial < 200; ++trial) {
        const int n = 4 + int(rng.uniform_index(47));
        std::vector<double> s;
        std::vector<int> y;
        const bool with_ties = trial % 4 == 0;
        for (int i = 0; i < n; ++i) {
            s.push_back(with_ties ? double(rng.uniform_index(6)) / 5.0 : rng.uniform());
            y.push_back(rng.bernoulli(0.4) ? 1 : 0);
        }
        y[0] = 1;
        y[1] = 0;

        if (auroc(s, y) != pairwise_auroc(s, y)) {
            pass = false;
            why = "auroc mismatch at trial " + std::to_string(trial);
            break;
        }
        if (!with_ties && auprc(s, y) != rank_auprc(s, y)) {
            pass = false;
            why = "auprc mismatch at trial " + std::to_string(trial);
            break;
        }
    }

    // F1 threshold selection vs exhaustive scan over thresholds and midpoints
    for (int trial = 0; pass && trial < 100; ++trial) {
        std::vector<SepPrediction> preds;
        const int n = 3 + int(rng.uniform_index(25));
        for (int i = 0; i < n; ++i) {
            SepPrediction p;
            p.score = rng.uniform();
            p.truth = rng.bernoulli(0.4);
            preds.push_back(p);
        }
        preds[0].truth = true;
        const double tau = select_threshold(preds);
        const auto counts = next_visit_precision_recall(preds, tau);
        const double f1 = double(2 * counts.tp) / double(2 * counts.tp + counts.fp + counts.fn);

        double best = -1.0;
        std::vector<double> cand;
        for (const auto& p : preds) cand.push_back(p.score);
        std::sort(cand.begin(), cand.end());
        std::vector<double> taus{cand.front() - 1.0, cand.back() + 1.0};
        for (size_t i = 0; i < cand.size(); ++i) {
            taus.push_back(cand[i]);
            if (i + 1 < cand.size()) taus.push_back(0.5 * (cand[i] + cand[i + 1]));
        }
        for (double t : taus) {
            const auto c = next_visit_precision_recall(preds, t);
            const double denom = double(2 * c.tp + c.fp + c.fn);
            best = std::max(best, denom == 0.0 ? 0.0 : double(2 * c.tp) / denom);
        }
        if (f1 != best) {
            pass = false;
            why = "f1 threshold selection not exhaustive-optimal";
        }
    }

    Outcome out;
    out.pass = pass;
    out.detail = pass ? "200 metric instances and 100 threshold scans match brute force exactly"
                      : why;
    return out;
}

// --------------------------------------------------------------- criterion 7

Outcome criterion_7() {
    constexpr TokenId kLabel = 9;
    constexpr TokenId kFiller = 5;
    ResolvedLabelSet labels;
    labels.name = "cond";
    labels.ids = {kLabel};

    Rng rng(93);
    bool pass = true;
    int64_t adversarial = 0;

    for (int trial = 0; trial < 200; ++trial) {
        const int64_t anchor = 366 + int64_t(rng.uniform_index(600));

        // label code inside the history window
        TokenizedTrajectory hist;
        hist.patient_id = "hist";
        hist.visits.push_back({{kFiller}, 0});
        hist.visits.push_back({{kLabel}, 1 + int64_t(rng.uniform_index(uint64_t(anchor - 1)))});
        hist.visits.push_back({{kFiller}, anchor});
        hist.visits.push_back({{kFiller}, anchor + 1500});
        for (auto& v : hist.visits) std::sort(v.token_ids.begin(), v.token_ids.end());

        // onset 1..365 days after the anchor
        TokenizedTrajectory soon;
        soon.patient_id = "soon";
        soon.visits.push_back({{kFiller}, 0});
        soon.visits.push_back({{kFiller}, anchor});
        soon.visits.push_back({{kLabel}, anchor + 1 + int64_t(rng.uniform_index(364))});
        soon.visits.push_back({{kFiller}, anchor + 1500});

        CurationCounts counts;
        const auto windows =
            curate_zero_shot_windows({hist, soon}, labels, 730, &counts);
        for (const auto& w : windows) {
            if (w.patient_id == "hist") pass = false;                        // leaked history
            if (w.patient_id == "soon" && w.anchor_days == double(anchor)) pass = false;
        }
        if (counts.candidates != counts.included + counts.excluded_history +
                                     counts.excluded_onset_1y + counts.excluded_followup)
            pass = false;
        adversarial += 2;
    }

    // partition identity on a generated cohort
    CohortConfig cc;
    cc.n_patients = 300;
    cc.mean_visits = 14;
    cc.mean_gap_days = 120;
    cc.rng_seed = 5;
    cc.planted_rules.push_back({{"D003"}, "D030", 4, RulePersistence::chronic_repeat, 0.8});
    const Cohort cohort = generate_cohort(cc);
    Vocabulary vocab = build_vocabulary(cohort, 4);
    const auto trajs = tokenize_cohort(cohort, vocab);
    ResolvedLabelSet planted;
    planted.name = "cond_D030";
    planted.ids = {*vocab.lookup("dx:D030")};
    CurationCounts counts;
    const auto windows = curate_zero_shot_windows(trajs, planted, 730, &counts);
    if (counts.candidates != counts.included + counts.excluded_history +
                                 counts.excluded_onset_1y + counts.excluded_followup)
        pass = false;
    // full scan: no included window may carry a label token at or before its anchor
    for (const auto& w : windows) {
        for (const auto& traj : trajs) {
            if (traj.patient_id != w.patient_id) continue;
            for (const auto& v : traj.visits) {
                if (double(v.time_days) > w.anchor_days) break;
                for (TokenId id : v.token_ids)
                    if (id == planted.ids[0]) pass = false;
            }
        }
    }

    Outcome out;
    out.pass = pass;
    out.detail = std::to_string(adversarial) + " adversarial fixtures excluded; partition " +
                 std::to_string(counts.candidates) + " = " + std::to_string(counts.included) +
                 "+" + std::to_string(counts.excluded_history) + "+" +
                 std::to_string(counts.excluded_onset_1y) + "+" +
                 std::to_string(counts.excluded_followup);
    return out;
}

// --------------------------------------------------------------- criterion 8

Outcome criterion_8() {
    const auto start = Clock::now();
    const char* config_text = R"(
seed = 88
n_patients = 5000
mean_visits = 8
mean_gap_days = 30
n_diagnosis_codes = 24
n_medication_codes = 8
n_lab_codes = 2
diag_per_visit = 2
med_per_visit = 1
labs_per_visit = 1
planted_rule = D001->D020 lag=1 prob=1.0 once
n_layer = 2
n_head = 2
n_embd = 64
block_size = 128
batch_size = 8
max_iters = 500
warmup_iters = 20
lr_decay_iters = 500
eval_interval = 100
eval_iters = 4
learning_rate = 0.002
min_lr = 0.0002
n_bins = 4
temporal_decay = 0.5
)";
    Experiment e = prepare_experiment(config_text);
    const auto params = train_experiment(e, e.cfg);
    const double train_seconds = seconds_since(start);

    const auto labels = effect_label(e, "D020");
    const auto val_rolling = score_trajectories(params, e.val, labels);
    const auto test_rolling = score_trajectories(params, e.test, labels);
    const double tau = select_threshold(flatten_predictions(val_rolling));
    const auto pr = next_visit_precision_recall(flatten_predictions(test_rolling), tau);

    Outcome out;
    const double precision = pr.precision.value_or(0.0);
    const double recall = pr.recall.value_or(0.0);
    out.pass = recall >= 0.9 && precision >= 0.8 && train_seconds < 900.0;
    out.detail = "recall " + std::to_string(recall) + ", precision " + std::to_string(precision) +
                 ", training " + std::to_string(train_seconds) + "s";
    return out;
}

// --------------------------------------------------------------- criterion 9

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    auto ranks = [](const std::vector<double>& v) {
        std::vector<double> r(v.size());
        for (size_t i = 0; i < v.size(); ++i) {
            double less = 0.0, equal = 0.0;
            for (size_t j = 0; j < v.size(); ++j) {
                if (v[j] < v[i]) ++less;
                if (v[j] == v[i]) ++equal;
            }
            r[i] = less + 0.5 * (equal + 1.0);
        }
        return r;
    };
    const auto ra = ranks(a);
    const auto rb = ranks(b);
    const double n = double(a.size());
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double num = 0.0, da = 0.0, db = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    return num / std::sqrt(da * db);
}

Outcome criterion_9() {
    const auto start = Clock::now();
    const char* config_text = R"(
seed = 99
n_patients = 3000
mean_visits = 11
mean_gap_days = 30
n_diagnosis_codes = 24
n_medication_codes = 8
n_lab_codes = 2
diag_per_visit = 2
med_per_visit = 1
labs_per_visit = 1
planted_rule = D002->D030 lag=1 prob=0.6 chronic
n_layer = 2
n_head = 2
n_embd = 64
block_size = 160
batch_size = 8
max_iters = 500
warmup_iters = 20
lr_decay_iters = 500
eval_interval = 100
eval_iters = 4
learning_rate = 0.002
min_lr = 0.0002
n_bins = 4
)";
    Experiment e = prepare_experiment(config_text);
    const auto labels = effect_label(e, "D030");

    const std::vector<double> deltas{1.0, 0.75, 0.5, 0.25};
    std::vector<double> rates;
    std::string table = "delta/on-time:";
    for (double delta : deltas) {
        RunConfig cfg = e.cfg;
        cfg.loss.delta = delta;
        const auto params = train_experiment(e, cfg);
        const auto val_rolling = score_trajectories(params, e.val, labels);
        const auto test_rolling = score_trajectories(params, e.test, labels);
        const double tau = select_threshold(flatten_predictions(val_rolling));
        const auto stats = on_time_rate(test_rolling, tau);
        rates.push_back(stats.rate.value_or(0.0));
        table += " " + format_double(delta) + "->" + std::to_string(rates.back());
    }
    const double rho = spearman(deltas, rates);
    const double elapsed = seconds_since(start);

    Outcome out;
    out.pass = rho <= -0.8 && elapsed < 3600.0;
    out.detail = table + "; spearman " + std::to_string(rho) + ", " +
                 std::to_string(elapsed) + "s total";
    return out;
}

// -------------------------------------------------------------- criterion 10

Outcome criterion_10() {
    const auto start = Clock::now();
    const char* config_text = R"(
seed = 110
n_patients = 3000
mean_visits = 16
mean_gap_days = 110
n_diagnosis_codes = 24
n_medication_codes = 8
n_lab_codes = 2
diag_per_visit = 2
med_per_visit = 1
labs_per_visit = 1
planted_rule = D003->D040 lag=5 prob=0.9 chronic
n_layer = 2
n_head = 2
n_embd = 64
block_size = 256
batch_size = 8
max_iters = 600
warmup_iters = 20
lr_decay_iters = 600
eval_interval = 100
eval_iters = 4
learning_rate = 0.002
min_lr = 0.0002
n_bins = 4
temporal_decay = 0.5
query_grid_size = 8
bootstrap_resamples = 1000
)";
    // the model is pretrained on next-visit prediction only; the zero-shot
    // task below is never part of training
    Experiment e = prepare_experiment(config_text);
    const auto params = train_experiment(e, e.cfg);
    const auto labels = effect_label(e, "D040");

    CurationCounts counts;
    auto windows = curate_zero_shot_windows(e.test, labels, 730, &counts);
    if (windows.empty()) return {false, "no curated windows"};

    std::vector<std::string> ids;
    std::vector<double> scores;
    std::vector<int> ys;
    for (auto& w : windows) {
        const auto it = std::find_if(e.test.begin(), e.test.end(),
                                     [&](const auto& t) { return t.patient_id == w.patient_id; });
        w.score = condition_score(params, *it, w, labels, e.cfg.query_grid_size);
        ids.push_back(w.patient_id);
        scores.push_back(w.score);
        ys.push_back(w.label);
    }
    int64_t n_pos = 0;
    for (int y : ys) n_pos += y;
    const double roc = auroc(scores, ys);
    const auto ci = bootstrap_ci(ids, scores, ys, auroc, e.cfg.bootstrap_resamples, e.cfg.seed);
    const double elapsed = seconds_since(start);

    Outcome out;
    out.pass = roc > 0.70 && ci.lo > 0.5;
    out.detail = "2y AUROC " + std::to_string(roc) + " CI (" + std::to_string(ci.lo) + ", " +
                 std::to_string(ci.hi) + "), " + std::to_string(windows.size()) + " windows (" +
                 std::to_string(n_pos) + " positive), " + std::to_string(elapsed) + "s";
    return out;
}

// -------------------------------------------------------------- criterion 11

Outcome criterion_11() {
    OptConfig cfg;
    cfg.peak_lr = 2.2e-4;
    cfg.min_lr = 2.2e-5;
    cfg.warmup_iters = 20000;
    cfg.lr_decay_iters = 800000;
    cfg.max_iters = 810000;

    Outcome out;
    out.pass = lr_at(20000, cfg) == 2.2e-4 && lr_at(800000, cfg) == 2.2e-5 &&
               lr_at(805000, cfg) == 2.2e-5 && lr_at(810000, cfg) == 2.2e-5 &&
               lr_at(10000, cfg) == 0.5 * 2.2e-4;
    out.detail = "peak at warmup step and floor after decay reproduce exactly";
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    int only = 0;
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--criterion") == 0 && i + 1 < argc) only = std::atoi(argv[i + 1]);
    }

    struct Entry {
        int id;
        const char* name;
        Outcome (*fn)();
    };
    const std::vector<Entry> entries{
        {1, "gradient correctness vs central finite differences", criterion_1},
        {2, "repeat-weight formula oracle", criterion_2},
        {3, "delta=1 training step bitwise equals decay-free path", criterion_3},
        {4, "visit-causality perturbation probe", criterion_4},
        {5, "isolated packing equivalence", criterion_5},
        {6, "AUROC/AUPRC/F1 brute-force oracles", criterion_6},
        {7, "zero-shot leakage filters", criterion_7},
        {8, "planted-dynamics learnability", criterion_8},
        {9, "decay-factor sweep trend (on-time rate vs delta)", criterion_9},
        {10, "zero-shot signal on a slow-onset condition", criterion_10},
        {11, "learning-rate schedule anchors", criterion_11},
    };

    int failures = 0;
    for (const auto& entry : entries) {
        if (only != 0 && entry.id != only) continue;
        Outcome outcome;
        try {
            outcome = entry.fn();
        } catch (const std::exception& ex) {
            outcome.pass = false;
            outcome.detail = std::string("exception: ") + ex.what();
        }
        std::cout << (outcome.pass ? "[PASS]" : "[FAIL]") << " criterion " << entry.id << ": "
                  << entry.name << " -- " << outcome.detail << std::endl;
        if (!outcome.pass) ++failures;
    }
    return failures;
}
