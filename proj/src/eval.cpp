#include "ehrseq/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace ehrseq {

namespace {

constexpr int kOneYearDays = 365;

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == '\t') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

std::vector<ConditionLabelSet> load_label_sets(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open label-set file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty label-set file: " + path);
    {
        auto header = split_tabs(line);
        if (header.size() < 4 || header[0] != "disease" || header[1] != "type" ||
            header[3] != "code")
            throw DataError("label-set file must start with 'disease\\ttype\\tdescription\\tcode'");
    }

    std::vector<ConditionLabelSet> sets;
    std::map<std::string, size_t> index;
    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto cols = split_tabs(line);
        if (cols.size() < 4)
            throw DataError("label-set file line " + std::to_string(line_no) + ": need 4 columns");
        const std::string& disease = cols[0];
        const std::string& type = cols[1];
        const std::string& code = cols[3];
        std::string key;
        if (type == "Diagnosis")
            key = "dx:" + code;
        else if (type == "Medication")
            key = "rx:" + code;
        else
            throw DataError("label-set file line " + std::to_string(line_no) +
                            ": unknown type '" + type + "'");
        auto it = index.find(disease);
        if (it == index.end()) {
            index[disease] = sets.size();
            sets.push_back({disease, {key}});
        } else {
            sets[it->second].token_keys.push_back(key);
        }
    }
    if (sets.empty()) throw DataError("label-set file has no rows: " + path);
    return sets;
}

void save_label_sets(const std::vector<ConditionLabelSet>& sets, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << "disease\ttype\tdescription\tcode\n";
    for (const auto& set : sets) {
        for (const auto& key : set.token_keys) {
            std::string type, code;
            if (key.rfind("dx:", 0) == 0) {
                type = "Diagnosis";
                code = key.substr(3);
            } else if (key.rfind("rx:", 0) == 0) {
                type = "Medication";
                code = key.substr(3);
            } else {
                throw DataError("label set key is neither dx: nor rx:: " + key);
            }
            out << set.name << "\t" << type << "\t" << set.name << " code\t" << code << "\n";
        }
    }
}

ResolvedLabelSet resolve_label_set(const ConditionLabelSet& set, const Vocabulary& vocab) {
    if (set.token_keys.empty()) throw ConfigError("label set '" + set.name + "' is empty");
    ResolvedLabelSet out;
    out.name = set.name;
    for (const auto& key : set.token_keys) {
        if (auto id = vocab.lookup(key))
            out.ids.push_back(*id);
        else
            out.unresolved.push_back(key);
    }
    std::sort(out.ids.begin(), out.ids.end());
    out.ids.erase(std::unique(out.ids.begin(), out.ids.end()), out.ids.end());
    return out;
}

namespace {

bool visit_has_any(const TokenizedVisit& visit, const std::vector<TokenId>& sorted_ids) {
    for (TokenId id : visit.token_ids)
        if (std::binary_search(sorted_ids.begin(), sorted_ids.end(), id)) return true;
    return false;
}

std::optional<int> first_onset_visit_of(const TokenizedTrajectory& traj,
                                        const std::vector<TokenId>& sorted_ids) {
    for (size_t v = 0; v < traj.visits.size(); ++v)
        if (visit_has_any(traj.visits[v], sorted_ids)) return int(v);
    return std::nullopt;
}

}  // namespace

std::vector<TrajectoryPredictions> score_trajectories(const ModelParams& params,
                                                      const std::vector<TokenizedTrajectory>& trajs,
                                                      const ResolvedLabelSet& labels) {
    if (labels.ids.empty()) throw DataError("label set resolves to no tokens: " + labels.name);

    std::vector<TrajectoryPredictions> out;
    out.reserve(trajs.size());
    for (size_t ti = 0; ti < trajs.size(); ++ti) {
        const auto& traj = trajs[ti];
        TrajectoryPredictions tp;
        tp.patient_id = traj.patient_id;
        tp.first_onset_visit = first_onset_visit_of(traj, labels.ids);

        const auto seqs = trajectory_sequences(traj, int(ti), params.config.block_size);
        int ordinal = 0;
        for (const auto& seq : seqs) {
            const auto mask = build_attention_mask(seq, PackMode::isolated);
            const Mat logits = sep_logits(params, seq, mask);
            const int first_visit = seq.patient_spans[0].first_visit;
            for (size_t s = 0; s < seq.sep_slots.size(); ++s) {
                const auto& slot = seq.sep_slots[s];
                const int target_visit = first_visit + slot.target_visit_index;
                double z = 0.0;
                for (TokenId id : labels.ids) z += logits(Eigen::Index(s), id);
                SepPrediction pred;
                pred.patient_id = traj.patient_id;
                pred.sep_ordinal = ordinal++;
                pred.t_i = double(traj.visits[size_t(target_visit - 1)].time_days);
                pred.t_next = double(traj.visits[size_t(target_visit)].time_days);
                pred.target_visit_index = target_visit;
                pred.score = sigmoid(z);
                pred.truth = visit_has_any(traj.visits[size_t(target_visit)], labels.ids);
                tp.seps.push_back(pred);
            }
        }
        out.push_back(std::move(tp));
    }
    return out;
}

std::vector<SepPrediction> flatten_predictions(const std::vector<TrajectoryPredictions>& rolling) {
    std::vector<SepPrediction> out;
    for (const auto& tp : rolling) out.insert(out.end(), tp.seps.begin(), tp.seps.end());
    return out;
}

namespace {

struct F1Counts {
    int64_t tp = 0, fp = 0, fn = 0;
    double f1() const {
        const double denom = double(2 * tp + fp + fn);
        return denom == 0.0 ? 0.0 : double(2 * tp) / denom;
    }
};

F1Counts count_at_threshold(const std::vector<SepPrediction>& preds, double threshold) {
    F1Counts c;
    for (const auto& p : preds) {
        const bool flagged = p.score >= threshold;
        if (flagged && p.truth)
            ++c.tp;
        else if (flagged && !p.truth)
            ++c.fp;
        else if (!flagged && p.truth)
            ++c.fn;
    }
    return c;
}

}  // namespace

double select_threshold(const std::vector<SepPrediction>& val_predictions) {
    bool any_positive = false;
    for (const auto& p : val_predictions)
        if (p.truth) {
            any_positive = true;
            break;
        }
    if (!any_positive)
        throw DataError("select_threshold: no positive targets in validation predictions");

    std::set<double> distinct;
    for (const auto& p : val_predictions) distinct.insert(p.score);

    double best_threshold = 0.0;
    double best_f1 = -1.0;
    for (double t : distinct) {  // ascending: later >= candidates win ties
        const double f1 = count_at_threshold(val_predictions, t).f1();
        if (f1 >= best_f1) {
            best_f1 = f1;
            best_threshold = t;
        }
    }
    return best_threshold;
}

PrecisionRecall next_visit_precision_recall(const std::vector<SepPrediction>& test_predictions,
                                            double threshold) {
    const F1Counts c = count_at_threshold(test_predictions, threshold);
    PrecisionRecall pr;
    pr.tp = c.tp;
    pr.fp = c.fp;
    pr.fn = c.fn;
    if (c.tp + c.fp > 0) pr.precision = double(c.tp) / double(c.tp + c.fp);
    if (c.tp + c.fn > 0) pr.recall = double(c.tp) / double(c.tp + c.fn);
    return pr;
}

OnTimeStats on_time_rate(const std::vector<TrajectoryPredictions>& rolling, double threshold) {
    OnTimeStats stats;
    for (const auto& tp : rolling) {
        if (!tp.first_onset_visit) continue;  // never develops the condition
        std::optional<int> earliest_flag_target;
        for (const auto& p : tp.seps) {
            if (p.score < threshold) continue;
            if (!earliest_flag_target || p.target_visit_index < *earliest_flag_target)
                earliest_flag_target = p.target_visit_index;
        }
        if (!earliest_flag_target) continue;  // develops but never flagged: not a TP
        ++stats.tp_total;
        if (*earliest_flag_target <= *tp.first_onset_visit) ++stats.tp_on_time;
    }
    if (stats.tp_total > 0) stats.rate = double(stats.tp_on_time) / double(stats.tp_total);
    return stats;
}

std::vector<WindowExample> curate_zero_shot_windows(const std::vector<TokenizedTrajectory>& split,
                                                    const ResolvedLabelSet& labels,
                                                    int horizon_days, CurationCounts* counts) {
    if (labels.ids.empty()) throw DataError("label set resolves to no tokens: " + labels.name);
    if (horizon_days <= kOneYearDays)
        throw ConfigError("zero-shot horizon must exceed one year");

    CurationCounts local;
    std::vector<WindowExample> out;
    for (const auto& traj : split) {
        const double t_first = double(traj.visits.front().time_days);
        const double t_last = double(traj.visits.back().time_days);
        std::optional<double> onset_time;
        if (auto ov = first_onset_visit_of(traj, labels.ids))
            onset_time = double(traj.visits[size_t(*ov)].time_days);

        for (size_t v = 0; v < traj.visits.size(); ++v) {
            const double anchor = double(traj.visits[v].time_days);
            if (anchor - t_first < double(kOneYearDays)) continue;  // not a candidate yet
            ++local.candidates;
            if (onset_time && *onset_time <= anchor) {
                ++local.excluded_history;
                continue;
            }
            if (onset_time && *onset_time <= anchor + double(kOneYearDays)) {
                ++local.excluded_onset_1y;
                continue;
            }
            WindowExample w;
            w.patient_id = traj.patient_id;
            w.anchor_visit = int(v);
            w.anchor_days = anchor;
            w.horizon_days = horizon_days;
            if (onset_time && *onset_time <= anchor + double(horizon_days)) {
                w.label = 1;
            } else if (t_last >= anchor + double(horizon_days)) {
                w.label = 0;
            } else {
                ++local.excluded_followup;
                continue;
            }
            ++local.included;
            out.push_back(std::move(w));
        }
    }
    if (counts) *counts = local;
    return out;
}

double condition_score(const ModelParams& params, const TokenizedTrajectory& traj,
                       const WindowExample& window, const ResolvedLabelSet& labels,
                       int query_grid_size) {
    if (labels.ids.empty()) throw DataError("label set resolves to no tokens: " + labels.name);
    if (query_grid_size < 1) throw ConfigError("query_grid_size must be >= 1");

    // history: visits up to the anchor, newest visits kept when the block
    // overflows (one slot reserved for the query sep)
    const int budget = params.config.block_size - 1;
    int first_visit = window.anchor_visit;
    int used = std::min(budget, int(traj.visits[size_t(window.anchor_visit)].token_ids.size()));
    for (int v = window.anchor_visit - 1; v >= 0; --v) {
        const int visit_len = int(traj.visits[size_t(v)].token_ids.size()) + 1;  // events + sep
        if (used + visit_len > budget) break;
        used += visit_len;
        first_visit = v;
    }

    PositionedSequence seq;
    const int64_t t_base = traj.visits[size_t(first_visit)].time_days;
    for (int v = first_visit; v <= window.anchor_visit; ++v) {
        const auto& visit = traj.visits[size_t(v)];
        for (TokenId id : visit.token_ids) {
            if (seq.length() + 1 > budget) break;  // cap a lone oversized anchor visit
            seq.token_ids.push_back(id);
            seq.positions.push_back(double(visit.time_days - t_base));
            seq.visit_index.push_back(v - first_visit);
        }
        if (v < window.anchor_visit) {
            seq.token_ids.push_back(kSepId);
            seq.positions.push_back(double(traj.visits[size_t(v + 1)].time_days - t_base));
            seq.visit_index.push_back(v - first_visit);
        }
    }
    // query sep appended after the anchor visit; its position carries the
    // probed future time
    SepSlot query;
    query.seq_index = int(seq.token_ids.size());
    query.span = 0;
    query.target_visit_index = window.anchor_visit - first_visit + 1;
    seq.sep_slots.push_back(query);
    seq.token_ids.push_back(kSepId);
    seq.positions.push_back(0.0);  // set per grid point
    seq.visit_index.push_back(window.anchor_visit - first_visit);
    seq.patient_spans.push_back({0, seq.length(), 0, first_visit});

    const auto mask = build_attention_mask(seq, PackMode::isolated);

    const double window_start = window.anchor_days + double(kOneYearDays);
    const double window_len = double(window.horizon_days) - double(kOneYearDays);
    double best = 0.0;
    for (int g = 1; g <= query_grid_size; ++g) {
        const double t_query =
            window_start + window_len * double(g) / double(query_grid_size);
        seq.positions.back() = t_query - double(t_base);
        const Mat logits = sep_logits(params, seq, mask);
        double z = 0.0;
        for (TokenId id : labels.ids) z += logits(0, id);
        best = std::max(best, sigmoid(z));
    }
    return best;
}

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ConfigError("auroc: shape mismatch");
    int64_t n_pos = 0, n_neg = 0;
    for (int y : labels) (y != 0 ? n_pos : n_neg) += 1;
    if (n_pos == 0 || n_neg == 0)
        throw DataError("auroc: needs both classes present");

    // midranks handle score ties with 0.5 credit
    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), size_t(0));
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * double(i + 1 + j + 1);  // 1-based ranks
        for (size_t k = i; k <= j; ++k)
            if (labels[order[k]] != 0) rank_sum_pos += midrank;
        i = j + 1;
    }
    return (rank_sum_pos - double(n_pos) * double(n_pos + 1) / 2.0) /
           (double(n_pos) * double(n_neg));
}

double auprc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ConfigError("auprc: shape mismatch");
    int64_t n_pos = 0;
    for (int y : labels) n_pos += y != 0 ? 1 : 0;
    if (n_pos == 0) throw DataError("auprc: no positive labels");

    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), size_t(0));
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    // sum of (delta tp) * precision per distinct-score group, normalized by
    // the positive count once; with distinct scores this is exactly the mean
    // of precision at each positive's rank
    double weighted_precision_sum = 0.0;
    int64_t tp = 0, seen = 0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        int64_t tp_prev = tp;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        for (size_t k = i; k <= j; ++k) {
            ++seen;
            if (labels[order[k]] != 0) ++tp;
        }
        const double precision = double(tp) / double(seen);
        weighted_precision_sum += double(tp - tp_prev) * precision;
        i = j + 1;
    }
    return weighted_precision_sum / double(n_pos);
}

BootstrapInterval bootstrap_ci(const std::vector<std::string>& patient_ids,
                               const std::vector<double>& scores, const std::vector<int>& labels,
                               const MetricFn& metric, int n_resamples, uint64_t seed) {
    if (patient_ids.size() != scores.size() || scores.size() != labels.size())
        throw ConfigError("bootstrap_ci: shape mismatch");
    if (n_resamples < 100) throw ConfigError("bootstrap_ci: n_resamples must be >= 100");
    if (scores.empty()) throw DataError("bootstrap_ci: empty input");

    // group rows by patient, first-seen order
    std::vector<std::vector<size_t>> groups;
    {
        std::map<std::string, size_t> index;
        for (size_t i = 0; i < patient_ids.size(); ++i) {
            auto it = index.find(patient_ids[i]);
            if (it == index.end()) {
                index[patient_ids[i]] = groups.size();
                groups.push_back({i});
            } else {
                groups[it->second].push_back(i);
            }
        }
    }

    constexpr int kMaxRetries = 100;
    Rng rng(mix_seed(seed, 0x626f6f74ULL));
    std::vector<double> values;
    values.reserve(size_t(n_resamples));
    for (int r = 0; r < n_resamples; ++r) {
        double value = 0.0;
        bool ok = false;
        for (int attempt = 0; attempt < kMaxRetries && !ok; ++attempt) {
            std::vector<double> s;
            std::vector<int> y;
            for (size_t g = 0; g < groups.size(); ++g) {
                const auto& rows = groups[rng.uniform_index(groups.size())];
                for (size_t row : rows) {
                    s.push_back(scores[row]);
                    y.push_back(labels[row]);
                }
            }
            bool has_pos = false, has_neg = false;
            for (int yy : y) (yy != 0 ? has_pos : has_neg) = true;
            if (!has_pos || !has_neg) continue;  // redraw
            value = metric(s, y);
            ok = true;
        }
        if (!ok) throw DataError("bootstrap_ci: could not draw a two-class resample");
        values.push_back(value);
    }

    std::sort(values.begin(), values.end());
    const auto nearest_rank = [&](double q) {
        const size_t rank = size_t(std::ceil(q * double(values.size())));
        return values[std::min(values.size() - 1, std::max<size_t>(1, rank) - 1)];
    };
    return {nearest_rank(0.025), nearest_rank(0.975)};
}

std::vector<PrCurvePoint> pr_curve(const std::vector<double>& scores,
                                   const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ConfigError("pr_curve: shape mismatch");
    int64_t n_pos = 0;
    for (int y : labels) n_pos += y != 0 ? 1 : 0;
    if (n_pos == 0) throw DataError("pr_curve: no positive labels");

    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), size_t(0));
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    std::vector<PrCurvePoint> points;
    int64_t tp = 0, seen = 0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        for (size_t k = i; k <= j; ++k) {
            ++seen;
            if (labels[order[k]] != 0) ++tp;
        }
        points.push_back({scores[order[i]], double(tp) / double(seen), double(tp) / double(n_pos)});
        i = j + 1;
    }
    return points;
}

}  // namespace ehrseq
