#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ehrseq/model.hpp"
#include "ehrseq/sequence.hpp"
#include "ehrseq/tokenizer.hpp"

namespace ehrseq {

// One named condition: diagnosis/medication token keys, file format mirrors
// the (disease, type, description, code) table layout.
struct ConditionLabelSet {
    std::string name;
    std::vector<std::string> token_keys;
};

std::vector<ConditionLabelSet> load_label_sets(const std::string& path);
void save_label_sets(const std::vector<ConditionLabelSet>& sets, const std::string& path);

struct ResolvedLabelSet {
    std::string name;
    std::vector<TokenId> ids;
    std::vector<std::string> unresolved;
};
ResolvedLabelSet resolve_label_set(const ConditionLabelSet& set, const Vocabulary& vocab);

// Per-sep condition score sigmoid(sum of label logits) plus next-visit truth.
struct SepPrediction {
    std::string patient_id;
    int sep_ordinal = 0;          // trajectory-level sep index
    double t_i = 0.0;             // prediction time (days)
    double t_next = 0.0;          // target visit time
    int target_visit_index = 0;
    double score = 0.0;
    bool truth = false;           // any label token present in the target visit
};

struct TrajectoryPredictions {
    std::string patient_id;
    std::optional<int> first_onset_visit;  // first visit containing a label token
    std::vector<SepPrediction> seps;
};

// Rolling predictions at every sep of every trajectory; long trajectories
// are evaluated in block_size chunks.
std::vector<TrajectoryPredictions> score_trajectories(const ModelParams& params,
                                                      const std::vector<TokenizedTrajectory>& trajs,
                                                      const ResolvedLabelSet& labels);

std::vector<SepPrediction> flatten_predictions(const std::vector<TrajectoryPredictions>& rolling);

// F1-maximizing threshold over the exhaustive scan of distinct validation
// scores; ties break toward the higher threshold. Flagging rule everywhere:
// score >= threshold.
double select_threshold(const std::vector<SepPrediction>& val_predictions);

struct PrecisionRecall {
    std::optional<double> precision;  // unset when nothing was flagged
    std::optional<double> recall;     // unset when no positives exist
    int64_t tp = 0, fp = 0, fn = 0;
};
PrecisionRecall next_visit_precision_recall(const std::vector<SepPrediction>& test_predictions,
                                            double threshold);

struct OnTimeStats {
    int64_t tp_total = 0;
    int64_t tp_on_time = 0;
    std::optional<double> rate;  // unset when tp_total == 0
};
// Trajectory-level true positives: the patient develops the condition and
// any sep flags it; on-time iff the earliest flagging sep targets a visit at
// or before the first onset.
OnTimeStats on_time_rate(const std::vector<TrajectoryPredictions>& rolling, double threshold);

struct WindowExample {
    std::string patient_id;
    int anchor_visit = 0;
    double anchor_days = 0.0;
    int horizon_days = 0;
    int label = 0;
    double score = 0.0;
};

struct CurationCounts {
    int64_t candidates = 0;
    int64_t included = 0;
    int64_t excluded_history = 0;   // label code already in input history
    int64_t excluded_onset_1y = 0;  // onset within one year of the anchor
    int64_t excluded_followup = 0;  // follow-up shorter than the horizon
};

// Anchors need >= 365 days of prior history. Label 1 iff first onset falls in
// (anchor+365, anchor+horizon]; label 0 needs follow-up covering the horizon.
std::vector<WindowExample> curate_zero_shot_windows(const std::vector<TokenizedTrajectory>& split,
                                                    const ResolvedLabelSet& labels,
                                                    int horizon_days,
                                                    CurationCounts* counts = nullptr);

// Max over query_grid_size sep probes at times evenly spaced in
// (anchor+365, anchor+horizon]; each probe sums label logits at an appended
// sep and applies a sigmoid.
double condition_score(const ModelParams& params, const TokenizedTrajectory& traj,
                       const WindowExample& window, const ResolvedLabelSet& labels,
                       int query_grid_size);

// Mann-Whitney AUROC with 0.5 tie credit.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);
// Average precision, threshold-grouped (precision at each positive's rank).
double auprc(const std::vector<double>& scores, const std::vector<int>& labels);

using MetricFn =
    std::function<double(const std::vector<double>&, const std::vector<int>&)>;

struct BootstrapInterval {
    double lo = 0.0;
    double hi = 0.0;
};
// Patient-level resampling with replacement, percentile (2.5, 97.5)
// interval; single-class resamples are redrawn with capped retries.
BootstrapInterval bootstrap_ci(const std::vector<std::string>& patient_ids,
                               const std::vector<double>& scores, const std::vector<int>& labels,
                               const MetricFn& metric, int n_resamples, uint64_t seed);

struct PrCurvePoint {
    double threshold = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};
std::vector<PrCurvePoint> pr_curve(const std::vector<double>& scores,
                                   const std::vector<int>& labels);

}  // namespace ehrseq
