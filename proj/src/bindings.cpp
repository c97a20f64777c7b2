#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "ehrseq/cohort.hpp"
#include "ehrseq/eval.hpp"
#include "ehrseq/loss_opt.hpp"
#include "ehrseq/model.hpp"
#include "ehrseq/run_config.hpp"
#include "ehrseq/sequence.hpp"
#include "ehrseq/tokenizer.hpp"
#include "ehrseq/train.hpp"

namespace py = pybind11;
using namespace ehrseq;

namespace {

PackMode mode_from_name(const std::string& name) {
    if (name == "cross") return PackMode::cross;
    if (name == "isolated") return PackMode::isolated;
    throw ConfigError("pack mode must be 'cross' or 'isolated'");
}

// Model wrapper owning parameters; forwards work on tokenized trajectories.
class Model {
  public:
    Model(const std::string& config_text, int vocab_size, uint64_t seed) {
        RunConfig cfg = RunConfig::from_string(config_text);
        cfg.model.vocab_size = vocab_size;
        params_ = init_params(cfg.model, seed);
    }
    explicit Model(ModelParams params) : params_(std::move(params)) {}

    static Model load(const std::string& path) { return Model(load_checkpoint(path).params); }
    void save(const std::string& path) const { save_checkpoint(path, params_, nullptr, 0, {}); }

    int64_t param_count() const { return params_.param_count(); }
    int vocab_size() const { return params_.config.vocab_size; }

    std::vector<std::vector<double>> forward_logits(const TokenizedTrajectory& traj,
                                                    const std::string& mode) const {
        const auto seq = assign_positions(traj);
        const auto out = forward(params_, seq, mode_from_name(mode));
        std::vector<std::vector<double>> logits(size_t(out.logits.rows()));
        for (Eigen::Index t = 0; t < out.logits.rows(); ++t) {
            logits[size_t(t)].resize(size_t(out.logits.cols()));
            for (Eigen::Index v = 0; v < out.logits.cols(); ++v)
                logits[size_t(t)][size_t(v)] = out.logits(t, v);
        }
        return logits;
    }

    double mean_loss(const std::vector<TokenizedTrajectory>& trajs, double delta, double w_min,
                     const std::string& mode) const {
        std::vector<PackedBatch> rows;
        for (const auto& traj : trajs) {
            PackedBatch row;
            row.seq = assign_positions(traj);
            row.targets = build_targets_and_weights(traj, delta, w_min);
            rows.push_back(std::move(row));
        }
        LossConfig lc;
        lc.delta = delta;
        lc.w_min = w_min;
        return loss_and_grads(params_, rows, mode_from_name(mode), lc).loss;
    }

  private:
    ModelParams params_;
};

MetricFn metric_by_name(const std::string& name) {
    if (name == "auroc") return [](const auto& s, const auto& y) { return auroc(s, y); };
    if (name == "auprc") return [](const auto& s, const auto& y) { return auprc(s, y); };
    throw ConfigError("metric must be 'auroc' or 'auprc'");
}

}  // namespace

PYBIND11_MODULE(_ehrseq, m) {
    m.doc() = "next-visit pretraining on longitudinal clinical-event sequences";

    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<DataError>(m, "DataError");
    py::register_exception<NumericError>(m, "NumericError");

    py::class_<Cohort>(m, "Cohort")
        .def_property_readonly("n_patients",
                               [](const Cohort& c) { return c.patients.size(); })
        .def("to_jsonl",
             [](const Cohort& c) {
                 std::ostringstream out;
                 write_cohort_jsonl(c, out);
                 return out.str();
             })
        .def_static("from_jsonl", [](const std::string& text) {
            std::istringstream in(text);
            return read_cohort_jsonl(in);
        });

    m.def("generate_cohort",
          [](const std::string& config_text) {
              return generate_cohort(RunConfig::from_string(config_text).cohort);
          },
          py::arg("config_text"));
    m.def("split_cohort",
          [](const Cohort& cohort, double train, double val, double test, uint64_t seed) {
              auto split = split_cohort(cohort, {train, val, test}, seed);
              return py::make_tuple(split.train, split.val, split.test);
          },
          py::arg("cohort"), py::arg("train"), py::arg("val"), py::arg("test"), py::arg("seed"));

    py::class_<Vocabulary>(m, "Vocabulary")
        .def_property_readonly("size", &Vocabulary::size)
        .def("lookup",
             [](const Vocabulary& v, const std::string& key) -> std::optional<TokenId> {
                 return v.lookup(key);
             })
        .def("key_of", &Vocabulary::key_of)
        .def("dumps",
             [](const Vocabulary& v) {
                 std::ostringstream out;
                 v.save(out);
                 return out.str();
             })
        .def_static("loads", [](const std::string& text) {
            std::istringstream in(text);
            return Vocabulary::load(in);
        });

    m.def("build_vocabulary",
          [](const Cohort& train, int n_bins) { return build_vocabulary(train, n_bins); },
          py::arg("train_cohort"), py::arg("n_bins"));
    m.def("quantile_edges", &quantile_edges, py::arg("values"), py::arg("n_bins"));
    m.def("bin_value", &bin_value, py::arg("value"), py::arg("edges"));

    py::class_<TokenizedVisit>(m, "TokenizedVisit")
        .def_readonly("time_days", &TokenizedVisit::time_days)
        .def_readonly("token_ids", &TokenizedVisit::token_ids);
    py::class_<TokenizedTrajectory>(m, "TokenizedTrajectory")
        .def(py::init([](const std::string& patient_id,
                         const std::vector<std::pair<int64_t, std::vector<TokenId>>>& visits) {
                 TokenizedTrajectory traj;
                 traj.patient_id = patient_id;
                 for (const auto& [time, ids] : visits) {
                     TokenizedVisit v;
                     v.time_days = time;
                     v.token_ids = ids;
                     traj.visits.push_back(std::move(v));
                 }
                 return traj;
             }),
             py::arg("patient_id"), py::arg("visits"))
        .def_readonly("patient_id", &TokenizedTrajectory::patient_id)
        .def_readonly("visits", &TokenizedTrajectory::visits);
    m.def("tokenize_cohort",
          [](const Cohort& cohort, const Vocabulary& vocab) {
              return tokenize_cohort(cohort, vocab);
          },
          py::arg("cohort"), py::arg("vocab"));

    py::class_<SepSlot>(m, "SepSlot")
        .def_readonly("seq_index", &SepSlot::seq_index)
        .def_readonly("span", &SepSlot::span)
        .def_readonly("target_visit_index", &SepSlot::target_visit_index);
    py::class_<PositionedSequence>(m, "PositionedSequence")
        .def_readonly("token_ids", &PositionedSequence::token_ids)
        .def_readonly("positions", &PositionedSequence::positions)
        .def_readonly("visit_index", &PositionedSequence::visit_index)
        .def_readonly("sep_slots", &PositionedSequence::sep_slots);
    py::class_<TargetBlock>(m, "TargetBlock")
        .def_readonly("target_visit_index", &TargetBlock::target_visit_index)
        .def_readonly("positive_ids", &TargetBlock::positive_ids)
        .def_readonly("weights", &TargetBlock::weights)
        .def_readonly("repeat_counts", &TargetBlock::repeat_counts);

    m.def("assign_positions", &assign_positions, py::arg("trajectory"));
    m.def("build_targets_and_weights", &build_targets_and_weights, py::arg("trajectory"),
          py::arg("delta"), py::arg("w_min"));
    m.def("attention_mask_grid",
          [](const TokenizedTrajectory& traj, const std::string& mode) {
              return mask_to_grid(
                  build_attention_mask(assign_positions(traj), mode_from_name(mode)));
          },
          py::arg("trajectory"), py::arg("mode") = "isolated");

    m.def("repeat_weight", &repeat_weight, py::arg("count"), py::arg("delta"), py::arg("w_min"));
    m.def("weighted_bce", &weighted_bce, py::arg("probs"), py::arg("targets"), py::arg("weights"),
          py::arg("eps") = 1e-7);
    m.def("lr_at",
          [](int64_t step, double peak_lr, double min_lr, int64_t warmup_iters,
             int64_t lr_decay_iters, bool cosine) {
              OptConfig cfg;
              cfg.peak_lr = peak_lr;
              cfg.min_lr = min_lr;
              cfg.warmup_iters = warmup_iters;
              cfg.lr_decay_iters = lr_decay_iters;
              cfg.max_iters = lr_decay_iters;
              cfg.cosine_decay = cosine;
              return lr_at(step, cfg);
          },
          py::arg("step"), py::arg("peak_lr"), py::arg("min_lr"), py::arg("warmup_iters"),
          py::arg("lr_decay_iters"), py::arg("cosine") = true);

    m.def("auroc", &auroc, py::arg("scores"), py::arg("labels"));
    m.def("auprc", &auprc, py::arg("scores"), py::arg("labels"));
    m.def("bootstrap_ci",
          [](const std::vector<std::string>& ids, const std::vector<double>& scores,
             const std::vector<int>& labels, const std::string& metric, int n_resamples,
             uint64_t seed) {
              const auto ci = bootstrap_ci(ids, scores, labels, metric_by_name(metric),
                                           n_resamples, seed);
              return py::make_tuple(ci.lo, ci.hi);
          },
          py::arg("patient_ids"), py::arg("scores"), py::arg("labels"), py::arg("metric"),
          py::arg("n_resamples") = 1000, py::arg("seed") = 0);
    m.def("select_threshold",
          [](const std::vector<double>& scores, const std::vector<bool>& truths) {
              std::vector<SepPrediction> preds(scores.size());
              for (size_t i = 0; i < scores.size(); ++i) {
                  preds[i].score = scores[i];
                  preds[i].truth = truths[i];
              }
              return select_threshold(preds);
          },
          py::arg("scores"), py::arg("truths"));
    m.def("precision_recall",
          [](const std::vector<double>& scores, const std::vector<bool>& truths,
             double threshold) {
              std::vector<SepPrediction> preds(scores.size());
              for (size_t i = 0; i < scores.size(); ++i) {
                  preds[i].score = scores[i];
                  preds[i].truth = truths[i];
              }
              const auto pr = next_visit_precision_recall(preds, threshold);
              return py::make_tuple(pr.precision, pr.recall);
          },
          py::arg("scores"), py::arg("truths"), py::arg("threshold"));

    py::class_<Model>(m, "Model")
        .def(py::init<const std::string&, int, uint64_t>(), py::arg("config_text"),
             py::arg("vocab_size"), py::arg("seed"))
        .def_static("load", &Model::load, py::arg("path"))
        .def("save", &Model::save, py::arg("path"))
        .def_property_readonly("param_count", &Model::param_count)
        .def_property_readonly("vocab_size", &Model::vocab_size)
        .def("forward_logits", &Model::forward_logits, py::arg("trajectory"),
             py::arg("mode") = "isolated")
        .def("mean_loss", &Model::mean_loss, py::arg("trajectories"), py::arg("delta") = 0.5,
             py::arg("w_min") = 0.01, py::arg("mode") = "isolated");
}
