#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ehrseq/model.hpp"
#include "ehrseq/run_config.hpp"
#include "ehrseq/sequence.hpp"

namespace ehrseq {

struct TrainLogEntry {
    int64_t step = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    std::optional<double> val_loss;
};

struct TrainResult {
    int64_t steps_run = 0;
    double final_train_loss = 0.0;
    std::optional<double> best_val_loss;
    int64_t best_val_step = -1;
    std::vector<TrainLogEntry> log;
};

// Deterministic resumable loop: the batch at (seed, step, micro) never
// depends on loop state, so resuming from a checkpoint replays the exact
// run. Gradients are normalized by the total sep count across the
// accumulated micro-batches.
class Trainer {
  public:
    Trainer(ModelParams params, const RunConfig& cfg, std::vector<PackedBatch> train_rows,
            std::vector<PackedBatch> val_rows);

    // resume: restore optimizer state and start step
    void restore(AdamState state, int64_t start_step);

    // runs steps [start, max_iters); writes checkpoint files when out_dir is
    // set; optional log stream gets one line per logged step
    TrainResult run(const std::string& out_dir = "", std::ostream* log_stream = nullptr);

    // single optimization step at `step`; returns mean train loss
    double step_once(int64_t step);

    double validation_loss() const;
    double learning_rate_at(int64_t step) const;

    const ModelParams& params() const { return params_; }
    const AdamState& opt_state() const { return opt_state_; }
    int64_t next_step() const { return next_step_; }

  private:
    std::vector<size_t> sample_batch(int64_t step, int micro) const;

    ModelParams params_;
    RunConfig cfg_;
    std::vector<PackedBatch> train_rows_;
    std::vector<PackedBatch> val_rows_;
    std::vector<size_t> val_subset_;
    AdamState opt_state_;
    int64_t next_step_ = 0;
};

// Dataset assembly shared by the CLI and tests: tokenize, pack, attach
// repeat-decay targets.
struct PackedDataset {
    std::vector<PackedBatch> train_rows;
    std::vector<PackedBatch> val_rows;
    PackStats stats;
};
PackedDataset build_packed_dataset(const std::vector<TokenizedTrajectory>& train,
                                   const std::vector<TokenizedTrajectory>& val,
                                   const RunConfig& cfg);

}  // namespace ehrseq
