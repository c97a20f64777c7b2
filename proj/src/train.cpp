#include "ehrseq/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>

namespace ehrseq {

Trainer::Trainer(ModelParams params, const RunConfig& cfg, std::vector<PackedBatch> train_rows,
                 std::vector<PackedBatch> val_rows)
    : params_(std::move(params)),
      cfg_(cfg),
      train_rows_(std::move(train_rows)),
      val_rows_(std::move(val_rows)) {
    cfg_.opt.validate();
    cfg_.loss.validate();
    if (train_rows_.empty()) throw DataError("trainer: no training rows");

    // fixed validation subset, independent of training progress
    const size_t want = size_t(cfg_.eval_iters) * size_t(cfg_.opt.batch_size);
    std::vector<size_t> order(val_rows_.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(cfg_.seed, 0x76616c73ULL));
    rng.shuffle(order);
    val_subset_.assign(order.begin(), order.begin() + std::min(want, order.size()));
}

void Trainer::restore(AdamState state, int64_t start_step) {
    opt_state_ = std::move(state);
    next_step_ = start_step;
}

std::vector<size_t> Trainer::sample_batch(int64_t step, int micro) const {
    Rng rng(mix_seed(cfg_.seed ^ 0x747261696eULL, uint64_t(step), uint64_t(micro)));
    std::vector<size_t> idx(size_t(cfg_.opt.batch_size));
    for (auto& i : idx) i = size_t(rng.uniform_index(train_rows_.size()));
    return idx;
}

double Trainer::learning_rate_at(int64_t step) const {
    return cfg_.decay_lr ? lr_at(step, cfg_.opt) : cfg_.opt.peak_lr;
}

double Trainer::step_once(int64_t step) {
    ModelParams grads = params_.zeros_like();
    double loss_sum = 0.0;
    int64_t n_seps = 0;

    for (int micro = 0; micro < cfg_.opt.grad_accum_steps; ++micro) {
        for (size_t row_idx : sample_batch(step, micro)) {
            const auto& row = train_rows_[row_idx];
            const AttentionMask mask = build_attention_mask(row.seq, cfg_.pack_mode);
            DropoutPlan drop{cfg_.model.dropout,
                             mix_seed(cfg_.seed ^ 0x64726f70ULL, uint64_t(step),
                                      uint64_t(micro) << 32 | uint64_t(row_idx))};
            const DropoutPlan* dp = cfg_.model.dropout > 0.0 ? &drop : nullptr;
            const LossAccum acc =
                accumulate_loss_and_grads(params_, row, mask, cfg_.loss, &grads, dp);
            loss_sum += acc.loss_sum;
            n_seps += acc.n_seps;
        }
    }
    if (n_seps == 0) throw DataError("trainer: batch without sep targets");

    const double inv = 1.0 / double(n_seps);
    grads.for_each_tensor([&](const std::string&, Mat& m, bool) { m *= inv; });
    clip_gradients(grad_buffers(grads), cfg_.opt.grad_clip);

    auto refs = param_refs(params_, grads);
    adamw_step(refs, opt_state_, cfg_.opt, learning_rate_at(step));
    next_step_ = step + 1;
    return loss_sum * inv;
}

double Trainer::validation_loss() const {
    if (val_subset_.empty()) throw DataError("trainer: no validation rows");
    double loss_sum = 0.0;
    int64_t n_seps = 0;
    for (size_t idx : val_subset_) {
        const auto& row = val_rows_[idx];
        const AttentionMask mask = build_attention_mask(row.seq, cfg_.pack_mode);
        const LossAccum acc = accumulate_loss(params_, row, mask, cfg_.loss);
        loss_sum += acc.loss_sum;
        n_seps += acc.n_seps;
    }
    if (n_seps == 0) throw DataError("trainer: validation rows without sep targets");
    return loss_sum / double(n_seps);
}

TrainResult Trainer::run(const std::string& out_dir, std::ostream* log_stream) {
    TrainResult result;
    const bool writing = !out_dir.empty();
    std::ofstream loss_log;
    if (writing) {
        loss_log.open(out_dir + "/loss_log.tsv", next_step_ == 0 ? std::ios::trunc : std::ios::app);
        if (!loss_log) throw DataError("cannot open loss log in " + out_dir);
        if (next_step_ == 0) loss_log << "step\tlr\ttrain_loss\tval_loss\n";
    }
    std::map<std::string, std::string> meta{{"config_hash", cfg_.config_hash()}};

    for (int64_t step = next_step_; step < cfg_.opt.max_iters; ++step) {
        const double lr = learning_rate_at(step);
        const double train_loss = step_once(step);
        result.final_train_loss = train_loss;
        ++result.steps_run;

        TrainLogEntry entry{step, lr, train_loss, std::nullopt};
        const bool log_now =
            cfg_.eval_interval > 0 &&
            (step % cfg_.eval_interval == 0 || step + 1 == cfg_.opt.max_iters);
        if (log_now && !val_subset_.empty()) {
            const double val = validation_loss();
            entry.val_loss = val;
            if (!result.best_val_loss || val < *result.best_val_loss) {
                result.best_val_loss = val;
                result.best_val_step = step;
                if (writing) {
                    auto best_meta = meta;
                    best_meta["val_loss"] = format_double(val);
                    save_checkpoint(out_dir + "/checkpoint_best.bin", params_, nullptr, step + 1,
                                    best_meta);
                }
            }
            if (writing)
                save_checkpoint(out_dir + "/checkpoint_last.bin", params_, &opt_state_, step + 1,
                                meta);
        }
        result.log.push_back(entry);
        if (writing) {
            loss_log << entry.step << "\t" << format_double(entry.lr) << "\t"
                     << format_double(entry.train_loss) << "\t"
                     << (entry.val_loss ? format_double(*entry.val_loss) : "") << "\n";
            loss_log.flush();
        }
        if (log_stream && log_now) {
            (*log_stream) << "step " << entry.step << " lr " << entry.lr << " train_loss "
                          << entry.train_loss;
            if (entry.val_loss) (*log_stream) << " val_loss " << *entry.val_loss;
            (*log_stream) << "\n";
        }
    }

    if (writing)
        save_checkpoint(out_dir + "/checkpoint_final.bin", params_, &opt_state_,
                        cfg_.opt.max_iters, meta);
    return result;
}

PackedDataset build_packed_dataset(const std::vector<TokenizedTrajectory>& train,
                                   const std::vector<TokenizedTrajectory>& val,
                                   const RunConfig& cfg) {
    PackedDataset ds;
    ds.train_rows = pack_sequences(train, cfg.model.block_size, cfg.pack_mode, cfg.loss.delta,
                                   cfg.loss.w_min, &ds.stats);
    ds.val_rows = pack_sequences(val, cfg.model.block_size, cfg.pack_mode, cfg.loss.delta,
                                 cfg.loss.w_min, &ds.stats);
    if (ds.train_rows.empty()) throw DataError("dataset: no packed training rows");
    return ds;
}

}  // namespace ehrseq
