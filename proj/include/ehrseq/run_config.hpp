#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ehrseq/cohort.hpp"
#include "ehrseq/loss_opt.hpp"
#include "ehrseq/model.hpp"

namespace ehrseq {

// Flat key/value run configuration. Keys mirror the training-config names
// (n_embd, warmup_iters, temporal_decay, ...) so published settings paste in
// directly; values may carry thousands separators ("2,048").
struct RunConfig {
    uint64_t seed = 1337;

    CohortConfig cohort;
    std::array<double, 3> split_fractions = {0.70, 0.15, 0.15};

    int n_bins = 10;

    ModelConfig model;          // vocab_size filled from the vocabulary file
    LossConfig loss;
    OptConfig opt;
    bool decay_lr = true;       // false: constant learning_rate

    int eval_interval = 50;
    int eval_iters = 8;         // validation rows = eval_iters * batch_size

    PackMode pack_mode = PackMode::cross;
    std::string condition;      // label-set row selector; empty = first
    std::vector<int> horizons_days = {730, 1825};
    int query_grid_size = 8;
    int bootstrap_resamples = 1000;

    static RunConfig from_file(const std::string& path);
    static RunConfig from_string(const std::string& text);

    // canonical key-sorted echo; reparsing it reproduces this config
    std::string resolved_text() const;
    std::string config_hash() const;  // fnv1a64 of resolved_text, hex
};

std::string pack_mode_name(PackMode mode);

}  // namespace ehrseq
