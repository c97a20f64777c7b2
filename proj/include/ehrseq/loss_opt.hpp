#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ehrseq/common.hpp"

namespace ehrseq {

struct LossConfig {
    double delta = 0.5;   // temporal_decay
    double w_min = 0.01;
    double eps = 1e-7;    // probability clipping before logs
    // disables the repeat-decay code path entirely (weights are literal 1.0,
    // counts untouched); used for the delta=1 identity check
    bool decay_enabled = true;

    void validate() const;
};

struct OptConfig {
    double peak_lr = 2.2e-4;
    double min_lr = 2.2e-5;
    int64_t warmup_iters = 20000;
    int64_t lr_decay_iters = 800000;
    int64_t max_iters = 810000;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    int grad_accum_steps = 8;
    int batch_size = 16;
    bool cosine_decay = true;  // false: linear decay to min_lr

    void validate() const;
};

// max(delta^count, w_min). delta = 0 is read as the limit: weight 1 at
// count 0, w_min afterwards.
double repeat_weight(int count, double delta, double w_min);

// -sum_k w'_k [V_k log p_k + (1-V_k) log(1-p_k)], w'_k = w_k when V_k = 1
// else 1; probabilities clipped to [eps, 1-eps] before the logs.
double weighted_bce(const std::vector<double>& probs, const std::vector<double>& targets,
                    const std::vector<double>& weights, double eps = 1e-7);

// linear warmup from 0 to peak, cosine (or linear) decay to min_lr at
// lr_decay_iters, constant min_lr after
double lr_at(int64_t step, const OptConfig& cfg);

// Flat view over a parameter set; model.cpp adapts ModelParams onto this so
// the optimizer stays independent of the architecture.
struct ParamRef {
    std::string name;
    double* data = nullptr;
    const double* grad = nullptr;
    int64_t size = 0;
    bool weight_decay = false;  // matrices only, not norms/embeddings
};

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    int64_t step_count = 0;

    void init_like(const std::vector<ParamRef>& params);
    bool initialized() const { return !m.empty(); }
};

// Decoupled weight decay, bias-corrected moments. Aborts on non-finite
// gradients. `grads` live inside the ParamRef view.
void adamw_step(std::vector<ParamRef>& params, AdamState& state, const OptConfig& cfg, double lr);

// Global-norm clipping over the gradient buffers referenced by `grads`;
// returns the pre-clip norm.
double clip_gradients(const std::vector<std::pair<double*, int64_t>>& grads, double max_norm);

}  // namespace ehrseq
