#include "ehrseq/loss_opt.hpp"

#include <algorithm>
#include <cmath>

namespace ehrseq {

void LossConfig::validate() const {
    if (!(delta > 0.0 && delta <= 1.0)) throw ConfigError("loss: temporal_decay must be in (0,1]");
    if (!(w_min >= 0.0 && w_min < 1.0)) throw ConfigError("loss: w_min must be in [0,1)");
    if (!(eps > 0.0 && eps < 0.5)) throw ConfigError("loss: eps must be in (0,0.5)");
}

void OptConfig::validate() const {
    if (!(warmup_iters <= lr_decay_iters && lr_decay_iters <= max_iters))
        throw ConfigError("opt: need warmup_iters <= lr_decay_iters <= max_iters");
    if (!(min_lr > 0.0 && min_lr <= peak_lr))
        throw ConfigError("opt: need 0 < min_lr <= learning_rate");
    if (grad_accum_steps < 1 || batch_size < 1)
        throw ConfigError("opt: batch_size and gradient_accumulation_steps must be >= 1");
    if (grad_clip <= 0.0) throw ConfigError("opt: grad_clip must be positive");
}

double repeat_weight(int count, double delta, double w_min) {
    if (count < 0) throw ConfigError("repeat_weight: negative count");
    if (delta == 0.0) return count == 0 ? 1.0 : w_min;
    return std::max(std::pow(delta, double(count)), w_min);
}

double weighted_bce(const std::vector<double>& probs, const std::vector<double>& targets,
                    const std::vector<double>& weights, double eps) {
    if (probs.size() != targets.size() || probs.size() != weights.size())
        throw ConfigError("weighted_bce: shape mismatch");
    double loss = 0.0;
    for (size_t k = 0; k < probs.size(); ++k) {
        const double p = std::min(std::max(probs[k], eps), 1.0 - eps);
        const double v = targets[k];
        const double w = v != 0.0 ? weights[k] : 1.0;
        loss -= w * (v * std::log(p) + (1.0 - v) * std::log(1.0 - p));
    }
    return loss;
}

double lr_at(int64_t step, const OptConfig& cfg) {
    if (step < 0) throw ConfigError("lr_at: negative step");
    if (step <= cfg.warmup_iters) {
        if (cfg.warmup_iters == 0) return cfg.peak_lr;
        return cfg.peak_lr * double(step) / double(cfg.warmup_iters);
    }
    if (step >= cfg.lr_decay_iters) return cfg.min_lr;
    const double ratio =
        double(step - cfg.warmup_iters) / double(cfg.lr_decay_iters - cfg.warmup_iters);
    if (cfg.cosine_decay) {
        const double coeff = 0.5 * (1.0 + std::cos(M_PI * ratio));
        return cfg.min_lr + coeff * (cfg.peak_lr - cfg.min_lr);
    }
    return cfg.peak_lr + ratio * (cfg.min_lr - cfg.peak_lr);
}

void AdamState::init_like(const std::vector<ParamRef>& params) {
    m.assign(params.size(), {});
    v.assign(params.size(), {});
    for (size_t i = 0; i < params.size(); ++i) {
        m[i].assign(size_t(params[i].size), 0.0);
        v[i].assign(size_t(params[i].size), 0.0);
    }
    step_count = 0;
}

void adamw_step(std::vector<ParamRef>& params, AdamState& state, const OptConfig& cfg, double lr) {
    constexpr double kAdamEps = 1e-8;
    if (!state.initialized()) state.init_like(params);
    if (state.m.size() != params.size()) throw ConfigError("adamw: state does not match params");

    for (const auto& p : params)
        for (int64_t i = 0; i < p.size; ++i)
            if (!std::isfinite(p.grad[i]))
                throw NumericError("adamw: non-finite gradient in " + p.name);

    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step_count));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step_count));

    for (size_t t = 0; t < params.size(); ++t) {
        auto& p = params[t];
        auto& m = state.m[t];
        auto& v = state.v[t];
        const double wd = p.weight_decay ? cfg.weight_decay : 0.0;
        for (int64_t i = 0; i < p.size; ++i) {
            const double g = p.grad[i];
            m[size_t(i)] = cfg.beta1 * m[size_t(i)] + (1.0 - cfg.beta1) * g;
            v[size_t(i)] = cfg.beta2 * v[size_t(i)] + (1.0 - cfg.beta2) * g * g;
            const double mhat = m[size_t(i)] / bc1;
            const double vhat = v[size_t(i)] / bc2;
            p.data[i] -= lr * (mhat / (std::sqrt(vhat) + kAdamEps) + wd * p.data[i]);
        }
    }
}

double clip_gradients(const std::vector<std::pair<double*, int64_t>>& grads, double max_norm) {
    if (max_norm <= 0.0) throw ConfigError("clip_gradients: max_norm must be positive");
    double sq = 0.0;
    for (const auto& [data, size] : grads)
        for (int64_t i = 0; i < size; ++i) sq += data[i] * data[i];
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (const auto& [data, size] : grads)
            for (int64_t i = 0; i < size; ++i) data[i] *= scale;
    }
    return norm;
}

}  // namespace ehrseq
