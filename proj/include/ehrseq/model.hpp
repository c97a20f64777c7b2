#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ehrseq/loss_opt.hpp"
#include "ehrseq/sequence.hpp"

namespace ehrseq {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
    int n_layer = 4;
    int n_head = 4;
    int n_embd = 128;
    int vocab_size = 0;
    int block_size = 512;
    double rotary_base = 10000.0;
    bool rotary = true;
    bool bias = false;
    double dropout = 0.0;

    int head_dim() const { return n_embd / n_head; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
    Mat ln1_g, ln1_b;
    Mat w_qkv, b_qkv;    // d x 3d
    Mat w_proj, b_proj;  // d x d
    Mat ln2_g, ln2_b;
    Mat w_fc, b_fc;      // d x 4d
    Mat w_mlp, b_mlp;    // 4d x d
};

// Pre-norm GPT-2 lineage blocks, GELU MLP at 4x width, untied output
// projection. Gradients use the same struct shape.
struct ModelParams {
    ModelConfig config;
    Mat wte;  // vocab x d
    std::vector<LayerParams> layers;
    Mat lnf_g, lnf_b;
    Mat w_head;  // d x vocab

    using TensorVisitor = std::function<void(const std::string&, Mat&, bool decay)>;
    void for_each_tensor(const TensorVisitor& fn);
    void for_each_tensor(const std::function<void(const std::string&, const Mat&, bool)>& fn) const;

    int64_t param_count() const;
    ModelParams zeros_like() const;
    void set_zero();
};

// deterministic given seed; scaled-normal init, residual projections scaled
// by 1/sqrt(2*n_layer)
ModelParams init_params(const ModelConfig& config, uint64_t seed);

int64_t expected_param_count(const ModelConfig& config);

// rotary rotation per pair j with angle pos / base^(2j/head_dim); x holds all
// heads side by side (rows = positions, cols = n_head * head_dim)
void apply_rotary(Mat& x, const std::vector<double>& positions, int n_head, double rotary_base);

struct DropoutPlan {
    double rate = 0.0;
    uint64_t seed = 0;
};

struct ForwardOutput {
    Mat logits;  // seq_len x vocab
};

struct ForwardCache;  // backward bookkeeping, defined in model.cpp

ForwardOutput forward(const ModelParams& params, const PositionedSequence& seq,
                      const AttentionMask& mask, const DropoutPlan* dropout = nullptr);
ForwardOutput forward(const ModelParams& params, const PositionedSequence& seq,
                      PackMode mode = PackMode::isolated);

// logits only at the sep slots (rows aligned with seq.sep_slots)
Mat sep_logits(const ModelParams& params, const PositionedSequence& seq,
               const AttentionMask& mask);

// attention probabilities of one layer/head (row-stochastic over allowed
// keys); test hook
Mat attention_probs(const ModelParams& params, const PositionedSequence& seq,
                    const AttentionMask& mask, int layer, int head);

// Eq.-style weighted BCE at every sep slot. Loss convention: sum over vocab
// within a slot, summed over slots here; callers divide by n_seps for the
// mean. Gradients accumulate into *grads.
struct LossAccum {
    double loss_sum = 0.0;
    int64_t n_seps = 0;
};
LossAccum accumulate_loss_and_grads(const ModelParams& params, const PackedBatch& row,
                                    const AttentionMask& mask, const LossConfig& cfg,
                                    ModelParams* grads, const DropoutPlan* dropout = nullptr);
LossAccum accumulate_loss(const ModelParams& params, const PackedBatch& row,
                          const AttentionMask& mask, const LossConfig& cfg);

// mean-over-sep-slots loss and matching gradients for a set of rows
struct LossAndGrads {
    double loss = 0.0;
    ModelParams grads;
    int64_t n_seps = 0;
};
LossAndGrads loss_and_grads(const ModelParams& params, const std::vector<PackedBatch>& rows,
                            PackMode mode, const LossConfig& cfg);

std::vector<ParamRef> param_refs(ModelParams& params, const ModelParams& grads);
std::vector<std::pair<double*, int64_t>> grad_buffers(ModelParams& grads);

// flat binary checkpoint: json manifest (config, meta, tensor shapes) then
// raw little-endian doubles
struct Checkpoint {
    ModelParams params;
    std::optional<AdamState> opt_state;
    int64_t iter = 0;
    std::map<std::string, std::string> meta;
};
void save_checkpoint(const std::string& path, const ModelParams& params, const AdamState* opt,
                     int64_t iter, const std::map<std::string, std::string>& meta);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ehrseq
