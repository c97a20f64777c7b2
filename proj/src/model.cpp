#include "ehrseq/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

using json = nlohmann::json;

namespace ehrseq {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
    const double phi = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return phi + x * pdf;
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layer < 1 || n_head < 1 || n_embd < 1) throw ConfigError("model: sizes must be positive");
    if (n_embd % n_head != 0) throw ConfigError("model: n_embd must be divisible by n_head");
    if (head_dim() % 2 != 0) throw ConfigError("model: head_dim must be even for rotary pairs");
    if (vocab_size < 2) throw ConfigError("model: vocab_size must be >= 2");
    if (block_size < 2) throw ConfigError("model: block_size must be >= 2");
    if (rotary_base <= 0.0) throw ConfigError("model: rotary_base must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must be in [0,1)");
}

void ModelParams::for_each_tensor(const TensorVisitor& fn) {
    fn("wte", wte, false);
    for (size_t l = 0; l < layers.size(); ++l) {
        auto& lp = layers[l];
        const std::string pfx = "layer" + std::to_string(l) + ".";
        fn(pfx + "ln1_g", lp.ln1_g, false);
        if (config.bias) fn(pfx + "ln1_b", lp.ln1_b, false);
        fn(pfx + "w_qkv", lp.w_qkv, true);
        if (config.bias) fn(pfx + "b_qkv", lp.b_qkv, false);
        fn(pfx + "w_proj", lp.w_proj, true);
        if (config.bias) fn(pfx + "b_proj", lp.b_proj, false);
        fn(pfx + "ln2_g", lp.ln2_g, false);
        if (config.bias) fn(pfx + "ln2_b", lp.ln2_b, false);
        fn(pfx + "w_fc", lp.w_fc, true);
        if (config.bias) fn(pfx + "b_fc", lp.b_fc, false);
        fn(pfx + "w_mlp", lp.w_mlp, true);
        if (config.bias) fn(pfx + "b_mlp", lp.b_mlp, false);
    }
    fn("lnf_g", lnf_g, false);
    if (config.bias) fn("lnf_b", lnf_b, false);
    fn("w_head", w_head, true);
}

void ModelParams::for_each_tensor(
    const std::function<void(const std::string&, const Mat&, bool)>& fn) const {
    const_cast<ModelParams*>(this)->for_each_tensor(
        [&](const std::string& name, Mat& m, bool decay) { fn(name, m, decay); });
}

int64_t ModelParams::param_count() const {
    int64_t n = 0;
    for_each_tensor([&](const std::string&, const Mat& m, bool) { n += m.size(); });
    return n;
}

ModelParams ModelParams::zeros_like() const {
    ModelParams out;
    out.config = config;
    out.layers.resize(layers.size());
    out.wte = Mat::Zero(wte.rows(), wte.cols());
    for (size_t l = 0; l < layers.size(); ++l) {
        const auto& src = layers[l];
        auto& dst = out.layers[l];
        auto zero = [](const Mat& m) { return Mat::Zero(m.rows(), m.cols()).eval(); };
        dst.ln1_g = zero(src.ln1_g);
        dst.ln1_b = zero(src.ln1_b);
        dst.w_qkv = zero(src.w_qkv);
        dst.b_qkv = zero(src.b_qkv);
        dst.w_proj = zero(src.w_proj);
        dst.b_proj = zero(src.b_proj);
        dst.ln2_g = zero(src.ln2_g);
        dst.ln2_b = zero(src.ln2_b);
        dst.w_fc = zero(src.w_fc);
        dst.b_fc = zero(src.b_fc);
        dst.w_mlp = zero(src.w_mlp);
        dst.b_mlp = zero(src.b_mlp);
    }
    out.lnf_g = Mat::Zero(lnf_g.rows(), lnf_g.cols());
    out.lnf_b = Mat::Zero(lnf_b.rows(), lnf_b.cols());
    out.w_head = Mat::Zero(w_head.rows(), w_head.cols());
    return out;
}

void ModelParams::set_zero() {
    for_each_tensor([](const std::string&, Mat& m, bool) { m.setZero(); });
}

ModelParams init_params(const ModelConfig& config, uint64_t seed) {
    config.validate();
    const int d = config.n_embd;
    const int v = config.vocab_size;

    ModelParams p;
    p.config = config;
    p.layers.resize(size_t(config.n_layer));
    p.wte = Mat(v, d);
    for (auto& lp : p.layers) {
        lp.ln1_g = Mat::Ones(1, d);
        lp.ln2_g = Mat::Ones(1, d);
        lp.w_qkv = Mat(d, 3 * d);
        lp.w_proj = Mat(d, d);
        lp.w_fc = Mat(d, 4 * d);
        lp.w_mlp = Mat(4 * d, d);
        if (config.bias) {
            lp.ln1_b = Mat::Zero(1, d);
            lp.ln2_b = Mat::Zero(1, d);
            lp.b_qkv = Mat::Zero(1, 3 * d);
            lp.b_proj = Mat::Zero(1, d);
            lp.b_fc = Mat::Zero(1, 4 * d);
            lp.b_mlp = Mat::Zero(1, d);
        }
    }
    p.lnf_g = Mat::Ones(1, d);
    if (config.bias) p.lnf_b = Mat::Zero(1, d);
    p.w_head = Mat(d, v);

    Rng rng(mix_seed(seed, 0x6d6f64656cULL));
    const double resid_std = 0.02 / std::sqrt(2.0 * double(config.n_layer));
    auto fill = [&](Mat& m, double std) {
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.normal(0.0, std);
    };
    fill(p.wte, 0.02);
    for (auto& lp : p.layers) {
        fill(lp.w_qkv, 0.02);
        fill(lp.w_proj, resid_std);
        fill(lp.w_fc, 0.02);
        fill(lp.w_mlp, resid_std);
    }
    fill(p.w_head, 0.02);
    return p;
}

int64_t expected_param_count(const ModelConfig& cfg) {
    const int64_t d = cfg.n_embd;
    const int64_t v = cfg.vocab_size;
    const int64_t ln = cfg.bias ? 2 * d : d;
    int64_t per_layer = 2 * ln + d * 3 * d + d * d + d * 4 * d + 4 * d * d;
    if (cfg.bias) per_layer += 3 * d + d + 4 * d + d;
    return v * d + cfg.n_layer * per_layer + ln + d * v;
}

void apply_rotary(Mat& x, const std::vector<double>& positions, int n_head, double rotary_base) {
    const int hd = int(x.cols()) / n_head;
    if (hd % 2 != 0) throw ConfigError("apply_rotary: head_dim must be even");
    if (x.rows() != Eigen::Index(positions.size()))
        throw ConfigError("apply_rotary: positions size mismatch");
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        for (int j = 0; j < hd / 2; ++j) {
            const double theta =
                positions[size_t(t)] / std::pow(rotary_base, 2.0 * double(j) / double(hd));
            const double c = std::cos(theta);
            const double s = std::sin(theta);
            for (int h = 0; h < n_head; ++h) {
                const int a = h * hd + 2 * j;
                const double x0 = x(t, a);
                const double x1 = x(t, a + 1);
                x(t, a) = x0 * c - x1 * s;
                x(t, a + 1) = x0 * s + x1 * c;
            }
        }
    }
}

namespace {

struct RopeTable {
    Mat cos;  // T x hd/2
    Mat sin;
};

RopeTable make_rope_table(const std::vector<double>& positions, int head_dim, double base) {
    RopeTable table;
    const int half = head_dim / 2;
    table.cos = Mat(Eigen::Index(positions.size()), half);
    table.sin = Mat(Eigen::Index(positions.size()), half);
    for (size_t t = 0; t < positions.size(); ++t) {
        for (int j = 0; j < half; ++j) {
            const double theta = positions[t] / std::pow(base, 2.0 * double(j) / double(head_dim));
            table.cos(Eigen::Index(t), j) = std::cos(theta);
            table.sin(Eigen::Index(t), j) = std::sin(theta);
        }
    }
    return table;
}

void rope_rotate(Mat& x, const RopeTable& rope, int n_head, bool inverse) {
    const int hd = int(x.cols()) / n_head;
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        for (int j = 0; j < hd / 2; ++j) {
            const double c = rope.cos(t, j);
            const double s = inverse ? -rope.sin(t, j) : rope.sin(t, j);
            for (int h = 0; h < n_head; ++h) {
                const int a = h * hd + 2 * j;
                const double x0 = x(t, a);
                const double x1 = x(t, a + 1);
                x(t, a) = x0 * c - x1 * s;
                x(t, a + 1) = x0 * s + x1 * c;
            }
        }
    }
}

struct LnCache {
    Mat hat;                    // normalized rows
    std::vector<double> rstd;   // 1/sqrt(var + eps) per row
};

Mat layernorm_forward(const Mat& x, const Mat& gamma, const Mat& beta, LnCache* cache) {
    const Eigen::Index t_len = x.rows();
    const Eigen::Index d = x.cols();
    cache->hat = Mat(t_len, d);
    cache->rstd.resize(size_t(t_len));
    Mat out(t_len, d);
    for (Eigen::Index t = 0; t < t_len; ++t) {
        const double mean = x.row(t).mean();
        double var = 0.0;
        for (Eigen::Index j = 0; j < d; ++j) {
            const double c = x(t, j) - mean;
            var += c * c;
        }
        var /= double(d);
        const double rstd = 1.0 / std::sqrt(var + kLnEps);
        cache->rstd[size_t(t)] = rstd;
        for (Eigen::Index j = 0; j < d; ++j) {
            const double hat = (x(t, j) - mean) * rstd;
            cache->hat(t, j) = hat;
            out(t, j) = hat * gamma(0, j) + (beta.size() ? beta(0, j) : 0.0);
        }
    }
    return out;
}

Mat layernorm_backward(const Mat& dout, const LnCache& cache, const Mat& gamma, Mat* dgamma,
                       Mat* dbeta) {
    const Eigen::Index t_len = dout.rows();
    const Eigen::Index d = dout.cols();
    Mat dx(t_len, d);
    for (Eigen::Index t = 0; t < t_len; ++t) {
        double sum_dhat = 0.0;
        double sum_dhat_hat = 0.0;
        for (Eigen::Index j = 0; j < d; ++j) {
            const double dhat = dout(t, j) * gamma(0, j);
            sum_dhat += dhat;
            sum_dhat_hat += dhat * cache.hat(t, j);
        }
        const double inv_d = 1.0 / double(d);
        for (Eigen::Index j = 0; j < d; ++j) {
            const double dhat = dout(t, j) * gamma(0, j);
            dx(t, j) = cache.rstd[size_t(t)] *
                       (dhat - inv_d * sum_dhat - cache.hat(t, j) * inv_d * sum_dhat_hat);
        }
    }
    for (Eigen::Index j = 0; j < d; ++j) {
        double dg = 0.0;
        double db = 0.0;
        for (Eigen::Index t = 0; t < t_len; ++t) {
            dg += dout(t, j) * cache.hat(t, j);
            db += dout(t, j);
        }
        (*dgamma)(0, j) += dg;
        if (dbeta->size()) (*dbeta)(0, j) += db;
    }
    return dx;
}

Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng* rng) {
    Mat mask(rows, cols);
    const double keep = 1.0 - rate;
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j)
            mask(i, j) = rng->uniform() < keep ? 1.0 / keep : 0.0;
    return mask;
}

struct AttnCache {
    Mat q, k, v;            // T x d, q/k post-rope
    std::vector<Mat> probs; // per head, post-softmax pre-dropout
    std::vector<Mat> probs_dropped;
    Mat concat;             // T x d
};

struct LayerFwdCache {
    Mat x_in;
    LnCache ln1;
    AttnCache attn;
    Mat drop_attn;  // residual dropout masks; empty when inactive
    Mat h_mid;
    LnCache ln2;
    Mat fc_pre;
    Mat fc_act;
    Mat drop_mlp;
};

}  // namespace

struct ForwardCache {
    Mat emb;
    Mat emb_drop;
    std::vector<LayerFwdCache> layers;
    Mat xf;
    LnCache lnf;
    Mat yf;
    RopeTable rope;
};

namespace {

void attention_forward(const ModelParams& params, const LayerParams& lp, const Mat& ln1_out,
                       const AttentionMask& mask, const RopeTable& rope, AttnCache* cache,
                       Rng* drop_rng, double drop_rate) {
    const auto& cfg = params.config;
    const int t_len = int(ln1_out.rows());
    const int d = cfg.n_embd;
    const int hd = cfg.head_dim();
    const double inv_sqrt_hd = 1.0 / std::sqrt(double(hd));

    Mat qkv = ln1_out * lp.w_qkv;
    if (lp.b_qkv.size()) qkv.rowwise() += lp.b_qkv.row(0);
    cache->q = qkv.leftCols(d);
    cache->k = qkv.middleCols(d, d);
    cache->v = qkv.rightCols(d);
    if (cfg.rotary) {
        rope_rotate(cache->q, rope, cfg.n_head, false);
        rope_rotate(cache->k, rope, cfg.n_head, false);
    }

    cache->probs.resize(size_t(cfg.n_head));
    if (drop_rng) cache->probs_dropped.resize(size_t(cfg.n_head));
    cache->concat = Mat(t_len, d);
    for (int h = 0; h < cfg.n_head; ++h) {
        const Mat qh = cache->q.middleCols(h * hd, hd);
        const Mat kh = cache->k.middleCols(h * hd, hd);
        const Mat vh = cache->v.middleCols(h * hd, hd);
        Mat scores = qh * kh.transpose() * inv_sqrt_hd;
        for (int qi = 0; qi < t_len; ++qi)
            for (int ki = 0; ki < t_len; ++ki)
                if (!mask.at(qi, ki)) scores(qi, ki) = kNegInf;

        Mat& probs = cache->probs[size_t(h)];
        probs = Mat::Zero(t_len, t_len);
        for (int qi = 0; qi < t_len; ++qi) {
            const double row_max = scores.row(qi).maxCoeff();
            if (row_max == kNegInf) continue;  // pad or fully masked query
            double sum = 0.0;
            for (int ki = 0; ki < t_len; ++ki) {
                const double s = scores(qi, ki);
                const double e = s == kNegInf ? 0.0 : std::exp(s - row_max);
                probs(qi, ki) = e;
                sum += e;
            }
            probs.row(qi) /= sum;
        }

        const Mat* use = &probs;
        if (drop_rng) {
            cache->probs_dropped[size_t(h)] =
                probs.cwiseProduct(dropout_mask(t_len, t_len, drop_rate, drop_rng));
            use = &cache->probs_dropped[size_t(h)];
        }
        cache->concat.middleCols(h * hd, hd) = (*use) * vh;
    }
}

// dconcat -> grads of w_qkv path; returns gradient on ln1_out
Mat attention_backward(const ModelParams& params, const LayerParams& lp, const Mat& ln1_out,
                       const AttnCache& cache, const RopeTable& rope, const Mat& dconcat,
                       LayerParams* grads) {
    const auto& cfg = params.config;
    const int t_len = int(ln1_out.rows());
    const int d = cfg.n_embd;
    const int hd = cfg.head_dim();
    const double inv_sqrt_hd = 1.0 / std::sqrt(double(hd));

    Mat dq = Mat::Zero(t_len, d);
    Mat dk = Mat::Zero(t_len, d);
    Mat dv = Mat::Zero(t_len, d);

    for (int h = 0; h < cfg.n_head; ++h) {
        const Mat qh = cache.q.middleCols(h * hd, hd);
        const Mat kh = cache.k.middleCols(h * hd, hd);
        const Mat vh = cache.v.middleCols(h * hd, hd);
        const Mat dout_h = dconcat.middleCols(h * hd, hd);
        const Mat& probs = cache.probs[size_t(h)];
        const Mat& used = cache.probs_dropped.empty() ? probs : cache.probs_dropped[size_t(h)];

        Mat dprobs = dout_h * vh.transpose();
        dv.middleCols(h * hd, hd) = used.transpose() * dout_h;
        if (!cache.probs_dropped.empty()) {
            // invert through the dropout mask: used = probs .* mask
            for (int qi = 0; qi < t_len; ++qi)
                for (int ki = 0; ki < t_len; ++ki)
                    dprobs(qi, ki) *= probs(qi, ki) == 0.0
                                          ? 0.0
                                          : used(qi, ki) / probs(qi, ki);
        }

        Mat dscores(t_len, t_len);
        for (int qi = 0; qi < t_len; ++qi) {
            double dot = 0.0;
            for (int ki = 0; ki < t_len; ++ki) dot += dprobs(qi, ki) * probs(qi, ki);
            for (int ki = 0; ki < t_len; ++ki)
                dscores(qi, ki) = probs(qi, ki) * (dprobs(qi, ki) - dot);
        }

        dq.middleCols(h * hd, hd) = dscores * kh * inv_sqrt_hd;
        dk.middleCols(h * hd, hd) = dscores.transpose() * qh * inv_sqrt_hd;
    }

    if (cfg.rotary) {
        rope_rotate(dq, rope, cfg.n_head, true);
        rope_rotate(dk, rope, cfg.n_head, true);
    }

    Mat dqkv(t_len, 3 * d);
    dqkv.leftCols(d) = dq;
    dqkv.middleCols(d, d) = dk;
    dqkv.rightCols(d) = dv;

    grads->w_qkv += ln1_out.transpose() * dqkv;
    if (grads->b_qkv.size()) grads->b_qkv += dqkv.colwise().sum();
    return dqkv * lp.w_qkv.transpose();
}

ForwardCache forward_trunk(const ModelParams& params, const PositionedSequence& seq,
                           const AttentionMask& mask, const DropoutPlan* dropout) {
    const auto& cfg = params.config;
    const int t_len = seq.length();
    if (t_len == 0) throw DataError("forward: empty sequence");
    if (t_len > cfg.block_size) throw DataError("forward: sequence exceeds block_size");
    if (mask.n != t_len) throw DataError("forward: mask size mismatch");
    for (TokenId id : seq.token_ids)
        if (id < 0 || id >= cfg.vocab_size) throw DataError("forward: token id out of range");

    const bool drop_active = dropout != nullptr && dropout->rate > 0.0;
    Rng drop_rng(drop_active ? mix_seed(dropout->seed, 0x64726f70ULL) : 0);
    Rng* drop = drop_active ? &drop_rng : nullptr;

    ForwardCache cache;
    cache.rope = make_rope_table(seq.positions, cfg.head_dim(), cfg.rotary_base);

    cache.emb = Mat(t_len, cfg.n_embd);
    for (int t = 0; t < t_len; ++t) cache.emb.row(t) = params.wte.row(seq.token_ids[size_t(t)]);
    if (drop) {
        cache.emb_drop = dropout_mask(t_len, cfg.n_embd, dropout->rate, drop);
        cache.emb = cache.emb.cwiseProduct(cache.emb_drop);
    }

    Mat x = cache.emb;
    cache.layers.resize(size_t(cfg.n_layer));
    for (int l = 0; l < cfg.n_layer; ++l) {
        auto& lc = cache.layers[size_t(l)];
        const auto& lp = params.layers[size_t(l)];
        lc.x_in = x;

        const Mat ln1_out = layernorm_forward(x, lp.ln1_g, lp.ln1_b, &lc.ln1);
        attention_forward(params, lp, ln1_out, mask, cache.rope, &lc.attn, drop,
                          drop ? dropout->rate : 0.0);
        Mat attn_out = lc.attn.concat * lp.w_proj;
        if (lp.b_proj.size()) attn_out.rowwise() += lp.b_proj.row(0);
        if (drop) {
            lc.drop_attn = dropout_mask(t_len, cfg.n_embd, dropout->rate, drop);
            attn_out = attn_out.cwiseProduct(lc.drop_attn);
        }
        lc.h_mid = x + attn_out;

        const Mat ln2_out = layernorm_forward(lc.h_mid, lp.ln2_g, lp.ln2_b, &lc.ln2);
        lc.fc_pre = ln2_out * lp.w_fc;
        if (lp.b_fc.size()) lc.fc_pre.rowwise() += lp.b_fc.row(0);
        lc.fc_act = lc.fc_pre.unaryExpr([](double x0) { return gelu(x0); });
        Mat mlp_out = lc.fc_act * lp.w_mlp;
        if (lp.b_mlp.size()) mlp_out.rowwise() += lp.b_mlp.row(0);
        if (drop) {
            lc.drop_mlp = dropout_mask(t_len, cfg.n_embd, dropout->rate, drop);
            mlp_out = mlp_out.cwiseProduct(lc.drop_mlp);
        }
        x = lc.h_mid + mlp_out;
    }

    cache.xf = x;
    cache.yf = layernorm_forward(x, params.lnf_g, params.lnf_b, &cache.lnf);
    return cache;
}

// dyf: gradient on the post-lnf output; accumulates parameter grads
void backward_trunk(const ModelParams& params, const PositionedSequence& seq,
                    const ForwardCache& cache, const Mat& dyf, ModelParams* grads) {
    const auto& cfg = params.config;
    Mat dx = layernorm_backward(dyf, cache.lnf, params.lnf_g, &grads->lnf_g, &grads->lnf_b);

    for (int l = cfg.n_layer - 1; l >= 0; --l) {
        const auto& lc = cache.layers[size_t(l)];
        const auto& lp = params.layers[size_t(l)];
        auto& lg = grads->layers[size_t(l)];

        // MLP branch
        Mat d_mlp_out = lc.drop_mlp.size() ? dx.cwiseProduct(lc.drop_mlp).eval() : dx;
        Mat d_fc_act = d_mlp_out * lp.w_mlp.transpose();
        lg.w_mlp += lc.fc_act.transpose() * d_mlp_out;
        if (lg.b_mlp.size()) lg.b_mlp += d_mlp_out.colwise().sum();
        Mat d_fc_pre =
            d_fc_act.binaryExpr(lc.fc_pre, [](double g, double x0) { return g * gelu_grad(x0); });
        // recomputed ln2 output for the w_fc gradient
        Mat ln2_out = lc.ln2.hat;
        ln2_out.array().rowwise() *= lp.ln2_g.row(0).array();
        if (lp.ln2_b.size()) ln2_out.rowwise() += lp.ln2_b.row(0);
        lg.w_fc += ln2_out.transpose() * d_fc_pre;
        if (lg.b_fc.size()) lg.b_fc += d_fc_pre.colwise().sum();
        Mat d_ln2_out = d_fc_pre * lp.w_fc.transpose();
        Mat d_h_mid = layernorm_backward(d_ln2_out, lc.ln2, lp.ln2_g, &lg.ln2_g, &lg.ln2_b);
        d_h_mid += dx;  // residual

        // attention branch
        Mat d_attn_out = lc.drop_attn.size() ? d_h_mid.cwiseProduct(lc.drop_attn).eval() : d_h_mid;
        Mat d_concat = d_attn_out * lp.w_proj.transpose();
        lg.w_proj += lc.attn.concat.transpose() * d_attn_out;
        if (lg.b_proj.size()) lg.b_proj += d_attn_out.colwise().sum();

        Mat ln1_out = lc.ln1.hat;
        ln1_out.array().rowwise() *= lp.ln1_g.row(0).array();
        if (lp.ln1_b.size()) ln1_out.rowwise() += lp.ln1_b.row(0);
        Mat d_ln1_out =
            attention_backward(params, lp, ln1_out, lc.attn, cache.rope, d_concat, &lg);
        Mat d_x = layernorm_backward(d_ln1_out, lc.ln1, lp.ln1_g, &lg.ln1_g, &lg.ln1_b);
        dx = d_h_mid + d_x;
    }

    if (cache.emb_drop.size()) dx = dx.cwiseProduct(cache.emb_drop);
    for (int t = 0; t < seq.length(); ++t)
        grads->wte.row(seq.token_ids[size_t(t)]) += dx.row(t);
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

ForwardOutput forward(const ModelParams& params, const PositionedSequence& seq,
                      const AttentionMask& mask, const DropoutPlan* dropout) {
    ForwardCache cache = forward_trunk(params, seq, mask, dropout);
    ForwardOutput out;
    out.logits = cache.yf * params.w_head;
    for (Eigen::Index i = 0; i < out.logits.size(); ++i)
        if (!std::isfinite(out.logits.data()[i]))
            throw NumericError("forward: non-finite logit");
    return out;
}

ForwardOutput forward(const ModelParams& params, const PositionedSequence& seq, PackMode mode) {
    return forward(params, seq, build_attention_mask(seq, mode));
}

Mat sep_logits(const ModelParams& params, const PositionedSequence& seq,
               const AttentionMask& mask) {
    ForwardCache cache = forward_trunk(params, seq, mask, nullptr);
    Mat out(Eigen::Index(seq.sep_slots.size()), params.config.vocab_size);
    for (size_t s = 0; s < seq.sep_slots.size(); ++s)
        out.row(Eigen::Index(s)) = cache.yf.row(seq.sep_slots[s].seq_index) * params.w_head;
    for (Eigen::Index i = 0; i < out.size(); ++i)
        if (!std::isfinite(out.data()[i])) throw NumericError("sep_logits: non-finite logit");
    return out;
}

Mat attention_probs(const ModelParams& params, const PositionedSequence& seq,
                    const AttentionMask& mask, int layer, int head) {
    ForwardCache cache = forward_trunk(params, seq, mask, nullptr);
    return cache.layers.at(size_t(layer)).attn.probs.at(size_t(head));
}

namespace {

// loss and dz for one sep slot; z is the logit row, block the sparse target
double slot_loss_and_dz(const Eigen::Ref<const Eigen::RowVectorXd>& z, const TargetBlock& block,
                        const LossConfig& cfg, Eigen::RowVectorXd* dz) {
    const Eigen::Index v = z.size();
    std::vector<double> target(size_t(v), 0.0);
    for (TokenId id : block.positive_ids) target[size_t(id)] = 1.0;

    double loss = 0.0;
    if (!cfg.decay_enabled) {
        // plain multi-label BCE, no weight reads at all
        for (Eigen::Index k = 0; k < v; ++k) {
            const double p = sigmoid(z(k));
            const double pc = std::min(std::max(p, cfg.eps), 1.0 - cfg.eps);
            const double tgt = target[size_t(k)];
            loss -= tgt * std::log(pc) + (1.0 - tgt) * std::log(1.0 - pc);
            if (dz) {
                const bool clipped = p < cfg.eps || p > 1.0 - cfg.eps;
                (*dz)(k) = clipped ? 0.0 : p - tgt;
            }
        }
        return loss;
    }

    std::vector<double> weight(size_t(v), 1.0);
    for (size_t i = 0; i < block.positive_ids.size(); ++i)
        weight[size_t(block.positive_ids[i])] = block.weights[i];
    for (Eigen::Index k = 0; k < v; ++k) {
        const double p = sigmoid(z(k));
        const double pc = std::min(std::max(p, cfg.eps), 1.0 - cfg.eps);
        const double tgt = target[size_t(k)];
        const double w = tgt != 0.0 ? weight[size_t(k)] : 1.0;
        loss -= w * (tgt * std::log(pc) + (1.0 - tgt) * std::log(1.0 - pc));
        if (dz) {
            const bool clipped = p < cfg.eps || p > 1.0 - cfg.eps;
            (*dz)(k) = clipped ? 0.0 : w * (p - tgt);
        }
    }
    return loss;
}

}  // namespace

LossAccum accumulate_loss_and_grads(const ModelParams& params, const PackedBatch& row,
                                    const AttentionMask& mask, const LossConfig& cfg,
                                    ModelParams* grads, const DropoutPlan* dropout) {
    LossAccum acc;
    const auto& slots = row.seq.sep_slots;
    if (slots.size() != row.targets.size())
        throw DataError("loss: targets not aligned with sep slots");
    if (slots.empty()) return acc;

    ForwardCache cache = forward_trunk(params, row.seq, mask, dropout);
    const Eigen::Index n_slots = Eigen::Index(slots.size());

    Mat y_sep(n_slots, params.config.n_embd);
    for (Eigen::Index s = 0; s < n_slots; ++s) y_sep.row(s) = cache.yf.row(slots[size_t(s)].seq_index);
    Mat z = y_sep * params.w_head;

    Mat dz(n_slots, params.config.vocab_size);
    for (Eigen::Index s = 0; s < n_slots; ++s) {
        Eigen::RowVectorXd dz_row(params.config.vocab_size);
        acc.loss_sum += slot_loss_and_dz(z.row(s), row.targets[size_t(s)], cfg, &dz_row);
        dz.row(s) = dz_row;
    }
    acc.n_seps = int64_t(slots.size());
    if (!std::isfinite(acc.loss_sum)) throw NumericError("loss: non-finite loss");

    grads->w_head += y_sep.transpose() * dz;
    Mat d_ysep = dz * params.w_head.transpose();
    Mat dyf = Mat::Zero(row.seq.length(), params.config.n_embd);
    for (Eigen::Index s = 0; s < n_slots; ++s) dyf.row(slots[size_t(s)].seq_index) = d_ysep.row(s);
    backward_trunk(params, row.seq, cache, dyf, grads);
    return acc;
}

LossAccum accumulate_loss(const ModelParams& params, const PackedBatch& row,
                          const AttentionMask& mask, const LossConfig& cfg) {
    LossAccum acc;
    const auto& slots = row.seq.sep_slots;
    if (slots.empty()) return acc;
    ForwardCache cache = forward_trunk(params, row.seq, mask, nullptr);
    for (size_t s = 0; s < slots.size(); ++s) {
        Eigen::RowVectorXd z = cache.yf.row(slots[s].seq_index) * params.w_head;
        acc.loss_sum += slot_loss_and_dz(z, row.targets[s], cfg, nullptr);
    }
    acc.n_seps = int64_t(slots.size());
    if (!std::isfinite(acc.loss_sum)) throw NumericError("loss: non-finite loss");
    return acc;
}

LossAndGrads loss_and_grads(const ModelParams& params, const std::vector<PackedBatch>& rows,
                            PackMode mode, const LossConfig& cfg) {
    LossAndGrads out;
    out.grads = params.zeros_like();
    for (const auto& row : rows) {
        const AttentionMask mask = build_attention_mask(row.seq, mode);
        const LossAccum acc = accumulate_loss_and_grads(params, row, mask, cfg, &out.grads);
        out.loss += acc.loss_sum;
        out.n_seps += acc.n_seps;
    }
    if (out.n_seps > 0) {
        out.loss /= double(out.n_seps);
        const double inv = 1.0 / double(out.n_seps);
        out.grads.for_each_tensor([&](const std::string&, Mat& m, bool) { m *= inv; });
    }
    return out;
}

std::vector<ParamRef> param_refs(ModelParams& params, const ModelParams& grads) {
    std::vector<ParamRef> refs;
    std::vector<std::pair<const double*, int64_t>> gbufs;
    grads.for_each_tensor([&](const std::string&, const Mat& m, bool) {
        gbufs.emplace_back(m.data(), m.size());
    });
    size_t i = 0;
    params.for_each_tensor([&](const std::string& name, Mat& m, bool decay) {
        refs.push_back({name, m.data(), gbufs[i].first, m.size(), decay});
        ++i;
    });
    return refs;
}

std::vector<std::pair<double*, int64_t>> grad_buffers(ModelParams& grads) {
    std::vector<std::pair<double*, int64_t>> bufs;
    grads.for_each_tensor([&](const std::string&, Mat& m, bool) {
        bufs.emplace_back(m.data(), m.size());
    });
    return bufs;
}

namespace {

json config_to_json(const ModelConfig& c) {
    return json{{"n_layer", c.n_layer},       {"n_head", c.n_head},
                {"n_embd", c.n_embd},         {"vocab_size", c.vocab_size},
                {"block_size", c.block_size}, {"rotary_base", c.rotary_base},
                {"rotary", c.rotary},         {"bias", c.bias},
                {"dropout", c.dropout}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.n_layer = j.at("n_layer").get<int>();
    c.n_head = j.at("n_head").get<int>();
    c.n_embd = j.at("n_embd").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.block_size = j.at("block_size").get<int>();
    c.rotary_base = j.at("rotary_base").get<double>();
    c.rotary = j.at("rotary").get<bool>();
    c.bias = j.at("bias").get<bool>();
    c.dropout = j.at("dropout").get<double>();
    return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params, const AdamState* opt,
                     int64_t iter, const std::map<std::string, std::string>& meta) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path);

    json manifest;
    manifest["config"] = config_to_json(params.config);
    manifest["iter"] = iter;
    manifest["meta"] = meta;
    manifest["tensors"] = json::array();
    params.for_each_tensor([&](const std::string& name, const Mat& m, bool) {
        manifest["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    });
    manifest["opt_state"] = opt != nullptr;
    if (opt) manifest["adam_step"] = opt->step_count;

    const std::string header = manifest.dump();
    const uint64_t header_len = header.size();
    out.write("EHRSEQCKPT1\n", 12);
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header.data(), std::streamsize(header.size()));
    params.for_each_tensor([&](const std::string&, const Mat& m, bool) {
        out.write(reinterpret_cast<const char*>(m.data()), std::streamsize(m.size() * 8));
    });
    if (opt) {
        for (const auto& m : opt->m)
            out.write(reinterpret_cast<const char*>(m.data()), std::streamsize(m.size() * 8));
        for (const auto& v : opt->v)
            out.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * 8));
    }
    if (!out) throw DataError("short write to checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    char magic[12];
    in.read(magic, 12);
    if (!in || std::string(magic, 12) != "EHRSEQCKPT1\n")
        throw DataError("not an ehrseq checkpoint: " + path);
    uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    std::string header(header_len, '\0');
    in.read(header.data(), std::streamsize(header_len));
    if (!in) throw DataError("truncated checkpoint header: " + path);

    json manifest;
    try {
        manifest = json::parse(header);
    } catch (const json::exception& e) {
        throw DataError(std::string("corrupt checkpoint manifest: ") + e.what());
    }

    Checkpoint ck;
    const ModelConfig config = config_from_json(manifest.at("config"));
    ck.params = init_params(config, 0);  // shapes only; data overwritten below
    ck.iter = manifest.at("iter").get<int64_t>();
    for (auto& [k, v] : manifest.at("meta").items()) ck.meta[k] = v.get<std::string>();

    size_t ti = 0;
    const auto& tensors = manifest.at("tensors");
    ck.params.for_each_tensor([&](const std::string& name, Mat& m, bool) {
        const auto& spec = tensors.at(ti++);
        if (spec.at("name").get<std::string>() != name ||
            spec.at("rows").get<Eigen::Index>() != m.rows() ||
            spec.at("cols").get<Eigen::Index>() != m.cols())
            throw DataError("checkpoint tensor mismatch at " + name);
        in.read(reinterpret_cast<char*>(m.data()), std::streamsize(m.size() * 8));
    });
    if (manifest.at("opt_state").get<bool>()) {
        AdamState state;
        ck.params.for_each_tensor([&](const std::string&, Mat& m, bool) {
            state.m.emplace_back(size_t(m.size()), 0.0);
            state.v.emplace_back(size_t(m.size()), 0.0);
        });
        for (auto& m : state.m) in.read(reinterpret_cast<char*>(m.data()), std::streamsize(m.size() * 8));
        for (auto& v : state.v) in.read(reinterpret_cast<char*>(v.data()), std::streamsize(v.size() * 8));
        state.step_count = manifest.at("adam_step").get<int64_t>();
        ck.opt_state = std::move(state);
    }
    if (!in) throw DataError("truncated checkpoint data: " + path);
    return ck;
}

}  // namespace ehrseq
