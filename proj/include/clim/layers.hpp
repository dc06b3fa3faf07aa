#pragma once

// Neural building blocks: BiLSTM, transformer block, additive attention,
// 1-D convolution, dropout, embeddings. All operate on batched sequences
// [B,T,*] with a 0/1 mask [B,T] marking real tokens.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "clim/params.hpp"
#include "clim/tensor.hpp"

namespace clim {

// Xavier-uniform initialized parameter.
inline Tensor init_uniform(Shape shape, long fan_in, long fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
    std::vector<double> v(std::size_t(numel(shape)));
    for (auto& x : v) x = rng.uniform(-limit, limit);
    return Tensor::param(std::move(shape), std::move(v));
}

// ---------------------------------------------------------------------------
// LSTM

// Gate layout inside the 4H block: input, forget, candidate, output.
struct LstmParams {
    Tensor wx;  // [In, 4H]
    Tensor wh;  // [H, 4H]
    Tensor b;   // [4H]
    long hidden_size = 0;
};

inline LstmParams register_lstm(ModelParams& params, const std::string& prefix,
                                long input_size, long hidden_size, Rng& rng) {
    LstmParams p;
    p.hidden_size = hidden_size;
    p.wx = init_uniform({input_size, 4 * hidden_size}, input_size, hidden_size, rng);
    p.wh = init_uniform({hidden_size, 4 * hidden_size}, hidden_size, hidden_size, rng);
    std::vector<double> bias(std::size_t(4 * hidden_size), 0.0);
    // forget-gate bias at 1
    for (long i = hidden_size; i < 2 * hidden_size; ++i) bias[std::size_t(i)] = 1.0;
    p.b = Tensor::param({4 * hidden_size}, std::move(bias));
    params.insert(prefix + ".wx", p.wx);
    params.insert(prefix + ".wh", p.wh);
    params.insert(prefix + ".b", p.b);
    return p;
}

inline LstmParams lstm_from(const ModelParams& params, const std::string& prefix) {
    LstmParams p;
    p.wx = params.at(prefix + ".wx");
    p.wh = params.at(prefix + ".wh");
    p.b = params.at(prefix + ".b");
    p.hidden_size = p.wh.dim(0);
    return p;
}

// One direction over [B,T,In]. Masked steps produce zero h/c, so padding can
// never leak into later real tokens of the scanning direction.
inline Tensor lstm_direction(const LstmParams& p, const Tensor& inputs,
                             const Tensor& mask, bool reverse) {
    if (inputs.ndim() != 3)
        throw DimensionError("lstm: want [B,T,In], got " + shape_str(inputs.shape()));
    const long B = inputs.dim(0), T = inputs.dim(1), H = p.hidden_size;
    if (T < 1) throw ContractError("lstm: empty sequence");
    if (mask.ndim() != 2 || mask.dim(0) != B || mask.dim(1) != T)
        throw DimensionError("lstm: mask " + shape_str(mask.shape()) +
                             " vs inputs " + shape_str(inputs.shape()));
    Tensor h = Tensor::zeros({B, H});
    Tensor c = Tensor::zeros({B, H});
    std::vector<Tensor> steps;
    steps.resize(std::size_t(T));
    for (long step = 0; step < T; ++step) {
        const long t = reverse ? T - 1 - step : step;
        Tensor xt = reshape(slice(inputs, 1, t, t + 1), {B, inputs.dim(2)});
        Tensor mt = reshape(slice(mask, 1, t, t + 1), {B});
        Tensor gates = add_rows(add(matmul(xt, p.wx), matmul(h, p.wh)), p.b);
        Tensor gi = sigmoid(slice(gates, 1, 0, H));
        Tensor gf = sigmoid(slice(gates, 1, H, 2 * H));
        Tensor gc = tanh(slice(gates, 1, 2 * H, 3 * H));
        Tensor go = sigmoid(slice(gates, 1, 3 * H, 4 * H));
        c = scale_rows(add(mul(gf, c), mul(gi, gc)), mt);
        h = scale_rows(mul(go, tanh(c)), mt);
        steps[std::size_t(t)] = reshape(h, {B, 1, H});
    }
    return concat(steps, 1);
}

// h_t = concat[h_fwd_t, h_bwd_t] -> [B,T,2H]
inline Tensor bilstm_encode(const LstmParams& fwd, const LstmParams& bwd,
                            const Tensor& inputs, const Tensor& mask) {
    Tensor hf = lstm_direction(fwd, inputs, mask, false);
    Tensor hb = lstm_direction(bwd, inputs, mask, true);
    return concat({hf, hb}, 2);
}

// ---------------------------------------------------------------------------
// transformer block (post-LN: x -> LN(x + MHA(x)) -> LN(y + FF(y)))

struct TransformerBlockParams {
    Tensor wq, wk, wv, wo;          // [D,D]
    Tensor bq, bk, bv, bo;          // [D]
    Tensor ff_w1, ff_w2;            // [D,F], [F,D]
    Tensor ff_b1, ff_b2;            // [F], [D]
    Tensor ln1_gain, ln1_bias;      // [D]
    Tensor ln2_gain, ln2_bias;      // [D]
    long head_count = 0;
    long model_dim = 0;
};

inline TransformerBlockParams register_transformer_block(
    ModelParams& params, const std::string& prefix, long model_dim,
    long head_count, long ff_dim, Rng& rng) {
    if (model_dim % head_count != 0)
        throw ConfigError("transformer: model_dim " + std::to_string(model_dim) +
                          " not divisible by head_count " + std::to_string(head_count));
    TransformerBlockParams p;
    p.head_count = head_count;
    p.model_dim = model_dim;
    auto proj = [&] { return init_uniform({model_dim, model_dim}, model_dim, model_dim, rng); };
    p.wq = proj();
    p.wk = proj();
    p.wv = proj();
    p.wo = proj();
    p.bq = Tensor::param({model_dim}, std::vector<double>(std::size_t(model_dim), 0.0));
    p.bk = Tensor::param({model_dim}, std::vector<double>(std::size_t(model_dim), 0.0));
    p.bv = Tensor::param({model_dim}, std::vector<double>(std::size_t(model_dim), 0.0));
    p.bo = Tensor::param({model_dim}, std::vector<double>(std::size_t(model_dim), 0.0));
    p.ff_w1 = init_uniform({model_dim, ff_dim}, model_dim, ff_dim, rng);
    p.ff_w2 = init_uniform({ff_dim, model_dim}, ff_dim, model_dim, rng);
    p.ff_b1 = Tensor::param({ff_dim}, std::vector<double>(std::size_t(ff_dim), 0.0));
    p.ff_b2 = Tensor::param({model_dim}, std::vector<double>(std::size_t(model_dim), 0.0));
    p.ln1_gain = Tensor::param({model_dim}, std::vector<double>(std::size_t(model_dim), 1.0));
    p.ln1_bias = Tensor::param({model_dim}, std::vector<double>(std::size_t(model_dim), 0.0));
    p.ln2_gain = Tensor::param({model_dim}, std::vector<double>(std::size_t(model_dim), 1.0));
    p.ln2_bias = Tensor::param({model_dim}, std::vector<double>(std::size_t(model_dim), 0.0));
    params.insert(prefix + ".wq", p.wq);
    params.insert(prefix + ".wk", p.wk);
    params.insert(prefix + ".wv", p.wv);
    params.insert(prefix + ".wo", p.wo);
    params.insert(prefix + ".bq", p.bq);
    params.insert(prefix + ".bk", p.bk);
    params.insert(prefix + ".bv", p.bv);
    params.insert(prefix + ".bo", p.bo);
    params.insert(prefix + ".ff_w1", p.ff_w1);
    params.insert(prefix + ".ff_w2", p.ff_w2);
    params.insert(prefix + ".ff_b1", p.ff_b1);
    params.insert(prefix + ".ff_b2", p.ff_b2);
    params.insert(prefix + ".ln1_gain", p.ln1_gain);
    params.insert(prefix + ".ln1_bias", p.ln1_bias);
    params.insert(prefix + ".ln2_gain", p.ln2_gain);
    params.insert(prefix + ".ln2_bias", p.ln2_bias);
    return p;
}

inline TransformerBlockParams transformer_block_from(const ModelParams& params,
                                                     const std::string& prefix,
                                                     long head_count) {
    TransformerBlockParams p;
    p.wq = params.at(prefix + ".wq");
    p.wk = params.at(prefix + ".wk");
    p.wv = params.at(prefix + ".wv");
    p.wo = params.at(prefix + ".wo");
    p.bq = params.at(prefix + ".bq");
    p.bk = params.at(prefix + ".bk");
    p.bv = params.at(prefix + ".bv");
    p.bo = params.at(prefix + ".bo");
    p.ff_w1 = params.at(prefix + ".ff_w1");
    p.ff_w2 = params.at(prefix + ".ff_w2");
    p.ff_b1 = params.at(prefix + ".ff_b1");
    p.ff_b2 = params.at(prefix + ".ff_b2");
    p.ln1_gain = params.at(prefix + ".ln1_gain");
    p.ln1_bias = params.at(prefix + ".ln1_bias");
    p.ln2_gain = params.at(prefix + ".ln2_gain");
    p.ln2_bias = params.at(prefix + ".ln2_bias");
    p.head_count = head_count;
    p.model_dim = p.wq.dim(0);
    return p;
}

// When non-null, `attention_out` receives the per-head attention matrices
// [B,T,T] in head order.
inline Tensor transformer_block(const TransformerBlockParams& p, const Tensor& x,
                                const Tensor& mask,
                                std::vector<Tensor>* attention_out = nullptr) {
    if (x.ndim() != 3 || x.dim(2) != p.model_dim)
        throw DimensionError("transformer_block: want [B,T," +
                             std::to_string(p.model_dim) + "], got " +
                             shape_str(x.shape()));
    const long B = x.dim(0), T = x.dim(1), D = p.model_dim;
    if (mask.ndim() != 2 || mask.dim(0) != B || mask.dim(1) != T)
        throw DimensionError("transformer_block: mask " + shape_str(mask.shape()) +
                             " vs inputs " + shape_str(x.shape()));
    const long nh = p.head_count, dh = D / nh;
    Tensor x2 = reshape(x, {B * T, D});
    Tensor q = add_rows(matmul(x2, p.wq), p.bq);
    Tensor k = add_rows(matmul(x2, p.wk), p.bk);
    Tensor v = add_rows(matmul(x2, p.wv), p.bv);
    std::vector<Tensor> head_ctx;
    for (long h = 0; h < nh; ++h) {
        Tensor qh = reshape(slice(q, 1, h * dh, (h + 1) * dh), {B, T, dh});
        Tensor kh = reshape(slice(k, 1, h * dh, (h + 1) * dh), {B, T, dh});
        Tensor vh = reshape(slice(v, 1, h * dh, (h + 1) * dh), {B, T, dh});
        Tensor scores = scale(bmm(qh, kh, /*transpose_b=*/true),
                              1.0 / std::sqrt(double(dh)));
        Tensor att = masked_softmax(scores, mask);
        if (attention_out) attention_out->push_back(att);
        head_ctx.push_back(reshape(bmm(att, vh), {B * T, dh}));
    }
    Tensor ctx = head_ctx.size() == 1 ? head_ctx[0] : concat(head_ctx, 1);
    Tensor attn_out = add_rows(matmul(ctx, p.wo), p.bo);
    Tensor y1 = layer_norm(add(x2, attn_out), p.ln1_gain, p.ln1_bias);
    Tensor ff = add_rows(matmul(relu(add_rows(matmul(y1, p.ff_w1), p.ff_b1)), p.ff_w2),
                         p.ff_b2);
    Tensor y2 = layer_norm(add(y1, ff), p.ln2_gain, p.ln2_bias);
    return reshape(y2, {B, T, D});
}

// Fixed sinusoidal position encodings, added to [B,T,D] inputs.
inline Tensor add_position_encodings(const Tensor& x) {
    const long B = x.dim(0), T = x.dim(1), D = x.dim(2);
    std::vector<double> pe(std::size_t(B * T * D));
    for (long t = 0; t < T; ++t)
        for (long d = 0; d < D; ++d) {
            const double angle =
                double(t) / std::pow(10000.0, 2.0 * double(d / 2) / double(D));
            const double val = (d % 2 == 0) ? std::sin(angle) : std::cos(angle);
            for (long b = 0; b < B; ++b) pe[std::size_t((b * T + t) * D + d)] = val;
        }
    return add(x, Tensor::from({B, T, D}, std::move(pe)));
}

// ---------------------------------------------------------------------------
// attention over a sequence producing per-query context vectors

enum class AttentionScoring { Additive, ScaledDot };

struct AttentionParams {
    Tensor wq;  // [q_dim, A]
    Tensor wk;  // [v_dim, A]
    Tensor score_v;  // [A] (additive scoring only)
    AttentionScoring scoring = AttentionScoring::Additive;
};

inline AttentionParams register_attention(ModelParams& params,
                                          const std::string& prefix, long q_dim,
                                          long v_dim, long attn_dim,
                                          AttentionScoring scoring, Rng& rng) {
    AttentionParams p;
    p.scoring = scoring;
    p.wq = init_uniform({q_dim, attn_dim}, q_dim, attn_dim, rng);
    p.wk = init_uniform({v_dim, attn_dim}, v_dim, attn_dim, rng);
    p.score_v = init_uniform({attn_dim}, attn_dim, 1, rng);
    params.insert(prefix + ".wq", p.wq);
    params.insert(prefix + ".wk", p.wk);
    params.insert(prefix + ".score_v", p.score_v);
    return p;
}

inline AttentionParams attention_from(const ModelParams& params,
                                      const std::string& prefix,
                                      AttentionScoring scoring) {
    AttentionParams p;
    p.wq = params.at(prefix + ".wq");
    p.wk = params.at(prefix + ".wk");
    p.score_v = params.at(prefix + ".score_v");
    p.scoring = scoring;
    return p;
}

// c_i = sum_j alpha_{i,j} v_j with alpha = softmax_j score(q_i, k_j), masked
// positions excluded. Returns contexts [B,T,v_dim]; `weights_out`, when
// non-null, receives alpha [B,T,T].
inline Tensor attention_context(const Tensor& queries, const Tensor& keys_values,
                                const AttentionParams& p, const Tensor& mask,
                                Tensor* weights_out = nullptr) {
    if (queries.ndim() != 3 || keys_values.ndim() != 3 ||
        queries.dim(0) != keys_values.dim(0) || queries.dim(1) != keys_values.dim(1))
        throw DimensionError("attention_context: " + shape_str(queries.shape()) +
                             " vs " + shape_str(keys_values.shape()));
    const long B = queries.dim(0), T = queries.dim(1);
    const long A = p.wq.dim(1);
    Tensor qp = reshape(matmul(reshape(queries, {B * T, queries.dim(2)}), p.wq),
                        {B, T, A});
    Tensor kp = reshape(matmul(reshape(keys_values, {B * T, keys_values.dim(2)}), p.wk),
                        {B, T, A});
    Tensor scores = p.scoring == AttentionScoring::Additive
                        ? additive_scores(qp, kp, p.score_v)
                        : scale(bmm(qp, kp, /*transpose_b=*/true),
                                1.0 / std::sqrt(double(A)));
    Tensor alpha = masked_softmax(scores, mask);
    if (weights_out) *weights_out = alpha;
    return bmm(alpha, keys_values);
}

}  // namespace clim
