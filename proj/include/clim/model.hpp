#pragma once

// The CLIM network: variant dual encoder (BiLSTM + second encoder),
// self-attention context matrices, the matrix-exchange interaction block,
// conv-compressed slot decoding, intent classification over a pooled
// utterance vector, and optional dynamic parameter generation gating the
// slot classifier.

#include <string>
#include <utility>
#include <vector>

#include "clim/data.hpp"
#include "clim/layers.hpp"

namespace clim {

enum class EncoderVariant { BB, BT, BTV };

inline std::string to_string(EncoderVariant v) {
    switch (v) {
        case EncoderVariant::BB: return "B-B";
        case EncoderVariant::BT: return "B-T";
        case EncoderVariant::BTV: return "B-T(V)";
    }
    throw ConfigError("unknown encoder variant");
}

inline EncoderVariant parse_variant(const std::string& s) {
    if (s == "B-B" || s == "BB" || s == "bb") return EncoderVariant::BB;
    if (s == "B-T" || s == "BT" || s == "bt") return EncoderVariant::BT;
    if (s == "B-T(V)" || s == "BTV" || s == "btv") return EncoderVariant::BTV;
    throw ConfigError("unknown encoder variant '" + s + "' (want B-B, B-T or B-T(V))");
}

struct ClimConfig {
    EncoderVariant encoder_variant = EncoderVariant::BTV;
    long hidden_size = 200;   // LSTM units per direction
    long embed_dim = 128;     // trainable embeddings
    long head_count = 4;
    long ff_multiple = 4;
    long attention_dim = 128;
    long conv_width = 3;
    long conv_channels = 400;  // slot-decoder compression width
    double dropout = 0.5;
    bool dpg_enabled = false;
    AttentionScoring attention_scoring = AttentionScoring::Additive;

    long vocab_size = 0;
    long slot_label_count = 0;
    long intent_count = 0;

    // Width of the second encoder's hidden states h'.
    long second_width() const {
        switch (encoder_variant) {
            case EncoderVariant::BB: return 2 * hidden_size;
            case EncoderVariant::BT: return embed_dim;
            case EncoderVariant::BTV: return 2 * hidden_size;
        }
        throw ConfigError("unknown encoder variant");
    }
    long transformer_dim() const {
        return encoder_variant == EncoderVariant::BT ? embed_dim : 2 * hidden_size;
    }

    void validate() const {
        if (hidden_size < 1 || embed_dim < 1 || vocab_size < 1 ||
            slot_label_count < 1 || intent_count < 1 || conv_channels < 1 ||
            attention_dim < 1 || head_count < 1)
            throw ConfigError("all model dimensions and counts must be positive");
        if (conv_width < 1 || conv_width % 2 == 0)
            throw ConfigError("conv_width must be odd and positive, got " +
                              std::to_string(conv_width));
        if (dropout < 0.0 || dropout >= 1.0)
            throw ConfigError("dropout must be in [0,1)");
        if (encoder_variant != EncoderVariant::BB &&
            transformer_dim() % head_count != 0)
            throw ConfigError("transformer dim " + std::to_string(transformer_dim()) +
                              " not divisible by head_count " +
                              std::to_string(head_count));
    }
};

inline ModelParams init_model(const ClimConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParams params;
    const long H = cfg.hidden_size, E = cfg.embed_dim;
    {
        std::vector<double> emb(std::size_t(cfg.vocab_size * E));
        const double r = std::sqrt(3.0 / double(E));
        for (auto& v : emb) v = rng.uniform(-r, r);
        // padding row stays zero
        for (long e = 0; e < E; ++e) emb[std::size_t(e)] = 0.0;
        params.insert("embedding.table", Tensor::param({cfg.vocab_size, E}, std::move(emb)));
    }
    register_lstm(params, "encoder.lstm.fwd", E, H, rng);
    register_lstm(params, "encoder.lstm.bwd", E, H, rng);
    switch (cfg.encoder_variant) {
        case EncoderVariant::BB:
            register_lstm(params, "encoder.lstm2.fwd", E, H, rng);
            register_lstm(params, "encoder.lstm2.bwd", E, H, rng);
            break;
        case EncoderVariant::BT:
        case EncoderVariant::BTV: {
            const long D = cfg.transformer_dim();
            register_transformer_block(params, "encoder.transformer.block1", D,
                                       cfg.head_count, cfg.ff_multiple * D, rng);
            register_transformer_block(params, "encoder.transformer.block2", D,
                                       cfg.head_count, cfg.ff_multiple * D, rng);
            break;
        }
    }
    const long Dp = cfg.second_width();
    register_attention(params, "attention.sf", 2 * H, 2 * H, cfg.attention_dim,
                       cfg.attention_scoring, rng);
    register_attention(params, "attention.id", Dp, Dp, cfg.attention_dim,
                       cfg.attention_scoring, rng);
    const long id_width = Dp + 2 * H;   // h' ++ swapped context (from h side)
    const long sf_width = 2 * H + Dp;   // h  ++ swapped context (from h' side)
    params.insert("decoder.intent.W",
                  init_uniform({id_width, cfg.intent_count}, id_width, cfg.intent_count, rng));
    params.insert("decoder.intent.b",
                  Tensor::param({cfg.intent_count},
                                std::vector<double>(std::size_t(cfg.intent_count), 0.0)));
    const long conv_in = sf_width + id_width;
    params.insert("decoder.slot.conv_kernel",
                  init_uniform({cfg.conv_width, conv_in, cfg.conv_channels},
                               cfg.conv_width * conv_in, cfg.conv_channels, rng));
    params.insert("decoder.slot.conv_bias",
                  Tensor::param({cfg.conv_channels},
                                std::vector<double>(std::size_t(cfg.conv_channels), 0.0)));
    params.insert("decoder.slot.W",
                  init_uniform({cfg.conv_channels, cfg.slot_label_count},
                               cfg.conv_channels, cfg.slot_label_count, rng));
    params.insert("decoder.slot.b",
                  Tensor::param({cfg.slot_label_count},
                                std::vector<double>(std::size_t(cfg.slot_label_count), 0.0)));
    if (cfg.dpg_enabled) {
        params.insert("dpg.w_D",
                      init_uniform({id_width, cfg.conv_channels}, id_width,
                                   cfg.conv_channels, rng));
        params.insert("dpg.b",
                      Tensor::param({cfg.conv_channels},
                                    std::vector<double>(std::size_t(cfg.conv_channels), 0.0)));
    }
    return params;
}

struct DualEncoding {
    Tensor h;        // [B,T,2H] BiLSTM states
    Tensor h_prime;  // [B,T,D'] second-encoder states
    Tensor mask;     // [B,T]
};

struct TaskStates {
    Tensor h_sf;  // [B,T,2H+D']
    Tensor h_id;  // [B,T,D'+2H]
    Tensor c_sf;  // post-swap slot contexts
    Tensor c_id;  // post-swap intent contexts
};

inline DualEncoding encode(const ClimConfig& cfg, const ModelParams& params,
                           const Tensor& embedded, const Tensor& mask) {
    if (embedded.dim(1) < 1) throw ContractError("encode: empty utterance");
    DualEncoding enc;
    enc.mask = mask;
    auto fwd = lstm_from(params, "encoder.lstm.fwd");
    auto bwd = lstm_from(params, "encoder.lstm.bwd");
    enc.h = bilstm_encode(fwd, bwd, embedded, mask);
    switch (cfg.encoder_variant) {
        case EncoderVariant::BB: {
            auto fwd2 = lstm_from(params, "encoder.lstm2.fwd");
            auto bwd2 = lstm_from(params, "encoder.lstm2.bwd");
            enc.h_prime = bilstm_encode(fwd2, bwd2, embedded, mask);
            break;
        }
        case EncoderVariant::BT:
        case EncoderVariant::BTV: {
            auto b1 = transformer_block_from(params, "encoder.transformer.block1",
                                             cfg.head_count);
            auto b2 = transformer_block_from(params, "encoder.transformer.block2",
                                             cfg.head_count);
            // B-T consumes word vectors (plus position encodings, since nothing
            // else carries order); B-T(V) consumes the BiLSTM states directly.
            Tensor tin = cfg.encoder_variant == EncoderVariant::BT
                             ? add_position_encodings(embedded)
                             : enc.h;
            Tensor h1 = transformer_block(b1, tin, mask);
            Tensor h2 = transformer_block(b2, h1, mask);
            enc.h_prime = tanh(add(h1, h2));
            break;
        }
    }
    return enc;
}

// The interaction block: each task's branch consumes the other side's
// attention contexts. A pure handle swap, gradient-transparent.
inline std::pair<Tensor, Tensor> interaction_swap(const Tensor& c_sf_raw,
                                                  const Tensor& c_id_raw) {
    if (c_sf_raw.dim(0) != c_id_raw.dim(0) || c_sf_raw.dim(1) != c_id_raw.dim(1))
        throw DimensionError("interaction_swap: " + shape_str(c_sf_raw.shape()) +
                             " vs " + shape_str(c_id_raw.shape()));
    return {c_id_raw, c_sf_raw};
}

inline TaskStates assemble_task_states(const DualEncoding& enc, const Tensor& c_sf,
                                       const Tensor& c_id) {
    TaskStates ts;
    ts.c_sf = c_sf;
    ts.c_id = c_id;
    ts.h_sf = concat({enc.h, c_sf}, 2);
    ts.h_id = concat({enc.h_prime, c_id}, 2);
    return ts;
}

// Masked global average pooling then affine map; softmax happens at loss /
// prediction time. `pooled_out` receives GAP(h_id) for reuse downstream.
inline Tensor intent_logits(const Tensor& h_id, const Tensor& mask,
                            const Tensor& W_intent, const Tensor& b_intent,
                            Tensor* pooled_out = nullptr) {
    Tensor g = masked_mean_time(h_id, mask);
    if (pooled_out) *pooled_out = g;
    return add_rows(matmul(g, W_intent), b_intent);
}

// s_i = conv1d(concat[h_i^sf, pooled h^id tiled along T]). Inputs are masked
// so padded positions look exactly like the conv's own zero padding.
inline Tensor compress_for_slot(const Tensor& h_sf, const Tensor& pooled_id,
                                const Tensor& mask, const Tensor& kernel,
                                const Tensor& bias) {
    const long B = h_sf.dim(0), T = h_sf.dim(1);
    Tensor tiled = tile_time(pooled_id, T);
    Tensor conv_in = concat({h_sf, tiled}, 2);
    const long Cin = conv_in.dim(2);
    Tensor masked = reshape(
        scale_rows(reshape(conv_in, {B * T, Cin}), reshape(mask, {B * T})),
        {B, T, Cin});
    return conv1d_same(masked, kernel, bias);
}

// Per-token affine slot classifier over the compressed states. When DPG is
// enabled the gate p = sigmoid(w_D z + b) with z = GAP(h_id) modulates the
// classifier multiplicatively (equivalently W_eff = W with rows scaled by p).
inline Tensor slot_logits(const Tensor& s, const Tensor& W_slot, const Tensor& b_slot,
                          const Tensor* dpg_w, const Tensor* dpg_b, const Tensor& z) {
    const long B = s.dim(0), T = s.dim(1), C = s.dim(2);
    Tensor flat = reshape(s, {B * T, C});
    if (dpg_w) {
        if (dpg_w->dim(1) != C)
            throw ConfigError("dpg: gate width " + std::to_string(dpg_w->dim(1)) +
                              " does not match slot-classifier input width " +
                              std::to_string(C));
        Tensor p = sigmoid(add_rows(matmul(z, *dpg_w), *dpg_b));  // [B,C]
        Tensor p_tiled = reshape(tile_time(p, T), {B * T, C});
        flat = mul(flat, p_tiled);
    }
    return add_rows(matmul(flat, W_slot), b_slot);
}

struct ForwardResult {
    Tensor intent_logits;  // [B, intent_count]
    Tensor slot_logits;    // [B*T, slot_label_count]
    // intermediates, exposed for tests and diagnostics
    DualEncoding encoding;
    TaskStates states;
    Tensor pooled;    // GAP(h_id) [B, D'+2H]
    Tensor alpha_sf;  // attention weights before the swap
    Tensor alpha_id;
};

inline ForwardResult forward(const ClimConfig& cfg, const ModelParams& params,
                             const Batch& batch, bool training, Rng& rng) {
    const long B = batch.batch_size, T = batch.max_len;
    Tensor mask = Tensor::from({B, T}, batch.mask);
    Tensor embedded = embedding_lookup(params.at("embedding.table"), batch.token_ids,
                                       B, T, params.frozen("embedding.table"));
    {
        const long E = cfg.embed_dim;
        embedded = reshape(
            dropout_apply(reshape(embedded, {B * T, E}), cfg.dropout, training, rng),
            {B, T, E});
    }
    ForwardResult out;
    out.encoding = encode(cfg, params, embedded, mask);

    auto att_sf = attention_from(params, "attention.sf", cfg.attention_scoring);
    auto att_id = attention_from(params, "attention.id", cfg.attention_scoring);
    Tensor c_sf_raw = attention_context(out.encoding.h, out.encoding.h, att_sf, mask,
                                        &out.alpha_sf);
    Tensor c_id_raw = attention_context(out.encoding.h_prime, out.encoding.h_prime,
                                        att_id, mask, &out.alpha_id);
    auto [c_sf, c_id] = interaction_swap(c_sf_raw, c_id_raw);
    out.states = assemble_task_states(out.encoding, c_sf, c_id);

    Tensor g;
    {
        // GAP feeds both the intent classifier and the slot compressor; the
        // classifier input is dropped out, the compressor sees it undropped.
        g = masked_mean_time(out.states.h_id, mask);
        Tensor g_drop = dropout_apply(g, cfg.dropout, training, rng);
        out.intent_logits = add_rows(matmul(g_drop, params.at("decoder.intent.W")),
                                     params.at("decoder.intent.b"));
    }
    out.pooled = g;
    Tensor s = compress_for_slot(out.states.h_sf, g, mask,
                                 params.at("decoder.slot.conv_kernel"),
                                 params.at("decoder.slot.conv_bias"));
    {
        const long C = s.dim(2);
        s = reshape(dropout_apply(reshape(s, {B * T, C}), cfg.dropout, training, rng),
                    {B, T, C});
    }
    const Tensor* dpg_w = nullptr;
    const Tensor* dpg_b = nullptr;
    if (cfg.dpg_enabled) {
        dpg_w = &params.at("dpg.w_D");
        dpg_b = &params.at("dpg.b");
    }
    out.slot_logits = slot_logits(s, params.at("decoder.slot.W"),
                                  params.at("decoder.slot.b"), dpg_w, dpg_b, g);
    return out;
}

}  // namespace clim
