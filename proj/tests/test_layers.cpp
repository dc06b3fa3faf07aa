#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "clim/layers.hpp"
#include "support/testing.hpp"

using namespace clim;
using clim::testing::check_gradients;

namespace {

Tensor ones_mask(long B, long T) { return Tensor::full({B, T}, 1.0); }

Tensor rand_param(Shape shape, Rng& rng, double lim = 0.5) {
    std::vector<double> v(std::size_t(numel(shape)));
    for (auto& x : v) x = rng.uniform(-lim, lim);
    return Tensor::param(std::move(shape), std::move(v));
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---------------------------------------------------------------------------
// embeddings

TEST_CASE("embedding lookup gathers rows") {
    Tensor table = Tensor::param({4, 3}, {0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
    std::vector<int> ids = {2, 1, 0, 3};
    Tensor e = embedding_lookup(table, ids, 2, 2, false);
    REQUIRE(e.shape() == Shape{2, 2, 3});
    CHECK(e.values() == std::vector<double>{4, 5, 6, 1, 2, 3, 0, 0, 0, 7, 8, 9});
}

TEST_CASE("embedding backward scatters counts") {
    Tensor table = Tensor::param({3, 2}, {1, 1, 2, 2, 3, 3});
    std::vector<int> ids = {1, 1, 2, 0};
    table.zero_grad();
    Tensor loss = sum(embedding_lookup(table, ids, 1, 4, false));
    backward(loss);
    // row 1 used twice, rows 0 and 2 once each
    CHECK(table.grad() == std::vector<double>{1, 1, 2, 2, 1, 1});
}

TEST_CASE("frozen embedding receives no gradient") {
    Tensor table = Tensor::param({3, 2}, {1, 1, 2, 2, 3, 3});
    table.zero_grad();
    Tensor loss = sum(embedding_lookup(table, {0, 1, 2}, 1, 3, true));
    backward(loss);
    CHECK(table.grad() == std::vector<double>{0, 0, 0, 0, 0, 0});
}

TEST_CASE("embedding rejects out-of-range ids with location") {
    Tensor table = Tensor::param({3, 2}, std::vector<double>(6, 0.0));
    try {
        embedding_lookup(table, {0, 7, 1}, 1, 3, false);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("7") != std::string::npos);
        CHECK(msg.find("1") != std::string::npos);  // position of the bad id
    }
}

// ---------------------------------------------------------------------------
// LSTM

TEST_CASE("lstm with zero parameters emits zeros") {
    LstmParams p;
    p.hidden_size = 3;
    p.wx = Tensor::param({2, 12}, std::vector<double>(24, 0.0));
    p.wh = Tensor::param({3, 12}, std::vector<double>(36, 0.0));
    p.b = Tensor::param({12}, std::vector<double>(12, 0.0));
    Rng rng(7);
    Tensor x = rand_param({2, 4, 2}, rng);
    Tensor out = lstm_direction(p, x, ones_mask(2, 4), false);
    REQUIRE(out.shape() == Shape{2, 4, 3});
    // i = f = o = 0.5, candidate = tanh(0) = 0 -> c stays 0, h = 0.5*tanh(0) = 0
    for (double v : out.values()) CHECK(v == 0.0);
}

TEST_CASE("lstm scalar-step hand oracle") {
    // H = 1, In = 1, all weights known; walk the recurrence by hand.
    const double wxi = 0.3, wxf = -0.2, wxc = 0.5, wxo = 0.4;
    const double whi = 0.1, whf = 0.2, whc = -0.3, who = 0.6;
    const double bi = 0.05, bf = 1.0, bc = -0.1, bo = 0.2;
    LstmParams p;
    p.hidden_size = 1;
    p.wx = Tensor::param({1, 4}, {wxi, wxf, wxc, wxo});
    p.wh = Tensor::param({1, 4}, {whi, whf, whc, who});
    p.b = Tensor::param({4}, {bi, bf, bc, bo});
    const std::vector<double> xs = {0.7, -1.2, 0.4};
    Tensor x = Tensor::from({1, 3, 1}, std::vector<double>(xs));
    Tensor out = lstm_direction(p, x, ones_mask(1, 3), false);

    double h = 0.0, c = 0.0;
    for (long t = 0; t < 3; ++t) {
        const double xt = xs[std::size_t(t)];
        const double gi = sig(wxi * xt + whi * h + bi);
        const double gf = sig(wxf * xt + whf * h + bf);
        const double gc = std::tanh(wxc * xt + whc * h + bc);
        const double go = sig(wxo * xt + who * h + bo);
        c = gf * c + gi * gc;
        h = go * std::tanh(c);
        CHECK(out.values()[std::size_t(t)] == Catch::Approx(h).epsilon(1e-12));
    }
}

TEST_CASE("lstm masked tail stays zero and does not leak") {
    ModelParams params;
    Rng rng(11);
    auto p = register_lstm(params, "l", 2, 3, rng);
    Tensor x = rand_param({1, 4, 2}, rng);
    Tensor mask = Tensor::from({1, 4}, {1, 1, 0, 0});
    Tensor fwd = lstm_direction(p, x, mask, false);
    for (long t = 2; t < 4; ++t)
        for (long d = 0; d < 3; ++d)
            CHECK(fwd.values()[std::size_t(t * 3 + d)] == 0.0);
    // The reverse scan passes through the masked tail first; states there are
    // forced to zero, so the real prefix must match a pad-free run.
    Tensor x2 = slice(x, 1, 0, 2);
    Tensor bwd_full = lstm_direction(p, x, mask, true);
    Tensor bwd_trim = lstm_direction(p, x2, ones_mask(1, 2), true);
    for (long t = 0; t < 2; ++t)
        for (long d = 0; d < 3; ++d)
            CHECK(bwd_full.values()[std::size_t(t * 3 + d)] ==
                  Catch::Approx(bwd_trim.values()[std::size_t(t * 3 + d)]).margin(1e-12));
}

TEST_CASE("lstm reverse direction mirrors a reversed input") {
    ModelParams params;
    Rng rng(13);
    auto p = register_lstm(params, "l", 2, 3, rng);
    const long T = 5;
    Tensor x = rand_param({1, T, 2}, rng);
    std::vector<double> rev(x.values().size());
    for (long t = 0; t < T; ++t)
        for (long d = 0; d < 2; ++d)
            rev[std::size_t(t * 2 + d)] = x.values()[std::size_t((T - 1 - t) * 2 + d)];
    Tensor xr = Tensor::from({1, T, 2}, std::move(rev));
    Tensor a = lstm_direction(p, x, ones_mask(1, T), true);
    Tensor b = lstm_direction(p, xr, ones_mask(1, T), false);
    for (long t = 0; t < T; ++t)
        for (long d = 0; d < 3; ++d)
            CHECK(a.values()[std::size_t(t * 3 + d)] ==
                  Catch::Approx(b.values()[std::size_t((T - 1 - t) * 3 + d)]).margin(1e-12));
}

TEST_CASE("bilstm concatenates directions") {
    ModelParams params;
    Rng rng(17);
    auto f = register_lstm(params, "f", 2, 3, rng);
    auto b = register_lstm(params, "b", 2, 3, rng);
    Tensor x = rand_param({2, 4, 2}, rng);
    Tensor mask = ones_mask(2, 4);
    Tensor h = bilstm_encode(f, b, x, mask);
    REQUIRE(h.shape() == Shape{2, 4, 6});
    Tensor hf = lstm_direction(f, x, mask, false);
    Tensor hb = lstm_direction(b, x, mask, true);
    for (long r = 0; r < 8; ++r)
        for (long d = 0; d < 3; ++d) {
            CHECK(h.values()[std::size_t(r * 6 + d)] == hf.values()[std::size_t(r * 3 + d)]);
            CHECK(h.values()[std::size_t(r * 6 + 3 + d)] == hb.values()[std::size_t(r * 3 + d)]);
        }
}

TEST_CASE("lstm gradients match finite differences") {
    ModelParams params;
    Rng rng(19);
    auto p = register_lstm(params, "l", 2, 2, rng);
    Tensor x = rand_param({1, 3, 2}, rng);
    Tensor mask = Tensor::from({1, 3}, {1, 1, 0});
    auto graph = [&] { return mean(lstm_direction(p, x, mask, false)); };
    auto value = [&] { NoGradGuard ng; return graph().item(); };
    std::vector<std::pair<std::string, Tensor>> leaves = {
        {"wx", p.wx}, {"wh", p.wh}, {"b", p.b}, {"x", x}};
    auto res = check_gradients(leaves, value, graph);
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-6);
}

// ---------------------------------------------------------------------------
// transformer block

TEST_CASE("transformer block shapes and dimension checks") {
    ModelParams params;
    Rng rng(23);
    auto p = register_transformer_block(params, "t", 8, 2, 16, rng);
    Tensor x = rand_param({2, 3, 8}, rng);
    Tensor out = transformer_block(p, x, ones_mask(2, 3));
    REQUIRE(out.shape() == Shape{2, 3, 8});
    CHECK_THROWS_AS(transformer_block(p, rand_param({2, 3, 6}, rng), ones_mask(2, 3)),
                    DimensionError);
    CHECK_THROWS_AS(transformer_block(p, x, ones_mask(2, 4)), DimensionError);
    CHECK_THROWS_AS(register_transformer_block(params, "bad", 8, 3, 16, rng),
                    ConfigError);
}

TEST_CASE("transformer output rows are layer-normalized") {
    ModelParams params;
    Rng rng(29);
    auto p = register_transformer_block(params, "t", 8, 2, 16, rng);
    Tensor x = rand_param({1, 4, 8}, rng);
    Tensor out = transformer_block(p, x, ones_mask(1, 4));
    for (long r = 0; r < 4; ++r) {
        double m = 0.0, v = 0.0;
        for (long d = 0; d < 8; ++d) m += out.values()[std::size_t(r * 8 + d)];
        m /= 8.0;
        for (long d = 0; d < 8; ++d) {
            const double c = out.values()[std::size_t(r * 8 + d)] - m;
            v += c * c;
        }
        CHECK(m == Catch::Approx(0.0).margin(1e-9));
        CHECK(v / 8.0 == Catch::Approx(1.0).margin(1e-4));  // variance epsilon
    }
}

TEST_CASE("transformer attention rows sum to one over real tokens") {
    ModelParams params;
    Rng rng(31);
    auto p = register_transformer_block(params, "t", 8, 2, 16, rng);
    Tensor x = rand_param({1, 4, 8}, rng);
    Tensor mask = Tensor::from({1, 4}, {1, 1, 1, 0});
    std::vector<Tensor> atts;
    transformer_block(p, x, mask, &atts);
    REQUIRE(atts.size() == 2);
    for (const auto& att : atts)
        for (long q = 0; q < 4; ++q) {
            double s = 0.0;
            for (long k = 0; k < 4; ++k) s += att.values()[std::size_t(q * 4 + k)];
            CHECK(s == Catch::Approx(1.0).margin(1e-12));
            CHECK(att.values()[std::size_t(q * 4 + 3)] == 0.0);  // masked key
        }
}

TEST_CASE("transformer is invariant to padded positions") {
    ModelParams params;
    Rng rng(37);
    auto p = register_transformer_block(params, "t", 8, 2, 16, rng);
    Tensor x_short = rand_param({1, 3, 8}, rng);
    std::vector<double> padded(x_short.values());
    padded.resize(std::size_t(5 * 8), 0.0);
    Tensor x_long = Tensor::from({1, 5, 8}, std::move(padded));
    Tensor out_short = transformer_block(p, x_short, ones_mask(1, 3));
    Tensor out_long = transformer_block(p, x_long, Tensor::from({1, 5}, {1, 1, 1, 0, 0}));
    for (long i = 0; i < 3 * 8; ++i)
        CHECK(out_long.values()[std::size_t(i)] ==
              Catch::Approx(out_short.values()[std::size_t(i)]).margin(1e-10));
}

TEST_CASE("transformer gradients match finite differences") {
    ModelParams params;
    Rng rng(41);
    auto p = register_transformer_block(params, "t", 4, 2, 8, rng);
    Tensor x = rand_param({1, 3, 4}, rng);
    Tensor mask = Tensor::from({1, 3}, {1, 1, 0});
    auto graph = [&] { return mean(transformer_block(p, x, mask)); };
    auto res = check_gradients(params, graph);
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("position encodings follow the sinusoid table") {
    Tensor x = Tensor::zeros({1, 3, 4});
    Tensor out = add_position_encodings(x);
    auto at = [&](long t, long d) { return out.values()[std::size_t(t * 4 + d)]; };
    CHECK(at(0, 0) == Catch::Approx(0.0).margin(1e-15));
    CHECK(at(0, 1) == Catch::Approx(1.0).margin(1e-15));
    CHECK(at(1, 0) == Catch::Approx(std::sin(1.0)).margin(1e-12));
    CHECK(at(1, 1) == Catch::Approx(std::cos(1.0)).margin(1e-12));
    CHECK(at(2, 2) == Catch::Approx(std::sin(2.0 / 100.0)).margin(1e-12));
    CHECK(at(2, 3) == Catch::Approx(std::cos(2.0 / 100.0)).margin(1e-12));
}

// ---------------------------------------------------------------------------
// attention

TEST_CASE("attention over one position returns that value") {
    ModelParams params;
    Rng rng(43);
    auto p = register_attention(params, "a", 3, 3, 4, AttentionScoring::Additive, rng);
    Tensor kv = rand_param({2, 1, 3}, rng);
    Tensor ctx = attention_context(kv, kv, p, ones_mask(2, 1));
    for (long i = 0; i < 6; ++i)
        CHECK(ctx.values()[std::size_t(i)] ==
              Catch::Approx(kv.values()[std::size_t(i)]).margin(1e-12));
}

TEST_CASE("zero query projection yields the masked mean of values") {
    ModelParams params;
    Rng rng(47);
    auto p = register_attention(params, "a", 3, 3, 4, AttentionScoring::Additive, rng);
    p.wq.values().assign(p.wq.values().size(), 0.0);
    p.wk.values().assign(p.wk.values().size(), 0.0);
    Tensor kv = rand_param({1, 4, 3}, rng);
    Tensor mask = Tensor::from({1, 4}, {1, 1, 1, 0});
    Tensor w;
    Tensor ctx = attention_context(kv, kv, p, mask, &w);
    for (long q = 0; q < 4; ++q) {
        for (long k = 0; k < 3; ++k)
            CHECK(w.values()[std::size_t(q * 4 + k)] == Catch::Approx(1.0 / 3.0).margin(1e-12));
        CHECK(w.values()[std::size_t(q * 4 + 3)] == 0.0);
        for (long d = 0; d < 3; ++d) {
            const double want = (kv.values()[std::size_t(0 * 3 + d)] +
                                 kv.values()[std::size_t(1 * 3 + d)] +
                                 kv.values()[std::size_t(2 * 3 + d)]) / 3.0;
            CHECK(ctx.values()[std::size_t(q * 3 + d)] == Catch::Approx(want).margin(1e-12));
        }
    }
}

TEST_CASE("additive attention matches a hand-rolled T=3 oracle") {
    ModelParams params;
    Rng rng(53);
    auto p = register_attention(params, "a", 2, 2, 3, AttentionScoring::Additive, rng);
    Tensor kv = rand_param({1, 3, 2}, rng);
    Tensor w;
    Tensor ctx = attention_context(kv, kv, p, ones_mask(1, 3), &w);
    const auto& wq = p.wq.values();
    const auto& wk = p.wk.values();
    const auto& v = p.score_v.values();
    auto proj = [&](const std::vector<double>& m, long t, long a) {
        double s = 0.0;
        for (long d = 0; d < 2; ++d)
            s += kv.values()[std::size_t(t * 2 + d)] * m[std::size_t(d * 3 + a)];
        return s;
    };
    for (long q = 0; q < 3; ++q) {
        double scores[3];
        for (long k = 0; k < 3; ++k) {
            double s = 0.0;
            for (long a = 0; a < 3; ++a)
                s += v[std::size_t(a)] * std::tanh(proj(wq, q, a) + proj(wk, k, a));
            scores[k] = s;
        }
        const double mx = std::max({scores[0], scores[1], scores[2]});
        double z = 0.0;
        for (double& s : scores) { s = std::exp(s - mx); z += s; }
        double want[2] = {0.0, 0.0};
        for (long k = 0; k < 3; ++k) {
            const double alpha = scores[k] / z;
            CHECK(w.values()[std::size_t(q * 3 + k)] == Catch::Approx(alpha).margin(1e-12));
            for (long d = 0; d < 2; ++d)
                want[d] += alpha * kv.values()[std::size_t(k * 2 + d)];
        }
        for (long d = 0; d < 2; ++d)
            CHECK(ctx.values()[std::size_t(q * 2 + d)] == Catch::Approx(want[d]).margin(1e-12));
    }
}

TEST_CASE("scaled-dot attention matches manual computation") {
    ModelParams params;
    Rng rng(59);
    auto p = register_attention(params, "a", 2, 2, 3, AttentionScoring::ScaledDot, rng);
    Tensor kv = rand_param({1, 2, 2}, rng);
    Tensor w;
    attention_context(kv, kv, p, ones_mask(1, 2), &w);
    auto proj = [&](const std::vector<double>& m, long t, long a) {
        double s = 0.0;
        for (long d = 0; d < 2; ++d)
            s += kv.values()[std::size_t(t * 2 + d)] * m[std::size_t(d * 3 + a)];
        return s;
    };
    for (long q = 0; q < 2; ++q) {
        double scores[2];
        for (long k = 0; k < 2; ++k) {
            double s = 0.0;
            for (long a = 0; a < 3; ++a)
                s += proj(p.wq.values(), q, a) * proj(p.wk.values(), k, a);
            scores[k] = s / std::sqrt(3.0);
        }
        const double z = std::exp(scores[0]) + std::exp(scores[1]);
        for (long k = 0; k < 2; ++k)
            CHECK(w.values()[std::size_t(q * 2 + k)] ==
                  Catch::Approx(std::exp(scores[k]) / z).epsilon(1e-10));
    }
}

TEST_CASE("attention gradients match finite differences") {
    ModelParams params;
    Rng rng(61);
    auto p = register_attention(params, "a", 2, 2, 3, AttentionScoring::Additive, rng);
    Tensor kv = rand_param({1, 3, 2}, rng);
    Tensor mask = Tensor::from({1, 3}, {1, 1, 0});
    auto graph = [&] { return mean(attention_context(kv, kv, p, mask)); };
    auto value = [&] { NoGradGuard ng; return graph().item(); };
    std::vector<std::pair<std::string, Tensor>> leaves = {
        {"wq", p.wq}, {"wk", p.wk}, {"v", p.score_v}, {"kv", kv}};
    auto res = check_gradients(leaves, value, graph);
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("fully masked attention row is rejected") {
    ModelParams params;
    Rng rng(67);
    auto p = register_attention(params, "a", 2, 2, 3, AttentionScoring::Additive, rng);
    Tensor kv = rand_param({1, 2, 2}, rng);
    CHECK_THROWS_AS(attention_context(kv, kv, p, Tensor::from({1, 2}, {0, 0})),
                    ContractError);
}

// ---------------------------------------------------------------------------
// conv1d

TEST_CASE("width-1 identity kernel reproduces the input") {
    const long C = 3;
    std::vector<double> k(std::size_t(C * C), 0.0);
    for (long i = 0; i < C; ++i) k[std::size_t(i * C + i)] = 1.0;
    Tensor kernel = Tensor::param({1, C, C}, std::move(k));
    Tensor bias = Tensor::param({C}, std::vector<double>(std::size_t(C), 0.0));
    Rng rng(71);
    Tensor x = rand_param({2, 4, C}, rng);
    Tensor y = conv1d_same(x, kernel, bias);
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.values().size(); ++i)
        CHECK(y.values()[i] == Catch::Approx(x.values()[i]).margin(1e-12));
}

TEST_CASE("width-3 conv on T=1 sees only the center tap") {
    Rng rng(73);
    Tensor kernel = rand_param({3, 2, 2}, rng);
    Tensor bias = rand_param({2}, rng);
    Tensor x = rand_param({1, 1, 2}, rng);
    Tensor y = conv1d_same(x, kernel, bias);
    for (long o = 0; o < 2; ++o) {
        double want = bias.values()[std::size_t(o)];
        for (long c = 0; c < 2; ++c)
            want += x.values()[std::size_t(c)] *
                    kernel.values()[std::size_t((1 * 2 + c) * 2 + o)];
        CHECK(y.values()[std::size_t(o)] == Catch::Approx(want).margin(1e-12));
    }
}

TEST_CASE("conv matches a brute-force sliding window") {
    Rng rng(79);
    const long B = 2, T = 5, Cin = 3, Cout = 2, W = 3, pad = 1;
    Tensor kernel = rand_param({W, Cin, Cout}, rng);
    Tensor bias = rand_param({Cout}, rng);
    Tensor x = rand_param({B, T, Cin}, rng);
    Tensor y = conv1d_same(x, kernel, bias);
    for (long b = 0; b < B; ++b)
        for (long t = 0; t < T; ++t)
            for (long o = 0; o < Cout; ++o) {
                double want = bias.values()[std::size_t(o)];
                for (long w = 0; w < W; ++w) {
                    const long src = t + w - pad;
                    if (src < 0 || src >= T) continue;
                    for (long c = 0; c < Cin; ++c)
                        want += x.values()[std::size_t((b * T + src) * Cin + c)] *
                                kernel.values()[std::size_t((w * Cin + c) * Cout + o)];
                }
                CHECK(y.values()[std::size_t((b * T + t) * Cout + o)] ==
                      Catch::Approx(want).margin(1e-10));
            }
}

TEST_CASE("even conv widths are rejected") {
    Tensor kernel = Tensor::param({2, 2, 2}, std::vector<double>(8, 0.0));
    Tensor bias = Tensor::param({2}, std::vector<double>(2, 0.0));
    Tensor x = Tensor::zeros({1, 3, 2});
    CHECK_THROWS_AS(conv1d_same(x, kernel, bias), ConfigError);
}

TEST_CASE("conv gradients match finite differences") {
    Rng rng(83);
    Tensor kernel = rand_param({3, 2, 2}, rng);
    Tensor bias = rand_param({2}, rng);
    Tensor x = rand_param({1, 4, 2}, rng);
    auto graph = [&] { return mean(conv1d_same(x, kernel, bias)); };
    auto value = [&] { NoGradGuard ng; return graph().item(); };
    std::vector<std::pair<std::string, Tensor>> leaves = {
        {"kernel", kernel}, {"bias", bias}, {"x", x}};
    auto res = check_gradients(leaves, value, graph);
    INFO(res.worst);
    CHECK(res.max_rel_err < 1e-6);
}

// ---------------------------------------------------------------------------
// dropout

TEST_CASE("dropout is identity in eval mode and at rate zero") {
    Rng rng(89);
    Tensor x = rand_param({3, 4}, rng);
    Tensor a = dropout_apply(x, 0.5, false, rng);
    Tensor b = dropout_apply(x, 0.0, true, rng);
    CHECK(a.values() == x.values());
    CHECK(b.values() == x.values());
    CHECK_THROWS_AS(dropout_apply(x, 1.0, true, rng), ConfigError);
    CHECK_THROWS_AS(dropout_apply(x, -0.1, true, rng), ConfigError);
}

TEST_CASE("inverted dropout preserves the mean") {
    Rng rng(97);
    Tensor x = Tensor::full({100, 100}, 1.0);
    Tensor y = dropout_apply(x, 0.3, true, rng);
    double mean_val = 0.0;
    long kept = 0;
    for (double v : y.values()) {
        mean_val += v;
        if (v != 0.0) {
            kept += 1;
            CHECK(v == Catch::Approx(1.0 / 0.7).margin(1e-12));
        }
    }
    mean_val /= double(y.size());
    CHECK(mean_val == Catch::Approx(1.0).margin(0.02));
    CHECK(double(kept) / double(y.size()) == Catch::Approx(0.7).margin(0.02));
}
