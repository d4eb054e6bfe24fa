#pragma once

#include "piattn/attention.hpp"
#include "piattn/block.hpp"
#include "piattn/model.hpp"

namespace piattn::testing {

inline AttentionConfig small_config(std::size_t d_model, std::size_t heads, std::size_t k, std::size_t pi,
                                    bool causal) {
    AttentionConfig c;
    c.d_model = d_model;
    c.n_heads = heads;
    c.ring_k = k;
    c.skip_period = pi;
    c.causal = causal;
    c.bidirectional_skip = !causal;
    return c;
}

// Random parameters with a non-trivial gate (the production init zeroes the
// gate output layer, which would pin alpha at 0.5).
inline AttentionParams random_attention(const AttentionConfig& c, Rng& rng, double scale = 0.5) {
    AttentionParams p = AttentionParams::zeros(c);
    p.visit([&](const std::string&, Matrix& m) {
        for (double& v : m.values()) v = scale * rng.normal();
    });
    return p;
}

inline BlockParams random_block(const AttentionConfig& c, std::size_t d_ff, Rng& rng, double scale = 0.4) {
    BlockParams b = BlockParams::zeros(c, d_ff);
    b.visit([&](const std::string& name, Matrix& m) {
        const bool gain = name == "ln1_g" || name == "ln2_g";
        for (double& v : m.values()) v = (gain ? 1.0 : 0.0) + scale * rng.normal();
    });
    return b;
}

inline ModelConfig small_model(std::size_t layers, std::size_t k, std::size_t pi, std::size_t vocab = 11) {
    ModelConfig m;
    m.layers = layers;
    m.d_ff = 24;
    m.vocab = vocab;
    m.max_seq = 64;
    m.attention = small_config(8, 2, k, pi, true);
    return m;
}

// init_model plus a random gate output layer so alpha varies per token.
inline ModelParams random_model(const ModelConfig& m, Rng& rng) {
    ModelParams p = init_model(m, rng);
    for (auto& b : p.blocks) {
        for (double& v : b.attn.gate.w2.values()) v = rng.normal();
        for (double& v : b.attn.gate.b2.values()) v = 0.5 * rng.normal();
        for (double& v : b.attn.proj.bq.values()) v = 0.1 * rng.normal();
    }
    for (double& v : p.head_b.values()) v = 0.1 * rng.normal();
    return p;
}

template <typename P>
P add_scaled(const P& a, const P& b, double s) {
    P out = a;
    auto fa = flatten(a);
    const auto fb = flatten(b);
    for (std::size_t i = 0; i < fa.size(); ++i) fa[i] += s * fb[i];
    unflatten(out, fa);
    return out;
}

}  // namespace piattn::testing
