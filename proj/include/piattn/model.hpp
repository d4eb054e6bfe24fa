#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "piattn/block.hpp"
#include "piattn/config.hpp"

namespace piattn {

struct ModelParams {
    Matrix embed;  // vocab x d_model
    std::vector<BlockParams> blocks;
    Matrix lnf_g, lnf_b;
    Matrix head_w;  // d_model x vocab
    Matrix head_b;

    static ModelParams zeros(const ModelConfig& config);

    template <typename F>
    void visit(F&& f) { visit_impl(*this, f); }
    template <typename F>
    void visit(F&& f) const { visit_impl(*this, f); }

private:
    template <typename Self, typename F>
    static void visit_impl(Self& s, F& f) {
        f("embed", s.embed);
        for (std::size_t l = 0; l < s.blocks.size(); ++l) {
            const std::string prefix = "blocks." + std::to_string(l) + ".";
            s.blocks[l].visit([&](const std::string& name, auto& m) { f(prefix + name, m); });
        }
        f("lnf_g", s.lnf_g);
        f("lnf_b", s.lnf_b);
        f("head_w", s.head_w);
        f("head_b", s.head_b);
    }
};

// Glorot-uniform projections, zero biases, zero gate output layer (alpha
// starts at exactly 0.5), unit layer-norm gains, N(0,1) embeddings.
ModelParams init_model(const ModelConfig& config, Rng& rng);
BlockParams init_block(const AttentionConfig& config, std::size_t d_ff, Rng& rng);

struct ModelCache {
    std::vector<std::size_t> tokens;
    std::vector<BlockCache> blocks;
    LayerNormCache lnf;
    Matrix final_normed;
};

struct ModelForward {
    Matrix logits;  // n x vocab
    ModelCache cache;
    WorkCounters work;
};

ModelForward model_forward(const ModelParams& params, const ModelConfig& config,
                           std::span<const std::size_t> tokens, const ForwardOptions& options = {});

ModelParams model_backward(const ModelParams& params, const ModelConfig& config, const ModelCache& cache,
                           const Matrix& dlogits);

// Generic helpers over anything exposing visit(name, Matrix&).
template <typename P>
std::size_t param_count(const P& p) {
    std::size_t n = 0;
    p.visit([&](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
}

template <typename P>
std::vector<double> flatten(const P& p) {
    std::vector<double> out;
    p.visit([&](const std::string&, const Matrix& m) { out.insert(out.end(), m.values().begin(), m.values().end()); });
    return out;
}

template <typename P>
void unflatten(P& p, std::span<const double> values) {
    std::size_t at = 0;
    p.visit([&](const std::string&, Matrix& m) {
        if (at + m.size() > values.size()) throw ShapeError("unflatten: too few values");
        std::copy(values.begin() + static_cast<long>(at), values.begin() + static_cast<long>(at + m.size()),
                  m.values().begin());
        at += m.size();
    });
    if (at != values.size()) throw ShapeError("unflatten: too many values");
}

struct Checkpoint {
    RunConfig config;
    ModelParams params;
    nlohmann::json extra;  // task metadata such as the char_lm alphabet
};

// Binary layout: 8-byte magic "PIATTNC1", uint64 little-endian header length,
// UTF-8 JSON header {format, config, tensors:[{name,rows,cols}], extra}, then
// every tensor as raw little-endian IEEE-754 doubles in header order.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace piattn
