#pragma once

#include "piattn/attention.hpp"

namespace piattn {

// Pre-norm residual block:
//   y   = x + Attn(LN1(x))
//   out = y + W2 GELU(W1 LN2(y) + b1) + b2
struct BlockParams {
    AttentionParams attn;
    Matrix ln1_g, ln1_b;
    Matrix ln2_g, ln2_b;
    Matrix ff_w1, ff_b1;  // d_model x d_ff, 1 x d_ff
    Matrix ff_w2, ff_b2;  // d_ff x d_model, 1 x d_model

    // Zero weights, unit layer-norm gains.
    static BlockParams zeros(const AttentionConfig& config, std::size_t d_ff);

    template <typename F>
    void visit(F&& f) { visit_impl(*this, f); }
    template <typename F>
    void visit(F&& f) const { visit_impl(*this, f); }

private:
    template <typename Self, typename F>
    static void visit_impl(Self& s, F& f) {
        s.attn.visit([&](const std::string& name, auto& m) { f("attn." + name, m); });
        f("ln1_g", s.ln1_g);
        f("ln1_b", s.ln1_b);
        f("ln2_g", s.ln2_g);
        f("ln2_b", s.ln2_b);
        f("ff_w1", s.ff_w1);
        f("ff_b1", s.ff_b1);
        f("ff_w2", s.ff_w2);
        f("ff_b2", s.ff_b2);
    }
};

struct LayerNormCache {
    Matrix xhat;
    std::vector<double> rstd;
};

Matrix layer_norm_forward(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache* cache = nullptr);
// Returns dx and accumulates into dgain / dbias.
Matrix layer_norm_backward(const LayerNormCache& cache, const Matrix& gain, const Matrix& dy, Matrix& dgain,
                           Matrix& dbias);

struct BlockCache {
    LayerNormCache ln1;
    AttentionCache attn;
    LayerNormCache ln2;
    Matrix ln2_out;
    Matrix ff_pre;
    Matrix ff_act;
};

struct BlockResult {
    Matrix out;
    BlockCache cache;
    WorkCounters work;
};

BlockResult block_forward(const Matrix& x, const BlockParams& params, const UnionNeighborhood& u,
                          const AttentionConfig& config, const ForwardOptions& options = {});

struct BlockGrads {
    Matrix x;
    BlockParams params;
};

BlockGrads block_backward(const BlockParams& params, const BlockCache& cache, const Matrix& dout,
                          const AttentionConfig& config);

// Position-wise feed-forward on already-normalized rows; used by the decoder.
Matrix feed_forward(const Matrix& x, const BlockParams& params, Matrix* pre = nullptr, Matrix* act = nullptr);

}  // namespace piattn
