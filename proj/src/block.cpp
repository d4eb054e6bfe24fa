#include "piattn/block.hpp"

namespace piattn {

BlockParams BlockParams::zeros(const AttentionConfig& config, std::size_t d_ff) {
    const std::size_t d = config.d_model;
    return BlockParams{AttentionParams::zeros(config),
                       Matrix(1, d, 1.0),
                       Matrix(1, d),
                       Matrix(1, d, 1.0),
                       Matrix(1, d),
                       Matrix(d, d_ff),
                       Matrix(1, d_ff),
                       Matrix(d_ff, d),
                       Matrix(1, d)};
}

Matrix layer_norm_forward(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache* cache) {
    Matrix out(x.rows(), x.cols());
    if (cache) {
        cache->xhat = Matrix(x.rows(), x.cols());
        cache->rstd.assign(x.rows(), 0.0);
    }
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const LayerNormRow r = layer_norm(x.row(i), gain.row(0), bias.row(0));
        std::copy(r.out.begin(), r.out.end(), out.row(i).begin());
        if (cache) {
            std::copy(r.xhat.begin(), r.xhat.end(), cache->xhat.row(i).begin());
            cache->rstd[i] = r.rstd;
        }
    }
    return out;
}

Matrix layer_norm_backward(const LayerNormCache& cache, const Matrix& gain, const Matrix& dy, Matrix& dgain,
                           Matrix& dbias) {
    const std::size_t d = dy.cols();
    Matrix dx(dy.rows(), d);
    std::vector<double> dxhat(d);
    for (std::size_t i = 0; i < dy.rows(); ++i) {
        const auto xh = cache.xhat.row(i);
        const auto g = dy.row(i);
        double mean_dxhat = 0.0;
        double mean_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dgain(0, j) += g[j] * xh[j];
            dbias(0, j) += g[j];
            dxhat[j] = g[j] * gain(0, j);
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        auto out = dx.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            out[j] = cache.rstd[i] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    return dx;
}

Matrix feed_forward(const Matrix& x, const BlockParams& params, Matrix* pre, Matrix* act) {
    Matrix h = matmul(x, params.ff_w1);
    add_row_bias(h, params.ff_b1);
    if (pre) *pre = h;
    for (double& v : h.values()) v = gelu(v);
    Matrix out = matmul(h, params.ff_w2);
    add_row_bias(out, params.ff_b2);
    if (act) *act = std::move(h);
    return out;
}

BlockResult block_forward(const Matrix& x, const BlockParams& params, const UnionNeighborhood& u,
                          const AttentionConfig& config, const ForwardOptions& options) {
    if (x.cols() != config.d_model) {
        throw ShapeError("block_forward: input " + x.shape_str() + " for d_model " + std::to_string(config.d_model));
    }
    BlockResult r;
    BlockCache& c = r.cache;
    const Matrix normed = layer_norm_forward(x, params.ln1_g, params.ln1_b, &c.ln1);
    AttentionResult attn = pi_attention_forward(normed, params.attn, u, config, options);
    c.attn = std::move(attn.cache);
    r.work = attn.work;
    Matrix y = x + attn.out;
    c.ln2_out = layer_norm_forward(y, params.ln2_g, params.ln2_b, &c.ln2);
    r.out = y + feed_forward(c.ln2_out, params, &c.ff_pre, &c.ff_act);
    return r;
}

BlockGrads block_backward(const BlockParams& params, const BlockCache& c, const Matrix& dout,
                          const AttentionConfig& config) {
    BlockGrads g{Matrix(), BlockParams::zeros(config, params.ff_w1.cols())};
    g.params.ln1_g.fill(0.0);
    g.params.ln2_g.fill(0.0);

    // FFN branch.
    g.params.ff_w2 = matmul_tn(c.ff_act, dout);
    g.params.ff_b2 = column_sums(dout);
    Matrix dact = matmul_nt(dout, params.ff_w2);
    for (std::size_t i = 0; i < dact.size(); ++i) dact.values()[i] *= gelu_grad(c.ff_pre.values()[i]);
    g.params.ff_w1 = matmul_tn(c.ln2_out, dact);
    g.params.ff_b1 = column_sums(dact);
    const Matrix dln2 = matmul_nt(dact, params.ff_w1);
    Matrix dy = dout + layer_norm_backward(c.ln2, params.ln2_g, dln2, g.params.ln2_g, g.params.ln2_b);

    // Attention branch.
    AttentionGrads ag = pi_attention_backward(params.attn, c.attn, dy, config);
    g.params.attn = std::move(ag.params);
    g.x = dy + layer_norm_backward(c.ln1, params.ln1_g, ag.x, g.params.ln1_g, g.params.ln1_b);
    return g;
}

}  // namespace piattn
