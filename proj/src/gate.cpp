#include "piattn/gate.hpp"

namespace piattn {

GateParams GateParams::zeros(const AttentionConfig& config) {
    const std::size_t hidden = config.gate_hidden();
    return GateParams{Matrix(config.d_model, hidden), Matrix(1, hidden), Matrix(hidden, config.n_heads),
                      Matrix(1, config.n_heads)};
}

namespace {

bool gate_is_learned(const AttentionConfig& config) {
    return config.ablation != Ablation::no_gate && config.ablation != Ablation::static_alpha;
}

}  // namespace

GateOutput gate_forward(const GateParams& params, const Matrix& input, const AttentionConfig& config) {
    if (input.cols() != config.d_model) {
        throw ShapeError("gate_forward: input width " + std::to_string(input.cols()) + " != d_model " +
                         std::to_string(config.d_model));
    }
    if (!input.all_finite()) throw NumericError("gate_forward: non-finite input");
    const std::size_t n = input.rows();
    const std::size_t heads = config.n_heads;
    GateOutput out;
    out.input = input;

    if (config.ablation == Ablation::static_alpha) {
        out.alpha_raw = Matrix(n, heads, config.static_alpha);
        out.alpha = out.alpha_raw;
        return out;
    }
    if (config.ablation == Ablation::no_gate) {
        out.alpha_raw = Matrix(n, heads, 0.5);
        out.alpha = out.alpha_raw;
        out.log_prior = false;
        return out;
    }

    out.pre_hidden = matmul(input, params.w1);
    add_row_bias(out.pre_hidden, params.b1);
    out.hidden = out.pre_hidden;
    for (double& v : out.hidden.values()) v = gelu(v);
    Matrix logits = matmul(out.hidden, params.w2);
    add_row_bias(logits, params.b2);
    out.alpha_raw = Matrix(n, heads);
    out.alpha = Matrix(n, heads);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double a = sigmoid(logits.values()[i]);
        out.alpha_raw.values()[i] = a;
        out.alpha.values()[i] = stabilize_alpha(a, config.eps);
    }
    return out;
}

GateGrads gate_backward(const GateParams& params, const GateOutput& forward, const Matrix& dalpha,
                        const AttentionConfig& config) {
    GateGrads g{GateParams::zeros(config), Matrix(forward.input.rows(), forward.input.cols())};
    if (!gate_is_learned(config)) return g;
    if (dalpha.rows() != forward.alpha.rows() || dalpha.cols() != forward.alpha.cols()) {
        throw ShapeError("gate_backward: upstream " + dalpha.shape_str() + " vs alpha " + forward.alpha.shape_str());
    }
    // Through the clip (constant factor) and the sigmoid.
    Matrix dlogits(dalpha.rows(), dalpha.cols());
    const double clip = 1.0 - 2.0 * config.eps;
    for (std::size_t i = 0; i < dlogits.size(); ++i) {
        const double a = forward.alpha_raw.values()[i];
        dlogits.values()[i] = dalpha.values()[i] * clip * a * (1.0 - a);
    }
    g.params.w2 = matmul_tn(forward.hidden, dlogits);
    g.params.b2 = column_sums(dlogits);
    Matrix dpre = matmul_nt(dlogits, params.w2);
    for (std::size_t i = 0; i < dpre.size(); ++i) dpre.values()[i] *= gelu_grad(forward.pre_hidden.values()[i]);
    g.params.w1 = matmul_tn(forward.input, dpre);
    g.params.b1 = column_sums(dpre);
    g.input = matmul_nt(dpre, params.w1);
    return g;
}

}  // namespace piattn
