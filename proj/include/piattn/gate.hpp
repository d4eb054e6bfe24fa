#pragma once

#include "piattn/config.hpp"
#include "piattn/numerics.hpp"

namespace piattn {

// Shared two-layer trunk d_model -> d_model/2 -> H with one sigmoid per head.
struct GateParams {
    Matrix w1;  // d_model x hidden
    Matrix b1;  // 1 x hidden
    Matrix w2;  // hidden x H
    Matrix b2;  // 1 x H

    static GateParams zeros(const AttentionConfig& config);

    template <typename F>
    void visit(F&& f) { visit_impl(*this, f); }
    template <typename F>
    void visit(F&& f) const { visit_impl(*this, f); }

private:
    template <typename Self, typename F>
    static void visit_impl(Self& s, F& f) {
        f("w1", s.w1);
        f("b1", s.b1);
        f("w2", s.w2);
        f("b2", s.b2);
    }
};

struct GateOutput {
    Matrix alpha_raw;  // n x H, sigmoid output before clipping
    Matrix alpha;      // n x H, stabilized value used as the prior
    // false under the no_gate ablation: the attention adds no log-prior at all.
    bool log_prior = true;
    // Saved for the backward pass.
    Matrix input;
    Matrix pre_hidden;
    Matrix hidden;
};

GateOutput gate_forward(const GateParams& params, const Matrix& input, const AttentionConfig& config);

struct GateGrads {
    GateParams params;
    Matrix input;
};

// dalpha is dLoss/d(stabilized alpha), n x H.
GateGrads gate_backward(const GateParams& params, const GateOutput& forward, const Matrix& dalpha,
                        const AttentionConfig& config);

// Affine clip into [eps, 1 - eps].
inline double stabilize_alpha(double alpha, double eps) { return alpha * (1.0 - 2.0 * eps) + eps; }

}  // namespace piattn
