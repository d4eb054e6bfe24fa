#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "piattn/config.hpp"
#include "piattn/gate.hpp"
#include "piattn/neighborhood.hpp"
#include "piattn/numerics.hpp"

namespace piattn {

// y = x W + b for each projection; all square in d_model. Keys carry no bias:
// q . b_k is the same for every slot of a row, so the softmax cancels it.
struct ProjectionParams {
    Matrix wq, wk, wv, wo;
    Matrix bq, bv, bo;  // 1 x d_model

    static ProjectionParams zeros(const AttentionConfig& config);

    template <typename F>
    void visit(F&& f) { visit_impl(*this, f); }
    template <typename F>
    void visit(F&& f) const { visit_impl(*this, f); }

private:
    template <typename Self, typename F>
    static void visit_impl(Self& s, F& f) {
        f("wq", s.wq);
        f("wk", s.wk);
        f("wv", s.wv);
        f("wo", s.wo);
        f("bq", s.bq);
        f("bv", s.bv);
        f("bo", s.bo);
    }
};

struct AttentionParams {
    ProjectionParams proj;
    GateParams gate;

    static AttentionParams zeros(const AttentionConfig& config);

    template <typename F>
    void visit(F&& f) { visit_impl(*this, f); }
    template <typename F>
    void visit(F&& f) const { visit_impl(*this, f); }

private:
    template <typename Self, typename F>
    static void visit_impl(Self& s, F& f) {
        s.proj.visit([&](const std::string& name, auto& m) { f("proj." + name, m); });
        s.gate.visit([&](const std::string& name, auto& m) { f("gate." + name, m); });
    }
};

struct WorkCounters {
    std::size_t score_evals = 0;    // one per (query token, valid neighbor)
    std::size_t multiply_adds = 0;  // score dot products plus value aggregation
    // Neighborhood-dependent saved state: per-slot probabilities and gate values.
    std::size_t stored_activation_elements = 0;
    // Dense per-token activations (inputs, projections, gate trunk) kept for
    // the backward pass; these exist for any attention variant.
    std::size_t projection_activation_elements = 0;

    WorkCounters& operator+=(const WorkCounters& o);
};

// Probabilities over valid slots, layout [slot * H + h] in CompactUnion order.
struct AttnWeights {
    CompactUnion slots;
    std::size_t heads = 0;
    std::vector<double> p;

    double prob(std::size_t slot, std::size_t head) const { return p[slot * heads + head]; }
};

struct AttentionCache {
    Matrix x;
    Matrix q, k, v;
    Matrix concat;  // per-head outputs before the output projection
    GateOutput gate;
    AttnWeights weights;
    std::vector<double> dropout_scale;  // empty when dropout is inactive
};

struct AttentionResult {
    Matrix out;
    AttentionCache cache;
    WorkCounters work;
};

struct ForwardOptions {
    bool training = false;
    Rng* rng = nullptr;  // required when training with dropout_p > 0
};

// Stabilized fused logit for one (query, neighbor, head).
double fused_logit(double score, NeighborKind kind, double alpha, bool log_prior, const AttentionConfig& config);

struct RowSlot {
    NeighborKind kind;
    std::span<const double> key;    // full d_model row
    std::span<const double> value;  // full d_model row
};

// Single-softmax union attention for one query row across all heads. Writes
// the concatenated head outputs to out_row and per-slot probabilities to
// probs ([slot * H + h]). drop_scale, when non-empty, multiplies each
// probability before value aggregation.
void attend_row(std::span<const double> q, std::span<const RowSlot> slots, std::span<const double> alpha,
                bool log_prior, const AttentionConfig& config, std::span<double> out_row, std::span<double> probs,
                std::span<const double> drop_scale = {}, WorkCounters* work = nullptr);

AttentionResult pi_attention_forward(const Matrix& x, const AttentionParams& params, const UnionNeighborhood& u,
                                     const AttentionConfig& config, const ForwardOptions& options = {});

struct AttentionGrads {
    Matrix x;
    AttentionParams params;
};

AttentionGrads pi_attention_backward(const AttentionParams& params, const AttentionCache& cache,
                                     const Matrix& dout, const AttentionConfig& config);

// Full n x n x H evaluation with an additive bias matrix (log-prior on allowed
// pairs, excluded elsewhere). Independent of the slot-gather path.
Matrix dense_oracle(const Matrix& x, const AttentionParams& params, const UnionNeighborhood& u,
                    const AttentionConfig& config);

// KL(P_stabilized || P_ideal) for one (token, head): ideal uses the raw alpha
// and unclamped scores, stabilized uses the eps-clipped alpha and the clamp.
double stabilization_kl(std::span<const double> scores, std::span<const NeighborKind> kinds, double alpha_raw,
                        double eps, bool log_prior, const AttentionConfig& config);

struct KlSummary {
    double eps = 0.0;
    double max_kl = 0.0;
    double mean_kl = 0.0;
    std::vector<double> per_token;  // mean over heads
};

std::vector<KlSummary> kl_stabilization(const Matrix& x, const AttentionParams& params, const UnionNeighborhood& u,
                                        const AttentionConfig& config, std::span<const double> eps_list);

}  // namespace piattn
