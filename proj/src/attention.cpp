#include "piattn/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace piattn {

ProjectionParams ProjectionParams::zeros(const AttentionConfig& config) {
    const std::size_t d = config.d_model;
    return ProjectionParams{Matrix(d, d), Matrix(d, d), Matrix(d, d), Matrix(d, d),
                            Matrix(1, d), Matrix(1, d), Matrix(1, d)};
}

AttentionParams AttentionParams::zeros(const AttentionConfig& config) {
    return AttentionParams{ProjectionParams::zeros(config), GateParams::zeros(config)};
}

WorkCounters& WorkCounters::operator+=(const WorkCounters& o) {
    score_evals += o.score_evals;
    multiply_adds += o.multiply_adds;
    stored_activation_elements += o.stored_activation_elements;
    projection_activation_elements += o.projection_activation_elements;
    return *this;
}

double fused_logit(double score, NeighborKind kind, double alpha, bool log_prior, const AttentionConfig& config) {
    const double prior = !log_prior ? 0.0 : (kind == NeighborKind::ring ? std::log(alpha) : std::log1p(-alpha));
    const double lc = config.logit_clamp;
    if (config.clamp_mode == ClampMode::raw_score) return std::clamp(score, -lc, lc) + prior;
    return std::clamp(score + prior, -lc, lc);
}

void attend_row(std::span<const double> q, std::span<const RowSlot> slots, std::span<const double> alpha,
                bool log_prior, const AttentionConfig& config, std::span<double> out_row, std::span<double> probs,
                std::span<const double> drop_scale, WorkCounters* work) {
    const std::size_t d = config.d_model;
    const std::size_t heads = config.n_heads;
    const std::size_t dh = config.head_dim();
    const std::size_t m = slots.size();
    if (m == 0) throw EmptyNeighborhoodError("empty neighborhood");
    if (q.size() != d || out_row.size() != d || alpha.size() != heads || probs.size() != m * heads) {
        throw ShapeError("attend_row: inconsistent row shapes");
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::fill(out_row.begin(), out_row.end(), 0.0);
    std::vector<double> logits(m);
    for (std::size_t h = 0; h < heads; ++h) {
        const auto qh = q.subspan(h * dh, dh);
        for (std::size_t j = 0; j < m; ++j) {
            const double s = dot(qh, slots[j].key.subspan(h * dh, dh)) * scale;
            logits[j] = fused_logit(s, slots[j].kind, alpha[h], log_prior, config);
        }
        const std::vector<double> p = softmax_row(logits);
        auto out_h = out_row.subspan(h * dh, dh);
        for (std::size_t j = 0; j < m; ++j) {
            probs[j * heads + h] = p[j];
            const double w = drop_scale.empty() ? p[j] : p[j] * drop_scale[j * heads + h];
            const auto vh = slots[j].value.subspan(h * dh, dh);
            for (std::size_t c = 0; c < dh; ++c) out_h[c] += w * vh[c];
        }
    }
    if (work) {
        work->score_evals += m;
        work->multiply_adds += 2 * m * d;
    }
}

namespace {

Matrix project(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix y = matmul(x, w);
    add_row_bias(y, b);
    return y;
}

void check_inputs(const Matrix& x, const UnionNeighborhood& u, const AttentionConfig& config) {
    if (x.cols() != config.d_model) {
        throw ShapeError("attention: input width " + std::to_string(x.cols()) + " != d_model " +
                         std::to_string(config.d_model));
    }
    if (u.n != x.rows()) {
        throw ShapeError("attention: union built for n=" + std::to_string(u.n) + " but input has " +
                         std::to_string(x.rows()) + " rows");
    }
}

}  // namespace

AttentionResult pi_attention_forward(const Matrix& x, const AttentionParams& params, const UnionNeighborhood& u,
                                     const AttentionConfig& config, const ForwardOptions& options) {
    check_inputs(x, u, config);
    const std::size_t n = x.rows();
    const std::size_t d = config.d_model;
    const std::size_t heads = config.n_heads;

    AttentionResult r;
    AttentionCache& c = r.cache;
    c.x = x;
    c.q = project(x, params.proj.wq, params.proj.bq);
    c.k = matmul(x, params.proj.wk);
    c.v = project(x, params.proj.wv, params.proj.bv);
    c.gate = gate_forward(params.gate, config.gate_input == GateInput::token ? x : c.q, config);
    c.weights.slots = compact(u);
    c.weights.heads = heads;
    const CompactUnion& slots = c.weights.slots;
    c.weights.p.assign(slots.slots() * heads, 0.0);

    const bool dropout = options.training && config.dropout_p > 0.0;
    if (dropout) {
        if (!options.rng) throw std::invalid_argument("pi_attention_forward: dropout requires an Rng");
        const double keep = 1.0 - config.dropout_p;
        c.dropout_scale.resize(c.weights.p.size());
        for (double& s : c.dropout_scale) s = options.rng->bernoulli(keep) ? 1.0 / keep : 0.0;
    }

    c.concat = Matrix(n, d);
    std::vector<RowSlot> row;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t begin = slots.row_ptr[i];
        const std::size_t end = slots.row_ptr[i + 1];
        if (begin == end) throw EmptyNeighborhoodError("empty neighborhood at token " + std::to_string(i));
        row.clear();
        for (std::size_t s = begin; s < end; ++s) {
            row.push_back({slots.kind[s], c.k.row(slots.target[s]), c.v.row(slots.target[s])});
        }
        const std::span<double> probs(c.weights.p.data() + begin * heads, (end - begin) * heads);
        const std::span<const double> drop =
            dropout ? std::span<const double>(c.dropout_scale.data() + begin * heads, (end - begin) * heads)
                    : std::span<const double>();
        attend_row(c.q.row(i), row, c.gate.alpha.row(i), c.gate.log_prior, config, c.concat.row(i), probs, drop,
                   &r.work);
    }
    r.out = project(c.concat, params.proj.wo, params.proj.bo);

    r.work.multiply_adds += 4 * n * d * d;
    r.work.stored_activation_elements = c.weights.p.size() + c.gate.alpha.size() + c.dropout_scale.size();
    r.work.projection_activation_elements = c.x.size() + c.q.size() + c.k.size() + c.v.size() + c.concat.size() +
                                            c.gate.pre_hidden.size() + c.gate.hidden.size();
    return r;
}

AttentionGrads pi_attention_backward(const AttentionParams& params, const AttentionCache& c, const Matrix& dout,
                                     const AttentionConfig& config) {
    const std::size_t n = c.x.rows();
    const std::size_t d = config.d_model;
    const std::size_t heads = config.n_heads;
    const std::size_t dh = config.head_dim();
    if (dout.rows() != n || dout.cols() != d) {
        throw ShapeError("pi_attention_backward: upstream " + dout.shape_str() + " for output " +
                         std::to_string(n) + "x" + std::to_string(d));
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const double lc = config.logit_clamp;
    const CompactUnion& slots = c.weights.slots;
    const bool dropout = !c.dropout_scale.empty();

    AttentionGrads g{Matrix(n, d), AttentionParams::zeros(config)};
    g.params.proj.wo = matmul_tn(c.concat, dout);
    g.params.proj.bo = column_sums(dout);
    const Matrix dconcat = matmul_nt(dout, params.proj.wo);

    Matrix dq(n, d), dk(n, d), dv(n, d), dalpha(n, heads);
    std::vector<double> dp;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t begin = slots.row_ptr[i];
        const std::size_t m = slots.row_ptr[i + 1] - begin;
        dp.assign(m, 0.0);
        for (std::size_t h = 0; h < heads; ++h) {
            const auto da = dconcat.row(i).subspan(h * dh, dh);
            const auto qh = c.q.row(i).subspan(h * dh, dh);
            const double alpha = c.gate.alpha(i, h);
            double weighted = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                const std::size_t s = begin + j;
                const double keep = dropout ? c.dropout_scale[s * heads + h] : 1.0;
                dp[j] = keep * dot(da, c.v.row(slots.target[s]).subspan(h * dh, dh));
                weighted += c.weights.prob(s, h) * dp[j];
            }
            auto dqh = dq.row(i).subspan(h * dh, dh);
            for (std::size_t j = 0; j < m; ++j) {
                const std::size_t s = begin + j;
                const std::size_t t = slots.target[s];
                const NeighborKind kind = slots.kind[s];
                const double p = c.weights.prob(s, h);
                const double keep = dropout ? c.dropout_scale[s * heads + h] : 1.0;
                const double dlogit = p * (dp[j] - weighted);
                const auto kh = c.k.row(t).subspan(h * dh, dh);
                const double score = dot(qh, kh) * scale;

                double dscore = 0.0;
                double dprior = 0.0;
                if (config.clamp_mode == ClampMode::raw_score) {
                    dscore = (score >= -lc && score <= lc) ? dlogit : 0.0;
                    dprior = dlogit;
                } else {
                    const double prior = !c.gate.log_prior
                                             ? 0.0
                                             : (kind == NeighborKind::ring ? std::log(alpha) : std::log1p(-alpha));
                    const double sum = score + prior;
                    dscore = (sum >= -lc && sum <= lc) ? dlogit : 0.0;
                    dprior = dscore;
                }
                if (c.gate.log_prior) {
                    dalpha(i, h) += kind == NeighborKind::ring ? dprior / alpha : -dprior / (1.0 - alpha);
                }
                auto dkh = dk.row(t).subspan(h * dh, dh);
                auto dvh = dv.row(t).subspan(h * dh, dh);
                const auto vh_weight = p * keep;
                for (std::size_t e = 0; e < dh; ++e) {
                    dqh[e] += dscore * scale * kh[e];
                    dkh[e] += dscore * scale * qh[e];
                    dvh[e] += vh_weight * da[e];
                }
            }
        }
    }

    const GateGrads gg = gate_backward(params.gate, c.gate, dalpha, config);
    g.params.gate = gg.params;
    if (config.gate_input == GateInput::query) dq += gg.input;

    g.params.proj.wq = matmul_tn(c.x, dq);
    g.params.proj.bq = column_sums(dq);
    g.params.proj.wk = matmul_tn(c.x, dk);
    g.params.proj.wv = matmul_tn(c.x, dv);
    g.params.proj.bv = column_sums(dv);
    g.x = matmul_nt(dq, params.proj.wq);
    g.x += matmul_nt(dk, params.proj.wk);
    g.x += matmul_nt(dv, params.proj.wv);
    if (config.gate_input == GateInput::token) g.x += gg.input;
    return g;
}

Matrix dense_oracle(const Matrix& x, const AttentionParams& params, const UnionNeighborhood& u,
                    const AttentionConfig& config) {
    check_inputs(x, u, config);
    const std::size_t n = x.rows();
    const std::size_t d = config.d_model;
    const std::size_t heads = config.n_heads;
    const std::size_t dh = config.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const double lc = config.logit_clamp;

    const Matrix q = project(x, params.proj.wq, params.proj.bq);
    const Matrix k = matmul(x, params.proj.wk);
    const Matrix v = project(x, params.proj.wv, params.proj.bv);
    const GateOutput gate = gate_forward(params.gate, config.gate_input == GateInput::token ? x : q, config);

    auto head_cols = [&](const Matrix& m, std::size_t h) {
        Matrix out(m.rows(), dh);
        for (std::size_t i = 0; i < m.rows(); ++i)
            for (std::size_t e = 0; e < dh; ++e) out(i, e) = m(i, h * dh + e);
        return out;
    };

    Matrix concat(n, d);
    std::unique_ptr<bool[]> allowed(new bool[n]);
    std::vector<double> bias(n);
    std::vector<double> logits(n);
    for (std::size_t h = 0; h < heads; ++h) {
        const Matrix qh = head_cols(q, h);
        const Matrix kh = head_cols(k, h);
        const Matrix vh = head_cols(v, h);
        const Matrix scores = matmul_nt(qh, kh);
        Matrix probs(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            std::fill(allowed.get(), allowed.get() + n, false);
            std::fill(bias.begin(), bias.end(), 0.0);
            const double a = gate.alpha(i, h);
            for (const NeighborEntry& e : u.tokens[i]) {
                if (!e.valid) continue;
                allowed[e.target_index] = true;
                if (gate.log_prior) bias[e.target_index] = e.kind == NeighborKind::ring ? std::log(a) : std::log1p(-a);
            }
            for (std::size_t j = 0; j < n; ++j) {
                const double s = scores(i, j) * scale;
                logits[j] = config.clamp_mode == ClampMode::raw_score ? std::clamp(s, -lc, lc) + bias[j]
                                                                      : std::clamp(s + bias[j], -lc, lc);
            }
            const auto p = softmax_row(logits, std::span<const bool>(allowed.get(), n));
            std::copy(p.begin(), p.end(), probs.row(i).begin());
        }
        const Matrix ah = matmul(probs, vh);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t e = 0; e < dh; ++e) concat(i, h * dh + e) = ah(i, e);
    }
    return project(concat, params.proj.wo, params.proj.bo);
}

double stabilization_kl(std::span<const double> scores, std::span<const NeighborKind> kinds, double alpha_raw,
                        double eps, bool log_prior, const AttentionConfig& config) {
    const std::size_t m = scores.size();
    if (kinds.size() != m) throw ShapeError("stabilization_kl: kinds length mismatch");
    if (m == 0) throw EmptyNeighborhoodError("empty neighborhood");
    const double inf = std::numeric_limits<double>::infinity();
    const double alpha_stab = stabilize_alpha(alpha_raw, eps);
    std::vector<double> ls(m), li(m);
    for (std::size_t j = 0; j < m; ++j) {
        ls[j] = fused_logit(scores[j], kinds[j], alpha_stab, log_prior, config);
        double prior = 0.0;
        if (log_prior) prior = kinds[j] == NeighborKind::ring ? std::log(alpha_raw) : std::log1p(-alpha_raw);
        li[j] = scores[j] + prior;
    }
    auto log_sum_exp = [](const std::vector<double>& l) {
        const double mx = *std::max_element(l.begin(), l.end());
        if (mx == -std::numeric_limits<double>::infinity()) return mx;
        double s = 0.0;
        for (double v : l) s += std::exp(v - mx);
        return mx + std::log(s);
    };
    const double zs = log_sum_exp(ls);
    const double zi = log_sum_exp(li);
    double kl = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
        const double lps = ls[j] - zs;
        const double ps = std::exp(lps);
        if (ps == 0.0) continue;
        const double lpi = li[j] - zi;
        if (lpi == -inf) return inf;
        kl += ps * (lps - lpi);
    }
    return kl;
}

std::vector<KlSummary> kl_stabilization(const Matrix& x, const AttentionParams& params, const UnionNeighborhood& u,
                                        const AttentionConfig& config, std::span<const double> eps_list) {
    check_inputs(x, u, config);
    const std::size_t n = x.rows();
    const std::size_t heads = config.n_heads;
    const std::size_t dh = config.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const Matrix q = project(x, params.proj.wq, params.proj.bq);
    const Matrix k = matmul(x, params.proj.wk);
    const GateOutput gate = gate_forward(params.gate, config.gate_input == GateInput::token ? x : q, config);
    const CompactUnion slots = compact(u);

    std::vector<KlSummary> out;
    std::vector<double> scores;
    std::vector<NeighborKind> kinds;
    for (double eps : eps_list) {
        KlSummary s;
        s.eps = eps;
        s.per_token.assign(n, 0.0);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t begin = slots.row_ptr[i];
            const std::size_t end = slots.row_ptr[i + 1];
            kinds.assign(slots.kind.begin() + static_cast<long>(begin), slots.kind.begin() + static_cast<long>(end));
            for (std::size_t h = 0; h < heads; ++h) {
                scores.clear();
                for (std::size_t j = begin; j < end; ++j) {
                    scores.push_back(dot(q.row(i).subspan(h * dh, dh), k.row(slots.target[j]).subspan(h * dh, dh)) *
                                     scale);
                }
                const double kl = stabilization_kl(scores, kinds, gate.alpha_raw(i, h), eps, gate.log_prior, config);
                s.max_kl = std::max(s.max_kl, kl);
                s.per_token[i] += kl / static_cast<double>(heads);
                total += kl;
            }
        }
        s.mean_kl = total / static_cast<double>(n * heads);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace piattn
