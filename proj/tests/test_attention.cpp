#include <doctest.h>

#include <cmath>

#include "piattn/attention.hpp"
#include "test_util.hpp"

using namespace piattn;
using piattn::testing::random_attention;
using piattn::testing::small_config;

namespace {

double weighted_sum(const Matrix& m, const Matrix& r) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) s += m.values()[i] * r.values()[i];
    return s;
}

struct GradCase {
    AttentionConfig config;
    std::size_t n;
};

void check_attention_gradients(const GradCase& gc, std::uint64_t seed, double dropout = 0.0) {
    AttentionConfig c = gc.config;
    c.dropout_p = dropout;
    Rng rng(seed);
    const AttentionParams p = random_attention(c, rng);
    const Matrix x = rng.normal_matrix(gc.n, c.d_model);
    const Matrix r = rng.normal_matrix(gc.n, c.d_model);
    const UnionNeighborhood u = build_union(c, gc.n);

    auto run = [&](const Matrix& xi, const AttentionParams& pi) {
        Rng drop_rng(seed + 1000);
        ForwardOptions opt{dropout > 0.0, &drop_rng};
        return pi_attention_forward(xi, pi, u, c, opt);
    };
    const AttentionResult fwd = run(x, p);
    const AttentionGrads g = pi_attention_backward(p, fwd.cache, r, c);

    // One tensor at a time so failures name the tensor.
    AttentionParams gp = g.params;
    std::vector<std::pair<std::string, std::vector<double>>> analytic;
    gp.visit([&](const std::string& name, const Matrix& m) {
        analytic.emplace_back(name, std::vector<double>(m.values().begin(), m.values().end()));
    });
    std::size_t idx = 0;
    AttentionParams probe = p;
    probe.visit([&](const std::string& name, Matrix& m) {
        const auto& expect = analytic[idx++].second;
        if (c.ablation == Ablation::no_gate || c.ablation == Ablation::static_alpha) {
            if (name.rfind("gate.", 0) == 0) return;
        }
        const std::vector<double> start(m.values().begin(), m.values().end());
        const auto f = [&](std::span<const double> v) {
            std::copy(v.begin(), v.end(), m.values().begin());
            const double out = weighted_sum(run(x, probe).out, r);
            std::copy(start.begin(), start.end(), m.values().begin());
            return out;
        };
        const auto res = grad_check(f, start, expect, 5e-4, Stencil::four_point);
        INFO("tensor " << name << " index " << res.worst_index << " numeric " << res.worst_numeric << " analytic "
                       << res.worst_analytic);
        CHECK(res.max_rel_error < 1e-6);
    });
    Matrix xp = x;
    const auto fx = [&](std::span<const double> v) {
        std::copy(v.begin(), v.end(), xp.values().begin());
        return weighted_sum(run(xp, p).out, r);
    };
    const auto rx = grad_check(fx, x.values(), g.x.values(), 5e-4, Stencil::four_point);
    INFO("input x index " << rx.worst_index);
    CHECK(rx.max_rel_error < 1e-6);
}

}  // namespace

TEST_CASE("equal scores reproduce the prior") {
    auto c = small_config(2, 1, 1, 4, true);
    const std::vector<double> q{0.3, -0.2};
    const std::vector<double> key{1.0, 2.0};
    const std::vector<double> v1{1.0, 0.0}, v2{0.0, 1.0};
    const RowSlot slots[] = {{NeighborKind::ring, key, v1}, {NeighborKind::skip, key, v2}};
    const double alpha[] = {0.8};
    std::vector<double> out(2), probs(2);
    attend_row(q, slots, alpha, true, c, out, probs);
    CHECK(std::abs(probs[0] - 0.8) < 1e-15);
    CHECK(std::abs(probs[1] - 0.2) < 1e-15);
    CHECK(std::abs(out[0] - 0.8) < 1e-15);
    CHECK(std::abs(out[1] - 0.2) < 1e-15);
}

TEST_CASE("uniform prior equals no prior") {
    Rng rng(21);
    for (bool causal : {true, false}) {
        auto c = small_config(8, 2, 2, 4, causal);
        const AttentionParams p = random_attention(c, rng);
        const Matrix x = rng.normal_matrix(12, 8);
        const UnionNeighborhood u = build_union(c, 12);
        c.ablation = Ablation::static_alpha;
        c.static_alpha = 0.5;
        const Matrix with_half = pi_attention_forward(x, p, u, c).out;
        c.ablation = Ablation::no_gate;
        const Matrix without = pi_attention_forward(x, p, u, c).out;
        CHECK(max_abs_diff(with_half, without) <= 1e-12);
    }
}

TEST_CASE("sparse path matches the dense oracle") {
    Rng rng(22);
    SUBCASE("named example") {
        const auto c = small_config(8, 2, 2, 4, true);
        const AttentionParams p = random_attention(c, rng);
        const Matrix x = rng.normal_matrix(12, 8);
        const UnionNeighborhood u = build_union(c, 12);
        CHECK(max_abs_diff(pi_attention_forward(x, p, u, c).out, dense_oracle(x, p, u, c)) < 1e-10);
    }
    SUBCASE("sampled grid") {
        const std::size_t ns[] = {4, 12, 33};
        const std::size_t ks[] = {0, 1, 2, 4};
        const std::size_t pis[] = {1, 2, 4, 8, 16};
        const std::size_t hs[] = {1, 2, 4};
        for (int trial = 0; trial < 120; ++trial) {
            auto c = small_config(8, hs[rng.below(3)], ks[rng.below(4)], pis[rng.below(5)], rng.bernoulli(0.5));
            c.ablation = static_cast<Ablation>(rng.below(5));
            c.clamp_mode = rng.bernoulli(0.5) ? ClampMode::raw_score : ClampMode::with_prior;
            c.gate_input = rng.bernoulli(0.5) ? GateInput::token : GateInput::query;
            c.logit_clamp = rng.bernoulli(0.3) ? 0.5 : 20.0;
            const std::size_t n = ns[rng.below(3)];
            const AttentionParams p = random_attention(c, rng, 0.8);
            const Matrix x = rng.normal_matrix(n, 8);
            const UnionNeighborhood u = build_union(c, n);
            CHECK(max_abs_diff(pi_attention_forward(x, p, u, c).out, dense_oracle(x, p, u, c)) < 1e-10);
        }
    }
}

TEST_CASE("dense oracle degenerate cases") {
    Rng rng(23);
    SUBCASE("full mask is textbook attention") {
        // Window wider than the sequence, skip period beyond it, no prior.
        auto c = small_config(8, 2, 10, 100, false);
        c.ablation = Ablation::no_gate;
        const AttentionParams p = random_attention(c, rng);
        const std::size_t n = 6;
        const Matrix x = rng.normal_matrix(n, 8);
        const UnionNeighborhood u = build_union(c, n);
        const Matrix got = dense_oracle(x, p, u, c);

        // Scalar loops for softmax(Q K^T / sqrt(d_h)) V per head.
        const std::size_t dh = 4;
        Matrix concat(n, 8);
        for (std::size_t h = 0; h < 2; ++h) {
            for (std::size_t i = 0; i < n; ++i) {
                std::vector<double> s(n);
                double mx = -1e300;
                for (std::size_t j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) {
                        double qi = p.proj.bq(0, h * dh + e), kj = 0.0;
                        for (std::size_t a = 0; a < 8; ++a) {
                            qi += x(i, a) * p.proj.wq(a, h * dh + e);
                            kj += x(j, a) * p.proj.wk(a, h * dh + e);
                        }
                        acc += qi * kj;
                    }
                    s[j] = acc / 2.0;
                    mx = std::max(mx, s[j]);
                }
                double z = 0.0;
                for (double& v : s) z += (v = std::exp(v - mx));
                for (std::size_t e = 0; e < dh; ++e) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        double vj = p.proj.bv(0, h * dh + e);
                        for (std::size_t a = 0; a < 8; ++a) vj += x(j, a) * p.proj.wv(a, h * dh + e);
                        acc += s[j] / z * vj;
                    }
                    concat(i, h * dh + e) = acc;
                }
            }
        }
        Matrix expect = matmul(concat, p.proj.wo);
        add_row_bias(expect, p.proj.bo);
        CHECK(max_abs_diff(got, expect) < 1e-12);
    }
    SUBCASE("single token") {
        const auto c = small_config(8, 2, 1, 4, true);
        const AttentionParams p = random_attention(c, rng);
        const Matrix x = rng.normal_matrix(1, 8);
        Matrix v = matmul(x, p.proj.wv);
        add_row_bias(v, p.proj.bv);
        Matrix expect = matmul(v, p.proj.wo);
        add_row_bias(expect, p.proj.bo);
        const UnionNeighborhood u = build_union(c, 1);
        CHECK(max_abs_diff(dense_oracle(x, p, u, c), expect) < 1e-12);
        CHECK(max_abs_diff(pi_attention_forward(x, p, u, c).out, expect) < 1e-12);
    }
}

TEST_CASE("attention weights are normalized") {
    Rng rng(24);
    const auto c = small_config(8, 4, 2, 5, false);
    const AttentionParams p = random_attention(c, rng, 1.5);
    const Matrix x = rng.normal_matrix(20, 8);
    const AttentionResult r = pi_attention_forward(x, p, build_union(c, 20), c);
    const CompactUnion& s = r.cache.weights.slots;
    for (std::size_t i = 0; i < 20; ++i)
        for (std::size_t h = 0; h < 4; ++h) {
            double sum = 0.0;
            for (std::size_t j = s.row_ptr[i]; j < s.row_ptr[i + 1]; ++j) sum += r.cache.weights.prob(j, h);
            CHECK(std::abs(sum - 1.0) < 1e-10);
        }
}

TEST_CASE("ring mass grows with alpha") {
    Rng rng(25);
    const auto c = small_config(4, 1, 2, 4, true);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t m = 3 + rng.below(4);
        const std::vector<double> q{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
        std::vector<std::vector<double>> keys(m), vals(m, std::vector<double>(4, 0.0));
        std::vector<RowSlot> slots;
        for (std::size_t j = 0; j < m; ++j) {
            keys[j] = {rng.normal(), rng.normal(), rng.normal(), rng.normal()};
            slots.push_back({j == 0 || j + 1 == m ? NeighborKind::skip : NeighborKind::ring, keys[j], vals[j]});
        }
        double last_ring = -1.0;
        for (int step = 1; step <= 9; ++step) {
            const double alpha[] = {0.1 * step};
            std::vector<double> out(4), probs(m);
            attend_row(q, slots, alpha, true, c, out, probs);
            double ring = 0.0;
            for (std::size_t j = 0; j < m; ++j)
                if (slots[j].kind == NeighborKind::ring) ring += probs[j];
            CHECK(ring > last_ring);
            last_ring = ring;
        }
    }
}

TEST_CASE("work accounting") {
    Rng rng(26);
    for (bool causal : {true, false}) {
        for (std::size_t k : {0u, 1u, 3u}) {
            const auto c = small_config(8, 2, k, 5, causal);
            const std::size_t n = 37;
            const AttentionParams p = random_attention(c, rng);
            const UnionNeighborhood u = build_union(c, n);
            const AttentionResult r = pi_attention_forward(rng.normal_matrix(n, 8), p, u, c);
            CHECK(r.work.score_evals == count_score_slots(u));
            const std::size_t bound = n * (2 * k + 3) * c.head_dim() * c.n_heads + n * c.n_heads;
            CHECK(r.work.stored_activation_elements <= bound);
        }
    }
}

TEST_CASE("causal outputs ignore future tokens") {
    Rng rng(27);
    for (std::size_t n = 2; n <= 16; ++n) {
        auto c = small_config(8, 2, 1 + n % 3, 1 + n % 5, true);
        const AttentionParams p = random_attention(c, rng);
        const Matrix x = rng.normal_matrix(n, 8);
        const UnionNeighborhood u = build_union(c, n);
        const Matrix base = pi_attention_forward(x, p, u, c).out;
        for (std::size_t j = 1; j < n; ++j) {
            Matrix xp = x;
            for (double& v : xp.row(j)) v += 3.0;
            const Matrix moved = pi_attention_forward(xp, p, u, c).out;
            for (std::size_t i = 0; i < j; ++i)
                for (std::size_t e = 0; e < 8; ++e) CHECK(moved(i, e) == base(i, e));
        }
    }
}

TEST_CASE("attention gradients") {
    SUBCASE("reference shape") { check_attention_gradients({small_config(8, 2, 1, 2, true), 6}, 31); }
    SUBCASE("bidirectional, query-fed gate") {
        auto c = small_config(8, 2, 1, 2, false);
        c.gate_input = GateInput::query;
        check_attention_gradients({c, 6}, 32);
    }
    SUBCASE("clamp on the sum") {
        auto c = small_config(8, 2, 1, 3, true);
        c.clamp_mode = ClampMode::with_prior;
        check_attention_gradients({c, 7}, 33);
    }
    SUBCASE("ablations") {
        for (Ablation a : {Ablation::no_skip, Ablation::no_gate, Ablation::static_alpha, Ablation::no_ring}) {
            auto c = small_config(8, 2, 1, 2, true);
            c.ablation = a;
            check_attention_gradients({c, 6}, 34);
        }
    }
    SUBCASE("dropout with a fixed mask") { check_attention_gradients({small_config(8, 2, 1, 2, true), 6}, 35, 0.3); }
}

TEST_CASE("attention backward edge cases") {
    Rng rng(36);
    auto c = small_config(8, 2, 1, 2, true);
    const AttentionParams p = random_attention(c, rng);
    const Matrix x = rng.normal_matrix(5, 8);
    const UnionNeighborhood u = build_union(c, 5);

    SUBCASE("zero upstream") {
        const AttentionResult r = pi_attention_forward(x, p, u, c);
        const AttentionGrads g = pi_attention_backward(p, r.cache, Matrix(5, 8), c);
        CHECK(max_abs(g.x) == 0.0);
        g.params.visit([](const std::string&, const Matrix& m) { CHECK(max_abs(m) == 0.0); });
    }
    SUBCASE("fully clamped scores pass no gradient to keys") {
        c.logit_clamp = 1e-3;
        AttentionParams big = p;
        for (double& v : big.proj.wq.values()) v *= 50.0;
        for (double& v : big.proj.wk.values()) v *= 50.0;
        const AttentionResult r = pi_attention_forward(x, big, u, c);
        const CompactUnion& s = r.cache.weights.slots;
        bool all_clamped = true;
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = s.row_ptr[i]; j < s.row_ptr[i + 1]; ++j)
                for (std::size_t h = 0; h < 2; ++h) {
                    const double sc = dot(r.cache.q.row(i).subspan(h * 4, 4), r.cache.k.row(s.target[j]).subspan(h * 4, 4)) / 2.0;
                    all_clamped = all_clamped && std::abs(sc) > c.logit_clamp;
                }
        REQUIRE(all_clamped);
        const Matrix up = rng.normal_matrix(5, 8);
        const AttentionGrads g = pi_attention_backward(big, r.cache, up, c);
        CHECK(max_abs(g.params.proj.wk) == 0.0);
        // Perturbing the key projection leaves the loss unchanged.
        AttentionParams moved = big;
        moved.proj.wk(2, 1) += 1e-6;
        const double l0 = weighted_sum(r.out, up);
        const double l1 = weighted_sum(pi_attention_forward(x, moved, u, c).out, up);
        CHECK(l0 == l1);
    }
}

TEST_CASE("stabilization KL") {
    Rng rng(37);
    auto c = small_config(8, 2, 2, 4, true);
    const AttentionParams p = random_attention(c, rng);
    const Matrix x = rng.normal_matrix(24, 8);
    const UnionNeighborhood u = build_union(c, 24);
    const std::vector<double> eps_list{1e-1, 1e-2, 1e-3, 1e-4, 1e-6, 0.0};
    const auto sweep = kl_stabilization(x, p, u, c, eps_list);
    REQUIRE(sweep.size() == eps_list.size());
    CHECK(sweep.back().max_kl == 0.0);
    for (std::size_t i = 1; i < sweep.size(); ++i) {
        CHECK(sweep[i].mean_kl <= sweep[i - 1].mean_kl);
        for (std::size_t t = 0; t < 24; ++t) CHECK(sweep[i].per_token[t] <= sweep[i - 1].per_token[t] + 1e-15);
    }

    SUBCASE("standard-normal scores") {
        c.logit_clamp = 20.0;
        double total = 0.0;
        std::size_t count = 0;
        for (int seed = 0; seed < 5; ++seed) {
            Rng r(1000 + seed);
            for (std::size_t i = 0; i < 256; ++i) {
                std::vector<double> s(7);
                std::vector<NeighborKind> kinds(7, NeighborKind::ring);
                kinds[6] = NeighborKind::skip;
                for (double& v : s) v = r.normal();
                total += stabilization_kl(s, kinds, r.uniform(), 1e-4, true, c);
                ++count;
            }
        }
        CHECK(total / static_cast<double>(count) < 2e-2);
    }
    SUBCASE("a binding clamp makes KL positive") {
        c.logit_clamp = 0.1;
        const std::vector<double> s{3.0, -2.0};
        const std::vector<NeighborKind> kinds{NeighborKind::ring, NeighborKind::skip};
        CHECK(stabilization_kl(s, kinds, 0.6, 0.0, true, c) > 0.0);
    }
}
