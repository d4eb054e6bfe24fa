#include "piattn/checks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "piattn/attention.hpp"
#include "piattn/block.hpp"
#include "piattn/decoder.hpp"
#include "piattn/rfield.hpp"
#include "piattn/trainer.hpp"

namespace piattn {

namespace {

AttentionConfig grid_config(std::size_t d_model, std::size_t heads, std::size_t k, std::size_t pi, bool causal,
                            Ablation a) {
    AttentionConfig c;
    c.d_model = d_model;
    c.n_heads = heads;
    c.ring_k = k;
    c.skip_period = pi;
    c.causal = causal;
    c.bidirectional_skip = !causal;
    c.ablation = a;
    return c;
}

void fill_normal(Matrix& m, Rng& rng, double scale) {
    for (double& v : m.values()) v = scale * rng.normal();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

}  // namespace

OracleGrid OracleGrid::full() {
    OracleGrid g;
    g.ns = {4, 12, 33, 64};
    g.ks = {0, 1, 2, 4};
    g.pis = {1, 2, 4, 8, 16};
    g.heads = {1, 2, 4};
    return g;
}

OracleGrid OracleGrid::small() {
    OracleGrid g;
    g.ns = {4, 12};
    g.ks = {0, 2};
    g.pis = {1, 4, 8};
    g.heads = {2};
    return g;
}

std::size_t OracleGrid::size() const {
    return ns.size() * ks.size() * pis.size() * heads.size() * causal.size() * ablations.size();
}

OracleReport oracle_check(const OracleGrid& grid, std::uint64_t seed, double tolerance) {
    Rng rng(seed);
    OracleReport rep;
    for (std::size_t n : grid.ns)
        for (std::size_t k : grid.ks)
            for (std::size_t pi : grid.pis)
                for (std::size_t h : grid.heads)
                    for (bool causal : grid.causal)
                        for (Ablation a : grid.ablations) {
                            const AttentionConfig c = grid_config(grid.d_model, h, k, pi, causal, a);
                            AttentionParams p = AttentionParams::zeros(c);
                            p.visit([&](const std::string&, Matrix& m) { fill_normal(m, rng, 0.8); });
                            const Matrix x = rng.normal_matrix(n, grid.d_model);
                            const UnionNeighborhood u = build_union(c, n);
                            OracleRow r{n, k, pi, h, causal, a, 0.0};
                            r.max_abs_diff = max_abs_diff(pi_attention_forward(x, p, u, c).out, dense_oracle(x, p, u, c));
                            rep.worst = std::max(rep.worst, r.max_abs_diff);
                            rep.rows.push_back(r);
                        }
    rep.pass = !rep.rows.empty() &&
               std::all_of(rep.rows.begin(), rep.rows.end(), [&](const OracleRow& r) { return r.max_abs_diff < tolerance; });
    return rep;
}

std::string oracle_csv(const OracleReport& report) {
    std::string out = "n,k,pi,H,causal,ablation,max_abs_diff\n";
    for (const OracleRow& r : report.rows) {
        out += std::to_string(r.n) + "," + std::to_string(r.k) + "," + std::to_string(r.pi) + "," +
               std::to_string(r.heads) + "," + (r.causal ? "1" : "0") + "," + to_string(r.ablation) + "," +
               fmt("%.6e", r.max_abs_diff) + "\n";
    }
    return out;
}

GradReport block_grad_check(std::uint64_t seed, double tolerance) {
    Rng rng(seed);
    const AttentionConfig c = grid_config(16, 2, 1, 2, true, Ablation::full);
    const std::size_t n = 6, d_ff = 32;
    std::vector<BlockParams> blocks;
    for (int l = 0; l < 2; ++l) {
        BlockParams b = BlockParams::zeros(c, d_ff);
        b.visit([&](const std::string& name, Matrix& m) {
            const bool gain = name == "ln1_g" || name == "ln2_g";
            for (double& v : m.values()) v = (gain ? 1.0 : 0.0) + 0.4 * rng.normal();
        });
        blocks.push_back(std::move(b));
    }
    const Matrix x = rng.normal_matrix(n, c.d_model);
    const Matrix r = rng.normal_matrix(n, c.d_model);
    const UnionNeighborhood u = build_union(c, n);
    auto loss = [&](const Matrix& xi) {
        Matrix h = xi;
        for (const auto& b : blocks) h = block_forward(h, b, u, c).out;
        double s = 0.0;
        for (std::size_t i = 0; i < h.size(); ++i) s += h.values()[i] * r.values()[i];
        return s;
    };
    const BlockResult f1 = block_forward(x, blocks[0], u, c);
    const BlockResult f2 = block_forward(f1.out, blocks[1], u, c);
    const BlockGrads g2 = block_backward(blocks[1], f2.cache, r, c);
    const BlockGrads g1 = block_backward(blocks[0], f1.cache, g2.x, c);
    const BlockParams* grads[] = {&g1.params, &g2.params};

    GradReport rep;
    for (std::size_t l = 0; l < 2; ++l) {
        std::vector<std::vector<double>> analytic;
        grads[l]->visit([&](const std::string&, const Matrix& m) { analytic.emplace_back(m.values().begin(), m.values().end()); });
        std::size_t idx = 0;
        blocks[l].visit([&](const std::string& name, Matrix& m) {
            const std::vector<double> start(m.values().begin(), m.values().end());
            const auto f = [&](std::span<const double> v) {
                std::copy(v.begin(), v.end(), m.values().begin());
                const double out = loss(x);
                std::copy(start.begin(), start.end(), m.values().begin());
                return out;
            };
            const double e = grad_check(f, start, analytic[idx++], 1e-3, Stencil::four_point).max_rel_error;
            rep.rows.push_back({"blocks." + std::to_string(l) + "." + name, e});
        });
    }
    Matrix xp = x;
    const auto fx = [&](std::span<const double> v) {
        std::copy(v.begin(), v.end(), xp.values().begin());
        return loss(xp);
    };
    rep.rows.push_back({"x", grad_check(fx, x.values(), g1.x.values(), 1e-3, Stencil::four_point).max_rel_error});
    for (const GradRow& g : rep.rows) rep.worst = std::max(rep.worst, g.max_rel_error);
    rep.pass = rep.worst < tolerance;
    return rep;
}

std::string grad_csv(const GradReport& report) {
    std::string out = "tensor,max_rel_error\n";
    for (const GradRow& r : report.rows) out += r.tensor + "," + fmt("%.6e", r.max_rel_error) + "\n";
    return out;
}

KlReport kl_check(std::uint64_t seed, std::size_t seeds, std::size_t n) {
    KlReport rep;
    rep.seeds = seeds;
    rep.n = n;
    Rng rng(seed);
    {
        const AttentionConfig c = grid_config(8, 2, 2, 4, true, Ablation::full);
        AttentionParams p = AttentionParams::zeros(c);
        p.visit([&](const std::string&, Matrix& m) { fill_normal(m, rng, 0.5); });
        const Matrix x = rng.normal_matrix(64, 8);
        const UnionNeighborhood u = build_union(c, 64);
        const std::vector<double> eps{1e-1, 1e-2, 1e-3, 1e-4, 1e-6, 0.0};
        const auto sweep = kl_stabilization(x, p, u, c, eps);
        rep.nonincreasing = true;
        for (std::size_t i = 0; i < sweep.size(); ++i) {
            rep.sweep.push_back({sweep[i].eps, sweep[i].mean_kl, sweep[i].max_kl});
            if (i == 0) continue;
            if (sweep[i].mean_kl > sweep[i - 1].mean_kl) rep.nonincreasing = false;
            for (std::size_t t = 0; t < sweep[i].per_token.size(); ++t)
                if (sweep[i].per_token[t] > sweep[i - 1].per_token[t] + 1e-15) rep.nonincreasing = false;
        }
        rep.zero_at_eps0 = sweep.back().max_kl == 0.0;
    }
    const AttentionConfig c = grid_config(8, 1, 4, 16, true, Ablation::full);
    const UnionNeighborhood u = build_union(c, n);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t s = 0; s < seeds; ++s) {
        Rng r(seed * 1000003ULL + s);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> scores;
            std::vector<NeighborKind> kinds;
            for (const auto& e : u.tokens[i]) {
                if (!e.valid) continue;
                scores.push_back(r.normal());
                kinds.push_back(e.kind);
            }
            total += stabilization_kl(scores, kinds, r.uniform(), 1e-4, true, c);
            ++count;
        }
    }
    rep.random_mean = count ? total / static_cast<double>(count) : 0.0;
    rep.pass = rep.zero_at_eps0 && rep.nonincreasing && rep.random_mean < 2e-2;
    return rep;
}

std::string kl_csv(const KlReport& report) {
    std::string out = "eps,mean_kl,max_kl\n";
    for (const auto& r : report.sweep)
        out += fmt("%.3e", r.eps) + "," + fmt("%.9e", r.mean_kl) + "," + fmt("%.9e", r.max_kl) + "\n";
    return out;
}

double decode_consistency(const ModelParams& params, const ModelConfig& config, const std::vector<std::size_t>& tokens) {
    const Matrix full = model_forward(params, config, tokens).logits;
    KVCache cache(config);
    double worst = 0.0;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const DecodeStep s = decode_step(params, config, cache, tokens[t], t);
        for (std::size_t v = 0; v < config.vocab; ++v) worst = std::max(worst, std::abs(s.logits[v] - full(t, v)));
    }
    return worst;
}

DecodeReport decode_check(std::uint64_t seed, std::size_t steps, double tolerance) {
    Rng rng(seed);
    DecodeReport rep;
    for (std::size_t layers : {1u, 2u, 3u})
        for (std::size_t k : {0u, 1u, 2u})
            for (std::size_t pi : {1u, 4u, 8u})
                for (Ablation a : {Ablation::full, Ablation::no_skip, Ablation::no_gate, Ablation::static_alpha,
                                   Ablation::no_ring}) {
                    ModelConfig m;
                    m.layers = layers;
                    m.d_ff = 24;
                    m.vocab = 11;
                    m.max_seq = steps;
                    m.attention = grid_config(8, 2, k, pi, true, a);
                    m.attention.static_alpha = 0.3;
                    ModelParams p = init_model(m, rng);
                    for (auto& b : p.blocks) {
                        fill_normal(b.attn.gate.w2, rng, 1.0);
                        fill_normal(b.attn.gate.b2, rng, 0.5);
                    }
                    const std::vector<std::size_t> prompt{rng.below(m.vocab)};
                    const auto tokens = generate(p, m, prompt, steps - 1, Sampler{});
                    DecodeRow r{layers, k, pi, a, decode_consistency(p, m, tokens)};
                    rep.worst = std::max(rep.worst, r.max_abs_diff);
                    rep.rows.push_back(r);
                }
    rep.pass = rep.worst < tolerance;
    return rep;
}

std::string decode_csv(const DecodeReport& report) {
    std::string out = "L,k,pi,ablation,max_abs_diff\n";
    for (const DecodeRow& r : report.rows) {
        out += std::to_string(r.layers) + "," + std::to_string(r.k) + "," + std::to_string(r.pi) + "," +
               to_string(r.ablation) + "," + fmt("%.6e", r.max_abs_diff) + "\n";
    }
    return out;
}

RunConfig preset(TaskKind kind, const std::string& data_dir) {
    RunConfig rc;
    rc.task.kind = kind;
    rc.model.layers = 2;
    rc.model.d_ff = 128;
    rc.model.attention.d_model = 64;
    rc.model.attention.n_heads = 4;
    rc.model.attention.ring_k = 2;
    rc.model.attention.skip_period = 8;
    rc.train.lr = 3e-3;
    rc.train.weight_decay = 0.01;
    rc.train.warmup_steps = 50;
    rc.train.batch_size = 8;
    rc.train.steps = 3000;
    rc.train.eval_interval = 100;
    rc.train.eval_batches = 4;
    switch (kind) {
        case TaskKind::copy_at_pi:
            rc.task.vocab = 16;
            rc.task.seq_len = 32;
            rc.task.delay = 8;
            rc.train.target_accuracy = 0.99;
            break;
        case TaskKind::needle_retrieval:
            rc.task.vocab = 10;
            rc.task.seq_len = 32;
            rc.task.min_distance = 8;
            rc.train.eval_batches = 16;
            break;
        case TaskKind::char_lm:
            rc.task.seq_len = 64;
            rc.task.corpus = data_dir + "/gettysburg.txt";
            rc.model.attention.d_model = 32;
            rc.model.attention.n_heads = 2;
            rc.model.d_ff = 64;
            rc.model.attention.skip_period = 4;
            rc.train.steps = 1000;
            break;
    }
    rc.model.vocab = rc.task.vocab;
    rc.model.max_seq = rc.task.seq_len;
    return rc;
}

SkipNecessity skip_necessity(std::uint64_t seed, std::size_t threads, std::size_t eval_tokens) {
    SkipNecessity out;
    RunConfig rc = preset(TaskKind::copy_at_pi, "");
    rc.train.seed = seed;
    const Task task = load_task(rc.task);
    const std::size_t per_batch = rc.train.batch_size * (rc.task.seq_len - rc.task.delay);
    const std::size_t eval_batches = (eval_tokens + per_batch - 1) / per_batch;
    out.chance = 1.0 / static_cast<double>(task.vocab);

    const std::size_t n = rc.task.seq_len, q = n - 1;
    const std::size_t src = q - rc.task.delay;
    out.reachable_full = reach_full(rc.model.attention, n, q, rc.model.layers).layers.back()[src];
    TrainOptions opt;
    opt.threads = threads;
    const TrainResult full = train(rc, task, opt);
    out.full_steps = full.steps_run;
    out.full_accuracy =
        evaluate(full.params, rc.model, task, seed + 77, eval_batches, rc.train.batch_size, threads).accuracy;

    RunConfig ns = rc;
    ns.model.attention.ablation = Ablation::no_skip;
    ns.train.target_accuracy = 0.0;
    out.reachable_no_skip = reach_full(ns.model.attention, n, q, ns.model.layers).layers.back()[src];
    const TrainResult blind = train(ns, task, opt);
    out.no_skip_steps = blind.steps_run;
    const Evaluation ev = evaluate(blind.params, ns.model, task, seed + 77, eval_batches, ns.train.batch_size, threads);
    out.no_skip_accuracy = ev.accuracy;
    out.no_skip_count = ev.count;
    out.no_skip_correct = ev.correct;
    out.p_below_ceiling = binomial_lower_tail(ev.count, ev.correct, out.chance + 0.05);
    out.p_above_chance = binomial_upper_tail(ev.count, ev.correct, out.chance);
    out.pass = out.reachable_full && !out.reachable_no_skip && out.full_accuracy >= 0.99 &&
               out.full_steps <= 3000 && out.no_skip_accuracy <= out.chance + 0.05 && out.p_below_ceiling < 0.01 &&
               out.p_above_chance >= 0.01 && ev.count >= eval_tokens;
    return out;
}

}  // namespace piattn
