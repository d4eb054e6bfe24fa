#include "piattn/perf.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include <Eigen/Dense>

namespace piattn {

void CostParams::validate() const {
    const double all[] = {rates.tc, rates.hbm, rates.net, rates.act, c1, c2, c3};
    for (double v : all)
        if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument("cost params must be positive and finite");
}

namespace {

std::array<double, 3> cost_terms(const Rates& r, double n, double k, double d_h) {
    return {n * k * d_h / r.tc, n * d_h / std::min(r.hbm, r.net), n * d_h / r.act};
}

}  // namespace

double cost_model_eval(const CostParams& p, double n, double k, double d_h) {
    const auto t = cost_terms(p.rates, n, k, d_h);
    return p.c1 * t[0] + p.c2 * t[1] + p.c3 * t[2];
}

CostFit fit_cost_constants(const std::vector<Measurement>& ms, const Rates& rates, std::optional<double> fixed_c3) {
    const int cols = fixed_c3 ? 2 : 3;
    if (ms.size() < static_cast<std::size_t>(cols)) {
        throw RankError("cost fit needs at least " + std::to_string(cols) + " measurements, got " +
                        std::to_string(ms.size()));
    }
    Eigen::MatrixXd a(static_cast<Eigen::Index>(ms.size()), cols);
    Eigen::VectorXd t(static_cast<Eigen::Index>(ms.size()));
    Eigen::VectorXd pinned = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ms.size()));
    for (std::size_t i = 0; i < ms.size(); ++i) {
        const auto i_ = static_cast<Eigen::Index>(i);
        const auto row = cost_terms(ms[i].rates.value_or(rates), ms[i].n, ms[i].k, ms[i].d_h);
        for (int j = 0; j < cols; ++j) a(i_, j) = row[static_cast<std::size_t>(j)];
        if (fixed_c3) pinned(i_) = *fixed_c3 * row[2];
        t(i_) = ms[i].seconds;
    }
    // Column scaling so the rank test does not depend on units.
    Eigen::VectorXd scale(cols);
    for (int j = 0; j < cols; ++j) {
        scale(j) = a.col(j).norm();
        if (scale(j) == 0.0) throw RankError("cost fit: term " + std::to_string(j + 1) + " is zero in every measurement");
    }
    const Eigen::MatrixXd as = a * scale.cwiseInverse().asDiagonal();
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(as);
    qr.setThreshold(1e-10);
    CostFit fit;
    fit.rank = static_cast<std::size_t>(qr.rank());
    if (fit.rank < static_cast<std::size_t>(cols)) {
        throw RankError("cost fit: design matrix has rank " + std::to_string(fit.rank) + " (need " +
                        std::to_string(cols) + " independent measurement directions)");
    }
    const Eigen::VectorXd c = qr.solve(t - pinned).cwiseQuotient(scale);
    fit.c1 = c(0);
    fit.c2 = c(1);
    fit.c3 = fixed_c3 ? *fixed_c3 : c(2);
    const Eigen::VectorXd resid = a * c + pinned - t;
    const double tn = t.norm();
    fit.relative_residual = tn > 0.0 ? resid.norm() / tn : resid.norm();
    return fit;
}

std::vector<Measurement> parse_measurements_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::vector<Measurement> out;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        if (lineno == 1 && line.find_first_of("0123456789") != 0) continue;  // header
        std::vector<double> v;
        std::istringstream cells(line);
        std::string cell;
        while (std::getline(cells, cell, ',')) {
            try {
                std::size_t used = 0;
                v.push_back(std::stod(cell, &used));
            } catch (const std::exception&) {
                throw std::invalid_argument("measurements line " + std::to_string(lineno) + ": bad number '" + cell + "'");
            }
        }
        if (v.size() != 4 && v.size() != 8) {
            throw std::invalid_argument("measurements line " + std::to_string(lineno) + ": expected 4 or 8 columns");
        }
        Measurement m{v[0], v[1], v[2], v[3], std::nullopt};
        if (v.size() == 8) m.rates = Rates{v[4], v[5], v[6], v[7]};
        out.push_back(m);
    }
    return out;
}

std::size_t comm_volume(std::size_t batch, std::size_t heads, std::size_t d_h, std::size_t pi) {
    return 2 * batch * heads * d_h * pi;
}

namespace {

struct ShardNeeds {
    // remote rows needed per destination shard, split by stage
    std::vector<std::set<std::size_t>> halo, partner;
    // per-shard compute for one sequence
    std::vector<std::size_t> ring_slots, skip_slots, tokens;
};

ShardNeeds shard_needs(std::size_t shards, std::size_t shard_len, std::size_t n, const AttentionConfig& config) {
    ShardNeeds s;
    s.halo.resize(shards);
    s.partner.resize(shards);
    s.ring_slots.assign(shards, 0);
    s.skip_slots.assign(shards, 0);
    s.tokens.assign(shards, 0);
    for (std::size_t i = 0; i < n; ++i) ++s.tokens[i / shard_len];
    for (const GatherMap& m : gather_schedule(config, n)) {
        for (std::size_t i = 0; i < n; ++i) {
            if (!m.valid[i]) continue;
            const std::size_t dst = i / shard_len;
            const std::size_t row = m.source[i];
            if (m.kind == NeighborKind::ring) {
                ++s.ring_slots[dst];
                if (row / shard_len != dst) s.halo[dst].insert(row);
            } else {
                ++s.skip_slots[dst];
                if (row / shard_len != dst) s.partner[dst].insert(row);
            }
        }
    }
    // A row already pulled in as a halo is not sent again.
    for (std::size_t p = 0; p < shards; ++p)
        for (std::size_t r : s.halo[p]) s.partner[p].erase(r);
    return s;
}

}  // namespace

CommReport ring_simulate(std::size_t shards, std::size_t n, const AttentionConfig& config, std::size_t batch,
                         const Rates& rates) {
    if (shards == 0) throw std::invalid_argument("ring_simulate: shards must be positive");
    if (n == 0) throw std::invalid_argument("ring_simulate: n must be positive");
    if (shards > n) {
        throw std::invalid_argument("ring_simulate: " + std::to_string(shards) + " shards exceed n=" + std::to_string(n));
    }
    config.validate();
    CommReport rep;
    rep.shards = shards;
    rep.n = n;
    rep.shard_len = (n + shards - 1) / shards;
    rep.padded_n = rep.shard_len * shards;
    const std::size_t heads = config.n_heads, d_h = config.head_dim();
    const std::size_t per_row = 2 * heads * d_h * batch;
    rep.formula_elements = comm_volume(batch, heads, d_h, config.skip_period);

    const ShardNeeds needs = shard_needs(shards, rep.shard_len, n, config);
    for (int stage : {1, 2}) {
        const auto& want = stage == 1 ? needs.halo : needs.partner;
        for (std::size_t dst = 0; dst < shards; ++dst) {
            std::map<std::size_t, std::vector<std::size_t>> by_src;
            for (std::size_t r : want[dst]) by_src[r / rep.shard_len].push_back(r);
            for (auto& [src, rows] : by_src) {
                Message m{stage, src, dst, std::move(rows), 0};
                m.elements = m.rows.size() * per_row;
                (stage == 1 ? rep.halo_rows : rep.partner_rows) += m.rows.size();
                rep.tallied_elements += m.elements;
                rep.messages.push_back(std::move(m));
            }
        }
    }
    std::sort(rep.messages.begin(), rep.messages.end(), [](const Message& a, const Message& b) {
        return std::tie(a.stage, a.src, a.dst) < std::tie(b.stage, b.src, b.dst);
    });

    // Deliver and check against requirements rebuilt from the union itself.
    std::vector<std::map<std::size_t, std::size_t>> inbox(shards);
    bool ok = true;
    for (const Message& m : rep.messages) {
        if (m.src == m.dst) ok = false;
        for (std::size_t r : m.rows) {
            if (r / rep.shard_len != m.src) ok = false;
            ++inbox[m.dst][r];
        }
        rep.received_elements += m.rows.size() * per_row;
    }
    const UnionNeighborhood u = build_union(config, n);
    std::vector<std::set<std::size_t>> required(shards);
    for (std::size_t i = 0; i < n; ++i)
        for (const auto& e : u.tokens[i])
            if (e.valid && e.target_index / rep.shard_len != i / rep.shard_len)
                required[i / rep.shard_len].insert(e.target_index);
    for (std::size_t p = 0; p < shards; ++p) {
        if (inbox[p].size() != required[p].size()) ok = false;
        for (const auto& [row, times] : inbox[p])
            if (times != 1 || !required[p].count(row)) ok = false;
    }
    rep.conserved = ok && rep.received_elements == rep.tallied_elements;

    // Stage durations for one sequence, slowest shard.
    const double row_elems = 2.0 * static_cast<double>(heads * d_h);
    const double madds = 2.0 * static_cast<double>(heads * d_h);
    double t1 = 0, t2 = 0, t3 = 0;
    for (std::size_t p = 0; p < shards; ++p) {
        t1 = std::max(t1, static_cast<double>(needs.ring_slots[p]) * madds / rates.tc +
                              static_cast<double>(needs.halo[p].size()) * row_elems / rates.net);
        t2 = std::max(t2, static_cast<double>(needs.partner[p].size()) * row_elems / rates.net);
        t3 = std::max(t3, static_cast<double>(needs.skip_slots[p]) * madds / rates.tc +
                              static_cast<double>(needs.tokens[p] * heads * d_h) / rates.act);
    }
    rep.sequential_makespan = static_cast<double>(batch) * (t1 + t2 + t3);
    // Compute runs s1(0), s1(1), s3(0), s1(2), s3(1), ...; the network runs s2 in order.
    std::vector<double> end1(batch), end2(batch);
    double compute = 0, net = 0;
    auto run1 = [&](std::size_t t) {
        rep.timeline.push_back({t, 1, compute, compute + t1});
        compute += t1;
        end1[t] = compute;
        const double start = std::max(net, end1[t]);
        rep.timeline.push_back({t, 2, start, start + t2});
        net = end2[t] = start + t2;
    };
    if (batch > 0) run1(0);
    for (std::size_t t = 0; t < batch; ++t) {
        if (t + 1 < batch) run1(t + 1);
        const double start = std::max(compute, end2[t]);
        rep.timeline.push_back({t, 3, start, start + t3});
        compute = start + t3;
    }
    rep.pipelined_makespan = compute;
    std::sort(rep.timeline.begin(), rep.timeline.end(), [](const StageEvent& a, const StageEvent& b) {
        return std::tie(a.microbatch, a.stage) < std::tie(b.microbatch, b.stage);
    });
    return rep;
}

std::string messages_csv(const CommReport& report) {
    std::string out = "stage,src,dst,rows,elements\n";
    for (const Message& m : report.messages) {
        out += std::to_string(m.stage) + "," + std::to_string(m.src) + "," + std::to_string(m.dst) + "," +
               std::to_string(m.rows.size()) + "," + std::to_string(m.elements) + "\n";
    }
    return out;
}

std::string timeline_csv(const CommReport& report) {
    std::string out = "microbatch,stage,start,end\n";
    char buf[128];
    for (const StageEvent& e : report.timeline) {
        std::snprintf(buf, sizeof(buf), "%zu,%d,%.9e,%.9e\n", e.microbatch, e.stage, e.start, e.end);
        out += buf;
    }
    return out;
}

std::size_t memory_bound(std::size_t n, std::size_t k, std::size_t d_h, std::size_t heads) {
    return n * (2 * k + 3) * d_h * heads + n * heads;
}

namespace {

template <typename Fn>
void for_grid(const WorkGrid& g, Fn&& fn) {
    for (Ablation a : g.ablations)
        for (std::size_t k : g.ks)
            for (std::size_t pi : g.pis) {
                AttentionConfig c;
                c.d_model = g.d_model;
                c.n_heads = g.heads;
                c.ring_k = k;
                c.skip_period = pi;
                c.causal = g.causal;
                c.bidirectional_skip = !g.causal;
                c.ablation = a;
                c.validate();
                for (std::size_t n : g.ns) fn(c, n);
            }
}

AttentionParams random_params(const AttentionConfig& c, Rng& rng) {
    AttentionParams p = AttentionParams::zeros(c);
    p.visit([&](const std::string&, Matrix& m) {
        for (double& v : m.values()) v = 0.3 * rng.normal();
    });
    return p;
}

}  // namespace

std::vector<WorkRow> work_report(const WorkGrid& grid, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<WorkRow> rows;
    for_grid(grid, [&](const AttentionConfig& c, std::size_t n) {
        const AttentionParams p = random_params(c, rng);
        const Matrix x = rng.normal_matrix(n, c.d_model);
        const UnionNeighborhood u = build_union(c, n);
        WorkRow r;
        r.n = n;
        r.k = c.ring_k;
        r.pi = c.skip_period;
        r.heads = c.n_heads;
        r.d_h = c.head_dim();
        r.ablation = c.ablation;
        r.score_slots = count_score_slots(u);
        r.work = pi_attention_forward(x, p, u, c).work;
        r.memory_bound = memory_bound(n, r.k, r.d_h, r.heads);
        if (!rows.empty()) {
            const WorkRow& prev = rows.back();
            if (prev.k == r.k && prev.pi == r.pi && prev.ablation == r.ablation && prev.n * 2 == n)
                r.score_ratio = static_cast<double>(r.work.score_evals) / static_cast<double>(prev.work.score_evals);
        }
        rows.push_back(r);
    });
    return rows;
}

std::string work_csv(const std::vector<WorkRow>& rows) {
    std::string out =
        "n,k,pi,H,d_h,ablation,score_slots,score_evals,multiply_adds,stored_activation_elements,"
        "projection_activation_elements,memory_bound,score_ratio\n";
    char buf[320];
    for (const WorkRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%zu,%zu,%zu,%zu,%zu,%s,%zu,%zu,%zu,%zu,%zu,%zu,%.6f\n", r.n, r.k, r.pi,
                      r.heads, r.d_h, to_string(r.ablation).c_str(), r.score_slots, r.work.score_evals,
                      r.work.multiply_adds, r.work.stored_activation_elements,
                      r.work.projection_activation_elements, r.memory_bound, r.score_ratio);
        out += buf;
    }
    return out;
}

std::vector<BenchRow> bench(const WorkGrid& grid, std::size_t repeats, std::uint64_t seed) {
    const std::vector<WorkRow> work = work_report(grid, seed);
    Rng rng(seed);
    std::vector<BenchRow> out;
    std::size_t idx = 0;
    for_grid(grid, [&](const AttentionConfig& c, std::size_t n) {
        const AttentionParams p = random_params(c, rng);
        const Matrix x = rng.normal_matrix(n, c.d_model);
        const UnionNeighborhood u = build_union(c, n);
        std::vector<double> times;
        for (std::size_t r = 0; r < std::max<std::size_t>(1, repeats); ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            const AttentionResult res = pi_attention_forward(x, p, u, c);
            times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        }
        std::nth_element(times.begin(), times.begin() + static_cast<long>(times.size() / 2), times.end());
        out.push_back({work[idx++], times[times.size() / 2]});
    });
    return out;
}

}  // namespace piattn
