#include "piattn/rfield.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

#include "piattn/neighborhood.hpp"

namespace piattn {

std::size_t ReachSet::count(std::size_t layer) const {
    return static_cast<std::size_t>(std::count(layers.at(layer).begin(), layers.at(layer).end(), true));
}

std::size_t ReachSet::leftmost(std::size_t layer) const {
    const auto& s = layers.at(layer);
    return static_cast<std::size_t>(std::find(s.begin(), s.end(), true) - s.begin());
}

namespace {

void check_args(const AttentionConfig& config, std::size_t n, std::size_t query) {
    if (!config.causal) throw std::invalid_argument("reachability analysis requires a causal config");
    if (query >= n) throw std::out_of_range("query " + std::to_string(query) + " outside n=" + std::to_string(n));
}

// Predecessors of every member of s along the given offsets.
std::vector<bool> hop(const std::vector<bool>& s, const std::vector<long>& offsets) {
    std::vector<bool> out = s;
    const long n = static_cast<long>(s.size());
    for (long i = 0; i < n; ++i) {
        if (!s[static_cast<std::size_t>(i)]) continue;
        for (long o : offsets) {
            const long t = i + o;
            if (t >= 0 && t < n) out[static_cast<std::size_t>(t)] = true;
        }
    }
    return out;
}

std::vector<long> causal_offsets(const AttentionConfig& config, NeighborKind kind) {
    std::vector<long> out;
    for (const SlotOffset& s : slot_offsets(config))
        if (s.kind == kind && s.offset <= 0) out.push_back(s.offset);
    return out;
}

bool is_doubling_layer(std::size_t layer) {
    const std::size_t prev = layer - 1;
    return prev >= 1 && (prev & (prev - 1)) == 0;
}

}  // namespace

ReachSet reach_full(const AttentionConfig& config, std::size_t n, std::size_t query, std::size_t layers) {
    check_args(config, n, query);
    std::vector<long> offsets = causal_offsets(config, NeighborKind::ring);
    const auto skips = causal_offsets(config, NeighborKind::skip);
    offsets.insert(offsets.end(), skips.begin(), skips.end());
    ReachSet r;
    r.query = query;
    r.layers.emplace_back(n, false);
    r.layers[0][query] = true;
    for (std::size_t l = 1; l <= layers; ++l) r.layers.push_back(hop(r.layers.back(), offsets));
    return r;
}

std::size_t reach_restricted(const AttentionConfig& config, std::size_t n, std::size_t query, std::size_t layers) {
    check_args(config, n, query);
    const auto ring = causal_offsets(config, NeighborKind::ring);
    // When pi <= k the -pi slot is labelled RING, but the edge is still there.
    std::vector<long> skips;
    if (config.ablation != Ablation::no_skip) skips.push_back(-static_cast<long>(config.skip_period));
    std::vector<bool> s(n, false);
    s[query] = true;
    for (std::size_t l = 1; l <= layers; ++l) {
        s = hop(s, ring);
        if (is_doubling_layer(l)) s = hop(s, skips);
    }
    return query - static_cast<std::size_t>(std::find(s.begin(), s.end(), true) - s.begin());
}

std::size_t ceil_log2(std::size_t x) {
    if (x == 0) throw std::invalid_argument("ceil_log2(0)");
    std::size_t r = 0;
    while ((std::size_t{1} << r) < x) ++r;
    return r;
}

std::size_t restricted_bound(std::size_t k, std::size_t pi, std::size_t layers) {
    return k * layers + pi * ceil_log2(layers);
}

std::vector<RfRow> rf_report(const AttentionConfig& base, const RfGrid& grid) {
    std::vector<RfRow> rows;
    for (std::size_t k : grid.ks) {
        for (std::size_t pi : grid.pis) {
            for (std::size_t layers : grid.layers) {
                AttentionConfig c = base;
                c.ring_k = k;
                c.skip_period = pi;
                RfRow row;
                row.k = k;
                row.pi = pi;
                row.layers = layers;
                row.n = grid.n ? grid.n : layers * (k + pi) + 1;
                row.query = row.n - 1;
                row.full_reach = reach_full(c, row.n, row.query, layers).extent(layers);
                row.restricted_reach = reach_restricted(c, row.n, row.query, layers);
                row.bound = restricted_bound(k, pi, layers);
                row.bound_holds_restricted = row.restricted_reach <= row.bound;
                row.bound_holds_full = row.full_reach <= row.bound;
                row.interior = row.query >= row.bound;
                rows.push_back(row);
            }
        }
    }
    return rows;
}

std::string rf_csv(const std::vector<RfRow>& rows) {
    std::ostringstream os;
    os << "k,pi,L,full_reach,restricted_reach,bound,bound_holds_restricted,bound_holds_full\n";
    for (const RfRow& r : rows) {
        os << r.k << ',' << r.pi << ',' << r.layers << ',' << r.full_reach << ',' << r.restricted_reach << ','
           << r.bound << ',' << (r.bound_holds_restricted ? 1 : 0) << ',' << (r.bound_holds_full ? 1 : 0) << '\n';
    }
    return os.str();
}

}  // namespace piattn
