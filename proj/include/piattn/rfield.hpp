#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "piattn/config.hpp"

namespace piattn {

// layers[l][j] is true when token j can influence the query after l stacked
// layers; layers[0] holds only the query.
struct ReachSet {
    std::size_t query = 0;
    std::vector<std::vector<bool>> layers;

    std::size_t depth() const { return layers.size() - 1; }
    std::size_t count(std::size_t layer) const;
    std::size_t leftmost(std::size_t layer) const;
    // Leftward token count: query - leftmost.
    std::size_t extent(std::size_t layer) const { return query - leftmost(layer); }
};

// One union hop per layer over the real edge set. The residual stream keeps
// every token already reached, so sets never shrink.
ReachSet reach_full(const AttentionConfig& config, std::size_t n, std::size_t query, std::size_t layers);

// Proof-sketch accounting: a ring hop every layer, plus a skip hop in the
// same layer only when the covered interval doubles (layers 2, 3, 5, 9, ...,
// i.e. ceil(log2 L) of the first L). Returns the leftward extent.
std::size_t reach_restricted(const AttentionConfig& config, std::size_t n, std::size_t query, std::size_t layers);

std::size_t ceil_log2(std::size_t x);
// kL + pi * ceil(log2 L)
std::size_t restricted_bound(std::size_t k, std::size_t pi, std::size_t layers);

struct RfGrid {
    std::vector<std::size_t> ks{1, 2, 3, 4};
    std::vector<std::size_t> pis{2, 4, 8, 16};
    std::vector<std::size_t> layers{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    // 0 places the query far enough right that no boundary is hit.
    std::size_t n = 0;
};

struct RfRow {
    std::size_t k = 0, pi = 0, layers = 0;
    std::size_t n = 0, query = 0;
    std::size_t full_reach = 0;
    std::size_t restricted_reach = 0;
    std::size_t bound = 0;
    bool bound_holds_restricted = false;
    bool bound_holds_full = false;
    bool interior = false;  // query - bound >= 0, so no boundary truncation
};

// ring_k and skip_period of base are overridden per grid point.
std::vector<RfRow> rf_report(const AttentionConfig& base, const RfGrid& grid);
std::string rf_csv(const std::vector<RfRow>& rows);

}  // namespace piattn
