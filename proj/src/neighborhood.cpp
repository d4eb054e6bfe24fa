#include "piattn/neighborhood.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

#include "piattn/numerics.hpp"

namespace piattn {

const char* to_string(NeighborKind k) { return k == NeighborKind::ring ? "RING" : "SKIP"; }

std::size_t UnionNeighborhood::valid_count(std::size_t token) const {
    return static_cast<std::size_t>(
        std::count_if(tokens[token].begin(), tokens[token].end(), [](const NeighborEntry& e) { return e.valid; }));
}

std::vector<SlotOffset> slot_offsets(const AttentionConfig& config) {
    std::vector<SlotOffset> out;
    const long k = static_cast<long>(config.ring_k);
    const long pi = static_cast<long>(config.skip_period);
    const bool ring = config.ablation != Ablation::no_ring;
    const bool skip = config.ablation != Ablation::no_skip;
    if (ring) {
        for (long o = -k; o <= k; ++o) {
            if (o == 0 && !config.include_self) continue;
            out.push_back({o, NeighborKind::ring});
        }
    } else if (config.include_self) {
        out.push_back({0, NeighborKind::ring});
    }
    if (skip) {
        for (long o : {-pi, pi}) {
            const bool present = std::any_of(out.begin(), out.end(), [o](const SlotOffset& s) { return s.offset == o; });
            if (!present) out.push_back({o, NeighborKind::skip});
        }
    }
    return out;
}

namespace {

bool offset_enabled(const AttentionConfig& config, const SlotOffset& s) {
    if (config.causal && s.offset > 0) return false;
    if (s.kind == NeighborKind::skip && s.offset > 0 && !config.bidirectional_skip) return false;
    return true;
}

void check_mask(const std::optional<std::vector<bool>>& user_mask, std::size_t n) {
    if (user_mask && user_mask->size() != n) {
        throw ShapeError("user mask length " + std::to_string(user_mask->size()) + " != n " + std::to_string(n));
    }
}

}  // namespace

std::vector<GatherMap> gather_schedule(const AttentionConfig& config, std::size_t n,
                                       const std::optional<std::vector<bool>>& user_mask) {
    if (n == 0) throw std::invalid_argument("gather_schedule: n must be >= 1");
    check_mask(user_mask, n);
    std::vector<GatherMap> maps;
    const long last = static_cast<long>(n) - 1;
    for (const SlotOffset& s : slot_offsets(config)) {
        GatherMap m{s.offset, s.kind, std::vector<std::size_t>(n), std::vector<bool>(n)};
        const bool enabled = offset_enabled(config, s);
        for (std::size_t i = 0; i < n; ++i) {
            const long target = static_cast<long>(i) + s.offset;
            const long clamped = std::clamp(target, 0L, last);
            m.source[i] = static_cast<std::size_t>(clamped);
            bool valid = enabled && target >= 0 && target <= last;
            if (valid && user_mask) valid = (*user_mask)[m.source[i]];
            m.valid[i] = valid;
        }
        maps.push_back(std::move(m));
    }
    return maps;
}

UnionNeighborhood union_from_schedule(const std::vector<GatherMap>& schedule, std::size_t n) {
    UnionNeighborhood u;
    u.n = n;
    u.tokens.assign(n, {});
    for (const GatherMap& m : schedule) {
        u.offsets.push_back({m.offset, m.kind});
        for (std::size_t i = 0; i < n; ++i) {
            u.tokens[i].push_back({m.source[i], m.offset, m.kind, static_cast<bool>(m.valid[i])});
        }
    }
    return u;
}

UnionNeighborhood build_union(const AttentionConfig& config, std::size_t n,
                              const std::optional<std::vector<bool>>& user_mask) {
    if (n == 0) throw std::invalid_argument("build_union: n must be >= 1");
    check_mask(user_mask, n);
    UnionNeighborhood u;
    u.n = n;
    u.offsets = slot_offsets(config);
    u.tokens.assign(n, {});
    const long last = static_cast<long>(n) - 1;
    for (std::size_t i = 0; i < n; ++i) {
        auto& entries = u.tokens[i];
        entries.reserve(u.offsets.size());
        bool any = false;
        for (const SlotOffset& s : u.offsets) {
            const long target = static_cast<long>(i) + s.offset;
            bool valid = offset_enabled(config, s) && target >= 0 && target <= last;
            const auto clamped = static_cast<std::size_t>(std::clamp(target, 0L, last));
            if (valid && user_mask) valid = (*user_mask)[clamped];
            entries.push_back({clamped, s.offset, s.kind, valid});
            any = any || valid;
        }
        if (!any) throw EmptyNeighborhoodError("empty neighborhood at token " + std::to_string(i));
    }
    return u;
}

std::size_t count_score_slots(const UnionNeighborhood& u) {
    std::size_t total = 0;
    for (std::size_t i = 0; i < u.n; ++i) total += u.valid_count(i);
    return total;
}

CompactUnion compact(const UnionNeighborhood& u) {
    CompactUnion c;
    c.n = u.n;
    c.row_ptr.reserve(u.n + 1);
    c.row_ptr.push_back(0);
    for (const auto& entries : u.tokens) {
        for (const NeighborEntry& e : entries) {
            if (!e.valid) continue;
            c.target.push_back(e.target_index);
            c.kind.push_back(e.kind);
        }
        c.row_ptr.push_back(c.target.size());
    }
    return c;
}

std::string union_csv(const UnionNeighborhood& u) {
    std::ostringstream os;
    os << "token,offset,kind,valid\n";
    for (std::size_t i = 0; i < u.n; ++i) {
        for (const NeighborEntry& e : u.tokens[i]) {
            os << i << ',' << e.offset << ',' << to_string(e.kind) << ',' << (e.valid ? 1 : 0) << '\n';
        }
    }
    return os.str();
}

}  // namespace piattn
