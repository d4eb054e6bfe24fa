#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "piattn/config.hpp"

namespace piattn {

enum class NeighborKind : unsigned char { ring, skip };

const char* to_string(NeighborKind k);

struct SlotOffset {
    long offset;
    NeighborKind kind;
    friend bool operator==(const SlotOffset&, const SlotOffset&) = default;
};

struct NeighborEntry {
    std::size_t target_index;  // clamped into [0, n)
    long offset;
    NeighborKind kind;
    bool valid;
    friend bool operator==(const NeighborEntry&, const NeighborEntry&) = default;
};

// Per-token neighbor lists. Every token carries one entry per slot offset, in
// the same order; entries that fall outside [0, n) or are masked keep
// valid=false and a clamped target.
struct UnionNeighborhood {
    std::size_t n = 0;
    std::vector<SlotOffset> offsets;
    std::vector<std::vector<NeighborEntry>> tokens;

    std::size_t valid_count(std::size_t token) const;
};

// Ordered slot offsets for a config: ring offsets ascending, then -pi, then +pi.
// Ablations and ring/skip overlap are applied here.
std::vector<SlotOffset> slot_offsets(const AttentionConfig& config);

// user_mask[j] == false hides key position j from every query.
UnionNeighborhood build_union(const AttentionConfig& config, std::size_t n,
                              const std::optional<std::vector<bool>>& user_mask = std::nullopt);

struct GatherMap {
    long offset;
    NeighborKind kind;
    std::vector<std::size_t> source;  // clamped source rows
    std::vector<bool> valid;
};

std::vector<GatherMap> gather_schedule(const AttentionConfig& config, std::size_t n,
                                       const std::optional<std::vector<bool>>& user_mask = std::nullopt);

// Rebuilds the per-token union from gather maps.
UnionNeighborhood union_from_schedule(const std::vector<GatherMap>& schedule, std::size_t n);

std::size_t count_score_slots(const UnionNeighborhood& u);

// Valid slots only, compressed row layout. The attention kernel and its saved
// activations index by this layout.
struct CompactUnion {
    std::size_t n = 0;
    std::vector<std::size_t> row_ptr;  // n + 1
    std::vector<std::size_t> target;
    std::vector<NeighborKind> kind;

    std::size_t slots() const { return target.size(); }
};

CompactUnion compact(const UnionNeighborhood& u);

// token,offset,kind,valid
std::string union_csv(const UnionNeighborhood& u);

}  // namespace piattn
