#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "piattn/attention.hpp"

namespace piattn {

struct Rates {
    double tc = 1e9;   // multiply-adds per second
    double hbm = 1e9;  // elements per second
    double net = 1e9;
    double act = 1e9;
};

struct CostParams {
    Rates rates;
    double c1 = 1.0, c2 = 1.0, c3 = 1.0;

    void validate() const;
};

// Per-layer latency
//   T = c1 n k d_h / g_tc + c2 n d_h / min(g_hbm, g_net) + c3 n d_h / g_act
double cost_model_eval(const CostParams& params, double n, double k, double d_h);

struct Measurement {
    double n = 0, k = 0, d_h = 0, seconds = 0;
    // Rates in effect for this measurement; the fit's defaults otherwise.
    std::optional<Rates> rates;
};

class RankError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CostFit {
    double c1 = 0, c2 = 0, c3 = 0;
    double relative_residual = 0;  // ||A c - t|| / ||t||
    std::size_t rank = 0;
};

// Least squares for (c1, c2, c3). Throws RankError unless the design has
// full column rank. With every measurement at the same rates the two
// bandwidth terms are proportional; pinning c3 leaves (c1, c2) identifiable.
CostFit fit_cost_constants(const std::vector<Measurement>& measurements, const Rates& rates,
                           std::optional<double> fixed_c3 = std::nullopt);

// Parses "n,k,d_h,seconds" CSV with optional trailing
// gamma_tc,gamma_hbm,gamma_net,gamma_act columns.
std::vector<Measurement> parse_measurements_csv(const std::string& text);

// Elements exchanged per layer: 2 B H d_h pi.
std::size_t comm_volume(std::size_t batch, std::size_t heads, std::size_t d_h, std::size_t pi);

struct Message {
    int stage = 0;  // 1 halo exchange, 2 periodic gather
    std::size_t src = 0, dst = 0;
    std::vector<std::size_t> rows;  // global K/V row indices carried
    std::size_t elements = 0;
};

struct StageEvent {
    std::size_t microbatch = 0;
    int stage = 0;
    double start = 0, end = 0;
};

struct CommReport {
    std::size_t shards = 0;
    std::size_t n = 0, padded_n = 0, shard_len = 0;
    std::size_t formula_elements = 0;
    std::vector<Message> messages;
    std::size_t tallied_elements = 0;
    std::size_t halo_rows = 0, partner_rows = 0;
    std::size_t received_elements = 0;
    bool conserved = false;
    std::vector<StageEvent> timeline;
    double sequential_makespan = 0;
    double pipelined_makespan = 0;
};

// Contiguous shards over P virtual devices. Stage 1 fetches ring halos,
// stage 2 fetches stride-pi partners that live on other shards, stage 3 is
// local. The timeline runs one sequence per microbatch through a two-slot
// pipeline where the gather for t+1 overlaps the fusion of t.
CommReport ring_simulate(std::size_t shards, std::size_t n, const AttentionConfig& config, std::size_t batch,
                         const Rates& rates = {});

std::string messages_csv(const CommReport& report);
std::string timeline_csv(const CommReport& report);

struct WorkRow {
    std::size_t n = 0, k = 0, pi = 0, heads = 0, d_h = 0;
    Ablation ablation = Ablation::full;
    std::size_t score_slots = 0;
    WorkCounters work;
    std::size_t memory_bound = 0;  // n (2k+3) d_h H + n H
    double score_ratio = 0;        // score_evals(n) / score_evals(n/2); 0 for the first n
};

struct WorkGrid {
    std::vector<std::size_t> ns{256, 512, 1024, 2048};
    std::vector<std::size_t> ks{1, 4};
    std::vector<std::size_t> pis{16};
    std::vector<Ablation> ablations{Ablation::full, Ablation::no_skip};
    std::size_t heads = 2;
    std::size_t d_model = 16;
    bool causal = true;
};

std::size_t memory_bound(std::size_t n, std::size_t k, std::size_t d_h, std::size_t heads);

// Runs the instrumented forward on random inputs for every grid point.
std::vector<WorkRow> work_report(const WorkGrid& grid, std::uint64_t seed);
std::string work_csv(const std::vector<WorkRow>& rows);

struct BenchRow {
    WorkRow row;
    double median_seconds = 0;
};

// Median wall time of the forward pass per grid point.
std::vector<BenchRow> bench(const WorkGrid& grid, std::size_t repeats, std::uint64_t seed);

}  // namespace piattn
