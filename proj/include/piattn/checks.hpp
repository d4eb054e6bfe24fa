#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "piattn/config.hpp"
#include "piattn/model.hpp"

namespace piattn {

// Property suites shared by the CLI and the acceptance runner. Each returns
// per-case rows plus a pass flag; CSV writers use fixed formatting so reruns
// with the same seed are byte-identical.

struct OracleGrid {
    std::vector<std::size_t> ns, ks, pis, heads;
    std::vector<bool> causal{true, false};
    std::vector<Ablation> ablations{Ablation::full, Ablation::no_skip, Ablation::no_gate, Ablation::static_alpha,
                                    Ablation::no_ring};
    std::size_t d_model = 8;

    static OracleGrid full();   // 2400 configurations
    static OracleGrid small();  // 120 configurations
    std::size_t size() const;
};

struct OracleRow {
    std::size_t n = 0, k = 0, pi = 0, heads = 0;
    bool causal = true;
    Ablation ablation = Ablation::full;
    double max_abs_diff = 0.0;
};

struct OracleReport {
    std::vector<OracleRow> rows;
    double worst = 0.0;
    bool pass = false;
};

OracleReport oracle_check(const OracleGrid& grid, std::uint64_t seed, double tolerance = 1e-10);
std::string oracle_csv(const OracleReport& report);

struct GradRow {
    std::string tensor;
    double max_rel_error = 0.0;
};

struct GradReport {
    std::vector<GradRow> rows;
    double worst = 0.0;
    bool pass = false;
};

// Scalar loss through two stacked blocks (n=6, d_model=16, H=2, k=1, pi=2).
GradReport block_grad_check(std::uint64_t seed, double tolerance = 1e-6);
std::string grad_csv(const GradReport& report);

struct KlReport {
    struct SweepRow {
        double eps, mean_kl, max_kl;
    };
    std::vector<SweepRow> sweep;  // fixed inputs, eps decreasing to 0
    bool zero_at_eps0 = false;
    bool nonincreasing = false;
    double random_mean = 0.0;  // eps 1e-4, clamp 20, N(0,1) scores
    std::size_t seeds = 0, n = 0;
    bool pass = false;
};

KlReport kl_check(std::uint64_t seed, std::size_t seeds = 100, std::size_t n = 256);
std::string kl_csv(const KlReport& report);

struct DecodeRow {
    std::size_t layers = 0, k = 0, pi = 0;
    Ablation ablation = Ablation::full;
    double max_abs_diff = 0.0;
};

struct DecodeReport {
    std::vector<DecodeRow> rows;
    double worst = 0.0;
    bool pass = false;
};

// Greedy 40-token rollouts compared against one teacher-forced forward.
DecodeReport decode_check(std::uint64_t seed, std::size_t steps = 40, double tolerance = 1e-8);
std::string decode_csv(const DecodeReport& report);

// Largest |cached - full| over a token sequence.
double decode_consistency(const ModelParams& params, const ModelConfig& config, const std::vector<std::size_t>& tokens);

// Desk presets for the toy tasks.
RunConfig preset(TaskKind kind, const std::string& data_dir);

struct SkipNecessity {
    double full_accuracy = 0.0;
    std::size_t full_steps = 0;
    double no_skip_accuracy = 0.0;
    std::size_t no_skip_steps = 0;
    std::size_t no_skip_count = 0, no_skip_correct = 0;
    double chance = 0.0;
    // P(X <= correct) under accuracy chance + 0.05: small means below the ceiling.
    double p_below_ceiling = 0.0;
    // P(X >= correct) under chance: small would mean better than chance.
    double p_above_chance = 0.0;
    bool reachable_full = false, reachable_no_skip = false;
    bool pass = false;
};

// Copy-at-pi with D = pi = 8, two layers, k = 2: the full model must learn
// the task and the no_skip model must stay at chance.
SkipNecessity skip_necessity(std::uint64_t seed, std::size_t threads, std::size_t eval_tokens = 10000);

}  // namespace piattn
