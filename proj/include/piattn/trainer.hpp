#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "piattn/model.hpp"

namespace piattn {

constexpr long kIgnoreIndex = -1;

struct CrossEntropy {
    double loss = 0.0;  // mean over counted positions
    Matrix grad;        // dloss/dlogits
    std::size_t count = 0;
    std::size_t correct = 0;  // argmax == target
};

// Mean token NLL over positions whose target is not ignore_index.
CrossEntropy cross_entropy(const Matrix& logits, std::span<const long> targets, long ignore_index = kIgnoreIndex);

// Per-position NLL sum and argmax hits without normalizing; grad receives
// (softmax - onehot) * grad_scale.
double cross_entropy_sum(const Matrix& logits, std::span<const long> targets, long ignore_index, double grad_scale,
                         Matrix* grad, std::size_t* count, std::size_t* correct);

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AdamState {
    std::vector<double> m, v;
    std::size_t t = 0;
};

struct StepReport {
    bool applied = false;
    double grad_norm = 0.0;
    double clip_scale = 1.0;
};

// Global-norm clip, then bias-corrected AdamW with decoupled decay:
//   theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
// Non-finite gradients leave params and state untouched.
StepReport optimizer_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                          const TrainConfig& config, double lr);

// Linear warmup, then optional cosine decay to zero at config.steps.
double learning_rate(const TrainConfig& config, std::size_t step);

struct Task {
    TaskSpec spec;
    std::size_t vocab = 0;
    std::string alphabet;  // char_lm only: token id -> character
    std::string text;      // char_lm corpus
};

// Loads the corpus for char_lm (vocab becomes the corpus alphabet size).
Task load_task(const TaskSpec& spec);
// Needle task markers.
std::size_t needle_key_marker(const Task& task);
std::size_t needle_query_marker(const Task& task);

struct Batch {
    std::vector<std::vector<std::size_t>> inputs;
    std::vector<std::vector<long>> targets;
};

Batch make_batch(const Task& task, Rng& rng, std::size_t batch_size);

struct Evaluation {
    double loss = 0.0;
    double accuracy = 0.0;
    std::size_t correct = 0;
    std::size_t count = 0;
};

// Draws `batches` batches from a generator seeded with eval_seed.
Evaluation evaluate(const ModelParams& params, const ModelConfig& config, const Task& task, std::uint64_t eval_seed,
                    std::size_t batches, std::size_t batch_size, std::size_t threads = 1);

struct MetricRow {
    std::size_t step = 0;
    double loss = 0.0;      // training loss at this step
    double accuracy = 0.0;  // evaluation accuracy
    double tokens_per_sec = 0.0;  // wall clock; kept out of CSV output
};

struct TrainOptions {
    std::size_t threads = 1;
    std::function<void(const MetricRow&)> on_eval;
};

struct TrainResult {
    ModelParams params;
    std::vector<MetricRow> metrics;
    std::vector<double> losses;  // every step
    std::size_t steps_run = 0;
    std::size_t rejected_steps = 0;
    Evaluation final_eval;
    double wall_seconds = 0.0;
};

// Loss and gradient for a batch, summed per sequence in index order.
struct BatchGradient {
    double loss = 0.0;
    ModelParams grads;
    std::size_t count = 0;
    std::size_t correct = 0;
};

BatchGradient batch_gradient(const ModelParams& params, const ModelConfig& config, const Batch& batch,
                             std::size_t threads, std::uint64_t dropout_seed);

TrainResult train(const RunConfig& config, const Task& task, const TrainOptions& options = {});
TrainResult train(const RunConfig& config, const Task& task, ModelParams init, const TrainOptions& options = {});

// step,loss,accuracy with fixed formatting.
std::string metrics_csv(const std::vector<MetricRow>& rows);

// Runs fn(i) for i in [0, count) over `threads` workers; each index is
// processed by exactly one worker.
void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& fn);

// P(X >= k) and P(X <= k) for X ~ Binomial(n, p).
double binomial_upper_tail(std::size_t n, std::size_t k, double p);
double binomial_lower_tail(std::size_t n, std::size_t k, double p);

}  // namespace piattn
