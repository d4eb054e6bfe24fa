#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace piattn {

// Raised for any invalid configuration. `field` names the offending key using
// the dotted JSON path (e.g. "model.n_heads").
class ConfigError : public std::invalid_argument {
public:
    ConfigError(std::string field, const std::string& message)
        : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

enum class Ablation { full, no_skip, no_gate, static_alpha, no_ring };

// Where the logit clamp is applied relative to the log-prior.
enum class ClampMode {
    raw_score,   // clamp(s) + log w
    with_prior,  // clamp(s + log w)
};

enum class GateInput { token, query };

struct AttentionConfig {
    std::size_t d_model = 16;
    std::size_t n_heads = 2;
    std::size_t ring_k = 4;
    std::size_t skip_period = 16;
    bool causal = true;
    bool bidirectional_skip = false;
    bool include_self = true;
    double eps = 1e-4;
    double logit_clamp = 20.0;
    double dropout_p = 0.0;
    Ablation ablation = Ablation::full;
    double static_alpha = 0.5;
    ClampMode clamp_mode = ClampMode::raw_score;
    GateInput gate_input = GateInput::token;

    std::size_t head_dim() const { return d_model / n_heads; }
    std::size_t gate_hidden() const { return d_model / 2; }
    void validate() const;
    // Non-fatal notes, e.g. ring/skip overlap when skip_period <= ring_k.
    std::vector<std::string> warnings() const;
};

struct ModelConfig {
    std::size_t layers = 2;
    std::size_t d_ff = 64;
    std::size_t vocab = 16;
    std::size_t max_seq = 32;
    AttentionConfig attention;

    void validate() const;
};

struct TrainConfig {
    double lr = 3e-4;
    double weight_decay = 0.1;
    double clip_norm = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t batch_size = 8;
    std::size_t steps = 1000;
    std::size_t warmup_steps = 0;
    bool cosine_decay = false;
    std::uint64_t seed = 1;
    std::size_t eval_interval = 100;
    std::size_t eval_batches = 4;
    // Stop once evaluation accuracy reaches this value (0 disables).
    double target_accuracy = 0.0;

    void validate() const;
};

enum class TaskKind { copy_at_pi, needle_retrieval, char_lm };

struct TaskSpec {
    TaskKind kind = TaskKind::copy_at_pi;
    std::size_t vocab = 16;
    std::size_t seq_len = 32;
    std::size_t delay = 8;        // copy_at_pi
    std::size_t min_distance = 8; // needle_retrieval
    std::string corpus;           // char_lm

    void validate() const;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    TaskSpec task;
};

std::string to_string(Ablation a);
std::string to_string(TaskKind k);
Ablation parse_ablation(const std::string& s);
TaskKind parse_task_kind(const std::string& s);

nlohmann::json to_json(const AttentionConfig& c);
nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const TaskSpec& t);
nlohmann::json to_json(const RunConfig& r);

// Missing keys keep their defaults; present keys are type- and range-checked.
AttentionConfig attention_from_json(const nlohmann::json& j, std::size_t d_model, std::size_t n_heads);
ModelConfig model_from_json(const nlohmann::json& j);
TrainConfig train_from_json(const nlohmann::json& j);
TaskSpec task_from_json(const nlohmann::json& j);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

}  // namespace piattn
