#include "piattn/config.hpp"

#include <cmath>
#include <fstream>

namespace piattn {

using nlohmann::json;

void AttentionConfig::validate() const {
    if (d_model == 0) throw ConfigError("model.d_model", "must be positive");
    if (n_heads == 0) throw ConfigError("model.n_heads", "must be positive");
    if (d_model % n_heads != 0) {
        throw ConfigError("model.n_heads", "must divide d_model (" + std::to_string(d_model) + " % " +
                                               std::to_string(n_heads) + " != 0)");
    }
    if (skip_period < 1) throw ConfigError("attention.skip_period", "must be >= 1");
    if (causal && bidirectional_skip) {
        throw ConfigError("attention.bidirectional_skip", "forbidden when causal is true");
    }
    if (!(eps > 0.0 && eps < 0.5)) throw ConfigError("attention.eps", "must lie in (0, 0.5)");
    if (!(logit_clamp > 0.0)) throw ConfigError("attention.logit_clamp", "must be positive");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("attention.dropout_p", "must lie in [0, 1)");
    if (ablation == Ablation::static_alpha && !(static_alpha > 0.0 && static_alpha < 1.0)) {
        throw ConfigError("attention.static_alpha", "must lie in (0, 1)");
    }
}

std::vector<std::string> AttentionConfig::warnings() const {
    std::vector<std::string> w;
    const bool ring = ablation != Ablation::no_ring;
    const bool skip = ablation != Ablation::no_skip;
    if (ring && skip && skip_period <= ring_k) {
        w.push_back("skip_period " + std::to_string(skip_period) + " <= ring_k " + std::to_string(ring_k) +
                    ": skip targets coincide with ring targets and are kept once as RING");
    }
    if (!include_self && causal && (ablation == Ablation::no_ring || ring_k == 0)) {
        w.push_back("include_self=false leaves causal token 0 with an empty neighborhood");
    }
    return w;
}

void ModelConfig::validate() const {
    if (layers == 0) throw ConfigError("model.layers", "must be positive");
    if (d_ff == 0) throw ConfigError("model.d_ff", "must be positive");
    if (vocab < 2) throw ConfigError("model.vocab", "must be >= 2");
    if (max_seq == 0) throw ConfigError("model.max_seq", "must be positive");
    attention.validate();
}

void TrainConfig::validate() const {
    if (!(lr >= 0.0)) throw ConfigError("train.lr", "must be non-negative");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay", "must be non-negative");
    if (!(clip_norm > 0.0)) throw ConfigError("train.clip_norm", "must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1", "must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2", "must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps", "must be positive");
    if (batch_size == 0) throw ConfigError("train.batch_size", "must be positive");
    if (eval_interval == 0) throw ConfigError("train.eval_interval", "must be positive");
    if (eval_batches == 0) throw ConfigError("train.eval_batches", "must be positive");
    if (!(target_accuracy >= 0.0 && target_accuracy <= 1.0)) {
        throw ConfigError("train.target_accuracy", "must lie in [0, 1]");
    }
}

void TaskSpec::validate() const {
    if (seq_len < 2) throw ConfigError("task.seq_len", "must be >= 2");
    if (kind == TaskKind::copy_at_pi) {
        if (vocab < 2) throw ConfigError("task.vocab", "must be >= 2");
        if (delay < 1 || delay > seq_len - 1) throw ConfigError("task.delay", "must lie in [1, seq_len-1]");
    }
    if (kind == TaskKind::needle_retrieval) {
        if (vocab < 4) throw ConfigError("task.vocab", "needle task needs >= 4 symbols (2 markers + keys)");
        if (min_distance < 1 || min_distance + 2 > seq_len - 1) {
            throw ConfigError("task.min_distance", "must leave room for key marker, key and query");
        }
    }
    if (kind == TaskKind::char_lm && corpus.empty()) throw ConfigError("task.corpus", "required for char_lm");
}

std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::full: return "full";
        case Ablation::no_skip: return "no_skip";
        case Ablation::no_gate: return "no_gate";
        case Ablation::static_alpha: return "static_alpha";
        case Ablation::no_ring: return "no_ring";
    }
    return "?";
}

std::string to_string(TaskKind k) {
    switch (k) {
        case TaskKind::copy_at_pi: return "copy_at_pi";
        case TaskKind::needle_retrieval: return "needle_retrieval";
        case TaskKind::char_lm: return "char_lm";
    }
    return "?";
}

Ablation parse_ablation(const std::string& s) {
    if (s == "full") return Ablation::full;
    if (s == "no_skip") return Ablation::no_skip;
    if (s == "no_gate") return Ablation::no_gate;
    if (s == "static_alpha") return Ablation::static_alpha;
    if (s == "no_ring") return Ablation::no_ring;
    throw ConfigError("attention.ablation", "unknown ablation '" + s + "'");
}

TaskKind parse_task_kind(const std::string& s) {
    if (s == "copy_at_pi" || s == "copy") return TaskKind::copy_at_pi;
    if (s == "needle_retrieval" || s == "needle") return TaskKind::needle_retrieval;
    if (s == "char_lm" || s == "charlm") return TaskKind::char_lm;
    throw ConfigError("task.kind", "unknown task '" + s + "'");
}

namespace {

std::string clamp_mode_name(ClampMode m) { return m == ClampMode::raw_score ? "raw_score" : "with_prior"; }
std::string gate_input_name(GateInput g) { return g == GateInput::token ? "token" : "query"; }

template <typename T>
void read(const json& j, const std::string& section, const char* key, T& out) {
    if (!j.contains(key)) return;
    const std::string field = section + "." + key;
    const json& v = j.at(key);
    try {
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError(field, "expected boolean");
            out = v.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError(field, "expected string");
            out = v.get<std::string>();
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigError(field, "expected number");
            out = v.get<T>();
        } else {
            if (!v.is_number_integer() || v.get<long long>() < 0) {
                throw ConfigError(field, "expected non-negative integer");
            }
            out = static_cast<T>(v.get<long long>());
        }
    } catch (const json::exception& e) {
        throw ConfigError(field, e.what());
    }
}

void reject_unknown(const json& j, const std::string& section, std::initializer_list<const char*> keys) {
    if (!j.is_object()) throw ConfigError(section, "expected object");
    for (const auto& [k, _] : j.items()) {
        bool known = false;
        for (const char* key : keys) known = known || k == key;
        if (!known) throw ConfigError(section + "." + k, "unknown key");
    }
}

}  // namespace

json to_json(const AttentionConfig& c) {
    return json{{"ring_k", c.ring_k},
                {"skip_period", c.skip_period},
                {"causal", c.causal},
                {"bidirectional_skip", c.bidirectional_skip},
                {"include_self", c.include_self},
                {"eps", c.eps},
                {"logit_clamp", c.logit_clamp},
                {"dropout_p", c.dropout_p},
                {"ablation", to_string(c.ablation)},
                {"static_alpha", c.static_alpha},
                {"clamp_mode", clamp_mode_name(c.clamp_mode)},
                {"gate_input", gate_input_name(c.gate_input)}};
}

json to_json(const ModelConfig& c) {
    return json{{"layers", c.layers},
                {"d_model", c.attention.d_model},
                {"n_heads", c.attention.n_heads},
                {"d_ff", c.d_ff},
                {"vocab", c.vocab},
                {"max_seq", c.max_seq}};
}

json to_json(const TrainConfig& c) {
    return json{{"lr", c.lr},
                {"weight_decay", c.weight_decay},
                {"clip_norm", c.clip_norm},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"adam_eps", c.adam_eps},
                {"batch_size", c.batch_size},
                {"steps", c.steps},
                {"warmup_steps", c.warmup_steps},
                {"cosine_decay", c.cosine_decay},
                {"seed", c.seed},
                {"eval_interval", c.eval_interval},
                {"eval_batches", c.eval_batches},
                {"target_accuracy", c.target_accuracy}};
}

json to_json(const TaskSpec& t) {
    return json{{"kind", to_string(t.kind)},
                {"vocab", t.vocab},
                {"seq_len", t.seq_len},
                {"delay", t.delay},
                {"min_distance", t.min_distance},
                {"corpus", t.corpus}};
}

json to_json(const RunConfig& r) {
    return json{{"model", to_json(r.model)},
                {"attention", to_json(r.model.attention)},
                {"train", to_json(r.train)},
                {"task", to_json(r.task)}};
}

AttentionConfig attention_from_json(const json& j, std::size_t d_model, std::size_t n_heads) {
    AttentionConfig c;
    c.d_model = d_model;
    c.n_heads = n_heads;
    if (j.is_null()) return c;
    reject_unknown(j, "attention",
                   {"ring_k", "skip_period", "causal", "bidirectional_skip", "include_self", "eps", "logit_clamp",
                    "dropout_p", "ablation", "static_alpha", "clamp_mode", "gate_input"});
    read(j, "attention", "ring_k", c.ring_k);
    read(j, "attention", "skip_period", c.skip_period);
    read(j, "attention", "causal", c.causal);
    read(j, "attention", "bidirectional_skip", c.bidirectional_skip);
    read(j, "attention", "include_self", c.include_self);
    read(j, "attention", "eps", c.eps);
    read(j, "attention", "logit_clamp", c.logit_clamp);
    read(j, "attention", "dropout_p", c.dropout_p);
    read(j, "attention", "static_alpha", c.static_alpha);
    std::string s;
    if (j.contains("ablation")) {
        read(j, "attention", "ablation", s);
        c.ablation = parse_ablation(s);
    }
    if (j.contains("clamp_mode")) {
        read(j, "attention", "clamp_mode", s);
        if (s == "raw_score") c.clamp_mode = ClampMode::raw_score;
        else if (s == "with_prior") c.clamp_mode = ClampMode::with_prior;
        else throw ConfigError("attention.clamp_mode", "expected raw_score or with_prior");
    }
    if (j.contains("gate_input")) {
        read(j, "attention", "gate_input", s);
        if (s == "token") c.gate_input = GateInput::token;
        else if (s == "query") c.gate_input = GateInput::query;
        else throw ConfigError("attention.gate_input", "expected token or query");
    }
    return c;
}

ModelConfig model_from_json(const json& j) {
    ModelConfig c;
    std::size_t d_model = c.attention.d_model;
    std::size_t n_heads = c.attention.n_heads;
    if (j.contains("model")) {
        const json& m = j.at("model");
        reject_unknown(m, "model", {"layers", "d_model", "n_heads", "d_ff", "vocab", "max_seq"});
        read(m, "model", "layers", c.layers);
        read(m, "model", "d_model", d_model);
        read(m, "model", "n_heads", n_heads);
        read(m, "model", "d_ff", c.d_ff);
        read(m, "model", "vocab", c.vocab);
        read(m, "model", "max_seq", c.max_seq);
    }
    c.attention = attention_from_json(j.contains("attention") ? j.at("attention") : json(), d_model, n_heads);
    return c;
}

TrainConfig train_from_json(const json& j) {
    TrainConfig c;
    if (j.is_null()) return c;
    reject_unknown(j, "train",
                   {"lr", "weight_decay", "clip_norm", "beta1", "beta2", "adam_eps", "batch_size", "steps",
                    "warmup_steps", "cosine_decay", "seed", "eval_interval", "eval_batches", "target_accuracy"});
    read(j, "train", "lr", c.lr);
    read(j, "train", "weight_decay", c.weight_decay);
    read(j, "train", "clip_norm", c.clip_norm);
    read(j, "train", "beta1", c.beta1);
    read(j, "train", "beta2", c.beta2);
    read(j, "train", "adam_eps", c.adam_eps);
    read(j, "train", "batch_size", c.batch_size);
    read(j, "train", "steps", c.steps);
    read(j, "train", "warmup_steps", c.warmup_steps);
    read(j, "train", "cosine_decay", c.cosine_decay);
    read(j, "train", "seed", c.seed);
    read(j, "train", "eval_interval", c.eval_interval);
    read(j, "train", "eval_batches", c.eval_batches);
    read(j, "train", "target_accuracy", c.target_accuracy);
    return c;
}

TaskSpec task_from_json(const json& j) {
    TaskSpec t;
    if (j.is_null()) return t;
    reject_unknown(j, "task", {"kind", "vocab", "seq_len", "delay", "min_distance", "corpus"});
    if (j.contains("kind")) {
        std::string s;
        read(j, "task", "kind", s);
        t.kind = parse_task_kind(s);
    }
    read(j, "task", "vocab", t.vocab);
    read(j, "task", "seq_len", t.seq_len);
    read(j, "task", "delay", t.delay);
    read(j, "task", "min_distance", t.min_distance);
    read(j, "task", "corpus", t.corpus);
    return t;
}

RunConfig run_config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config", "top level must be an object");
    reject_unknown(j, "config", {"model", "attention", "train", "task"});
    RunConfig r;
    r.model = model_from_json(j);
    r.train = train_from_json(j.contains("train") ? j.at("train") : json());
    r.task = task_from_json(j.contains("task") ? j.at("task") : json());
    r.model.validate();
    r.train.validate();
    r.task.validate();
    return r;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot open '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw ConfigError("config", std::string("invalid JSON: ") + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace piattn
