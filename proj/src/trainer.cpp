#include "piattn/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numbers>
#include <sstream>
#include <thread>

namespace piattn {

double cross_entropy_sum(const Matrix& logits, std::span<const long> targets, long ignore_index, double grad_scale,
                         Matrix* grad, std::size_t* count, std::size_t* correct) {
    if (targets.size() != logits.rows()) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(logits.rows()) + " rows");
    }
    const std::size_t vocab = logits.cols();
    if (grad) *grad = Matrix(logits.rows(), vocab);
    double total = 0.0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        if (targets[i] == ignore_index) continue;
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
            throw std::out_of_range("cross_entropy: target " + std::to_string(targets[i]) + " outside vocab");
        }
        const auto row = logits.row(i);
        const auto t = static_cast<std::size_t>(targets[i]);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        const double lse = mx + std::log(z);
        total += lse - row[t];
        if (count) ++*count;
        if (correct && std::max_element(row.begin(), row.end()) - row.begin() == static_cast<long>(t)) ++*correct;
        if (grad) {
            auto g = grad->row(i);
            for (std::size_t v = 0; v < vocab; ++v) g[v] = std::exp(row[v] - lse) * grad_scale;
            g[t] -= grad_scale;
        }
    }
    return total;
}

CrossEntropy cross_entropy(const Matrix& logits, std::span<const long> targets, long ignore_index) {
    const auto n = static_cast<std::size_t>(
        std::count_if(targets.begin(), targets.end(), [&](long t) { return t != ignore_index; }));
    if (n == 0) throw std::invalid_argument("cross_entropy: every target is ignore_index");
    CrossEntropy ce;
    const double scale = 1.0 / static_cast<double>(n);
    ce.loss = cross_entropy_sum(logits, targets, ignore_index, scale, &ce.grad, &ce.count, &ce.correct) * scale;
    return ce;
}

StepReport optimizer_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                          const TrainConfig& config, double lr) {
    if (params.size() != grads.size()) throw ShapeError("optimizer_step: params/grads size mismatch");
    StepReport rep;
    double sq = 0.0;
    for (double g : grads) sq += g * g;
    rep.grad_norm = std::sqrt(sq);
    if (!std::isfinite(rep.grad_norm)) return rep;
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    if (rep.grad_norm > config.clip_norm) rep.clip_scale = config.clip_norm / rep.grad_norm;
    ++state.t;
    const double b1 = config.beta1, b2 = config.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i] * rep.clip_scale;
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        params[i] -= lr * (mhat / (std::sqrt(vhat) + config.adam_eps) + config.weight_decay * params[i]);
    }
    rep.applied = true;
    return rep;
}

double learning_rate(const TrainConfig& config, std::size_t step) {
    if (config.warmup_steps > 0 && step <= config.warmup_steps) {
        return config.lr * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
    }
    if (!config.cosine_decay || config.steps <= config.warmup_steps) return config.lr;
    const double progress = static_cast<double>(step - config.warmup_steps) /
                            static_cast<double>(config.steps - config.warmup_steps);
    return config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

Task load_task(const TaskSpec& spec) {
    spec.validate();
    Task task;
    task.spec = spec;
    task.vocab = spec.vocab;
    if (spec.kind == TaskKind::char_lm) {
        std::ifstream in(spec.corpus, std::ios::binary);
        if (!in) throw std::runtime_error("char_lm corpus missing: '" + spec.corpus + "'");
        std::ostringstream buf;
        buf << in.rdbuf();
        task.text = buf.str();
        if (task.text.size() < spec.seq_len + 1) {
            throw std::runtime_error("char_lm corpus shorter than seq_len + 1: '" + spec.corpus + "'");
        }
        std::string alpha = task.text;
        std::sort(alpha.begin(), alpha.end());
        alpha.erase(std::unique(alpha.begin(), alpha.end()), alpha.end());
        task.alphabet = alpha;
        task.vocab = alpha.size();
    }
    return task;
}

std::size_t needle_key_marker(const Task& task) { return task.vocab - 2; }
std::size_t needle_query_marker(const Task& task) { return task.vocab - 1; }

Batch make_batch(const Task& task, Rng& rng, std::size_t batch_size) {
    const TaskSpec& s = task.spec;
    const std::size_t n = s.seq_len;
    Batch b;
    b.inputs.assign(batch_size, std::vector<std::size_t>(n));
    b.targets.assign(batch_size, std::vector<long>(n, kIgnoreIndex));
    std::vector<std::size_t> lookup(256, 0);
    for (std::size_t i = 0; i < task.alphabet.size(); ++i) lookup[static_cast<unsigned char>(task.alphabet[i])] = i;
    for (std::size_t r = 0; r < batch_size; ++r) {
        auto& in = b.inputs[r];
        auto& tg = b.targets[r];
        switch (s.kind) {
            case TaskKind::copy_at_pi:
                for (auto& t : in) t = rng.below(task.vocab);
                for (std::size_t i = s.delay; i < n; ++i) tg[i] = static_cast<long>(in[i - s.delay]);
                break;
            case TaskKind::needle_retrieval: {
                const std::size_t content = task.vocab - 2;
                for (auto& t : in) t = rng.below(content);
                const std::size_t q = n - 1;
                const std::size_t key_pos = 1 + rng.below(q - s.min_distance);
                in[key_pos - 1] = needle_key_marker(task);
                in[q] = needle_query_marker(task);
                tg[q] = static_cast<long>(in[key_pos]);
                break;
            }
            case TaskKind::char_lm: {
                const std::size_t start = rng.below(task.text.size() - n);
                for (std::size_t i = 0; i < n; ++i) {
                    in[i] = lookup[static_cast<unsigned char>(task.text[start + i])];
                    tg[i] = static_cast<long>(lookup[static_cast<unsigned char>(task.text[start + i + 1])]);
                }
                break;
            }
        }
    }
    return b;
}

void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, count));
    if (workers == 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < count; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::size_t counted_targets(const Batch& batch) {
    std::size_t n = 0;
    for (const auto& t : batch.targets) n += static_cast<std::size_t>(std::count_if(t.begin(), t.end(), [](long v) {
        return v != kIgnoreIndex;
    }));
    return n;
}

}  // namespace

BatchGradient batch_gradient(const ModelParams& params, const ModelConfig& config, const Batch& batch,
                             std::size_t threads, std::uint64_t dropout_seed) {
    const std::size_t total = counted_targets(batch);
    if (total == 0) throw std::invalid_argument("batch_gradient: batch has no counted targets");
    const double scale = 1.0 / static_cast<double>(total);
    const std::size_t rows = batch.inputs.size();
    std::vector<ModelParams> per_seq(rows);
    std::vector<double> loss(rows, 0.0);
    std::vector<std::size_t> counts(rows, 0), hits(rows, 0);
    const bool dropout = config.attention.dropout_p > 0.0;
    parallel_for(rows, threads, [&](std::size_t r) {
        Rng rng(mix_seed(dropout_seed, r));
        ForwardOptions opt{dropout, dropout ? &rng : nullptr};
        const ModelForward fwd = model_forward(params, config, batch.inputs[r], opt);
        Matrix dlogits;
        loss[r] = cross_entropy_sum(fwd.logits, batch.targets[r], kIgnoreIndex, scale, &dlogits, &counts[r], &hits[r]);
        per_seq[r] = model_backward(params, config, fwd.cache, dlogits);
    });
    BatchGradient out;
    out.grads = std::move(per_seq[0]);
    double sum = loss[0];
    out.count = counts[0];
    out.correct = hits[0];
    for (std::size_t r = 1; r < rows; ++r) {
        auto dst = flatten(out.grads);
        const auto src = flatten(per_seq[r]);
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        unflatten(out.grads, dst);
        sum += loss[r];
        out.count += counts[r];
        out.correct += hits[r];
    }
    out.loss = sum * scale;
    return out;
}

Evaluation evaluate(const ModelParams& params, const ModelConfig& config, const Task& task, std::uint64_t eval_seed,
                    std::size_t batches, std::size_t batch_size, std::size_t threads) {
    Rng rng(eval_seed);
    Evaluation ev;
    double loss = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
        const Batch batch = make_batch(task, rng, batch_size);
        std::vector<double> l(batch_size, 0.0);
        std::vector<std::size_t> c(batch_size, 0), h(batch_size, 0);
        parallel_for(batch_size, threads, [&](std::size_t r) {
            const ModelForward fwd = model_forward(params, config, batch.inputs[r]);
            l[r] = cross_entropy_sum(fwd.logits, batch.targets[r], kIgnoreIndex, 0.0, nullptr, &c[r], &h[r]);
        });
        for (std::size_t r = 0; r < batch_size; ++r) {
            loss += l[r];
            ev.count += c[r];
            ev.correct += h[r];
        }
    }
    if (ev.count > 0) {
        ev.loss = loss / static_cast<double>(ev.count);
        ev.accuracy = static_cast<double>(ev.correct) / static_cast<double>(ev.count);
    }
    return ev;
}

TrainResult train(const RunConfig& config, const Task& task, const TrainOptions& options) {
    Rng init_rng(config.train.seed);
    return train(config, task, init_model(config.model, init_rng), options);
}

TrainResult train(const RunConfig& config, const Task& task, ModelParams init, const TrainOptions& options) {
    config.model.validate();
    config.train.validate();
    if (config.model.vocab < task.vocab) {
        throw ConfigError("model.vocab", "smaller than the task vocabulary (" + std::to_string(task.vocab) + ")");
    }
    if (config.model.max_seq < task.spec.seq_len) throw ConfigError("model.max_seq", "shorter than task.seq_len");
    const TrainConfig& tc = config.train;
    const std::uint64_t data_seed = mix_seed(tc.seed, 1);
    const std::uint64_t eval_seed = mix_seed(tc.seed, 2);
    Rng data_rng(data_seed);

    TrainResult res;
    res.params = std::move(init);
    std::vector<double> flat = flatten(res.params);
    AdamState state;
    const auto t0 = std::chrono::steady_clock::now();
    auto last_mark = t0;
    std::size_t tokens_since = 0;
    for (std::size_t step = 1; step <= tc.steps; ++step) {
        const Batch batch = make_batch(task, data_rng, tc.batch_size);
        const BatchGradient bg = batch_gradient(res.params, config.model, batch, options.threads, mix_seed(tc.seed, 1000 + step));
        if (!std::isfinite(bg.loss)) {
            throw TrainingError("training diverged: loss is " + std::to_string(bg.loss) + " at step " +
                                std::to_string(step));
        }
        const StepReport rep = optimizer_step(flat, flatten(bg.grads), state, tc, learning_rate(tc, step));
        if (!rep.applied) ++res.rejected_steps;
        unflatten(res.params, flat);
        res.losses.push_back(bg.loss);
        res.steps_run = step;
        tokens_since += tc.batch_size * task.spec.seq_len;

        const bool eval_now = (tc.eval_interval > 0 && step % tc.eval_interval == 0) || step == tc.steps;
        if (!eval_now) continue;
        const auto now = std::chrono::steady_clock::now();
        const double secs = std::chrono::duration<double>(now - last_mark).count();
        MetricRow row;
        row.step = step;
        row.loss = bg.loss;
        res.final_eval = evaluate(res.params, config.model, task, eval_seed, tc.eval_batches, tc.batch_size,
                                  options.threads);
        row.accuracy = res.final_eval.accuracy;
        row.tokens_per_sec = secs > 0.0 ? static_cast<double>(tokens_since) / secs : 0.0;
        tokens_since = 0;
        last_mark = std::chrono::steady_clock::now();
        res.metrics.push_back(row);
        if (options.on_eval) options.on_eval(row);
        if (tc.target_accuracy > 0.0 && row.accuracy >= tc.target_accuracy) break;
    }
    res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::string out = "step,loss,accuracy\n";
    char buf[96];
    for (const MetricRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%zu,%.12f,%.6f\n", r.step, r.loss, r.accuracy);
        out += buf;
    }
    return out;
}

namespace {

double log_binom_pmf(std::size_t n, std::size_t k, double p) {
    const double dn = static_cast<double>(n), dk = static_cast<double>(k);
    return std::lgamma(dn + 1) - std::lgamma(dk + 1) - std::lgamma(dn - dk + 1) + dk * std::log(p) +
           (dn - dk) * std::log1p(-p);
}

double tail_sum(std::size_t n, std::size_t from, std::size_t to, double p) {
    double mx = -INFINITY;
    for (std::size_t i = from; i <= to; ++i) mx = std::max(mx, log_binom_pmf(n, i, p));
    double s = 0.0;
    for (std::size_t i = from; i <= to; ++i) s += std::exp(log_binom_pmf(n, i, p) - mx);
    return std::min(1.0, std::exp(mx) * s);
}

}  // namespace

double binomial_upper_tail(std::size_t n, std::size_t k, double p) {
    if (k == 0) return 1.0;
    if (k > n) return 0.0;
    return tail_sum(n, k, n, p);
}

double binomial_lower_tail(std::size_t n, std::size_t k, double p) {
    if (k >= n) return 1.0;
    return tail_sum(n, 0, k, p);
}

}  // namespace piattn
