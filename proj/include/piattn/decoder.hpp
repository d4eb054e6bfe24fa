#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "piattn/model.hpp"

namespace piattn {

class CacheGapError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Per-layer ring buffer of projected K/V rows keyed by absolute position.
// Holds the last max(k, pi) + 1 positions; appending position t overwrites
// the row for t - window, which no later causal union can request.
class KVCache {
public:
    explicit KVCache(const ModelConfig& config);

    std::size_t layers() const { return layers_.size(); }
    std::size_t window() const { return window_; }
    // Position the next decode step must use.
    std::size_t next_position() const { return next_; }

    bool has(std::size_t layer, std::size_t pos) const;
    std::span<const double> key(std::size_t layer, std::size_t pos) const;
    std::span<const double> value(std::size_t layer, std::size_t pos) const;
    // Cached positions for a layer, ascending.
    std::vector<std::size_t> positions(std::size_t layer) const;

    void put(std::size_t layer, std::size_t pos, std::span<const double> k, std::span<const double> v);
    void advance() { ++next_; }

private:
    struct Layer {
        Matrix k, v;
        std::vector<long> tag;  // absolute position per row, -1 when empty
    };
    std::size_t slot(std::size_t layer, std::size_t pos) const;

    std::vector<Layer> layers_;
    std::size_t window_ = 1;
    std::size_t d_ = 0;
    std::size_t next_ = 0;
};

struct DecodeStep {
    std::vector<double> logits;
    WorkCounters work;
};

// Runs one token at position t through every layer, reading neighbours from
// the cache and appending this position's K/V rows.
DecodeStep decode_step(const ModelParams& params, const ModelConfig& config, KVCache& cache, std::size_t token,
                       std::size_t t);

struct Sampler {
    enum class Kind { greedy, temperature } kind = Kind::greedy;
    double temperature = 1.0;
};

// Prompt followed by `steps` generated tokens. Temperature sampling draws from
// rng, which is required in that mode.
std::vector<std::size_t> generate(const ModelParams& params, const ModelConfig& config,
                                  std::span<const std::size_t> prompt, std::size_t steps, const Sampler& sampler,
                                  Rng* rng = nullptr);

std::size_t argmax(std::span<const double> v);

}  // namespace piattn
