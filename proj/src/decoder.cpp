#include "piattn/decoder.hpp"

#include <algorithm>
#include <cmath>

namespace piattn {

KVCache::KVCache(const ModelConfig& config) {
    const AttentionConfig& a = config.attention;
    if (!a.causal) throw std::invalid_argument("KV-cache decoding requires a causal config");
    window_ = std::max(a.ring_k, a.skip_period) + 1;
    d_ = a.d_model;
    layers_.assign(config.layers, Layer{Matrix(window_, d_), Matrix(window_, d_), std::vector<long>(window_, -1)});
}

std::size_t KVCache::slot(std::size_t layer, std::size_t pos) const {
    if (layer >= layers_.size()) throw std::out_of_range("KVCache: layer " + std::to_string(layer));
    return pos % window_;
}

bool KVCache::has(std::size_t layer, std::size_t pos) const {
    return layers_[layer].tag[slot(layer, pos)] == static_cast<long>(pos);
}

std::span<const double> KVCache::key(std::size_t layer, std::size_t pos) const {
    if (!has(layer, pos)) {
        throw CacheGapError("KV cache gap: layer " + std::to_string(layer) + " position " + std::to_string(pos) +
                            " not cached");
    }
    return layers_[layer].k.row(slot(layer, pos));
}

std::span<const double> KVCache::value(std::size_t layer, std::size_t pos) const {
    if (!has(layer, pos)) {
        throw CacheGapError("KV cache gap: layer " + std::to_string(layer) + " position " + std::to_string(pos) +
                            " not cached");
    }
    return layers_[layer].v.row(slot(layer, pos));
}

std::vector<std::size_t> KVCache::positions(std::size_t layer) const {
    std::vector<std::size_t> out;
    for (long t : layers_.at(layer).tag)
        if (t >= 0) out.push_back(static_cast<std::size_t>(t));
    std::sort(out.begin(), out.end());
    return out;
}

void KVCache::put(std::size_t layer, std::size_t pos, std::span<const double> k, std::span<const double> v) {
    if (k.size() != d_ || v.size() != d_) throw ShapeError("KVCache::put: row width mismatch");
    const std::size_t s = slot(layer, pos);
    Layer& l = layers_[layer];
    std::copy(k.begin(), k.end(), l.k.row(s).begin());
    std::copy(v.begin(), v.end(), l.v.row(s).begin());
    l.tag[s] = static_cast<long>(pos);
}

DecodeStep decode_step(const ModelParams& params, const ModelConfig& config, KVCache& cache, std::size_t token,
                       std::size_t t) {
    if (t != cache.next_position()) {
        throw CacheGapError("decode_step: cache holds positions up to " + std::to_string(cache.next_position()) +
                            " but step requested position " + std::to_string(t));
    }
    if (token >= config.vocab) throw std::out_of_range("token " + std::to_string(token) + " out of vocab");
    if (cache.layers() != params.blocks.size()) throw ShapeError("decode_step: cache depth != model depth");
    const AttentionConfig& ac = config.attention;
    const std::size_t d = ac.d_model;
    const std::vector<SlotOffset> offsets = slot_offsets(ac);

    DecodeStep r;
    Matrix h(1, d);
    std::copy(params.embed.row(token).begin(), params.embed.row(token).end(), h.row(0).begin());
    std::vector<RowSlot> slots;
    for (std::size_t l = 0; l < params.blocks.size(); ++l) {
        const BlockParams& b = params.blocks[l];
        const Matrix normed = layer_norm_forward(h, b.ln1_g, b.ln1_b);
        Matrix q = matmul(normed, b.attn.proj.wq);
        add_row_bias(q, b.attn.proj.bq);
        const Matrix k = matmul(normed, b.attn.proj.wk);
        Matrix v = matmul(normed, b.attn.proj.wv);
        add_row_bias(v, b.attn.proj.bv);
        cache.put(l, t, k.row(0), v.row(0));
        const GateOutput gate = gate_forward(b.attn.gate, ac.gate_input == GateInput::token ? normed : q, ac);

        // Same slot order as the batch union: offsets in schedule order, valid only.
        slots.clear();
        for (const SlotOffset& s : offsets) {
            if (s.offset > 0) continue;
            const long target = static_cast<long>(t) + s.offset;
            if (target < 0) continue;
            const auto pos = static_cast<std::size_t>(target);
            slots.push_back({s.kind, cache.key(l, pos), cache.value(l, pos)});
        }
        Matrix concat(1, d);
        std::vector<double> probs(slots.size() * ac.n_heads);
        attend_row(q.row(0), slots, gate.alpha.row(0), gate.log_prior, ac, concat.row(0), probs, {}, &r.work);
        Matrix attn = matmul(concat, b.attn.proj.wo);
        add_row_bias(attn, b.attn.proj.bo);
        const Matrix y = h + attn;
        const Matrix ln2 = layer_norm_forward(y, b.ln2_g, b.ln2_b);
        h = y + feed_forward(ln2, b);
    }
    const Matrix final_normed = layer_norm_forward(h, params.lnf_g, params.lnf_b);
    Matrix logits = matmul(final_normed, params.head_w);
    add_row_bias(logits, params.head_b);
    r.logits.assign(logits.row(0).begin(), logits.row(0).end());
    cache.advance();
    return r;
}

std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

namespace {

std::size_t sample(std::span<const double> logits, const Sampler& sampler, Rng* rng) {
    if (sampler.kind == Sampler::Kind::greedy) return argmax(logits);
    if (!rng) throw std::invalid_argument("temperature sampling requires an Rng");
    if (!(sampler.temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
    std::vector<double> scaled(logits.begin(), logits.end());
    for (double& x : scaled) x /= sampler.temperature;
    const std::vector<double> p = softmax_row(scaled);
    const double u = rng->uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) return i;
    }
    return p.size() - 1;
}

}  // namespace

std::vector<std::size_t> generate(const ModelParams& params, const ModelConfig& config,
                                  std::span<const std::size_t> prompt, std::size_t steps, const Sampler& sampler,
                                  Rng* rng) {
    if (prompt.empty()) throw std::invalid_argument("generate: prompt must be nonempty");
    std::vector<std::size_t> out(prompt.begin(), prompt.end());
    if (steps == 0) return out;
    KVCache cache(config);
    DecodeStep last;
    for (std::size_t t = 0; t < prompt.size(); ++t) last = decode_step(params, config, cache, prompt[t], t);
    for (std::size_t s = 0; s < steps; ++s) {
        const std::size_t next = sample(last.logits, sampler, rng);
        out.push_back(next);
        if (s + 1 < steps) last = decode_step(params, config, cache, next, out.size() - 1);
    }
    return out;
}

}  // namespace piattn
