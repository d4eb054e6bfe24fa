#include "piattn/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace piattn {

ModelParams ModelParams::zeros(const ModelConfig& config) {
    const std::size_t d = config.attention.d_model;
    ModelParams p;
    p.embed = Matrix(config.vocab, d);
    for (std::size_t l = 0; l < config.layers; ++l) p.blocks.push_back(BlockParams::zeros(config.attention, config.d_ff));
    p.lnf_g = Matrix(1, d, 1.0);
    p.lnf_b = Matrix(1, d);
    p.head_w = Matrix(d, config.vocab);
    p.head_b = Matrix(1, config.vocab);
    return p;
}

namespace {

Matrix glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return rng.uniform_matrix(fan_in, fan_out, -limit, limit);
}

}  // namespace

BlockParams init_block(const AttentionConfig& config, std::size_t d_ff, Rng& rng) {
    const std::size_t d = config.d_model;
    BlockParams b = BlockParams::zeros(config, d_ff);
    b.attn.proj.wq = glorot(d, d, rng);
    b.attn.proj.wk = glorot(d, d, rng);
    b.attn.proj.wv = glorot(d, d, rng);
    b.attn.proj.wo = glorot(d, d, rng);
    b.attn.gate.w1 = glorot(d, config.gate_hidden(), rng);
    b.ff_w1 = glorot(d, d_ff, rng);
    b.ff_w2 = glorot(d_ff, d, rng);
    return b;
}

ModelParams init_model(const ModelConfig& config, Rng& rng) {
    config.validate();
    ModelParams p = ModelParams::zeros(config);
    p.embed = rng.normal_matrix(config.vocab, config.attention.d_model);
    for (auto& b : p.blocks) b = init_block(config.attention, config.d_ff, rng);
    p.head_w = glorot(config.attention.d_model, config.vocab, rng);
    return p;
}

ModelForward model_forward(const ModelParams& params, const ModelConfig& config,
                           std::span<const std::size_t> tokens, const ForwardOptions& options) {
    const std::size_t n = tokens.size();
    if (n == 0) throw std::invalid_argument("model_forward: empty token sequence");
    const std::size_t d = config.attention.d_model;
    ModelForward r;
    r.cache.tokens.assign(tokens.begin(), tokens.end());
    Matrix h(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        if (tokens[i] >= config.vocab) throw std::out_of_range("token " + std::to_string(tokens[i]) + " out of vocab");
        std::copy(params.embed.row(tokens[i]).begin(), params.embed.row(tokens[i]).end(), h.row(i).begin());
    }
    const UnionNeighborhood u = build_union(config.attention, n);
    for (const BlockParams& b : params.blocks) {
        BlockResult br = block_forward(h, b, u, config.attention, options);
        r.work += br.work;
        h = std::move(br.out);
        r.cache.blocks.push_back(std::move(br.cache));
    }
    r.cache.final_normed = layer_norm_forward(h, params.lnf_g, params.lnf_b, &r.cache.lnf);
    r.logits = matmul(r.cache.final_normed, params.head_w);
    add_row_bias(r.logits, params.head_b);
    return r;
}

ModelParams model_backward(const ModelParams& params, const ModelConfig& config, const ModelCache& cache,
                           const Matrix& dlogits) {
    ModelParams g = ModelParams::zeros(config);
    g.lnf_g.fill(0.0);
    g.head_w = matmul_tn(cache.final_normed, dlogits);
    g.head_b = column_sums(dlogits);
    const Matrix dnormed = matmul_nt(dlogits, params.head_w);
    Matrix dh = layer_norm_backward(cache.lnf, params.lnf_g, dnormed, g.lnf_g, g.lnf_b);
    for (std::size_t l = params.blocks.size(); l-- > 0;) {
        BlockGrads bg = block_backward(params.blocks[l], cache.blocks[l], dh, config.attention);
        g.blocks[l] = std::move(bg.params);
        dh = std::move(bg.x);
    }
    for (std::size_t i = 0; i < cache.tokens.size(); ++i) {
        auto dst = g.embed.row(cache.tokens[i]);
        const auto src = dh.row(i);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
    return g;
}

namespace {

constexpr char kMagic[8] = {'P', 'I', 'A', 'T', 'T', 'N', 'C', '1'};

void write_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64_le(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void write_double_le(std::ostream& os, double d) { write_u64_le(os, std::bit_cast<std::uint64_t>(d)); }

double read_double_le(std::istream& is) { return std::bit_cast<double>(read_u64_le(is)); }

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    nlohmann::json tensors = nlohmann::json::array();
    ckpt.params.visit([&](const std::string& name, const Matrix& m) {
        tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    });
    const nlohmann::json header{{"format", "piattn-checkpoint"},
                                {"version", 1},
                                {"dtype", "f64le"},
                                {"config", to_json(ckpt.config)},
                                {"tensors", tensors},
                                {"extra", ckpt.extra}};
    const std::string text = header.dump();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot write '" + path + "'");
    os.write(kMagic, sizeof(kMagic));
    write_u64_le(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    ckpt.params.visit([&](const std::string&, const Matrix& m) {
        for (double v : m.values()) write_double_le(os, v);
    });
    if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
        throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
    }
    const std::uint64_t len = read_u64_le(is);
    std::string text(len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw std::runtime_error("checkpoint: truncated header");
    const nlohmann::json header = nlohmann::json::parse(text);

    Checkpoint ckpt;
    const nlohmann::json& cfg = header.at("config");
    ckpt.config = run_config_from_json(cfg);
    ckpt.extra = header.value("extra", nlohmann::json::object());
    ckpt.params = ModelParams::zeros(ckpt.config.model);

    const auto& tensors = header.at("tensors");
    std::size_t idx = 0;
    ckpt.params.visit([&](const std::string& name, Matrix& m) {
        if (idx >= tensors.size()) throw std::runtime_error("checkpoint: missing tensor " + name);
        const auto& t = tensors[idx++];
        if (t.at("name") != name || t.at("rows") != m.rows() || t.at("cols") != m.cols()) {
            throw std::runtime_error("checkpoint: tensor mismatch at " + name);
        }
        for (double& v : m.values()) v = read_double_le(is);
    });
    if (idx != tensors.size()) throw std::runtime_error("checkpoint: unexpected extra tensors");
    return ckpt;
}

}  // namespace piattn
