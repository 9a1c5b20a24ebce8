#pragma once

#include <bit>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "emofuse/ops.hpp"
#include "emofuse/random.hpp"
#include "emofuse/tensor.hpp"
#include "emofuse/tokenizer.hpp"

namespace emofuse {

struct EncoderConfig {
    std::size_t num_layers = 2;
    std::size_t hidden_dim = 64;
    std::size_t num_heads = 4;
    std::size_t ffn_dim = 256;
    std::size_t vocab_size = 2000;
    std::size_t max_len = 64;
    double dropout_rate = 0.1;

    // Default desk-scale model.
    static EncoderConfig toy() { return {}; }

    // bert-base-uncased dimensions; used for sizing and validation only.
    static EncoderConfig bert_base() { return {12, 768, 12, 3072, 30522, 512, 0.1}; }

    void validate() const {
        if (num_layers == 0 || hidden_dim == 0 || num_heads == 0 || ffn_dim == 0 || vocab_size == 0 || max_len < 2) {
            throw ConfigError("encoder config: all sizes must be positive and max_len >= 2");
        }
        if (hidden_dim % num_heads != 0) {
            throw ConfigError("encoder config: hidden_dim " + std::to_string(hidden_dim) +
                              " not divisible by num_heads " + std::to_string(num_heads));
        }
        if (ffn_dim < hidden_dim) throw ConfigError("encoder config: ffn_dim must be >= hidden_dim");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("encoder config: dropout_rate must be in [0, 1)");
        if (vocab_size < Vocabulary::specials().size()) throw ConfigError("encoder config: vocab_size too small");
    }

    friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Learnable scalars per transformer layer: Q/K/V/O projections with biases,
// the two FFN maps with biases and two layer-norm (gamma, beta) pairs.
inline std::size_t count_layer_params(const EncoderConfig& c) {
    const std::size_t d = c.hidden_dim, f = c.ffn_dim;
    return 4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * (2 * d);
}

inline std::size_t count_params(const EncoderConfig& c) {
    c.validate();
    return c.vocab_size * c.hidden_dim + c.max_len * c.hidden_dim + c.num_layers * count_layer_params(c);
}

struct LayerParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln1_gamma, ln1_beta;
    Tensor ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;
    Tensor ln2_gamma, ln2_beta;

    template <class Self, class F>
    static void visit(Self& self, F&& f) {
        f("attn.q.weight", self.wq);
        f("attn.q.bias", self.bq);
        f("attn.k.weight", self.wk);
        f("attn.k.bias", self.bk);
        f("attn.v.weight", self.wv);
        f("attn.v.bias", self.bv);
        f("attn.out.weight", self.wo);
        f("attn.out.bias", self.bo);
        f("ln1.gamma", self.ln1_gamma);
        f("ln1.beta", self.ln1_beta);
        f("ffn.in.weight", self.ffn_in_w);
        f("ffn.in.bias", self.ffn_in_b);
        f("ffn.out.weight", self.ffn_out_w);
        f("ffn.out.bias", self.ffn_out_b);
        f("ln2.gamma", self.ln2_gamma);
        f("ln2.beta", self.ln2_beta);
    }
};

using NamedParam = std::pair<std::string, Tensor*>;

struct EncoderParams {
    EncoderConfig config;
    Tensor token_embedding;     // [vocab_size x d]
    Tensor position_embedding;  // [max_len x d]
    std::vector<LayerParams> layers;

    // Fixed traversal order shared by checkpoints and optimizers:
    // token_embedding, position_embedding, then per layer q, k, v, out
    // (weight, bias each), ln1, ffn.in, ffn.out, ln2.
    template <class F>
    void for_each(F&& f) {
        f("token_embedding", token_embedding);
        f("position_embedding", position_embedding);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string prefix = "layer" + std::to_string(l) + ".";
            LayerParams::visit(layers[l], [&](const char* name, Tensor& t) { f(prefix + name, t); });
        }
    }

    template <class F>
    void for_each(F&& f) const {
        f("token_embedding", token_embedding);
        f("position_embedding", position_embedding);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string prefix = "layer" + std::to_string(l) + ".";
            LayerParams::visit(layers[l], [&](const char* name, const Tensor& t) { f(prefix + name, t); });
        }
    }

    std::vector<NamedParam> named_parameters(const std::string& prefix = "") {
        std::vector<NamedParam> out;
        for_each([&](const std::string& name, Tensor& t) { out.emplace_back(prefix + name, &t); });
        return out;
    }

    std::size_t num_scalars() const {
        std::size_t n = 0;
        for_each([&](const std::string&, const Tensor& t) { n += t.numel(); });
        return n;
    }

    friend bool operator==(const EncoderParams& a, const EncoderParams& b) {
        if (!(a.config == b.config) || a.layers.size() != b.layers.size()) return false;
        std::vector<const Tensor*> ta, tb;
        a.for_each([&](const std::string&, const Tensor& t) { ta.push_back(&t); });
        b.for_each([&](const std::string&, const Tensor& t) { tb.push_back(&t); });
        for (std::size_t i = 0; i < ta.size(); ++i)
            if (!(*ta[i] == *tb[i])) return false;
        return true;
    }
};

inline Tensor init_weight(Shape shape, Rng& rng, double stddev = 0.02) {
    const auto n = shape_numel(shape);
    std::vector<double> v(n);
    for (auto& x : v) x = truncated_normal(rng, stddev);
    return Tensor(std::move(shape), std::move(v), true);
}

// Weights ~ N(0, 0.02^2) truncated at 2 sigma, biases 0, gamma 1, beta 0.
inline EncoderParams init_encoder(const EncoderConfig& config, Rng& rng) {
    config.validate();
    const std::size_t d = config.hidden_dim, f = config.ffn_dim;
    EncoderParams p;
    p.config = config;
    p.token_embedding = init_weight({config.vocab_size, d}, rng);
    p.position_embedding = init_weight({config.max_len, d}, rng);
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        LayerParams layer;
        layer.wq = init_weight({d, d}, rng);
        layer.bq = Tensor::zeros({d}, true);
        layer.wk = init_weight({d, d}, rng);
        layer.bk = Tensor::zeros({d}, true);
        layer.wv = init_weight({d, d}, rng);
        layer.bv = Tensor::zeros({d}, true);
        layer.wo = init_weight({d, d}, rng);
        layer.bo = Tensor::zeros({d}, true);
        layer.ln1_gamma = Tensor::filled({d}, 1.0, true);
        layer.ln1_beta = Tensor::zeros({d}, true);
        layer.ffn_in_w = init_weight({d, f}, rng);
        layer.ffn_in_b = Tensor::zeros({f}, true);
        layer.ffn_out_w = init_weight({f, d}, rng);
        layer.ffn_out_b = Tensor::zeros({d}, true);
        layer.ln2_gamma = Tensor::filled({d}, 1.0, true);
        layer.ln2_beta = Tensor::zeros({d}, true);
        p.layers.push_back(std::move(layer));
    }
    return p;
}

inline EncoderParams init_encoder(const EncoderConfig& config, std::uint64_t seed) {
    Rng rng = make_stream(seed, "init");
    return init_encoder(config, rng);
}

namespace detail {

template <class T>
Var bind(Tape& tape, T& t) {
    if constexpr (std::is_const_v<T>) {
        return tape.constant(Tensor(t.shape, t.data));
    } else {
        return tape.leaf(t);
    }
}

}  // namespace detail

// Hidden states H [B x L x d] for a batch of equal-length sequences.
// Post-norm layers: masked multi-head attention -> add & norm -> GELU FFN ->
// add & norm. dropout_rng == nullptr disables dropout.
template <class Params>
    requires std::same_as<std::remove_const_t<Params>, EncoderParams>
Var encode_sequence(Tape& tape, Params& params, std::span<const TokenizedSequence> batch, Rng* dropout_rng = nullptr) {
    const auto& cfg = params.config;
    if (batch.empty()) throw ContractError("encode_sequence: empty batch");
    const std::size_t B = batch.size();
    const std::size_t L = batch.front().ids.size();
    const std::size_t d = cfg.hidden_dim;
    if (L == 0 || L > cfg.max_len) {
        throw DimensionError("encode_sequence: sequence length " + std::to_string(L) + " exceeds max_len " +
                             std::to_string(cfg.max_len));
    }
    std::vector<std::size_t> ids;
    std::vector<std::size_t> positions;
    std::vector<int> mask;
    ids.reserve(B * L);
    for (const auto& seq : batch) {
        if (seq.ids.size() != L || seq.mask.size() != L) {
            throw DimensionError("encode_sequence: sequences in a batch must share one length");
        }
        for (std::size_t i = 0; i < L; ++i) {
            if (seq.ids[i] >= cfg.vocab_size) {
                throw ContractError("encode_sequence: token id " + std::to_string(seq.ids[i]) +
                                    " out of range for vocab_size " + std::to_string(cfg.vocab_size));
            }
            ids.push_back(seq.ids[i]);
            positions.push_back(i);
            mask.push_back(seq.mask[i]);
        }
    }
    const double rate = dropout_rng != nullptr ? cfg.dropout_rate : 0.0;

    Var x = add(gather_rows(detail::bind(tape, params.token_embedding), ids),
                gather_rows(detail::bind(tape, params.position_embedding), positions));
    for (auto& layer : params.layers) {
        Var q = add_bias(matmul(x, detail::bind(tape, layer.wq)), detail::bind(tape, layer.bq));
        Var k = add_bias(matmul(x, detail::bind(tape, layer.wk)), detail::bind(tape, layer.bk));
        Var v = add_bias(matmul(x, detail::bind(tape, layer.wv)), detail::bind(tape, layer.bv));
        Var attn = multi_head_attention(q, k, v, mask, {B, L, cfg.num_heads}, rate, dropout_rng);
        Var o = add_bias(matmul(attn, detail::bind(tape, layer.wo)), detail::bind(tape, layer.bo));
        x = layer_norm(add(x, o), detail::bind(tape, layer.ln1_gamma), detail::bind(tape, layer.ln1_beta));
        Var h = gelu(add_bias(matmul(x, detail::bind(tape, layer.ffn_in_w)), detail::bind(tape, layer.ffn_in_b)));
        if (rate > 0.0) h = dropout(h, rate, *dropout_rng);
        Var f = add_bias(matmul(h, detail::bind(tape, layer.ffn_out_w)), detail::bind(tape, layer.ffn_out_b));
        x = layer_norm(add(x, f), detail::bind(tape, layer.ln2_gamma), detail::bind(tape, layer.ln2_beta));
    }
    return reshape(x, {B, L, d});
}

// Drops trailing positions that are padding in every sequence of the batch.
// Masked positions never influence unmasked ones, so the CLS output is unchanged.
inline std::vector<TokenizedSequence> trim_padding(std::span<const TokenizedSequence> batch) {
    std::size_t longest = 1;
    for (const auto& s : batch) longest = std::max(longest, s.true_length);
    std::vector<TokenizedSequence> out;
    out.reserve(batch.size());
    for (const auto& s : batch) {
        const std::size_t keep = std::min(longest, s.ids.size());
        out.push_back({{s.ids.begin(), s.ids.begin() + keep}, {s.mask.begin(), s.mask.begin() + keep}, s.true_length});
    }
    return out;
}

// h_[CLS]: the position-0 hidden vector of each sequence, [B x d].
inline Var pool_cls(Var hidden) {
    const auto& s = hidden.shape();
    if (s.size() != 3) throw DimensionError("pool_cls: expected [B x L x d], got " + shape_str(s));
    const std::size_t B = s[0], L = s[1], d = s[2];
    std::vector<std::size_t> rows(B);
    for (std::size_t b = 0; b < B; ++b) rows[b] = b * L;
    return gather_rows(reshape(hidden, {B * L, d}), rows);
}

// ---------------------------------------------------------------------------
// Checkpoint format (all integers little-endian):
//   "EMF1"
//   u32 num_layers, hidden_dim, num_heads, ffn_dim, vocab_size, max_len
//   f64 dropout_rate
//   encoder tensors in EncoderParams::for_each order, each as
//     u32 rank, u32 dims[rank], f64 values[prod(dims)]
//   u32 count of trailing tensors (classification head: weight, bias)
//   trailing tensors in the same encoding
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b, 4);
}

inline void write_f64(std::ostream& out, double v) {
    auto u = std::bit_cast<std::uint64_t>(v);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xFF);
    out.write(b, 8);
}

inline std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("checkpoint truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline double read_f64(std::istream& in) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw DataError("checkpoint truncated");
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return std::bit_cast<double>(u);
}

inline void write_tensor(std::ostream& out, const Tensor& t) {
    write_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) write_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data) write_f64(out, v);
}

inline Tensor read_tensor(std::istream& in) {
    const auto rank = read_u32(in);
    if (rank > 8) throw DataError("checkpoint: implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = read_u32(in);
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = read_f64(in);
    return Tensor(std::move(shape), std::move(data), true);
}

}  // namespace detail

struct Checkpoint {
    EncoderParams encoder;
    std::vector<Tensor> trailing;
};

inline void save_checkpoint(const std::filesystem::path& path, const EncoderParams& enc,
                            std::span<const Tensor> trailing = {}) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write("EMF1", 4);
    const auto& c = enc.config;
    for (auto v : {c.num_layers, c.hidden_dim, c.num_heads, c.ffn_dim, c.vocab_size, c.max_len})
        detail::write_u32(out, static_cast<std::uint32_t>(v));
    detail::write_f64(out, c.dropout_rate);
    enc.for_each([&](const std::string&, const Tensor& t) { detail::write_tensor(out, t); });
    detail::write_u32(out, static_cast<std::uint32_t>(trailing.size()));
    for (const auto& t : trailing) detail::write_tensor(out, t);
    if (!out) throw DataError("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read checkpoint " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || std::string(magic, 4) != "EMF1") {
        throw DataError("checkpoint " + path.string() + ": bad magic");
    }
    EncoderConfig c;
    c.num_layers = detail::read_u32(in);
    c.hidden_dim = detail::read_u32(in);
    c.num_heads = detail::read_u32(in);
    c.ffn_dim = detail::read_u32(in);
    c.vocab_size = detail::read_u32(in);
    c.max_len = detail::read_u32(in);
    c.dropout_rate = detail::read_f64(in);
    c.validate();
    Checkpoint ck;
    ck.encoder = init_encoder(c, 0);  // shapes only; every tensor is overwritten below
    ck.encoder.for_each([&](const std::string& name, Tensor& t) {
        Tensor loaded = detail::read_tensor(in);
        if (loaded.shape != t.shape) {
            throw DataError("checkpoint " + path.string() + ": tensor " + name + " has shape " +
                            shape_str(loaded.shape) + ", expected " + shape_str(t.shape));
        }
        t = std::move(loaded);
    });
    const auto n = detail::read_u32(in);
    for (std::uint32_t i = 0; i < n; ++i) ck.trailing.push_back(detail::read_tensor(in));
    return ck;
}

}  // namespace emofuse
