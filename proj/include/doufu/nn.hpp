#pragma once

// Layers built on the tape: linear, layer norm, attention, transformer encoder,
// gated recurrent cell; adaptive-moment optimizer; parameter checkpoints.

#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "doufu/tensor.hpp"

namespace doufu::nn {

/// softmax(q k^T / sqrt(d) masked) v
inline Var attention(Var q, Var k, Var v, const Mask* mask = nullptr) {
    detail::require(q.cols() == k.cols(), "attention: query/key width mismatch");
    detail::require(k.rows() == v.rows(), "attention: key/value length mismatch");
    auto scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(q.cols())));
    return matmul(softmax_rows(scores, mask), v);
}

/// Sinusoidal position table (L x d).
inline Tensor positional_encoding(std::size_t length, std::size_t d) {
    Tensor pe(length, d);
    for (std::size_t pos = 0; pos < length; ++pos)
        for (std::size_t i = 0; i < d; ++i) {
            const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
            pe(pos, i) = i % 2 == 0 ? std::sin(static_cast<double>(pos) * rate) : std::cos(static_cast<double>(pos) * rate);
        }
    return pe;
}

struct Linear {
    std::string name;
    std::size_t in = 0, out = 0;
    bool bias = true;

    Linear() = default;
    Linear(ParamStore& store, std::string prefix, std::size_t in_dim, std::size_t out_dim, bool with_bias = true,
           Init weight_init = Init::fan_in_uniform)
        : name(std::move(prefix)), in(in_dim), out(out_dim), bias(with_bias) {
        store.add(name + ".w", in, out, weight_init);
        if (bias) store.add(name + ".b", 1, out, Init::zeros);
    }
    Var operator()(Tape& t, ParamStore& s, Var x) const {
        detail::require(x.cols() == in, name + ": expected input width " + std::to_string(in) + ", got " + std::to_string(x.cols()));
        auto y = matmul(x, t.param(s, name + ".w"));
        return bias ? add_row(y, t.param(s, name + ".b")) : y;
    }
};

struct LayerNorm {
    std::string name;
    LayerNorm() = default;
    LayerNorm(ParamStore& store, std::string prefix, std::size_t d) : name(std::move(prefix)) {
        store.add(name + ".gain", 1, d, Init::ones);
        store.add(name + ".bias", 1, d, Init::zeros);
    }
    Var operator()(Tape& t, ParamStore& s, Var x) const {
        return layer_norm(x, t.param(s, name + ".gain"), t.param(s, name + ".bias"));
    }
};

struct MultiHeadSelfAttention {
    std::size_t d = 0, heads = 1;
    Linear q, k, v, o;

    MultiHeadSelfAttention() = default;
    MultiHeadSelfAttention(ParamStore& store, const std::string& prefix, std::size_t width, std::size_t n_heads)
        : d(width), heads(n_heads) {
        if (n_heads == 0 || width % n_heads != 0)
            throw ShapeError("model width " + std::to_string(width) + " not divisible by " + std::to_string(n_heads) + " heads");
        q = Linear(store, prefix + ".q", d, d);
        k = Linear(store, prefix + ".k", d, d);
        v = Linear(store, prefix + ".v", d, d);
        o = Linear(store, prefix + ".o", d, d);
    }
    Var operator()(Tape& t, ParamStore& s, Var x, const Mask* mask = nullptr) const {
        auto Q = q(t, s, x), K = k(t, s, x), V = v(t, s, x);
        const std::size_t dh = d / heads;
        std::vector<Var> outs;
        for (std::size_t h = 0; h < heads; ++h)
            outs.push_back(attention(slice_cols(Q, h * dh, dh), slice_cols(K, h * dh, dh), slice_cols(V, h * dh, dh), mask));
        return o(t, s, heads == 1 ? outs.front() : concat_cols(outs));
    }
};

/// Post-norm transformer encoder layer.
/// Inverted dropout; a null rng or p == 0 makes it the identity (inference).
struct Dropout {
    double p = 0.0;
    Rng* rng = nullptr;
};

inline Var dropout(Tape& t, Var x, const Dropout* d) {
    if (!d || !d->rng || d->p <= 0.0) return x;
    std::bernoulli_distribution keep(1.0 - d->p);
    Tensor m(x.rows(), x.cols());
    const double s = 1.0 / (1.0 - d->p);
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) m(i, j) = keep(*d->rng) ? s : 0.0;
    return mul(x, t.constant(m));
}

struct EncoderLayer {
    MultiHeadSelfAttention attn;
    LayerNorm ln1, ln2;
    Linear ff1, ff2;

    EncoderLayer() = default;
    EncoderLayer(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t heads, std::size_t ff)
        : attn(store, prefix + ".attn", d, heads), ln1(store, prefix + ".ln1", d), ln2(store, prefix + ".ln2", d),
          ff1(store, prefix + ".ff1", d, ff), ff2(store, prefix + ".ff2", ff, d) {}

    Var operator()(Tape& t, ParamStore& s, Var x, const Mask* mask = nullptr, const Dropout* drop = nullptr) const {
        auto x1 = ln1(t, s, add(x, dropout(t, attn(t, s, x, mask), drop)));
        auto hidden = dropout(t, relu(ff1(t, s, x1)), drop);
        return ln2(t, s, add(x1, dropout(t, ff2(t, s, hidden), drop)));
    }
};

/// Input projection, sinusoidal positions, then a stack of encoder layers.
struct SequenceEncoder {
    Linear input;
    std::vector<EncoderLayer> layers;
    std::size_t d = 0;

    SequenceEncoder() = default;
    SequenceEncoder(ParamStore& store, const std::string& prefix, std::size_t in_dim, std::size_t width, std::size_t heads,
                    std::size_t ff, std::size_t depth)
        : input(store, prefix + ".in", in_dim, width), d(width) {
        for (std::size_t l = 0; l < depth; ++l)
            layers.emplace_back(store, prefix + ".layer" + std::to_string(l), width, heads, ff);
    }
    Var operator()(Tape& t, ParamStore& s, Var x, const Mask* mask = nullptr, const Dropout* drop = nullptr) const {
        if (x.rows() == 0) throw ShapeError("empty sequence");
        auto h = dropout(t, add(input(t, s, x), t.constant(positional_encoding(x.rows(), d))), drop);
        for (const auto& layer : layers) h = layer(t, s, h, mask, drop);
        return h;
    }
};

/// Gated recurrent unit:
///   z = sig(x Wz + h Uz + bz), r = sig(x Wr + h Ur + br)
///   n = tanh(x Wn + bn + r * (h Un + bun)),  h' = (1 - z) * n + z * h
struct GruCell {
    std::string name;
    std::size_t in = 0, hidden = 0;

    GruCell() = default;
    GruCell(ParamStore& store, std::string prefix, std::size_t in_dim, std::size_t hidden_dim)
        : name(std::move(prefix)), in(in_dim), hidden(hidden_dim) {
        for (const char* g : {"z", "r", "n"}) {
            store.add(name + ".W" + g, in, hidden, Init::fan_in_uniform);
            store.add(name + ".U" + g, hidden, hidden, Init::fan_in_uniform);
            store.add(name + ".b" + g, 1, hidden, Init::zeros);
        }
        store.add(name + ".bun", 1, hidden, Init::zeros);
    }

    Var step(Tape& t, ParamStore& s, Var x, Var h) const {
        detail::require(x.cols() == in && h.cols() == hidden, name + ": step shape mismatch");
        auto gate = [&](const char* g) {
            return add_row(add(matmul(x, t.param(s, name + ".W" + g)), matmul(h, t.param(s, name + ".U" + g))),
                           t.param(s, name + ".b" + g));
        };
        auto z = sigmoid(gate("z"));
        auto r = sigmoid(gate("r"));
        auto hn = add_row(matmul(h, t.param(s, name + ".Un")), t.param(s, name + ".bun"));
        auto n = tanh(add(add_row(matmul(x, t.param(s, name + ".Wn")), t.param(s, name + ".bn")), mul(r, hn)));
        return add(mul(one_minus(z), n), mul(z, h));
    }

    /// Runs over the rows of `seq` from a zero state; returns the final state (1 x hidden).
    Var run(Tape& t, ParamStore& s, Var seq) const {
        if (seq.rows() == 0) throw ShapeError("empty sequence");
        auto h = t.constant(Tensor(1, hidden));
        for (std::size_t r = 0; r < seq.rows(); ++r) h = step(t, s, slice_rows(seq, r, 1), h);
        return h;
    }
};

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Bias-corrected adaptive-moment update; clears gradients afterwards.
inline void adam_step(ParamStore& store, const AdamHyper& h) {
    if (!store.grads_ready()) throw Error("adam_step called before backward()");
    const auto t = static_cast<double>(++store.step_count());
    const double c1 = 1.0 - std::pow(h.beta1, t), c2 = 1.0 - std::pow(h.beta2, t);
    for (auto& p : store.params()) {
        auto g = p.grad.mat().array();
        p.m.mat().array() = h.beta1 * p.m.mat().array() + (1.0 - h.beta1) * g;
        p.v.mat().array() = h.beta2 * p.v.mat().array() + (1.0 - h.beta2) * g * g;
        p.value.mat().array() -= h.lr * (p.m.mat().array() / c1) / ((p.v.mat().array() / c2).sqrt() + h.eps);
    }
    store.zero_grad();
}

// ---------------------------------------------------------------------------
// Checkpoint: text manifest (name, shape, seed, dtype) followed by raw little-endian f64 payload.

inline void write_checkpoint(std::ostream& out, const ParamStore& store, const std::map<std::string, std::string>& echo = {}) {
    out << "doufu-checkpoint 1\n";
    for (const auto& [k, v] : echo) out << "config " << k << '=' << v << '\n';
    for (const auto& p : store.params())
        out << "tensor " << p.name << ' ' << p.value.rows() << ' ' << p.value.cols() << ' ' << p.seed << " f64 "
            << init_name(p.init) << '\n';
    out << "payload\n";
    for (const auto& p : store.params())
        for (double v : p.value.data()) {
            auto bits = std::bit_cast<std::uint64_t>(v);
            if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
            out.write(reinterpret_cast<const char*>(&bits), 8);
        }
}

/// Loads values into an already-shaped store; returns the config echo block.
inline std::map<std::string, std::string> read_checkpoint(std::istream& in, ParamStore& store) {
    std::string line;
    std::getline(in, line);
    if (line != "doufu-checkpoint 1") throw ParseError(1, "not a checkpoint");
    std::map<std::string, std::string> echo;
    std::vector<Parameter*> order;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line == "payload") break;
        std::istringstream ss(line);
        std::string kind;
        ss >> kind;
        if (kind == "config") {
            auto rest = line.substr(7);
            auto eq = rest.find('=');
            if (eq == std::string::npos) throw ParseError(lineno, "bad config echo line");
            echo[rest.substr(0, eq)] = rest.substr(eq + 1);
        } else if (kind == "tensor") {
            std::string name, dtype;
            std::size_t rows = 0, cols = 0;
            std::uint64_t seed = 0;
            ss >> name >> rows >> cols >> seed >> dtype;
            if (dtype != "f64") throw ParseError(lineno, "unsupported dtype " + dtype);
            auto& p = store.get(name);
            if (p.value.rows() != rows || p.value.cols() != cols) throw ShapeError("checkpoint shape mismatch for " + name);
            order.push_back(&p);
        } else {
            throw ParseError(lineno, "unexpected checkpoint line");
        }
    }
    if (order.size() != store.params().size()) throw ShapeError("checkpoint parameter count mismatch");
    for (auto* p : order)
        for (auto& v : p->value.data()) {
            std::uint64_t bits = 0;
            if (!in.read(reinterpret_cast<char*>(&bits), 8)) throw ParseError(lineno, "checkpoint payload truncated");
            if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
            v = std::bit_cast<double>(bits);
        }
    return echo;
}

} // namespace doufu::nn
