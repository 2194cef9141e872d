#pragma once

// The fusion network: per-modality encoders, consistent layer, attention fusion,
// attention reduce, global encoder, embedding merge, three classifier heads, and
// the recurrent / single-modality baselines that share its inputs.

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "doufu/features.hpp"
#include "doufu/nn.hpp"
#include "doufu/roadgraph.hpp"

namespace doufu::model {

using nn::Init;
using nn::Mask;
using nn::ParamStore;
using nn::Tape;
using nn::Tensor;
using nn::Var;

enum class Variant { double_fusion, attention_fusion, semantic_fusion, rnn_fusion, rnn_move, rnn_route, global_only };

inline constexpr std::array<Variant, 7> all_variants{Variant::double_fusion, Variant::attention_fusion, Variant::semantic_fusion,
                                                     Variant::rnn_fusion,    Variant::rnn_move,         Variant::rnn_route,
                                                     Variant::global_only};

inline std::string variant_name(Variant v) {
    switch (v) {
    case Variant::double_fusion: return "double_fusion";
    case Variant::attention_fusion: return "attention_fusion";
    case Variant::semantic_fusion: return "semantic_fusion";
    case Variant::rnn_fusion: return "rnn_fusion";
    case Variant::rnn_move: return "rnn_move";
    case Variant::rnn_route: return "rnn_route";
    default: return "global_only";
    }
}

inline Variant parse_variant(const std::string& s) {
    for (auto v : all_variants)
        if (variant_name(v) == s) return v;
    throw ValidationError("variant", "unknown model variant '" + s + "'");
}

inline bool uses_movement(Variant v) { return v != Variant::rnn_route && v != Variant::global_only; }
inline bool uses_route(Variant v) { return v != Variant::rnn_move && v != Variant::global_only; }
inline bool uses_global(Variant v) {
    return v == Variant::double_fusion || v == Variant::semantic_fusion || v == Variant::global_only;
}
inline bool uses_attention(Variant v) { return v == Variant::double_fusion || v == Variant::attention_fusion; }

struct ModelConfig {
    std::size_t d = 64;
    std::size_t heads = 4;
    std::size_t ff = 128;
    std::size_t depth = 2;
    std::size_t L_r_max = 64;
    std::size_t L_m_max = 64;
    std::size_t n_reduce = 2;
    std::size_t reduce_hidden = 32;
    std::size_t global_hidden = 64;
    std::size_t embed_dim = 64;
    double alpha = 0.5;
    double beta = 0.5;
    Variant variant = Variant::double_fusion;
    int epochs = 30;
    double lr = 1e-3;
    std::size_t batch = 16;
    double dropout = 0.1; ///< transformer encoders only, during training
    std::uint64_t seed = 0;
};

inline void validate(const ModelConfig& c) {
    if (c.d == 0 || c.heads == 0 || c.d % c.heads != 0)
        throw ValidationError("d", "width " + std::to_string(c.d) + " must be a positive multiple of heads " + std::to_string(c.heads));
    if (c.ff == 0 || c.depth == 0) throw ValidationError("ff", "feed-forward width and depth must be positive");
    if (c.L_r_max == 0 || c.L_m_max == 0) throw ValidationError("L_max", "maximum lengths must be positive");
    if (c.n_reduce == 0 || c.reduce_hidden == 0) throw ValidationError("n_reduce", "reduce heads must be positive");
    if (c.embed_dim == 0 || c.global_hidden == 0) throw ValidationError("embed_dim", "must be positive");
    if (!(c.alpha >= 0) || !(c.beta >= 0)) throw ValidationError("alpha", "loss factors must be >= 0");
    if (c.epochs < 0) throw ValidationError("epochs", "must be >= 0");
    if (!(c.lr > 0) || !std::isfinite(c.lr)) throw ValidationError("lr", "must be positive and finite");
    if (c.batch == 0) throw ValidationError("batch", "must be positive");
    if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw ValidationError("dropout", "must lie in [0, 1)");
}

/// Config echo for checkpoints and reports.
inline std::map<std::string, std::string> echo(const ModelConfig& c) {
    return {{"d", std::to_string(c.d)},
            {"heads", std::to_string(c.heads)},
            {"ff", std::to_string(c.ff)},
            {"depth", std::to_string(c.depth)},
            {"L_r_max", std::to_string(c.L_r_max)},
            {"L_m_max", std::to_string(c.L_m_max)},
            {"n_reduce", std::to_string(c.n_reduce)},
            {"reduce_hidden", std::to_string(c.reduce_hidden)},
            {"global_hidden", std::to_string(c.global_hidden)},
            {"embed_dim", std::to_string(c.embed_dim)},
            {"alpha", format_double(c.alpha)},
            {"beta", format_double(c.beta)},
            {"variant", variant_name(c.variant)},
            {"epochs", std::to_string(c.epochs)},
            {"lr", format_double(c.lr)},
            {"batch", std::to_string(c.batch)},
            {"dropout", format_double(c.dropout)},
            {"seed", std::to_string(c.seed)}};
}

struct InputDims {
    std::size_t movement = features::movement_dim;
    std::size_t route = features::route_dim(default_zone_count, default_class_count) + 32;
    std::size_t global = features::global_dim(default_zone_count);
};

/// One trajectory's model inputs (already standardized).
struct Sample {
    Tensor movement; ///< L_m x D_m
    Tensor route;    ///< L_r x (D_r + d_z)
    Tensor global;   ///< 1 x D_g
    std::size_t label = 0;
    std::string traj_id;
    std::string user;
};

/// Per-segment route input: segment feature row followed by the pretrained segment embedding.
inline Tensor route_input(const features::Rows& seg_rows, const std::vector<std::string>& seg_ids,
                          const graph::SegmentEmbeddingTable& table) {
    if (seg_rows.size() != seg_ids.size()) throw ShapeError("route rows and segment ids differ in length");
    features::Rows rows;
    for (std::size_t k = 0; k < seg_ids.size(); ++k) {
        auto it = table.find(seg_ids[k]);
        if (it == table.end()) throw LookupError("segment " + seg_ids[k] + " has no pretrained embedding");
        auto row = seg_rows[k];
        row.insert(row.end(), it->second.begin(), it->second.end());
        rows.push_back(std::move(row));
    }
    return Tensor::from_rows(rows);
}

/// Row-selection matrix mapping L_m rows onto L_r rows: adaptive mean pooling when shrinking,
/// repetition (row floor(i * L_m / L_r)) when stretching.
inline Tensor pooling_matrix(std::size_t lm, std::size_t lr) {
    if (lm == 0 || lr == 0) throw ShapeError("consistent layer needs non-empty sequences");
    Tensor p(lr, lm);
    for (std::size_t i = 0; i < lr; ++i) {
        if (lm < lr) {
            p(i, i * lm / lr) = 1.0;
            continue;
        }
        const std::size_t start = i * lm / lr;
        const std::size_t end = ((i + 1) * lm + lr - 1) / lr;
        for (std::size_t j = start; j < end; ++j) p(i, j) = 1.0 / static_cast<double>(end - start);
    }
    return p;
}

/// Attention reduce: each head scores the rows with a small MLP, pools them with the softmax
/// weights and normalizes; head outputs are summed.
struct Reduce {
    std::vector<nn::Linear> score1, score2;
    nn::LayerNorm norm;

    Reduce() = default;
    Reduce(ParamStore& s, const std::string& prefix, std::size_t d, std::size_t heads, std::size_t hidden)
        : norm(s, prefix + ".ln", d) {
        for (std::size_t h = 0; h < heads; ++h) {
            score1.emplace_back(s, prefix + ".h" + std::to_string(h) + ".l1", d, hidden);
            score2.emplace_back(s, prefix + ".h" + std::to_string(h) + ".l2", hidden, 1);
        }
    }

    /// `valid` (optional) marks rows that may receive weight; padded rows get none.
    Var operator()(Tape& t, ParamStore& s, Var x, const std::vector<char>* valid = nullptr,
                   std::vector<Tensor>* weights = nullptr) const {
        if (x.rows() == 0) throw ShapeError("reduce of an empty sequence");
        std::optional<Mask> mask;
        if (valid) {
            if (valid->size() != x.rows()) throw ShapeError("reduce mask length mismatch");
            mask = Mask{1, x.rows(), *valid};
        }
        std::optional<Var> total;
        for (std::size_t h = 0; h < score1.size(); ++h) {
            auto logits = nn::transpose(score2[h](t, s, nn::tanh(score1[h](t, s, x))));
            auto alpha = nn::softmax_rows(logits, mask ? &*mask : nullptr);
            if (weights) weights->push_back(alpha.value());
            auto pooled = norm(t, s, nn::matmul(alpha, x));
            total = total ? nn::add(*total, pooled) : pooled;
        }
        return *total;
    }
};

struct Forward {
    Var embedding;
    std::optional<Var> movement_vec; ///< input of the movement head
    std::optional<Var> route_vec;    ///< input of the route head
};

class DouFuModel {
public:
    DouFuModel(const ModelConfig& cfg, const InputDims& dims, std::size_t n_users)
        : cfg_(cfg), dims_(dims), users_(n_users), store_(derive_seed(cfg.seed, 7)) {
        validate(cfg);
        if (n_users < 2) throw ValidationError("users", "need at least 2 users to train a classifier");
        const auto v = cfg.variant;
        const std::size_t d = cfg.d;
        std::size_t merged = 0;
        if (uses_attention(v)) {
            move_enc_ = nn::SequenceEncoder(store_, "move_enc", dims.movement, d, cfg.heads, cfg.ff, cfg.depth);
            route_enc_ = nn::SequenceEncoder(store_, "route_enc", dims.route, d, cfg.heads, cfg.ff, cfg.depth);
            reduce_m_ = Reduce(store_, "reduce_m", d, cfg.n_reduce, cfg.reduce_hidden);
            reduce_r_ = Reduce(store_, "reduce_r", d, cfg.n_reduce, cfg.reduce_hidden);
        } else {
            if (uses_movement(v)) move_gru_ = nn::GruCell(store_, "move_gru", dims.movement, d);
            if (uses_route(v)) route_gru_ = nn::GruCell(store_, "route_gru", dims.route, d);
        }
        if (v == Variant::double_fusion) {
            consistent_ = nn::Linear(store_, "consistent", d, d, true, Init::identity);
            fuse_norm_ = nn::LayerNorm(store_, "fuse.ln", d);
            reduce_f_ = Reduce(store_, "reduce_f", d, cfg.n_reduce, cfg.reduce_hidden);
            merged += d;
        } else {
            merged += (uses_movement(v) ? d : 0) + (uses_route(v) ? d : 0);
        }
        if (uses_global(v)) {
            global1_ = nn::Linear(store_, "global.l1", dims.global, cfg.global_hidden);
            global2_ = nn::Linear(store_, "global.l2", cfg.global_hidden, d);
            merged += d;
        }
        merge_ = nn::Linear(store_, "merge", merged, cfg.embed_dim);
        head_f_ = nn::Linear(store_, "head.fusion", cfg.embed_dim, n_users);
        if (has_aux_heads()) {
            head_m_ = nn::Linear(store_, "head.movement", d, n_users);
            head_r_ = nn::Linear(store_, "head.route", d, n_users);
        }
    }

    const ModelConfig& config() const { return cfg_; }
    const InputDims& dims() const { return dims_; }
    std::size_t user_count() const { return users_; }
    ParamStore& store() { return store_; }
    const ParamStore& store() const { return store_; }
    /// Training passes an rng to switch dropout on; nullptr restores inference behaviour.
    void set_dropout_rng(Rng* rng) { drop_ = {cfg_.dropout, rng}; }
    bool has_aux_heads() const { return uses_movement(cfg_.variant) && uses_route(cfg_.variant); }

    Var encode_movement(Tape& t, const Tensor& seq) {
        check_seq(seq, dims_.movement, "movement");
        return move_enc_(t, store_, t.constant(truncate(seq, cfg_.L_m_max)), nullptr, &drop_);
    }
    Var encode_route(Tape& t, const Tensor& seq) {
        check_seq(seq, dims_.route, "route");
        return route_enc_(t, store_, t.constant(truncate(seq, cfg_.L_r_max)), nullptr, &drop_);
    }
    Var encode_route(Tape& t, const features::Rows& seg_rows, const std::vector<std::string>& seg_ids,
                     const graph::SegmentEmbeddingTable& table) {
        return encode_route(t, route_input(seg_rows, seg_ids, table));
    }

    /// Pools A_m along time to L_r rows, then applies the learned feature map.
    Var consistent(Tape& t, Var am, std::size_t lr) { return consistent_(t, store_, nn::matmul(t.constant(pooling_matrix(am.rows(), lr)), am)); }

    /// LN(softmax(Am_c A_r^T / sqrt(d)) Am_c + Am_c)
    Var fuse(Tape& t, Var amc, Var ar, Tensor* weights = nullptr) {
        if (!amc.value().same_shape(ar.value())) throw ShapeError("fuse expects equal shapes after the consistent layer");
        auto scores = nn::scale(nn::matmul_nt(amc, ar), 1.0 / std::sqrt(static_cast<double>(amc.cols())));
        auto w = nn::softmax_rows(scores);
        if (weights) *weights = w.value();
        return fuse_norm_(t, store_, nn::add(nn::matmul(w, amc), amc));
    }

    Var reduce_movement(Tape& t, Var x, const std::vector<char>* valid = nullptr) { return reduce_m_(t, store_, x, valid); }
    Var reduce_route(Tape& t, Var x, const std::vector<char>* valid = nullptr) { return reduce_r_(t, store_, x, valid); }
    Var reduce_fused(Tape& t, Var x, const std::vector<char>* valid = nullptr) { return reduce_f_(t, store_, x, valid); }

    Var encode_global(Tape& t, const Tensor& g) {
        if (g.rows() != 1 || g.cols() != dims_.global)
            throw ShapeError("global feature has width " + std::to_string(g.cols()) + ", expected " + std::to_string(dims_.global));
        return global2_(t, store_, nn::relu(global1_(t, store_, t.constant(g))));
    }

    Forward forward(Tape& t, const Sample& s) {
        const auto v = cfg_.variant;
        std::vector<Var> parts;
        Forward out;
        if (uses_attention(v)) {
            auto am = encode_movement(t, s.movement);
            auto ar = encode_route(t, s.route);
            out.movement_vec = reduce_movement(t, am);
            out.route_vec = reduce_route(t, ar);
            if (v == Variant::double_fusion) {
                parts.push_back(reduce_fused(t, fuse(t, consistent(t, am, ar.rows()), ar)));
            } else {
                parts.push_back(*out.movement_vec);
                parts.push_back(*out.route_vec);
            }
        } else {
            if (uses_movement(v)) {
                check_seq(s.movement, dims_.movement, "movement");
                out.movement_vec = move_gru_.run(t, store_, t.constant(truncate(s.movement, cfg_.L_m_max)));
                parts.push_back(*out.movement_vec);
            }
            if (uses_route(v)) {
                check_seq(s.route, dims_.route, "route");
                out.route_vec = route_gru_.run(t, store_, t.constant(truncate(s.route, cfg_.L_r_max)));
                parts.push_back(*out.route_vec);
            }
        }
        if (uses_global(v)) parts.push_back(encode_global(t, s.global));
        out.embedding = merge_(t, store_, parts.size() == 1 ? parts.front() : nn::concat_cols(parts));
        return out;
    }

    /// L_fusion + alpha L_move + beta L_route for one sample.
    Var sample_loss(Tape& t, const Sample& s) {
        if (s.label >= users_) throw LookupError("label " + std::to_string(s.label) + " outside the " + std::to_string(users_) + " training users");
        auto f = forward(t, s);
        auto loss = nn::cross_entropy(head_f_(t, store_, f.embedding), {s.label});
        if (has_aux_heads()) {
            if (cfg_.alpha > 0)
                loss = nn::add(loss, nn::scale(nn::cross_entropy(head_m_(t, store_, *f.movement_vec), {s.label}), cfg_.alpha));
            if (cfg_.beta > 0)
                loss = nn::add(loss, nn::scale(nn::cross_entropy(head_r_(t, store_, *f.route_vec), {s.label}), cfg_.beta));
        }
        return loss;
    }

    /// Batch mean of the per-sample joint loss.
    Var forward_loss(Tape& t, const std::vector<const Sample*>& batch) {
        if (batch.empty()) throw ValidationError("batch", "empty batch");
        std::optional<Var> total;
        for (const auto* s : batch) {
            auto l = sample_loss(t, *s);
            total = total ? nn::add(*total, l) : l;
        }
        return nn::scale(*total, 1.0 / static_cast<double>(batch.size()));
    }

    std::vector<double> embed(const Sample& s) {
        Tape t;
        return forward(t, s).embedding.value().row_vector(0);
    }

private:
    static Tensor truncate(const Tensor& seq, std::size_t max_rows) {
        if (seq.rows() <= max_rows) return seq;
        Tensor out(max_rows, seq.cols());
        std::copy(seq.data().begin(), seq.data().begin() + static_cast<std::ptrdiff_t>(max_rows * seq.cols()), out.data().begin());
        return out;
    }
    static void check_seq(const Tensor& seq, std::size_t width, const char* what) {
        if (seq.rows() == 0) throw ShapeError(std::string("empty ") + what + " sequence");
        if (seq.cols() != width)
            throw ShapeError(std::string(what) + " rows have width " + std::to_string(seq.cols()) + ", expected " + std::to_string(width));
    }

    ModelConfig cfg_;
    InputDims dims_;
    std::size_t users_;
    ParamStore store_;
    nn::SequenceEncoder move_enc_, route_enc_;
    nn::GruCell move_gru_, route_gru_;
    nn::Linear consistent_;
    nn::LayerNorm fuse_norm_;
    Reduce reduce_m_, reduce_r_, reduce_f_;
    nn::Linear global1_, global2_, merge_, head_f_, head_m_, head_r_;
    nn::Dropout drop_;
};

struct TrainResult {
    std::vector<double> history; ///< mean batch loss per epoch
};

/// Mini-batch Adam; the shuffle of epoch e is seeded by (seed, e).
inline TrainResult train(DouFuModel& m, const std::vector<Sample>& data) {
    const auto& cfg = m.config();
    if (data.empty()) throw ValidationError("data", "no training samples");
    TrainResult res;
    std::vector<std::size_t> order(data.size());
    Rng drop_rng(derive_seed(cfg.seed, 7000));
    m.set_dropout_rng(&drop_rng);
    struct Restore {
        DouFuModel& m;
        ~Restore() { m.set_dropout_rng(nullptr); }
    } restore{m};
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(cfg.seed, 5000 + static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);
        double sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            std::vector<const Sample*> batch;
            for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch); ++k) batch.push_back(&data[order[k]]);
            Tape t;
            auto loss = m.forward_loss(t, batch);
            const double value = loss.value().item();
            if (!std::isfinite(value)) throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
            t.backward(loss);
            nn::adam_step(m.store(), {cfg.lr});
            sum += value;
            ++batches;
        }
        res.history.push_back(sum / static_cast<double>(batches));
    }
    return res;
}

struct EmbeddingRecord {
    std::string traj_id;
    std::string user;
    std::vector<double> vec;
};

inline void write_embeddings(std::ostream& out, const std::vector<EmbeddingRecord>& rows) {
    for (const auto& r : rows) {
        out << r.traj_id << ',' << r.user;
        for (double v : r.vec) out << ',' << format_double(v);
        out << '\n';
    }
}

inline std::vector<EmbeddingRecord> read_embeddings(std::istream& in) {
    std::vector<EmbeddingRecord> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        auto f = split(trim(line), ',');
        if (f.size() < 3) throw ParseError(lineno, "embedding row needs traj_id, user_id and values");
        EmbeddingRecord r{f[0], f[1], {}};
        for (std::size_t k = 2; k < f.size(); ++k) {
            double v = 0;
            if (!parse_double(f[k], v)) throw ParseError(lineno, "bad embedding value '" + f[k] + "'");
            r.vec.push_back(v);
        }
        if (!rows.empty() && rows.front().vec.size() != r.vec.size()) throw ParseError(lineno, "inconsistent embedding width");
        rows.push_back(std::move(r));
    }
    return rows;
}

} // namespace doufu::model
