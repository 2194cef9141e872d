#pragma once

// Segment-dual road graph from observed routes and a variational graph autoencoder
// that turns each segment into a fixed-length geometric embedding.

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "doufu/core.hpp"
#include "doufu/features.hpp"
#include "doufu/nn.hpp"

namespace doufu::graph {

using nn::Init;
using nn::ParamStore;
using nn::Tape;
using nn::Tensor;
using nn::Var;
using Edge = std::pair<std::size_t, std::size_t>;

struct RoadGraph {
    std::vector<std::string> vertices; ///< segment ids, in network order
    std::vector<Edge> edges;           ///< sorted, deduplicated (src, dst) vertex indices
    features::Rows x;                  ///< per-vertex route feature rows

    std::size_t size() const { return vertices.size(); }
    std::size_t index_of(const std::string& id) const {
        auto it = std::lower_bound(order_.begin(), order_.end(), id,
                                   [&](std::size_t v, const std::string& key) { return vertices[v] < key; });
        if (it == order_.end() || vertices[*it] != id) throw LookupError("segment not in graph: " + id);
        return *it;
    }
    bool has_edge(std::size_t i, std::size_t j) const { return std::binary_search(edges.begin(), edges.end(), Edge{i, j}); }
    bool adjacent(std::size_t i, std::size_t j) const { return has_edge(i, j) || has_edge(j, i); }

    /// Rebuilds the id lookup and canonical edge order; call after editing fields directly.
    void finalize() {
        std::sort(edges.begin(), edges.end());
        edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
        for (auto [i, j] : edges) {
            if (i == j) throw ValidationError("edges", "self-loop on " + vertices.at(i));
            if (i >= size() || j >= size()) throw ValidationError("edges", "edge references a missing vertex");
        }
        if (!x.empty() && x.size() != size()) throw ShapeError("vertex feature count mismatch");
        order_.resize(size());
        std::iota(order_.begin(), order_.end(), 0);
        std::sort(order_.begin(), order_.end(), [&](std::size_t a, std::size_t b) { return vertices[a] < vertices[b]; });
    }

private:
    std::vector<std::size_t> order_;
};

inline RoadGraph build_graph(const std::vector<Route>& routes, const RoadNetwork& net) {
    if (routes.empty()) throw ValidationError("routes", "no routes to build a graph from");
    std::vector<char> used(net.size(), 0);
    std::set<Edge> seg_edges;
    for (const auto& r : routes)
        for (std::size_t k = 0; k < r.segments.size(); ++k) {
            const auto cur = net.index_of(r.segments[k]);
            used[cur] = 1;
            if (k > 0) {
                const auto prev = net.index_of(r.segments[k - 1]);
                if (prev != cur) seg_edges.insert({prev, cur});
            }
        }
    RoadGraph g;
    std::vector<std::size_t> vertex_of(net.size(), 0);
    const auto ref = net.reference_origin();
    for (std::size_t s = 0; s < net.size(); ++s) {
        if (!used[s]) continue;
        vertex_of[s] = g.vertices.size();
        g.vertices.push_back(net.segment(s).id);
        g.x.push_back(features::segment_features(net.segment(s), ref, net.class_count()));
    }
    for (auto [a, b] : seg_edges) g.edges.push_back({vertex_of[a], vertex_of[b]});
    g.finalize();
    return g;
}

/// Induced subgraph on the given vertex indices (kept in the given order).
inline RoadGraph induced_subgraph(const RoadGraph& g, const std::vector<std::size_t>& keep) {
    std::vector<std::size_t> remap(g.size(), g.size());
    RoadGraph out;
    for (auto v : keep) {
        if (v >= g.size()) throw LookupError("vertex index out of range");
        remap[v] = out.vertices.size();
        out.vertices.push_back(g.vertices[v]);
        if (!g.x.empty()) out.x.push_back(g.x[v]);
    }
    for (auto [i, j] : g.edges)
        if (remap[i] < g.size() && remap[j] < g.size()) out.edges.push_back({remap[i], remap[j]});
    out.finalize();
    return out;
}

/// D^{-1/2} (A + A^T > 0, plus I) D^{-1/2} as a dense matrix.
inline Tensor normalized_adjacency(const RoadGraph& g) {
    const std::size_t n = g.size();
    Tensor a(n, n);
    for (std::size_t i = 0; i < n; ++i) a(i, i) = 1.0;
    for (auto [i, j] : g.edges) a(i, j) = a(j, i) = 1.0;
    std::vector<double> inv_sqrt(n);
    for (std::size_t i = 0; i < n; ++i) {
        double deg = 0.0;
        for (std::size_t j = 0; j < n; ++j) deg += a(i, j);
        inv_sqrt[i] = 1.0 / std::sqrt(deg);
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a(i, j) *= inv_sqrt[i] * inv_sqrt[j];
    return a;
}

struct VgaeConfig {
    std::size_t d_z = 32;
    std::size_t hidden = 64;
    double lr = 0.01;
    int epochs = 200;
    std::uint64_t seed = 0;
};

inline void validate(const VgaeConfig& c) {
    if (c.d_z == 0) throw ValidationError("d_z", "must be positive");
    if (c.hidden == 0) throw ValidationError("hidden", "must be positive");
    if (!(c.lr > 0) || !std::isfinite(c.lr)) throw ValidationError("lr", "must be positive and finite");
    if (c.epochs < 0) throw ValidationError("epochs", "must be >= 0");
}

/// Two graph-convolution layers: a shared first layer, then separate mean and log-variance heads.
struct Vgae {
    ParamStore store;
    std::size_t in_dim = 0;
    VgaeConfig cfg;

    Vgae(std::size_t input_dim, const VgaeConfig& c) : store(derive_seed(c.seed, 101)), in_dim(input_dim), cfg(c) {
        validate(c);
        store.add("vgae.w0", in_dim, cfg.hidden, Init::fan_in_uniform);
        store.add("vgae.w_mu", cfg.hidden, cfg.d_z, Init::fan_in_uniform);
        store.add("vgae.w_logvar", cfg.hidden, cfg.d_z, Init::fan_in_uniform);
    }
};

struct Encoded {
    Var mu;
    Var logvar;
};

inline Encoded gcn_encode(Tape& t, Vgae& m, const Tensor& a_hat, const Tensor& x) {
    if (x.cols() != m.in_dim) throw ShapeError("vertex features have width " + std::to_string(x.cols()) + ", encoder expects " +
                                               std::to_string(m.in_dim));
    if (a_hat.rows() != x.rows() || a_hat.cols() != x.rows()) throw ShapeError("adjacency does not match vertex count");
    auto a = t.constant(a_hat);
    auto h = nn::relu(nn::matmul(a, nn::matmul(t.constant(x), t.param(m.store, "vgae.w0"))));
    auto ah = nn::matmul(a, h);
    return {nn::matmul(ah, t.param(m.store, "vgae.w_mu")), nn::matmul(ah, t.param(m.store, "vgae.w_logvar"))};
}

inline double decode_edge(const std::vector<double>& zi, const std::vector<double>& zj) {
    if (zi.size() != zj.size()) throw ShapeError("decode_edge dimension mismatch");
    return nn::sigmoid_scalar(std::inner_product(zi.begin(), zi.end(), zj.begin(), 0.0));
}

/// Negative pairs and reparameterization noise for one loss evaluation.
struct LossSample {
    std::vector<Edge> negatives;
    Tensor eps;
};

/// One uniform non-adjacent ordered pair per positive edge, plus standard normal noise.
inline LossSample draw_sample(const RoadGraph& g, std::size_t d_z, std::uint64_t seed) {
    if (g.edges.empty()) throw ValidationError("edges", "graph has no edges to reconstruct");
    const std::size_t n = g.size();
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    LossSample s;
    for (std::size_t k = 0; k < g.edges.size(); ++k) {
        for (int attempt = 0; attempt < 10000; ++attempt) {
            const auto i = pick(rng), j = pick(rng);
            if (i != j && !g.adjacent(i, j)) {
                s.negatives.push_back({i, j});
                break;
            }
        }
    }
    if (s.negatives.empty()) throw ValidationError("edges", "graph is complete; no negative pairs exist");
    s.eps = Tensor(n, d_z);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& v : s.eps.data()) v = normal(rng);
    return s;
}

/// Mean BCE over positives and sampled negatives plus the vertex-averaged KL to N(0, I), scaled by 1/|V|.
inline Var vgae_loss(Tape& t, const Encoded& enc, const std::vector<Edge>& positives, const LossSample& sample) {
    if (positives.empty()) throw ValidationError("edges", "graph has no edges to reconstruct");
    if (!enc.mu.value().all_finite() || !enc.logvar.value().all_finite()) throw NumericError("non-finite encoder output");
    const std::size_t n = enc.mu.rows();
    auto z = nn::add(enc.mu, nn::mul(t.constant(sample.eps), nn::exp(nn::scale(enc.logvar, 0.5))));
    std::vector<std::size_t> src, dst;
    std::vector<double> target;
    for (auto [i, j] : positives) {
        src.push_back(i);
        dst.push_back(j);
        target.push_back(1.0);
    }
    for (auto [i, j] : sample.negatives) {
        src.push_back(i);
        dst.push_back(j);
        target.push_back(0.0);
    }
    auto logits = nn::row_sum(nn::mul(nn::gather_rows(z, src), nn::gather_rows(z, dst)));
    auto recon = nn::bce_with_logits(logits, target);
    // KL = -1/2 sum(1 + logvar - mu^2 - exp(logvar))
    const double count = static_cast<double>(enc.mu.value().size());
    auto inner = nn::sub(nn::sub(nn::sum(enc.logvar), nn::sum(nn::mul(enc.mu, enc.mu))), nn::sum(nn::exp(enc.logvar)));
    const double nv = static_cast<double>(n);
    auto kl = nn::scale(nn::add(inner, t.constant(Tensor::scalar(count))), -0.5 / (nv * nv));
    return nn::add(recon, kl);
}

using SegmentEmbeddingTable = std::map<std::string, std::vector<double>>;

struct PretrainResult {
    SegmentEmbeddingTable table;
    std::vector<double> losses; ///< per epoch, on a fixed monitoring draw so epochs are comparable
};

inline Tensor standardized_features(const RoadGraph& g) {
    if (g.x.empty()) throw ShapeError("graph has no vertex features");
    return Tensor::from_rows(features::Standardizer::fit(g.x).apply(g.x));
}

inline SegmentEmbeddingTable embedding_table(const RoadGraph& g, const Tensor& mu) {
    SegmentEmbeddingTable table;
    for (std::size_t v = 0; v < g.size(); ++v) table[g.vertices[v]] = mu.row_vector(v);
    return table;
}

/// Adam on the VGAE objective with a fresh draw each epoch; the exported embeddings are the posterior means.
inline PretrainResult pretrain(const RoadGraph& g, const VgaeConfig& cfg) {
    validate(cfg);
    const auto x = standardized_features(g);
    const auto a_hat = normalized_adjacency(g);
    Vgae model(x.cols(), cfg);
    PretrainResult res;
    const auto monitor = cfg.epochs > 0 ? draw_sample(g, cfg.d_z, derive_seed(cfg.seed, 999)) : LossSample{};
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Tape t;
        auto enc = gcn_encode(t, model, a_hat, x);
        auto loss = vgae_loss(t, enc, g.edges, draw_sample(g, cfg.d_z, derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch))));
        const double watched = vgae_loss(t, enc, g.edges, monitor).value().item();
        if (!std::isfinite(loss.value().item()) || !std::isfinite(watched))
            throw NumericError("VGAE loss diverged at epoch " + std::to_string(epoch));
        res.losses.push_back(watched);
        t.backward(loss);
        nn::adam_step(model.store, {cfg.lr});
    }
    Tape t;
    res.table = embedding_table(g, gcn_encode(t, model, a_hat, x).mu.value());
    return res;
}

// ---------------------------------------------------------------------------
// Link prediction evaluation

/// Rank-based AUC (Mann-Whitney U); ties count one half.
inline double auc(const std::vector<double>& pos, const std::vector<double>& neg) {
    if (pos.empty() || neg.empty()) throw ValidationError("scores", "AUC needs both positive and negative scores");
    std::vector<std::pair<double, int>> all;
    for (double p : pos) all.push_back({p, 1});
    for (double q : neg) all.push_back({q, 0});
    std::sort(all.begin(), all.end());
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < all.size();) {
        std::size_t j = i;
        while (j < all.size() && all[j].first == all[i].first) ++j;
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k)
            if (all[k].second) rank_sum += avg_rank;
        i = j;
    }
    const double np = static_cast<double>(pos.size()), nq = static_cast<double>(neg.size());
    return (rank_sum - np * (np + 1) / 2) / (np * nq);
}

struct EdgeSplit {
    RoadGraph train;
    std::vector<Edge> test_pos;
    std::vector<Edge> test_neg; ///< pairs adjacent in neither direction in the full graph
};

inline EdgeSplit split_edges(const RoadGraph& g, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction > 0 && test_fraction < 1)) throw ValidationError("test_fraction", "must be in (0, 1)");
    Rng rng(seed);
    auto edges = g.edges;
    std::shuffle(edges.begin(), edges.end(), rng);
    const auto n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::round(test_fraction * static_cast<double>(edges.size()))));
    if (n_test >= edges.size()) throw ValidationError("edges", "too few edges to split");
    EdgeSplit s{g, {edges.begin(), edges.begin() + static_cast<std::ptrdiff_t>(n_test)}, {}};
    s.train.edges.assign(edges.begin() + static_cast<std::ptrdiff_t>(n_test), edges.end());
    s.train.finalize();
    std::uniform_int_distribution<std::size_t> pick(0, g.size() - 1);
    std::set<Edge> taken;
    while (s.test_neg.size() < s.test_pos.size()) {
        const auto i = pick(rng), j = pick(rng);
        if (i != j && !g.adjacent(i, j) && taken.insert({i, j}).second) s.test_neg.push_back({i, j});
    }
    return s;
}

inline double link_auc(const SegmentEmbeddingTable& table, const RoadGraph& g, const std::vector<Edge>& pos,
                       const std::vector<Edge>& neg) {
    auto score = [&](const std::vector<Edge>& es) {
        std::vector<double> out;
        for (auto [i, j] : es) out.push_back(decode_edge(table.at(g.vertices[i]), table.at(g.vertices[j])));
        return out;
    };
    return auc(score(pos), score(neg));
}

// ---------------------------------------------------------------------------
// Files

inline void write_graph(std::ostream& out, const RoadGraph& g) {
    out << "src_id,dst_id\n";
    for (auto [i, j] : g.edges) out << g.vertices[i] << ',' << g.vertices[j] << '\n';
}

/// Vertex manifest: `seg_id,x1..x_D` in graph order.
inline void write_vertices(std::ostream& out, const RoadGraph& g) {
    out << "seg_id,features\n";
    for (std::size_t v = 0; v < g.size(); ++v) {
        out << g.vertices[v];
        for (double x : g.x[v]) out << ',' << format_double(x);
        out << '\n';
    }
}

inline void write_embeddings(std::ostream& out, const SegmentEmbeddingTable& table) {
    for (const auto& [id, v] : table) {
        out << id;
        for (double x : v) out << ',' << format_double(x);
        out << '\n';
    }
}

inline SegmentEmbeddingTable read_embeddings(std::istream& in) {
    SegmentEmbeddingTable table;
    std::string line;
    std::size_t lineno = 0, width = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        auto f = split(trim(line), ',');
        std::vector<double> v;
        for (std::size_t k = 1; k < f.size(); ++k) {
            double d = 0;
            if (!parse_double(f[k], d)) throw ParseError(lineno, "bad embedding value '" + f[k] + "'");
            v.push_back(d);
        }
        if (v.empty() || (width && v.size() != width)) throw ParseError(lineno, "inconsistent embedding width");
        width = v.size();
        table[f[0]] = std::move(v);
    }
    return table;
}

} // namespace doufu::graph
