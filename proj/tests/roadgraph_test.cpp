#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "doufu/roadgraph.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"

using namespace doufu;
using namespace doufu::graph;

namespace {

std::set<std::pair<std::string, std::string>> named_edges(const RoadGraph& g) {
    std::set<std::pair<std::string, std::string>> out;
    for (auto [i, j] : g.edges) out.insert({g.vertices[i], g.vertices[j]});
    return out;
}

RoadGraph four_route_graph() { return build_graph(fixtures::four_route_routes(), fixtures::four_route_network()); }

void fill_all(ParamStore& s) {
    double off = 0.0;
    for (auto& p : s.params()) gradcheck::fill(p, off += 0.37);
}

} // namespace

TEST(BuildGraph, FourRouteFixture) {
    auto g = four_route_graph();
    EXPECT_EQ(g.vertices, (std::vector<std::string>{"R1", "R2", "R3", "R4", "R5"}));
    EXPECT_EQ(named_edges(g), (std::set<std::pair<std::string, std::string>>{
                                  {"R1", "R2"}, {"R2", "R3"}, {"R2", "R4"}, {"R1", "R5"}, {"R5", "R2"}, {"R4", "R5"}}));
    EXPECT_THROW(g.index_of("R6"), LookupError);
    EXPECT_EQ(g.x.size(), 5u);
    EXPECT_EQ(g.x[0].size(), features::route_dim(5, 5));
}

TEST(BuildGraph, SingleSegmentAndDuplicateTransitions) {
    auto net = fixtures::four_route_network();
    auto one = build_graph({Route{{"R3"}}}, net);
    EXPECT_EQ(one.size(), 1u);
    EXPECT_TRUE(one.edges.empty());
    auto dup = build_graph({Route{{"R1", "R2"}}, Route{{"R1", "R2", "R3"}}}, net);
    EXPECT_EQ(dup.edges.size(), 2u);
    EXPECT_THROW(build_graph({}, net), ValidationError);
}

TEST(BuildGraph, OrderInsensitive) {
    auto net = fixtures::four_route_network();
    auto routes = fixtures::four_route_routes();
    auto base = build_graph(routes, net);
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        std::shuffle(routes.begin(), routes.end(), rng);
        auto g = build_graph(routes, net);
        EXPECT_EQ(g.vertices, base.vertices);
        EXPECT_EQ(g.edges, base.edges);
        EXPECT_EQ(g.x, base.x);
    }
}

TEST(Adjacency, SymmetricNormalizationWithSelfLoops) {
    RoadGraph g;
    g.vertices = {"a", "b", "c"};
    g.edges = {{0, 1}, {1, 2}};
    g.finalize();
    auto a = normalized_adjacency(g);
    EXPECT_NEAR(a(0, 0), 0.5, 1e-15);
    EXPECT_NEAR(a(0, 1), 1.0 / std::sqrt(6.0), 1e-15);
    EXPECT_NEAR(a(1, 0), a(0, 1), 1e-15);
    EXPECT_NEAR(a(1, 1), 1.0 / 3.0, 1e-15);
    EXPECT_EQ(a(0, 2), 0.0);
}

TEST(GcnEncode, ZeroWeightsGiveZeroOutputs) {
    auto g = four_route_graph();
    Vgae m(g.x[0].size(), {4, 6, 0.01, 0, 1});
    for (auto& p : m.store.params()) std::fill(p.value.data().begin(), p.value.data().end(), 0.0);
    Tape t;
    auto enc = gcn_encode(t, m, normalized_adjacency(g), standardized_features(g));
    for (double v : enc.mu.value().data()) EXPECT_EQ(v, 0.0);
    for (double v : enc.logvar.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(GcnEncode, IsolatedVertexSeesOnlyItself) {
    RoadGraph g;
    g.vertices = {"a", "b", "c"};
    g.edges = {{0, 1}};
    g.x = {{1, 2}, {3, -1}, {0.5, 0.25}};
    g.finalize();
    Vgae m(2, {3, 4, 0.01, 0, 2});
    auto mu_of_c = [&](const features::Rows& x) {
        Tape t;
        return gcn_encode(t, m, normalized_adjacency(g), Tensor::from_rows(x)).mu.value().row_vector(2);
    };
    auto base = mu_of_c(g.x);
    auto changed = g.x;
    changed[0] = {-9, 9};
    changed[1] = {4, 4};
    EXPECT_EQ(mu_of_c(changed), base);
}

TEST(GcnEncode, PathGraphMatchesDenseOracle) {
    RoadGraph g;
    g.vertices = {"a", "b", "c"};
    g.edges = {{0, 1}, {2, 1}};
    g.finalize();
    Vgae m(2, {2, 3, 0.01, 0, 3});
    fill_all(m.store);
    const auto x = Tensor::from_rows({{0.4, -1.0}, {1.5, 0.2}, {-0.3, 0.9}});
    Tape t;
    auto enc = gcn_encode(t, m, normalized_adjacency(g), x);

    // Hand-built adjacency for the path a - b - c with self-loops: degrees 2, 3, 2.
    const double ab = 1 / std::sqrt(6.0);
    const double A[3][3] = {{0.5, ab, 0}, {ab, 1.0 / 3, ab}, {0, ab, 0.5}};
    auto W = [&](const char* n) { return m.store.get(n).value; };
    double ax[3][2] = {}, h[3][3] = {}, ah[3][3] = {};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int c = 0; c < 2; ++c) ax[i][c] += A[i][j] * x(static_cast<std::size_t>(j), static_cast<std::size_t>(c));
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) {
            for (int c = 0; c < 2; ++c) h[i][k] += ax[i][c] * W("vgae.w0")(static_cast<std::size_t>(c), static_cast<std::size_t>(k));
            h[i][k] = std::max(0.0, h[i][k]);
        }
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) ah[i][k] += A[i][j] * h[j][k];
    for (int i = 0; i < 3; ++i)
        for (int o = 0; o < 2; ++o) {
            double mu = 0, lv = 0;
            for (int k = 0; k < 3; ++k) {
                mu += ah[i][k] * W("vgae.w_mu")(static_cast<std::size_t>(k), static_cast<std::size_t>(o));
                lv += ah[i][k] * W("vgae.w_logvar")(static_cast<std::size_t>(k), static_cast<std::size_t>(o));
            }
            EXPECT_NEAR(enc.mu.value()(static_cast<std::size_t>(i), static_cast<std::size_t>(o)), mu, 1e-12);
            EXPECT_NEAR(enc.logvar.value()(static_cast<std::size_t>(i), static_cast<std::size_t>(o)), lv, 1e-12);
        }
    EXPECT_THROW(gcn_encode(t, m, normalized_adjacency(g), Tensor(3, 5)), ShapeError);
}

TEST(DecodeEdge, KnownValues) {
    EXPECT_EQ(decode_edge({0, 0}, {0, 0}), 0.5);
    EXPECT_EQ(decode_edge({1, 0}, {0, 3}), 0.5);
    EXPECT_NEAR(decode_edge({2, 0}, {2, 0}), 0.9820, 1e-4);
    EXPECT_THROW(decode_edge({1}, {1, 2}), ShapeError);
}

TEST(VgaeLoss, PriorPosteriorAndHalfProbabilities) {
    auto g = four_route_graph();
    auto sample = draw_sample(g, 3, 5);
    std::fill(sample.eps.data().begin(), sample.eps.data().end(), 0.0);
    Tape t;
    Encoded enc{t.constant(Tensor(g.size(), 3)), t.constant(Tensor(g.size(), 3))};
    EXPECT_NEAR(vgae_loss(t, enc, g.edges, sample).value().item(), std::log(2.0), 1e-15);
}

TEST(VgaeLoss, MatchesBruteForceSummation) {
    RoadGraph g;
    g.vertices = {"a", "b", "c", "d"};
    g.edges = {{0, 1}, {1, 2}, {2, 3}};
    g.finalize();
    auto sample = draw_sample(g, 2, 9);
    for (auto [i, j] : sample.negatives) EXPECT_FALSE(g.adjacent(i, j));
    ASSERT_EQ(sample.negatives.size(), 3u);
    const auto mu = Tensor::from_rows({{0.3, -0.2}, {1.1, 0.4}, {-0.7, 0.5}, {0.2, 0.9}});
    const auto lv = Tensor::from_rows({{-0.1, 0.2}, {0.0, -0.5}, {0.3, 0.1}, {-0.2, -0.3}});
    Tape t;
    const double got = vgae_loss(t, {t.constant(mu), t.constant(lv)}, g.edges, sample).value().item();

    auto z = [&](std::size_t i, std::size_t k) { return mu(i, k) + sample.eps(i, k) * std::exp(lv(i, k) / 2); };
    double bce = 0;
    int terms = 0;
    auto add_term = [&](std::size_t i, std::size_t j, bool positive) {
        const double p = 1 / (1 + std::exp(-(z(i, 0) * z(j, 0) + z(i, 1) * z(j, 1))));
        bce += positive ? -std::log(p) : -std::log(1 - p);
        ++terms;
    };
    for (auto [i, j] : g.edges) add_term(i, j, true);
    for (auto [i, j] : sample.negatives) add_term(i, j, false);
    double kl = 0;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t k = 0; k < 2; ++k) kl += -0.5 * (1 + lv(i, k) - mu(i, k) * mu(i, k) - std::exp(lv(i, k)));
    EXPECT_NEAR(got, bce / terms + kl / 4 / 4, 1e-12);
}

TEST(VgaeLoss, NoEdgesIsAnError) {
    RoadGraph g;
    g.vertices = {"a", "b"};
    g.finalize();
    EXPECT_THROW(draw_sample(g, 2, 1), ValidationError);
}

TEST(VgaeLoss, GradientMatchesFiniteDifferences) {
    RoadGraph g;
    g.vertices = {"a", "b", "c", "d"};
    g.edges = {{0, 1}, {1, 2}, {3, 1}};
    g.x = {{0.5, -1, 0.2}, {1, 0.3, -0.4}, {-0.6, 0.8, 1.2}, {0.1, 0.1, -0.9}};
    g.finalize();
    Vgae m(3, {2, 4, 0.01, 0, 7});
    const auto a = normalized_adjacency(g);
    const auto x = Tensor::from_rows(g.x);
    const auto sample = draw_sample(g, 2, 3);
    auto r = gradcheck::check(m.store, [&](Tape& t, ParamStore&) { return vgae_loss(t, gcn_encode(t, m, a, x), g.edges, sample); });
    EXPECT_LT(r.worst, 1e-4) << r.tensor;
}

TEST(Pretrain, EpochsZeroIsUntrainedMeanAndSeedIsDeterministic) {
    auto g = four_route_graph();
    VgaeConfig cfg{4, 8, 0.01, 0, 5};
    auto untrained = pretrain(g, cfg);
    Vgae m(g.x[0].size(), cfg);
    Tape t;
    auto mu = gcn_encode(t, m, normalized_adjacency(g), standardized_features(g)).mu.value();
    EXPECT_EQ(untrained.table, embedding_table(g, mu));
    EXPECT_TRUE(untrained.losses.empty());
    cfg.epochs = 20;
    EXPECT_EQ(pretrain(g, cfg).table, pretrain(g, cfg).table);
}

TEST(Pretrain, FourRouteLearnsItsEdges) {
    auto g = four_route_graph();
    auto res = pretrain(g, {});
    ASSERT_EQ(res.losses.size(), 200u);
    EXPECT_LT(res.losses.back(), res.losses.front());
    std::vector<Edge> non;
    for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t j = 0; j < g.size(); ++j)
            if (i != j && !g.adjacent(i, j)) non.push_back({i, j});
    EXPECT_GT(link_auc(res.table, g, g.edges, non), 0.5);
}

TEST(Pretrain, SmoothedLossIsNonIncreasing) {
    auto g = fixtures::synthetic_graph(200, 1);
    auto res = pretrain(g, {});
    EXPECT_LT(res.losses.back(), res.losses.front());
    const std::size_t w = 20;
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t e = 0; e + w <= res.losses.size(); e += w) {
        double avg = 0;
        for (std::size_t k = e; k < e + w; ++k) avg += res.losses[k];
        avg /= w;
        // Fresh negatives and noise every epoch leave a plateau wiggle of about one percent.
        EXPECT_LE(avg, prev * 1.02) << "window starting at epoch " << e;
        prev = avg;
    }
}

TEST(Auc, MatchesPairCounting) {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> val(0, 6);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> pos(1 + trial % 7), neg(1 + trial % 5);
        for (auto& v : pos) v = val(rng);
        for (auto& v : neg) v = val(rng);
        double wins = 0;
        for (double p : pos)
            for (double q : neg) wins += p > q ? 1.0 : p == q ? 0.5 : 0.0;
        EXPECT_NEAR(auc(pos, neg), wins / static_cast<double>(pos.size() * neg.size()), 1e-12);
    }
}

TEST(EdgeSplit, DisjointAndBalanced) {
    auto g = fixtures::synthetic_graph(200, 2);
    ASSERT_EQ(g.size(), 200u);
    auto s = split_edges(g, 0.15, 3);
    EXPECT_EQ(s.test_pos.size(), s.test_neg.size());
    EXPECT_EQ(s.train.edges.size() + s.test_pos.size(), g.edges.size());
    for (auto e : s.test_pos) EXPECT_FALSE(s.train.has_edge(e.first, e.second));
    for (auto [i, j] : s.test_neg) EXPECT_FALSE(g.adjacent(i, j));
}

TEST(GraphFiles, EdgeListAndEmbeddingRoundTrip) {
    auto g = four_route_graph();
    std::ostringstream edges;
    write_graph(edges, g);
    EXPECT_EQ(edges.str().substr(0, 14), "src_id,dst_id\n");
    EXPECT_NE(edges.str().find("R5,R2\n"), std::string::npos);
    auto res = pretrain(g, {4, 8, 0.01, 3, 1});
    std::stringstream buf;
    write_embeddings(buf, res.table);
    EXPECT_EQ(read_embeddings(buf), res.table);
    std::istringstream bad("R1,0.5\nR2,0.5,1\n");
    EXPECT_THROW(read_embeddings(bad), ParseError);
}
