#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "compass/error.hpp"
#include "compass/metrics.hpp"
#include "metric_oracles.hpp"

using namespace compass;
using namespace compass::oracle;

namespace {

// Graph with one MLP component per layer at position 0 and Flow edges
// between the given layer pairs.
AttributionGraph mlp_graph(const std::vector<std::tuple<int, int, double>>& edges) {
    AttributionGraph g;
    std::set<NodeId> nodes;
    for (const auto& [u, v, s] : edges) {
        Edge e;
        e.src = NodeId::mlp(u, 0);
        e.dst = NodeId::mlp(v, 0);
        e.kind = EdgeKind::Flow;
        e.score = s;
        e.score_norm = s;
        g.edges.push_back(e);
        nodes.insert(e.src);
        nodes.insert(e.dst);
    }
    g.nodes.assign(nodes.begin(), nodes.end());
    g.normalization = "total_mass";
    return g;
}

AttributionGraph scored_random_graph(std::mt19937_64& rng) {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 8;
    c.d_head = 4;
    c.d_mlp = 16;
    c.vocab_size = 16;
    c.max_seq_len = 8;
    AttributionGraph g = build_graph(c, 3);
    std::normal_distribution<double> nd;
    for (Edge& e : g.edges) {
        e.score = e.score_norm = nd(rng);
    }
    return g;
}

}  // namespace

TEST(NodeMass, SingleEdgeCountsAtBothEndpoints) {
    const AttributionGraph g = mlp_graph({{0, 1, 0.4}});
    const auto mass = node_mass(g, full_circuit(g));
    EXPECT_DOUBLE_EQ(mass.at(NodeId::mlp(0, 0)), 0.4);
    EXPECT_DOUBLE_EQ(mass.at(NodeId::mlp(1, 0)), 0.4);
    double total = 0.0;
    for (const auto& [_, m] : mass) {
        total += m;
    }
    EXPECT_DOUBLE_EQ(total, 0.8);
}

TEST(NodeMass, EmptyCircuitIsAllZero) {
    const AttributionGraph g = mlp_graph({{0, 1, 0.4}, {1, 2, -0.3}});
    for (const auto& [_, m] : node_mass(g, Circuit{})) {
        EXPECT_EQ(m, 0.0);
    }
}

TEST(NodeMass, RandomCircuitsDoubleCount) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const AttributionGraph g = scored_random_graph(rng);
        std::vector<std::uint32_t> idx(g.edges.size());
        std::iota(idx.begin(), idx.end(), 0u);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(10);
        std::sort(idx.begin(), idx.end());
        const Circuit c{idx, 10};
        double edge_sum = 0.0;
        for (const auto i : idx) {
            edge_sum += std::abs(g.edges[i].score_norm);
        }
        double total = 0.0;
        for (const auto& [_, m] : node_mass(g, c)) {
            total += m;
        }
        EXPECT_NEAR(total, 2.0 * edge_sum, 1e-12);
    }
}

TEST(Sparsity, WorkedExamples) {
    EXPECT_DOUBLE_EQ(topk_mass({5, 3, 1, 1}, 2), selection_topk({5, 3, 1, 1}, 2));
    EXPECT_NEAR(topk_mass({5, 3, 1, 1}, 2), 0.8, 1e-15);
    EXPECT_EQ(topk_mass({5, 3, 1, 1}, 4), 1.0);
    EXPECT_EQ(topk_mass({5, 3, 1, 1}, 9), 1.0);
    EXPECT_NEAR(topk_mass(std::vector<double>(10, 0.7), 5), 0.5, 1e-12);
    EXPECT_EQ(coverage_k({5, 3, 1, 1}, 0.8), 2);
    EXPECT_EQ(coverage_k({5, 0, 3, 0, 1}, 1.0), 3);
    EXPECT_EQ(coverage_k({2.5}, 0.1), 1);
    EXPECT_EQ(coverage_k({2.5}, 1.0), 1);
    EXPECT_EQ(gini({1, 1, 1, 1}), 0.0);
    EXPECT_NEAR(gini({0, 0, 0, 0, 1}), pairwise_gini({0, 0, 0, 0, 1}), 1e-15);
    EXPECT_NEAR(gini({0, 0, 0, 0, 1}), 0.8, 1e-15);
    EXPECT_NEAR(gini({3, 1}), 0.25, 1e-15);
}

TEST(Sparsity, ZeroMassIsUndefined) {
    EXPECT_THROW(topk_mass({0, 0}, 1), UndefinedMetric);
    EXPECT_THROW(coverage_k({0, 0}, 0.5), UndefinedMetric);
    EXPECT_THROW(gini({0, 0, 0}), UndefinedMetric);
    EXPECT_THROW(gini({}), UndefinedMetric);
    EXPECT_THROW(topk_mass({1, -1}, 1), InvalidArgument);
    EXPECT_THROW(coverage_k({1}, 0.0), InvalidArgument);
}

TEST(Sparsity, RandomizedAgainstOracles) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> len(1, 40);
    std::exponential_distribution<double> ex(1.0);
    std::bernoulli_distribution zero(0.2);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> m(len(rng));
        for (double& x : m) {
            x = zero(rng) ? 0.0 : ex(rng);
        }
        m[0] += 0.1;
        double prev = 0.0;
        for (int k = 1; k <= static_cast<int>(m.size()) + 2; ++k) {
            const double t = topk_mass(m, k);
            EXPECT_NEAR(t, selection_topk(m, k), 1e-12);
            EXPECT_GE(t, prev - 1e-15);
            EXPECT_LE(t, 1.0);
            prev = t;
        }
        int prev_k = 0;
        for (const double p : {0.1, 0.5, 0.8, 0.9, 0.95, 1.0}) {
            int want = 1;
            while (selection_topk(m, want) < p * (1.0 - 1e-12)) {
                ++want;
            }
            const int got = coverage_k(m, p);
            EXPECT_EQ(got, want);
            EXPECT_GE(got, prev_k);
            prev_k = got;
        }
        const double g = gini(m);
        EXPECT_NEAR(g, pairwise_gini(m), 1e-12);
        EXPECT_GE(g, 0.0);
        EXPECT_LT(g, 1.0);
        std::vector<double> scaled = m;
        for (double& x : scaled) {
            x *= 3.7;
        }
        std::shuffle(scaled.begin(), scaled.end(), rng);
        EXPECT_NEAR(gini(scaled), g, 1e-12);
    }
}

TEST(Sparsity, ReportOverComponents) {
    const AttributionGraph g = mlp_graph({{0, 1, 0.5}, {1, 2, 0.3}, {2, 3, 0.2}});
    const SparsityReport r = sparsity_report(g, full_circuit(g));
    EXPECT_EQ(r.n_nodes, 4);
    EXPECT_EQ(r.topk_mass.at(5), 1.0);
    EXPECT_NEAR(r.gini, pairwise_gini({0.5, 0.8, 0.5, 0.2}), 1e-12);
    EXPECT_EQ(r.coverage.at(0.80), 3);
}

TEST(Structure, WorkedExamples) {
    EXPECT_EQ(digraph_density(3, {{0, 1}, {1, 0}, {0, 2}, {2, 0}, {1, 2}, {2, 1}}), 1.0);
    EXPECT_NEAR(digraph_reciprocity({{0, 1}, {1, 0}, {0, 2}}), 2.0 / 3.0, 1e-15);
    EXPECT_EQ(undirected_bridges(3, {{0, 1}, {1, 2}}), 2);
    EXPECT_EQ(removal_bridges(3, {{0, 1}, {1, 2}}), 2);
    const auto cb = betweenness(3, {{0, 1}, {1, 2}});
    EXPECT_DOUBLE_EQ(cb[1], 0.5);
    EXPECT_EQ(cb[0], 0.0);
}

TEST(Structure, RandomizedAgainstOracles) {
    std::mt19937_64 rng(9);
    std::uniform_int_distribution<int> size(2, 12);
    std::uniform_real_distribution<double> dens(0.05, 0.6);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = size(rng);
        const DiEdges e = random_digraph(rng, n, dens(rng));
        const auto a = adjacency(n, e);
        int count = 0;
        int rec = 0;
        for (int u = 0; u < n; ++u) {
            for (int v = 0; v < n; ++v) {
                count += a[u][v] ? 1 : 0;
                rec += a[u][v] && a[v][u] ? 1 : 0;
            }
        }
        const double density = digraph_density(n, e);
        EXPECT_NEAR(density, static_cast<double>(count) / (n * (n - 1.0)), 1e-15);
        EXPECT_GE(density, 0.0);
        EXPECT_LE(density, 1.0);
        const double r = digraph_reciprocity(e);
        EXPECT_NEAR(r, count ? static_cast<double>(rec) / count : 0.0, 1e-15);
        EXPECT_GE(r, 0.0);
        EXPECT_LE(r, 1.0);
        EXPECT_EQ(undirected_bridges(n, e), removal_bridges(n, e));
        const auto cb = betweenness(n, e);
        const auto want = path_count_betweenness(n, e);
        for (int v = 0; v < n; ++v) {
            EXPECT_NEAR(cb[v], want[v], 1e-12);
            EXPECT_GE(cb[v], 0.0);
            EXPECT_LE(cb[v], 1.0 + 1e-12);
        }
    }
}

TEST(Structure, ReportOnRandomCircuits) {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 200; ++trial) {
        const AttributionGraph g = scored_random_graph(rng);
        std::vector<std::uint32_t> idx(g.edges.size());
        std::iota(idx.begin(), idx.end(), 0u);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(1 + trial % 40);
        std::sort(idx.begin(), idx.end());
        const Circuit c{idx, static_cast<int>(idx.size())};
        const StructuralReport r = structural_report(g, c);
        EXPECT_EQ(r.n_edges, static_cast<int>(idx.size()));
        EXPECT_EQ(r.n_nodes, static_cast<int>(induced_node_set(g, c).size()));
        EXPECT_GE(r.density, 0.0);
        EXPECT_LE(r.density, 1.0);
        EXPECT_EQ(r.reciprocity, 0.0);  // the module graph is a DAG
        double frac = 0.0;
        for (const auto& [_, f] : r.edge_type_fractions) {
            EXPECT_GE(f, 0.0);
            frac += f;
        }
        EXPECT_NEAR(frac, 1.0, 1e-12);
        int lo = 99;
        int hi = -99;
        for (const auto i : idx) {
            for (const NodeId& n : {g.edges[i].src, g.edges[i].dst}) {
                lo = std::min(lo, n.layer);
                hi = std::max(hi, n.layer);
            }
        }
        EXPECT_EQ(r.layer_span, hi - lo);
    }
}

TEST(Structure, EmptyCircuitThrows) {
    const AttributionGraph g = mlp_graph({{0, 1, 0.4}});
    EXPECT_THROW(structural_report(g, Circuit{}), InvalidArgument);
}

TEST(Jaccard, Examples) {
    const std::set<int> s{1, 2, 3};
    EXPECT_EQ(jaccard(s, s), 1.0);
    EXPECT_NEAR(jaccard(std::set<char>{'a', 'b'}, std::set<char>{'b', 'c'}), 1.0 / 3.0, 1e-15);
    EXPECT_EQ(jaccard(std::set<int>{1}, std::set<int>{2}), 0.0);
    bool flagged = false;
    EXPECT_EQ(jaccard(std::set<int>{}, std::set<int>{}, &flagged), 1.0);
    EXPECT_TRUE(flagged);
    jaccard(s, s, &flagged);
    EXPECT_FALSE(flagged);
}

TEST(Jaccard, RandomizedSymmetricAgainstCount) {
    std::mt19937_64 rng(3);
    std::bernoulli_distribution coin(0.4);
    for (int trial = 0; trial < 1000; ++trial) {
        std::set<int> a;
        std::set<int> b;
        std::vector<bool> in_a(30);
        std::vector<bool> in_b(30);
        for (int i = 0; i < 30; ++i) {
            if ((in_a[i] = coin(rng))) {
                a.insert(i);
            }
            if ((in_b[i] = coin(rng))) {
                b.insert(i);
            }
        }
        int inter = 0;
        int uni = 0;
        for (int i = 0; i < 30; ++i) {
            inter += in_a[i] && in_b[i];
            uni += in_a[i] || in_b[i];
        }
        const double want = uni ? static_cast<double>(inter) / uni : 1.0;
        EXPECT_DOUBLE_EQ(jaccard(a, b), want);
        EXPECT_DOUBLE_EQ(jaccard(b, a), want);
    }
}

TEST(Stability, Series) {
    const AttributionGraph g = mlp_graph({{0, 1, 0.4}, {1, 2, 0.3}, {2, 3, 0.2}, {3, 4, 0.1}, {4, 5, 0.05}});
    const Circuit same{{0, 1}, 2};
    EXPECT_EQ(stability_series({{&g, same}, {&g, same}, {&g, same}}), (std::vector<double>{1.0, 1.0}));
    EXPECT_EQ(stability_series({{&g, Circuit{{0}, 1}}, {&g, Circuit{{1}, 1}}, {&g, Circuit{{2}, 1}}}),
              (std::vector<double>{0.0, 0.0}));
    // Each step keeps one of two edges and swaps the other: 1 / 3.
    const auto half = stability_series({{&g, Circuit{{0, 1}, 2}}, {&g, Circuit{{1, 2}, 2}}, {&g, Circuit{{2, 3}, 2}}});
    ASSERT_EQ(half.size(), 2u);
    EXPECT_NEAR(half[0], 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(half[1], 1.0 / 3.0, 1e-15);
    const auto nodes = stability_series({{&g, Circuit{{0}, 1}}, {&g, Circuit{{1}, 1}}}, true, 5);
    EXPECT_NEAR(nodes[0], 1.0 / 3.0, 1e-15);
    EXPECT_THROW(stability_series({{&g, same}}), InvalidArgument);
}

TEST(CrossModel, SelfAndPermutedScores) {
    std::mt19937_64 rng(1);
    const AttributionGraph g = scored_random_graph(rng);
    const auto [nj, ej] = cross_model_overlap(g, g);
    EXPECT_EQ(nj, 1.0);
    EXPECT_EQ(ej, 1.0);
    // Rescaling every score keeps the ranking and so the top sets.
    AttributionGraph h = g;
    for (Edge& e : h.edges) {
        e.score_norm *= -2.0;
    }
    EXPECT_EQ(cross_model_overlap(g, h).first, 1.0);
}

TEST(CrossModel, FifteenOfThirtyShared) {
    std::vector<std::tuple<int, int, double>> ea;
    std::vector<std::tuple<int, int, double>> eb;
    for (int i = 0; i < 15; ++i) {
        ea.emplace_back(2 * i, 2 * i + 1, 1.0 + i);
        eb.emplace_back(15 + 2 * i, 16 + 2 * i, 1.0 + i);
    }
    const AttributionGraph a = mlp_graph(ea);
    const AttributionGraph b = mlp_graph(eb);
    std::set<int> la;
    std::set<int> lb;
    for (const auto& c : top_components(a, 30)) {
        la.insert(c.layer);
    }
    for (const auto& c : top_components(b, 30)) {
        lb.insert(c.layer);
    }
    std::vector<int> common;
    std::set_intersection(la.begin(), la.end(), lb.begin(), lb.end(), std::back_inserter(common));
    ASSERT_EQ(common.size(), 15u);
    EXPECT_NEAR(cross_model_overlap(a, b).first, 15.0 / 45.0, 1e-15);
}

TEST(CrossModel, PositionsAggregatedOut) {
    AttributionGraph a = mlp_graph({{0, 1, 0.5}});
    AttributionGraph b = a;
    b.edges[0].src.position = 4;
    b.edges[0].dst.position = 4;
    b.nodes = {b.edges[0].src, b.edges[0].dst};
    const auto [nj, ej] = cross_model_overlap(a, b);
    EXPECT_EQ(nj, 1.0);
    EXPECT_EQ(ej, 1.0);
}

TEST(Spectral, AnalyticTwoAndThreeNodeGraphs) {
    const WeightedGraph edge{2, {{0, 1, 1.0}}};
    const WeightedGraph path{3, {{0, 1, 1.0}, {1, 2, 1.0}}};
    const auto se = laplacian_spectrum(edge);
    const auto sp = laplacian_spectrum(path);
    EXPECT_NEAR(se[0], 0.0, 1e-12);
    EXPECT_NEAR(se[1], 2.0, 1e-12);
    EXPECT_NEAR(sp[0], 0.0, 1e-12);
    EXPECT_NEAR(sp[1], 1.0, 1e-12);
    EXPECT_NEAR(sp[2], 3.0, 1e-12);
    EXPECT_NEAR(spectral_distance(edge, path, 2), std::sqrt(0.5), 1e-12);
    EXPECT_EQ(spectral_distance(path, path, 20), 0.0);
}

TEST(Spectral, PaddingAndOppositeEdgesAdd) {
    // Padded: {0, 2, 0, 0} vs {0, 1, 3, 0}.
    const WeightedGraph edge{2, {{0, 1, 1.0}}};
    const WeightedGraph path{3, {{0, 1, 1.0}, {1, 2, 1.0}}};
    EXPECT_NEAR(spectral_distance(edge, path, 4), std::sqrt((1.0 + 9.0) / 4.0), 1e-12);
    const WeightedGraph both{2, {{0, 1, 0.25}, {1, 0, 0.75}}};
    EXPECT_NEAR(spectral_distance(edge, both, 2), 0.0, 1e-12);
}

TEST(Spectral, RandomizedProperties) {
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<int> size(1, 14);
    std::uniform_real_distribution<double> w(0.01, 2.0);
    std::bernoulli_distribution coin(0.3);
    for (int trial = 0; trial < 1000; ++trial) {
        WeightedGraph a;
        a.n = size(rng);
        double weight = 0.0;
        for (int u = 0; u < a.n; ++u) {
            for (int v = u + 1; v < a.n; ++v) {
                if (coin(rng)) {
                    a.edges.emplace_back(u, v, w(rng));
                    weight += std::get<2>(a.edges.back());
                }
            }
        }
        const auto ev = laplacian_spectrum(a);
        ASSERT_EQ(static_cast<int>(ev.size()), a.n);
        EXPECT_LE(std::abs(ev[0]), 1e-9);
        double trace = 0.0;
        for (const double x : ev) {
            EXPECT_GE(x, -1e-9);
            trace += x;
        }
        EXPECT_NEAR(trace, 2.0 * weight, 1e-9);
        std::vector<int> perm(a.n);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        WeightedGraph p{a.n, {}};
        for (const auto& [u, v, x] : a.edges) {
            p.edges.emplace_back(perm[v], perm[u], x);
        }
        EXPECT_NEAR(spectral_distance(a, p, 20), 0.0, 1e-9);
        const WeightedGraph b{a.n + 1, {{0, a.n, 1.0}}};
        EXPECT_NEAR(spectral_distance(a, b, 20), spectral_distance(b, a, 20), 1e-12);
    }
}

TEST(Spectral, AttributionGraphsUseTopEdges) {
    std::mt19937_64 rng(2);
    const AttributionGraph g = scored_random_graph(rng);
    EXPECT_EQ(spectral_distance(g, g), 0.0);
    const WeightedGraph t = top_edge_graph(g, 50);
    EXPECT_EQ(t.edges.size(), 50u);
    std::vector<double> all;
    for (const Edge& e : g.edges) {
        all.push_back(std::abs(e.score_norm));
    }
    std::sort(all.begin(), all.end(), std::greater<>());
    double want = 0.0;
    double got = 0.0;
    for (int i = 0; i < 50; ++i) {
        want += all[i];
        got += std::get<2>(t.edges[i]);
    }
    EXPECT_NEAR(got, want, 1e-12);
    AttributionGraph zero = g;
    for (Edge& e : zero.edges) {
        e.score_norm = 0.0;
    }
    EXPECT_THROW(spectral_distance(g, zero), InvalidArgument);
}

TEST(CrossRole, MatrixComposesPairwiseJaccard) {
    std::mt19937_64 rng(4);
    std::map<std::string, AttributionGraph> by_role;
    by_role["Goal"] = scored_random_graph(rng);
    by_role["Source"] = scored_random_graph(rng);
    by_role["Topic"] = by_role["Goal"];
    const OverlapMatrix m = cross_role_overlap(by_role, 4);
    ASSERT_EQ(m.roles, (std::vector<std::string>{"Goal", "Source", "Topic"}));
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(m.values[i][i], 1.0);
        for (std::size_t j = 0; j < 3; ++j) {
            EXPECT_EQ(m.values[i][j], m.values[j][i]);
            EXPECT_DOUBLE_EQ(m.values[i][j], jaccard(top_components(by_role.at(m.roles[i]), 4),
                                                     top_components(by_role.at(m.roles[j]), 4)));
        }
    }
    EXPECT_EQ(m.values[0][2], 1.0);

    std::map<std::string, AttributionGraph> disjoint;
    disjoint["A"] = mlp_graph({{0, 1, 1.0}});
    disjoint["B"] = mlp_graph({{2, 3, 1.0}});
    EXPECT_EQ(cross_role_overlap(disjoint, 2).values[0][1], 0.0);
    EXPECT_THROW(cross_role_overlap({{"A", disjoint["A"]}}, 2), InvalidArgument);
}

TEST(Reports, SerializeToJsonAndCsv) {
    const AttributionGraph g = mlp_graph({{0, 1, 0.5}, {1, 2, 0.3}, {2, 3, 0.2}});
    const SparsityReport sp = sparsity_report(g, full_circuit(g));
    const StructuralReport st = structural_report(g, full_circuit(g));
    const auto j = to_json(sp);
    EXPECT_EQ(j["coverage_k"]["0.80"], 3);
    EXPECT_EQ(to_json(st)["n_bridges"], 3);
    const std::string header = metrics_csv_header();
    const std::string row = metrics_csv_row("Goal", 128, sp, st);
    EXPECT_EQ(std::count(header.begin(), header.end(), ','), std::count(row.begin(), row.end(), ','));
    EXPECT_EQ(row.rfind("Goal,128,", 0), 0u);
}
