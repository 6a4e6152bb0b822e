#include <gtest/gtest.h>

#include <cmath>
#include <deque>
#include <set>

#include "compass/attribution.hpp"
#include "compass/error.hpp"
#include "compass/rng.hpp"
#include "oracles.hpp"

using namespace compass;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 8;
    c.d_head = 4;
    c.d_mlp = 16;
    c.vocab_size = 16;
    c.max_seq_len = 8;
    return c;
}

RoleCrossPair token_pair(std::vector<int> clean, std::vector<int> corrupt, int tc, int tr,
                         const std::string& role = "R") {
    RoleCrossPair p;
    p.clean_tokens = std::move(clean);
    p.corrupt_tokens = std::move(corrupt);
    p.target_clean = tc;
    p.target_corrupt = tr;
    p.role_clean = role;
    p.role_corrupt = "S";
    return p;
}

double max_abs(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

std::vector<double> raw_scores(const EdgeScoreTable& t) {
    std::vector<double> s;
    for (const Edge& e : t.graph.edges) {
        s.push_back(e.score);
    }
    return s;
}

std::vector<double> norm_scores(const EdgeScoreTable& t) {
    std::vector<double> s;
    for (const Edge& e : t.graph.edges) {
        s.push_back(e.score_norm);
    }
    return s;
}

}  // namespace

TEST(SourceDeltas, IdenticalRunsAreZero) {
    const Checkpoint ck = init_model(small_config(), 1);
    const CachedRun a = forward_cached(ck, {1, 2, 3, 4});
    for (const auto& [node, d] : source_deltas(a, a)) {
        EXPECT_EQ(d.norm(), 0.0) << node.str();
    }
}

TEST(SourceDeltas, CausalReachability) {
    const Checkpoint ck = init_model(small_config(), 2);
    const std::vector<int> clean{5, 6, 7, 8, 9};
    std::vector<int> corrupt = clean;
    const int changed = 2;
    corrupt[changed] = 11;
    const CachedRun rc = forward_cached(ck, clean);
    const CachedRun rx = forward_cached(ck, corrupt);
    const auto deltas = source_deltas(rc, rx);

    // Breadth-first search from the changed input over graph edges.
    const AttributionGraph& g = rc.topo->graph;
    std::set<NodeId> reach{NodeId::input(changed)};
    std::deque<NodeId> queue{NodeId::input(changed)};
    while (!queue.empty()) {
        const NodeId u = queue.front();
        queue.pop_front();
        for (const Edge& e : g.edges) {
            if (e.src == u && reach.insert(e.dst).second) {
                queue.push_back(e.dst);
            }
        }
    }
    int nonzero = 0;
    for (const auto& [node, d] : deltas) {
        if (!reach.contains(node)) {
            EXPECT_EQ(d.norm(), 0.0) << node.str();
        } else if (d.norm() > 0.0) {
            ++nonzero;
        }
        if (node.position < changed) {
            EXPECT_FALSE(reach.contains(node));
        }
    }
    EXPECT_EQ(nonzero, static_cast<int>(reach.size()));

    const auto flipped = source_deltas(rx, rc);
    const auto oriented = source_deltas(rc, rx, DeltaOrientation::CorruptMinusClean);
    for (const auto& [node, d] : deltas) {
        EXPECT_EQ(flipped.at(node), Vec(-d));
        EXPECT_EQ(oriented.at(node), Vec(-d));
    }
}

TEST(SourceDeltas, ShapeMismatch) {
    const Checkpoint ck = init_model(small_config(), 3);
    EXPECT_THROW(source_deltas(forward_cached(ck, {1, 2}), forward_cached(ck, {1, 2, 3})), InvalidArgument);
}

TEST(EapIg, IdenticalPairScoresZero) {
    const Checkpoint ck = init_model(small_config(), 4);
    const EdgeScoreTable t = eap_ig_scores(ck, token_pair({1, 2, 3}, {1, 2, 3}, 4, 5), IgConfig{});
    for (const Edge& e : t.graph.edges) {
        EXPECT_EQ(e.score, 0.0);
        EXPECT_EQ(e.score_norm, 0.0);
    }
    EXPECT_TRUE(t.degenerate);
}

TEST(EapIg, AveragesGradientsAtFifthSteps) {
    const Checkpoint ck = init_model(small_config(), 5);
    const RoleCrossPair pair = token_pair({3, 1, 4, 1, 5}, {3, 1, 4, 9, 2}, 6, 7);
    IgConfig cfg;
    cfg.m = 5;
    const EdgeScoreTable t = eap_ig_scores(ck, pair, cfg);

    const CachedRun rc = forward_cached(ck, pair.clean_tokens);
    const CachedRun rx = forward_cached(ck, pair.corrupt_tokens);
    const Topology& topo = *rc.topo;
    const int T = topo.seq_len;
    Mat xc(T, 8);
    Mat xx(T, 8);
    for (int p = 0; p < T; ++p) {
        xc.row(p) = rc.activations[topo.input_node(p)].transpose();
        xx.row(p) = rx.activations[topo.input_node(p)].transpose();
    }
    std::vector<Vec> g(topo.slots.size(), Vec::Zero(8));
    for (const double alpha : {0.2, 0.4, 0.6, 0.8, 1.0}) {
        const Mat x = (1.0 - alpha) * xx + alpha * xc;
        RunOptions o;
        o.input_override = &x;
        o.frozen_ln = &rc.ln_stats;
        const auto fb = forward_backward(ck, pair.clean_tokens, Objective::cnp(6), o, LnGradMode::Frozen);
        for (std::size_t s = 0; s < g.size(); ++s) {
            g[s] += fb.grads.slot_input[s] / 5.0;
        }
    }
    double worst = 0.0;
    for (std::size_t e = 0; e < topo.n_edges(); ++e) {
        const int src = topo.edge_src[e];
        const double expected = (rc.activations[src] - rx.activations[src]).dot(g[topo.edge_slot[e]]);
        worst = std::max(worst, std::abs(expected - t.graph.edges[e].score));
    }
    EXPECT_LE(worst, 1e-12);
}

TEST(EapIg, LinearizedModelMatchesExactPatching) {
    ModelConfig c = small_config();
    c.linearized = true;
    const Checkpoint ck = init_model(c, 6);
    const RoleCrossPair pair = token_pair({2, 7, 1, 8, 2, 8}, {2, 7, 1, 3, 14, 8}, 9, 10);
    for (const int m : {1, 5}) {
        IgConfig cfg;
        cfg.m = m;
        cfg.objective = Objective::Kind::TargetLogit;
        const EdgeScoreTable t = eap_ig_scores(ck, pair, cfg);
        const std::vector<double> effects = patch_effects(ck, pair, cfg);
        EXPECT_LE(max_abs(raw_scores(t), effects), 1e-9) << "m=" << m;
        double mass = 0.0;
        for (const double e : effects) {
            mass += std::abs(e);
        }
        EXPECT_GT(mass, 1e-3);
    }
}

TEST(EapIg, NonFiniteGradientNamesStep) {
    Checkpoint ck = init_model(small_config(), 7);
    ck.weights.unembed(6, 0) = std::nan("");
    try {
        (void)eap_ig_scores(ck, token_pair({1, 2, 3}, {1, 2, 4}, 6, 5), IgConfig{});
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("IG step 1"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("@"), std::string::npos) << e.what();
    }
}

TEST(EapIg, ConfigValidation) {
    const Checkpoint ck = init_model(small_config(), 8);
    const RoleCrossPair pair = token_pair({1, 2, 3}, {1, 2, 4}, 6, 5);
    IgConfig bad;
    bad.m = 0;
    EXPECT_THROW(eap_ig_scores(ck, pair, bad), InvalidArgument);
    bad = IgConfig{};
    bad.epsilon = 0.0;
    EXPECT_THROW(eap_ig_scores(ck, pair, bad), InvalidArgument);
    bad = IgConfig{};
    bad.top_k_edges = 0;
    EXPECT_THROW(eap_ig_scores(ck, pair, bad), InvalidArgument);
    EXPECT_THROW(eap_ig_scores(ck, token_pair({1, 2, 3}, {1, 2}, 6, 5), IgConfig{}), InvalidArgument);
}

TEST(Normalize, TotalMassAndCosine) {
    const Checkpoint ck = init_model(small_config(), 9);
    const RoleCrossPair pair = token_pair({4, 3, 2, 1}, {4, 3, 9, 1}, 7, 8);
    EdgeScoreTable t = eap_ig_scores(ck, pair, IgConfig{});
    double mass = 0.0;
    for (const double s : norm_scores(t)) {
        mass += std::abs(s);
    }
    EXPECT_NEAR(mass, 1.0, 1e-12);

    // Scaling raw scores leaves the mass-normalised scores unchanged.
    EdgeScoreTable scaled = t;
    for (Edge& e : scaled.graph.edges) {
        e.score *= 7.0;
    }
    normalize(scaled, Normalization::TotalMass);
    EXPECT_LE(max_abs(norm_scores(scaled), norm_scores(t)), 1e-12);

    normalize(t, Normalization::Cosine);
    EXPECT_EQ(t.graph.normalization, "cosine");
    for (const double s : norm_scores(t)) {
        EXPECT_LE(std::abs(s), 1.0 + 1e-12);
    }

    EdgeScoreTable no_norms = t;
    no_norms.norm_product.clear();
    EXPECT_THROW(normalize(no_norms, Normalization::Cosine), InvalidArgument);
}

TEST(Normalize, LossScaleInvariance) {
    const Checkpoint ck = init_model(small_config(), 10);
    const RoleCrossPair pair = token_pair({4, 3, 2, 1, 0}, {4, 3, 9, 1, 0}, 7, 8);
    IgConfig cfg;
    EdgeScoreTable a = eap_ig_scores(ck, pair, cfg);
    cfg.loss_scale = 3.5;
    EdgeScoreTable b = eap_ig_scores(ck, pair, cfg);
    EXPECT_LE(max_abs(norm_scores(a), norm_scores(b)), 1e-12);
    EXPECT_EQ(extract_circuit(a.graph, 30), extract_circuit(b.graph, 30));
}

TEST(AggregateRole, SinglePairAndCancellation) {
    const Checkpoint ck = init_model(small_config(), 11);
    const RoleCrossPair p = token_pair({1, 5, 9, 2}, {1, 5, 3, 2}, 4, 6);
    const RoleAttribution one = aggregate_role(ck, {p}, IgConfig{});
    const EdgeScoreTable direct = eap_ig_scores(ck, p, IgConfig{});
    EXPECT_EQ(raw_scores(one.table), raw_scores(direct));
    EXPECT_EQ(norm_scores(one.table), norm_scores(direct));
    EXPECT_EQ(one.table.graph.n_pairs, 1);

    // On a linearized model the swapped pair scores exactly -S.
    ModelConfig lc = small_config();
    lc.linearized = true;
    const Checkpoint lin = init_model(lc, 12);
    IgConfig cfg;
    cfg.objective = Objective::Kind::TargetLogit;
    const RoleCrossPair swapped = token_pair(p.corrupt_tokens, p.clean_tokens, 4, 6);
    const EdgeScoreTable s1 = eap_ig_scores(lin, p, cfg);
    const EdgeScoreTable s2 = eap_ig_scores(lin, swapped, cfg);
    for (std::size_t e = 0; e < s1.graph.edges.size(); ++e) {
        ASSERT_EQ(s1.graph.edges[e].score, -s2.graph.edges[e].score);
    }
    const RoleAttribution both = aggregate_role(lin, {p, swapped}, cfg);
    for (const Edge& e : both.table.graph.edges) {
        EXPECT_EQ(e.score, 0.0);
    }
    EXPECT_EQ(both.table.graph.n_pairs, 2);
}

TEST(AggregateRole, HeatmapMatchesBruteForce) {
    const ModelConfig c = small_config();
    const Checkpoint ck = init_model(c, 13);
    const std::vector<RoleCrossPair> pairs{token_pair({1, 2, 3, 4}, {1, 2, 7, 4}, 5, 6),
                                           token_pair({8, 2, 3, 4}, {8, 2, 9, 4}, 5, 6)};
    const RoleAttribution r = aggregate_role(ck, pairs, IgConfig{});
    for (int l = 0; l < c.n_layers; ++l) {
        for (int col = 0; col <= c.n_heads; ++col) {
            double expected = 0.0;
            for (const Edge& e : r.table.graph.edges) {
                const bool head = col < c.n_heads && e.dst.kind == NodeKind::AttnHead && e.dst.layer == l &&
                                  e.dst.head == col;
                const bool mlp = col == c.n_heads && e.dst.kind == NodeKind::Mlp && e.dst.layer == l;
                if (head || mlp) {
                    expected += std::abs(e.score_norm);
                }
            }
            EXPECT_NEAR(r.heatmap.values(l, col), expected, 1e-12);
        }
    }
    const std::string csv = heatmap_csv(r.heatmap);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,h0,h1,mlp");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST(AggregateRole, RejectsMixedRoles) {
    const Checkpoint ck = init_model(small_config(), 14);
    EXPECT_THROW(aggregate_role(ck,
                                {token_pair({1, 2, 3}, {1, 2, 4}, 5, 6, "A"),
                                 token_pair({1, 2, 3}, {1, 2, 4}, 5, 6, "B")},
                                IgConfig{}),
                 InvalidArgument);
    EXPECT_THROW(aggregate_role(ck, {}, IgConfig{}), InvalidArgument);
}

namespace {

AttributionGraph three_edge_graph(double a, double b, double c) {
    AttributionGraph g;
    g.nodes = {NodeId::input(0), NodeId::attn(0, 0, 0), NodeId::mlp(0, 0), NodeId::logits(1, 0)};
    g.edges = {Edge{NodeId::input(0), NodeId::attn(0, 0, 0), EdgeKind::Q, a, a, false},
               Edge{NodeId::input(0), NodeId::mlp(0, 0), EdgeKind::Flow, b, b, false},
               Edge{NodeId::input(0), NodeId::logits(1, 0), EdgeKind::Flow, c, c, false}};
    return g;
}

}  // namespace

TEST(ExtractCircuit, TopKAndTies) {
    AttributionGraph g = three_edge_graph(0.1, -0.5, 0.3);
    const Circuit two = extract_circuit(g, 2);
    EXPECT_EQ(two.edges, (std::vector<std::uint32_t>{1, 2}));
    EXPECT_FALSE(g.edges[0].in_circuit);
    EXPECT_TRUE(g.edges[1].in_circuit && g.edges[2].in_circuit);
    EXPECT_EQ(extract_circuit(g, 10).edges.size(), 3u);
    EXPECT_THROW(extract_circuit(g, 0), InvalidArgument);

    // Equal magnitudes: the smallest (src, dst, kind) wins the last slot.
    AttributionGraph tie = three_edge_graph(0.2, 0.9, -0.2);
    EXPECT_EQ(extract_circuit(tie, 2).edges, (std::vector<std::uint32_t>{0, 1}));
    EXPECT_EQ(extract_circuit(tie, 2), extract_circuit(tie, 2));
}

TEST(Faithfulness, Endpoints) {
    const Checkpoint ck = init_model(small_config(), 15);
    const std::vector<RoleCrossPair> pairs{token_pair({1, 2, 3, 4}, {1, 2, 7, 4}, 5, 6),
                                           token_pair({9, 2, 3, 4}, {9, 2, 11, 4}, 5, 6)};
    const RoleAttribution r = aggregate_role(ck, pairs, IgConfig{});
    const AttributionGraph& g = r.table.graph;
    const AblationOptions neg{MetricKind::NegLoss, false};
    EXPECT_NEAR(faithfulness(ck, g, full_circuit(g), pairs, neg), 1.0, 1e-12);
    EXPECT_NEAR(faithfulness(ck, g, Circuit{}, pairs, neg), 0.0, 1e-12);
    AttributionGraph marked = g;
    const Circuit c = extract_circuit(marked, 40);
    const double f = faithfulness(ck, marked, c, pairs, neg);
    EXPECT_TRUE(std::isfinite(f));
}

TEST(Faithfulness, HalfCircuitMatchesManualForward) {
    ModelConfig c = small_config();
    c.n_layers = 1;
    const Checkpoint ck = init_model(c, 16);
    const std::vector<int> toks{3, 9, 1, 12};
    const RoleCrossPair pair = token_pair(toks, {3, 9, 2, 12}, 5, 6);
    const AttributionGraph& g = topology(c, 4)->graph;

    // Every other edge kept.
    Circuit half;
    std::set<EdgeKey> dropped;
    for (std::uint32_t i = 0; i < g.edges.size(); ++i) {
        if (i % 2 == 0) {
            half.edges.push_back(i);
        } else {
            dropped.insert(g.edges[i].key());
        }
    }
    const auto metric = [&](const std::set<EdgeKey>& drop) {
        Mat logits(1, c.vocab_size);
        logits.row(0) = oracle::manual_one_layer(ck, toks, drop).transpose();
        return -cnp_loss(logits, 5);
    };
    std::set<EdgeKey> all;
    for (const Edge& e : g.edges) {
        all.insert(e.key());
    }
    const double m_c = metric(dropped);
    const double m_e = metric({});
    const double m_0 = metric(all);
    const double expected = (m_c - m_0) / (m_e - m_0);
    const FaithfulnessResult r = faithfulness_detail(ck, g, half, {pair}, {MetricKind::NegLoss, false});
    EXPECT_NEAR(r.circuit_metric, m_c, 1e-9);
    EXPECT_NEAR(r.empty_metric, m_0, 1e-9);
    EXPECT_NEAR(r.value, expected, 1e-9);
}

TEST(Faithfulness, DegenerateDenominator) {
    const ModelConfig c = small_config();
    Checkpoint ck = init_model(c, 17);
    // Every prediction is token 0 with or without edges, so accuracy is flat.
    ck.weights.unembed.setZero();
    ck.weights.unembed_b.setZero();
    ck.weights.unembed_b(0) = 5.0;
    const std::vector<RoleCrossPair> pairs{token_pair({1, 2, 3}, {1, 2, 4}, 0, 6)};
    const AttributionGraph& g = topology(c, 3)->graph;
    try {
        (void)faithfulness(ck, g, Circuit{}, pairs);
        FAIL() << "expected UndefinedFaithfulness";
    } catch (const UndefinedFaithfulness& e) {
        EXPECT_EQ(e.full_value, 1.0);
        EXPECT_EQ(e.empty_value, 1.0);
    }
}
