#include "compass/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "compass/graph_io.hpp"
#include "compass/parallel.hpp"

namespace compass {

namespace {

const char* objective_name(Objective::Kind kind) {
    switch (kind) {
        case Objective::Kind::CnpLoss: return "cnp_loss";
        case Objective::Kind::TargetLogit: return "target_logit";
        case Objective::Kind::NextTokenCE: return "next_token_ce";
    }
    return "?";
}

Objective clean_objective(const RoleCrossPair& pair, const IgConfig& cfg) {
    return Objective{cfg.objective, pair.target_clean, cfg.loss_scale};
}

void require_parity(const RoleCrossPair& pair) {
    if (pair.clean_tokens.size() != pair.corrupt_tokens.size()) {
        throw InvalidArgument("pair '" + pair.clean_text + "' / '" + pair.corrupt_text +
                              "' violates token parity (" + std::to_string(pair.clean_tokens.size()) + " vs " +
                              std::to_string(pair.corrupt_tokens.size()) + ")");
    }
    if (pair.clean_tokens.empty()) {
        throw InvalidArgument("pair has empty prompts");
    }
}

Mat input_matrix(const CachedRun& run) {
    const Topology& topo = *run.topo;
    Mat x(topo.seq_len, topo.config.d_model);
    for (int p = 0; p < topo.seq_len; ++p) {
        x.row(p) = run.activations[static_cast<std::size_t>(topo.input_node(p))].transpose();
    }
    return x;
}

}  // namespace

const char* to_string(Normalization mode) {
    return mode == Normalization::TotalMass ? "total_mass" : "cosine";
}

Normalization normalization_from_string(const std::string& name) {
    if (name == "total_mass") return Normalization::TotalMass;
    if (name == "cosine") return Normalization::Cosine;
    throw InvalidArgument("unknown normalization '" + name + "' (expected total_mass or cosine)");
}

void IgConfig::validate() const {
    if (m < 1) {
        throw InvalidArgument("IG steps m must be >= 1, got " + std::to_string(m));
    }
    if (!(epsilon > 0.0)) {
        throw InvalidArgument("epsilon must be positive");
    }
    if (top_k_edges < 1) {
        throw InvalidArgument("top_k_edges must be >= 1, got " + std::to_string(top_k_edges));
    }
    if (!(loss_scale > 0.0)) {
        throw InvalidArgument("loss_scale must be positive");
    }
    if (objective == Objective::Kind::NextTokenCE) {
        throw InvalidArgument("attribution needs a clean-target objective");
    }
}

std::map<NodeId, Vec> source_deltas(const CachedRun& clean, const CachedRun& corrupt, DeltaOrientation orientation) {
    if (!clean.topo || !corrupt.topo || clean.topo->seq_len != corrupt.topo->seq_len ||
        !(clean.topo->config == corrupt.topo->config)) {
        throw InvalidArgument("source_deltas: runs differ in sequence length or model config");
    }
    const double sign = orientation == DeltaOrientation::CleanMinusCorrupt ? 1.0 : -1.0;
    std::map<NodeId, Vec> out;
    const auto& nodes = clean.topo->graph.nodes;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        out.emplace(nodes[i], sign * (clean.activations[i] - corrupt.activations[i]));
    }
    return out;
}

EdgeScoreTable eap_ig_scores(const Checkpoint& ckpt, const RoleCrossPair& pair, const IgConfig& cfg) {
    cfg.validate();
    require_parity(pair);
    const CachedRun clean = forward_cached(ckpt, pair.clean_tokens);
    const CachedRun corrupt = forward_cached(ckpt, pair.corrupt_tokens);
    const Topology& topo = *clean.topo;
    const double sign = cfg.orientation == DeltaOrientation::CleanMinusCorrupt ? 1.0 : -1.0;

    const Mat x_clean = input_matrix(clean);
    const Mat x_corrupt = input_matrix(corrupt);
    const Objective objective = clean_objective(pair, cfg);

    std::vector<Vec> g_bar(topo.slots.size(), Vec::Zero(topo.config.d_model));
    for (int k = 1; k <= cfg.m; ++k) {
        const double alpha = static_cast<double>(k) / static_cast<double>(cfg.m);
        const Mat x = x_corrupt + alpha * (x_clean - x_corrupt);
        RunOptions options;
        options.input_override = &x;
        options.frozen_ln = &clean.ln_stats;
        const ForwardBackward fb =
            forward_backward(ckpt, pair.clean_tokens, objective, options, LnGradMode::Frozen, false);
        for (std::size_t s = 0; s < topo.slots.size(); ++s) {
            const Vec& g = fb.grads.slot_input[s];
            if (!g.allFinite()) {
                throw NumericError("non-finite gradient at IG step " + std::to_string(k) + " (alpha " +
                                   format_double(alpha) + ") for node " +
                                   topo.graph.nodes[static_cast<std::size_t>(topo.slots[s].dst)].str() + " input " +
                                   to_string(topo.slots[s].kind));
            }
            g_bar[s] += g;
        }
    }
    for (Vec& g : g_bar) {
        g /= static_cast<double>(cfg.m);
    }

    std::vector<Vec> delta(topo.n_nodes());
    std::vector<double> delta_norm(topo.n_nodes());
    for (std::size_t i = 0; i < delta.size(); ++i) {
        delta[i] = sign * (clean.activations[i] - corrupt.activations[i]);
        delta_norm[i] = delta[i].norm();
    }

    EdgeScoreTable table;
    table.graph = topo.graph;
    table.graph.checkpoint_step = ckpt.step;
    table.graph.role = pair.role_clean;
    table.graph.metric_name = objective_name(cfg.objective);
    table.graph.n_pairs = 1;
    table.norm_product.resize(topo.n_edges());
    for (std::size_t e = 0; e < topo.n_edges(); ++e) {
        const auto src = static_cast<std::size_t>(topo.edge_src[e]);
        const Vec& g = g_bar[static_cast<std::size_t>(topo.edge_slot[e])];
        table.graph.edges[e].score = delta[src].dot(g);
        table.norm_product[e] = delta_norm[src] * g.norm();
    }
    normalize(table, cfg.normalization, cfg.epsilon);
    return table;
}

void normalize(EdgeScoreTable& table, Normalization mode, double epsilon) {
    auto& edges = table.graph.edges;
    if (edges.empty()) {
        throw InvalidArgument("normalize: score table has no edges");
    }
    table.normalization = mode;
    table.graph.normalization = to_string(mode);
    table.degenerate = false;
    if (mode == Normalization::TotalMass) {
        double total = 0.0;
        for (const Edge& e : edges) {
            total += std::abs(e.score);
        }
        if (total == 0.0) {
            table.degenerate = true;
        }
        for (Edge& e : edges) {
            e.score_norm = total == 0.0 ? 0.0 : e.score / total;
        }
        return;
    }
    if (table.norm_product.size() != edges.size()) {
        throw InvalidArgument("cosine normalization needs the per-edge norm products captured at scoring time");
    }
    for (std::size_t i = 0; i < edges.size(); ++i) {
        edges[i].score_norm = edges[i].score / (table.norm_product[i] + epsilon);
    }
}

RoleHeatmap role_heatmap(const AttributionGraph& graph, const ModelConfig& config) {
    RoleHeatmap h;
    h.n_layers = config.n_layers;
    h.n_heads = config.n_heads;
    h.values = Mat::Zero(config.n_layers, config.n_heads + 1);
    for (const Edge& e : graph.edges) {
        if (e.dst.kind == NodeKind::AttnHead) {
            h.values(e.dst.layer, *e.dst.head) += std::abs(e.score_norm);
        } else if (e.dst.kind == NodeKind::Mlp) {
            h.values(e.dst.layer, config.n_heads) += std::abs(e.score_norm);
        }
    }
    return h;
}

std::string heatmap_csv(const RoleHeatmap& heatmap) {
    std::string out = "layer";
    for (int h = 0; h < heatmap.n_heads; ++h) {
        out += ",h" + std::to_string(h);
    }
    out += ",mlp\n";
    for (int l = 0; l < heatmap.n_layers; ++l) {
        out += std::to_string(l);
        for (int c = 0; c <= heatmap.n_heads; ++c) {
            out += "," + format_double(heatmap.values(l, c));
        }
        out += "\n";
    }
    return out;
}

RoleAttribution aggregate_role(const Checkpoint& ckpt, const std::vector<RoleCrossPair>& pairs, const IgConfig& cfg) {
    cfg.validate();
    if (pairs.empty()) {
        throw InvalidArgument("aggregate_role: empty pair list");
    }
    for (const RoleCrossPair& p : pairs) {
        if (p.role_clean != pairs[0].role_clean) {
            throw InvalidArgument("aggregate_role: mixed roles '" + pairs[0].role_clean + "' and '" + p.role_clean +
                                  "'");
        }
        if (p.clean_tokens.size() != pairs[0].clean_tokens.size()) {
            throw InvalidArgument("aggregate_role: pairs have different sequence lengths");
        }
    }
    const auto tables = parallel_map<EdgeScoreTable>(pairs.size(), [&](std::size_t i) {
        return eap_ig_scores(ckpt, pairs[i], cfg);
    });

    RoleAttribution out;
    out.table = tables[0];
    const std::size_t n_edges = out.table.graph.edges.size();
    for (std::size_t e = 0; e < n_edges; ++e) {
        double s = 0.0;
        double np = 0.0;
        for (const EdgeScoreTable& t : tables) {
            s += t.graph.edges[e].score;
            np += t.norm_product[e];
        }
        out.table.graph.edges[e].score = s / static_cast<double>(tables.size());
        out.table.norm_product[e] = np / static_cast<double>(tables.size());
    }
    out.table.graph.n_pairs = static_cast<std::int64_t>(pairs.size());
    normalize(out.table, cfg.normalization, cfg.epsilon);
    out.heatmap = role_heatmap(out.table.graph, ckpt.config);
    return out;
}

Circuit extract_circuit(AttributionGraph& graph, int k) {
    if (k < 1) {
        throw InvalidArgument("extract_circuit: K must be >= 1, got " + std::to_string(k));
    }
    std::vector<std::uint32_t> order(graph.edges.size());
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        const double sa = std::abs(graph.edges[a].score_norm);
        const double sb = std::abs(graph.edges[b].score_norm);
        if (sa != sb) {
            return sa > sb;
        }
        return graph.edges[a].key() < graph.edges[b].key();
    });
    order.resize(std::min(order.size(), static_cast<std::size_t>(k)));
    std::sort(order.begin(), order.end());
    Circuit c;
    c.edges = std::move(order);
    c.k = k;
    mark_circuit(graph, c);
    return c;
}

std::vector<double> patch_effects(const Checkpoint& ckpt, const RoleCrossPair& pair, const IgConfig& cfg,
                                  const std::vector<std::uint32_t>& edges) {
    require_parity(pair);
    const CachedRun clean = forward_cached(ckpt, pair.clean_tokens);
    const CachedRun corrupt = forward_cached(ckpt, pair.corrupt_tokens);
    const Objective objective = clean_objective(pair, cfg);
    const std::size_t n_edges = clean.topo->n_edges();

    std::vector<EdgeState> states(n_edges, EdgeState::Active);
    RunOptions options;
    options.edge_states = &states;
    options.corrupt_source = &corrupt;
    options.frozen_ln = &clean.ln_stats;
    const double base = objective_value(forward_cached(ckpt, pair.clean_tokens, options), objective);

    std::vector<std::uint32_t> which = edges;
    if (which.empty()) {
        which.resize(n_edges);
        std::iota(which.begin(), which.end(), 0u);
    }
    std::vector<double> out;
    out.reserve(which.size());
    for (const std::uint32_t e : which) {
        if (e >= n_edges) {
            throw InvalidArgument("patch_effects: edge " + std::to_string(e) + " out of range");
        }
        states[e] = EdgeState::Corrupt;
        out.push_back(base - objective_value(forward_cached(ckpt, pair.clean_tokens, options), objective));
        states[e] = EdgeState::Active;
    }
    return out;
}

UndefinedFaithfulness::UndefinedFaithfulness(double full, double empty)
    : UndefinedMetric("faithfulness undefined: M(E) = " + format_double(full) + " equals M(empty) = " +
                      format_double(empty)),
      full_value(full),
      empty_value(empty) {}

FaithfulnessResult faithfulness_detail(const Checkpoint& ckpt, const AttributionGraph& graph, const Circuit& circuit,
                                       const std::vector<RoleCrossPair>& pairs, const AblationOptions& options) {
    FaithfulnessResult r;
    r.full_metric = ablated_eval(ckpt, pairs, graph, full_circuit(graph), AblationMode::ZeroOutOfCircuit, options);
    r.empty_metric = ablated_eval(ckpt, pairs, graph, Circuit{}, AblationMode::ZeroOutOfCircuit, options);
    r.circuit_metric = ablated_eval(ckpt, pairs, graph, circuit, AblationMode::ZeroOutOfCircuit, options);
    const double den = r.full_metric - r.empty_metric;
    const double scale = std::max({1.0, std::abs(r.full_metric), std::abs(r.empty_metric)});
    if (!std::isfinite(den) || std::abs(den) <= 1e-12 * scale) {
        throw UndefinedFaithfulness(r.full_metric, r.empty_metric);
    }
    r.value = (r.circuit_metric - r.empty_metric) / den;
    return r;
}

double faithfulness(const Checkpoint& ckpt, const AttributionGraph& graph, const Circuit& circuit,
                    const std::vector<RoleCrossPair>& pairs, const AblationOptions& options) {
    return faithfulness_detail(ckpt, graph, circuit, pairs, options).value;
}

}  // namespace compass
