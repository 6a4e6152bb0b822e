#include "compass/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <queue>

#include "compass/error.hpp"

namespace compass {

namespace {

void check_masses(const std::vector<double>& masses) {
    double total = 0.0;
    for (const double m : masses) {
        if (!(m >= 0.0) || !std::isfinite(m)) {
            throw InvalidArgument("masses must be finite and nonnegative");
        }
        total += m;
    }
    if (total <= 0.0) {
        throw UndefinedMetric("mass metric undefined: every mass is zero");
    }
}

std::vector<double> sorted_desc(std::vector<double> masses) {
    std::sort(masses.begin(), masses.end(), std::greater<>());
    return masses;
}

std::vector<double> values_of(const std::map<ComponentId, double>& m) {
    std::vector<double> out;
    out.reserve(m.size());
    for (const auto& [_, v] : m) {
        out.push_back(v);
    }
    return out;
}

template <class Id>
std::set<Id> top_by_mass(const std::map<Id, double>& mass, int k) {
    std::vector<std::pair<double, Id>> ranked;
    for (const auto& [id, m] : mass) {
        if (m > 0.0) {
            ranked.emplace_back(m, id);
        }
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) {
            return a.first > b.first;
        }
        return a.second < b.second;
    });
    std::set<Id> out;
    for (std::size_t i = 0; i < ranked.size() && static_cast<int>(i) < k; ++i) {
        out.insert(ranked[i].second);
    }
    return out;
}

// Edge indices of the top-k edges by |score_norm|, ties by key, zero scores dropped.
std::vector<std::uint32_t> top_edges(const AttributionGraph& graph, int k) {
    std::vector<std::uint32_t> idx;
    for (std::uint32_t i = 0; i < graph.edges.size(); ++i) {
        if (graph.edges[i].score_norm != 0.0) {
            idx.push_back(i);
        }
    }
    std::sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) {
        const double sa = std::abs(graph.edges[a].score_norm);
        const double sb = std::abs(graph.edges[b].score_norm);
        if (sa != sb) {
            return sa > sb;
        }
        return graph.edges[a].key() < graph.edges[b].key();
    });
    if (static_cast<int>(idx.size()) > k) {
        idx.resize(static_cast<std::size_t>(std::max(k, 0)));
    }
    return idx;
}

DiEdges simple_edges(const DiEdges& edges) {
    DiEdges out = edges;
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

}  // namespace

std::map<NodeId, double> node_mass(const AttributionGraph& graph, const Circuit& circuit) {
    std::map<NodeId, double> mass;
    for (const NodeId& n : graph.nodes) {
        mass[n] = 0.0;
    }
    for (const std::uint32_t i : circuit.edges) {
        const Edge& e = graph.edges.at(i);
        const double s = std::abs(e.score_norm);
        mass[e.src] += s;
        mass[e.dst] += s;
    }
    return mass;
}

std::map<ComponentId, double> component_mass(const AttributionGraph& graph, const Circuit& circuit) {
    std::map<ComponentId, double> mass;
    for (const auto& [node, m] : node_mass(graph, circuit)) {
        mass[ComponentId::of(node)] += m;
    }
    return mass;
}

double topk_mass(const std::vector<double>& masses, int k) {
    if (k < 1) {
        throw InvalidArgument("topk_mass: K must be >= 1");
    }
    check_masses(masses);
    const std::vector<double> s = sorted_desc(masses);
    const double total = std::accumulate(s.begin(), s.end(), 0.0);
    const std::size_t n = std::min<std::size_t>(s.size(), static_cast<std::size_t>(k));
    const double top = std::accumulate(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(n), 0.0);
    return std::min(1.0, top / total);
}

int coverage_k(const std::vector<double>& masses, double p) {
    if (!(p > 0.0 && p <= 1.0)) {
        throw InvalidArgument("coverage_k: P must lie in (0, 1]");
    }
    check_masses(masses);
    const std::vector<double> s = sorted_desc(masses);
    const double total = std::accumulate(s.begin(), s.end(), 0.0);
    double run = 0.0;
    int nonzero = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] <= 0.0) {
            break;
        }
        run += s[i];
        ++nonzero;
        if (run >= p * total * (1.0 - 1e-12)) {
            return static_cast<int>(i) + 1;
        }
    }
    return nonzero;
}

double gini(const std::vector<double>& masses) {
    check_masses(masses);
    std::vector<double> s = masses;
    std::sort(s.begin(), s.end());
    const double n = static_cast<double>(s.size());
    double num = 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        num += (2.0 * static_cast<double>(i + 1) - n - 1.0) * s[i];
        total += s[i];
    }
    return std::max(0.0, num / (n * total));
}

SparsityReport sparsity_report(const AttributionGraph& graph, const Circuit& circuit, const std::vector<int>& ks,
                               const std::vector<double>& ps) {
    std::map<ComponentId, double> mass;
    for (const std::uint32_t i : circuit.edges) {
        const Edge& e = graph.edges.at(i);
        const double s = std::abs(e.score_norm);
        mass[ComponentId::of(e.src)] += s;
        mass[ComponentId::of(e.dst)] += s;
    }
    const std::vector<double> m = values_of(mass);
    SparsityReport r;
    r.n_nodes = static_cast<int>(m.size());
    for (const int k : ks) {
        r.topk_mass[k] = topk_mass(m, k);
    }
    for (const double p : ps) {
        r.coverage[p] = coverage_k(m, p);
    }
    r.gini = gini(m);
    return r;
}

double digraph_density(int n, const DiEdges& edges) {
    if (n < 2) {
        return 0.0;
    }
    const DiEdges s = simple_edges(edges);
    return static_cast<double>(s.size()) / (static_cast<double>(n) * static_cast<double>(n - 1));
}

double digraph_reciprocity(const DiEdges& edges) {
    const DiEdges s = simple_edges(edges);
    if (s.empty()) {
        return 0.0;
    }
    std::size_t rec = 0;
    for (const auto& [u, v] : s) {
        if (u != v && std::binary_search(s.begin(), s.end(), std::make_pair(v, u))) {
            ++rec;
        }
    }
    return static_cast<double>(rec) / static_cast<double>(s.size());
}

int undirected_bridges(int n, const DiEdges& edges) {
    std::set<std::pair<int, int>> und;
    for (const auto& [u, v] : edges) {
        if (u != v) {
            und.insert({std::min(u, v), std::max(u, v)});
        }
    }
    std::vector<std::vector<std::pair<int, int>>> adj(static_cast<std::size_t>(n));
    int id = 0;
    for (const auto& [u, v] : und) {
        adj[u].push_back({v, id});
        adj[v].push_back({u, id});
        ++id;
    }
    std::vector<int> disc(static_cast<std::size_t>(n), -1);
    std::vector<int> low(static_cast<std::size_t>(n), 0);
    int timer = 0;
    int bridges = 0;
    std::function<void(int, int)> dfs = [&](int u, int parent_edge) {
        disc[u] = low[u] = timer++;
        for (const auto& [v, eid] : adj[u]) {
            if (eid == parent_edge) {
                continue;
            }
            if (disc[v] < 0) {
                dfs(v, eid);
                low[u] = std::min(low[u], low[v]);
                if (low[v] > disc[u]) {
                    ++bridges;
                }
            } else {
                low[u] = std::min(low[u], disc[v]);
            }
        }
    };
    for (int u = 0; u < n; ++u) {
        if (disc[u] < 0) {
            dfs(u, -1);
        }
    }
    return bridges;
}

std::vector<double> betweenness(int n, const DiEdges& edges) {
    const DiEdges s = simple_edges(edges);
    std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
    for (const auto& [u, v] : s) {
        if (u != v) {
            adj[u].push_back(v);
        }
    }
    std::vector<double> cb(static_cast<std::size_t>(n), 0.0);
    for (int src = 0; src < n; ++src) {
        std::vector<int> order;
        std::vector<std::vector<int>> preds(static_cast<std::size_t>(n));
        std::vector<double> sigma(static_cast<std::size_t>(n), 0.0);
        std::vector<int> dist(static_cast<std::size_t>(n), -1);
        sigma[src] = 1.0;
        dist[src] = 0;
        std::queue<int> q;
        q.push(src);
        while (!q.empty()) {
            const int u = q.front();
            q.pop();
            order.push_back(u);
            for (const int v : adj[u]) {
                if (dist[v] < 0) {
                    dist[v] = dist[u] + 1;
                    q.push(v);
                }
                if (dist[v] == dist[u] + 1) {
                    sigma[v] += sigma[u];
                    preds[v].push_back(u);
                }
            }
        }
        std::vector<double> delta(static_cast<std::size_t>(n), 0.0);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            const int w = *it;
            for (const int u : preds[w]) {
                delta[u] += sigma[u] / sigma[w] * (1.0 + delta[w]);
            }
            if (w != src) {
                cb[w] += delta[w];
            }
        }
    }
    if (n > 2) {
        const double scale = 1.0 / (static_cast<double>(n - 1) * static_cast<double>(n - 2));
        for (double& c : cb) {
            c *= scale;
        }
    } else {
        std::fill(cb.begin(), cb.end(), 0.0);
    }
    return cb;
}

StructuralReport structural_report(const AttributionGraph& graph, const Circuit& circuit) {
    if (circuit.edges.empty()) {
        throw InvalidArgument("structural_report: circuit-induced subgraph is empty");
    }
    const std::set<NodeId> induced = induced_node_set(graph, circuit);
    std::map<NodeId, int> index;
    for (const NodeId& n : induced) {
        index.emplace(n, static_cast<int>(index.size()));
    }
    const int n = static_cast<int>(induced.size());

    StructuralReport r;
    r.n_nodes = n;
    r.n_edges = static_cast<int>(circuit.edges.size());
    DiEdges di;
    double weight = 0.0;
    std::map<EdgeKind, int> kinds;
    for (const std::uint32_t i : circuit.edges) {
        const Edge& e = graph.edges.at(i);
        di.push_back({index.at(e.src), index.at(e.dst)});
        weight += std::abs(e.score_norm);
        ++kinds[e.kind];
    }
    const DiEdges s = simple_edges(di);
    r.n_simple_edges = static_cast<int>(s.size());
    r.density = digraph_density(n, s);
    r.reciprocity = digraph_reciprocity(s);
    r.avg_out_degree = static_cast<double>(s.size()) / n;
    r.avg_weighted_out_degree = weight / n;
    for (const EdgeKind k : kAllEdgeKinds) {
        r.edge_type_fractions[k] = static_cast<double>(kinds[k]) / r.n_edges;
    }
    r.n_bridges = undirected_bridges(n, s);
    int lo = induced.begin()->layer;
    int hi = lo;
    for (const NodeId& node : induced) {
        lo = std::min(lo, node.layer);
        hi = std::max(hi, node.layer);
    }
    r.layer_span = hi - lo;
    const std::vector<double> cb = betweenness(n, s);
    r.avg_betweenness = std::accumulate(cb.begin(), cb.end(), 0.0) / n;
    return r;
}

std::set<ComponentId> top_components(const AttributionGraph& graph, int k) {
    return top_components(graph, full_circuit(graph), k);
}

std::set<ComponentId> top_components(const AttributionGraph& graph, const Circuit& circuit, int k) {
    return top_by_mass(component_mass(graph, circuit), k);
}

std::set<ComponentEdge> top_component_edges(const AttributionGraph& graph, int k) {
    std::map<ComponentEdge, double> mass;
    for (const Edge& e : graph.edges) {
        mass[{ComponentId::of(e.src), ComponentId::of(e.dst), e.kind}] += std::abs(e.score_norm);
    }
    return top_by_mass(mass, k);
}

std::vector<double> stability_series(const std::vector<CircuitAtStep>& circuits, bool nodes, int k_nodes) {
    if (circuits.size() < 2) {
        throw InvalidArgument("stability_series needs at least 2 checkpoints");
    }
    std::vector<double> out;
    for (std::size_t i = 1; i < circuits.size(); ++i) {
        const CircuitAtStep& a = circuits[i - 1];
        const CircuitAtStep& b = circuits[i];
        if (nodes) {
            out.push_back(jaccard(top_components(*a.graph, a.circuit, k_nodes),
                                  top_components(*b.graph, b.circuit, k_nodes)));
        } else {
            out.push_back(jaccard(edge_key_set(*a.graph, a.circuit), edge_key_set(*b.graph, b.circuit)));
        }
    }
    return out;
}

std::pair<double, double> cross_model_overlap(const AttributionGraph& a, const AttributionGraph& b, int k_nodes,
                                              int k_edges) {
    return {jaccard(top_components(a, k_nodes), top_components(b, k_nodes)),
            jaccard(top_component_edges(a, k_edges), top_component_edges(b, k_edges))};
}

std::vector<double> laplacian_spectrum(const WeightedGraph& g) {
    if (g.n == 0) {
        return {};
    }
    Eigen::MatrixXd lap = Eigen::MatrixXd::Zero(g.n, g.n);
    for (const auto& [u, v, w] : g.edges) {
        if (u < 0 || v < 0 || u >= g.n || v >= g.n) {
            throw InvalidArgument("laplacian_spectrum: edge endpoint out of range");
        }
        if (u == v) {
            continue;
        }
        lap(u, v) -= w;
        lap(v, u) -= w;
        lap(u, u) += w;
        lap(v, v) += w;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(lap, Eigen::EigenvaluesOnly);
    if (solver.info() != Eigen::Success) {
        throw NumericError("laplacian eigensolver did not converge");
    }
    const Eigen::VectorXd ev = solver.eigenvalues();
    return {ev.data(), ev.data() + ev.size()};
}

double spectral_distance(const WeightedGraph& a, const WeightedGraph& b, int n_eigs) {
    if (n_eigs < 1) {
        throw InvalidArgument("spectral_distance: n_eigs must be >= 1");
    }
    std::vector<double> la = laplacian_spectrum(a);
    std::vector<double> lb = laplacian_spectrum(b);
    la.resize(static_cast<std::size_t>(n_eigs), 0.0);
    lb.resize(static_cast<std::size_t>(n_eigs), 0.0);
    double ss = 0.0;
    for (int i = 0; i < n_eigs; ++i) {
        ss += (la[i] - lb[i]) * (la[i] - lb[i]);
    }
    return std::sqrt(ss / n_eigs);
}

WeightedGraph top_edge_graph(const AttributionGraph& graph, int k_edges) {
    const std::vector<std::uint32_t> idx = top_edges(graph, k_edges);
    if (idx.empty()) {
        throw InvalidArgument("spectral_distance: graph has no scored edge");
    }
    std::map<NodeId, int> index;
    for (const std::uint32_t i : idx) {
        index.emplace(graph.edges[i].src, 0);
        index.emplace(graph.edges[i].dst, 0);
    }
    int next = 0;
    for (auto& [_, v] : index) {
        v = next++;
    }
    WeightedGraph g;
    g.n = next;
    for (const std::uint32_t i : idx) {
        const Edge& e = graph.edges[i];
        g.edges.emplace_back(index.at(e.src), index.at(e.dst), std::abs(e.score_norm));
    }
    return g;
}

double spectral_distance(const AttributionGraph& a, const AttributionGraph& b, int k_edges, int n_eigs) {
    return spectral_distance(top_edge_graph(a, k_edges), top_edge_graph(b, k_edges), n_eigs);
}

SimilarityReport compare_graphs(const AttributionGraph& a, const AttributionGraph& b, int k_nodes, int k_edges,
                                int spectral_edges, int n_eigs) {
    SimilarityReport r;
    std::tie(r.node_jaccard, r.edge_jaccard) = cross_model_overlap(a, b, k_nodes, k_edges);
    r.spectral_distance = spectral_distance(a, b, spectral_edges, n_eigs);
    r.k_nodes = k_nodes;
    r.k_edges = k_edges;
    r.spectral_edges = spectral_edges;
    r.n_eigs = n_eigs;
    return r;
}

OverlapMatrix cross_role_overlap(const std::map<std::string, AttributionGraph>& graphs_by_role, int k) {
    if (graphs_by_role.size() < 2) {
        throw InvalidArgument("cross_role_overlap needs at least 2 roles");
    }
    OverlapMatrix m;
    std::vector<std::set<ComponentId>> tops;
    for (const auto& [role, g] : graphs_by_role) {
        m.roles.push_back(role);
        tops.push_back(top_components(g, k));
    }
    const std::size_t n = tops.size();
    m.values.assign(n, std::vector<double>(n, 1.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            m.values[i][j] = m.values[j][i] = jaccard(tops[i], tops[j]);
        }
    }
    return m;
}

nlohmann::json to_json(const SparsityReport& r) {
    nlohmann::json j;
    for (const auto& [k, v] : r.topk_mass) {
        j["topk_mass"][std::to_string(k)] = v;
    }
    for (const auto& [p, k] : r.coverage) {
        char key[16];
        std::snprintf(key, sizeof key, "%.2f", p);
        j["coverage_k"][key] = k;
    }
    j["gini"] = r.gini;
    j["n_nodes"] = r.n_nodes;
    return j;
}

nlohmann::json to_json(const StructuralReport& r) {
    nlohmann::json j;
    j["n_nodes"] = r.n_nodes;
    j["n_edges"] = r.n_edges;
    j["n_simple_edges"] = r.n_simple_edges;
    j["density"] = r.density;
    j["reciprocity"] = r.reciprocity;
    j["avg_out_degree"] = r.avg_out_degree;
    j["avg_weighted_out_degree"] = r.avg_weighted_out_degree;
    for (const auto& [k, v] : r.edge_type_fractions) {
        j["edge_type_fractions"][to_string(k)] = v;
    }
    j["n_bridges"] = r.n_bridges;
    j["layer_span"] = r.layer_span;
    j["avg_betweenness"] = r.avg_betweenness;
    return j;
}

nlohmann::json to_json(const SimilarityReport& r) {
    return {{"node_jaccard", r.node_jaccard},   {"edge_jaccard", r.edge_jaccard},
            {"spectral_distance", r.spectral_distance}, {"k_nodes", r.k_nodes},
            {"k_edges", r.k_edges},             {"spectral_edges", r.spectral_edges},
            {"n_eigs", r.n_eigs}};
}

nlohmann::json to_json(const OverlapMatrix& m) {
    return {{"roles", m.roles}, {"jaccard", m.values}};
}

std::string metrics_csv_header() {
    return "role,step,top5_mass,top10_mass,top20_mass,coverage_80,coverage_90,coverage_95,gini,"
           "n_nodes,n_edges,density,reciprocity,avg_out_degree,avg_weighted_out_degree,"
           "frac_Q,frac_K,frac_V,frac_Flow,n_bridges,layer_span,avg_betweenness";
}

std::string metrics_csv_row(const std::string& role, std::int64_t step, const SparsityReport& sp,
                            const StructuralReport& st) {
    auto top = [&](int k) { return sp.topk_mass.count(k) ? sp.topk_mass.at(k) : 0.0; };
    auto cov = [&](double p) {
        for (const auto& [q, k] : sp.coverage) {
            if (std::abs(q - p) < 1e-9) {
                return k;
            }
        }
        return 0;
    };
    auto frac = [&](EdgeKind k) { return st.edge_type_fractions.count(k) ? st.edge_type_fractions.at(k) : 0.0; };
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  ",%lld,%.10g,%.10g,%.10g,%d,%d,%d,%.10g,%d,%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%d,%d,"
                  "%.10g",
                  static_cast<long long>(step), top(5), top(10), top(20), cov(0.80), cov(0.90), cov(0.95), sp.gini,
                  st.n_nodes, st.n_edges, st.density, st.reciprocity, st.avg_out_degree, st.avg_weighted_out_degree,
                  frac(EdgeKind::Q), frac(EdgeKind::K), frac(EdgeKind::V), frac(EdgeKind::Flow), st.n_bridges,
                  st.layer_span, st.avg_betweenness);
    return role + buf;
}

}  // namespace compass
