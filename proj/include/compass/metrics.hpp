#pragma once

#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "compass/graph.hpp"

namespace compass {

// All metrics read |score_norm|, the mass-normalised attribution.

// Summed |score_norm| of the circuit edges incident to each node; every edge
// counts at both endpoints.
std::map<NodeId, double> node_mass(const AttributionGraph& graph, const Circuit& circuit);

// node_mass with positions summed out.
std::map<ComponentId, double> component_mass(const AttributionGraph& graph, const Circuit& circuit);

// Share of the total held by the K largest masses. Throws UndefinedMetric
// when every mass is zero, InvalidArgument on a negative mass or K < 1.
double topk_mass(const std::vector<double>& masses, int k);

// Smallest K with topk_mass(masses, K) >= p, for 0 < p <= 1.
int coverage_k(const std::vector<double>& masses, double p);

// Mean absolute difference over all ordered pairs divided by twice the mean.
double gini(const std::vector<double>& masses);

struct SparsityReport {
    std::map<int, double> topk_mass;  // K -> share
    std::map<double, int> coverage;   // P -> K
    double gini = 0.0;
    int n_nodes = 0;
};

// Over the component masses of the circuit's induced components.
SparsityReport sparsity_report(const AttributionGraph& graph, const Circuit& circuit,
                               const std::vector<int>& ks = {5, 10, 20},
                               const std::vector<double>& ps = {0.80, 0.90, 0.95});

struct StructuralReport {
    int n_nodes = 0;
    int n_edges = 0;          // circuit edges, parallel edges of different kinds counted separately
    int n_simple_edges = 0;   // distinct (src, dst)
    double density = 0.0;
    double reciprocity = 0.0;
    double avg_out_degree = 0.0;
    double avg_weighted_out_degree = 0.0;
    std::map<EdgeKind, double> edge_type_fractions;
    int n_bridges = 0;
    int layer_span = 0;
    double avg_betweenness = 0.0;
};

// On the circuit-induced simple digraph (parallel edges merged). Throws
// InvalidArgument on an empty circuit.
StructuralReport structural_report(const AttributionGraph& graph, const Circuit& circuit);

// Simple-digraph building blocks, exposed for testing. Nodes are 0..n-1.
using DiEdges = std::vector<std::pair<int, int>>;
double digraph_density(int n, const DiEdges& edges);
double digraph_reciprocity(const DiEdges& edges);
int undirected_bridges(int n, const DiEdges& edges);
std::vector<double> betweenness(int n, const DiEdges& edges);

// |A n B| / |A u B|, and 1 for two empty sets (reported through
// `both_empty` when given).
template <class T>
double jaccard(const std::set<T>& a, const std::set<T>& b, bool* both_empty = nullptr) {
    if (both_empty) {
        *both_empty = a.empty() && b.empty();
    }
    if (a.empty() && b.empty()) {
        return 1.0;
    }
    std::size_t common = 0;
    for (const T& x : a) {
        common += b.count(x);
    }
    return static_cast<double>(common) / static_cast<double>(a.size() + b.size() - common);
}

// The k components of largest mass over the whole graph (every edge
// counted), ties broken by ascending identifier.
std::set<ComponentId> top_components(const AttributionGraph& graph, int k);
std::set<ComponentId> top_components(const AttributionGraph& graph, const Circuit& circuit, int k);

// Position-free edge identity used to match edges across models.
struct ComponentEdge {
    ComponentId src;
    ComponentId dst;
    EdgeKind kind = EdgeKind::Flow;
    auto operator<=>(const ComponentEdge&) const = default;
};

// The k position-free edges of largest summed |score_norm|.
std::set<ComponentEdge> top_component_edges(const AttributionGraph& graph, int k);

struct CircuitAtStep {
    const AttributionGraph* graph = nullptr;
    Circuit circuit;
};

// Jaccard between consecutive circuits' edge sets, or between their top-k
// node sets when `nodes` is set. Throws InvalidArgument with fewer than two.
std::vector<double> stability_series(const std::vector<CircuitAtStep>& circuits, bool nodes = false,
                                     int k_nodes = 20);

struct SimilarityReport {
    double node_jaccard = 0.0;
    double edge_jaccard = 0.0;
    double spectral_distance = 0.0;
    int k_nodes = 30;
    int k_edges = 30;
    int spectral_edges = 50;
    int n_eigs = 20;
};

std::pair<double, double> cross_model_overlap(const AttributionGraph& a, const AttributionGraph& b,
                                              int k_nodes = 30, int k_edges = 30);

// Undirected weighted graph: n nodes and (u, v, w) edges. Repeated or
// opposite edges add their weights.
struct WeightedGraph {
    int n = 0;
    std::vector<std::tuple<int, int, double>> edges;
};

// Ascending eigenvalues of the weighted Laplacian D - W.
std::vector<double> laplacian_spectrum(const WeightedGraph& g);

// RMSE between the n_eigs smallest Laplacian eigenvalues, lists padded with
// zeros when a graph has fewer nodes.
double spectral_distance(const WeightedGraph& a, const WeightedGraph& b, int n_eigs);

// Top-k_edges edges by |score_norm| with weight |score_norm|.
WeightedGraph top_edge_graph(const AttributionGraph& graph, int k_edges);
double spectral_distance(const AttributionGraph& a, const AttributionGraph& b, int k_edges = 50, int n_eigs = 20);

SimilarityReport compare_graphs(const AttributionGraph& a, const AttributionGraph& b, int k_nodes = 30,
                                int k_edges = 30, int spectral_edges = 50, int n_eigs = 20);

// Node-set Jaccard between every pair of role graphs (top-k components).
struct OverlapMatrix {
    std::vector<std::string> roles;
    std::vector<std::vector<double>> values;
};
OverlapMatrix cross_role_overlap(const std::map<std::string, AttributionGraph>& graphs_by_role, int k);

nlohmann::json to_json(const SparsityReport& report);
nlohmann::json to_json(const StructuralReport& report);
nlohmann::json to_json(const SimilarityReport& report);
nlohmann::json to_json(const OverlapMatrix& matrix);

// Flat rows keyed by (role, step) for timeline assembly.
std::string metrics_csv_header();
std::string metrics_csv_row(const std::string& role, std::int64_t step, const SparsityReport& sparsity,
                            const StructuralReport& structure);

}  // namespace compass
