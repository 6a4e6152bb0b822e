#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "compass/model_config.hpp"

namespace compass {

enum class NodeKind : std::uint8_t { Input, AttnHead, Mlp, Logits };

enum class EdgeKind : std::uint8_t { Q, K, V, Flow };

inline constexpr EdgeKind kAllEdgeKinds[] = {EdgeKind::Q, EdgeKind::K, EdgeKind::V, EdgeKind::Flow};

const char* to_string(NodeKind kind);
const char* to_string(EdgeKind kind);
EdgeKind edge_kind_from_string(const std::string& name);

// One module output at one token position.
//
// Ordering is position-major: (position, stage, head), where stage is 0 for
// Input, 1 + 2l for the heads of layer l, 2 + 2l for the MLP of layer l and
// 1 + 2L for Logits (layer L). Every edge goes from a smaller to a larger
// NodeId, so sorted order is a topological order.
struct NodeId {
    NodeKind kind = NodeKind::Input;
    int layer = -1;
    std::optional<int> head;
    int position = 0;

    static NodeId input(int position) { return {NodeKind::Input, -1, std::nullopt, position}; }
    static NodeId attn(int layer, int head, int position) {
        return {NodeKind::AttnHead, layer, head, position};
    }
    static NodeId mlp(int layer, int position) { return {NodeKind::Mlp, layer, std::nullopt, position}; }
    static NodeId logits(int n_layers, int position) {
        return {NodeKind::Logits, n_layers, std::nullopt, position};
    }

    int stage() const;
    std::strong_ordering operator<=>(const NodeId& other) const;
    bool operator==(const NodeId& other) const = default;

    // "input@3", "a1.h0@3", "m1@3", "logits@3".
    std::string str() const;
};

// A node with its position marginalised out: a0.h1, m2, input, logits.
struct ComponentId {
    NodeKind kind = NodeKind::Input;
    int layer = -1;
    int head = -1;

    static ComponentId of(const NodeId& node) {
        return {node.kind, node.layer, node.head.value_or(-1)};
    }
    auto operator<=>(const ComponentId&) const = default;
    std::string str() const;
};

struct EdgeKey {
    NodeId src;
    NodeId dst;
    EdgeKind kind = EdgeKind::Flow;

    auto operator<=>(const EdgeKey&) const = default;
    bool operator==(const EdgeKey&) const = default;
};

struct Edge {
    NodeId src;
    NodeId dst;
    EdgeKind kind = EdgeKind::Flow;
    double score = 0.0;       // raw signed attribution
    double score_norm = 0.0;  // normalised attribution
    bool in_circuit = false;

    EdgeKey key() const { return {src, dst, kind}; }
    bool operator==(const Edge&) const = default;
};

struct AttributionGraph {
    std::vector<NodeId> nodes;  // sorted
    std::vector<Edge> edges;
    std::string model_config_id;
    std::int64_t checkpoint_step = 0;
    std::string role;
    std::string metric_name;
    std::string normalization;  // "total_mass", "cosine" or empty when unscored
    std::int64_t n_pairs = 0;

    bool operator==(const AttributionGraph&) const = default;
};

// A subset of a parent graph's edges, stored as sorted indices into
// AttributionGraph::edges.
struct Circuit {
    std::vector<std::uint32_t> edges;
    int k = 0;

    bool operator==(const Circuit&) const = default;
};

// Enumerates the module x position DAG of a decoder-only model over
// `seq_len` tokens. Nodes: Input, every head, every MLP and Logits at each
// position. Edges (all scores zero):
//   Q    from earlier-stage nodes at the destination head's position,
//   K, V from earlier-stage nodes at any position <= the destination's,
//   Flow into MLPs and Logits from earlier-stage nodes at the same position.
// Edges are emitted sorted by (dst, kind, src).
AttributionGraph build_graph(const ModelConfig& config, int seq_len);

// Topological sort over an arbitrary graph; false when a cycle exists or an
// edge references an unknown node.
bool is_acyclic(const AttributionGraph& graph);

// Checks the structural invariants (known endpoints, no self-loops,
// acyclic). Throws InvalidArgument naming the first violation.
void validate_graph(const AttributionGraph& graph);

// Sets in_circuit on exactly the circuit's edges.
void mark_circuit(AttributionGraph& graph, const Circuit& circuit);

// The circuit currently flagged in the graph.
Circuit circuit_from_flags(const AttributionGraph& graph);

// Every edge of the graph.
Circuit full_circuit(const AttributionGraph& graph);

// Importance of each (layer, head) / MLP module: the summed |score_norm| of
// circuit edges whose destination is that module. Every destination module
// of the graph appears, with 0 when no circuit edge enters it.
std::map<ComponentId, double> node_importance(const AttributionGraph& graph, const Circuit& circuit);

// Union of circuit edge endpoints. With components_only the Input and Logits
// sentinels are dropped.
std::set<NodeId> induced_node_set(const AttributionGraph& graph, const Circuit& circuit,
                                  bool components_only = false);

std::set<EdgeKey> edge_key_set(const AttributionGraph& graph, const Circuit& circuit);

}  // namespace compass
