#include "compass/graph.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <unordered_map>

#include "compass/error.hpp"

namespace compass {

const char* to_string(NodeKind kind) {
    switch (kind) {
        case NodeKind::Input: return "input";
        case NodeKind::AttnHead: return "attn";
        case NodeKind::Mlp: return "mlp";
        case NodeKind::Logits: return "logits";
    }
    return "?";
}

const char* to_string(EdgeKind kind) {
    switch (kind) {
        case EdgeKind::Q: return "Q";
        case EdgeKind::K: return "K";
        case EdgeKind::V: return "V";
        case EdgeKind::Flow: return "Flow";
    }
    return "?";
}

EdgeKind edge_kind_from_string(const std::string& name) {
    for (const EdgeKind k : kAllEdgeKinds) {
        if (name == to_string(k)) {
            return k;
        }
    }
    throw ParseError("unknown edge kind '" + name + "'");
}

int NodeId::stage() const {
    switch (kind) {
        case NodeKind::Input: return 0;
        case NodeKind::AttnHead: return 1 + 2 * layer;
        case NodeKind::Mlp: return 2 + 2 * layer;
        case NodeKind::Logits: return 1 + 2 * layer;
    }
    return 0;
}

std::strong_ordering NodeId::operator<=>(const NodeId& other) const {
    if (auto c = position <=> other.position; c != 0) {
        return c;
    }
    if (auto c = stage() <=> other.stage(); c != 0) {
        return c;
    }
    if (auto c = head.value_or(-1) <=> other.head.value_or(-1); c != 0) {
        return c;
    }
    return static_cast<int>(kind) <=> static_cast<int>(other.kind);
}

std::string NodeId::str() const {
    const std::string pos = "@" + std::to_string(position);
    switch (kind) {
        case NodeKind::Input: return "input" + pos;
        case NodeKind::AttnHead:
            return "a" + std::to_string(layer) + ".h" + std::to_string(head.value_or(-1)) + pos;
        case NodeKind::Mlp: return "m" + std::to_string(layer) + pos;
        case NodeKind::Logits: return "logits" + pos;
    }
    return "?";
}

std::string ComponentId::str() const {
    switch (kind) {
        case NodeKind::Input: return "input";
        case NodeKind::AttnHead: return "a" + std::to_string(layer) + ".h" + std::to_string(head);
        case NodeKind::Mlp: return "m" + std::to_string(layer);
        case NodeKind::Logits: return "logits";
    }
    return "?";
}

AttributionGraph build_graph(const ModelConfig& config, int seq_len) {
    config.validate();
    if (seq_len < 1) {
        throw InvalidArgument("build_graph: seq_len must be >= 1");
    }
    if (seq_len > config.max_seq_len) {
        throw InvalidArgument("build_graph: seq_len " + std::to_string(seq_len) + " exceeds max_seq_len " +
                              std::to_string(config.max_seq_len));
    }
    const int L = config.n_layers;
    const int H = config.n_heads;

    // Nodes of one position in canonical (stage, head) order.
    const auto position_nodes = [&](int p) {
        std::vector<NodeId> out;
        out.push_back(NodeId::input(p));
        for (int l = 0; l < L; ++l) {
            for (int h = 0; h < H; ++h) {
                out.push_back(NodeId::attn(l, h, p));
            }
            out.push_back(NodeId::mlp(l, p));
        }
        out.push_back(NodeId::logits(L, p));
        return out;
    };

    AttributionGraph g;
    g.model_config_id = config.id();
    std::vector<std::vector<NodeId>> by_position;
    for (int p = 0; p < seq_len; ++p) {
        by_position.push_back(position_nodes(p));
        g.nodes.insert(g.nodes.end(), by_position.back().begin(), by_position.back().end());
    }

    const auto add_sources = [&](const NodeId& dst, EdgeKind kind, int src_position) {
        for (const NodeId& src : by_position[static_cast<std::size_t>(src_position)]) {
            if (src.stage() < dst.stage()) {
                g.edges.push_back(Edge{src, dst, kind, 0.0, 0.0, false});
            }
        }
    };

    for (const NodeId& dst : g.nodes) {
        switch (dst.kind) {
            case NodeKind::Input: break;
            case NodeKind::AttnHead:
                add_sources(dst, EdgeKind::Q, dst.position);
                for (const EdgeKind kind : {EdgeKind::K, EdgeKind::V}) {
                    for (int j = 0; j <= dst.position; ++j) {
                        add_sources(dst, kind, j);
                    }
                }
                break;
            case NodeKind::Mlp:
            case NodeKind::Logits: add_sources(dst, EdgeKind::Flow, dst.position); break;
        }
    }
    return g;
}

bool is_acyclic(const AttributionGraph& graph) {
    std::map<NodeId, std::size_t> index;
    for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
        index.emplace(graph.nodes[i], i);
    }
    std::vector<std::vector<std::size_t>> out(graph.nodes.size());
    std::vector<std::size_t> indegree(graph.nodes.size(), 0);
    for (const Edge& e : graph.edges) {
        const auto s = index.find(e.src);
        const auto d = index.find(e.dst);
        if (s == index.end() || d == index.end()) {
            return false;
        }
        out[s->second].push_back(d->second);
        ++indegree[d->second];
    }
    std::queue<std::size_t> ready;
    for (std::size_t i = 0; i < indegree.size(); ++i) {
        if (indegree[i] == 0) {
            ready.push(i);
        }
    }
    std::size_t visited = 0;
    while (!ready.empty()) {
        const std::size_t u = ready.front();
        ready.pop();
        ++visited;
        for (const std::size_t v : out[u]) {
            if (--indegree[v] == 0) {
                ready.push(v);
            }
        }
    }
    return visited == graph.nodes.size();
}

void validate_graph(const AttributionGraph& graph) {
    const std::set<NodeId> nodes(graph.nodes.begin(), graph.nodes.end());
    for (std::size_t i = 0; i < graph.edges.size(); ++i) {
        const Edge& e = graph.edges[i];
        if (!nodes.contains(e.src) || !nodes.contains(e.dst)) {
            throw InvalidArgument("edge " + std::to_string(i) + " (" + e.src.str() + " -> " + e.dst.str() +
                                  ") references a node outside the graph");
        }
        if (e.src == e.dst) {
            throw InvalidArgument("edge " + std::to_string(i) + " is a self-loop on " + e.src.str());
        }
    }
    if (!is_acyclic(graph)) {
        throw InvalidArgument("graph contains a cycle");
    }
}

void mark_circuit(AttributionGraph& graph, const Circuit& circuit) {
    for (Edge& e : graph.edges) {
        e.in_circuit = false;
    }
    for (const std::uint32_t i : circuit.edges) {
        if (i >= graph.edges.size()) {
            throw InvalidArgument("circuit edge index " + std::to_string(i) + " outside graph");
        }
        graph.edges[i].in_circuit = true;
    }
}

Circuit circuit_from_flags(const AttributionGraph& graph) {
    Circuit c;
    for (std::size_t i = 0; i < graph.edges.size(); ++i) {
        if (graph.edges[i].in_circuit) {
            c.edges.push_back(static_cast<std::uint32_t>(i));
        }
    }
    c.k = static_cast<int>(c.edges.size());
    return c;
}

Circuit full_circuit(const AttributionGraph& graph) {
    Circuit c;
    c.edges.resize(graph.edges.size());
    for (std::size_t i = 0; i < graph.edges.size(); ++i) {
        c.edges[i] = static_cast<std::uint32_t>(i);
    }
    c.k = static_cast<int>(c.edges.size());
    return c;
}

std::map<ComponentId, double> node_importance(const AttributionGraph& graph, const Circuit& circuit) {
    std::map<ComponentId, double> out;
    for (const NodeId& n : graph.nodes) {
        out.emplace(ComponentId::of(n), 0.0);
    }
    for (const std::uint32_t i : circuit.edges) {
        const Edge& e = graph.edges.at(i);
        out[ComponentId::of(e.dst)] += std::abs(e.score_norm);
    }
    return out;
}

std::set<NodeId> induced_node_set(const AttributionGraph& graph, const Circuit& circuit, bool components_only) {
    std::set<NodeId> out;
    const auto keep = [&](const NodeId& n) {
        return !components_only || (n.kind != NodeKind::Input && n.kind != NodeKind::Logits);
    };
    for (const std::uint32_t i : circuit.edges) {
        const Edge& e = graph.edges.at(i);
        if (keep(e.src)) {
            out.insert(e.src);
        }
        if (keep(e.dst)) {
            out.insert(e.dst);
        }
    }
    return out;
}

std::set<EdgeKey> edge_key_set(const AttributionGraph& graph, const Circuit& circuit) {
    std::set<EdgeKey> out;
    for (const std::uint32_t i : circuit.edges) {
        out.insert(graph.edges.at(i).key());
    }
    return out;
}

}  // namespace compass
