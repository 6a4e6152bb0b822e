#include "compass/graph_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <json.hpp>

#include "compass/error.hpp"

namespace compass {

using nlohmann::json;

std::string format_double(double value) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    std::string out = buf;
    // Keep the token a JSON float so that -0 and large integers survive.
    if (out.find_first_of(".eni") == std::string::npos) {
        out += ".0";
    }
    return out;
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw MissingInput("cannot open '" + path.string() + "'");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("cannot write '" + path.string() + "'");
    }
    out << text;
    if (!out) {
        throw Error("write failed for '" + path.string() + "'");
    }
}

namespace {

std::string quoted(const std::string& s) { return json(s).dump(); }

NodeKind node_kind_from_string(const std::string& name) {
    for (const NodeKind k : {NodeKind::Input, NodeKind::AttnHead, NodeKind::Mlp, NodeKind::Logits}) {
        if (name == to_string(k)) {
            return k;
        }
    }
    throw ParseError("unknown node kind '" + name + "'");
}

template <class T>
T field(const json& record, const char* name, const std::string& where) {
    const auto it = record.find(name);
    if (it == record.end()) {
        throw ParseError(where + ": missing field '" + name + "'");
    }
    try {
        return it->get<T>();
    } catch (const json::exception&) {
        throw ParseError(where + ": field '" + name + "' has the wrong type");
    }
}

}  // namespace

std::string graph_to_string(const AttributionGraph& graph) {
    std::string out;
    out.reserve(128 + graph.nodes.size() * 80 + graph.edges.size() * 160);
    out += "{\n";
    out += "  \"version\": " + std::to_string(kGraphFormatVersion) + ",\n";
    out += "  \"model_config_id\": " + quoted(graph.model_config_id) + ",\n";
    out += "  \"checkpoint_step\": " + std::to_string(graph.checkpoint_step) + ",\n";
    out += "  \"role\": " + quoted(graph.role) + ",\n";
    out += "  \"metric_name\": " + quoted(graph.metric_name) + ",\n";
    out += "  \"normalization\": " + quoted(graph.normalization) + ",\n";
    out += "  \"n_pairs\": " + std::to_string(graph.n_pairs) + ",\n";
    out += "  \"nodes\": [";
    for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
        const NodeId& n = graph.nodes[i];
        out += i == 0 ? "\n    " : ",\n    ";
        out += "{\"id\": " + quoted(n.str()) + ", \"kind\": \"" + to_string(n.kind) +
               "\", \"layer\": " + std::to_string(n.layer) +
               ", \"head\": " + (n.head ? std::to_string(*n.head) : std::string("null")) +
               ", \"position\": " + std::to_string(n.position) + "}";
    }
    out += graph.nodes.empty() ? "],\n" : "\n  ],\n";
    out += "  \"edges\": [";
    for (std::size_t i = 0; i < graph.edges.size(); ++i) {
        const Edge& e = graph.edges[i];
        if (!std::isfinite(e.score) || !std::isfinite(e.score_norm)) {
            throw NumericError("edge " + std::to_string(i) + " has a non-finite score");
        }
        out += i == 0 ? "\n    " : ",\n    ";
        out += "{\"src\": " + quoted(e.src.str()) + ", \"dst\": " + quoted(e.dst.str()) + ", \"kind\": \"" +
               to_string(e.kind) + "\", \"score\": " + format_double(e.score) +
               ", \"score_norm\": " + format_double(e.score_norm) +
               ", \"in_circuit\": " + (e.in_circuit ? "true" : "false") + "}";
    }
    out += graph.edges.empty() ? "]\n" : "\n  ]\n";
    out += "}\n";
    return out;
}

AttributionGraph graph_from_string(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("graph file is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) {
        throw ParseError("graph file: top level must be an object");
    }
    const int version = field<int>(doc, "version", "graph file");
    if (version != kGraphFormatVersion) {
        throw VersionMismatch("graph file version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kGraphFormatVersion) + ")");
    }

    AttributionGraph g;
    g.model_config_id = field<std::string>(doc, "model_config_id", "graph file");
    g.checkpoint_step = field<std::int64_t>(doc, "checkpoint_step", "graph file");
    g.role = field<std::string>(doc, "role", "graph file");
    g.metric_name = field<std::string>(doc, "metric_name", "graph file");
    g.normalization = field<std::string>(doc, "normalization", "graph file");
    g.n_pairs = field<std::int64_t>(doc, "n_pairs", "graph file");

    std::map<std::string, NodeId> by_id;
    const json nodes = field<json>(doc, "nodes", "graph file");
    if (!nodes.is_array()) {
        throw ParseError("graph file: 'nodes' must be an array");
    }
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const std::string where = "nodes[" + std::to_string(i) + "]";
        const json& r = nodes[i];
        if (!r.is_object()) {
            throw ParseError(where + ": record must be an object");
        }
        NodeId n;
        n.kind = node_kind_from_string(field<std::string>(r, "kind", where));
        n.layer = field<int>(r, "layer", where);
        n.position = field<int>(r, "position", where);
        const json head = field<json>(r, "head", where);
        if (!head.is_null()) {
            n.head = head.get<int>();
        }
        if ((n.kind == NodeKind::AttnHead) != n.head.has_value()) {
            throw ParseError(where + ": head must be present exactly for attention nodes");
        }
        const std::string id = field<std::string>(r, "id", where);
        if (!by_id.emplace(id, n).second) {
            throw ParseError(where + ": duplicate node id '" + id + "'");
        }
        g.nodes.push_back(n);
    }

    const json edges = field<json>(doc, "edges", "graph file");
    if (!edges.is_array()) {
        throw ParseError("graph file: 'edges' must be an array");
    }
    g.edges.reserve(edges.size());
    for (std::size_t i = 0; i < edges.size(); ++i) {
        const std::string where = "edges[" + std::to_string(i) + "]";
        const json& r = edges[i];
        if (!r.is_object()) {
            throw ParseError(where + ": record must be an object");
        }
        const auto lookup = [&](const char* name) {
            const std::string id = field<std::string>(r, name, where);
            const auto it = by_id.find(id);
            if (it == by_id.end()) {
                throw ParseError(where + ": unknown node '" + id + "'");
            }
            return it->second;
        };
        Edge e;
        e.src = lookup("src");
        e.dst = lookup("dst");
        try {
            e.kind = edge_kind_from_string(field<std::string>(r, "kind", where));
        } catch (const ParseError& err) {
            throw ParseError(where + ": " + err.what());
        }
        e.score = field<double>(r, "score", where);
        e.score_norm = field<double>(r, "score_norm", where);
        e.in_circuit = field<bool>(r, "in_circuit", where);
        g.edges.push_back(e);
    }
    return g;
}

void export_graph(const AttributionGraph& graph, const std::filesystem::path& path) {
    write_text_file(path, graph_to_string(graph));
}

AttributionGraph import_graph(const std::filesystem::path& path) {
    try {
        return graph_from_string(read_text_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) {
        throw InvalidArgument("quantile of an empty sample");
    }
    if (!(q >= 0.0 && q <= 1.0)) {
        throw InvalidArgument("quantile level must lie in [0, 1]");
    }
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

std::vector<std::uint32_t> causal_flow_edges(const AttributionGraph& graph, double quantile_level,
                                             int min_edges) {
    if (!(quantile_level >= 0.0 && quantile_level < 1.0)) {
        throw InvalidArgument("causal flow: quantile must lie in [0, 1)");
    }
    std::vector<std::uint32_t> in_circuit;
    std::vector<double> magnitudes;
    for (std::size_t i = 0; i < graph.edges.size(); ++i) {
        if (graph.edges[i].in_circuit) {
            in_circuit.push_back(static_cast<std::uint32_t>(i));
            magnitudes.push_back(std::abs(graph.edges[i].score));
        }
    }
    if (in_circuit.empty()) {
        throw InvalidArgument("causal flow: graph has no in-circuit edges");
    }

    double threshold = quantile(magnitudes, quantile_level);
    const auto count_at_or_above = [&](double t) {
        return std::count_if(magnitudes.begin(), magnitudes.end(), [t](double m) { return m >= t; });
    };
    if (count_at_or_above(threshold) < min_edges) {
        if (static_cast<std::size_t>(std::max(min_edges, 0)) >= magnitudes.size()) {
            threshold = -1.0;
        } else {
            std::vector<double> sorted = magnitudes;
            std::sort(sorted.begin(), sorted.end(), std::greater<>());
            threshold = sorted[static_cast<std::size_t>(min_edges) - 1];
        }
    }

    std::vector<std::uint32_t> kept;
    for (std::size_t i = 0; i < in_circuit.size(); ++i) {
        if (magnitudes[i] >= threshold) {
            kept.push_back(in_circuit[i]);
        }
    }
    return kept;
}

namespace {

const char* kind_color(EdgeKind kind) {
    switch (kind) {
        case EdgeKind::Q: return "#1f77b4";
        case EdgeKind::K: return "#ff7f0e";
        case EdgeKind::V: return "#2ca02c";
        case EdgeKind::Flow: return "#7f7f7f";
    }
    return "#000000";
}

}  // namespace

std::string causal_flow_dot(const AttributionGraph& graph, double quantile_level, int min_edges) {
    const std::vector<std::uint32_t> kept = causal_flow_edges(graph, quantile_level, min_edges);

    double max_mag = 0.0;
    std::map<int, std::set<NodeId>> by_layer;
    for (const std::uint32_t i : kept) {
        const Edge& e = graph.edges[i];
        max_mag = std::max(max_mag, std::abs(e.score));
        by_layer[e.src.layer].insert(e.src);
        by_layer[e.dst.layer].insert(e.dst);
    }

    std::ostringstream out;
    out << "digraph causal_flow {\n";
    out << "  rankdir=LR;\n";
    out << "  label=" << quoted(graph.role + " step " + std::to_string(graph.checkpoint_step)) << ";\n";
    out << "  node [shape=box, style=rounded, fontname=\"Helvetica\"];\n";
    for (const auto& [layer, nodes] : by_layer) {
        out << "  subgraph layer_" << (layer < 0 ? "input" : std::to_string(layer)) << " {\n";
        out << "    rank=same;\n";
        for (const NodeId& n : nodes) {
            out << "    " << quoted(n.str()) << ";\n";
        }
        out << "  }\n";
    }
    for (const std::uint32_t i : kept) {
        const Edge& e = graph.edges[i];
        const double width = max_mag > 0.0 ? 0.5 + 4.5 * std::abs(e.score) / max_mag : 1.0;
        char attrs[200];
        std::snprintf(attrs, sizeof(attrs), "penwidth=%.4f, color=\"%s\", style=%s, label=\"%s\"", width,
                      kind_color(e.kind), e.score < 0.0 ? "dashed" : "solid", to_string(e.kind));
        out << "  " << quoted(e.src.str()) << " -> " << quoted(e.dst.str()) << " [" << attrs << "];\n";
    }
    out << "}\n";
    return out.str();
}

void export_causal_flow(const AttributionGraph& graph, double quantile_level, int min_edges,
                        const std::filesystem::path& path) {
    write_text_file(path, causal_flow_dot(graph, quantile_level, min_edges));
}

}  // namespace compass
