#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "compass/graph.hpp"

namespace compass {

inline constexpr int kGraphFormatVersion = 1;

// Graph file: one JSON document
//   {version, model_config_id, checkpoint_step, role, metric_name,
//    normalization, n_pairs, nodes[], edges[]}
// with nodes as {id, kind, layer, head, position} and edges as
// {src, dst, kind, score, score_norm, in_circuit}. Scores are printed with
// 17 significant digits so import(export(g)) == g bit for bit.
std::string graph_to_string(const AttributionGraph& graph);
AttributionGraph graph_from_string(const std::string& text);

void export_graph(const AttributionGraph& graph, const std::filesystem::path& path);
AttributionGraph import_graph(const std::filesystem::path& path);

// Linear-interpolation quantile (numpy's default) of a non-empty sample.
double quantile(std::vector<double> values, double q);

// Indices of the in-circuit edges kept by the causal-flow view: |score| at
// or above the q-quantile of in-circuit |score|, with the threshold lowered
// to the min_edges-th largest |score| whenever fewer than min_edges survive.
// Edges tied with the threshold are kept. Throws InvalidArgument when the
// graph has no in-circuit edge.
std::vector<std::uint32_t> causal_flow_edges(const AttributionGraph& graph, double quantile_level,
                                             int min_edges);

// DOT digraph of the causal-flow view: left-to-right ranks by layer, edge
// penwidth proportional to |score|, colour by edge kind, dashed when the
// score is negative.
std::string causal_flow_dot(const AttributionGraph& graph, double quantile_level = 0.95, int min_edges = 12);

void export_causal_flow(const AttributionGraph& graph, double quantile_level, int min_edges,
                        const std::filesystem::path& path);

// Shared helpers for the text formats.
std::string format_double(double value);
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace compass
