#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "compass/error.hpp"
#include "compass/graph.hpp"
#include "compass/model.hpp"
#include "compass/pair.hpp"

namespace compass {

enum class Normalization : std::uint8_t { TotalMass, Cosine };

// Which run is subtracted from which when forming source deltas. The score
// sign follows the orientation; |S| does not.
enum class DeltaOrientation : std::uint8_t { CleanMinusCorrupt, CorruptMinusClean };

const char* to_string(Normalization mode);
Normalization normalization_from_string(const std::string& name);

struct IgConfig {
    int m = 5;
    Normalization normalization = Normalization::TotalMass;
    double epsilon = 1e-8;
    int top_k_edges = 200;
    DeltaOrientation orientation = DeltaOrientation::CleanMinusCorrupt;
    // Loss differentiated along the path. CnpLoss is the task loss;
    // TargetLogit makes a linearized model exactly affine in its inputs.
    Objective::Kind objective = Objective::Kind::CnpLoss;
    double loss_scale = 1.0;

    void validate() const;
};

// Raw and normalised scores live on the graph's edges; provenance
// (checkpoint step, role, pair count) on the graph itself.
struct EdgeScoreTable {
    AttributionGraph graph;
    std::vector<double> norm_product;  // |Delta_u| * |g_v| per edge
    Normalization normalization = Normalization::TotalMass;
    bool degenerate = false;           // TotalMass over all-zero scores
};

// z_u(clean) - z_u(corrupt) per node (negated for CorruptMinusClean).
std::map<NodeId, Vec> source_deltas(const CachedRun& clean, const CachedRun& corrupt,
                                    DeltaOrientation orientation = DeltaOrientation::CleanMinusCorrupt);

// S_{u->v} = Delta_u . g_v, g_v the gradient of the clean-target loss with
// respect to v's pre-norm input averaged over the inputs
// x(a_k) = x_corrupt + a_k (x_clean - x_corrupt), a_k = k/m, k = 1..m.
// Layer norms are frozen at the clean run's statistics, as in ablation.
EdgeScoreTable eap_ig_scores(const Checkpoint& ckpt, const RoleCrossPair& pair, const IgConfig& cfg);

// Recomputes score_norm for every edge under `mode`.
void normalize(EdgeScoreTable& table, Normalization mode, double epsilon = 1e-8);

// Summed |score_norm| of the edges entering each attention head (columns
// 0..H-1) and MLP (column H) of each layer.
struct RoleHeatmap {
    int n_layers = 0;
    int n_heads = 0;
    Mat values;  // [L, H + 1]
};

RoleHeatmap role_heatmap(const AttributionGraph& graph, const ModelConfig& config);
std::string heatmap_csv(const RoleHeatmap& heatmap);

struct RoleAttribution {
    EdgeScoreTable table;
    RoleHeatmap heatmap;
};

// Mean raw score and norm product per edge over the pairs, then normalised.
// Pairs must share one clean role and one sequence length.
RoleAttribution aggregate_role(const Checkpoint& ckpt, const std::vector<RoleCrossPair>& pairs, const IgConfig& cfg);

// The k edges of largest |score_norm|, ties broken by ascending
// (src, dst, kind). Marks in_circuit on the graph.
Circuit extract_circuit(AttributionGraph& graph, int k);

// L_clean - L_patched for each edge, where the patched run takes that edge's
// source activation from the corrupt prompt (layer norms frozen at the clean
// run). An empty `edges` means every edge.
std::vector<double> patch_effects(const Checkpoint& ckpt, const RoleCrossPair& pair, const IgConfig& cfg,
                                  const std::vector<std::uint32_t>& edges = {});

class UndefinedFaithfulness : public UndefinedMetric {
public:
    UndefinedFaithfulness(double full, double empty);
    double full_value;
    double empty_value;
};

struct FaithfulnessResult {
    double value = 0.0;
    double circuit_metric = 0.0;  // M(C)
    double full_metric = 0.0;     // M(E)
    double empty_metric = 0.0;    // M(empty set)
};

// (M(C) - M(empty)) / (M(E) - M(empty)) with M = ablated_eval. Throws
// UndefinedFaithfulness when the denominator vanishes.
FaithfulnessResult faithfulness_detail(const Checkpoint& ckpt, const AttributionGraph& graph, const Circuit& circuit,
                                       const std::vector<RoleCrossPair>& pairs,
                                       const AblationOptions& options = {});
double faithfulness(const Checkpoint& ckpt, const AttributionGraph& graph, const Circuit& circuit,
                    const std::vector<RoleCrossPair>& pairs, const AblationOptions& options = {});

}  // namespace compass
