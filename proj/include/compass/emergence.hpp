#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "compass/attribution.hpp"
#include "compass/metrics.hpp"

namespace compass {

struct ChangePoint {
    double t_hat = 0.0;  // first x of the right segment
    double ci_low = 0.0;
    double ci_high = 0.0;
    double r_squared = 0.0;
    std::size_t split = 0;  // index of t_hat in x
    int bootstrap_used = 0;
    int bootstrap_skipped = 0;
};

// Two independent least-squares lines on x[0, s) and x[s, n), s chosen to
// minimise the summed squared residual over min_seg <= s <= n - min_seg;
// the earliest split wins ties. x must be sorted ascending, and a split
// never separates equal x values. Throws InvalidArgument when
// n < 2 * min_seg or no split is admissible.
ChangePoint fit_piecewise(const std::vector<double>& x, const std::vector<double>& y, int min_seg = 3);

// Percentile interval (2.5 / 97.5, nearest rank) of the split refitted on
// n_boot resamples of the (x, y) pairs. A resample without an admissible
// split is redrawn up to 10 times, then skipped. Fills ci_low / ci_high and
// the counters of `point` and widens the interval to contain t_hat.
// `replicate_splits` receives each replicate's split (NaN when skipped).
void bootstrap_ci(const std::vector<double>& x, const std::vector<double>& y, ChangePoint& point, int n_boot,
                  int min_seg, std::uint64_t seed, std::vector<double>* replicate_splits = nullptr);

// fit_piecewise followed by bootstrap_ci.
ChangePoint fit_changepoint(const std::vector<double>& x, const std::vector<double>& y, int min_seg = 3,
                            int n_boot = 1000, std::uint64_t seed = 0);

struct Timeline {
    std::string role;
    std::vector<std::int64_t> steps;
    std::vector<double> faithfulness;        // NaN where undefined
    std::vector<double> stability;           // edge-set Jaccard, length n - 1
    std::vector<double> node_stability;      // top-k node-set Jaccard, length n - 1
    std::vector<double> full_metric;         // M(E)
    std::vector<double> circuit_metric;      // M(C)
    std::vector<double> empty_metric;        // M(empty)
    std::vector<double> complement_metric;   // M(E \ C)
    std::vector<SparsityReport> sparsity;
    std::vector<StructuralReport> structural;
    std::vector<std::set<EdgeKey>> circuit_edges;       // empty when read from a file
    std::vector<std::set<ComponentId>> circuit_nodes;   // top-k components

    std::size_t size() const { return steps.size(); }
    void validate() const;
};

std::string timeline_csv(const Timeline& timeline);
Timeline timeline_from_csv(const std::string& text);

enum class IndispensabilityMode : std::uint8_t { Drop, Sign };

const char* to_string(IndispensabilityMode mode);
IndispensabilityMode indispensability_mode_from_string(const std::string& name);

struct Threshold {
    double value = 0.0;
    double baseline_mean = 0.0;
    double baseline_std = 0.0;
    bool degenerate = false;  // baseline std is zero
};

// Mean and sample standard deviation of the first two values.
Threshold baseline_threshold(const std::vector<double>& series, double n_sigma);

// Earliest index i with series[i .. i + persistence - 1] all above
// `threshold`. NaN never passes.
std::optional<std::size_t> first_persistent(const std::vector<double>& series, double threshold, int persistence,
                                            bool strictly_above = true);

struct MarkerResult {
    std::optional<std::int64_t> step;
    Threshold threshold;
};

// Faithfulness above baseline mean + 2 std of the first two checkpoints for
// 2 consecutive checkpoints. Needs >= 4 checkpoints.
MarkerResult detect_detectability(const Timeline& timeline);

struct IndispensabilityConfig {
    IndispensabilityMode mode = IndispensabilityMode::Drop;
    std::optional<double> theta;  // Drop: fixed threshold instead of baseline mean + std
    int persistence = 2;
};

// Drop: M(E) - M(E \ C) > theta for `persistence` consecutive checkpoints.
// Sign: M(C) - M(E) < 0 for `persistence` consecutive checkpoints.
MarkerResult detect_indispensability(const Timeline& timeline, const IndispensabilityConfig& cfg = {});

// Earliest step i whose consecutive Jaccards J(i, i+1) .. J(i+p-1, i+p) are
// all >= threshold.
std::optional<std::int64_t> consolidation_from_series(const std::vector<std::int64_t>& steps,
                                                      const std::vector<double>& jaccards, double threshold,
                                                      int persistence);

// On the node-stability series, or the edge-stability series with
// `edge_sets`. Needs >= persistence + 1 checkpoints.
std::optional<std::int64_t> detect_consolidation(const Timeline& timeline, double jaccard_threshold = 0.6,
                                                 int persistence = 2, bool edge_sets = false);

struct EmergenceConfig {
    int min_seg = 3;
    int n_boot = 1000;
    std::uint64_t seed = 0;
    double consolidation_threshold = 0.6;
    int consolidation_persistence = 2;
    bool consolidation_edge_sets = false;
    IndispensabilityConfig indispensability;
};

struct EmergenceReport {
    std::optional<std::int64_t> t_det;
    std::optional<std::int64_t> t_ind;
    std::optional<std::int64_t> t_cons;
    Threshold detectability_threshold;
    Threshold indispensability_threshold;
    std::optional<ChangePoint> changepoint_faithfulness;
    std::optional<ChangePoint> changepoint_topk;
    std::vector<std::string> notes;
    EmergenceConfig config;
};

EmergenceReport analyze_emergence(const Timeline& timeline, const EmergenceConfig& cfg = {});
nlohmann::json to_json(const EmergenceReport& report, const std::string& role);

struct CompassConfig {
    IgConfig ig;  // ig.top_k_edges sets the circuit size
    int top_k_nodes = 20;
    AblationOptions ablation{MetricKind::NegLoss, false};
    EmergenceConfig emergence;
};

struct CompassResult {
    Timeline timeline;
    EmergenceReport report;
    std::vector<AttributionGraph> graphs;
};

// Attribution, circuit, faithfulness and metrics at every checkpoint, then
// the emergence markers. With out_dir set, writes graph_step_<n>.json as
// each step finishes plus timeline.csv and emergence.json. A failing step
// aborts with an Error naming it; files already written stay.
CompassResult run_compass(const std::vector<Checkpoint>& checkpoints, const std::vector<RoleCrossPair>& pairs,
                          const std::string& role, const CompassConfig& cfg,
                          const std::optional<std::filesystem::path>& out_dir = std::nullopt);

std::string graph_filename(std::int64_t step);

}  // namespace compass
