#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "compass/graph.hpp"
#include "compass/model_config.hpp"
#include "compass/pair.hpp"

namespace compass {

using Vec = Eigen::VectorXd;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Parameters of one pre-norm block. Per-head projections are stacked:
// head h owns rows [h*dh, (h+1)*dh) of wq/wk/wv and the matching columns of wo.
struct LayerWeights {
    Vec ln1_g, ln1_b;
    Mat wq, wk, wv;  // [H*dh, d]
    Vec bq, bk, bv;  // [H*dh]
    Mat wo;          // [d, H*dh]
    Vec ln2_g, ln2_b;
    Mat w_in;  // [dm, d]
    Vec b_in;
    Mat w_out;  // [d, dm]
    Vec b_out;

    bool operator==(const LayerWeights&) const = default;
};

struct Weights {
    Mat tok_embed;  // [V, d]
    Mat pos_embed;  // [T, d]; fixed sinusoids under PositionalScheme::Sinusoidal
    std::vector<LayerWeights> layers;
    Vec lnf_g, lnf_b;
    Mat unembed;  // [V, d]
    Vec unembed_b;

    bool operator==(const Weights&) const = default;

    // All-zero weights with the shapes implied by `config`.
    static Weights zeros(const ModelConfig& config);
};

// A named view onto one parameter tensor (row-major, contiguous).
struct ParamView {
    std::string name;
    std::vector<int> shape;
    double* data = nullptr;
    std::size_t size = 0;
};

// Every trainable tensor in a fixed order. Sinusoidal position tables are
// not trainable and are left out.
std::vector<ParamView> param_views(Weights& weights, const ModelConfig& config);

struct Checkpoint {
    std::int64_t step = 0;
    ModelConfig config;
    Weights weights;
    std::uint64_t rng_seed = 0;

    bool operator==(const Checkpoint&) const = default;
};

// Deterministic initialisation: N(0, 0.5^2 / fan_in) matrices, unit layer
// norm gains, zero biases, N(0, 0.5^2) embeddings.
Checkpoint init_model(const ModelConfig& config, std::uint64_t seed);

// Rounds every parameter to the nearest float, matching what a checkpoint
// file stores.
void round_to_float(Weights& weights);

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary container: magic "CMPSCKPT", u32 version, u32 header length, JSON
// header {config, step, rng_seed, tensors[{name, shape}]}, then every
// tensor as little-endian float32 in header order.
std::string checkpoint_bytes(const Checkpoint& ckpt);
Checkpoint checkpoint_from_bytes(const std::string& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Node/slot layout of the module x position graph for one sequence length,
// shared by every run at that length.
//
// A slot is the set of edges feeding one destination input: the Q input of
// a head, the K or V input a head reads from one source position, or the
// residual input of an MLP / the unembedding. Edges of a slot are contiguous
// in graph.edges.
struct Topology {
    struct Slot {
        int dst = 0;
        EdgeKind kind = EdgeKind::Flow;
        int src_position = 0;
        std::uint32_t edge_begin = 0;
        std::uint32_t edge_end = 0;
        int copy_node = 0;  // node whose layer-norm output this slot reads
        int ln_index = 0;   // index into LnStats
    };

    ModelConfig config;
    int seq_len = 0;
    int per_position = 0;
    AttributionGraph graph;
    std::vector<int> edge_src;
    std::vector<int> edge_dst;
    std::vector<int> edge_slot;
    std::vector<Slot> slots;
    std::vector<int> first_slot;  // per node, -1 for Input

    int input_node(int p) const { return p * per_position; }
    int head_node(int l, int h, int p) const { return p * per_position + 1 + l * (config.n_heads + 1) + h; }
    int mlp_node(int l, int p) const { return p * per_position + 1 + l * (config.n_heads + 1) + config.n_heads; }
    int logits_node(int p) const { return p * per_position + 1 + config.n_layers * (config.n_heads + 1); }
    int node_index(const NodeId& node) const;
    std::size_t n_nodes() const { return graph.nodes.size(); }
    std::size_t n_edges() const { return graph.edges.size(); }
};

// Cached, thread-safe lookup.
std::shared_ptr<const Topology> topology(const ModelConfig& config, int seq_len);

// Layer-norm statistics of one run: index (2l)*T + p for the attention norm,
// (2l+1)*T + p for the MLP norm and 2L*T + p for the final norm.
struct LnStats {
    std::vector<double> mean;
    std::vector<double> rstd;
};

struct CachedRun {
    std::vector<int> tokens;
    std::shared_ptr<const Topology> topo;
    // z_u per node in topology order. Input holds the token plus position
    // embedding, Logits the final residual stream before the last norm.
    std::vector<Vec> activations;
    Mat logits;  // [T, V]
    double loss = 0.0;
    LnStats ln_stats;

    const Vec& activation(const NodeId& node) const;
};

enum class EdgeState : std::uint8_t { Active, Zero, Corrupt };

struct Perturbation {
    enum class Target : std::uint8_t { NodeInput, SlotInput };
    Target target = Target::NodeInput;
    int index = 0;  // node index (post-norm input s_v) or slot index (pre-norm sum)
    int dim = 0;
    double eps = 0.0;
};

struct RunOptions {
    const std::vector<EdgeState>* edge_states = nullptr;  // per edge; null means all Active
    const CachedRun* corrupt_source = nullptr;            // supplies z for Corrupt edges
    const LnStats* frozen_ln = nullptr;                   // replaces per-slot norm statistics
    const Mat* input_override = nullptr;                  // [T, d] replaces the Input activations
    std::optional<Perturbation> perturbation;
};

struct Objective {
    enum class Kind : std::uint8_t { CnpLoss, TargetLogit, NextTokenCE };
    Kind kind = Kind::CnpLoss;
    int target = -1;
    double scale = 1.0;

    static Objective cnp(int target) { return {Kind::CnpLoss, target, 1.0}; }
    static Objective target_logit(int target) { return {Kind::TargetLogit, target, 1.0}; }
    static Objective next_token() { return {Kind::NextTokenCE, -1, 1.0}; }
};

// How gradients cross layer norms on the way back. Full differentiates the
// statistics; Frozen treats mean and scale as constants, the convention used
// by edge ablation and attribution.
enum class LnGradMode : std::uint8_t { Full, Frozen };

struct Gradients {
    std::optional<Weights> params;
    std::vector<Vec> slot_input;  // dL/d(pre-norm slot sum) per slot
    std::vector<Vec> node_input;  // dL/ds_v per node (empty for Input)
    std::vector<Vec> node_output; // dL/dz_u per node
};

struct ForwardBackward {
    CachedRun run;
    double loss = 0.0;
    Gradients grads;
};

// Forward over the module x position graph. Each destination input is the
// sum of its parent edges' contributions in canonical order, so an all-Active
// run is the plain model.
CachedRun forward_cached(const Checkpoint& ckpt, const std::vector<int>& tokens, const RunOptions& options = {});

// Logits only, nothing retained.
Mat forward_logits(const Checkpoint& ckpt, const std::vector<int>& tokens);

double objective_value(const CachedRun& run, const Objective& objective);

ForwardBackward forward_backward(const Checkpoint& ckpt, const std::vector<int>& tokens, const Objective& objective,
                                 const RunOptions& options = {}, LnGradMode ln_mode = LnGradMode::Full,
                                 bool param_grads = false);

// -log softmax(final-position logits)[target].
double cnp_loss(const CachedRun& run, int target);
double cnp_loss(const Mat& logits, int target);

// Lowest index among the maximal final-position logits.
int argmax_last(const Mat& logits);

enum class Side : std::uint8_t { Clean, Corrupt, Both };

double cnp_accuracy(const Checkpoint& ckpt, const std::vector<RoleCrossPair>& pairs, Side side);

// dL/ds_v for every non-Input node, L the CNP loss on `target`.
std::map<NodeId, Vec> grad_preactivation(const Checkpoint& ckpt, const std::vector<int>& tokens, int target,
                                         LnGradMode ln_mode = LnGradMode::Full);

enum class AblationMode : std::uint8_t { ZeroOutOfCircuit, ZeroInCircuit };
enum class MetricKind : std::uint8_t { Accuracy, NegLoss };

const char* to_string(MetricKind metric);
MetricKind metric_from_string(const std::string& name);

// Edge states realising an ablation of `circuit`; `corrupt` patches the
// ablated edges from the corrupt prompt instead of zeroing them.
std::vector<EdgeState> ablation_states(std::size_t n_edges, const Circuit& circuit, AblationMode mode,
                                       bool corrupt);

struct AblationOptions {
    MetricKind metric = MetricKind::Accuracy;
    bool corrupt_patch = false;
};

// Mean clean-side metric over pairs with the selected edges removed. Layer
// norms are frozen at each pair's unablated clean-run statistics.
double ablated_eval(const Checkpoint& ckpt, const std::vector<RoleCrossPair>& pairs, const AttributionGraph& graph,
                    const Circuit& circuit, AblationMode mode, const AblationOptions& options = {});

// The same metric for one pair, given its clean (and, for patching,
// corrupt) run. Reuses cached runs across calls.
double ablated_metric(const Checkpoint& ckpt, const RoleCrossPair& pair, const CachedRun& clean,
                      const CachedRun* corrupt, const std::vector<EdgeState>& states, MetricKind metric);

// Training ----------------------------------------------------------------

enum class Optimizer : std::uint8_t { Sgd, Adam };

struct TrainSchedule {
    int total_steps = 8000;
    std::vector<int> checkpoint_steps;
    double lr = 3e-3;
    int batch_size = 16;
    Optimizer optimizer = Optimizer::Adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
};

struct TrainLogEntry {
    int step = 0;
    double loss = 0.0;
};

// Next-token cross-entropy training on tokenised documents. Returns one
// checkpoint per requested step (float-rounded exactly as written to disk)
// and, when out_dir is set, writes step_<n>.ckpt files there.
std::vector<Checkpoint> train(const ModelConfig& config, const std::vector<std::vector<int>>& corpus,
                              const TrainSchedule& schedule, std::uint64_t seed,
                              const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                              std::vector<TrainLogEntry>* log = nullptr);

// Mean next-token cross-entropy of a checkpoint over documents.
double corpus_loss(const Checkpoint& ckpt, const std::vector<std::vector<int>>& corpus);

std::string checkpoint_filename(std::int64_t step);

}  // namespace compass
