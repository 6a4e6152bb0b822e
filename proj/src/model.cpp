#include "compass/model.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>

#include "compass/error.hpp"
#include "compass/parallel.hpp"
#include "compass/rng.hpp"

namespace compass {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

Mat sinusoidal_table(int T, int d) {
    Mat out(T, d);
    for (int p = 0; p < T; ++p) {
        for (int i = 0; i < d; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
            out(p, i) = i % 2 == 0 ? std::sin(p * freq) : std::cos(p * freq);
        }
    }
    return out;
}

}  // namespace

Weights Weights::zeros(const ModelConfig& c) {
    c.validate();
    const int d = c.d_model;
    const int hd = c.n_heads * c.d_head;
    Weights w;
    w.tok_embed = Mat::Zero(c.vocab_size, d);
    w.pos_embed = Mat::Zero(c.max_seq_len, d);
    for (int l = 0; l < c.n_layers; ++l) {
        LayerWeights lw;
        lw.ln1_g = Vec::Zero(d);
        lw.ln1_b = Vec::Zero(d);
        lw.wq = Mat::Zero(hd, d);
        lw.wk = Mat::Zero(hd, d);
        lw.wv = Mat::Zero(hd, d);
        lw.bq = Vec::Zero(hd);
        lw.bk = Vec::Zero(hd);
        lw.bv = Vec::Zero(hd);
        lw.wo = Mat::Zero(d, hd);
        lw.ln2_g = Vec::Zero(d);
        lw.ln2_b = Vec::Zero(d);
        lw.w_in = Mat::Zero(c.d_mlp, d);
        lw.b_in = Vec::Zero(c.d_mlp);
        lw.w_out = Mat::Zero(d, c.d_mlp);
        lw.b_out = Vec::Zero(d);
        w.layers.push_back(std::move(lw));
    }
    w.lnf_g = Vec::Zero(d);
    w.lnf_b = Vec::Zero(d);
    w.unembed = Mat::Zero(c.vocab_size, d);
    w.unembed_b = Vec::Zero(c.vocab_size);
    return w;
}

std::vector<ParamView> param_views(Weights& w, const ModelConfig& c) {
    std::vector<ParamView> out;
    const auto add_mat = [&](const std::string& name, Mat& m) {
        out.push_back({name, {static_cast<int>(m.rows()), static_cast<int>(m.cols())}, m.data(),
                       static_cast<std::size_t>(m.size())});
    };
    const auto add_vec = [&](const std::string& name, Vec& v) {
        out.push_back({name, {static_cast<int>(v.size())}, v.data(), static_cast<std::size_t>(v.size())});
    };
    add_mat("tok_embed", w.tok_embed);
    if (c.positional == PositionalScheme::Learned) {
        add_mat("pos_embed", w.pos_embed);
    }
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        LayerWeights& lw = w.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        add_vec(p + "ln1.g", lw.ln1_g);
        add_vec(p + "ln1.b", lw.ln1_b);
        add_mat(p + "attn.wq", lw.wq);
        add_vec(p + "attn.bq", lw.bq);
        add_mat(p + "attn.wk", lw.wk);
        add_vec(p + "attn.bk", lw.bk);
        add_mat(p + "attn.wv", lw.wv);
        add_vec(p + "attn.bv", lw.bv);
        add_mat(p + "attn.wo", lw.wo);
        add_vec(p + "ln2.g", lw.ln2_g);
        add_vec(p + "ln2.b", lw.ln2_b);
        add_mat(p + "mlp.w_in", lw.w_in);
        add_vec(p + "mlp.b_in", lw.b_in);
        add_mat(p + "mlp.w_out", lw.w_out);
        add_vec(p + "mlp.b_out", lw.b_out);
    }
    add_vec("lnf.g", w.lnf_g);
    add_vec("lnf.b", w.lnf_b);
    add_mat("unembed", w.unembed);
    add_vec("unembed_b", w.unembed_b);
    return out;
}

Checkpoint init_model(const ModelConfig& config, std::uint64_t seed) {
    Checkpoint ckpt;
    ckpt.config = config;
    ckpt.rng_seed = seed;
    ckpt.step = 0;
    ckpt.weights = Weights::zeros(config);
    Weights& w = ckpt.weights;
    Rng rng(derive_seed(seed, "init"));

    const auto fill = [&](Mat& m, double std) {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = std * rng.normal();
        }
    };
    const auto fan_in_std = [](const Mat& m) { return 0.5 / std::sqrt(static_cast<double>(m.cols())); };

    fill(w.tok_embed, 0.5);
    if (config.positional == PositionalScheme::Learned) {
        fill(w.pos_embed, 0.5);
    } else {
        w.pos_embed = sinusoidal_table(config.max_seq_len, config.d_model);
    }
    for (LayerWeights& lw : w.layers) {
        lw.ln1_g.setOnes();
        lw.ln2_g.setOnes();
        for (Mat* m : {&lw.wq, &lw.wk, &lw.wv, &lw.wo, &lw.w_in, &lw.w_out}) {
            fill(*m, fan_in_std(*m));
        }
    }
    w.lnf_g.setOnes();
    fill(w.unembed, fan_in_std(w.unembed));
    return ckpt;
}

void round_to_float(Weights& weights) {
    const auto round_all = [](double* data, Eigen::Index n) {
        for (Eigen::Index i = 0; i < n; ++i) {
            data[i] = static_cast<double>(static_cast<float>(data[i]));
        }
    };
    round_all(weights.tok_embed.data(), weights.tok_embed.size());
    round_all(weights.pos_embed.data(), weights.pos_embed.size());
    for (LayerWeights& lw : weights.layers) {
        for (Mat* m : {&lw.wq, &lw.wk, &lw.wv, &lw.wo, &lw.w_in, &lw.w_out}) {
            round_all(m->data(), m->size());
        }
        for (Vec* v : {&lw.ln1_g, &lw.ln1_b, &lw.bq, &lw.bk, &lw.bv, &lw.ln2_g, &lw.ln2_b, &lw.b_in, &lw.b_out}) {
            round_all(v->data(), v->size());
        }
    }
    for (Vec* v : {&weights.lnf_g, &weights.lnf_b, &weights.unembed_b}) {
        round_all(v->data(), v->size());
    }
    round_all(weights.unembed.data(), weights.unembed.size());
}

// Topology -----------------------------------------------------------------

int Topology::node_index(const NodeId& node) const {
    if (node.position < 0 || node.position >= seq_len) {
        throw InvalidArgument("node " + node.str() + " outside sequence length " + std::to_string(seq_len));
    }
    switch (node.kind) {
        case NodeKind::Input: return input_node(node.position);
        case NodeKind::AttnHead:
            if (node.layer < 0 || node.layer >= config.n_layers || !node.head || *node.head < 0 ||
                *node.head >= config.n_heads) {
                break;
            }
            return head_node(node.layer, *node.head, node.position);
        case NodeKind::Mlp:
            if (node.layer < 0 || node.layer >= config.n_layers) {
                break;
            }
            return mlp_node(node.layer, node.position);
        case NodeKind::Logits: return logits_node(node.position);
    }
    throw InvalidArgument("node " + node.str() + " does not exist in a " + config.id() + " model");
}

namespace {

std::shared_ptr<const Topology> build_topology(const ModelConfig& config, int seq_len) {
    auto t = std::make_shared<Topology>();
    t->config = config;
    t->seq_len = seq_len;
    t->per_position = 2 + config.n_layers * (config.n_heads + 1);
    t->graph = build_graph(config, seq_len);
    const int L = config.n_layers;
    const int T = seq_len;

    for (std::size_t i = 0; i < t->graph.nodes.size(); ++i) {
        if (t->node_index(t->graph.nodes[i]) != static_cast<int>(i)) {
            throw Error("internal: node layout disagrees with graph order at " + t->graph.nodes[i].str());
        }
    }

    const auto& edges = t->graph.edges;
    t->edge_src.resize(edges.size());
    t->edge_dst.resize(edges.size());
    t->edge_slot.resize(edges.size());
    t->first_slot.assign(t->graph.nodes.size(), -1);
    for (std::size_t e = 0; e < edges.size(); ++e) {
        t->edge_src[e] = t->node_index(edges[e].src);
        t->edge_dst[e] = t->node_index(edges[e].dst);
        const bool same = !t->slots.empty() && t->slots.back().dst == t->edge_dst[e] &&
                          t->slots.back().kind == edges[e].kind &&
                          t->slots.back().src_position == edges[e].src.position;
        if (!same) {
            Topology::Slot slot;
            slot.dst = t->edge_dst[e];
            slot.kind = edges[e].kind;
            slot.src_position = edges[e].src.position;
            slot.edge_begin = static_cast<std::uint32_t>(e);
            const NodeId& dst = edges[e].dst;
            switch (dst.kind) {
                case NodeKind::AttnHead:
                    slot.copy_node = t->head_node(dst.layer, *dst.head, slot.src_position);
                    slot.ln_index = (2 * dst.layer) * T + slot.src_position;
                    break;
                case NodeKind::Mlp:
                    slot.copy_node = slot.dst;
                    slot.ln_index = (2 * dst.layer + 1) * T + dst.position;
                    break;
                case NodeKind::Logits:
                    slot.copy_node = slot.dst;
                    slot.ln_index = 2 * L * T + dst.position;
                    break;
                case NodeKind::Input: throw Error("internal: edge into an Input node");
            }
            if (t->first_slot[static_cast<std::size_t>(slot.dst)] < 0) {
                t->first_slot[static_cast<std::size_t>(slot.dst)] = static_cast<int>(t->slots.size());
            }
            t->slots.push_back(slot);
        }
        t->slots.back().edge_end = static_cast<std::uint32_t>(e + 1);
        t->edge_slot[e] = static_cast<int>(t->slots.size() - 1);
    }

    // Heads expect Q, K(0..i), V(0..i) as consecutive slots.
    for (std::size_t v = 0; v < t->graph.nodes.size(); ++v) {
        const NodeId& n = t->graph.nodes[v];
        if (n.kind != NodeKind::AttnHead) {
            continue;
        }
        const int s0 = t->first_slot[v];
        const int i = n.position;
        bool ok = s0 >= 0 && t->slots[static_cast<std::size_t>(s0)].kind == EdgeKind::Q;
        for (int j = 0; ok && j <= i; ++j) {
            const auto& k = t->slots[static_cast<std::size_t>(s0 + 1 + j)];
            const auto& vv = t->slots[static_cast<std::size_t>(s0 + 2 + i + j)];
            ok = k.kind == EdgeKind::K && k.src_position == j && vv.kind == EdgeKind::V && vv.src_position == j &&
                 k.dst == static_cast<int>(v) && vv.dst == static_cast<int>(v);
        }
        if (!ok) {
            throw Error("internal: unexpected slot layout at " + n.str());
        }
    }
    return t;
}

}  // namespace

std::shared_ptr<const Topology> topology(const ModelConfig& config, int seq_len) {
    static std::mutex mutex;
    static std::map<std::pair<std::string, int>, std::shared_ptr<const Topology>> cache;
    const auto key = std::make_pair(config.id(), seq_len);
    {
        std::lock_guard lock(mutex);
        const auto it = cache.find(key);
        if (it != cache.end()) {
            return it->second;
        }
    }
    auto built = build_topology(config, seq_len);
    std::lock_guard lock(mutex);
    return cache.emplace(key, std::move(built)).first->second;
}

const Vec& CachedRun::activation(const NodeId& node) const {
    return activations.at(static_cast<std::size_t>(topo->node_index(node)));
}

// Engine -------------------------------------------------------------------

namespace {

struct SlotCache {
    Vec x;  // pre-norm sum
    Vec xhat;
    double rstd = 1.0;
    Vec y;     // post-norm input s_v
    Vec proj;  // q, k, v or MLP pre-activation
};

struct Trace {
    std::vector<SlotCache> slots;
    std::vector<Vec> attn;     // per head node: attention weights over j <= i
    std::vector<Vec> head_out; // per head node: attention-weighted values
    std::vector<Vec> mlp_act;  // per MLP node
};

void validate_tokens(const ModelConfig& c, const std::vector<int>& tokens) {
    if (tokens.empty()) {
        throw InvalidArgument("token sequence is empty");
    }
    if (static_cast<int>(tokens.size()) > c.max_seq_len) {
        throw InvalidArgument("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                              std::to_string(c.max_seq_len));
    }
    for (std::size_t p = 0; p < tokens.size(); ++p) {
        if (tokens[p] < 0 || tokens[p] >= c.vocab_size) {
            throw InvalidArgument("token id " + std::to_string(tokens[p]) + " at position " + std::to_string(p) +
                                  " is outside the vocabulary (size " + std::to_string(c.vocab_size) + ")");
        }
    }
}

class Engine {
public:
    Engine(const Checkpoint& ckpt, const std::vector<int>& tokens, const RunOptions& options)
        : c_(ckpt.config), w_(ckpt.weights), tokens_(tokens), opt_(options) {
        validate_tokens(c_, tokens);
        T_ = static_cast<int>(tokens.size());
        topo_ = topology(c_, T_);
        if (opt_.edge_states && opt_.edge_states->size() != topo_->n_edges()) {
            throw InvalidArgument("edge state vector has " + std::to_string(opt_.edge_states->size()) +
                                  " entries, graph has " + std::to_string(topo_->n_edges()));
        }
        if (opt_.corrupt_source && opt_.corrupt_source->activations.size() != topo_->n_nodes()) {
            throw InvalidArgument("corrupt source run has a different shape");
        }
        if (opt_.frozen_ln && opt_.frozen_ln->mean.size() != ln_count()) {
            throw InvalidArgument("frozen layer-norm statistics have a different shape");
        }
        if (opt_.input_override && (opt_.input_override->rows() != T_ || opt_.input_override->cols() != c_.d_model)) {
            throw InvalidArgument("input override must be [seq_len, d_model]");
        }
    }

    CachedRun forward() {
        const int dh = c_.d_head;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        CachedRun run;
        run.tokens = tokens_;
        run.topo = topo_;
        run.activations.assign(topo_->n_nodes(), Vec());
        run.logits = Mat::Zero(T_, c_.vocab_size);
        run.ln_stats.mean.assign(ln_count(), 0.0);
        run.ln_stats.rstd.assign(ln_count(), 1.0);
        trace_.slots.assign(topo_->slots.size(), SlotCache());
        trace_.attn.assign(topo_->n_nodes(), Vec());
        trace_.head_out.assign(topo_->n_nodes(), Vec());
        trace_.mlp_act.assign(topo_->n_nodes(), Vec());

        for (std::size_t v = 0; v < topo_->n_nodes(); ++v) {
            const NodeId& node = topo_->graph.nodes[v];
            const int p = node.position;
            switch (node.kind) {
                case NodeKind::Input:
                    if (opt_.input_override) {
                        run.activations[v] = opt_.input_override->row(p).transpose();
                    } else {
                        run.activations[v] = (w_.tok_embed.row(tokens_[static_cast<std::size_t>(p)]) +
                                              w_.pos_embed.row(p))
                                                 .transpose();
                    }
                    break;
                case NodeKind::AttnHead: {
                    const LayerWeights& lw = w_.layers[static_cast<std::size_t>(node.layer)];
                    const int h0 = *node.head * dh;
                    const int s0 = topo_->first_slot[v];
                    SlotCache& qs = prepare_slot(run, s0);
                    qs.proj = lw.wq.middleRows(h0, dh) * qs.y + lw.bq.segment(h0, dh);
                    for (int j = 0; j <= p; ++j) {
                        SlotCache& ks = prepare_slot(run, s0 + 1 + j);
                        ks.proj = lw.wk.middleRows(h0, dh) * ks.y + lw.bk.segment(h0, dh);
                        SlotCache& vs = prepare_slot(run, s0 + 2 + p + j);
                        vs.proj = lw.wv.middleRows(h0, dh) * vs.y + lw.bv.segment(h0, dh);
                    }
                    Vec a(p + 1);
                    if (c_.linearized) {
                        a.setConstant(1.0 / static_cast<double>(p + 1));
                    } else {
                        for (int j = 0; j <= p; ++j) {
                            a[j] = qs.proj.dot(trace_.slots[static_cast<std::size_t>(s0 + 1 + j)].proj) * scale;
                        }
                        const double mx = a.maxCoeff();
                        a = (a.array() - mx).exp();
                        a /= a.sum();
                    }
                    Vec out = Vec::Zero(dh);
                    for (int j = 0; j <= p; ++j) {
                        out += a[j] * trace_.slots[static_cast<std::size_t>(s0 + 2 + p + j)].proj;
                    }
                    run.activations[v] = lw.wo.middleCols(h0, dh) * out;
                    trace_.attn[v] = std::move(a);
                    trace_.head_out[v] = std::move(out);
                    break;
                }
                case NodeKind::Mlp: {
                    const LayerWeights& lw = w_.layers[static_cast<std::size_t>(node.layer)];
                    SlotCache& s = prepare_slot(run, topo_->first_slot[v]);
                    s.proj = lw.w_in * s.y + lw.b_in;
                    Vec act = s.proj;
                    if (!c_.linearized) {
                        act = s.proj.unaryExpr(&gelu);
                    }
                    run.activations[v] = lw.w_out * act + lw.b_out;
                    trace_.mlp_act[v] = std::move(act);
                    break;
                }
                case NodeKind::Logits: {
                    SlotCache& s = prepare_slot(run, topo_->first_slot[v]);
                    run.logits.row(p) = (w_.unembed * s.y + w_.unembed_b).transpose();
                    run.activations[v] = s.x;
                    break;
                }
            }
            if (!run.activations[v].allFinite()) {
                throw NumericError("non-finite activation at node " + node.str());
            }
        }
        return run;
    }

    // Gradients given dL/dlogits. Frozen norm statistics are forced when the
    // forward itself ran with frozen statistics.
    Gradients backward(const Mat& dlogits, LnGradMode ln_mode, bool want_params) {
        const int dh = c_.d_head;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        const bool frozen = ln_mode == LnGradMode::Frozen || opt_.frozen_ln != nullptr;
        Gradients g;
        if (want_params) {
            g.params = Weights::zeros(c_);
        }
        g.slot_input.assign(topo_->slots.size(), Vec());
        g.node_input.assign(topo_->n_nodes(), Vec());
        g.node_output.assign(topo_->n_nodes(), Vec::Zero(c_.d_model));
        for (std::size_t v = 0; v < topo_->n_nodes(); ++v) {
            if (topo_->graph.nodes[v].kind != NodeKind::Input) {
                g.node_input[v] = Vec::Zero(c_.d_model);
            }
        }
        Weights* gw = want_params ? &*g.params : nullptr;

        const auto slot_back = [&](int s, const Vec& dy) {
            const Topology::Slot& slot = topo_->slots[static_cast<std::size_t>(s)];
            const SlotCache& sc = trace_.slots[static_cast<std::size_t>(s)];
            g.node_input[static_cast<std::size_t>(slot.copy_node)] += dy;
            Vec dx;
            if (c_.linearized) {
                dx = dy;
            } else {
                const Vec& gamma = ln_gain(slot);
                if (gw) {
                    ln_gain_mut(*gw, slot) += dy.cwiseProduct(sc.xhat);
                    ln_bias_mut(*gw, slot) += dy;
                }
                const Vec dxhat = gamma.cwiseProduct(dy);
                if (frozen) {
                    dx = sc.rstd * dxhat;
                } else {
                    const double n = static_cast<double>(dxhat.size());
                    const double mean_d = dxhat.sum() / n;
                    const double mean_dx = dxhat.dot(sc.xhat) / n;
                    dx = sc.rstd * (dxhat.array() - mean_d - sc.xhat.array() * mean_dx).matrix();
                }
            }
            for (std::uint32_t e = slot.edge_begin; e < slot.edge_end; ++e) {
                if (state(e) == EdgeState::Active) {
                    g.node_output[static_cast<std::size_t>(topo_->edge_src[e])] += dx;
                }
            }
            g.slot_input[static_cast<std::size_t>(s)] = std::move(dx);
        };

        for (std::size_t vi = topo_->n_nodes(); vi-- > 0;) {
            const NodeId& node = topo_->graph.nodes[vi];
            const int p = node.position;
            const Vec& dz = g.node_output[vi];
            switch (node.kind) {
                case NodeKind::Logits: {
                    const int s = topo_->first_slot[vi];
                    const Vec dl = dlogits.row(p).transpose();
                    const Vec dy = w_.unembed.transpose() * dl;
                    if (gw) {
                        gw->unembed.noalias() += dl * trace_.slots[static_cast<std::size_t>(s)].y.transpose();
                        gw->unembed_b += dl;
                    }
                    slot_back(s, dy);
                    break;
                }
                case NodeKind::Mlp: {
                    const LayerWeights& lw = w_.layers[static_cast<std::size_t>(node.layer)];
                    const int s = topo_->first_slot[vi];
                    const SlotCache& sc = trace_.slots[static_cast<std::size_t>(s)];
                    const Vec& act = trace_.mlp_act[vi];
                    const Vec dact = lw.w_out.transpose() * dz;
                    Vec dh_pre = dact;
                    if (!c_.linearized) {
                        dh_pre = dact.cwiseProduct(sc.proj.unaryExpr(&gelu_grad));
                    }
                    if (gw) {
                        LayerWeights& gl = gw->layers[static_cast<std::size_t>(node.layer)];
                        gl.w_out.noalias() += dz * act.transpose();
                        gl.b_out += dz;
                        gl.w_in.noalias() += dh_pre * sc.y.transpose();
                        gl.b_in += dh_pre;
                    }
                    const Vec dy = lw.w_in.transpose() * dh_pre;
                    slot_back(s, dy);
                    break;
                }
                case NodeKind::AttnHead: {
                    const LayerWeights& lw = w_.layers[static_cast<std::size_t>(node.layer)];
                    const int h0 = *node.head * dh;
                    const int s0 = topo_->first_slot[vi];
                    const Vec& a = trace_.attn[vi];
                    const Vec& out = trace_.head_out[vi];
                    const Vec dout = lw.wo.middleCols(h0, dh).transpose() * dz;
                    const Vec& q = trace_.slots[static_cast<std::size_t>(s0)].proj;
                    Vec da(p + 1);
                    for (int j = 0; j <= p; ++j) {
                        da[j] = dout.dot(trace_.slots[static_cast<std::size_t>(s0 + 2 + p + j)].proj);
                    }
                    Vec ds = Vec::Zero(p + 1);
                    if (!c_.linearized) {
                        const double mix = a.dot(da);
                        ds = a.cwiseProduct((da.array() - mix).matrix());
                    }
                    Vec dq = Vec::Zero(dh);
                    for (int j = 0; j <= p; ++j) {
                        dq += (ds[j] * scale) * trace_.slots[static_cast<std::size_t>(s0 + 1 + j)].proj;
                    }
                    LayerWeights* gl = gw ? &gw->layers[static_cast<std::size_t>(node.layer)] : nullptr;
                    if (gl) {
                        gl->wo.middleCols(h0, dh).noalias() += dz * out.transpose();
                    }
                    const auto proj_back = [&](int s, const Vec& dproj, const Mat& wfull, Mat* gwfull, Vec* gbfull) {
                        const SlotCache& sc = trace_.slots[static_cast<std::size_t>(s)];
                        if (gwfull) {
                            gwfull->middleRows(h0, dh).noalias() += dproj * sc.y.transpose();
                            gbfull->segment(h0, dh) += dproj;
                        }
                        const Vec dy = wfull.middleRows(h0, dh).transpose() * dproj;
                        slot_back(s, dy);
                    };
                    proj_back(s0, dq, lw.wq, gl ? &gl->wq : nullptr, gl ? &gl->bq : nullptr);
                    for (int j = 0; j <= p; ++j) {
                        const Vec dk = (ds[j] * scale) * q;
                        proj_back(s0 + 1 + j, dk, lw.wk, gl ? &gl->wk : nullptr, gl ? &gl->bk : nullptr);
                    }
                    for (int j = 0; j <= p; ++j) {
                        const Vec dv = a[j] * dout;
                        proj_back(s0 + 2 + p + j, dv, lw.wv, gl ? &gl->wv : nullptr, gl ? &gl->bv : nullptr);
                    }
                    break;
                }
                case NodeKind::Input:
                    if (gw && !opt_.input_override) {
                        gw->tok_embed.row(tokens_[static_cast<std::size_t>(p)]) += dz.transpose();
                        if (c_.positional == PositionalScheme::Learned) {
                            gw->pos_embed.row(p) += dz.transpose();
                        }
                    }
                    break;
            }
        }
        return g;
    }

    std::shared_ptr<const Topology> topo() const { return topo_; }

private:
    std::size_t ln_count() const {
        return static_cast<std::size_t>((2 * c_.n_layers + 1) * T_);
    }

    EdgeState state(std::uint32_t e) const { return opt_.edge_states ? (*opt_.edge_states)[e] : EdgeState::Active; }

    const Vec& ln_gain(const Topology::Slot& slot) const {
        const NodeId& dst = topo_->graph.nodes[static_cast<std::size_t>(slot.dst)];
        switch (dst.kind) {
            case NodeKind::AttnHead: return w_.layers[static_cast<std::size_t>(dst.layer)].ln1_g;
            case NodeKind::Mlp: return w_.layers[static_cast<std::size_t>(dst.layer)].ln2_g;
            default: return w_.lnf_g;
        }
    }
    const Vec& ln_bias(const Topology::Slot& slot) const {
        const NodeId& dst = topo_->graph.nodes[static_cast<std::size_t>(slot.dst)];
        switch (dst.kind) {
            case NodeKind::AttnHead: return w_.layers[static_cast<std::size_t>(dst.layer)].ln1_b;
            case NodeKind::Mlp: return w_.layers[static_cast<std::size_t>(dst.layer)].ln2_b;
            default: return w_.lnf_b;
        }
    }
    Vec& ln_gain_mut(Weights& w, const Topology::Slot& slot) const {
        const NodeId& dst = topo_->graph.nodes[static_cast<std::size_t>(slot.dst)];
        switch (dst.kind) {
            case NodeKind::AttnHead: return w.layers[static_cast<std::size_t>(dst.layer)].ln1_g;
            case NodeKind::Mlp: return w.layers[static_cast<std::size_t>(dst.layer)].ln2_g;
            default: return w.lnf_g;
        }
    }
    Vec& ln_bias_mut(Weights& w, const Topology::Slot& slot) const {
        const NodeId& dst = topo_->graph.nodes[static_cast<std::size_t>(slot.dst)];
        switch (dst.kind) {
            case NodeKind::AttnHead: return w.layers[static_cast<std::size_t>(dst.layer)].ln1_b;
            case NodeKind::Mlp: return w.layers[static_cast<std::size_t>(dst.layer)].ln2_b;
            default: return w.lnf_b;
        }
    }

    SlotCache& prepare_slot(CachedRun& run, int s) {
        const Topology::Slot& slot = topo_->slots[static_cast<std::size_t>(s)];
        SlotCache& sc = trace_.slots[static_cast<std::size_t>(s)];
        sc.x = Vec::Zero(c_.d_model);
        for (std::uint32_t e = slot.edge_begin; e < slot.edge_end; ++e) {
            const auto src = static_cast<std::size_t>(topo_->edge_src[e]);
            switch (state(e)) {
                case EdgeState::Active: sc.x += run.activations[src]; break;
                case EdgeState::Corrupt:
                    if (!opt_.corrupt_source) {
                        throw InvalidArgument("corrupt edge state without a corrupt source run");
                    }
                    sc.x += opt_.corrupt_source->activations[src];
                    break;
                case EdgeState::Zero: break;
            }
        }
        const auto& pert = opt_.perturbation;
        if (pert && pert->target == Perturbation::Target::SlotInput && pert->index == s) {
            sc.x[pert->dim] += pert->eps;
        }
        if (c_.linearized) {
            sc.xhat = sc.x;
            sc.rstd = 1.0;
            sc.y = sc.x;
        } else {
            double mu = 0.0;
            double rstd = 1.0;
            if (opt_.frozen_ln) {
                mu = opt_.frozen_ln->mean[static_cast<std::size_t>(slot.ln_index)];
                rstd = opt_.frozen_ln->rstd[static_cast<std::size_t>(slot.ln_index)];
            } else {
                mu = sc.x.mean();
                const double var = (sc.x.array() - mu).square().sum() / static_cast<double>(sc.x.size());
                rstd = 1.0 / std::sqrt(var + c_.ln_eps);
            }
            run.ln_stats.mean[static_cast<std::size_t>(slot.ln_index)] = mu;
            run.ln_stats.rstd[static_cast<std::size_t>(slot.ln_index)] = rstd;
            sc.rstd = rstd;
            sc.xhat = ((sc.x.array() - mu) * rstd).matrix();
            sc.y = ln_gain(slot).cwiseProduct(sc.xhat) + ln_bias(slot);
        }
        if (pert && pert->target == Perturbation::Target::NodeInput && pert->index == slot.copy_node) {
            sc.y[pert->dim] += pert->eps;
        }
        return sc;
    }

    const ModelConfig& c_;
    const Weights& w_;
    const std::vector<int>& tokens_;
    const RunOptions& opt_;
    int T_ = 0;
    std::shared_ptr<const Topology> topo_;
    Trace trace_;
};

double log_softmax_at(const Eigen::Ref<const Vec>& row, int index) {
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    return row[index] - lse;
}

void check_target(const Mat& logits, int target) {
    if (target < 0 || target >= logits.cols()) {
        throw InvalidArgument("target id " + std::to_string(target) + " outside the vocabulary (size " +
                              std::to_string(logits.cols()) + ")");
    }
}

// Objective value and dL/dlogits.
double objective_with_grad(const Mat& logits, const std::vector<int>& tokens, const Objective& obj, Mat* dlogits) {
    const auto T = logits.rows();
    if (dlogits) {
        *dlogits = Mat::Zero(T, logits.cols());
    }
    const auto softmax_row = [&](Eigen::Index r) {
        const Vec row = logits.row(r).transpose();
        Vec pr = (row.array() - row.maxCoeff()).exp();
        return Vec(pr / pr.sum());
    };
    switch (obj.kind) {
        case Objective::Kind::CnpLoss: {
            check_target(logits, obj.target);
            const double loss = -log_softmax_at(logits.row(T - 1).transpose(), obj.target);
            if (dlogits) {
                Vec grad = softmax_row(T - 1);
                grad[obj.target] -= 1.0;
                dlogits->row(T - 1) = obj.scale * grad.transpose();
            }
            return obj.scale * loss;
        }
        case Objective::Kind::TargetLogit:
            check_target(logits, obj.target);
            if (dlogits) {
                (*dlogits)(T - 1, obj.target) = -obj.scale;
            }
            return -obj.scale * logits(T - 1, obj.target);
        case Objective::Kind::NextTokenCE: {
            if (T < 2) {
                return 0.0;
            }
            const double inv = 1.0 / static_cast<double>(T - 1);
            double loss = 0.0;
            for (Eigen::Index p = 0; p + 1 < T; ++p) {
                const int next = tokens[static_cast<std::size_t>(p + 1)];
                loss -= log_softmax_at(logits.row(p).transpose(), next);
                if (dlogits) {
                    Vec grad = softmax_row(p);
                    grad[next] -= 1.0;
                    dlogits->row(p) = (obj.scale * inv) * grad.transpose();
                }
            }
            return obj.scale * loss * inv;
        }
    }
    return 0.0;
}

}  // namespace

CachedRun forward_cached(const Checkpoint& ckpt, const std::vector<int>& tokens, const RunOptions& options) {
    Engine engine(ckpt, tokens, options);
    CachedRun run = engine.forward();
    run.loss = objective_with_grad(run.logits, tokens, Objective::next_token(), nullptr);
    return run;
}

Mat forward_logits(const Checkpoint& ckpt, const std::vector<int>& tokens) {
    const RunOptions options;
    Engine engine(ckpt, tokens, options);
    return engine.forward().logits;
}

double objective_value(const CachedRun& run, const Objective& objective) {
    return objective_with_grad(run.logits, run.tokens, objective, nullptr);
}

ForwardBackward forward_backward(const Checkpoint& ckpt, const std::vector<int>& tokens, const Objective& objective,
                                 const RunOptions& options, LnGradMode ln_mode, bool param_grads) {
    Engine engine(ckpt, tokens, options);
    ForwardBackward out;
    out.run = engine.forward();
    Mat dlogits;
    out.loss = objective_with_grad(out.run.logits, tokens, objective, &dlogits);
    out.run.loss = out.loss;
    out.grads = engine.backward(dlogits, ln_mode, param_grads);
    return out;
}

double cnp_loss(const Mat& logits, int target) {
    if (logits.rows() == 0) {
        throw InvalidArgument("cnp_loss: empty logits");
    }
    check_target(logits, target);
    return -log_softmax_at(logits.row(logits.rows() - 1).transpose(), target);
}

double cnp_loss(const CachedRun& run, int target) { return cnp_loss(run.logits, target); }

int argmax_last(const Mat& logits) {
    const auto r = logits.rows() - 1;
    int best = 0;
    for (int i = 1; i < logits.cols(); ++i) {
        if (logits(r, i) > logits(r, best)) {
            best = i;
        }
    }
    return best;
}

double cnp_accuracy(const Checkpoint& ckpt, const std::vector<RoleCrossPair>& pairs, Side side) {
    if (pairs.empty()) {
        throw InvalidArgument("cnp_accuracy: empty pair list");
    }
    const auto hits = parallel_map<int>(pairs.size(), [&](std::size_t i) {
        const RoleCrossPair& pr = pairs[i];
        const auto ok = [&](const std::vector<int>& toks, int target) {
            return argmax_last(forward_logits(ckpt, toks)) == target;
        };
        switch (side) {
            case Side::Clean: return ok(pr.clean_tokens, pr.target_clean) ? 1 : 0;
            case Side::Corrupt: return ok(pr.corrupt_tokens, pr.target_corrupt) ? 1 : 0;
            case Side::Both:
                return ok(pr.clean_tokens, pr.target_clean) && ok(pr.corrupt_tokens, pr.target_corrupt) ? 1 : 0;
        }
        return 0;
    });
    double total = 0.0;
    for (const int h : hits) {
        total += h;
    }
    return total / static_cast<double>(pairs.size());
}

std::map<NodeId, Vec> grad_preactivation(const Checkpoint& ckpt, const std::vector<int>& tokens, int target,
                                         LnGradMode ln_mode) {
    const ForwardBackward fb = forward_backward(ckpt, tokens, Objective::cnp(target), {}, ln_mode, false);
    std::map<NodeId, Vec> out;
    const auto& nodes = fb.run.topo->graph.nodes;
    for (std::size_t v = 0; v < nodes.size(); ++v) {
        if (nodes[v].kind == NodeKind::Input) {
            continue;
        }
        if (!fb.grads.node_input[v].allFinite()) {
            throw NumericError("non-finite gradient at node " + nodes[v].str());
        }
        out.emplace(nodes[v], fb.grads.node_input[v]);
    }
    return out;
}

const char* to_string(MetricKind metric) { return metric == MetricKind::Accuracy ? "accuracy" : "neg_loss"; }

MetricKind metric_from_string(const std::string& name) {
    if (name == "accuracy") {
        return MetricKind::Accuracy;
    }
    if (name == "neg_loss") {
        return MetricKind::NegLoss;
    }
    throw InvalidArgument("unknown metric '" + name + "' (expected accuracy or neg_loss)");
}

std::vector<EdgeState> ablation_states(std::size_t n_edges, const Circuit& circuit, AblationMode mode,
                                       bool corrupt) {
    const EdgeState off = corrupt ? EdgeState::Corrupt : EdgeState::Zero;
    const bool keep_circuit = mode == AblationMode::ZeroOutOfCircuit;
    std::vector<EdgeState> states(n_edges, keep_circuit ? off : EdgeState::Active);
    for (const std::uint32_t e : circuit.edges) {
        if (e >= n_edges) {
            throw InvalidArgument("circuit edge " + std::to_string(e) + " outside a graph of " +
                                  std::to_string(n_edges) + " edges");
        }
        states[e] = keep_circuit ? EdgeState::Active : off;
    }
    return states;
}

double ablated_metric(const Checkpoint& ckpt, const RoleCrossPair& pair, const CachedRun& clean,
                      const CachedRun* corrupt, const std::vector<EdgeState>& states, MetricKind metric) {
    RunOptions options;
    options.edge_states = &states;
    options.corrupt_source = corrupt;
    options.frozen_ln = &clean.ln_stats;
    const CachedRun run = forward_cached(ckpt, pair.clean_tokens, options);
    if (metric == MetricKind::Accuracy) {
        return argmax_last(run.logits) == pair.target_clean ? 1.0 : 0.0;
    }
    return -cnp_loss(run, pair.target_clean);
}

double ablated_eval(const Checkpoint& ckpt, const std::vector<RoleCrossPair>& pairs, const AttributionGraph& graph,
                    const Circuit& circuit, AblationMode mode, const AblationOptions& options) {
    if (pairs.empty()) {
        throw InvalidArgument("ablated_eval: empty pair list");
    }
    if (graph.model_config_id != ckpt.config.id()) {
        throw InvalidArgument("circuit graph belongs to model '" + graph.model_config_id + "', checkpoint is '" +
                              ckpt.config.id() + "'");
    }
    for (const RoleCrossPair& pr : pairs) {
        const auto topo = topology(ckpt.config, static_cast<int>(pr.clean_tokens.size()));
        if (topo->n_edges() != graph.edges.size() || topo->n_nodes() != graph.nodes.size()) {
            throw InvalidArgument("circuit graph shape does not match a sequence of length " +
                                  std::to_string(pr.clean_tokens.size()));
        }
    }
    const std::vector<EdgeState> states = ablation_states(graph.edges.size(), circuit, mode, options.corrupt_patch);
    const auto values = parallel_map<double>(pairs.size(), [&](std::size_t i) {
        const RoleCrossPair& pr = pairs[i];
        const CachedRun clean = forward_cached(ckpt, pr.clean_tokens);
        std::optional<CachedRun> corrupt;
        if (options.corrupt_patch) {
            corrupt = forward_cached(ckpt, pr.corrupt_tokens);
        }
        return ablated_metric(ckpt, pr, clean, corrupt ? &*corrupt : nullptr, states, options.metric);
    });
    double total = 0.0;
    for (const double v : values) {
        total += v;
    }
    return total / static_cast<double>(pairs.size());
}

}  // namespace compass
