#include "cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "compass/attribution.hpp"
#include "compass/dataset.hpp"
#include "compass/emergence.hpp"
#include "compass/error.hpp"
#include "compass/graph_io.hpp"
#include "compass/metrics.hpp"
#include "compass/parallel.hpp"

#ifndef COMPASS_VERSION
#define COMPASS_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace compass::cli {

std::string sha256_bytes(const std::string& bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 digest failed");
    }
    std::string hex;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", md[i]);
        hex += buf;
    }
    return hex;
}

std::string sha256_file(const fs::path& path) {
    return sha256_bytes(read_text_file(path));
}

namespace {

std::vector<fs::path> files_under(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (entry.is_regular_file()) {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    return files;
}

}  // namespace

std::string directory_digest(const fs::path& dir) {
    std::string lines;
    for (const fs::path& f : files_under(dir)) {
        const std::string rel = fs::relative(f, dir).generic_string();
        if (rel == "manifest.json") {
            continue;
        }
        lines += rel + " " + sha256_file(f) + "\n";
    }
    return sha256_bytes(lines);
}

std::vector<int> default_checkpoint_grid(int total_steps) {
    static constexpr int kGrid[] = {0, 8, 32, 128, 512, 2000, 8000};
    std::vector<int> out;
    for (const int g : kGrid) {
        const long long v = (static_cast<long long>(g) * total_steps + 4000) / 8000;
        if (out.empty() || out.back() != static_cast<int>(v)) {
            out.push_back(static_cast<int>(v));
        }
    }
    return out;
}

namespace {

struct Manifest {
    std::string command;
    std::vector<std::string> argv;
    json config = json::object();
    std::uint64_t seed = 0;
    std::map<std::string, std::string> inputs;

    void add_input(const fs::path& p) {
        if (fs::is_directory(p)) {
            for (const fs::path& f : files_under(p)) {
                if (f.filename() != "manifest.json") {
                    inputs[f.generic_string()] = sha256_file(f);
                }
            }
        } else {
            inputs[p.generic_string()] = sha256_file(p);
        }
    }
};

void write_manifest(const fs::path& out_dir, const Manifest& m) {
    json outputs = json::object();
    for (const fs::path& f : files_under(out_dir)) {
        const std::string rel = fs::relative(f, out_dir).generic_string();
        if (rel != "manifest.json") {
            outputs[rel] = sha256_file(f);
        }
    }
    json doc;
    doc["tool"] = "compass";
    doc["version"] = COMPASS_VERSION;
    doc["manifest_version"] = 1;
    doc["command"] = m.command;
    doc["argv"] = m.argv;
    doc["config"] = m.config;
    doc["seed"] = m.seed;
    doc["inputs"] = m.inputs;
    doc["outputs"] = outputs;
    doc["directory_digest"] = directory_digest(out_dir);
    write_text_file(out_dir / "manifest.json", doc.dump(2) + "\n");
}

std::string default_data_dir() {
    const char* env = std::getenv("COMPASS_DATA_DIR");
    return env && *env ? env : "data";
}

bool iequals(const std::string& a, const std::string& b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
               return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
           });
}

void require_file(const fs::path& p, const char* what) {
    if (!fs::exists(p)) {
        throw MissingInput(std::string(what) + " '" + p.string() + "' does not exist");
    }
}

// Pairs of one clean role sharing the most common clean length (shorter
// wins ties), optionally dual-correct at `reference`, capped at max_pairs.
std::vector<RoleCrossPair> select_pairs(const std::vector<RoleCrossPair>& all, std::string& role,
                                        const Checkpoint* reference, int max_pairs) {
    if (all.empty()) {
        throw InvalidArgument("pairs file is empty");
    }
    if (role.empty()) {
        role = all.front().role_clean;
    }
    std::vector<RoleCrossPair> pairs;
    for (const RoleCrossPair& p : all) {
        if (iequals(p.role_clean, role)) {
            role = p.role_clean;
            pairs.push_back(p);
        }
    }
    if (pairs.empty()) {
        throw InvalidArgument("no pairs with clean role '" + role + "'");
    }
    std::map<std::size_t, int> by_len;
    for (const RoleCrossPair& p : pairs) {
        ++by_len[p.clean_tokens.size()];
    }
    std::size_t len = by_len.begin()->first;
    for (const auto& [l, c] : by_len) {
        if (c > by_len[len]) {
            len = l;
        }
    }
    std::erase_if(pairs, [&](const RoleCrossPair& p) { return p.clean_tokens.size() != len; });
    if (reference) {
        pairs = filter_dual_correct(pairs, *reference);
        if (pairs.empty()) {
            throw Error("no dual-correct " + role + " pairs at step " + std::to_string(reference->step));
        }
    }
    if (max_pairs > 0 && static_cast<int>(pairs.size()) > max_pairs) {
        pairs.resize(static_cast<std::size_t>(max_pairs));
    }
    return pairs;
}

std::vector<Checkpoint> load_checkpoint_dir(const fs::path& dir) {
    if (!fs::is_directory(dir)) {
        throw MissingInput("checkpoint directory '" + dir.string() + "' does not exist");
    }
    std::vector<Checkpoint> out;
    for (const fs::path& f : files_under(dir)) {
        if (f.extension() == ".ckpt") {
            out.push_back(load_checkpoint(f));
        }
    }
    if (out.empty()) {
        throw MissingInput("no .ckpt files in '" + dir.string() + "'");
    }
    std::sort(out.begin(), out.end(), [](const Checkpoint& a, const Checkpoint& b) { return a.step < b.step; });
    return out;
}

Normalization parse_normalization(const std::string& s) {
    return normalization_from_string(s);
}

json report_json(const SimilarityReport& r) {
    return to_json(r);
}

// Option holders -------------------------------------------------------------

struct GenDataOpts {
    std::string data_dir;
    std::string lexicon;
    std::string templates;
    std::vector<std::string> roles;
    std::vector<std::string> partner_roles;
    int n = 100;
    std::uint64_t seed = 0;
    bool paraphrase = false;
    std::string out;
};

struct TrainOpts {
    std::string data;
    std::string out;
    int steps = 8000;
    std::vector<int> checkpoints;
    int layers = 2;
    int heads = 4;
    int d_model = 32;
    int d_head = 8;
    int d_mlp = 128;
    int max_seq_len = 0;
    std::string positional = "learned";
    double lr = 3e-3;
    int batch = 16;
    std::string optimizer = "adam";
    std::uint64_t seed = 0;
};

struct AttributeOpts {
    std::string checkpoint;
    std::string pairs;
    std::string vocab;
    std::string role;
    int max_pairs = 20;
    bool no_filter = false;
    int m = 5;
    int topk = 200;
    std::string normalization = "total_mass";
    std::string out;
};

struct TimelineOpts {
    std::string checkpoints;
    std::string pairs;
    std::string vocab;
    std::string role;
    int max_pairs = 20;
    std::int64_t reference_step = -1;
    bool no_filter = false;
    int m = 5;
    int topk = 200;
    int topk_nodes = 20;
    std::string metric = "neg_loss";
    std::string normalization = "total_mass";
    int min_seg = 3;
    int n_boot = 1000;
    std::uint64_t seed = 0;
    std::string out;
};

struct EmergeOpts {
    std::string timeline;
    int min_seg = 3;
    int n_boot = 1000;
    std::uint64_t seed = 0;
    double consolidation_threshold = 0.6;
    int persistence = 2;
    std::string consolidation_sets = "nodes";
    std::string ind_mode = "drop";
    std::optional<double> theta;
    std::string out;
};

struct CompareOpts {
    std::string a;
    std::string b;
    int topk_nodes = 30;
    int topk_edges = 30;
    int spectral_edges = 50;
    int eigs = 20;
    std::string out;
};

struct RenderOpts {
    std::string graph;
    double quantile = 0.95;
    int min_edges = 12;
    int topk = 0;
    std::string out;
};

struct ReplayOpts {
    std::string manifest;
    std::string out;
    bool check = false;
};

// Commands -------------------------------------------------------------------

void cmd_gen_data(GenDataOpts o, Manifest& man) {
    if (o.lexicon.empty()) {
        o.lexicon = (fs::path(o.data_dir) / "roles.json").string();
    }
    if (o.templates.empty()) {
        o.templates = (fs::path(o.data_dir) / "templates.json").string();
    }
    require_file(o.lexicon, "lexicon file");
    require_file(o.templates, "template file");
    if (o.n < 1) {
        throw InvalidArgument("--n must be >= 1");
    }
    const std::vector<Lexicon> all = load_lexicons(o.lexicon);
    const std::vector<Template> templates = load_templates(o.templates);
    const auto canonical = [&](std::vector<std::string> names) {
        if (names.empty()) {
            for (const Lexicon& l : all) {
                names.push_back(l.role);
            }
        }
        for (std::string& n : names) {
            n = find_lexicon(all, n).role;
        }
        return names;
    };
    o.roles = canonical(o.roles);
    o.partner_roles = canonical(o.partner_roles);
    std::vector<std::string> used = o.roles;
    used.insert(used.end(), o.partner_roles.begin(), o.partner_roles.end());
    const std::vector<Lexicon> lexicons = select_roles(all, used);
    const Vocabulary vocab = build_vocabulary(lexicons, templates);

    std::vector<std::string> warnings;
    std::vector<RoleCrossPair> pairs;
    for (const std::string& role : o.roles) {
        const std::vector<RoleCrossPair> got = generate_pairs(templates, lexicons, vocab, role, o.n, o.seed, &warnings);
        pairs.insert(pairs.end(), got.begin(), got.end());
    }
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        if (!validate_pair(pairs[i], vocab, lexicons).ok()) {
            throw Error("generated pair " + std::to_string(i) + " failed re-validation");
        }
    }

    const fs::path out(o.out);
    fs::create_directories(out);
    save_vocabulary(vocab, out / "vocab.txt");
    save_corpus(generate_corpus(templates, lexicons), out / "corpus.txt");
    save_pairs(pairs, out / "pairs.jsonl");
    json stats = json::parse(stats_to_json(dataset_stats(pairs)));
    if (o.paraphrase) {
        const std::vector<RoleCrossPair> controls =
            generate_paraphrase_controls(pairs, lexicons, vocab, o.seed, &warnings);
        save_pairs(controls, out / "paraphrase.jsonl");
        stats["paraphrase_controls"] = controls.size();
    }
    stats["requested_per_role"] = o.n;
    stats["vocab_size"] = vocab.size();
    stats["warnings"] = warnings;
    write_text_file(out / "stats.json", stats.dump(2) + "\n");
    for (std::size_t i = 0; i < warnings.size() && i < 5; ++i) {
        std::cerr << "warning: " << warnings[i] << "\n";
    }
    if (warnings.size() > 5) {
        std::cerr << "warning: " << warnings.size() - 5 << " more, see stats.json\n";
    }

    man.add_input(o.lexicon);
    man.add_input(o.templates);
    man.seed = o.seed;
    man.config = {{"lexicon", o.lexicon},        {"templates", o.templates}, {"roles", o.roles},
                  {"partner_roles", o.partner_roles}, {"n", o.n},            {"seed", o.seed},
                  {"paraphrase", o.paraphrase}, {"out", o.out}};
    write_manifest(out, man);
}

void cmd_train(TrainOpts o, Manifest& man) {
    const fs::path data(o.data);
    require_file(data / "vocab.txt", "vocabulary file");
    require_file(data / "corpus.txt", "corpus file");
    const Vocabulary vocab = load_vocabulary(data / "vocab.txt");
    const std::vector<std::vector<int>> docs = tokenize_corpus(load_corpus(data / "corpus.txt"), vocab);
    if (o.steps < 0) {
        throw InvalidArgument("--steps must be >= 0");
    }
    ModelConfig c;
    c.n_layers = o.layers;
    c.n_heads = o.heads;
    c.d_model = o.d_model;
    c.d_head = o.d_head;
    c.d_mlp = o.d_mlp;
    c.vocab_size = vocab.size();
    c.positional = positional_from_string(o.positional);
    if (o.max_seq_len <= 0) {
        std::size_t longest = 1;
        for (const auto& d : docs) {
            longest = std::max(longest, d.size());
        }
        o.max_seq_len = static_cast<int>(longest);
    }
    c.max_seq_len = o.max_seq_len;
    c.validate();
    for (const std::string& w : c.warnings()) {
        std::cerr << "warning: " << w << "\n";
    }
    if (o.checkpoints.empty()) {
        o.checkpoints = default_checkpoint_grid(o.steps);
    }
    std::sort(o.checkpoints.begin(), o.checkpoints.end());
    o.checkpoints.erase(std::unique(o.checkpoints.begin(), o.checkpoints.end()), o.checkpoints.end());
    if (o.checkpoints.front() < 0 || o.checkpoints.back() > o.steps) {
        throw InvalidArgument("--checkpoints must lie in [0, --steps]");
    }
    TrainSchedule s;
    s.total_steps = o.steps;
    s.checkpoint_steps = o.checkpoints;
    s.lr = o.lr;
    s.batch_size = o.batch;
    if (o.optimizer == "adam") {
        s.optimizer = Optimizer::Adam;
    } else if (o.optimizer == "sgd") {
        s.optimizer = Optimizer::Sgd;
    } else {
        throw InvalidArgument("--optimizer must be adam or sgd");
    }

    const fs::path out(o.out);
    fs::create_directories(out);
    std::vector<TrainLogEntry> log;
    train(c, docs, s, o.seed, out, &log);
    std::string csv = "step,loss\n";
    for (const TrainLogEntry& e : log) {
        csv += std::to_string(e.step) + "," + format_double(e.loss) + "\n";
    }
    write_text_file(out / "train_log.csv", csv);

    man.add_input(data / "vocab.txt");
    man.add_input(data / "corpus.txt");
    man.seed = o.seed;
    man.config = {{"data", o.data},
                  {"steps", o.steps},
                  {"checkpoints", o.checkpoints},
                  {"model", {{"n_layers", c.n_layers},
                             {"n_heads", c.n_heads},
                             {"d_model", c.d_model},
                             {"d_head", c.d_head},
                             {"d_mlp", c.d_mlp},
                             {"vocab_size", c.vocab_size},
                             {"max_seq_len", c.max_seq_len},
                             {"positional", to_string(c.positional)}}},
                  {"lr", o.lr},
                  {"batch", o.batch},
                  {"optimizer", o.optimizer},
                  {"seed", o.seed},
                  {"out", o.out}};
    write_manifest(out, man);
}

void cmd_attribute(AttributeOpts o, Manifest& man) {
    require_file(o.checkpoint, "checkpoint");
    require_file(o.pairs, "pairs file");
    require_file(o.vocab, "vocabulary file");
    const Checkpoint ckpt = load_checkpoint(o.checkpoint);
    const Vocabulary vocab = load_vocabulary(o.vocab);
    const std::vector<RoleCrossPair> pairs =
        select_pairs(load_pairs(o.pairs, vocab), o.role, o.no_filter ? nullptr : &ckpt, o.max_pairs);
    IgConfig cfg;
    cfg.m = o.m;
    cfg.top_k_edges = o.topk;
    cfg.normalization = parse_normalization(o.normalization);
    cfg.validate();
    RoleAttribution ra = aggregate_role(ckpt, pairs, cfg);
    extract_circuit(ra.table.graph, o.topk);

    const fs::path out(o.out);
    fs::create_directories(out);
    export_graph(ra.table.graph, out / graph_filename(ckpt.step));
    write_text_file(out / "heatmap.csv", heatmap_csv(ra.heatmap));
    save_pairs(pairs, out / "pairs_used.jsonl");

    man.add_input(o.checkpoint);
    man.add_input(o.pairs);
    man.add_input(o.vocab);
    man.config = {{"checkpoint", o.checkpoint}, {"pairs", o.pairs},         {"vocab", o.vocab},
                  {"role", o.role},             {"max_pairs", o.max_pairs}, {"filter", !o.no_filter},
                  {"m", o.m},                   {"topk", o.topk},           {"normalization", o.normalization},
                  {"n_pairs_used", pairs.size()}, {"out", o.out}};
    write_manifest(out, man);
}

void cmd_timeline(TimelineOpts o, Manifest& man) {
    require_file(o.pairs, "pairs file");
    require_file(o.vocab, "vocabulary file");
    const std::vector<Checkpoint> ckpts = load_checkpoint_dir(o.checkpoints);
    const Vocabulary vocab = load_vocabulary(o.vocab);
    const Checkpoint* reference = &ckpts.back();
    if (o.reference_step >= 0) {
        const auto it = std::find_if(ckpts.begin(), ckpts.end(),
                                     [&](const Checkpoint& c) { return c.step == o.reference_step; });
        if (it == ckpts.end()) {
            throw InvalidArgument("--reference-step " + std::to_string(o.reference_step) + " has no checkpoint");
        }
        reference = &*it;
    }
    o.reference_step = reference->step;
    const std::vector<RoleCrossPair> pairs =
        select_pairs(load_pairs(o.pairs, vocab), o.role, o.no_filter ? nullptr : reference, o.max_pairs);

    CompassConfig cfg;
    cfg.ig.m = o.m;
    cfg.ig.top_k_edges = o.topk;
    cfg.ig.normalization = parse_normalization(o.normalization);
    cfg.top_k_nodes = o.topk_nodes;
    cfg.ablation.metric = metric_from_string(o.metric);
    cfg.emergence.min_seg = o.min_seg;
    cfg.emergence.n_boot = o.n_boot;
    cfg.emergence.seed = o.seed;

    const fs::path out(o.out);
    fs::create_directories(out);
    save_pairs(pairs, out / "pairs_used.jsonl");
    run_compass(ckpts, pairs, o.role, cfg, out);

    man.add_input(o.checkpoints);
    man.add_input(o.pairs);
    man.add_input(o.vocab);
    man.seed = o.seed;
    man.config = {{"checkpoints", o.checkpoints}, {"pairs", o.pairs},
                  {"vocab", o.vocab},             {"role", o.role},
                  {"max_pairs", o.max_pairs},     {"reference_step", o.reference_step},
                  {"filter", !o.no_filter},       {"m", o.m},
                  {"topk", o.topk},               {"topk_nodes", o.topk_nodes},
                  {"metric", o.metric},           {"normalization", o.normalization},
                  {"min_seg", o.min_seg},         {"n_boot", o.n_boot},
                  {"seed", o.seed},               {"n_pairs_used", pairs.size()},
                  {"out", o.out}};
    write_manifest(out, man);
}

void cmd_emerge(EmergeOpts o, Manifest& man) {
    require_file(o.timeline, "timeline file");
    const Timeline t = timeline_from_csv(read_text_file(o.timeline));
    EmergenceConfig cfg;
    cfg.min_seg = o.min_seg;
    cfg.n_boot = o.n_boot;
    cfg.seed = o.seed;
    cfg.consolidation_threshold = o.consolidation_threshold;
    cfg.consolidation_persistence = o.persistence;
    if (o.consolidation_sets != "nodes" && o.consolidation_sets != "edges") {
        throw InvalidArgument("--consolidation-sets must be nodes or edges");
    }
    cfg.consolidation_edge_sets = o.consolidation_sets == "edges";
    cfg.indispensability.mode = indispensability_mode_from_string(o.ind_mode);
    cfg.indispensability.theta = o.theta;
    const EmergenceReport r = analyze_emergence(t, cfg);

    const fs::path out(o.out);
    fs::create_directories(out);
    write_text_file(out / "emergence.json", to_json(r, t.role).dump(2) + "\n");

    man.add_input(o.timeline);
    man.seed = o.seed;
    man.config = {{"timeline", o.timeline},
                  {"min_seg", o.min_seg},
                  {"n_boot", o.n_boot},
                  {"seed", o.seed},
                  {"consolidation_threshold", o.consolidation_threshold},
                  {"persistence", o.persistence},
                  {"consolidation_sets", o.consolidation_sets},
                  {"ind_mode", o.ind_mode},
                  {"theta", o.theta ? json(*o.theta) : json(nullptr)},
                  {"out", o.out}};
    write_manifest(out, man);
}

std::map<std::int64_t, fs::path> graph_files(const fs::path& dir) {
    std::map<std::int64_t, fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        const std::string prefix = "graph_step_";
        if (name.rfind(prefix, 0) == 0 && entry.path().extension() == ".json") {
            const std::string num = name.substr(prefix.size(), name.size() - prefix.size() - 5);
            try {
                out[std::stoll(num)] = entry.path();
            } catch (const std::exception&) {
            }
        }
    }
    return out;
}

void cmd_compare(CompareOpts o, Manifest& man) {
    require_file(o.a, "input");
    require_file(o.b, "input");
    json doc;
    const auto name = [](const std::string& p) {
        fs::path n = fs::path(p).lexically_normal();
        return (n.has_filename() ? n.filename() : n.parent_path().filename()).string();
    };
    doc["a"] = name(o.a);
    doc["b"] = name(o.b);
    if (fs::is_directory(o.a) != fs::is_directory(o.b)) {
        throw InvalidArgument("compare takes two graph files or two timeline directories");
    }
    if (!fs::is_directory(o.a)) {
        doc["report"] = report_json(compare_graphs(import_graph(o.a), import_graph(o.b), o.topk_nodes, o.topk_edges,
                                                   o.spectral_edges, o.eigs));
    } else {
        const auto fa = graph_files(o.a);
        const auto fb = graph_files(o.b);
        json per_step = json::array();
        double nj = 0.0;
        double ej = 0.0;
        double sd = 0.0;
        int n = 0;
        for (const auto& [step, path] : fa) {
            if (!fb.count(step)) {
                continue;
            }
            const SimilarityReport r = compare_graphs(import_graph(path), import_graph(fb.at(step)), o.topk_nodes,
                                                      o.topk_edges, o.spectral_edges, o.eigs);
            json row = report_json(r);
            row["step"] = step;
            per_step.push_back(row);
            nj += r.node_jaccard;
            ej += r.edge_jaccard;
            sd += r.spectral_distance;
            ++n;
        }
        if (n == 0) {
            throw InvalidArgument("the two directories share no checkpoint step");
        }
        doc["per_step"] = per_step;
        doc["mean_over_common_steps"] = {{"node_jaccard", nj / n},
                                         {"edge_jaccard", ej / n},
                                         {"spectral_distance", sd / n},
                                         {"n_steps", n}};
    }
    const fs::path out(o.out);
    fs::create_directories(out);
    write_text_file(out / "similarity.json", doc.dump(2) + "\n");

    man.add_input(o.a);
    man.add_input(o.b);
    man.config = {{"a", o.a},
                  {"b", o.b},
                  {"topk_nodes", o.topk_nodes},
                  {"topk_edges", o.topk_edges},
                  {"spectral_edges", o.spectral_edges},
                  {"eigs", o.eigs},
                  {"out", o.out}};
    write_manifest(out, man);
}

void cmd_render(RenderOpts o, Manifest& man) {
    require_file(o.graph, "graph file");
    AttributionGraph g = import_graph(o.graph);
    if (o.topk > 0) {
        extract_circuit(g, o.topk);
    }
    const fs::path out(o.out);
    fs::create_directories(out);
    export_causal_flow(g, o.quantile, o.min_edges, out / "causal_flow.dot");
    man.add_input(o.graph);
    man.config = {{"graph", o.graph},
                  {"quantile", o.quantile},
                  {"min_edges", o.min_edges},
                  {"topk", o.topk},
                  {"out", o.out}};
    write_manifest(out, man);
}

int cmd_replay(const ReplayOpts& o, int threads) {
    require_file(o.manifest, "manifest");
    json doc;
    try {
        doc = json::parse(read_text_file(o.manifest));
    } catch (const json::exception& e) {
        throw ParseError("manifest: " + std::string(e.what()));
    }
    if (!doc.contains("manifest_version") || !doc.contains("argv") || !doc.contains("inputs")) {
        throw ParseError("manifest: missing manifest_version, argv or inputs");
    }
    if (doc["manifest_version"] != 1) {
        throw VersionMismatch("manifest version " + doc["manifest_version"].dump() + " is not supported (expected 1)");
    }
    for (const auto& [path, digest] : doc["inputs"].items()) {
        require_file(path, "manifest input");
        if (sha256_file(path) != digest.get<std::string>()) {
            throw InvalidArgument("input '" + path + "' changed since the manifest was written");
        }
    }
    std::vector<std::string> argv = doc["argv"].get<std::vector<std::string>>();
    std::string out_dir = doc["config"].value("out", "");
    if (!o.out.empty()) {
        bool replaced = false;
        for (std::size_t i = 0; i < argv.size(); ++i) {
            if (argv[i] == "--out" && i + 1 < argv.size()) {
                argv[i + 1] = o.out;
                replaced = true;
            } else if (argv[i].rfind("--out=", 0) == 0) {
                argv[i] = "--out=" + o.out;
                replaced = true;
            }
        }
        if (!replaced) {
            argv.push_back("--out");
            argv.push_back(o.out);
        }
        out_dir = o.out;
    }
    argv.insert(argv.begin(), {"--threads", std::to_string(threads)});
    const int code = run(argv);
    if (code != kOk || !o.check) {
        return code;
    }
    const std::string got = directory_digest(out_dir);
    if (got != doc.value("directory_digest", "")) {
        std::cerr << "replay: output digest " << got << " differs from the manifest\n";
        return kRuntimeFailure;
    }
    std::cout << "replay: outputs match the manifest (" << got << ")\n";
    return kOk;
}

std::vector<std::string> strip_threads(const std::vector<std::string>& args) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--threads" || args[i] == "-j") {
            ++i;
            continue;
        }
        if (args[i].rfind("--threads=", 0) == 0) {
            continue;
        }
        out.push_back(args[i]);
    }
    return out;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"compass: circuit emergence analysis for small transformers"};
    app.set_version_flag("--version", COMPASS_VERSION);
    app.set_config("--config", "", "TOML configuration file; command-line flags override its values");
    app.require_subcommand(1);
    app.fallthrough();
    int threads = 0;
    app.add_option("--threads,-j", threads, "Worker threads (0 = all cores); outputs do not depend on it")
        ->capture_default_str();

    GenDataOpts gd;
    gd.data_dir = default_data_dir();
    auto* gen = app.add_subcommand("gen-data", "Generate role-cross pairs, vocabulary and training corpus");
    gen->add_option("--data-dir", gd.data_dir, "Directory with roles.json and templates.json ($COMPASS_DATA_DIR)")
        ->capture_default_str();
    gen->add_option("--lexicon", gd.lexicon, "Role lexicon file (default <data-dir>/roles.json)");
    gen->add_option("--templates", gd.templates, "Template file (default <data-dir>/templates.json)");
    gen->add_option("--roles", gd.roles, "Clean roles to generate (default: all)")->delimiter(',');
    gen->add_option("--partner-roles", gd.partner_roles, "Roles available as corrupt partners (default: all)")
        ->delimiter(',');
    gen->add_option("--n", gd.n, "Pairs per role")->capture_default_str();
    gen->add_option("--seed", gd.seed, "Random seed")->capture_default_str();
    gen->add_flag("--paraphrase", gd.paraphrase, "Also write within-role paraphrase controls");
    gen->add_option("--out", gd.out, "Output directory")->required();

    TrainOpts tr;
    auto* trn = app.add_subcommand("train", "Train a model and write checkpoints");
    trn->add_option("--data", tr.data, "gen-data output directory")->required();
    trn->add_option("--out", tr.out, "Checkpoint directory")->required();
    trn->add_option("--steps", tr.steps, "Total optimizer steps")->capture_default_str();
    trn->add_option("--checkpoints", tr.checkpoints, "Checkpoint steps (default: log-spaced grid)")->delimiter(',');
    trn->add_option("--layers", tr.layers)->capture_default_str();
    trn->add_option("--heads", tr.heads)->capture_default_str();
    trn->add_option("--d-model", tr.d_model)->capture_default_str();
    trn->add_option("--d-head", tr.d_head)->capture_default_str();
    trn->add_option("--d-mlp", tr.d_mlp)->capture_default_str();
    trn->add_option("--max-seq-len", tr.max_seq_len, "0 = longest corpus document")->capture_default_str();
    trn->add_option("--positional", tr.positional)->check(CLI::IsMember({"learned", "sinusoidal"}))->capture_default_str();
    trn->add_option("--lr", tr.lr)->capture_default_str();
    trn->add_option("--batch", tr.batch)->capture_default_str();
    trn->add_option("--optimizer", tr.optimizer)->check(CLI::IsMember({"adam", "sgd"}))->capture_default_str();
    trn->add_option("--seed", tr.seed)->capture_default_str();

    AttributeOpts at;
    auto* att = app.add_subcommand("attribute", "EAP-IG attribution graph and circuit at one checkpoint");
    att->add_option("--checkpoint", at.checkpoint)->required();
    att->add_option("--pairs", at.pairs)->required();
    att->add_option("--vocab", at.vocab)->required();
    att->add_option("--role", at.role, "Clean role (default: the first pair's)");
    att->add_option("--max-pairs", at.max_pairs, "0 = all")->capture_default_str();
    att->add_flag("--no-filter", at.no_filter, "Keep pairs the model gets wrong");
    att->add_option("--m", at.m, "Integrated-gradient steps")->capture_default_str();
    att->add_option("--topk", at.topk, "Circuit size in edges")->capture_default_str();
    att->add_option("--normalization", at.normalization)->check(CLI::IsMember({"total_mass", "cosine"}))->capture_default_str();
    att->add_option("--out", at.out)->required();

    TimelineOpts tl;
    auto* tim = app.add_subcommand("timeline", "Attribution, circuits and metrics across checkpoints");
    tim->add_option("--checkpoints", tl.checkpoints, "Checkpoint directory")->required();
    tim->add_option("--pairs", tl.pairs)->required();
    tim->add_option("--vocab", tl.vocab)->required();
    tim->add_option("--role", tl.role, "Clean role (default: the first pair's)");
    tim->add_option("--max-pairs", tl.max_pairs, "0 = all")->capture_default_str();
    tim->add_option("--reference-step", tl.reference_step, "Checkpoint for the dual-correct filter (default: last)");
    tim->add_flag("--no-filter", tl.no_filter);
    tim->add_option("--m", tl.m)->capture_default_str();
    tim->add_option("--topk", tl.topk)->capture_default_str();
    tim->add_option("--topk-nodes", tl.topk_nodes, "Top-K node set size for stability")->capture_default_str();
    tim->add_option("--metric", tl.metric)->check(CLI::IsMember({"neg_loss", "accuracy"}))->capture_default_str();
    tim->add_option("--normalization", tl.normalization)->check(CLI::IsMember({"total_mass", "cosine"}))->capture_default_str();
    tim->add_option("--min-seg", tl.min_seg)->capture_default_str();
    tim->add_option("--n-boot", tl.n_boot)->capture_default_str();
    tim->add_option("--seed", tl.seed)->capture_default_str();
    tim->add_option("--out", tl.out)->required();

    EmergeOpts em;
    auto* eme = app.add_subcommand("emerge", "Emergence markers and change-points from a timeline");
    eme->add_option("--timeline", em.timeline)->required();
    eme->add_option("--min-seg", em.min_seg)->capture_default_str();
    eme->add_option("--n-boot", em.n_boot)->capture_default_str();
    eme->add_option("--seed", em.seed)->capture_default_str();
    eme->add_option("--consolidation-threshold", em.consolidation_threshold)->capture_default_str();
    eme->add_option("--persistence", em.persistence)->capture_default_str();
    eme->add_option("--consolidation-sets", em.consolidation_sets)->check(CLI::IsMember({"nodes", "edges"}))->capture_default_str();
    eme->add_option("--ind-mode", em.ind_mode)->check(CLI::IsMember({"drop", "sign"}))->capture_default_str();
    eme->add_option("--theta", em.theta, "Fixed drop threshold (default: baseline mean + std)");
    eme->add_option("--out", em.out)->required();

    CompareOpts cm;
    auto* cmp = app.add_subcommand("compare", "Similarity of two graphs or two timeline directories");
    cmp->add_option("a", cm.a)->required();
    cmp->add_option("b", cm.b)->required();
    cmp->add_option("--topk-nodes", cm.topk_nodes)->capture_default_str();
    cmp->add_option("--topk-edges", cm.topk_edges)->capture_default_str();
    cmp->add_option("--spectral-edges", cm.spectral_edges)->capture_default_str();
    cmp->add_option("--eigs", cm.eigs)->capture_default_str();
    cmp->add_option("--out", cm.out)->required();

    RenderOpts rd;
    auto* ren = app.add_subcommand("render", "Causal-flow DOT export of a circuit");
    ren->add_option("--graph", rd.graph)->required();
    ren->add_option("--quantile", rd.quantile)->capture_default_str();
    ren->add_option("--min-edges", rd.min_edges)->capture_default_str();
    ren->add_option("--topk", rd.topk, "Re-extract a circuit of this size (0 = use the stored one)")
        ->capture_default_str();
    ren->add_option("--out", rd.out)->required();

    ReplayOpts rp;
    auto* rep = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
    rep->add_option("manifest", rp.manifest)->required();
    rep->add_option("--out", rp.out, "Write to this directory instead");
    rep->add_flag("--check", rp.check, "Fail unless the outputs match the manifest digests");

    std::vector<std::string> argv_store = {"compass"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (std::string& s : argv_store) {
        argv.push_back(s.data());
    }
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInputError;
    }

    set_num_threads(threads > 0 ? threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));
    Manifest man;
    man.argv = strip_threads(args);
    if (const CLI::Option* cfg = app.get_config_ptr(); cfg && cfg->count() > 0) {
        const std::string path = cfg->as<std::string>();
        if (!fs::exists(path)) {
            std::cerr << "error: config file '" << path << "' does not exist\n";
            return kInputError;
        }
        man.add_input(path);
    }
    try {
        if (gen->parsed()) {
            man.command = "gen-data";
            cmd_gen_data(gd, man);
        } else if (trn->parsed()) {
            man.command = "train";
            cmd_train(tr, man);
        } else if (att->parsed()) {
            man.command = "attribute";
            cmd_attribute(at, man);
        } else if (tim->parsed()) {
            man.command = "timeline";
            cmd_timeline(tl, man);
        } else if (eme->parsed()) {
            man.command = "emerge";
            cmd_emerge(em, man);
        } else if (cmp->parsed()) {
            man.command = "compare";
            cmd_compare(cm, man);
        } else if (ren->parsed()) {
            man.command = "render";
            cmd_render(rd, man);
        } else if (rep->parsed()) {
            return cmd_replay(rp, threads);
        }
    } catch (const VersionMismatch& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kVersionMismatch;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kSchemaViolation;
    } catch (const MissingInput& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInputError;
    } catch (const InvalidArgument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kInputError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntimeFailure;
    }
    return kOk;
}

}  // namespace compass::cli
