#include "compass/emergence.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <sstream>

#include "compass/error.hpp"
#include "compass/graph_io.hpp"
#include "compass/parallel.hpp"
#include "compass/rng.hpp"

namespace compass {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct LineFit {
    double sse = 0.0;
    double intercept = 0.0;
    double slope = 0.0;
};

// Least-squares line on [lo, hi).
LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y, std::size_t lo, std::size_t hi) {
    const double n = static_cast<double>(hi - lo);
    double mx = 0.0;
    double my = 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0;
    double sxy = 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    LineFit f;
    f.slope = sxx > 0.0 ? sxy / sxx : 0.0;
    f.intercept = my - f.slope * mx;
    for (std::size_t i = lo; i < hi; ++i) {
        const double r = y[i] - (my + f.slope * (x[i] - mx));
        f.sse += r * r;
    }
    return f;
}

bool has_two_distinct(const std::vector<double>& x, std::size_t lo, std::size_t hi) {
    return hi > lo && x[lo] != x[hi - 1];
}

struct Split {
    ChangePoint point;
    LineFit left;
    LineFit right;
};

// Best split or nullopt when none is admissible.
std::optional<Split> best_split(const std::vector<double>& x, const std::vector<double>& y, int min_seg) {
    const std::size_t n = x.size();
    const auto m = static_cast<std::size_t>(min_seg);
    double my = 0.0;
    for (const double v : y) {
        my += v;
    }
    my /= static_cast<double>(n);
    double sst = 0.0;
    for (const double v : y) {
        sst += (v - my) * (v - my);
    }
    const double tol = 1e-12 * sst;
    std::optional<Split> best;
    double best_sse = 0.0;
    for (std::size_t s = m; s + m <= n; ++s) {
        if (x[s - 1] == x[s] || !has_two_distinct(x, 0, s) || !has_two_distinct(x, s, n)) {
            continue;
        }
        const LineFit left = fit_line(x, y, 0, s);
        const LineFit right = fit_line(x, y, s, n);
        const double sse = left.sse + right.sse;
        if (!best || sse < best_sse - tol) {
            best_sse = sse;
            Split sp;
            sp.point.split = s;
            sp.point.t_hat = x[s];
            sp.point.r_squared = sst > 0.0 ? std::clamp(1.0 - sse / sst, 0.0, 1.0) : 1.0;
            sp.left = left;
            sp.right = right;
            best = sp;
        }
    }
    return best;
}

// Maps a resample's split back to the original grid. The break lies
// between the last left x and the first right x; when the two fitted lines
// cross inside that gap the grid point nearest the crossing is taken (ties
// to the right), otherwise the first right x.
double grid_split(const std::vector<double>& grid, const std::vector<double>& bx, const Split& sp) {
    const double lo = bx[sp.point.split - 1];
    const double hi = bx[sp.point.split];
    const double dslope = sp.left.slope - sp.right.slope;
    if (dslope == 0.0) {
        return hi;
    }
    const double cross = (sp.right.intercept - sp.left.intercept) / dslope;
    if (!(cross >= lo && cross <= hi)) {
        return hi;
    }
    double best = hi;
    for (const double g : grid) {
        if (g >= lo && g <= hi && std::abs(g - cross) <= std::abs(best - cross)) {
            best = g;
            if (g > cross) {
                break;
            }
        }
    }
    return best;
}

void check_series(const std::vector<double>& x, const std::vector<double>& y, int min_seg) {
    if (min_seg < 2) {
        throw InvalidArgument("change-point: min_seg must be >= 2");
    }
    if (x.size() != y.size()) {
        throw InvalidArgument("change-point: x and y differ in length");
    }
    if (x.size() < 2 * static_cast<std::size_t>(min_seg)) {
        throw InvalidArgument("change-point: series of length " + std::to_string(x.size()) +
                              " is shorter than 2 * min_seg = " + std::to_string(2 * min_seg));
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i]) || !std::isfinite(y[i])) {
            throw InvalidArgument("change-point: non-finite value at index " + std::to_string(i));
        }
        if (i > 0 && x[i] < x[i - 1]) {
            throw InvalidArgument("change-point: x must be sorted ascending");
        }
    }
}

std::string num(double v) {
    return std::isfinite(v) ? format_double(v) : "nan";
}

double parse_num(const std::string& s, std::size_t line, const char* column) {
    if (s.empty() || s == "nan" || s == "-nan") {
        return kNaN;
    }
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size()) {
        throw ParseError("timeline line " + std::to_string(line) + ": bad value '" + s + "' in column " + column);
    }
    return v;
}

const char* kTimelineHeader =
    "role,step,faithfulness,stability,node_stability,m_full,m_circuit,m_empty,m_complement,"
    "top5_mass,top10_mass,top20_mass,coverage_80,coverage_90,coverage_95,gini,mass_nodes,"
    "n_nodes,n_edges,n_simple_edges,density,reciprocity,avg_out_degree,avg_weighted_out_degree,"
    "frac_Q,frac_K,frac_V,frac_Flow,n_bridges,layer_span,avg_betweenness";

constexpr double kCoverageLevels[] = {0.80, 0.90, 0.95};
constexpr int kTopK[] = {5, 10, 20};

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) {
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') {
        out.emplace_back();
    }
    return out;
}

nlohmann::json opt_step(const std::optional<std::int64_t>& s) {
    return s ? nlohmann::json(*s) : nlohmann::json(nullptr);
}

nlohmann::json threshold_json(const Threshold& t, const std::string& label) {
    return {{"value", t.value},
            {"baseline_mean", t.baseline_mean},
            {"baseline_std", t.baseline_std},
            {"degenerate_baseline", t.degenerate},
            {"definition", label}};
}

nlohmann::json changepoint_json(const std::optional<ChangePoint>& cp) {
    if (!cp) {
        return nullptr;
    }
    return {{"t_hat", cp->t_hat},
            {"ci_low", cp->ci_low},
            {"ci_high", cp->ci_high},
            {"r_squared", cp->r_squared},
            {"bootstrap_used", cp->bootstrap_used},
            {"bootstrap_skipped", cp->bootstrap_skipped}};
}

[[noreturn]] void rethrow_at_step(std::int64_t step) {
    const std::string prefix = "step " + std::to_string(step) + ": ";
    try {
        throw;
    } catch (const InvalidArgument& e) {
        throw InvalidArgument(prefix + e.what());
    } catch (const VersionMismatch& e) {
        throw VersionMismatch(prefix + e.what());
    } catch (const UndefinedMetric& e) {
        throw UndefinedMetric(prefix + e.what());
    } catch (const ParseError& e) {
        throw ParseError(prefix + e.what());
    } catch (const MissingInput& e) {
        throw MissingInput(prefix + e.what());
    } catch (const NumericError& e) {
        throw NumericError(prefix + e.what());
    } catch (const std::exception& e) {
        throw Error(prefix + e.what());
    }
}

}  // namespace

ChangePoint fit_piecewise(const std::vector<double>& x, const std::vector<double>& y, int min_seg) {
    check_series(x, y, min_seg);
    const std::optional<Split> sp = best_split(x, y, min_seg);
    if (!sp) {
        throw InvalidArgument("change-point: no admissible split");
    }
    ChangePoint out = sp->point;
    out.ci_low = out.ci_high = out.t_hat;
    return out;
}

void bootstrap_ci(const std::vector<double>& x, const std::vector<double>& y, ChangePoint& point, int n_boot,
                  int min_seg, std::uint64_t seed, std::vector<double>* replicate_splits) {
    check_series(x, y, min_seg);
    if (n_boot < 1) {
        throw InvalidArgument("bootstrap: n_boot must be >= 1");
    }
    const std::size_t n = x.size();
    const std::vector<double> splits = parallel_map<double>(static_cast<std::size_t>(n_boot), [&](std::size_t b) {
        Rng rng(derive_seed(seed, "bootstrap", b));
        std::vector<std::size_t> idx(n);
        std::vector<double> bx(n);
        std::vector<double> by(n);
        for (int attempt = 0; attempt <= 10; ++attempt) {
            for (std::size_t i = 0; i < n; ++i) {
                idx[i] = rng.uniform_index(n);
            }
            // x is sorted, so sorting indices sorts by x with a fixed order among ties.
            std::sort(idx.begin(), idx.end());
            for (std::size_t i = 0; i < n; ++i) {
                bx[i] = x[idx[i]];
                by[i] = y[idx[i]];
            }
            if (const auto sp = best_split(bx, by, min_seg)) {
                return grid_split(x, bx, *sp);
            }
        }
        return kNaN;
    });
    if (replicate_splits) {
        *replicate_splits = splits;
    }
    std::vector<double> kept;
    for (const double s : splits) {
        if (!std::isnan(s)) {
            kept.push_back(s);
        }
    }
    point.bootstrap_used = static_cast<int>(kept.size());
    point.bootstrap_skipped = n_boot - point.bootstrap_used;
    if (kept.empty()) {
        point.ci_low = point.ci_high = point.t_hat;
        return;
    }
    std::sort(kept.begin(), kept.end());
    const double last = static_cast<double>(kept.size() - 1);
    point.ci_low = std::min(kept[static_cast<std::size_t>(std::floor(0.025 * last))], point.t_hat);
    point.ci_high = std::max(kept[static_cast<std::size_t>(std::ceil(0.975 * last))], point.t_hat);
}

ChangePoint fit_changepoint(const std::vector<double>& x, const std::vector<double>& y, int min_seg, int n_boot,
                            std::uint64_t seed) {
    ChangePoint cp = fit_piecewise(x, y, min_seg);
    bootstrap_ci(x, y, cp, n_boot, min_seg, seed);
    return cp;
}

void Timeline::validate() const {
    const std::size_t n = steps.size();
    for (std::size_t i = 1; i < n; ++i) {
        if (steps[i] <= steps[i - 1]) {
            throw InvalidArgument("timeline: steps must be strictly increasing");
        }
    }
    const auto need = [&](std::size_t got, std::size_t want, const char* what) {
        if (got != want) {
            throw InvalidArgument(std::string("timeline: ") + what + " has " + std::to_string(got) +
                                  " entries, expected " + std::to_string(want));
        }
    };
    need(faithfulness.size(), n, "faithfulness");
    need(stability.size(), n ? n - 1 : 0, "stability");
    need(node_stability.size(), n ? n - 1 : 0, "node_stability");
    need(sparsity.size(), n, "sparsity");
    need(structural.size(), n, "structural");
}

std::string timeline_csv(const Timeline& t) {
    t.validate();
    const auto opt = [](const std::vector<double>& v, std::size_t i) { return i < v.size() ? num(v[i]) : "nan"; };
    std::string out = std::string(kTimelineHeader) + "\n";
    for (std::size_t i = 0; i < t.size(); ++i) {
        const SparsityReport& sp = t.sparsity[i];
        const StructuralReport& st = t.structural[i];
        std::vector<std::string> cells = {t.role,
                                          std::to_string(t.steps[i]),
                                          num(t.faithfulness[i]),
                                          i ? num(t.stability[i - 1]) : "",
                                          i ? num(t.node_stability[i - 1]) : "",
                                          opt(t.full_metric, i),
                                          opt(t.circuit_metric, i),
                                          opt(t.empty_metric, i),
                                          opt(t.complement_metric, i)};
        for (const int k : kTopK) {
            cells.push_back(sp.topk_mass.count(k) ? num(sp.topk_mass.at(k)) : "nan");
        }
        for (const double p : kCoverageLevels) {
            cells.push_back(sp.coverage.count(p) ? std::to_string(sp.coverage.at(p)) : "nan");
        }
        cells.push_back(num(sp.gini));
        cells.push_back(std::to_string(sp.n_nodes));
        cells.push_back(std::to_string(st.n_nodes));
        cells.push_back(std::to_string(st.n_edges));
        cells.push_back(std::to_string(st.n_simple_edges));
        cells.push_back(num(st.density));
        cells.push_back(num(st.reciprocity));
        cells.push_back(num(st.avg_out_degree));
        cells.push_back(num(st.avg_weighted_out_degree));
        for (const EdgeKind k : kAllEdgeKinds) {
            cells.push_back(st.edge_type_fractions.count(k) ? num(st.edge_type_fractions.at(k)) : "0.0");
        }
        cells.push_back(std::to_string(st.n_bridges));
        cells.push_back(std::to_string(st.layer_span));
        cells.push_back(num(st.avg_betweenness));
        for (std::size_t c = 0; c < cells.size(); ++c) {
            out += (c ? "," : "") + cells[c];
        }
        out += "\n";
    }
    return out;
}

Timeline timeline_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kTimelineHeader) {
        throw ParseError("timeline: unexpected header row");
    }
    const std::vector<std::string> columns = split_csv(kTimelineHeader);
    Timeline t;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        const std::vector<std::string> c = split_csv(line);
        if (c.size() != columns.size()) {
            throw ParseError("timeline line " + std::to_string(line_no) + ": expected " +
                             std::to_string(columns.size()) + " columns, found " + std::to_string(c.size()));
        }
        const auto real = [&](std::size_t i) { return parse_num(c[i], line_no, columns[i].c_str()); };
        const auto integer = [&](std::size_t i) {
            const double v = real(i);
            if (!std::isfinite(v) || v != std::floor(v)) {
                throw ParseError("timeline line " + std::to_string(line_no) + ": column " + columns[i] +
                                 " must be an integer");
            }
            return static_cast<std::int64_t>(v);
        };
        if (t.steps.empty()) {
            t.role = c[0];
        } else if (c[0] != t.role) {
            throw ParseError("timeline line " + std::to_string(line_no) + ": mixed roles");
        }
        t.steps.push_back(integer(1));
        t.faithfulness.push_back(real(2));
        if (t.steps.size() > 1) {
            t.stability.push_back(real(3));
            t.node_stability.push_back(real(4));
        }
        t.full_metric.push_back(real(5));
        t.circuit_metric.push_back(real(6));
        t.empty_metric.push_back(real(7));
        t.complement_metric.push_back(real(8));
        SparsityReport sp;
        for (std::size_t k = 0; k < 3; ++k) {
            if (const double v = real(9 + k); !std::isnan(v)) {
                sp.topk_mass[kTopK[k]] = v;
            }
            if (const double v = real(12 + k); !std::isnan(v)) {
                sp.coverage[kCoverageLevels[k]] = static_cast<int>(v);
            }
        }
        sp.gini = real(15);
        sp.n_nodes = static_cast<int>(integer(16));
        t.sparsity.push_back(sp);
        StructuralReport st;
        st.n_nodes = static_cast<int>(integer(17));
        st.n_edges = static_cast<int>(integer(18));
        st.n_simple_edges = static_cast<int>(integer(19));
        st.density = real(20);
        st.reciprocity = real(21);
        st.avg_out_degree = real(22);
        st.avg_weighted_out_degree = real(23);
        for (std::size_t k = 0; k < 4; ++k) {
            st.edge_type_fractions[kAllEdgeKinds[k]] = real(24 + k);
        }
        st.n_bridges = static_cast<int>(integer(28));
        st.layer_span = static_cast<int>(integer(29));
        st.avg_betweenness = real(30);
        t.structural.push_back(st);
    }
    try {
        t.validate();
    } catch (const InvalidArgument& e) {
        throw ParseError(e.what());
    }
    return t;
}

const char* to_string(IndispensabilityMode mode) {
    return mode == IndispensabilityMode::Drop ? "drop" : "sign";
}

IndispensabilityMode indispensability_mode_from_string(const std::string& name) {
    if (name == "drop") {
        return IndispensabilityMode::Drop;
    }
    if (name == "sign") {
        return IndispensabilityMode::Sign;
    }
    throw InvalidArgument("unknown indispensability mode '" + name + "' (expected drop or sign)");
}

Threshold baseline_threshold(const std::vector<double>& series, double n_sigma) {
    if (series.size() < 2) {
        throw InvalidArgument("baseline needs at least 2 checkpoints");
    }
    Threshold t;
    t.baseline_mean = 0.5 * (series[0] + series[1]);
    t.baseline_std = std::abs(series[0] - series[1]) / std::sqrt(2.0);
    t.degenerate = t.baseline_std == 0.0;
    t.value = t.baseline_mean + n_sigma * t.baseline_std;
    return t;
}

std::optional<std::size_t> first_persistent(const std::vector<double>& series, double threshold, int persistence,
                                            bool strictly_above) {
    const auto p = static_cast<std::size_t>(std::max(persistence, 1));
    for (std::size_t i = 0; i + p <= series.size(); ++i) {
        bool ok = true;
        for (std::size_t j = i; j < i + p && ok; ++j) {
            ok = strictly_above ? series[j] > threshold : series[j] >= threshold;
        }
        if (ok) {
            return i;
        }
    }
    return std::nullopt;
}

MarkerResult detect_detectability(const Timeline& timeline) {
    if (timeline.size() < 4) {
        throw InvalidArgument("detectability needs at least 4 checkpoints");
    }
    MarkerResult r;
    r.threshold = baseline_threshold(timeline.faithfulness, 2.0);
    if (const auto i = first_persistent(timeline.faithfulness, r.threshold.value, 2)) {
        r.step = timeline.steps[*i];
    }
    return r;
}

MarkerResult detect_indispensability(const Timeline& timeline, const IndispensabilityConfig& cfg) {
    const std::size_t n = timeline.size();
    const bool have_full = timeline.full_metric.size() == n;
    if (!have_full || (cfg.mode == IndispensabilityMode::Drop && timeline.complement_metric.size() != n) ||
        (cfg.mode == IndispensabilityMode::Sign && timeline.circuit_metric.size() != n)) {
        throw InvalidArgument("indispensability: timeline is missing the ablation series");
    }
    MarkerResult r;
    std::vector<double> signal(n);
    if (cfg.mode == IndispensabilityMode::Drop) {
        for (std::size_t i = 0; i < n; ++i) {
            signal[i] = timeline.full_metric[i] - timeline.complement_metric[i];
        }
        if (cfg.theta) {
            r.threshold.value = *cfg.theta;
        } else {
            r.threshold = baseline_threshold(signal, 1.0);
        }
    } else {
        // M(C) - M(E) < 0, written as M(E) - M(C) > 0.
        for (std::size_t i = 0; i < n; ++i) {
            signal[i] = timeline.full_metric[i] - timeline.circuit_metric[i];
        }
        r.threshold.value = 0.0;
    }
    if (const auto i = first_persistent(signal, r.threshold.value, cfg.persistence)) {
        r.step = timeline.steps[*i];
    }
    return r;
}

std::optional<std::int64_t> consolidation_from_series(const std::vector<std::int64_t>& steps,
                                                      const std::vector<double>& jaccards, double threshold,
                                                      int persistence) {
    if (persistence < 1) {
        throw InvalidArgument("consolidation: persistence must be >= 1");
    }
    if (steps.size() < static_cast<std::size_t>(persistence) + 1) {
        throw InvalidArgument("consolidation needs at least persistence + 1 = " + std::to_string(persistence + 1) +
                              " checkpoints");
    }
    if (jaccards.size() + 1 != steps.size()) {
        throw InvalidArgument("consolidation: Jaccard series must have one entry fewer than the steps");
    }
    if (const auto i = first_persistent(jaccards, threshold, persistence, false)) {
        return steps[*i];
    }
    return std::nullopt;
}

std::optional<std::int64_t> detect_consolidation(const Timeline& timeline, double jaccard_threshold,
                                                 int persistence, bool edge_sets) {
    return consolidation_from_series(timeline.steps, edge_sets ? timeline.stability : timeline.node_stability,
                                     jaccard_threshold, persistence);
}

EmergenceReport analyze_emergence(const Timeline& timeline, const EmergenceConfig& cfg) {
    timeline.validate();
    EmergenceReport r;
    r.config = cfg;
    if (timeline.size() >= 4) {
        const MarkerResult det = detect_detectability(timeline);
        r.t_det = det.step;
        r.detectability_threshold = det.threshold;
        if (std::isnan(det.threshold.value)) {
            r.notes.push_back("detectability baseline undefined (faithfulness undefined at an early checkpoint)");
        } else if (det.threshold.degenerate) {
            r.notes.push_back("detectability baseline std is zero; threshold equals the baseline mean");
        }
    } else {
        r.notes.push_back("detectability skipped: fewer than 4 checkpoints");
    }
    const MarkerResult ind = detect_indispensability(timeline, cfg.indispensability);
    r.t_ind = ind.step;
    r.indispensability_threshold = ind.threshold;
    if (cfg.indispensability.mode == IndispensabilityMode::Drop && !cfg.indispensability.theta &&
        ind.threshold.degenerate) {
        r.notes.push_back("indispensability baseline std is zero; threshold equals the baseline mean");
    }
    if (timeline.size() >= static_cast<std::size_t>(cfg.consolidation_persistence) + 1) {
        r.t_cons = detect_consolidation(timeline, cfg.consolidation_threshold, cfg.consolidation_persistence,
                                        cfg.consolidation_edge_sets);
    } else {
        r.notes.push_back("consolidation skipped: too few checkpoints");
    }

    const auto changepoint = [&](const std::vector<double>& values, const char* name) -> std::optional<ChangePoint> {
        std::vector<double> x;
        std::vector<double> y;
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (std::isfinite(values[i])) {
                x.push_back(static_cast<double>(timeline.steps[i]));
                y.push_back(values[i]);
            }
        }
        if (x.size() < 2 * static_cast<std::size_t>(cfg.min_seg)) {
            r.notes.push_back(std::string(name) + " change-point skipped: " + std::to_string(x.size()) +
                              " defined points, need " + std::to_string(2 * cfg.min_seg));
            return std::nullopt;
        }
        if (x.size() < values.size()) {
            r.notes.push_back(std::string(name) + " change-point fitted on the " + std::to_string(x.size()) +
                              " checkpoints where it is defined");
        }
        return fit_changepoint(x, y, cfg.min_seg, cfg.n_boot, derive_seed(cfg.seed, std::string("changepoint:") + name));
    };
    r.changepoint_faithfulness = changepoint(timeline.faithfulness, "faithfulness");
    std::vector<double> top20;
    for (const SparsityReport& sp : timeline.sparsity) {
        top20.push_back(sp.topk_mass.count(20) ? sp.topk_mass.at(20) : kNaN);
    }
    r.changepoint_topk = changepoint(top20, "top20_mass");
    return r;
}

nlohmann::json to_json(const EmergenceReport& r, const std::string& role) {
    nlohmann::json j;
    j["role"] = role;
    j["t_det"] = opt_step(r.t_det);
    j["t_ind"] = opt_step(r.t_ind);
    j["t_cons"] = opt_step(r.t_cons);
    j["changepoint_faithfulness"] = changepoint_json(r.changepoint_faithfulness);
    j["changepoint_top20_mass"] = changepoint_json(r.changepoint_topk);
    j["detectability_threshold"] = threshold_json(
        r.detectability_threshold, "faithfulness above mean + 2 std of the first 2 checkpoints for 2 checkpoints");
    const bool drop = r.config.indispensability.mode == IndispensabilityMode::Drop;
    j["indispensability_threshold"] = threshold_json(
        r.indispensability_threshold,
        drop ? (r.config.indispensability.theta ? "M(E) - M(E\\C) above a fixed theta"
                                                 : "M(E) - M(E\\C) above mean + std of the first 2 checkpoints")
             : "M(C) - M(E) below 0");
    j["config"] = {{"min_seg", r.config.min_seg},
                   {"n_boot", r.config.n_boot},
                   {"seed", r.config.seed},
                   {"consolidation_threshold", r.config.consolidation_threshold},
                   {"consolidation_persistence", r.config.consolidation_persistence},
                   {"consolidation_sets", r.config.consolidation_edge_sets ? "edges" : "nodes"},
                   {"indispensability_mode", to_string(r.config.indispensability.mode)},
                   {"indispensability_persistence", r.config.indispensability.persistence}};
    j["notes"] = r.notes;
    return j;
}

std::string graph_filename(std::int64_t step) {
    return "graph_step_" + std::to_string(step) + ".json";
}

CompassResult run_compass(const std::vector<Checkpoint>& checkpoints, const std::vector<RoleCrossPair>& pairs,
                          const std::string& role, const CompassConfig& cfg,
                          const std::optional<std::filesystem::path>& out_dir) {
    if (checkpoints.size() < 2) {
        throw InvalidArgument("run_compass needs at least 2 checkpoints");
    }
    if (pairs.empty()) {
        throw InvalidArgument("run_compass needs at least one pair");
    }
    for (std::size_t i = 1; i < checkpoints.size(); ++i) {
        if (checkpoints[i].step <= checkpoints[i - 1].step) {
            throw InvalidArgument("run_compass: checkpoint steps must be strictly increasing");
        }
    }
    cfg.ig.validate();
    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
    }

    CompassResult res;
    Timeline& t = res.timeline;
    t.role = role;
    for (const Checkpoint& ckpt : checkpoints) {
        try {
            RoleAttribution ra = aggregate_role(ckpt, pairs, cfg.ig);
            AttributionGraph graph = std::move(ra.table.graph);
            const Circuit circuit = extract_circuit(graph, cfg.ig.top_k_edges);

            double f = kNaN;
            double full = 0.0;
            double empty = 0.0;
            double in_circuit = 0.0;
            try {
                const FaithfulnessResult fr = faithfulness_detail(ckpt, graph, circuit, pairs, cfg.ablation);
                f = fr.value;
                full = fr.full_metric;
                empty = fr.empty_metric;
                in_circuit = fr.circuit_metric;
            } catch (const UndefinedFaithfulness& e) {
                full = e.full_value;
                empty = e.empty_value;
                in_circuit = ablated_eval(ckpt, pairs, graph, circuit, AblationMode::ZeroOutOfCircuit, cfg.ablation);
            }
            const double complement =
                ablated_eval(ckpt, pairs, graph, circuit, AblationMode::ZeroInCircuit, cfg.ablation);

            SparsityReport sp;
            try {
                sp = sparsity_report(graph, circuit);
            } catch (const UndefinedMetric&) {
                sp.gini = kNaN;
            }
            StructuralReport st;
            if (!circuit.edges.empty()) {
                st = structural_report(graph, circuit);
            }

            t.steps.push_back(ckpt.step);
            t.faithfulness.push_back(f);
            t.full_metric.push_back(full);
            t.circuit_metric.push_back(in_circuit);
            t.empty_metric.push_back(empty);
            t.complement_metric.push_back(complement);
            t.sparsity.push_back(sp);
            t.structural.push_back(st);
            t.circuit_edges.push_back(edge_key_set(graph, circuit));
            t.circuit_nodes.push_back(top_components(graph, circuit, cfg.top_k_nodes));
            if (out_dir) {
                export_graph(graph, *out_dir / graph_filename(ckpt.step));
            }
            res.graphs.push_back(std::move(graph));
        } catch (...) {
            rethrow_at_step(ckpt.step);
        }
    }
    for (std::size_t i = 1; i < t.size(); ++i) {
        t.stability.push_back(jaccard(t.circuit_edges[i - 1], t.circuit_edges[i]));
        t.node_stability.push_back(jaccard(t.circuit_nodes[i - 1], t.circuit_nodes[i]));
    }
    res.report = analyze_emergence(t, cfg.emergence);
    if (out_dir) {
        write_text_file(*out_dir / "timeline.csv", timeline_csv(t));
        write_text_file(*out_dir / "emergence.json", to_json(res.report, role).dump(2) + "\n");
    }
    return res;
}

}  // namespace compass
