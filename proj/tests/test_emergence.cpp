#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <limits>

#include "compass/emergence.hpp"
#include "compass/error.hpp"
#include "compass/graph_io.hpp"
#include "compass/rng.hpp"

using namespace compass;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Residual of a QR least-squares fit of [1, x] on one segment.
double qr_sse(const std::vector<double>& x, const std::vector<double>& y, std::size_t lo, std::size_t hi) {
    const auto n = static_cast<Eigen::Index>(hi - lo);
    Eigen::MatrixXd a(n, 2);
    Eigen::VectorXd b(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        a(i, 0) = 1.0;
        a(i, 1) = x[lo + static_cast<std::size_t>(i)];
        b(i) = y[lo + static_cast<std::size_t>(i)];
    }
    const Eigen::VectorXd coef = a.colPivHouseholderQr().solve(b);
    return (a * coef - b).squaredNorm();
}

// Exhaustive search with the QR fits; returns (split index, sse).
std::pair<std::size_t, double> oracle_split(const std::vector<double>& x, const std::vector<double>& y,
                                            std::size_t min_seg) {
    std::size_t best = 0;
    double best_sse = std::numeric_limits<double>::infinity();
    for (std::size_t s = min_seg; s + min_seg <= x.size(); ++s) {
        const double sse = qr_sse(x, y, 0, s) + qr_sse(x, y, s, x.size());
        if (sse < best_sse - 1e-9) {
            best = s;
            best_sse = sse;
        }
    }
    return {best, best_sse};
}

std::vector<double> iota_x(std::size_t n) {
    std::vector<double> x(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = static_cast<double>(i);
    }
    return x;
}

// Continuous two-segment series with the slope change at index `tau`.
std::vector<double> hinge_series(Rng& rng, std::size_t n, std::size_t tau, double slope_change, double sigma) {
    const double a = rng.normal();
    const double b = rng.normal() * 0.5;
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double xi = static_cast<double>(i);
        y[i] = a + b * xi + (i >= tau ? slope_change * (xi - static_cast<double>(tau)) : 0.0) + sigma * rng.normal();
    }
    return y;
}

Timeline flat_timeline(const std::vector<std::int64_t>& steps) {
    Timeline t;
    t.role = "Goal";
    t.steps = steps;
    const std::size_t n = steps.size();
    t.faithfulness.assign(n, 0.5);
    t.stability.assign(n - 1, 1.0);
    t.node_stability.assign(n - 1, 1.0);
    t.full_metric.assign(n, -1.0);
    t.circuit_metric.assign(n, -1.0);
    t.empty_metric.assign(n, -3.0);
    t.complement_metric.assign(n, -1.0);
    SparsityReport sp;
    sp.topk_mass = {{5, 0.5}, {10, 0.75}, {20, 1.0}};
    sp.coverage = {{0.80, 11}, {0.90, 14}, {0.95, 17}};
    sp.gini = 0.25;
    sp.n_nodes = 30;
    t.sparsity.assign(n, sp);
    StructuralReport st;
    st.n_nodes = 12;
    st.n_edges = 20;
    st.n_simple_edges = 18;
    st.density = 18.0 / 132.0;
    st.edge_type_fractions = {{EdgeKind::Q, 0.1}, {EdgeKind::K, 0.2}, {EdgeKind::V, 0.3}, {EdgeKind::Flow, 0.4}};
    st.n_bridges = 3;
    st.layer_span = 4;
    st.avg_betweenness = 0.0125;
    t.structural.assign(n, st);
    return t;
}

ModelConfig toy_config() {
    ModelConfig c;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_model = 8;
    c.d_head = 4;
    c.d_mlp = 16;
    c.vocab_size = 12;
    c.max_seq_len = 6;
    return c;
}

std::vector<RoleCrossPair> toy_pairs() {
    std::vector<RoleCrossPair> pairs;
    for (int i = 0; i < 3; ++i) {
        RoleCrossPair p;
        p.clean_tokens = {1 + i, 4, 5, 6};
        p.corrupt_tokens = {1 + i, 7, 8, 6};
        p.target_clean = 9;
        p.target_corrupt = 10;
        p.role_clean = "Goal";
        p.role_corrupt = "Source";
        pairs.push_back(p);
    }
    return pairs;
}

}  // namespace

TEST(FitPiecewise, KinkedSeriesSplitsAtThree) {
    const std::vector<double> x = iota_x(7);
    const std::vector<double> y = {0, 1, 2, 3, 3, 3, 3};
    const ChangePoint cp = fit_piecewise(x, y, 3);
    EXPECT_EQ(cp.t_hat, 3.0);
    EXPECT_EQ(cp.split, 3u);
    EXPECT_NEAR(cp.r_squared, 1.0, 1e-12);
    EXPECT_EQ(oracle_split(x, y, 3).first, 3u);
}

TEST(FitPiecewise, DegenerateSeriesTakeEarliestSplit) {
    const std::vector<double> x = iota_x(10);
    std::vector<double> line(10);
    for (int i = 0; i < 10; ++i) {
        line[i] = 0.3 * i - 1.0;
    }
    ChangePoint cp = fit_piecewise(x, line, 3);
    EXPECT_EQ(cp.split, 3u);
    EXPECT_NEAR(cp.r_squared, 1.0, 1e-12);
    cp = fit_piecewise(x, std::vector<double>(10, 2.0), 3);
    EXPECT_EQ(cp.split, 3u);
    EXPECT_EQ(cp.r_squared, 1.0);
}

TEST(FitPiecewise, ErrorsOnShortOrBadInput) {
    EXPECT_THROW(fit_piecewise(iota_x(5), std::vector<double>(5, 1.0), 3), InvalidArgument);
    EXPECT_THROW(fit_piecewise(iota_x(6), {0, 1, kNaN, 3, 4, 5}, 3), InvalidArgument);
    EXPECT_THROW(fit_piecewise({0, 2, 1, 3, 4, 5}, std::vector<double>(6, 1.0), 3), InvalidArgument);
}

TEST(FitPiecewise, MatchesExhaustiveQrOracle) {
    Rng rng(42);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 6 + rng.uniform_index(20);
        std::vector<double> x(n);
        double acc = 0.0;
        for (double& v : x) {
            acc += 0.5 + rng.uniform01();
            v = acc;
        }
        std::vector<double> y(n);
        for (double& v : y) {
            v = rng.normal();
        }
        const ChangePoint cp = fit_piecewise(x, y, 3);
        const auto [split, sse] = oracle_split(x, y, 3);
        const double got = qr_sse(x, y, 0, cp.split) + qr_sse(x, y, cp.split, n);
        EXPECT_NEAR(got, sse, 1e-9 * (1.0 + sse));
        if (std::abs(got - sse) > 1e-9 * (1.0 + sse)) {
            EXPECT_EQ(cp.split, split);
        }
    }
}

TEST(FitPiecewise, NoiselessTwoSegmentExact) {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t tau = 4 + rng.uniform_index(12);
        std::vector<double> y(20);
        const double jump = 1.0 + rng.uniform01();
        for (std::size_t i = 0; i < 20; ++i) {
            y[i] = i < tau ? 0.2 * i : 0.2 * i + jump + 0.7 * (i - tau);
        }
        const ChangePoint cp = fit_piecewise(iota_x(20), y, 3);
        EXPECT_EQ(cp.split, tau);
        EXPECT_NEAR(cp.r_squared, 1.0, 1e-12);
    }
}

TEST(Bootstrap, RecoveryOnNoisyHinges) {
    Rng rng(2024);
    int within = 0;
    int covered = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t tau = 5 + rng.uniform_index(10);
        const double change = 0.5 + 0.5 * rng.uniform01();
        const std::vector<double> y = hinge_series(rng, 20, tau, change, 0.05);
        const ChangePoint cp = fit_changepoint(iota_x(20), y, 3, 1000, static_cast<std::uint64_t>(trial));
        within += std::abs(static_cast<double>(cp.split) - static_cast<double>(tau)) <= 1.0 ? 1 : 0;
        covered += cp.ci_low <= static_cast<double>(tau) && static_cast<double>(tau) <= cp.ci_high ? 1 : 0;
    }
    EXPECT_GE(within, 95);
    EXPECT_GE(covered, 90);
}

TEST(Bootstrap, NoiselessCollapsesAndIsDeterministic) {
    std::vector<double> y(20);
    for (std::size_t i = 0; i < 20; ++i) {
        y[i] = i < 10 ? 0.1 * i : 1.0 - 0.4 * (i - 10.0);
    }
    const std::vector<double> x = iota_x(20);
    ChangePoint cp = fit_piecewise(x, y, 3);
    std::vector<double> reps;
    bootstrap_ci(x, y, cp, 1000, 3, 77, &reps);
    int hits = 0;
    for (const double s : reps) {
        hits += s == 10.0 ? 1 : 0;
    }
    EXPECT_GE(hits, 950);
    EXPECT_EQ(cp.ci_low, 10.0);
    EXPECT_EQ(cp.ci_high, 10.0);

    ChangePoint again = fit_piecewise(x, y, 3);
    bootstrap_ci(x, y, again, 1000, 3, 77);
    EXPECT_EQ(again.ci_low, cp.ci_low);
    EXPECT_EQ(again.ci_high, cp.ci_high);

    ChangePoint one = fit_piecewise(x, y, 3);
    bootstrap_ci(x, y, one, 1, 3, 5, &reps);
    ASSERT_EQ(reps.size(), 1u);
    EXPECT_EQ(one.ci_low, reps[0]);
    EXPECT_EQ(one.ci_high, reps[0]);
}

TEST(Markers, Detectability) {
    Timeline t = flat_timeline({0, 8, 32, 128});
    EXPECT_FALSE(detect_detectability(t).step);
    t.faithfulness = {0.1, 0.1, 0.9, 0.9};
    const MarkerResult r = detect_detectability(t);
    EXPECT_EQ(r.step, 32);
    EXPECT_TRUE(r.threshold.degenerate);
    t = flat_timeline({0, 8, 32, 128, 512});
    t.faithfulness = {0.1, 0.1, 0.9, 0.1, 0.1};
    EXPECT_FALSE(detect_detectability(t).step);
    EXPECT_THROW(detect_detectability(flat_timeline({0, 8, 32})), InvalidArgument);
}

TEST(Markers, IndispensabilityDrop) {
    Timeline t = flat_timeline({0, 8, 32, 128, 512});
    EXPECT_FALSE(detect_indispensability(t).step);
    const std::vector<double> drops = {0, 0, 0.3, 0.3, 0.3};
    for (std::size_t i = 0; i < 5; ++i) {
        t.complement_metric[i] = t.full_metric[i] - drops[i];
    }
    IndispensabilityConfig cfg;
    cfg.theta = 0.1;
    EXPECT_EQ(detect_indispensability(t, cfg).step, 32);
    t.complement_metric = t.full_metric;
    t.complement_metric[2] -= 0.3;
    EXPECT_FALSE(detect_indispensability(t, cfg).step);
    t.complement_metric.clear();
    EXPECT_THROW(detect_indispensability(t, cfg), InvalidArgument);
}

TEST(Markers, IndispensabilitySign) {
    Timeline t = flat_timeline({0, 8, 32, 128, 512});
    IndispensabilityConfig cfg;
    cfg.mode = IndispensabilityMode::Sign;
    EXPECT_FALSE(detect_indispensability(t, cfg).step);
    t.circuit_metric = {-1.0, -1.0, -1.5, -1.2, -1.1};
    EXPECT_EQ(detect_indispensability(t, cfg).step, 32);
}

TEST(Markers, Consolidation) {
    const std::vector<std::int64_t> steps = {0, 8, 32, 128, 512};
    EXPECT_EQ(consolidation_from_series(steps, {0.2, 0.7, 0.7, 0.9}, 0.6, 2), 8);
    EXPECT_EQ(consolidation_from_series(steps, {1, 1, 1, 1}, 0.6, 2), 0);
    EXPECT_FALSE(consolidation_from_series(steps, {0, 0, 0, 0}, 0.6, 2));
    EXPECT_THROW(consolidation_from_series({0, 8}, {1.0}, 0.6, 2), InvalidArgument);
    Timeline t = flat_timeline(steps);
    t.node_stability = {0.2, 0.7, 0.7, 0.9};
    EXPECT_EQ(detect_consolidation(t), 8);
    EXPECT_EQ(detect_consolidation(t, 0.6, 2, true), 0);
}

TEST(Markers, MembershipAndTruncationOnRandomTimelines) {
    Rng rng(99);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 4 + rng.uniform_index(6);
        std::vector<std::int64_t> steps(n);
        std::int64_t s = 0;
        for (auto& v : steps) {
            v = s;
            s += 1 + static_cast<std::int64_t>(rng.uniform_index(50));
        }
        Timeline t = flat_timeline(steps);
        for (std::size_t i = 0; i < n; ++i) {
            t.faithfulness[i] = rng.uniform01();
            t.complement_metric[i] = t.full_metric[i] - rng.uniform01();
            t.circuit_metric[i] = t.full_metric[i] - 0.5 + rng.uniform01();
        }
        for (std::size_t i = 0; i + 1 < n; ++i) {
            t.node_stability[i] = rng.uniform01();
            t.stability[i] = rng.uniform01();
        }
        Timeline cut = t;
        cut.steps.pop_back();
        cut.faithfulness.pop_back();
        cut.complement_metric.pop_back();
        cut.circuit_metric.pop_back();
        cut.full_metric.pop_back();
        cut.empty_metric.pop_back();
        cut.sparsity.pop_back();
        cut.structural.pop_back();
        cut.node_stability.pop_back();
        cut.stability.pop_back();

        const auto check = [&](const std::optional<std::int64_t>& full, const std::optional<std::int64_t>& trunc) {
            if (full) {
                EXPECT_NE(std::find(steps.begin(), steps.end(), *full), steps.end());
            }
            if (trunc) {
                ASSERT_TRUE(full.has_value());
                EXPECT_GE(*trunc, *full);
            }
        };
        check(detect_consolidation(t), detect_consolidation(cut));
        IndispensabilityConfig fixed;
        fixed.theta = 0.5;
        check(detect_indispensability(t, fixed).step, detect_indispensability(cut, fixed).step);
        fixed.mode = IndispensabilityMode::Sign;
        check(detect_indispensability(t, fixed).step, detect_indispensability(cut, fixed).step);
        if (cut.size() >= 4) {
            check(detect_detectability(t).step, detect_detectability(cut).step);
        }
    }
}

TEST(TimelineFile, RoundTrip) {
    Timeline t = flat_timeline({0, 8, 32, 128, 512, 2000, 8000});
    t.faithfulness[0] = kNaN;
    t.sparsity[1] = SparsityReport{};
    t.sparsity[1].gini = kNaN;
    const std::string text = timeline_csv(t);
    const Timeline back = timeline_from_csv(text);
    EXPECT_EQ(timeline_csv(back), text);
    EXPECT_EQ(back.steps, t.steps);
    EXPECT_TRUE(std::isnan(back.faithfulness[0]));
    EXPECT_EQ(back.sparsity[2].coverage.at(0.90), 14);
    EXPECT_EQ(back.structural[3].edge_type_fractions.at(EdgeKind::V), 0.3);
    EXPECT_THROW(timeline_from_csv("step,faithfulness\n0,1\n"), ParseError);
    std::string broken = text;
    broken.replace(broken.rfind(",0.0125"), 7, ",x");
    EXPECT_THROW(timeline_from_csv(broken), ParseError);
}

TEST(Emergence, ReportOnSyntheticTimeline) {
    Timeline t = flat_timeline({0, 8, 32, 128, 512, 2000, 8000});
    t.faithfulness = {0.01, 0.02, 0.05, 0.6, 0.8, 0.85, 0.9};
    t.node_stability = {0.1, 0.3, 0.7, 0.8, 0.9, 0.9};
    EmergenceConfig cfg;
    cfg.n_boot = 200;
    const EmergenceReport r = analyze_emergence(t, cfg);
    EXPECT_EQ(r.t_det, 32);
    EXPECT_EQ(r.t_cons, 32);
    ASSERT_TRUE(r.changepoint_faithfulness);
    EXPECT_LE(r.changepoint_faithfulness->ci_low, r.changepoint_faithfulness->t_hat);
    EXPECT_GE(r.changepoint_faithfulness->ci_high, r.changepoint_faithfulness->t_hat);
    const auto j = to_json(r, "Goal");
    EXPECT_EQ(j["t_det"], 32);
    EXPECT_TRUE(j["t_ind"].is_null());
    EXPECT_EQ(j["config"]["indispensability_mode"], "drop");
    EXPECT_EQ(to_json(analyze_emergence(t, cfg), "Goal").dump(), j.dump());
}

TEST(RunCompass, TwoCheckpointSmokeRunIsDeterministic) {
    const ModelConfig c = toy_config();
    Checkpoint a = init_model(c, 1);
    Checkpoint b = init_model(c, 2);
    a.step = 0;
    b.step = 8;
    CompassConfig cfg;
    cfg.ig.top_k_edges = 20;
    cfg.emergence.n_boot = 50;
    const auto base = std::filesystem::temp_directory_path() / "compass_run_test";
    std::filesystem::remove_all(base);
    const CompassResult r1 = run_compass({a, b}, toy_pairs(), "Goal", cfg, base / "one");
    const CompassResult r2 = run_compass({a, b}, toy_pairs(), "Goal", cfg, base / "two");
    for (const char* f : {"graph_step_0.json", "graph_step_8.json", "timeline.csv", "emergence.json"}) {
        ASSERT_TRUE(std::filesystem::exists(base / "one" / f)) << f;
        EXPECT_EQ(read_text_file(base / "one" / f), read_text_file(base / "two" / f)) << f;
    }
    EXPECT_EQ(r1.graphs.size(), 2u);
    EXPECT_EQ(r1.timeline.size(), 2u);
    EXPECT_EQ(r1.timeline.stability.size(), 1u);
    EXPECT_EQ(import_graph(base / "one" / "graph_step_8.json"), r1.graphs[1]);
    EXPECT_EQ(static_cast<int>(r1.timeline.circuit_edges[0].size()), 20);
    EXPECT_EQ(timeline_from_csv(read_text_file(base / "one" / "timeline.csv")).steps,
              (std::vector<std::int64_t>{0, 8}));
    std::filesystem::remove_all(base);
}

TEST(RunCompass, FailingStepIsNamed) {
    const ModelConfig c = toy_config();
    Checkpoint a = init_model(c, 1);
    Checkpoint b = init_model(c, 2);
    a.step = 0;
    b.step = 8;
    std::vector<RoleCrossPair> pairs = toy_pairs();
    pairs[1].clean_tokens.push_back(3);  // length mismatch
    pairs[1].corrupt_tokens.push_back(3);
    try {
        run_compass({a, b}, pairs, "Goal", CompassConfig{});
        FAIL() << "expected an error";
    } catch (const InvalidArgument& e) {
        EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
    }
    EXPECT_THROW(run_compass({a}, toy_pairs(), "Goal", CompassConfig{}), InvalidArgument);
}
