#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <vector>

#include "cli.hpp"
#include "compass/emergence.hpp"
#include "compass/error.hpp"
#include "compass/graph_io.hpp"
#include "compass/metrics.hpp"

namespace py = pybind11;

namespace {

std::string sparsity_json(const std::string& path) {
    const compass::AttributionGraph g = compass::import_graph(path);
    return compass::to_json(compass::sparsity_report(g, compass::circuit_from_flags(g))).dump();
}

std::string structural_json(const std::string& path) {
    const compass::AttributionGraph g = compass::import_graph(path);
    return compass::to_json(compass::structural_report(g, compass::circuit_from_flags(g))).dump();
}

std::string compare_json(const std::string& a, const std::string& b, int k_nodes, int k_edges, int spectral_edges,
                         int n_eigs) {
    return compass::to_json(compass::compare_graphs(compass::import_graph(a), compass::import_graph(b), k_nodes, k_edges,
                                                    spectral_edges, n_eigs))
        .dump();
}

double laplacian_distance(int n_a, const std::vector<std::tuple<int, int, double>>& edges_a, int n_b,
                          const std::vector<std::tuple<int, int, double>>& edges_b, int n_eigs) {
    compass::WeightedGraph a{n_a, edges_a};
    compass::WeightedGraph b{n_b, edges_b};
    return compass::spectral_distance(a, b, n_eigs);
}

std::vector<double> spectrum(int n, const std::vector<std::tuple<int, int, double>>& edges) {
    return compass::laplacian_spectrum(compass::WeightedGraph{n, edges});
}

py::dict changepoint(const std::vector<double>& x, const std::vector<double>& y, int min_seg, int n_boot,
                     std::uint64_t seed) {
    const compass::ChangePoint c = compass::fit_changepoint(x, y, min_seg, n_boot, seed);
    py::dict d;
    d["t_hat"] = c.t_hat;
    d["ci_low"] = c.ci_low;
    d["ci_high"] = c.ci_high;
    d["r_squared"] = c.r_squared;
    d["split"] = c.split;
    d["bootstrap_used"] = c.bootstrap_used;
    d["bootstrap_skipped"] = c.bootstrap_skipped;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Native core of the compass circuit-emergence toolkit";

    // Translators run newest first, so the base class goes first.
    py::register_exception<compass::Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<compass::InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
    py::register_exception<compass::MissingInput>(m, "MissingInput", PyExc_FileNotFoundError);
    py::register_exception<compass::VersionMismatch>(m, "VersionMismatch", PyExc_RuntimeError);
    py::register_exception<compass::ParseError>(m, "ParseError", PyExc_ValueError);
    py::register_exception<compass::UndefinedMetric>(m, "UndefinedMetric", PyExc_ArithmeticError);

    m.def("run_cli", &compass::cli::run, py::arg("args"), py::call_guard<py::gil_scoped_release>(),
          "Run one compass command line and return its exit code.");

    m.def("gini", &compass::gini, py::arg("masses"));
    m.def("topk_mass", &compass::topk_mass, py::arg("masses"), py::arg("k"));
    m.def("coverage_k", &compass::coverage_k, py::arg("masses"), py::arg("p"));
    m.def("laplacian_spectrum", &spectrum, py::arg("n"), py::arg("edges"));
    m.def("spectral_distance", &laplacian_distance, py::arg("n_a"), py::arg("edges_a"), py::arg("n_b"),
          py::arg("edges_b"), py::arg("n_eigs") = 20);

    m.def("fit_changepoint", &changepoint, py::arg("x"), py::arg("y"), py::arg("min_seg") = 3,
          py::arg("n_boot") = 1000, py::arg("seed") = 0);
    m.def("consolidation_step", &compass::consolidation_from_series, py::arg("steps"), py::arg("jaccards"),
          py::arg("threshold") = 0.6, py::arg("persistence") = 2);

    m.def("_sparsity_json", &sparsity_json, py::arg("graph_path"));
    m.def("_structural_json", &structural_json, py::arg("graph_path"));
    m.def("_compare_json", &compare_json, py::arg("a"), py::arg("b"), py::arg("k_nodes") = 30,
          py::arg("k_edges") = 30, py::arg("spectral_edges") = 50, py::arg("n_eigs") = 20);

    m.attr("__version__") = COMPASS_VERSION;
}
