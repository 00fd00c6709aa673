#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "fedmol/harness.hpp"
#include "fedmol/molgraph.hpp"

namespace py = pybind11;

namespace {

std::string canonical_smiles(const std::string& smiles) {
    return fedmol::write_smiles(fedmol::canonical_form(fedmol::parse_smiles(smiles)));
}

bool is_valid(const std::string& smiles) {
    try {
        return fedmol::check_valid(fedmol::parse_smiles(smiles)).valid;
    } catch (const fedmol::Error&) {
        return false;
    }
}

py::dict dataset_stats(const std::string& path) {
    fedmol::LoadResult loaded = fedmol::load_dataset(path);
    py::dict out;
    out["rows"] = loaded.records.size();
    out["skipped"] = loaded.skipped;
    out["atom_histogram"] = fedmol::atom_count_histogram(loaded.graphs);
    return out;
}

py::dict run_experiment_json(const std::string& config_json, const std::string& out_dir) {
    fedmol::ExperimentConfig cfg = fedmol::ExperimentConfig::from_json_text(config_json);
    fedmol::RunResult result = fedmol::run_experiment(cfg, out_dir);
    py::dict out;
    for (const auto& [key, value] : result.final_metrics) out[py::str(key)] = value;
    out["rows"] = result.history.size();
    return out;
}

py::dict compare_dirs(const std::string& central_dir, const std::string& federated_dir, const std::string& out_dir) {
    fedmol::ComparisonReport report = fedmol::compare_runs(central_dir, federated_dir, out_dir);
    py::dict out;
    for (const auto& [key, m] : report.metrics) {
        py::dict row;
        row["central"] = m.central;
        row["federated"] = m.federated;
        row["pct_diff"] = m.pct_diff;
        out[py::str(key)] = row;
    }
    return out;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "federated discrete-diffusion molecule generator (core bindings)";

    py::register_exception<fedmol::Error>(m, "FedmolError");

    m.def("canonical_smiles", &canonical_smiles, py::arg("smiles"),
          "Parse a SMILES string and re-emit it in canonical form.");
    m.def("is_valid", &is_valid, py::arg("smiles"), "Whether the molecule passes the valence sanitizer.");
    m.def("percent_diff", &fedmol::percent_diff, py::arg("central"), py::arg("federated"),
          "Absolute percent difference used in the CL/FL comparison table.");
    m.def("dataset_stats", &dataset_stats, py::arg("path"), "Row/skip counts and the atom-count histogram of a CSV.");
    m.def("run_experiment", &run_experiment_json, py::arg("config_json"), py::arg("out_dir") = std::string(),
          "Run a CL or FL experiment from a JSON config string; returns the final metrics.");
    m.def("compare", &compare_dirs, py::arg("central_dir"), py::arg("federated_dir"),
          py::arg("out_dir") = std::string(), "Compare two completed run directories.");
    m.def("selftest", &fedmol::run_selftest, "Run the built-in property checks; returns the failure count.");
}
