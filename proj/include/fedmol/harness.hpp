#pragma once

#include <array>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedmol/data.hpp"
#include "fedmol/federation.hpp"
#include "fedmol/trainer.hpp"

namespace fedmol {

struct GuidanceSettings {
    bool enabled = false;
    double lambda_g = 100.0;
    std::array<double, 2> target{0.0, 0.0}; // in normalized target units
};

/// One experiment, centralized or federated. Serializes to/from JSON; CLI
/// flags override individual fields after loading.
struct ExperimentConfig {
    std::string mode = "CL"; // "CL" | "FL"
    std::string dataset;
    std::uint64_t seed = 0;
    int collaborators = 2;
    double train_fraction = 0.8;
    double val_fraction = 0.1;
    double test_fraction = 0.1;
    ModelConfig model;
    OptimizerConfig optimizer;
    int diffusion_steps = 100;
    int rounds = 10;      // FL rounds; CL trains rounds * local_epochs epochs
    int local_epochs = 1;
    int batch_size = 512;
    int samples_per_eval = 1000;
    int chains = 10;
    int sample_every = 10; // 0 disables periodic sampling metrics
    int mc_val_samples = 1;
    int mc_final_samples = 8;
    std::string weights_policy = "samples"; // "samples" | "uniform"
    bool with_regressor = true;
    bool normalize_targets = true;
    bool uniform_marginals = false;
    double lambda_edge = 5.0;
    GuidanceSettings guidance;
    std::string transport = "inproc"; // "inproc" | "tcp"

    void validate() const;
    TrainSettings train_settings() const;
    std::string to_json_text() const;
    static ExperimentConfig from_json_text(const std::string& text);
    static ExperimentConfig load_file(const std::string& path);
};

/// One training epoch (CL) or round (FL). NaN marks metrics that were not
/// evaluated at that row; CSV emit/parse maps NaN to an empty cell.
struct HistoryRow {
    int round = 0;
    double train_ce = kUnset;
    double train_mse = kUnset;
    double val_nll = kUnset;
    double val_mae = kUnset;
    double validity = kUnset;
    double uniqueness = kUnset;

    static constexpr double kUnset = std::numeric_limits<double>::quiet_NaN();
};

struct RunResult {
    ExperimentConfig config;
    std::vector<HistoryRow> history;
    ParamStore denoiser;
    ParamStore regressor;
    /// Final-model metrics: nll, validity, uniqueness, and mae when the
    /// regressor is trained.
    std::map<std::string, double> final_metrics;
};

/// Absolute percent difference: |c - f| / ((c + f) / 2) * 100.
double percent_diff(double central, double federated);

/// Everything sample_chain needs besides parameters.
struct SamplingSetup {
    ModelConfig model;
    int diffusion_steps = 100;
    TransitionModel transition = TransitionModel::uniform();
    std::vector<double> atom_histogram; // over n = 1..kMaxAtoms
    bool guided = false;
    double lambda_g = 100.0;
    Eigen::Vector2d target = Eigen::Vector2d::Zero();
};

struct SamplingMetrics {
    double validity = 0.0;
    double uniqueness = 0.0;
    std::vector<MolGraph> samples;
};

/// Draws `samples` molecules over `chains` independent chains (equal batch
/// per chain) and scores validity and uniqueness. Chain noise depends only on
/// (seed, chain index), so repeated evaluations across rounds reuse the same
/// noise and differ only through the parameters.
SamplingMetrics evaluate_sampling(const SamplingSetup& setup, const ParamStore& denoiser_params,
                                  const ParamStore& regressor_params, int samples, int chains, std::uint64_t seed);

/// Trains on the pooled 80/10/10 split for rounds * local_epochs epochs.
/// If out_dir is non-empty, writes config.json, metrics.csv, report.json and
/// the final .fpk checkpoints there.
RunResult run_central(const ExperimentConfig& config, const std::string& out_dir = "");

/// Shards the dataset across `collaborators` sites and runs the federated
/// workflow; history rows carry the aggregated per-round metrics. With
/// transport == "tcp" every update crosses a loopback socket.
RunResult run_federated(const ExperimentConfig& config, const std::string& out_dir = "");

/// Dispatches on config.mode.
RunResult run_experiment(const ExperimentConfig& config, const std::string& out_dir = "");

struct MetricComparison {
    double central = 0.0;
    double federated = 0.0;
    double pct_diff = 0.0;
};

struct ComparisonReport {
    std::map<std::string, MetricComparison> metrics;
};

/// Reads two completed run directories and emits report.json, table.csv and
/// curves/<metric>.csv under out_dir (when non-empty).
ComparisonReport compare_runs(const std::string& central_dir, const std::string& federated_dir,
                              const std::string& out_dir = "");

/// Recomputes the final metrics of a completed run from its stored config and
/// checkpoints. Values <= 0 fall back to the config's settings. Validation MC
/// noise is freshly keyed, so NLL/MAE match the training-time report in
/// distribution, not bit-for-bit.
std::map<std::string, double> evaluate_run(const std::string& run_dir, int mc_samples = 0, int samples = 0,
                                           int chains = 0);

/// Quick property checks with one PASS/FAIL line each; returns the number of
/// failures.
int run_selftest();

// Report plumbing, exposed for the CLI and tests.
std::string format_g17(double v);
void write_metrics_csv(const std::string& path, std::span<const HistoryRow> rows);
std::vector<HistoryRow> read_metrics_csv(const std::string& path);
void write_run_outputs(const RunResult& result, const std::string& out_dir);
std::map<std::string, double> read_final_metrics(const std::string& run_dir);

} // namespace fedmol
