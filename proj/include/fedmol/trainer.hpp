#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedmol/data.hpp"
#include "fedmol/diffusion.hpp"
#include "fedmol/models.hpp"

namespace fedmol {

struct TrainSettings {
    ModelConfig model;
    OptimizerConfig optimizer;
    int diffusion_steps = 100;
    int batch_size = 512;
    double lambda_edge = kDefaultEdgeLossWeight;
    std::uint64_t seed = 0;
    bool with_regressor = true;
    // The two switches below exist for algebraic-equivalence experiments:
    // site-fitted statistics would make centralized and federated runs see
    // different noise/targets even on identical per-record streams.
    bool normalize_targets = true;
    bool uniform_marginals = false;
    int mc_val_samples = 1;
};

/// One site's slice of the dataset. `ids` are positions in the originally
/// loaded file; they key the per-record noise streams, so a record draws the
/// same noise no matter which shard it landed in.
struct DataSlice {
    std::vector<Record> records;
    std::vector<MolGraph> graphs;
    std::vector<std::uint64_t> ids;

    static DataSlice take(const LoadResult& loaded, const std::vector<int>& indices);
};

/// Denoiser + regressor training over one data slice. Centralized training
/// and every federated collaborator run through this same class.
class LocalTrainer {
  public:
    LocalTrainer(TrainSettings settings, DataSlice train, DataSlice val);

    /// Runs `epochs` epochs; returns {train_ce, train_mse} means over the
    /// call. The internal epoch counter keys per-record noise streams.
    std::map<std::string, double> train_epochs(int epochs);

    /// Returns {val_nll, val_mae}; NLL via the variational bound with
    /// mc_samples draws, MAE in normalized target units.
    std::map<std::string, double> validate(int mc_samples);

    void set_global_params(const ParamStore& denoiser, const ParamStore& regressor);
    const ParamStore& denoiser_params() const { return denoiser_params_; }
    const ParamStore& regressor_params() const { return regressor_params_; }

    std::uint64_t train_sample_count() const { return train_.ids.size(); }
    const TransitionModel& transition() const { return transition_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    const Normalizer& normalizer() const { return normalizer_; }
    const TrainSettings& settings() const { return settings_; }
    int epochs_done() const { return epochs_done_; }

  private:
    Eigen::Vector2d target_of(const Record& r) const;

    TrainSettings settings_;
    DataSlice train_;
    DataSlice val_;
    NoiseSchedule schedule_;
    TransitionModel transition_;
    Normalizer normalizer_;
    ParamStore denoiser_params_;
    ParamStore regressor_params_;
    OptimizerState denoiser_opt_;
    OptimizerState regressor_opt_;
    int epochs_done_ = 0;
    int val_passes_ = 0;
};

/// Category frequencies of a graph set, for the marginal transition model.
TransitionModel marginals_from_graphs(std::span<const MolGraph> graphs);

} // namespace fedmol
