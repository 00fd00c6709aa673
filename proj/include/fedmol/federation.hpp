#pragma once

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fedmol/trainer.hpp"
#include "fedmol/wire.hpp"

namespace fedmol {

/// The fixed task sequence of one federation round. Start and End bracket
/// the whole workflow; Join loops back while rounds remain.
enum class WorkflowTask { Start, AggregatedModelValidation, Train, LocalModelValidation, Join, End };

const char* task_name(WorkflowTask task);

/// Transition function of the workflow state machine.
WorkflowTask next_task(WorkflowTask current, int completed_rounds, int total_rounds);

struct WorkflowSpec {
    enum class Weights { SampleCount, Uniform };

    int rounds = 1;
    int local_epochs_per_round = 1;
    Weights weights = Weights::SampleCount;
};

/// The aggregator's entire view of a site. It can only broadcast parameters
/// and receive a ModelUpdate; dataset records never cross this interface.
class Collaborator {
  public:
    virtual ~Collaborator() = default;
    virtual const std::string& id() const = 0;

    /// Runs AggregatedModelValidation, Train (local_epochs epochs) and
    /// LocalModelValidation on the broadcast parameters, in that order.
    virtual ModelUpdate execute_round(const ParamStore& denoiser, const ParamStore& regressor, int local_epochs) = 0;
};

/// In-process collaborator backed by a LocalTrainer.
class LocalCollaborator : public Collaborator {
  public:
    LocalCollaborator(std::string id, TrainSettings settings, DataSlice train, DataSlice val);

    const std::string& id() const override { return id_; }
    ModelUpdate execute_round(const ParamStore& denoiser, const ParamStore& regressor, int local_epochs) override;

    LocalTrainer& trainer() { return trainer_; }

  private:
    std::string id_;
    LocalTrainer trainer_;
};

struct RoundRecord {
    int round = 0;
    std::map<std::string, double> aggregated;
    std::vector<std::pair<std::string, std::map<std::string, double>>> per_collaborator; // sorted by id
};

struct FederationState {
    int round = 0;
    ParamStore global_denoiser;
    ParamStore global_regressor;
    std::vector<RoundRecord> history;
};

/// Weighted federated average: normalizes the weights to sum to 1 and forms
/// the entry-wise convex combination. Inputs are consumed in the order given;
/// callers canonicalize by collaborator id first.
ParamStore fedavg(std::span<const ParamStore> stores, std::span<const double> weights);

/// Weighted mean per metric key with the same normalized weights.
std::map<std::string, double> aggregate_metrics(std::span<const ModelUpdate> updates, std::span<const double> weights);

/// One full round: broadcast, parallel collaborator execution, canonical-order
/// join. On any collaborator failure the state is left untouched.
void run_round(FederationState& state, const WorkflowSpec& spec, std::span<Collaborator* const> collaborators);

using RoundCallback = std::function<void(const FederationState&, const RoundRecord&)>;

/// Start -> R rounds -> End. The callback fires after each completed round.
FederationState run_workflow(const WorkflowSpec& spec, ParamStore initial_denoiser, ParamStore initial_regressor,
                             std::span<Collaborator* const> collaborators, const RoundCallback& on_round = {});

/// Documented metric keys a collaborator may report.
bool is_documented_metric(const std::string& key);

} // namespace fedmol
