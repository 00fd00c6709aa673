#include "fedmol/federation.hpp"

#include <algorithm>
#include <array>
#include <thread>

#include "fedmol/error.hpp"

namespace fedmol {

const char* task_name(WorkflowTask task) {
    switch (task) {
        case WorkflowTask::Start: return "Start";
        case WorkflowTask::AggregatedModelValidation: return "AggregatedModelValidation";
        case WorkflowTask::Train: return "Train";
        case WorkflowTask::LocalModelValidation: return "LocalModelValidation";
        case WorkflowTask::Join: return "Join";
        case WorkflowTask::End: return "End";
    }
    return "?";
}

WorkflowTask next_task(WorkflowTask current, int completed_rounds, int total_rounds) {
    switch (current) {
        case WorkflowTask::Start:
            return total_rounds > 0 ? WorkflowTask::AggregatedModelValidation : WorkflowTask::End;
        case WorkflowTask::AggregatedModelValidation: return WorkflowTask::Train;
        case WorkflowTask::Train: return WorkflowTask::LocalModelValidation;
        case WorkflowTask::LocalModelValidation: return WorkflowTask::Join;
        case WorkflowTask::Join:
            return completed_rounds < total_rounds ? WorkflowTask::AggregatedModelValidation : WorkflowTask::End;
        case WorkflowTask::End: return WorkflowTask::End;
    }
    fail(ErrorKind::Internal, "unknown workflow task");
}

bool is_documented_metric(const std::string& key) {
    static const std::array<const char*, 6> kKeys = {"train_ce",      "train_mse",    "val_nll",
                                                     "val_mae",       "local_val_nll", "local_val_mae"};
    return std::find(kKeys.begin(), kKeys.end(), key) != kKeys.end();
}

LocalCollaborator::LocalCollaborator(std::string id, TrainSettings settings, DataSlice train, DataSlice val)
    : id_(std::move(id)), trainer_(settings, std::move(train), std::move(val)) {}

ModelUpdate LocalCollaborator::execute_round(const ParamStore& denoiser, const ParamStore& regressor,
                                             int local_epochs) {
    trainer_.set_global_params(denoiser, regressor);
    std::map<std::string, double> metrics = trainer_.validate(trainer_.settings().mc_val_samples);
    for (const auto& [key, value] : trainer_.train_epochs(local_epochs)) metrics[key] = value;
    for (const auto& [key, value] : trainer_.validate(trainer_.settings().mc_val_samples))
        metrics["local_" + key] = value;

    ModelUpdate update;
    update.collaborator_id = id_;
    update.train_sample_count = trainer_.train_sample_count();
    update.metrics = std::move(metrics);
    update.denoiser_params = trainer_.denoiser_params();
    update.regressor_params = trainer_.regressor_params();
    return update;
}

ParamStore fedavg(std::span<const ParamStore> stores, std::span<const double> weights) {
    if (stores.empty()) fail(ErrorKind::EmptyUpdateSet, "fedavg needs at least one update");
    if (stores.size() != weights.size()) fail(ErrorKind::ShapeMismatch, "one weight per update required");
    double total = 0.0;
    for (double w : weights) {
        if (w < 0.0) fail(ErrorKind::AllZeroWeights, "weights must be non-negative");
        total += w;
    }
    if (total <= 0.0) fail(ErrorKind::AllZeroWeights, "weights sum to zero");

    const ParamStore& first = stores[0];
    for (const ParamStore& s : stores)
        if (!s.congruent_with(first)) fail(ErrorKind::ShapeMismatch, "updates have incongruent tensors");

    ParamStore out;
    for (std::size_t e = 0; e < first.size(); ++e) {
        const ParamStore::Entry& shape_entry = first.entry(e);
        std::vector<double> acc(shape_entry.values.size(), 0.0);
        for (std::size_t k = 0; k < stores.size(); ++k) {
            double alpha = weights[k] / total;
            const ParamStore::Entry& entry = stores[k].entry(e);
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += alpha * static_cast<double>(entry.values[i]);
        }
        std::vector<float> values(acc.size());
        for (std::size_t i = 0; i < acc.size(); ++i) values[i] = static_cast<float>(acc[i]);
        out.add(shape_entry.name, shape_entry.shape, std::move(values));
    }
    return out;
}

std::map<std::string, double> aggregate_metrics(std::span<const ModelUpdate> updates, std::span<const double> weights) {
    if (updates.empty()) fail(ErrorKind::EmptyUpdateSet, "no updates to aggregate");
    if (updates.size() != weights.size()) fail(ErrorKind::ShapeMismatch, "one weight per update required");
    double total = 0.0;
    for (double w : weights) total += w;
    if (total <= 0.0) fail(ErrorKind::AllZeroWeights, "weights sum to zero");

    const std::map<std::string, double>& reference = updates[0].metrics;
    for (const ModelUpdate& u : updates) {
        if (u.metrics.size() != reference.size()) fail(ErrorKind::KeyMismatch, "collaborators report different metrics");
        for (const auto& [key, value] : reference)
            if (!u.metrics.contains(key)) fail(ErrorKind::KeyMismatch, "missing metric '" + key + "'");
    }

    std::map<std::string, double> out;
    for (const auto& [key, unused] : reference) {
        double acc = 0.0;
        for (std::size_t k = 0; k < updates.size(); ++k) acc += (weights[k] / total) * updates[k].metrics.at(key);
        out[key] = acc;
    }
    return out;
}

void run_round(FederationState& state, const WorkflowSpec& spec, std::span<Collaborator* const> collaborators) {
    if (collaborators.empty()) fail(ErrorKind::EmptyUpdateSet, "no collaborators");

    // Broadcast copies: global params stay immutable while workers run.
    const ParamStore denoiser = state.global_denoiser;
    const ParamStore regressor = state.global_regressor;

    std::vector<ModelUpdate> updates(collaborators.size());
    std::vector<std::string> failures(collaborators.size());
    std::vector<std::thread> workers;
    workers.reserve(collaborators.size());
    for (std::size_t k = 0; k < collaborators.size(); ++k) {
        workers.emplace_back([&, k] {
            try {
                updates[k] = collaborators[k]->execute_round(denoiser, regressor, spec.local_epochs_per_round);
            } catch (const std::exception& e) {
                failures[k] = e.what();
            } catch (...) {
                failures[k] = "unknown error";
            }
        });
    }
    for (std::thread& w : workers) w.join();
    for (std::size_t k = 0; k < collaborators.size(); ++k)
        if (!failures[k].empty())
            fail(ErrorKind::CollaboratorFailure, "collaborator '" + collaborators[k]->id() + "': " + failures[k]);

    // Canonical order: results must not depend on scheduling.
    std::sort(updates.begin(), updates.end(),
              [](const ModelUpdate& a, const ModelUpdate& b) { return a.collaborator_id < b.collaborator_id; });

    for (const ModelUpdate& u : updates) {
        if (u.train_sample_count == 0)
            fail(ErrorKind::CollaboratorFailure, "collaborator '" + u.collaborator_id + "' reported zero samples");
        for (const auto& [key, unused] : u.metrics)
            if (!is_documented_metric(key))
                fail(ErrorKind::KeyMismatch, "undocumented metric '" + key + "' from '" + u.collaborator_id + "'");
    }

    std::vector<double> weights(updates.size());
    for (std::size_t k = 0; k < updates.size(); ++k)
        weights[k] = spec.weights == WorkflowSpec::Weights::Uniform
                         ? 1.0
                         : static_cast<double>(updates[k].train_sample_count);

    std::vector<ParamStore> denoisers;
    std::vector<ParamStore> regressors;
    denoisers.reserve(updates.size());
    regressors.reserve(updates.size());
    for (const ModelUpdate& u : updates) {
        denoisers.push_back(u.denoiser_params);
        regressors.push_back(u.regressor_params);
    }

    RoundRecord record;
    record.round = state.round + 1;
    record.aggregated = aggregate_metrics(updates, weights);
    for (const ModelUpdate& u : updates) record.per_collaborator.emplace_back(u.collaborator_id, u.metrics);

    state.global_denoiser = fedavg(denoisers, weights);
    state.global_regressor = fedavg(regressors, weights);
    state.round += 1;
    state.history.push_back(std::move(record));
}

FederationState run_workflow(const WorkflowSpec& spec, ParamStore initial_denoiser, ParamStore initial_regressor,
                             std::span<Collaborator* const> collaborators, const RoundCallback& on_round) {
    if (spec.rounds < 0) fail(ErrorKind::Internal, "rounds must be >= 0");
    for (std::size_t a = 0; a < collaborators.size(); ++a)
        for (std::size_t b = a + 1; b < collaborators.size(); ++b)
            if (collaborators[a]->id() == collaborators[b]->id())
                fail(ErrorKind::CollaboratorFailure, "duplicate collaborator id '" + collaborators[a]->id() + "'");

    FederationState state;
    state.global_denoiser = std::move(initial_denoiser);
    state.global_regressor = std::move(initial_regressor);

    WorkflowTask task = WorkflowTask::Start;
    task = next_task(task, state.round, spec.rounds);
    while (task != WorkflowTask::End) {
        // AggregatedModelValidation/Train/LocalModelValidation execute inside
        // the collaborators; Join is the aggregation below.
        run_round(state, spec, collaborators);
        if (on_round) on_round(state, state.history.back());
        task = next_task(WorkflowTask::Join, state.round, spec.rounds);
    }
    return state;
}

} // namespace fedmol
