#include "fedmol/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "fedmol/error.hpp"

namespace fedmol {

namespace {

// Stream tags for mix_seed so distinct purposes never share a draw sequence.
constexpr std::uint64_t kShuffleStream = 0x01;
constexpr std::uint64_t kDenoiserNoise = 0x02;
constexpr std::uint64_t kRegressorNoise = 0x03;
constexpr std::uint64_t kValNllStream = 0x04;
constexpr std::uint64_t kValMaeStream = 0x05;

} // namespace

DataSlice DataSlice::take(const LoadResult& loaded, const std::vector<int>& indices) {
    DataSlice out;
    out.records.reserve(indices.size());
    out.graphs.reserve(indices.size());
    out.ids.reserve(indices.size());
    for (int idx : indices) {
        out.records.push_back(loaded.records[static_cast<std::size_t>(idx)]);
        out.graphs.push_back(loaded.graphs[static_cast<std::size_t>(idx)]);
        out.ids.push_back(static_cast<std::uint64_t>(idx));
    }
    return out;
}

TransitionModel marginals_from_graphs(std::span<const MolGraph> graphs) {
    Eigen::Vector4d nodes = Eigen::Vector4d::Zero();
    Eigen::Vector4d edges = Eigen::Vector4d::Zero();
    for (const MolGraph& g : graphs) {
        for (int i = 0; i < g.size(); ++i) {
            nodes[static_cast<int>(g.node(i))] += 1.0;
            for (int j = i + 1; j < g.size(); ++j) edges[static_cast<int>(g.edge(i, j))] += 1.0;
        }
    }
    if (nodes.sum() <= 0.0) fail(ErrorKind::EmptyDataset, "no graphs to compute marginals from");
    // Single-atom-only corpora have no edge cells at all; fall back to an
    // all-NoBond marginal (the floor keeps the other categories reachable).
    if (edges.sum() <= 0.0) edges[0] = 1.0;
    return TransitionModel::from_marginals(nodes, edges);
}

LocalTrainer::LocalTrainer(TrainSettings settings, DataSlice train, DataSlice val)
    : settings_(settings),
      train_(std::move(train)),
      val_(std::move(val)),
      schedule_(NoiseSchedule::cosine(settings.diffusion_steps)),
      transition_(settings.uniform_marginals ? TransitionModel::uniform() : marginals_from_graphs(train_.graphs)),
      normalizer_(settings.with_regressor && settings.normalize_targets ? Normalizer::fit(train_.records)
                                                                        : Normalizer::identity()),
      denoiser_params_(init_params(settings.model, ModelHead::Denoiser, mix_seed(settings.seed, hash_name("init-denoiser")))),
      regressor_params_(init_params(settings.model, ModelHead::Regressor, mix_seed(settings.seed, hash_name("init-regressor")))) {
    if (train_.ids.empty()) fail(ErrorKind::EmptyDataset, "trainer needs a non-empty training slice");
    if (settings_.batch_size < 1) fail(ErrorKind::Internal, "batch_size must be positive");
}

Eigen::Vector2d LocalTrainer::target_of(const Record& r) const {
    return normalizer_.apply(Eigen::Vector2d(r.mu, r.homo));
}

void LocalTrainer::set_global_params(const ParamStore& denoiser, const ParamStore& regressor) {
    if (!denoiser_params_.congruent_with(denoiser) || !regressor_params_.congruent_with(regressor))
        fail(ErrorKind::ShapeMismatch, "global parameters do not match the local model configuration");
    denoiser_params_ = denoiser;
    regressor_params_ = regressor;
}

std::map<std::string, double> LocalTrainer::train_epochs(int epochs) {
    const int T = schedule_.steps();
    const std::size_t n = train_.ids.size();
    double ce_sum = 0.0;
    double mse_sum = 0.0;
    std::size_t ce_count = 0;

    for (int e = 0; e < epochs; ++e) {
        const std::uint64_t epoch = static_cast<std::uint64_t>(epochs_done_);
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        Rng shuffle_rng(mix_seed(settings_.seed, kShuffleStream, epoch));
        for (std::size_t i = n - 1; i > 0; --i) {
            std::size_t j = shuffle_rng.uniform_index(i + 1);
            std::swap(order[i], order[j]);
        }

        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(settings_.batch_size)) {
            std::size_t stop = std::min(n, start + static_cast<std::size_t>(settings_.batch_size));
            std::size_t batch_n = stop - start;

            std::vector<DenoiserExample> den_batch;
            den_batch.reserve(batch_n);
            for (std::size_t b = start; b < stop; ++b) {
                std::size_t idx = order[b];
                Rng noise(mix_seed(settings_.seed, kDenoiserNoise, epoch, train_.ids[idx]));
                int t = 1 + static_cast<int>(noise.uniform_index(static_cast<std::uint64_t>(T)));
                NoisyGraph z = apply_noise(train_.graphs[idx], t, transition_, schedule_, noise);
                FeatureBundle feats = extra_features(z, T);
                den_batch.push_back(DenoiserExample{&train_.graphs[idx], std::move(z), std::move(feats)});
            }
            ParamStore den_grads;
            double ce = denoiser_gradients(settings_.model, denoiser_params_, den_batch, settings_.lambda_edge, 1.0,
                                           &den_grads);
            optimizer_step(denoiser_params_, den_grads, denoiser_opt_, settings_.optimizer);
            ce_sum += ce * static_cast<double>(batch_n);
            ce_count += batch_n;

            if (settings_.with_regressor) {
                std::vector<RegressorExample> reg_batch;
                reg_batch.reserve(batch_n);
                for (std::size_t b = start; b < stop; ++b) {
                    std::size_t idx = order[b];
                    Rng noise(mix_seed(settings_.seed, kRegressorNoise, epoch, train_.ids[idx]));
                    int t = 1 + static_cast<int>(noise.uniform_index(static_cast<std::uint64_t>(T)));
                    NoisyGraph z = apply_noise(train_.graphs[idx], t, transition_, schedule_, noise);
                    FeatureBundle feats = extra_features(z, T);
                    reg_batch.push_back(RegressorExample{std::move(z), std::move(feats), target_of(train_.records[idx])});
                }
                ParamStore reg_grads;
                double mse = regressor_gradients(settings_.model, regressor_params_, reg_batch, 1.0, &reg_grads);
                optimizer_step(regressor_params_, reg_grads, regressor_opt_, settings_.optimizer);
                mse_sum += mse * static_cast<double>(batch_n);
            }
        }
        ++epochs_done_;
    }

    std::map<std::string, double> metrics;
    metrics["train_ce"] = ce_count > 0 ? ce_sum / static_cast<double>(ce_count) : 0.0;
    if (settings_.with_regressor) metrics["train_mse"] = ce_count > 0 ? mse_sum / static_cast<double>(ce_count) : 0.0;
    return metrics;
}

std::map<std::string, double> LocalTrainer::validate(int mc_samples) {
    const int T = schedule_.steps();
    const std::uint64_t pass = static_cast<std::uint64_t>(val_passes_++);
    if (val_.ids.empty()) fail(ErrorKind::EmptyDataset, "trainer needs a non-empty validation slice");

    DenoiserModel denoiser(settings_.model, denoiser_params_);
    double nll_sum = 0.0;
    for (std::size_t i = 0; i < val_.ids.size(); ++i) {
        Rng rng(mix_seed(settings_.seed, kValNllStream, pass, val_.ids[i]));
        nll_sum += nll_bound(denoiser, val_.graphs[i], transition_, schedule_, mc_samples, rng);
    }

    std::map<std::string, double> metrics;
    metrics["val_nll"] = nll_sum / static_cast<double>(val_.ids.size());

    if (settings_.with_regressor) {
        RegressorModel regressor(settings_.model, regressor_params_);
        double mae_sum = 0.0;
        for (std::size_t i = 0; i < val_.ids.size(); ++i) {
            Rng rng(mix_seed(settings_.seed, kValMaeStream, pass, val_.ids[i]));
            int t = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(T)));
            NoisyGraph z = apply_noise(val_.graphs[i], t, transition_, schedule_, rng);
            Eigen::Vector2d pred = regressor.predict(z, extra_features(z, T));
            mae_sum += (pred - target_of(val_.records[i])).cwiseAbs().mean();
        }
        metrics["val_mae"] = mae_sum / static_cast<double>(val_.ids.size());
    }
    return metrics;
}

} // namespace fedmol
