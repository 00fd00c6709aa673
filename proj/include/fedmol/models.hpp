#pragma once

#include <Eigen/Dense>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedmol/diffusion.hpp"
#include "fedmol/graphnet.hpp"
#include "fedmol/params.hpp"
#include "fedmol/rng.hpp"

namespace fedmol {

inline constexpr double kDefaultEdgeLossWeight = 5.0;

/// Glorot-uniform weights, zero biases; deterministic per (seed, tensor name).
ParamStore init_params(const ModelConfig& cfg, ModelHead head, std::uint64_t seed);

/// Denoiser handle: config + parameters + the forward rule.
class DenoiserModel : public DenoiserOracle {
  public:
    DenoiserModel(ModelConfig cfg, ParamStore params);

    const ModelConfig& config() const { return cfg_; }
    const ParamStore& params() const { return params_; }
    void set_params(ParamStore params);

    Logits predict(const NoisyGraph& z, const FeatureBundle& feats) const override;

  private:
    ModelConfig cfg_;
    ParamStore params_;
    LoadedParams<float> loaded_;
};

class RegressorModel {
  public:
    RegressorModel(ModelConfig cfg, ParamStore params);

    const ModelConfig& config() const { return cfg_; }
    const ParamStore& params() const { return params_; }
    void set_params(ParamStore params);

    Eigen::Vector2d predict(const NoisyGraph& z, const FeatureBundle& feats) const;

    /// d || predict(z) - target ||^2 / d one-hot inputs; edge gradients are
    /// summed over the (i,j)/(j,i) pair and the diagonal rows are zeroed.
    InputGrads input_gradients(const NoisyGraph& z, const FeatureBundle& feats, const Eigen::Vector2d& target) const;

  private:
    ModelConfig cfg_;
    ParamStore params_;
    LoadedParams<float> loaded_;
};

/// GuidanceOracle adapter over a RegressorModel for sample_chain.
class RegressorGuidance : public GuidanceOracle {
  public:
    explicit RegressorGuidance(const RegressorModel& model) : model_(&model) {}
    InputGrads input_gradients(const NoisyGraph& z, const FeatureBundle& feats,
                               const Eigen::Vector2d& target) const override {
        return model_->input_gradients(z, feats, target);
    }

  private:
    const RegressorModel* model_;
};

double denoiser_loss(const ModelConfig& cfg, const ParamStore& params, const MolGraph& g, const NoisyGraph& z,
                     const FeatureBundle& feats, double lambda_edge = kDefaultEdgeLossWeight);
double regressor_loss(const ModelConfig& cfg, const ParamStore& params, const NoisyGraph& z,
                      const FeatureBundle& feats, const Eigen::Vector2d& target);

struct DenoiserExample {
    const MolGraph* clean = nullptr;
    NoisyGraph z{1, 0};
    FeatureBundle feats;
};

struct RegressorExample {
    NoisyGraph z{1, 0};
    FeatureBundle feats;
    Eigen::Vector2d target = Eigen::Vector2d::Zero();
};

/// Batch-mean loss and (optionally) exact reverse-mode gradients of
/// loss_scale * mean loss. Returns the unscaled mean loss. Gradients are
/// accumulated over fixed 16-graph chunks in 64-bit so results do not depend
/// on how a batch is assembled.
double denoiser_gradients(const ModelConfig& cfg, const ParamStore& params, std::span<const DenoiserExample> batch,
                          double lambda_edge, double loss_scale, ParamStore* grads_out);
double regressor_gradients(const ModelConfig& cfg, const ParamStore& params, std::span<const RegressorExample> batch,
                           double loss_scale, ParamStore* grads_out);

/// 64-bit shadow mode for finite-difference verification: evaluates the same
/// batch with double parameters, an optional single-coordinate perturbation,
/// and optionally the analytic gradients in double.
struct ShadowResult {
    double loss = 0.0;
    std::map<std::string, std::vector<double>> grads;
};

struct ShadowPerturbation {
    std::string name;
    std::size_t index = 0;
    double delta = 0.0;
};

ShadowResult denoiser_shadow(const ModelConfig& cfg, const ParamStore& params, std::span<const DenoiserExample> batch,
                             double lambda_edge, bool want_grads, const ShadowPerturbation* perturb = nullptr);
ShadowResult regressor_shadow(const ModelConfig& cfg, const ParamStore& params, std::span<const RegressorExample> batch,
                              bool want_grads, const ShadowPerturbation* perturb = nullptr);

struct OptimizerConfig {
    enum class Kind { AdamW, Sgd };
    Kind kind = Kind::AdamW;
    double lr = 2e-4;
    double weight_decay = 1e-12;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptimizerState {
    std::uint64_t step = 0;
    ParamStore m;
    ParamStore v;
};

/// Decoupled AdamW: m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;
/// p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p). Arithmetic in double,
/// storage in 32-bit.
void adamw_step(ParamStore& params, const ParamStore& grads, OptimizerState& state, const OptimizerConfig& opt);

void sgd_step(ParamStore& params, const ParamStore& grads, double lr);

/// One step of the optimizer named by opt.kind.
void optimizer_step(ParamStore& params, const ParamStore& grads, OptimizerState& state, const OptimizerConfig& opt);

/// Guided variant of reverse_step: unguided per-cell distributions reweighted
/// by exp(-lambda_g * input gradient of the property error).
NoisyGraph guided_reverse_step(const DenoiserModel& denoiser, const RegressorModel& regressor, const NoisyGraph& z_t,
                               const FeatureBundle& feats, const Eigen::Vector2d& target, double lambda_g,
                               const TransitionModel& model, const NoiseSchedule& schedule, Rng& rng);

} // namespace fedmol
