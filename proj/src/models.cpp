#include "fedmol/models.hpp"

#include <cmath>

#include "fedmol/error.hpp"

namespace fedmol {

namespace {

constexpr std::size_t kGradChunk = 16;

template <typename Real>
struct BatchResult {
    double loss_sum = 0.0;
    std::map<std::string, std::vector<double>> grads;
};

void check_finite(double loss) {
    if (!std::isfinite(loss)) fail(ErrorKind::NonFiniteLoss, "batch loss is not finite");
}

template <typename Real>
void accumulate_grads(Tape<Real>& tape, const ParamVars<Real>& pv,
                      std::map<std::string, std::vector<double>>& accum) {
    for (const auto& [name, var] : pv) {
        const Mat<Real>& g = tape.grad(var);
        std::vector<double>& slot = accum[name];
        if (slot.empty()) slot.assign(static_cast<std::size_t>(g.size()), 0.0);
        std::size_t at = 0;
        for (Eigen::Index r = 0; r < g.rows(); ++r)
            for (Eigen::Index c = 0; c < g.cols(); ++c) slot[at++] += static_cast<double>(g(r, c));
    }
}

/// Shared batch driver: forwards every example, sums losses per 16-graph
/// chunk, backpropagates loss_scale * chunk_sum / batch_size, and accumulates
/// parameter gradients in double across chunks.
template <typename Real, typename ExampleT, typename LossFn>
BatchResult<Real> run_batch(const ModelConfig& cfg, const LoadedParams<Real>& lp, ModelHead head,
                            std::span<const ExampleT> batch, double loss_scale, bool want_grads, LossFn&& loss_fn) {
    if (batch.empty()) fail(ErrorKind::ShapeMismatch, "empty batch");
    BatchResult<Real> result;
    const Real chunk_scale = static_cast<Real>(loss_scale / static_cast<double>(batch.size()));
    for (std::size_t start = 0; start < batch.size(); start += kGradChunk) {
        std::size_t stop = std::min(batch.size(), start + kGradChunk);
        Tape<Real> tape;
        ParamVars<Real> pv = upload_params(tape, lp);
        Var chunk_sum{-1};
        for (std::size_t i = start; i < stop; ++i) {
            ForwardVars fwd = graphnet_forward(tape, cfg, pv, head, batch[i].z, batch[i].feats);
            Var loss = loss_fn(tape, fwd, batch[i]);
            chunk_sum = chunk_sum.id < 0 ? loss : tape.add(chunk_sum, loss);
        }
        result.loss_sum += static_cast<double>(tape.value(chunk_sum)(0, 0));
        if (want_grads) {
            Var objective = tape.scale(chunk_sum, chunk_scale);
            tape.backward(objective);
            accumulate_grads(tape, pv, result.grads);
        }
    }
    check_finite(result.loss_sum);
    return result;
}

ParamStore grads_to_store(const ParamStore& like, const std::map<std::string, std::vector<double>>& grads) {
    ParamStore out;
    for (const ParamStore::Entry& e : like) {
        auto it = grads.find(e.name);
        if (it == grads.end()) fail(ErrorKind::ShapeMismatch, "missing gradient for '" + e.name + "'");
        std::vector<float> values(it->second.size());
        for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(it->second[i]);
        out.add(e.name, e.shape, std::move(values));
    }
    return out;
}

template <typename ExampleT, typename LossFn>
ShadowResult shadow_impl(const ModelConfig& cfg, const ParamStore& params, ModelHead head,
                         std::span<const ExampleT> batch, bool want_grads, const ShadowPerturbation* perturb,
                         LossFn&& loss_fn) {
    LoadedParams<double> lp = LoadedParams<double>::load(cfg, head, params);
    if (perturb != nullptr) {
        auto it = lp.tensors.find(perturb->name);
        if (it == lp.tensors.end()) fail(ErrorKind::ShapeMismatch, "unknown tensor '" + perturb->name + "'");
        if (static_cast<Eigen::Index>(perturb->index) >= it->second.size())
            fail(ErrorKind::ShapeMismatch, "perturbation index out of range");
        it->second.data()[perturb->index] += perturb->delta;
    }
    BatchResult<double> r = run_batch<double>(cfg, lp, head, batch, 1.0, want_grads, loss_fn);
    ShadowResult out;
    out.loss = r.loss_sum / static_cast<double>(batch.size());
    out.grads = std::move(r.grads);
    return out;
}

} // namespace

ParamStore init_params(const ModelConfig& cfg, ModelHead head, std::uint64_t seed) {
    cfg.validate();
    ParamStore store;
    detail::for_each_tensor(cfg, head, [&](const std::string& name, int rows, int cols) {
        std::vector<float> values(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols), 0.0f);
        if (rows > 1) {
            double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
            Rng rng(mix_seed(seed, hash_name(name)));
            for (float& v : values) v = static_cast<float>(rng.uniform(-a, a));
        }
        store.add(name, {static_cast<std::uint64_t>(rows), static_cast<std::uint64_t>(cols)}, std::move(values));
    });
    return store;
}

DenoiserModel::DenoiserModel(ModelConfig cfg, ParamStore params) : cfg_(cfg) { set_params(std::move(params)); }

void DenoiserModel::set_params(ParamStore params) {
    loaded_ = LoadedParams<float>::load(cfg_, ModelHead::Denoiser, params);
    params_ = std::move(params);
}

Logits DenoiserModel::predict(const NoisyGraph& z, const FeatureBundle& feats) const {
    Tape<float> tape;
    ParamVars<float> pv = upload_params(tape, loaded_);
    ForwardVars fwd = graphnet_forward(tape, cfg_, pv, ModelHead::Denoiser, z, feats);
    Logits out;
    out.nodes = tape.value(fwd.node_logits).cast<double>();
    out.edges = tape.value(fwd.edge_logits).cast<double>();
    return out;
}

RegressorModel::RegressorModel(ModelConfig cfg, ParamStore params) : cfg_(cfg) { set_params(std::move(params)); }

void RegressorModel::set_params(ParamStore params) {
    loaded_ = LoadedParams<float>::load(cfg_, ModelHead::Regressor, params);
    params_ = std::move(params);
}

Eigen::Vector2d RegressorModel::predict(const NoisyGraph& z, const FeatureBundle& feats) const {
    Tape<float> tape;
    ParamVars<float> pv = upload_params(tape, loaded_);
    ForwardVars fwd = graphnet_forward(tape, cfg_, pv, ModelHead::Regressor, z, feats);
    const Mat<float>& v = tape.value(fwd.regression);
    return {static_cast<double>(v(0, 0)), static_cast<double>(v(0, 1))};
}

InputGrads RegressorModel::input_gradients(const NoisyGraph& z, const FeatureBundle& feats,
                                           const Eigen::Vector2d& target) const {
    if (!target.allFinite()) fail(ErrorKind::NonFiniteGuidance, "guidance target is not finite");
    Tape<float> tape;
    ParamVars<float> pv = upload_params(tape, loaded_);
    ForwardVars fwd = graphnet_forward(tape, cfg_, pv, ModelHead::Regressor, z, feats);
    Mat<float> target_row(1, 2);
    target_row << static_cast<float>(target[0]), static_cast<float>(target[1]);
    Var err = tape.squared_error_sum(fwd.regression, target_row);
    tape.backward(err);

    int n = z.n();
    InputGrads out;
    out.nodes = tape.grad(fwd.node_input).cast<double>();
    Eigen::MatrixXd raw = tape.grad(fwd.edge_input).cast<double>();
    out.edges = Eigen::MatrixXd::Zero(raw.rows(), raw.cols());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            // The (i,j) and (j,i) one-hot slots move together, so the
            // effective gradient is the sum over the tied pair.
            out.edges.row(i * n + j) = raw.row(i * n + j) + raw.row(j * n + i);
        }
    return out;
}

double denoiser_loss(const ModelConfig& cfg, const ParamStore& params, const MolGraph& g, const NoisyGraph& z,
                     const FeatureBundle& feats, double lambda_edge) {
    DenoiserExample ex{&g, z, feats};
    return denoiser_gradients(cfg, params, std::span<const DenoiserExample>(&ex, 1), lambda_edge, 1.0, nullptr);
}

double regressor_loss(const ModelConfig& cfg, const ParamStore& params, const NoisyGraph& z,
                      const FeatureBundle& feats, const Eigen::Vector2d& target) {
    RegressorExample ex{z, feats, target};
    return regressor_gradients(cfg, params, std::span<const RegressorExample>(&ex, 1), 1.0, nullptr);
}

double denoiser_gradients(const ModelConfig& cfg, const ParamStore& params, std::span<const DenoiserExample> batch,
                          double lambda_edge, double loss_scale, ParamStore* grads_out) {
    LoadedParams<float> lp = LoadedParams<float>::load(cfg, ModelHead::Denoiser, params);
    auto loss_fn = [lambda_edge](Tape<float>& tape, const ForwardVars& fwd, const DenoiserExample& ex) {
        return denoiser_loss_var(tape, fwd, *ex.clean, static_cast<float>(lambda_edge));
    };
    BatchResult<float> r = run_batch<float>(cfg, lp, ModelHead::Denoiser, batch, loss_scale, grads_out != nullptr,
                                            loss_fn);
    if (grads_out != nullptr) *grads_out = grads_to_store(params, r.grads);
    return r.loss_sum / static_cast<double>(batch.size());
}

double regressor_gradients(const ModelConfig& cfg, const ParamStore& params, std::span<const RegressorExample> batch,
                           double loss_scale, ParamStore* grads_out) {
    LoadedParams<float> lp = LoadedParams<float>::load(cfg, ModelHead::Regressor, params);
    auto loss_fn = [](Tape<float>& tape, const ForwardVars& fwd, const RegressorExample& ex) {
        Mat<float> target(1, 2);
        target << static_cast<float>(ex.target[0]), static_cast<float>(ex.target[1]);
        return tape.mse_to(fwd.regression, std::move(target));
    };
    BatchResult<float> r = run_batch<float>(cfg, lp, ModelHead::Regressor, batch, loss_scale, grads_out != nullptr,
                                            loss_fn);
    if (grads_out != nullptr) *grads_out = grads_to_store(params, r.grads);
    return r.loss_sum / static_cast<double>(batch.size());
}

ShadowResult denoiser_shadow(const ModelConfig& cfg, const ParamStore& params, std::span<const DenoiserExample> batch,
                             double lambda_edge, bool want_grads, const ShadowPerturbation* perturb) {
    auto loss_fn = [lambda_edge](Tape<double>& tape, const ForwardVars& fwd, const DenoiserExample& ex) {
        return denoiser_loss_var(tape, fwd, *ex.clean, lambda_edge);
    };
    return shadow_impl(cfg, params, ModelHead::Denoiser, batch, want_grads, perturb, loss_fn);
}

ShadowResult regressor_shadow(const ModelConfig& cfg, const ParamStore& params,
                              std::span<const RegressorExample> batch, bool want_grads,
                              const ShadowPerturbation* perturb) {
    auto loss_fn = [](Tape<double>& tape, const ForwardVars& fwd, const RegressorExample& ex) {
        Mat<double> target(1, 2);
        target << ex.target[0], ex.target[1];
        return tape.mse_to(fwd.regression, std::move(target));
    };
    return shadow_impl(cfg, params, ModelHead::Regressor, batch, want_grads, perturb, loss_fn);
}

namespace {

void check_congruent(const ParamStore& a, const ParamStore& b, const char* what) {
    if (!a.congruent_with(b)) fail(ErrorKind::ShapeMismatch, std::string("stores not congruent in ") + what);
}

ParamStore zeros_like(const ParamStore& like) {
    ParamStore out;
    for (const ParamStore::Entry& e : like)
        out.add(e.name, e.shape, std::vector<float>(e.values.size(), 0.0f));
    return out;
}

} // namespace

void adamw_step(ParamStore& params, const ParamStore& grads, OptimizerState& state, const OptimizerConfig& opt) {
    check_congruent(params, grads, "adamw_step");
    if (state.m.empty()) state.m = zeros_like(params);
    if (state.v.empty()) state.v = zeros_like(params);
    check_congruent(params, state.m, "adamw_step moments");
    check_congruent(params, state.v, "adamw_step moments");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        ParamStore::Entry& p = params.entry(i);
        const ParamStore::Entry& g = grads.entry(i);
        ParamStore::Entry& m = state.m.entry(i);
        ParamStore::Entry& v = state.v.entry(i);
        for (std::size_t k = 0; k < p.values.size(); ++k) {
            double gk = g.values[k];
            double mk = opt.beta1 * m.values[k] + (1.0 - opt.beta1) * gk;
            double vk = opt.beta2 * v.values[k] + (1.0 - opt.beta2) * gk * gk;
            m.values[k] = static_cast<float>(mk);
            v.values[k] = static_cast<float>(vk);
            double update = (mk / bc1) / (std::sqrt(vk / bc2) + opt.eps) + opt.weight_decay * p.values[k];
            p.values[k] = static_cast<float>(p.values[k] - opt.lr * update);
        }
    }
}

void sgd_step(ParamStore& params, const ParamStore& grads, double lr) {
    check_congruent(params, grads, "sgd_step");
    for (std::size_t i = 0; i < params.size(); ++i) {
        ParamStore::Entry& p = params.entry(i);
        const ParamStore::Entry& g = grads.entry(i);
        for (std::size_t k = 0; k < p.values.size(); ++k)
            p.values[k] = static_cast<float>(p.values[k] - lr * static_cast<double>(g.values[k]));
    }
}

void optimizer_step(ParamStore& params, const ParamStore& grads, OptimizerState& state, const OptimizerConfig& opt) {
    if (opt.kind == OptimizerConfig::Kind::AdamW)
        adamw_step(params, grads, state, opt);
    else
        sgd_step(params, grads, opt.lr);
}

NoisyGraph guided_reverse_step(const DenoiserModel& denoiser, const RegressorModel& regressor, const NoisyGraph& z_t,
                               const FeatureBundle& feats, const Eigen::Vector2d& target, double lambda_g,
                               const TransitionModel& model, const NoiseSchedule& schedule, Rng& rng) {
    Logits logits = denoiser.predict(z_t, feats);
    InputGrads grads = regressor.input_gradients(z_t, feats, target);
    return guided_reverse_step_from(logits, grads, z_t, model, schedule, lambda_g, rng);
}

} // namespace fedmol
