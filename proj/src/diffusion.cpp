#include "fedmol/diffusion.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "fedmol/error.hpp"

namespace fedmol {

namespace {

constexpr double kMarginalFloor = 1e-6;

Eigen::Vector4d floored_marginal(Eigen::Vector4d m, const char* what) {
    double sum = m.sum();
    if (!(sum > 0.0) || !m.allFinite() || m.minCoeff() < 0.0)
        fail(ErrorKind::Internal, std::string(what) + " marginal is not a nonnegative finite vector");
    m /= sum;
    // Floor entries so every KL term over the chain stays finite, then
    // renormalize to keep the distribution exact.
    m = m.cwiseMax(kMarginalFloor);
    m /= m.sum();
    return m;
}

Eigen::Matrix4d mix_matrix(const Eigen::Vector4d& m, double keep) {
    return keep * Eigen::Matrix4d::Identity() + (1.0 - keep) * Eigen::Vector4d::Ones() * m.transpose();
}

void check_logits_finite(const Logits& logits) {
    if (!logits.nodes.allFinite() || !logits.edges.allFinite())
        fail(ErrorKind::NonFiniteLogits, "denoiser produced non-finite logits");
}

Eigen::MatrixXd row_softmax(const Eigen::MatrixXd& logits) {
    Eigen::MatrixXd out(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        Eigen::RowVectorXd shifted = logits.row(r).array() - logits.row(r).maxCoeff();
        Eigen::RowVectorXd ex = shifted.array().exp();
        out.row(r) = ex / ex.sum();
    }
    return out;
}

double kl_divergence(const Eigen::Vector4d& q, const Eigen::Vector4d& p) {
    double kl = 0.0;
    for (int i = 0; i < 4; ++i) {
        if (q[i] <= 0.0) continue;
        kl += q[i] * (std::log(q[i]) - std::log(std::max(p[i], 1e-300)));
    }
    return kl;
}

/// p(z_{t-1} = j | z_t) = sum_x phat[x] * posterior(j | z_t, x), computed as
/// v[j] = Q_t[j, z] * sum_x (phat[x] / Qbar_t[x, z]) * Qbar_{t-1}[x, j].
Eigen::Vector4d mix_posteriors(const Eigen::Vector4d& phat, int z, const Eigen::Matrix4d& qbar_prev,
                               const Eigen::Matrix4d& qbar_cur, const Eigen::Matrix4d& q_cur) {
    Eigen::Vector4d w;
    for (int x = 0; x < 4; ++x) {
        double denom = qbar_cur(x, z);
        if (denom <= 0.0) fail(ErrorKind::DegenerateDenominator, "Qbar_t[x, z_t] is zero");
        w[x] = phat[x] / denom;
    }
    Eigen::Vector4d v;
    for (int j = 0; j < 4; ++j) v[j] = q_cur(j, z) * qbar_prev.col(j).dot(w);
    return v;
}

} // namespace

NoiseSchedule NoiseSchedule::cosine(int steps) {
    if (steps < 1) fail(ErrorKind::InvalidStepCount, "schedule needs at least 1 step");
    NoiseSchedule s;
    s.abar_.resize(static_cast<std::size_t>(steps) + 1);
    const double offset = 0.008;
    auto f = [&](double u) {
        double c = std::cos((std::numbers::pi / 2.0) * (u + offset) / (1.0 + offset));
        return c * c;
    };
    double f0 = f(0.0);
    for (int t = 0; t <= steps; ++t) {
        double v = f(static_cast<double>(t) / steps) / f0;
        s.abar_[static_cast<std::size_t>(t)] = std::clamp(v, 1e-6, 1.0);
    }
    s.abar_[0] = 1.0;
    return s;
}

NoiseSchedule NoiseSchedule::from_alpha_bar(std::vector<double> abar) {
    if (abar.size() < 2) fail(ErrorKind::InvalidStepCount, "schedule needs at least 1 step");
    if (abar.front() != 1.0) fail(ErrorKind::Internal, "abar[0] must be 1");
    for (std::size_t i = 0; i < abar.size(); ++i) {
        if (!(abar[i] >= 1e-12 && abar[i] <= 1.0)) fail(ErrorKind::Internal, "abar values must lie in (0, 1]");
        if (i > 0 && abar[i] > abar[i - 1]) fail(ErrorKind::Internal, "abar must be non-increasing");
    }
    NoiseSchedule s;
    s.abar_ = std::move(abar);
    return s;
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t < 0 || t > steps()) fail(ErrorKind::StepOutOfRange, "t = " + std::to_string(t));
    return abar_[static_cast<std::size_t>(t)];
}

double NoiseSchedule::beta(int t) const {
    if (t < 1 || t > steps()) fail(ErrorKind::StepOutOfRange, "t = " + std::to_string(t));
    return abar_[static_cast<std::size_t>(t)] / abar_[static_cast<std::size_t>(t) - 1];
}

TransitionModel TransitionModel::uniform() {
    TransitionModel m;
    m.node_marginals.setConstant(0.25);
    m.edge_marginals.setConstant(0.25);
    return m;
}

TransitionModel TransitionModel::from_marginals(const Eigen::Vector4d& nodes, const Eigen::Vector4d& edges) {
    TransitionModel m;
    m.node_marginals = floored_marginal(nodes, "node");
    m.edge_marginals = floored_marginal(edges, "edge");
    return m;
}

Eigen::Matrix4d qbar_matrix(const TransitionModel& model, const NoiseSchedule& schedule, int t, Channel channel) {
    double abar = schedule.alpha_bar(t);
    const Eigen::Vector4d& m = channel == Channel::Nodes ? model.node_marginals : model.edge_marginals;
    return mix_matrix(m, abar);
}

TransitionMatrices transition_matrices(const TransitionModel& model, const NoiseSchedule& schedule, int t) {
    if (t < 1 || t > schedule.steps()) fail(ErrorKind::StepOutOfRange, "t = " + std::to_string(t));
    TransitionMatrices out;
    out.qbar_nodes = mix_matrix(model.node_marginals, schedule.alpha_bar(t));
    out.qbar_edges = mix_matrix(model.edge_marginals, schedule.alpha_bar(t));
    out.q_nodes = mix_matrix(model.node_marginals, schedule.beta(t));
    out.q_edges = mix_matrix(model.edge_marginals, schedule.beta(t));
    return out;
}

NoisyGraph::NoisyGraph(int n, int t) : n_(n), t_(t) {
    if (n < 1 || n > kMaxAtoms) fail(ErrorKind::Internal, "graph size " + std::to_string(n));
    nodes_.assign(static_cast<std::size_t>(n), 0);
    edges_.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0);
}

NoisyGraph NoisyGraph::from_graph(const MolGraph& g, int t) {
    NoisyGraph z(g.size(), t);
    for (int i = 0; i < g.size(); ++i) z.set_node(i, static_cast<int>(g.node(i)));
    for (int i = 0; i < g.size(); ++i)
        for (int j = i + 1; j < g.size(); ++j) z.set_edge(i, j, static_cast<int>(g.edge(i, j)));
    return z;
}

void NoisyGraph::set_node(int i, int category) {
    if (category < 0 || category >= kNodeCategories) fail(ErrorKind::Internal, "node category out of range");
    nodes_[static_cast<std::size_t>(i)] = category;
}

void NoisyGraph::set_edge(int i, int j, int category) {
    if (category < 0 || category >= kEdgeCategories) fail(ErrorKind::Internal, "edge category out of range");
    if (i == j) fail(ErrorKind::Internal, "diagonal edge cells are fixed to NoBond");
    edges_[static_cast<std::size_t>(i * n_ + j)] = category;
    edges_[static_cast<std::size_t>(j * n_ + i)] = category;
}

Eigen::MatrixXd NoisyGraph::nodes_onehot() const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n_, kNodeCategories);
    for (int i = 0; i < n_; ++i) out(i, nodes_[static_cast<std::size_t>(i)]) = 1.0;
    return out;
}

Eigen::MatrixXd NoisyGraph::edges_onehot() const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_) * n_, kEdgeCategories);
    for (int i = 0; i < n_ * n_; ++i) out(i, edges_[static_cast<std::size_t>(i)]) = 1.0;
    return out;
}

MolGraph NoisyGraph::to_molgraph() const {
    MolGraph g(n_);
    for (int i = 0; i < n_; ++i) g.set_node(i, static_cast<AtomKind>(node(i)));
    for (int i = 0; i < n_; ++i)
        for (int j = i + 1; j < n_; ++j)
            if (edge(i, j) != 0) g.set_edge(i, j, static_cast<BondKind>(edge(i, j)));
    return g;
}

NoisyGraph apply_noise(const MolGraph& g, int t, const TransitionModel& model, const NoiseSchedule& schedule,
                       Rng& rng) {
    if (t < 0 || t > schedule.steps()) fail(ErrorKind::StepOutOfRange, "t = " + std::to_string(t));
    NoisyGraph z(g.size(), t);
    Eigen::Matrix4d qn = qbar_matrix(model, schedule, t, Channel::Nodes);
    Eigen::Matrix4d qe = qbar_matrix(model, schedule, t, Channel::Edges);
    for (int i = 0; i < g.size(); ++i) {
        Eigen::RowVector4d row = qn.row(static_cast<int>(g.node(i)));
        z.set_node(i, static_cast<int>(rng.categorical(std::span<const double>(row.data(), 4))));
    }
    for (int i = 0; i < g.size(); ++i) {
        for (int j = i + 1; j < g.size(); ++j) {
            Eigen::RowVector4d row = qe.row(static_cast<int>(g.edge(i, j)));
            z.set_edge(i, j, static_cast<int>(rng.categorical(std::span<const double>(row.data(), 4))));
        }
    }
    return z;
}

Eigen::Vector4d posterior_distribution(int z_t_category, int clean_category, int t, Channel channel,
                                       const TransitionModel& model, const NoiseSchedule& schedule) {
    if (t < 1 || t > schedule.steps()) fail(ErrorKind::StepOutOfRange, "t = " + std::to_string(t));
    const Eigen::Vector4d& m = channel == Channel::Nodes ? model.node_marginals : model.edge_marginals;
    Eigen::Matrix4d qbar_prev = mix_matrix(m, schedule.alpha_bar(t - 1));
    Eigen::Matrix4d qbar_cur = mix_matrix(m, schedule.alpha_bar(t));
    Eigen::Matrix4d q_cur = mix_matrix(m, schedule.beta(t));
    double denom = qbar_cur(clean_category, z_t_category);
    if (denom <= 0.0) fail(ErrorKind::DegenerateDenominator, "Qbar_t[x, z_t] is zero");
    Eigen::Vector4d post;
    for (int j = 0; j < 4; ++j) post[j] = q_cur(j, z_t_category) * qbar_prev(clean_category, j) / denom;
    return post;
}

FeatureBundle extra_features(const NoisyGraph& z, int total_steps) {
    int n = z.n();
    Eigen::MatrixXd adj = Eigen::MatrixXd::Zero(n, n);
    int bond_count = 0;
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            if (z.edge(i, j) != 0) {
                adj(i, j) = adj(j, i) = 1.0;
                ++bond_count;
            }
        }
    }
    Eigen::MatrixXd a2 = adj * adj;
    Eigen::MatrixXd a3 = a2 * adj;

    FeatureBundle out;
    out.node_features = Eigen::MatrixXd::Zero(n, kNodeFeatureDim);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            int cat = z.edge(i, j);
            if (j != i && cat != 0) out.node_features(i, cat - 1) += 1.0;
        }
        out.node_features(i, 3) = a3(i, i) / 2.0;
        out.node_features(i, 4 + z.node(i)) = 1.0;
    }

    Eigen::VectorXd deg = adj.rowwise().sum();
    double tr3 = a3.trace();
    double tr4 = (a2 * a2).trace();
    double tr5 = (a3 * a2).trace();
    double sum_d2 = deg.squaredNorm();
    double c3 = tr3 / 6.0;
    double c4 = (tr4 + 2.0 * bond_count - 2.0 * sum_d2) / 8.0;
    double walk5_correction = 0.0;
    for (int i = 0; i < n; ++i) walk5_correction += (deg[i] - 2.0) * a3(i, i);
    double c5 = (tr5 - 5.0 * tr3 - 5.0 * walk5_correction) / 10.0;

    Eigen::MatrixXd lap = Eigen::MatrixXd(deg.asDiagonal()) - adj;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(lap, Eigen::EigenvaluesOnly);
    Eigen::VectorXd eig = solver.eigenvalues();
    int components = 0;
    for (int i = 0; i < n; ++i)
        if (eig[i] < 1e-6) ++components;

    out.graph_features.resize(kGraphFeatureDim);
    out.graph_features[0] = static_cast<double>(n) / kMaxAtoms;
    out.graph_features[1] = static_cast<double>(bond_count) / (static_cast<double>(n) * n);
    out.graph_features[2] = c3;
    out.graph_features[3] = c4;
    out.graph_features[4] = c5;
    for (int i = 0; i < 5; ++i) out.graph_features[5 + i] = i < n ? eig[i] : 0.0;
    out.graph_features[10] = static_cast<double>(components);
    out.graph_features[11] = static_cast<double>(z.t()) / static_cast<double>(total_steps);
    if (!out.node_features.allFinite() || !out.graph_features.allFinite())
        fail(ErrorKind::Internal, "non-finite feature");
    return out;
}

ReverseDistributions reverse_distributions(const Logits& logits, const NoisyGraph& z_t, const TransitionModel& model,
                                           const NoiseSchedule& schedule) {
    check_logits_finite(logits);
    int t = z_t.t();
    if (t < 1) fail(ErrorKind::StepOutOfRange, "reverse step needs t >= 1");
    TransitionMatrices mats = transition_matrices(model, schedule, t);
    Eigen::Matrix4d qbar_prev_n = qbar_matrix(model, schedule, t - 1, Channel::Nodes);
    Eigen::Matrix4d qbar_prev_e = qbar_matrix(model, schedule, t - 1, Channel::Edges);

    int n = z_t.n();
    ReverseDistributions out;
    out.nodes.resize(n, 4);
    out.edges.resize(static_cast<Eigen::Index>(n) * n, 4);
    Eigen::MatrixXd phat_nodes = row_softmax(logits.nodes);
    Eigen::MatrixXd phat_edges = row_softmax(logits.edges);
    for (int i = 0; i < n; ++i) {
        Eigen::Vector4d p = mix_posteriors(phat_nodes.row(i).transpose(), z_t.node(i), qbar_prev_n, mats.qbar_nodes,
                                           mats.q_nodes);
        out.nodes.row(i) = p.transpose();
    }
    out.edges.setZero();
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            Eigen::Vector4d p = mix_posteriors(phat_edges.row(i * n + j).transpose(), z_t.edge(i, j), qbar_prev_e,
                                               mats.qbar_edges, mats.q_edges);
            out.edges.row(i * n + j) = p.transpose();
        }
    }
    return out;
}

namespace {

NoisyGraph sample_from_distributions(const ReverseDistributions& dists, const NoisyGraph& z_t, Rng& rng) {
    int n = z_t.n();
    NoisyGraph z(n, z_t.t() - 1);
    for (int i = 0; i < n; ++i) {
        Eigen::RowVector4d row = dists.nodes.row(i);
        z.set_node(i, static_cast<int>(rng.categorical(std::span<const double>(row.data(), 4))));
    }
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            Eigen::RowVector4d row = dists.edges.row(i * n + j);
            z.set_edge(i, j, static_cast<int>(rng.categorical(std::span<const double>(row.data(), 4))));
        }
    }
    return z;
}

} // namespace

NoisyGraph reverse_step(const Logits& logits, const NoisyGraph& z_t, const TransitionModel& model,
                        const NoiseSchedule& schedule, Rng& rng) {
    return sample_from_distributions(reverse_distributions(logits, z_t, model, schedule), z_t, rng);
}

ReverseDistributions guided_reverse_distributions(const Logits& logits, const InputGrads& grads,
                                                  const NoisyGraph& z_t, const TransitionModel& model,
                                                  const NoiseSchedule& schedule, double lambda_g) {
    ReverseDistributions dists = reverse_distributions(logits, z_t, model, schedule);
    auto reweight = [lambda_g](Eigen::MatrixXd& p, const Eigen::MatrixXd& g, Eigen::Index row) {
        // Downweights categories whose one-hot direction increases the
        // property error: p'(c) ~ p(c) * exp(-lambda * dE/dx_c).
        Eigen::Array4d shifted = -lambda_g * g.row(row).transpose().array();
        shifted -= shifted.maxCoeff();
        Eigen::Array4d w = shifted.exp();
        Eigen::Array4d updated = p.row(row).transpose().array() * w;
        double total = updated.sum();
        if (!(total > 0.0) || !std::isfinite(total))
            fail(ErrorKind::NonFiniteGuidance, "guidance reweighting collapsed a cell distribution");
        p.row(row) = (updated / total).transpose();
    };
    int n = z_t.n();
    for (int i = 0; i < n; ++i) reweight(dists.nodes, grads.nodes, i);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j) reweight(dists.edges, grads.edges, static_cast<Eigen::Index>(i) * n + j);
    return dists;
}

NoisyGraph guided_reverse_step_from(const Logits& logits, const InputGrads& grads, const NoisyGraph& z_t,
                                    const TransitionModel& model, const NoiseSchedule& schedule, double lambda_g,
                                    Rng& rng) {
    return sample_from_distributions(guided_reverse_distributions(logits, grads, z_t, model, schedule, lambda_g),
                                     z_t, rng);
}

double nll_bound(const DenoiserOracle& denoiser, const MolGraph& g, const TransitionModel& model,
                 const NoiseSchedule& schedule, int mc_samples, Rng& rng) {
    if (mc_samples < 1) fail(ErrorKind::Internal, "mc_samples must be >= 1");
    int T = schedule.steps();
    int n = g.size();
    NoisyGraph clean = NoisyGraph::from_graph(g, 0);

    // Prior term: sum of per-cell KL(q(z_T | g) || m). Closed form, no MC.
    double prior = 0.0;
    Eigen::Matrix4d qbar_T_n = qbar_matrix(model, schedule, T, Channel::Nodes);
    Eigen::Matrix4d qbar_T_e = qbar_matrix(model, schedule, T, Channel::Edges);
    for (int i = 0; i < n; ++i)
        prior += kl_divergence(qbar_T_n.row(static_cast<int>(g.node(i))).transpose(), model.node_marginals);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            prior += kl_divergence(qbar_T_e.row(static_cast<int>(g.edge(i, j))).transpose(), model.edge_marginals);

    double diffusion = 0.0;
    double reconstruction = 0.0;
    for (int s = 0; s < mc_samples; ++s) {
        if (T >= 2) {
            int t = 2 + static_cast<int>(rng.uniform_index(static_cast<std::size_t>(T - 1)));
            NoisyGraph z_t = apply_noise(g, t, model, schedule, rng);
            Logits logits = denoiser.predict(z_t, extra_features(z_t, T));
            ReverseDistributions p_model = reverse_distributions(logits, z_t, model, schedule);
            double step_kl = 0.0;
            for (int i = 0; i < n; ++i) {
                Eigen::Vector4d q = posterior_distribution(z_t.node(i), clean.node(i), t, Channel::Nodes, model,
                                                           schedule);
                step_kl += kl_divergence(q, p_model.nodes.row(i).transpose());
            }
            for (int i = 0; i < n; ++i) {
                for (int j = i + 1; j < n; ++j) {
                    Eigen::Vector4d q = posterior_distribution(z_t.edge(i, j), clean.edge(i, j), t, Channel::Edges,
                                                               model, schedule);
                    step_kl += kl_divergence(q, p_model.edges.row(i * n + j).transpose());
                }
            }
            diffusion += static_cast<double>(T) * step_kl;
        }
        NoisyGraph z_1 = apply_noise(g, 1, model, schedule, rng);
        Logits logits_1 = denoiser.predict(z_1, extra_features(z_1, T));
        check_logits_finite(logits_1);
        Eigen::MatrixXd phat_n = row_softmax(logits_1.nodes);
        Eigen::MatrixXd phat_e = row_softmax(logits_1.edges);
        double log_prob = 0.0;
        for (int i = 0; i < n; ++i) log_prob += std::log(std::max(phat_n(i, clean.node(i)), 1e-300));
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) log_prob += std::log(std::max(phat_e(i * n + j, clean.edge(i, j)), 1e-300));
        reconstruction -= log_prob;
    }

    return prior + (diffusion + reconstruction) / mc_samples;
}

SampleResult sample_chain(const DenoiserOracle& denoiser, const GuidanceOracle* guidance,
                          const TransitionModel& model, const NoiseSchedule& schedule, int n_atoms, int steps,
                          Rng& rng, const SampleOptions& options) {
    if (n_atoms < 1 || n_atoms > kMaxAtoms) fail(ErrorKind::Internal, "n_atoms = " + std::to_string(n_atoms));
    if (steps != schedule.steps())
        fail(ErrorKind::StepOutOfRange, "steps must equal the schedule length");

    NoisyGraph z(n_atoms, schedule.steps());
    for (int i = 0; i < n_atoms; ++i)
        z.set_node(i, static_cast<int>(rng.categorical(
                          std::span<const double>(model.node_marginals.data(), 4))));
    for (int i = 0; i < n_atoms; ++i)
        for (int j = i + 1; j < n_atoms; ++j)
            z.set_edge(i, j, static_cast<int>(rng.categorical(
                                 std::span<const double>(model.edge_marginals.data(), 4))));

    SampleResult result;
    if (options.collect_trajectory) result.trajectory.push_back(z);
    Eigen::Vector2d target = options.guidance_target.value_or(Eigen::Vector2d::Zero());
    for (int t = schedule.steps(); t >= 1; --t) {
        FeatureBundle feats = extra_features(z, schedule.steps());
        Logits logits = denoiser.predict(z, feats);
        if (guidance != nullptr && options.guidance_target.has_value()) {
            InputGrads grads = guidance->input_gradients(z, feats, target);
            z = guided_reverse_step_from(logits, grads, z, model, schedule, options.lambda_g, rng);
        } else {
            z = reverse_step(logits, z, model, schedule, rng);
        }
        if (options.collect_trajectory) result.trajectory.push_back(z);
    }
    result.graph = z.to_molgraph();
    return result;
}

void write_trajectory_tsv(const std::vector<NoisyGraph>& trajectory, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::UnreadableFile, "cannot open '" + path + "' for writing");
    for (const NoisyGraph& z : trajectory) {
        out << z.t() << '\t';
        try {
            out << write_smiles(z.to_molgraph());
        } catch (const Error&) {
            out << "invalid";
        }
        out << '\n';
    }
}

} // namespace fedmol
