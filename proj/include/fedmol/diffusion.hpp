#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "fedmol/molgraph.hpp"
#include "fedmol/rng.hpp"

namespace fedmol {

/// Cosine alpha-bar schedule over T steps. alpha_bar(0) == 1 and the values
/// decrease monotonically, clamped to [1e-6, 1].
class NoiseSchedule {
  public:
    static NoiseSchedule cosine(int steps);
    /// Builds from explicit alpha_bar values (index 0..T); validates monotonicity
    /// and range so tests can drive custom schedules.
    static NoiseSchedule from_alpha_bar(std::vector<double> abar);

    int steps() const { return static_cast<int>(abar_.size()) - 1; }
    double alpha_bar(int t) const;
    /// beta_t = alpha_bar(t) / alpha_bar(t-1), the per-step keep probability.
    double beta(int t) const;

  private:
    std::vector<double> abar_;
};

/// Target marginal distributions for the node and edge channels. Entries are
/// floored at 1e-6 and renormalized so KL terms stay finite.
struct TransitionModel {
    Eigen::Vector4d node_marginals;
    Eigen::Vector4d edge_marginals;

    static TransitionModel uniform();
    static TransitionModel from_marginals(const Eigen::Vector4d& nodes, const Eigen::Vector4d& edges);
};

enum class Channel { Nodes, Edges };

/// Q_bar_t = alpha_bar(t) I + (1 - alpha_bar(t)) 1 m^T and the single-step
/// Q_t of the same form with beta_t. Rows index the source category.
struct TransitionMatrices {
    Eigen::Matrix4d qbar_nodes, qbar_edges;
    Eigen::Matrix4d q_nodes, q_edges;
};

TransitionMatrices transition_matrices(const TransitionModel& model, const NoiseSchedule& schedule, int t);

/// Q_bar for one channel; accepts t = 0 (identity).
Eigen::Matrix4d qbar_matrix(const TransitionModel& model, const NoiseSchedule& schedule, int t, Channel channel);

/// A graph state in the diffusion chain: categorical node and edge labels at
/// step t. Edges are stored as a dense n x n category matrix, kept symmetric
/// with a zero (NoBond) diagonal.
class NoisyGraph {
  public:
    NoisyGraph(int n, int t);
    static NoisyGraph from_graph(const MolGraph& g, int t);

    int n() const { return n_; }
    int t() const { return t_; }
    int node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
    int edge(int i, int j) const { return edges_[static_cast<std::size_t>(i * n_ + j)]; }
    void set_node(int i, int category);
    void set_edge(int i, int j, int category);

    /// n x 4 one-hot node matrix.
    Eigen::MatrixXd nodes_onehot() const;
    /// n*n x 4 one-hot edge matrix in row-major (i*n + j) order.
    Eigen::MatrixXd edges_onehot() const;

    /// Argmax-free decode: category values become atom/bond kinds directly.
    MolGraph to_molgraph() const;

    bool operator==(const NoisyGraph&) const = default;

  private:
    int n_;
    int t_;
    std::vector<int> nodes_;
    std::vector<int> edges_;
};

/// Model inputs derived from a noisy graph: per-node structural features and
/// graph-level descriptors (counts, cycle counts, Laplacian spectrum, t/T).
struct FeatureBundle {
    Eigen::MatrixXd node_features;  // n x kNodeFeatureDim
    Eigen::VectorXd graph_features; // kGraphFeatureDim
};

inline constexpr int kNodeFeatureDim = 8;
inline constexpr int kGraphFeatureDim = 12;

FeatureBundle extra_features(const NoisyGraph& z, int total_steps);

/// Draws z_t ~ q(z_t | g) by sampling every node and every unordered edge
/// pair independently from its Q_bar_t row.
NoisyGraph apply_noise(const MolGraph& g, int t, const TransitionModel& model, const NoiseSchedule& schedule,
                       Rng& rng);

/// q(z_{t-1} = j | z_t, x) for one cell. Throws DegenerateDenominator if
/// Q_bar_t[x, z_t] vanishes.
Eigen::Vector4d posterior_distribution(int z_t_category, int clean_category, int t, Channel channel,
                                       const TransitionModel& model, const NoiseSchedule& schedule);

/// Denoiser output: unnormalized log-probabilities over clean categories.
struct Logits {
    Eigen::MatrixXd nodes; // n x 4
    Eigen::MatrixXd edges; // n*n x 4, symmetric across (i,j) <-> (j,i)
};

/// Prediction interface the diffusion routines need; the models module
/// implements it, and tests substitute oracles.
class DenoiserOracle {
  public:
    virtual ~DenoiserOracle() = default;
    virtual Logits predict(const NoisyGraph& z, const FeatureBundle& feats) const = 0;
};

/// Per-cell input gradients of || regressor(z) - target ||^2 with respect to
/// the one-hot inputs, used for guided sampling.
struct InputGrads {
    Eigen::MatrixXd nodes; // n x 4
    Eigen::MatrixXd edges; // n*n x 4, already symmetrized
};

class GuidanceOracle {
  public:
    virtual ~GuidanceOracle() = default;
    virtual InputGrads input_gradients(const NoisyGraph& z, const FeatureBundle& feats,
                                       const Eigen::Vector2d& target) const = 0;
};

/// p(z_{t-1} | z_t) per cell: posterior rows mixed by softmax(logits).
/// Returned as one distribution per node and per ordered edge slot.
struct ReverseDistributions {
    Eigen::MatrixXd nodes; // n x 4
    Eigen::MatrixXd edges; // n*n x 4
};

ReverseDistributions reverse_distributions(const Logits& logits, const NoisyGraph& z_t, const TransitionModel& model,
                                           const NoiseSchedule& schedule);

/// Samples z_{t-1} given denoiser logits at z_t.
NoisyGraph reverse_step(const Logits& logits, const NoisyGraph& z_t, const TransitionModel& model,
                        const NoiseSchedule& schedule, Rng& rng);

/// Reweights each cell distribution by exp(-lambda_g * grad) and renormalizes
/// before sampling. Throws NonFiniteGuidance if the reweighting degenerates.
NoisyGraph guided_reverse_step_from(const Logits& logits, const InputGrads& grads, const NoisyGraph& z_t,
                                    const TransitionModel& model, const NoiseSchedule& schedule, double lambda_g,
                                    Rng& rng);

ReverseDistributions guided_reverse_distributions(const Logits& logits, const InputGrads& grads,
                                                  const NoisyGraph& z_t, const TransitionModel& model,
                                                  const NoiseSchedule& schedule, double lambda_g);

/// Variational bound on -log p(g) in nats per graph:
/// prior KL + T * E_t[ sum of per-cell posterior KLs ] - E[ log p(x | z_1) ].
/// Cells are all nodes plus upper-triangle edges.
double nll_bound(const DenoiserOracle& denoiser, const MolGraph& g, const TransitionModel& model,
                 const NoiseSchedule& schedule, int mc_samples, Rng& rng);

struct SampleOptions {
    std::optional<Eigen::Vector2d> guidance_target;
    double lambda_g = 100.0;
    bool collect_trajectory = false;
};

struct SampleResult {
    MolGraph graph;
    std::vector<NoisyGraph> trajectory; // z_T .. z_0 when collected
};

/// Runs the full reverse chain from z_T ~ marginals down to z_0.
SampleResult sample_chain(const DenoiserOracle& denoiser, const GuidanceOracle* guidance,
                          const TransitionModel& model, const NoiseSchedule& schedule, int n_atoms, int steps,
                          Rng& rng, const SampleOptions& options = {});

/// Writes a sampled trajectory as TSV rows: step index, then the SMILES of
/// the decoded intermediate graph (or the literal "invalid").
void write_trajectory_tsv(const std::vector<NoisyGraph>& trajectory, const std::string& path);

} // namespace fedmol
