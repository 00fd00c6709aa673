#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "fedmol/data.hpp"
#include "fedmol/diffusion.hpp"
#include "fedmol/error.hpp"
#include "fedmol/molgraph.hpp"
#include "fedmol/rng.hpp"

using namespace fedmol;

namespace {

const double kChiSq99Df3 = 11.345; // 99th percentile of chi-square with 3 dof

TransitionModel skewed_model() {
    return TransitionModel::from_marginals(Eigen::Vector4d(0.7, 0.1, 0.1, 0.1),
                                           Eigen::Vector4d(0.85, 0.09, 0.04, 0.02));
}

// Always predicts the clean graph with near-certainty.
class CleanOracle : public DenoiserOracle {
  public:
    explicit CleanOracle(const MolGraph& g) : g_(g) {}
    Logits predict(const NoisyGraph& z, const FeatureBundle&) const override {
        int n = z.n();
        Logits out;
        out.nodes = Eigen::MatrixXd::Zero(n, 4);
        out.edges = Eigen::MatrixXd::Zero(n * n, 4);
        for (int i = 0; i < n; ++i) out.nodes(i, static_cast<int>(g_.node(i))) = 50.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                if (i != j) out.edges(i * n + j, static_cast<int>(g_.edge(i, j))) = 50.0;
        return out;
    }

  private:
    MolGraph g_;
};

class UniformOracle : public DenoiserOracle {
  public:
    Logits predict(const NoisyGraph& z, const FeatureBundle&) const override {
        int n = z.n();
        return {Eigen::MatrixXd::Zero(n, 4), Eigen::MatrixXd::Zero(n * n, 4)};
    }
};

double kl(const Eigen::Vector4d& p, const Eigen::Vector4d& q) {
    double out = 0.0;
    for (int j = 0; j < 4; ++j)
        if (p[j] > 0.0) out += p[j] * std::log(p[j] / q[j]);
    return out;
}

} // namespace

TEST_CASE("cosine schedule endpoints and shape") {
    NoiseSchedule s = NoiseSchedule::cosine(100);
    CHECK(s.steps() == 100);
    CHECK(s.alpha_bar(0) == 1.0);
    CHECK(s.alpha_bar(100) < 0.001);
    for (int t = 1; t <= 100; ++t) {
        CHECK(s.alpha_bar(t) <= s.alpha_bar(t - 1));
        CHECK(s.alpha_bar(t) >= 1e-6);
        CHECK(s.beta(t) == doctest::Approx(s.alpha_bar(t) / s.alpha_bar(t - 1)));
    }

    NoiseSchedule one = NoiseSchedule::cosine(1);
    CHECK(one.alpha_bar(0) == 1.0);
    CHECK(one.alpha_bar(1) < 0.001);

    CHECK_THROWS_AS(NoiseSchedule::cosine(0), Error);
    try {
        NoiseSchedule::cosine(-3);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::InvalidStepCount);
    }
}

TEST_CASE("from_alpha_bar validates input") {
    NoiseSchedule s = NoiseSchedule::from_alpha_bar({1.0, 0.5, 0.25});
    CHECK(s.steps() == 2);
    CHECK(s.beta(2) == doctest::Approx(0.5));
    CHECK_THROWS_AS(NoiseSchedule::from_alpha_bar({1.0}), Error);
    CHECK_THROWS_AS(NoiseSchedule::from_alpha_bar({0.9, 0.5}), Error);
    CHECK_THROWS_AS(NoiseSchedule::from_alpha_bar({1.0, 0.5, 0.6}), Error);
    CHECK_THROWS_AS(NoiseSchedule::from_alpha_bar({1.0, -0.1}), Error);
    CHECK_THROWS_AS(s.alpha_bar(3), Error);
    CHECK_THROWS_AS(s.beta(0), Error);
}

TEST_CASE("transition model marginals floored and normalized") {
    TransitionModel uni = TransitionModel::uniform();
    CHECK(uni.node_marginals.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(uni.node_marginals[2] == doctest::Approx(0.25));

    TransitionModel floored =
        TransitionModel::from_marginals(Eigen::Vector4d(1.0, 0.0, 0.0, 0.0), Eigen::Vector4d(2.0, 2.0, 0.0, 0.0));
    CHECK(floored.node_marginals.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(floored.node_marginals[1] >= 1e-7);
    CHECK(floored.edge_marginals[0] == doctest::Approx(0.5).epsilon(1e-5));
}

TEST_CASE("Chapman-Kolmogorov holds for all steps and both channels") {
    TransitionModel model = skewed_model();
    NoiseSchedule schedule = NoiseSchedule::cosine(100);
    for (int t = 1; t <= 100; ++t) {
        TransitionMatrices m = transition_matrices(model, schedule, t);
        Eigen::Matrix4d lhs_nodes = qbar_matrix(model, schedule, t - 1, Channel::Nodes) * m.q_nodes;
        Eigen::Matrix4d lhs_edges = qbar_matrix(model, schedule, t - 1, Channel::Edges) * m.q_edges;
        CHECK((lhs_nodes - m.qbar_nodes).cwiseAbs().maxCoeff() < 1e-9);
        CHECK((lhs_edges - m.qbar_edges).cwiseAbs().maxCoeff() < 1e-9);
        for (const Eigen::Matrix4d& q : {m.qbar_nodes, m.qbar_edges, m.q_nodes, m.q_edges}) {
            for (int r = 0; r < 4; ++r) {
                CHECK(q.row(r).minCoeff() >= 0.0);
                CHECK(std::abs(q.row(r).sum() - 1.0) < 1e-9);
            }
        }
    }
    CHECK_THROWS_AS(transition_matrices(model, schedule, 0), Error);
    CHECK_THROWS_AS(transition_matrices(model, schedule, 101), Error);
}

TEST_CASE("qbar limits") {
    TransitionModel model = TransitionModel::uniform();
    // t = 0 is the identity.
    NoiseSchedule s = NoiseSchedule::cosine(10);
    CHECK((qbar_matrix(model, s, 0, Channel::Nodes) - Eigen::Matrix4d::Identity()).cwiseAbs().maxCoeff() == 0.0);
    // alpha_bar == 1 keeps the identity at t >= 1 too.
    NoiseSchedule keep = NoiseSchedule::from_alpha_bar({1.0, 1.0, 0.5});
    CHECK((qbar_matrix(model, keep, 1, Channel::Edges) - Eigen::Matrix4d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    // alpha_bar ~ 0 rows collapse to the marginals.
    NoiseSchedule wipe = NoiseSchedule::from_alpha_bar({1.0, 1e-9});
    Eigen::Matrix4d q = qbar_matrix(model, wipe, 1, Channel::Nodes);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) CHECK(q(r, c) == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("posterior sums to one over all cells, both channels") {
    TransitionModel model = skewed_model();
    NoiseSchedule schedule = NoiseSchedule::cosine(50);
    for (Channel channel : {Channel::Nodes, Channel::Edges})
        for (int t = 1; t <= 50; ++t)
            for (int x = 0; x < 4; ++x)
                for (int z = 0; z < 4; ++z) {
                    Eigen::Vector4d post = posterior_distribution(z, x, t, channel, model, schedule);
                    CHECK(std::abs(post.sum() - 1.0) < 1e-9);
                    CHECK(post.minCoeff() >= 0.0);
                }
}

TEST_CASE("posterior endpoint identities") {
    TransitionModel model = skewed_model();

    // t = 1: alpha_bar(0) = 1, so the posterior is exactly one-hot at x.
    NoiseSchedule schedule = NoiseSchedule::cosine(20);
    for (int x = 0; x < 4; ++x)
        for (int z = 0; z < 4; ++z) {
            Eigen::Vector4d post = posterior_distribution(z, x, 1, Channel::Nodes, model, schedule);
            CHECK(post[x] == doctest::Approx(1.0).epsilon(1e-12));
        }

    // alpha_bar(t-1) == alpha_bar(t): beta = 1 and the posterior pins z_t.
    NoiseSchedule flat = NoiseSchedule::from_alpha_bar({1.0, 0.5, 0.5});
    for (int x = 0; x < 4; ++x)
        for (int z = 0; z < 4; ++z) {
            Eigen::Vector4d post = posterior_distribution(z, x, 2, Channel::Edges, model, flat);
            CHECK(post[z] == doctest::Approx(1.0).epsilon(1e-12));
        }
}

TEST_CASE("posterior degenerate denominator") {
    TransitionModel model = TransitionModel::uniform();
    model.node_marginals = Eigen::Vector4d(1.0, 0.0, 0.0, 0.0); // bypass the from_marginals floor
    NoiseSchedule s = NoiseSchedule::from_alpha_bar({1.0, 0.5});
    // Qbar_1[x=2, z=1] = 0.5*0 + 0.5*m[1] = 0.
    try {
        posterior_distribution(1, 2, 1, Channel::Nodes, model, s);
        FAIL("expected DegenerateDenominator");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::DegenerateDenominator);
    }
}

TEST_CASE("apply_noise identity at t=0 and marginal convergence at t=T") {
    TransitionModel model = skewed_model();
    NoiseSchedule schedule = NoiseSchedule::cosine(100);
    MolGraph g = parse_smiles("CC(=O)N");
    Rng rng(17);

    NoisyGraph z0 = apply_noise(g, 0, model, schedule, rng);
    CHECK(z0 == NoisyGraph::from_graph(g, 0));
    CHECK(z0.to_molgraph() == g);

    // 10,000 single-node draws at t=T against m_nodes = [0.7, 0.1, 0.1, 0.1].
    MolGraph atom = parse_smiles("C");
    std::array<int, 4> counts{0, 0, 0, 0};
    const int draws = 10000;
    for (int k = 0; k < draws; ++k) {
        NoisyGraph z = apply_noise(atom, 100, model, schedule, rng);
        ++counts[static_cast<std::size_t>(z.node(0))];
    }
    double chi2 = 0.0;
    for (int c = 0; c < 4; ++c) {
        double expected = draws * model.node_marginals[c];
        chi2 += (counts[static_cast<std::size_t>(c)] - expected) * (counts[static_cast<std::size_t>(c)] - expected) /
                expected;
    }
    CHECK(chi2 < kChiSq99Df3);

    CHECK_THROWS_AS(apply_noise(g, 101, model, schedule, rng), Error);
}

TEST_CASE("apply_noise output satisfies NoisyGraph invariants") {
    TransitionModel model = skewed_model();
    NoiseSchedule schedule = NoiseSchedule::cosine(30);
    MolGraph g = parse_smiles("C1CC1CC#N");
    Rng rng(99);
    for (int t : {1, 7, 15, 30}) {
        NoisyGraph z = apply_noise(g, t, model, schedule, rng);
        CHECK(z.t() == t);
        CHECK(z.n() == g.size());
        for (int i = 0; i < z.n(); ++i) {
            CHECK(z.edge(i, i) == 0);
            for (int j = 0; j < z.n(); ++j) CHECK(z.edge(i, j) == z.edge(j, i));
        }
        Eigen::MatrixXd nodes = z.nodes_onehot();
        for (int i = 0; i < z.n(); ++i) {
            CHECK(nodes.row(i).sum() == doctest::Approx(1.0));
            CHECK(nodes.row(i).maxCoeff() == doctest::Approx(1.0));
        }
        Eigen::MatrixXd edges = z.edges_onehot();
        CHECK(edges.rows() == z.n() * z.n());
        for (int r = 0; r < edges.rows(); ++r) CHECK(edges.row(r).sum() == doctest::Approx(1.0));
    }
}

TEST_CASE("noisy graph setters validate") {
    NoisyGraph z(3, 4);
    z.set_node(0, 2);
    z.set_edge(0, 1, 3);
    CHECK(z.edge(1, 0) == 3);
    CHECK_THROWS_AS(z.set_node(0, 4), Error);
    CHECK_THROWS_AS(z.set_edge(0, 1, -1), Error);
    CHECK_THROWS_AS(z.set_edge(1, 1, 1), Error);
}

TEST_CASE("extra_features on an edgeless graph") {
    NoisyGraph z(3, 5);
    z.set_node(0, 0);
    z.set_node(1, 1);
    z.set_node(2, 2);
    FeatureBundle f = extra_features(z, 10);
    CHECK(f.node_features.rows() == 3);
    CHECK(f.node_features.cols() == kNodeFeatureDim);
    CHECK(f.graph_features.size() == kGraphFeatureDim);
    for (int i = 0; i < 3; ++i) {
        for (int c = 0; c < 4; ++c) CHECK(f.node_features(i, c) == 0.0); // degrees and triangles
        CHECK(f.node_features(i, 4 + z.node(i)) == 1.0);
    }
    CHECK(f.graph_features[0] == doctest::Approx(3.0 / 9.0));
    CHECK(f.graph_features[1] == 0.0);
    CHECK(f.graph_features[2] == 0.0); // c3
    CHECK(f.graph_features[3] == 0.0); // c4
    CHECK(f.graph_features[4] == 0.0); // c5
    CHECK(f.graph_features[10] == 3.0);
    CHECK(f.graph_features[11] == doctest::Approx(0.5));
}

TEST_CASE("extra_features on the carbon triangle") {
    MolGraph tri = parse_smiles("C1CC1");
    NoisyGraph z = NoisyGraph::from_graph(tri, 0);
    FeatureBundle f = extra_features(z, 10);
    for (int i = 0; i < 3; ++i) {
        CHECK(f.node_features(i, 0) == 2.0); // two single bonds
        CHECK(f.node_features(i, 1) == 0.0);
        CHECK(f.node_features(i, 2) == 0.0);
        CHECK(f.node_features(i, 3) == doctest::Approx(1.0)); // diag(A^3)/2
        CHECK(f.node_features(i, 4) == 1.0);                  // carbon one-hot
    }
    CHECK(f.graph_features[2] == doctest::Approx(1.0)); // c3
    CHECK(f.graph_features[3] == doctest::Approx(0.0)); // c4
    CHECK(f.graph_features[4] == doctest::Approx(0.0)); // c5
    // Laplacian spectrum of K3 is {0, 3, 3}; two padding zeros follow.
    CHECK(f.graph_features[5] == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(f.graph_features[6] == doctest::Approx(3.0));
    CHECK(f.graph_features[7] == doctest::Approx(3.0));
    CHECK(f.graph_features[8] == 0.0);
    CHECK(f.graph_features[9] == 0.0);
    CHECK(f.graph_features[10] == 1.0); // one component
}

TEST_CASE("extra_features cycle counts for square and pentagon") {
    FeatureBundle sq = extra_features(NoisyGraph::from_graph(parse_smiles("C1CCC1"), 0), 10);
    CHECK(sq.graph_features[2] == doctest::Approx(0.0));
    CHECK(sq.graph_features[3] == doctest::Approx(1.0));
    CHECK(sq.graph_features[4] == doctest::Approx(0.0));

    FeatureBundle pent = extra_features(NoisyGraph::from_graph(parse_smiles("C1CCCC1"), 0), 10);
    CHECK(pent.graph_features[2] == doctest::Approx(0.0));
    CHECK(pent.graph_features[3] == doctest::Approx(0.0));
    CHECK(pent.graph_features[4] == doctest::Approx(1.0));

    // Two disjoint fragments: component count 2.
    FeatureBundle frag = extra_features(NoisyGraph::from_graph(parse_smiles("CC.CC"), 0), 10);
    CHECK(frag.graph_features[10] == 2.0);
}

TEST_CASE("reverse distributions match a hand-built posterior mixture") {
    TransitionModel model = skewed_model();
    NoiseSchedule schedule = NoiseSchedule::cosine(10);
    Rng rng(31);
    NoisyGraph z = apply_noise(parse_smiles("OC=O"), 5, model, schedule, rng);
    Logits logits;
    logits.nodes = Eigen::MatrixXd::Random(3, 4);
    logits.edges = Eigen::MatrixXd::Random(9, 4);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < i; ++j) logits.edges.row(i * 3 + j) = logits.edges.row(j * 3 + i);

    ReverseDistributions dist = reverse_distributions(logits, z, model, schedule);
    for (int i = 0; i < 3; ++i) {
        Eigen::Vector4d ex = logits.nodes.row(i).transpose().array().exp();
        Eigen::Vector4d phat = ex / ex.sum();
        Eigen::Vector4d expected = Eigen::Vector4d::Zero();
        for (int x = 0; x < 4; ++x)
            expected += phat[x] * posterior_distribution(z.node(i), x, 5, Channel::Nodes, model, schedule);
        CHECK((dist.nodes.row(i).transpose() - expected).cwiseAbs().maxCoeff() < 1e-9);
        CHECK(std::abs(dist.nodes.row(i).sum() - 1.0) < 1e-9);
    }
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            if (i == j) continue;
            Eigen::Vector4d ex = logits.edges.row(i * 3 + j).transpose().array().exp();
            Eigen::Vector4d phat = ex / ex.sum();
            Eigen::Vector4d expected = Eigen::Vector4d::Zero();
            for (int x = 0; x < 4; ++x)
                expected += phat[x] * posterior_distribution(z.edge(i, j), x, 5, Channel::Edges, model, schedule);
            CHECK((dist.edges.row(i * 3 + j).transpose() - expected).cwiseAbs().maxCoeff() < 1e-9);
        }
}

TEST_CASE("reverse distribution is exchangeable away from z_t under uniform inputs") {
    TransitionModel model = TransitionModel::uniform();
    NoiseSchedule schedule = NoiseSchedule::cosine(10);
    NoisyGraph z(4, 5); // all cells at category 0
    UniformOracle oracle;
    Logits logits = oracle.predict(z, extra_features(z, 10));
    ReverseDistributions dist = reverse_distributions(logits, z, model, schedule);
    for (int i = 0; i < 4; ++i) {
        CHECK(std::abs(dist.nodes.row(i).sum() - 1.0) < 1e-9);
        // Categories other than z_t are symmetric; z_t itself keeps extra mass.
        CHECK(dist.nodes(i, 1) == doctest::Approx(dist.nodes(i, 2)).epsilon(1e-12));
        CHECK(dist.nodes(i, 1) == doctest::Approx(dist.nodes(i, 3)).epsilon(1e-12));
        CHECK(dist.nodes(i, 0) > dist.nodes(i, 1));
    }
}

TEST_CASE("reverse_step decrements t and rejects bad input") {
    TransitionModel model = skewed_model();
    NoiseSchedule schedule = NoiseSchedule::cosine(10);
    Rng rng(5);
    NoisyGraph z = apply_noise(parse_smiles("CCO"), 5, model, schedule, rng);
    UniformOracle oracle;
    Logits logits = oracle.predict(z, extra_features(z, 10));
    NoisyGraph prev = reverse_step(logits, z, model, schedule, rng);
    CHECK(prev.t() == 4);
    CHECK(prev.n() == 3);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(prev.edge(i, j) == prev.edge(j, i));

    NoisyGraph z0 = apply_noise(parse_smiles("CCO"), 0, model, schedule, rng);
    CHECK_THROWS_AS(reverse_step(logits, z0, model, schedule, rng), Error);

    Logits bad = logits;
    bad.nodes(0, 0) = std::numeric_limits<double>::quiet_NaN();
    try {
        reverse_step(bad, z, model, schedule, rng);
        FAIL("expected NonFiniteLogits");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NonFiniteLogits);
    }
}

TEST_CASE("reverse_step concentrates on x when the oracle is confident and abar(t-1)=1") {
    // With Qbar_{t-1} = I the posterior is one-hot at x, so a confident
    // denoiser recovers x regardless of z_t.
    TransitionModel model = skewed_model();
    NoiseSchedule s = NoiseSchedule::from_alpha_bar({1.0, 1.0, 0.3});
    MolGraph g = parse_smiles("C#N");
    Rng rng(11);
    CleanOracle oracle(g);
    for (int trial = 0; trial < 50; ++trial) {
        NoisyGraph z = apply_noise(g, 2, model, s, rng);
        Logits logits = oracle.predict(z, extra_features(z, 2));
        NoisyGraph out = reverse_step(logits, z, model, s, rng);
        CHECK(out.t() == 1);
        CHECK(out.to_molgraph() == g);
    }
}

TEST_CASE("guided reverse matches unguided at lambda zero") {
    TransitionModel model = skewed_model();
    NoiseSchedule schedule = NoiseSchedule::cosine(8);
    Rng rng(3);
    NoisyGraph z = apply_noise(parse_smiles("OCC=O"), 4, model, schedule, rng);
    FeatureBundle feats = extra_features(z, 8);
    CleanOracle oracle(parse_smiles("OCC=O"));
    Logits logits = oracle.predict(z, feats);

    InputGrads grads;
    grads.nodes = Eigen::MatrixXd::Random(z.n(), 4);
    grads.edges = Eigen::MatrixXd::Random(z.n() * z.n(), 4);

    ReverseDistributions plain = reverse_distributions(logits, z, model, schedule);
    ReverseDistributions guided = guided_reverse_distributions(logits, grads, z, model, schedule, 0.0);
    CHECK((plain.nodes - guided.nodes).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((plain.edges - guided.edges).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("guidance reweighting suppresses high-gradient categories and renormalizes") {
    TransitionModel model = TransitionModel::uniform();
    NoiseSchedule schedule = NoiseSchedule::cosine(8);
    NoisyGraph z(2, 4);
    UniformOracle oracle;
    Logits logits = oracle.predict(z, extra_features(z, 8));
    ReverseDistributions plain = reverse_distributions(logits, z, model, schedule);

    InputGrads grads;
    grads.nodes = Eigen::MatrixXd::Zero(2, 4);
    grads.edges = Eigen::MatrixXd::Zero(4, 4);
    grads.nodes(0, 2) = 1.0; // pushing category 2 increases the property error

    double lambda = 2.0;
    ReverseDistributions guided = guided_reverse_distributions(logits, grads, z, model, schedule, lambda);
    CHECK(guided.nodes.row(0).sum() == doctest::Approx(1.0).epsilon(1e-9));
    // The flagged category loses mass relative to the unguided distribution.
    CHECK(guided.nodes(0, 2) < plain.nodes(0, 2));
    // Exact closed form: p * exp(-lambda * g), renormalized.
    Eigen::Array4d w = (-lambda * grads.nodes.row(0).transpose().array()).exp();
    Eigen::Array4d expected = plain.nodes.row(0).transpose().array() * w;
    expected /= expected.sum();
    CHECK((guided.nodes.row(0).transpose().array() - expected).abs().maxCoeff() < 1e-12);
    // Stronger guidance suppresses the category further.
    ReverseDistributions stronger = guided_reverse_distributions(logits, grads, z, model, schedule, 8.0);
    CHECK(stronger.nodes(0, 2) < guided.nodes(0, 2));
    // Rows with zero gradients keep the unguided distribution.
    CHECK((guided.nodes.row(1) - plain.nodes.row(1)).cwiseAbs().maxCoeff() < 1e-12);

    // Non-finite gradients collapse the cell.
    InputGrads fatal = grads;
    fatal.nodes(0, 1) = std::numeric_limits<double>::quiet_NaN();
    try {
        guided_reverse_distributions(logits, fatal, z, model, schedule, 1.0);
        FAIL("expected NonFiniteGuidance");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NonFiniteGuidance);
    }
}

TEST_CASE("nll_bound equals the prior KL under a perfect oracle") {
    TransitionModel model = skewed_model();
    NoiseSchedule schedule = NoiseSchedule::from_alpha_bar({1.0, 0.9, 0.5, 0.2});
    MolGraph g = parse_smiles("CCO");
    CleanOracle oracle(g);
    Rng rng(7);
    double bound = nll_bound(oracle, g, model, schedule, 4, rng);

    // Prior KL computed by hand: sum over node cells and upper-triangle edge
    // cells of KL(Qbar_T row of x || marginal).
    Eigen::Matrix4d qn = qbar_matrix(model, schedule, 3, Channel::Nodes);
    Eigen::Matrix4d qe = qbar_matrix(model, schedule, 3, Channel::Edges);
    double prior = 0.0;
    for (int i = 0; i < g.size(); ++i)
        prior += kl(qn.row(static_cast<int>(g.node(i))).transpose(), model.node_marginals);
    for (int i = 0; i < g.size(); ++i)
        for (int j = i + 1; j < g.size(); ++j)
            prior += kl(qe.row(static_cast<int>(g.edge(i, j))).transpose(), model.edge_marginals);

    CHECK(bound == doctest::Approx(prior).epsilon(1e-7));
    CHECK(bound > 0.0);
}

TEST_CASE("nll_bound prior term vanishes when the schedule fully mixes") {
    TransitionModel model = skewed_model();
    NoiseSchedule schedule = NoiseSchedule::cosine(100); // abar(T) clamps to 1e-6
    MolGraph g = parse_smiles("CCO");
    CleanOracle oracle(g);
    Rng rng(7);
    double bound = nll_bound(oracle, g, model, schedule, 2, rng);
    CHECK(bound >= 0.0);
    CHECK(bound < 1e-3);
}

TEST_CASE("oracle denoiser never beats uniform on the bound") {
    TransitionModel model = skewed_model();
    NoiseSchedule schedule = NoiseSchedule::cosine(20);
    LoadResult data = load_dataset(std::string(FEDMOL_FIXTURE_DIR) + "/qm9_tiny.csv");
    REQUIRE(data.graphs.size() >= 20);
    UniformOracle uniform;
    for (int k = 0; k < 20; ++k) {
        const MolGraph& g = data.graphs[static_cast<std::size_t>(k)];
        CleanOracle oracle(g);
        Rng rng_a(1000 + k), rng_b(1000 + k);
        double good = nll_bound(oracle, g, model, schedule, 2, rng_a);
        double bad = nll_bound(uniform, g, model, schedule, 2, rng_b);
        CHECK(good <= bad);
    }
}

TEST_CASE("sample_chain produces uniform cells under a uniform model") {
    TransitionModel model = TransitionModel::uniform();
    NoiseSchedule schedule = NoiseSchedule::cosine(5);
    UniformOracle oracle;
    std::array<long, 4> node_counts{0, 0, 0, 0};
    std::array<long, 4> edge_counts{0, 0, 0, 0};
    long cells = 0;
    for (int chain = 0; chain < 250; ++chain) {
        Rng rng(mix_seed(42, 0x06, static_cast<std::uint64_t>(chain)));
        SampleResult res = sample_chain(oracle, nullptr, model, schedule, 9, 5, rng);
        NoisyGraph z0 = NoisyGraph::from_graph(res.graph, 0);
        for (int i = 0; i < 9; ++i) {
            ++node_counts[static_cast<std::size_t>(z0.node(i))];
            ++cells;
        }
        for (int i = 0; i < 9; ++i)
            for (int j = i + 1; j < 9; ++j) {
                ++edge_counts[static_cast<std::size_t>(z0.edge(i, j))];
                ++cells;
            }
    }
    CHECK(cells >= 10000);
    auto chi2 = [](const std::array<long, 4>& counts) {
        long total = counts[0] + counts[1] + counts[2] + counts[3];
        double expected = static_cast<double>(total) / 4.0;
        double out = 0.0;
        for (long c : counts) out += (c - expected) * (c - expected) / expected;
        return out;
    };
    CHECK(chi2(node_counts) < kChiSq99Df3);
    CHECK(chi2(edge_counts) < kChiSq99Df3);
}

TEST_CASE("sample_chain trajectory bookkeeping") {
    TransitionModel model = skewed_model();
    NoiseSchedule schedule = NoiseSchedule::cosine(12);
    UniformOracle oracle;
    Rng rng(8);
    SampleOptions options;
    options.collect_trajectory = true;
    SampleResult res = sample_chain(oracle, nullptr, model, schedule, 5, 12, rng, options);
    REQUIRE(res.trajectory.size() == 13);
    for (std::size_t k = 0; k < res.trajectory.size(); ++k) {
        const NoisyGraph& z = res.trajectory[k];
        CHECK(z.t() == 12 - static_cast<int>(k));
        CHECK(z.n() == 5);
        for (int i = 0; i < 5; ++i) {
            CHECK(z.edge(i, i) == 0);
            for (int j = 0; j < 5; ++j) CHECK(z.edge(i, j) == z.edge(j, i));
        }
    }
    CHECK(res.trajectory.back().to_molgraph() == res.graph);
    CHECK(res.graph.size() == 5);

    // Without the flag the trajectory stays empty, and steps must match T.
    SampleResult bare = sample_chain(oracle, nullptr, model, schedule, 5, 12, rng);
    CHECK(bare.trajectory.empty());
    CHECK_THROWS_AS(sample_chain(oracle, nullptr, model, schedule, 5, 11, rng), Error);
}

TEST_CASE("write_trajectory_tsv emits one row per step") {
    TransitionModel model = TransitionModel::uniform();
    NoiseSchedule schedule = NoiseSchedule::cosine(4);
    UniformOracle oracle;
    Rng rng(21);
    SampleOptions options;
    options.collect_trajectory = true;
    SampleResult res = sample_chain(oracle, nullptr, model, schedule, 4, 4, rng, options);

    std::string path = "/tmp/fedmol_test_traj.tsv";
    write_trajectory_tsv(res.trajectory, path);
    std::ifstream in(path);
    REQUIRE(in.good());
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) lines.push_back(line);
    REQUIRE(lines.size() == 5);
    CHECK(lines[0].substr(0, 2) == "4\t");
    CHECK(lines[4].substr(0, 2) == "0\t");
}
