#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedmol/data.hpp"
#include "fedmol/error.hpp"
#include "fedmol/federation.hpp"
#include "fedmol/models.hpp"
#include "fedmol/rng.hpp"
#include "fedmol/tcp.hpp"
#include "fedmol/trainer.hpp"
#include "fedmol/wire.hpp"

using namespace fedmol;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    return ErrorKind::Internal;
}

ParamStore make_store(float value) {
    ParamStore s;
    s.add("blk.w", {2, 3}, std::vector<float>(6, value));
    s.add("blk.b", {1, 3}, std::vector<float>(3, value));
    return s;
}

ModelUpdate make_update(std::string id, std::uint64_t samples, float value, double ce) {
    ModelUpdate u;
    u.collaborator_id = std::move(id);
    u.train_sample_count = samples;
    u.metrics = {{"train_ce", ce}, {"val_nll", 2.0 * ce}};
    u.denoiser_params = make_store(value);
    u.regressor_params = make_store(-value);
    return u;
}

class StubCollaborator : public Collaborator {
  public:
    StubCollaborator(std::string id, ModelUpdate update) : id_(std::move(id)), update_(std::move(update)) {}

    const std::string& id() const override { return id_; }
    ModelUpdate execute_round(const ParamStore&, const ParamStore&, int) override { return update_; }

  private:
    std::string id_;
    ModelUpdate update_;
};

class ThrowingCollaborator : public Collaborator {
  public:
    explicit ThrowingCollaborator(std::string id) : id_(std::move(id)) {}

    const std::string& id() const override { return id_; }
    ModelUpdate execute_round(const ParamStore&, const ParamStore&, int) override {
        fail(ErrorKind::Internal, "site offline");
    }

  private:
    std::string id_;
};

const LoadResult& tiny_corpus() {
    static const LoadResult loaded = load_dataset(FEDMOL_FIXTURE_DIR "/qm9_tiny.csv");
    return loaded;
}

DataSlice slice_of(int begin, int end) {
    std::vector<int> indices;
    for (int i = begin; i < end; ++i) indices.push_back(i);
    return DataSlice::take(tiny_corpus(), indices);
}

TrainSettings tiny_settings() {
    TrainSettings s;
    s.model.layers = 1;
    s.model.hidden_node = 8;
    s.model.hidden_edge = 6;
    s.model.heads = 2;
    s.diffusion_steps = 5;
    s.batch_size = 64;
    s.seed = 7;
    s.mc_val_samples = 1;
    return s;
}

bool metrics_equal(const std::map<std::string, double>& a, const std::map<std::string, double>& b) {
    return a == b; // exact double comparison: reruns must be bit-identical
}

float random_value(Rng& rng) {
    switch (rng.uniform_index(8)) {
        case 0: return 0.0f;
        case 1: return -0.0f;
        case 2: return std::numeric_limits<float>::infinity();
        case 3: return std::numeric_limits<float>::lowest();
        case 4: return std::numeric_limits<float>::denorm_min();
        default: return static_cast<float>(rng.uniform(-50.0, 50.0));
    }
}

std::string random_name(Rng& rng, std::size_t max_len) {
    std::string s;
    std::uint64_t len = rng.uniform_index(max_len + 1);
    for (std::uint64_t i = 0; i < len; ++i)
        s.push_back(static_cast<char>('a' + static_cast<char>(rng.uniform_index(26))));
    return s;
}

ParamStore random_store(Rng& rng, const std::string& prefix) {
    ParamStore s;
    std::uint64_t tensors = rng.uniform_index(4);
    for (std::uint64_t t = 0; t < tensors; ++t) {
        std::uint64_t rank = 1 + rng.uniform_index(3);
        std::vector<std::uint64_t> shape(rank);
        std::uint64_t n = 1;
        for (std::uint64_t& d : shape) {
            d = 1 + rng.uniform_index(4);
            n *= d;
        }
        std::vector<float> values(n);
        for (float& v : values) v = random_value(rng);
        s.add(prefix + std::to_string(t), std::move(shape), std::move(values));
    }
    return s;
}

ModelUpdate random_update(Rng& rng) {
    ModelUpdate u;
    u.collaborator_id = random_name(rng, 12);
    u.train_sample_count = rng.next_u64();
    std::uint64_t metric_count = rng.uniform_index(5);
    for (std::uint64_t m = 0; m < metric_count; ++m)
        u.metrics["m" + random_name(rng, 8)] = rng.uniform(-1e6, 1e6);
    u.denoiser_params = random_store(rng, "den");
    u.regressor_params = random_store(rng, "reg");
    return u;
}

std::size_t expected_store_bytes(const ParamStore& s) {
    std::size_t n = 4;
    for (const ParamStore::Entry& e : s) n += 2 + e.name.size() + 1 + 8 * e.shape.size() + 4 * e.values.size();
    return n;
}

// Byte budget implied by the documented payload fields and nothing else.
std::size_t expected_update_bytes(const ModelUpdate& u) {
    std::size_t n = 4 + 2;                           // magic, version
    n += 2 + u.collaborator_id.size();               // id
    n += 8;                                          // sample count
    n += 2;                                          // metric count
    for (const auto& [key, value] : u.metrics) n += 2 + key.size() + 8;
    return n + expected_store_bytes(u.denoiser_params) + expected_store_bytes(u.regressor_params);
}

} // namespace

TEST_CASE("workflow state machine follows the documented task cycle") {
    CHECK(std::string(task_name(WorkflowTask::Start)) == "Start");
    CHECK(std::string(task_name(WorkflowTask::AggregatedModelValidation)) == "AggregatedModelValidation");
    CHECK(std::string(task_name(WorkflowTask::Train)) == "Train");
    CHECK(std::string(task_name(WorkflowTask::LocalModelValidation)) == "LocalModelValidation");
    CHECK(std::string(task_name(WorkflowTask::Join)) == "Join");
    CHECK(std::string(task_name(WorkflowTask::End)) == "End");

    CHECK(next_task(WorkflowTask::Start, 0, 0) == WorkflowTask::End);
    CHECK(next_task(WorkflowTask::Start, 0, 2) == WorkflowTask::AggregatedModelValidation);
    CHECK(next_task(WorkflowTask::AggregatedModelValidation, 0, 2) == WorkflowTask::Train);
    CHECK(next_task(WorkflowTask::Train, 0, 2) == WorkflowTask::LocalModelValidation);
    CHECK(next_task(WorkflowTask::LocalModelValidation, 0, 2) == WorkflowTask::Join);
    CHECK(next_task(WorkflowTask::Join, 1, 2) == WorkflowTask::AggregatedModelValidation);
    CHECK(next_task(WorkflowTask::Join, 2, 2) == WorkflowTask::End);
    CHECK(next_task(WorkflowTask::End, 2, 2) == WorkflowTask::End);

    // A full walk of one round, the way run_workflow drives it.
    WorkflowTask task = WorkflowTask::Start;
    std::vector<std::string> visited;
    int completed = 0;
    while (task != WorkflowTask::End) {
        task = next_task(task, completed, 1);
        visited.push_back(task_name(task));
        if (task == WorkflowTask::Join) ++completed;
    }
    const std::vector<std::string> expected = {"AggregatedModelValidation", "Train", "LocalModelValidation", "Join",
                                               "End"};
    CHECK(visited == expected);
}

TEST_CASE("is_documented_metric accepts exactly the reported keys") {
    for (const char* key : {"train_ce", "train_mse", "val_nll", "val_mae", "local_val_nll", "local_val_mae"})
        CHECK(is_documented_metric(key));
    CHECK_FALSE(is_documented_metric("val_loss"));
    CHECK_FALSE(is_documented_metric("smiles"));
    CHECK_FALSE(is_documented_metric(""));
    CHECK_FALSE(is_documented_metric("train_ce "));
}

TEST_CASE("fedavg forms the normalized convex combination") {
    const ParamStore zeros = make_store(0.0f);
    const ParamStore twos = make_store(2.0f);
    std::vector<ParamStore> stores = {zeros, twos};

    SUBCASE("equal weights give the midpoint exactly") {
        std::vector<double> w = {1.0, 1.0};
        ParamStore avg = fedavg(stores, w);
        CHECK(avg.congruent_with(zeros));
        for (const ParamStore::Entry& e : avg)
            for (float v : e.values) CHECK(v == 1.0f);
    }

    SUBCASE("a zero weight drops that update exactly") {
        std::vector<double> w = {1.0, 0.0};
        CHECK(fedavg(stores, w) == zeros);
        std::vector<double> w2 = {0.0, 1.0};
        CHECK(fedavg(stores, w2) == twos);
    }

    SUBCASE("3:1 weighting lands at the quarter point") {
        std::vector<double> w = {3.0, 1.0};
        ParamStore avg = fedavg(stores, w);
        for (const ParamStore::Entry& e : avg)
            for (float v : e.values) CHECK(v == 0.5f);
    }

    SUBCASE("weights only matter up to scale") {
        std::vector<double> w1 = {2.0, 6.0};
        std::vector<double> w2 = {0.5, 1.5};
        CHECK(fedavg(stores, w1) == fedavg(stores, w2));
    }

    SUBCASE("averaging identical stores is the identity") {
        std::vector<ParamStore> same = {make_store(0.7f), make_store(0.7f), make_store(0.7f)};
        std::vector<double> w = {0.2, 0.3, 0.5};
        ParamStore avg = fedavg(same, w);
        for (const ParamStore::Entry& e : avg)
            for (float v : e.values) CHECK(v == doctest::Approx(0.7f).epsilon(1e-6));
    }

    SUBCASE("tensor names and shapes survive") {
        std::vector<double> w = {1.0, 1.0};
        ParamStore avg = fedavg(stores, w);
        REQUIRE(avg.size() == 2);
        // Entries live in canonical name order regardless of insertion order.
        CHECK(avg.entry(0).name == "blk.b");
        CHECK(avg.entry(0).shape == std::vector<std::uint64_t>{1, 3});
        CHECK(avg.entry(1).name == "blk.w");
        CHECK(avg.entry(1).shape == std::vector<std::uint64_t>{2, 3});
    }
}

TEST_CASE("fedavg rejects malformed input") {
    std::vector<ParamStore> stores = {make_store(0.0f), make_store(2.0f)};
    std::vector<double> ok = {1.0, 1.0};

    std::vector<ParamStore> none;
    CHECK(kind_of([&] { fedavg(none, ok); }) == ErrorKind::EmptyUpdateSet);

    std::vector<double> short_w = {1.0};
    CHECK(kind_of([&] { fedavg(stores, short_w); }) == ErrorKind::ShapeMismatch);

    std::vector<double> negative = {1.0, -0.25};
    CHECK(kind_of([&] { fedavg(stores, negative); }) == ErrorKind::AllZeroWeights);

    std::vector<double> zero = {0.0, 0.0};
    CHECK(kind_of([&] { fedavg(stores, zero); }) == ErrorKind::AllZeroWeights);

    ParamStore other;
    other.add("blk.w", {3, 2}, std::vector<float>(6, 1.0f));
    other.add("blk.b", {1, 3}, std::vector<float>(3, 1.0f));
    std::vector<ParamStore> incongruent = {make_store(0.0f), other};
    CHECK(kind_of([&] { fedavg(incongruent, ok); }) == ErrorKind::ShapeMismatch);
}

TEST_CASE("aggregate_metrics forms weighted means per key") {
    std::vector<ModelUpdate> updates = {make_update("a", 1, 0.0f, 10.0), make_update("b", 3, 0.0f, 20.0)};

    std::vector<double> even = {1.0, 1.0};
    std::map<std::string, double> mean = aggregate_metrics(updates, even);
    CHECK(mean.at("train_ce") == 15.0);
    CHECK(mean.at("val_nll") == 30.0);

    std::vector<double> skewed = {100.0, 300.0};
    updates[0].metrics["train_ce"] = 8.0;
    updates[1].metrics["train_ce"] = 4.0;
    CHECK(aggregate_metrics(updates, skewed).at("train_ce") == 5.0);

    SUBCASE("single update passes through unchanged") {
        std::vector<ModelUpdate> one = {make_update("a", 1, 0.0f, 3.25)};
        std::vector<double> w = {17.0};
        CHECK(aggregate_metrics(one, w).at("train_ce") == 3.25);
    }

    SUBCASE("mismatched key sets are rejected") {
        updates[1].metrics["val_mae"] = 1.0;
        CHECK(kind_of([&] { aggregate_metrics(updates, even); }) == ErrorKind::KeyMismatch);
        updates[1].metrics.erase("val_mae");
        updates[1].metrics.erase("val_nll");
        updates[1].metrics["val_mae"] = 1.0; // same count, different key
        CHECK(kind_of([&] { aggregate_metrics(updates, even); }) == ErrorKind::KeyMismatch);
    }

    SUBCASE("empty and zero-weight inputs are rejected") {
        std::vector<ModelUpdate> none;
        CHECK(kind_of([&] { aggregate_metrics(none, even); }) == ErrorKind::EmptyUpdateSet);
        std::vector<double> zero = {0.0, 0.0};
        CHECK(kind_of([&] { aggregate_metrics(updates, zero); }) == ErrorKind::AllZeroWeights);
    }
}

TEST_CASE("run_round joins stub updates under both weighting modes") {
    StubCollaborator a("a", make_update("a", 1, 0.0f, 8.0));
    StubCollaborator b("b", make_update("b", 3, 2.0f, 4.0));
    // Deliberately out of id order: the join must canonicalize.
    std::vector<Collaborator*> collaborators = {&b, &a};

    SUBCASE("sample-count weights") {
        FederationState state;
        state.global_denoiser = make_store(9.0f);
        state.global_regressor = make_store(9.0f);
        WorkflowSpec spec;
        spec.weights = WorkflowSpec::Weights::SampleCount;
        run_round(state, spec, collaborators);

        CHECK(state.round == 1);
        REQUIRE(state.history.size() == 1);
        const RoundRecord& rec = state.history[0];
        CHECK(rec.round == 1);
        REQUIRE(rec.per_collaborator.size() == 2);
        CHECK(rec.per_collaborator[0].first == "a");
        CHECK(rec.per_collaborator[1].first == "b");
        CHECK(rec.aggregated.at("train_ce") == 0.25 * 8.0 + 0.75 * 4.0);

        for (const ParamStore::Entry& e : state.global_denoiser)
            for (float v : e.values) CHECK(v == 1.5f);
        for (const ParamStore::Entry& e : state.global_regressor)
            for (float v : e.values) CHECK(v == -1.5f);
    }

    SUBCASE("uniform weights") {
        FederationState state;
        state.global_denoiser = make_store(9.0f);
        state.global_regressor = make_store(9.0f);
        WorkflowSpec spec;
        spec.weights = WorkflowSpec::Weights::Uniform;
        run_round(state, spec, collaborators);

        CHECK(state.history[0].aggregated.at("train_ce") == 6.0);
        for (const ParamStore::Entry& e : state.global_denoiser)
            for (float v : e.values) CHECK(v == 1.0f);
    }
}

TEST_CASE("run_round aborts cleanly on bad collaborators") {
    const ParamStore initial_d = make_store(5.0f);
    const ParamStore initial_r = make_store(-5.0f);
    WorkflowSpec spec;

    auto fresh_state = [&] {
        FederationState state;
        state.global_denoiser = initial_d;
        state.global_regressor = initial_r;
        return state;
    };
    auto check_untouched = [&](const FederationState& state) {
        CHECK(state.round == 0);
        CHECK(state.history.empty());
        CHECK(state.global_denoiser == initial_d);
        CHECK(state.global_regressor == initial_r);
    };

    SUBCASE("a throwing collaborator fails the whole round") {
        FederationState state = fresh_state();
        StubCollaborator good("good", make_update("good", 5, 1.0f, 1.0));
        ThrowingCollaborator bad("bad");
        std::vector<Collaborator*> cs = {&good, &bad};
        CHECK(kind_of([&] { run_round(state, spec, cs); }) == ErrorKind::CollaboratorFailure);
        check_untouched(state);
    }

    SUBCASE("zero reported samples fail the round") {
        FederationState state = fresh_state();
        StubCollaborator empty("empty", make_update("empty", 0, 1.0f, 1.0));
        std::vector<Collaborator*> cs = {&empty};
        CHECK(kind_of([&] { run_round(state, spec, cs); }) == ErrorKind::CollaboratorFailure);
        check_untouched(state);
    }

    SUBCASE("undocumented metric keys fail the round") {
        ModelUpdate leaky = make_update("leaky", 5, 1.0f, 1.0);
        leaky.metrics["first_smiles"] = 1.0;
        FederationState state = fresh_state();
        StubCollaborator c("leaky", std::move(leaky));
        std::vector<Collaborator*> cs = {&c};
        CHECK(kind_of([&] { run_round(state, spec, cs); }) == ErrorKind::KeyMismatch);
        check_untouched(state);
    }

    SUBCASE("an empty collaborator set is rejected") {
        FederationState state = fresh_state();
        std::vector<Collaborator*> cs;
        CHECK(kind_of([&] { run_round(state, spec, cs); }) == ErrorKind::EmptyUpdateSet);
        check_untouched(state);
    }
}

TEST_CASE("run_workflow with zero rounds returns the initial parameters") {
    WorkflowSpec spec;
    spec.rounds = 0;
    const ParamStore d = make_store(1.25f);
    const ParamStore r = make_store(-1.25f);
    StubCollaborator a("a", make_update("a", 1, 0.0f, 0.0));
    std::vector<Collaborator*> cs = {&a};

    int callbacks = 0;
    FederationState state =
        run_workflow(spec, d, r, cs, [&](const FederationState&, const RoundRecord&) { ++callbacks; });
    CHECK(state.round == 0);
    CHECK(state.history.empty());
    CHECK(state.global_denoiser == d);
    CHECK(state.global_regressor == r);
    CHECK(callbacks == 0);
}

TEST_CASE("run_workflow rejects duplicate collaborator ids") {
    WorkflowSpec spec;
    StubCollaborator a1("twin", make_update("twin", 1, 0.0f, 0.0));
    StubCollaborator a2("twin", make_update("twin", 2, 1.0f, 0.0));
    std::vector<Collaborator*> cs = {&a1, &a2};
    CHECK(kind_of([&] { run_workflow(spec, make_store(0.0f), make_store(0.0f), cs); }) ==
          ErrorKind::CollaboratorFailure);
}

TEST_CASE("federated rounds on real collaborators are deterministic and order independent") {
    const TrainSettings settings = tiny_settings();
    WorkflowSpec spec;
    spec.rounds = 2;
    spec.local_epochs_per_round = 1;

    const ParamStore init_d =
        init_params(settings.model, ModelHead::Denoiser, mix_seed(settings.seed, hash_name("init-denoiser")));
    const ParamStore init_r =
        init_params(settings.model, ModelHead::Regressor, mix_seed(settings.seed, hash_name("init-regressor")));

    auto run_once = [&](bool reversed) {
        LocalCollaborator c0("c0", settings, slice_of(0, 12), slice_of(80, 84));
        LocalCollaborator c1("c1", settings, slice_of(12, 24), slice_of(84, 88));
        std::vector<Collaborator*> cs =
            reversed ? std::vector<Collaborator*>{&c1, &c0} : std::vector<Collaborator*>{&c0, &c1};
        return run_workflow(spec, init_d, init_r, cs);
    };

    FederationState first = run_once(false);

    CHECK(first.round == 2);
    REQUIRE(first.history.size() == 2);
    for (std::size_t i = 0; i < first.history.size(); ++i) {
        const RoundRecord& rec = first.history[i];
        CHECK(rec.round == static_cast<int>(i) + 1);
        REQUIRE(rec.per_collaborator.size() == 2);
        CHECK(rec.per_collaborator[0].first == "c0");
        CHECK(rec.per_collaborator[1].first == "c1");
        for (const char* key : {"train_ce", "train_mse", "val_nll", "val_mae", "local_val_nll", "local_val_mae"}) {
            REQUIRE(rec.aggregated.contains(key));
            CHECK(std::isfinite(rec.aggregated.at(key)));
        }
        for (const auto& [id, metrics] : rec.per_collaborator)
            for (const auto& [key, value] : metrics) {
                CHECK(is_documented_metric(key));
                CHECK(std::isfinite(value));
            }
    }
    // Training moved the global model away from the broadcast initialization.
    CHECK_FALSE(first.global_denoiser == init_d);

    FederationState rerun = run_once(false);
    CHECK(rerun.global_denoiser == first.global_denoiser);
    CHECK(rerun.global_regressor == first.global_regressor);
    REQUIRE(rerun.history.size() == first.history.size());
    for (std::size_t i = 0; i < rerun.history.size(); ++i)
        CHECK(metrics_equal(rerun.history[i].aggregated, first.history[i].aggregated));

    FederationState reversed = run_once(true);
    CHECK(reversed.global_denoiser == first.global_denoiser);
    CHECK(reversed.global_regressor == first.global_regressor);
    for (std::size_t i = 0; i < reversed.history.size(); ++i) {
        CHECK(metrics_equal(reversed.history[i].aggregated, first.history[i].aggregated));
        CHECK(reversed.history[i].per_collaborator == first.history[i].per_collaborator);
    }
}

TEST_CASE("a single-collaborator federation matches plain local training") {
    const TrainSettings settings = tiny_settings();
    const ParamStore init_d =
        init_params(settings.model, ModelHead::Denoiser, mix_seed(settings.seed, hash_name("init-denoiser")));
    const ParamStore init_r =
        init_params(settings.model, ModelHead::Regressor, mix_seed(settings.seed, hash_name("init-regressor")));

    WorkflowSpec spec;
    spec.rounds = 3;
    spec.local_epochs_per_round = 1;

    LocalCollaborator solo("solo", settings, slice_of(0, 16), slice_of(80, 84));
    std::vector<Collaborator*> cs = {&solo};
    FederationState state = run_workflow(spec, init_d, init_r, cs);

    // fedavg over one update is exact, and the broadcast echoes the previous
    // round's result back, so three rounds of one epoch must reproduce three
    // consecutive local epochs bit for bit, optimizer moments included.
    LocalTrainer local(settings, slice_of(0, 16), slice_of(80, 84));
    CHECK(local.denoiser_params() == init_d);
    CHECK(local.regressor_params() == init_r);
    std::map<std::string, double> first_epoch = local.train_epochs(1);
    CHECK(first_epoch.at("train_ce") == state.history[0].aggregated.at("train_ce"));
    CHECK(first_epoch.at("train_mse") == state.history[0].aggregated.at("train_mse"));
    local.train_epochs(1);
    local.train_epochs(1);

    CHECK(state.global_denoiser == local.denoiser_params());
    CHECK(state.global_regressor == local.regressor_params());
    CHECK(solo.trainer().train_sample_count() == 16);
}

TEST_CASE("wire round trip is the identity") {
    Rng rng(20260814);
    for (int trial = 0; trial < 120; ++trial) {
        ModelUpdate u = random_update(rng);
        std::vector<std::uint8_t> bytes = encode_update(u);
        CHECK(bytes.size() == expected_update_bytes(u));
        CHECK(decode_update(bytes) == u);
    }

    SUBCASE("a default-constructed update survives") {
        ModelUpdate u;
        CHECK(decode_update(encode_update(u)) == u);
    }

    SUBCASE("empty metric maps survive") {
        ModelUpdate u = make_update("c0", 42, 1.5f, 0.0);
        u.metrics.clear();
        ModelUpdate back = decode_update(encode_update(u));
        CHECK(back == u);
        CHECK(back.metrics.empty());
    }

    SUBCASE("payload starts with the magic and version") {
        std::vector<std::uint8_t> bytes = encode_update(make_update("c0", 1, 0.0f, 0.0));
        REQUIRE(bytes.size() >= 6);
        CHECK(bytes[0] == 'F');
        CHECK(bytes[1] == 'D');
        CHECK(bytes[2] == 'M');
        CHECK(bytes[3] == '1');
        CHECK((bytes[4] | (bytes[5] << 8)) == kWireVersion);
    }
}

TEST_CASE("wire rejects malformed payloads") {
    const ModelUpdate u = make_update("c0", 7, 0.5f, 1.0);
    const std::vector<std::uint8_t> good = encode_update(u);

    SUBCASE("corrupted magic") {
        std::vector<std::uint8_t> bad = good;
        bad[0] = 'X';
        CHECK(kind_of([&] { decode_update(bad); }) == ErrorKind::BadMagic);
    }

    SUBCASE("unknown version") {
        std::vector<std::uint8_t> bad = good;
        bad[4] = static_cast<std::uint8_t>(kWireVersion + 1);
        bad[5] = 0;
        CHECK(kind_of([&] { decode_update(bad); }) == ErrorKind::UnsupportedVersion);
    }

    SUBCASE("every strict prefix is reported as truncated") {
        for (std::size_t len = 0; len < good.size(); ++len) {
            std::span<const std::uint8_t> prefix(good.data(), len);
            CHECK(kind_of([&] { decode_update(prefix); }) == ErrorKind::TruncatedPayload);
        }
    }

    SUBCASE("trailing bytes are rejected") {
        std::vector<std::uint8_t> bad = good;
        bad.push_back(0);
        CHECK(kind_of([&] { decode_update(bad); }) == ErrorKind::TruncatedPayload);
    }

    SUBCASE("duplicate tensor names are rejected") {
        std::vector<std::uint8_t> bytes = {'F', 'D', 'M', '1'};
        put_u16(bytes, kWireVersion);
        put_str16(bytes, "c0");
        put_u64(bytes, 5);
        put_u16(bytes, 0);
        put_u32(bytes, 2); // denoiser store: the same tensor twice
        for (int rep = 0; rep < 2; ++rep) {
            put_str16(bytes, "w");
            put_u8(bytes, 1);
            put_u64(bytes, 1);
            put_f32(bytes, 1.0f);
        }
        put_u32(bytes, 0); // empty regressor store
        CHECK(kind_of([&] { decode_update(bytes); }) == ErrorKind::DuplicateTensorName);
    }
}

TEST_CASE("tcp frames carry updates across a socket unchanged") {
    TcpListener listener(0);
    REQUIRE(listener.port() != 0);

    std::thread echo([&] {
        TcpConnection server = listener.accept_one();
        ModelUpdate in;
        while (server.recv_update(in)) server.send_update(in);
    });

    {
        TcpConnection client = TcpConnection::connect_to("127.0.0.1", listener.port());
        Rng rng(99);
        for (int trial = 0; trial < 3; ++trial) {
            ModelUpdate sent = random_update(rng);
            client.send_update(sent);
            ModelUpdate received;
            REQUIRE(client.recv_update(received));
            CHECK(received == sent);
        }
        // Closing here gives the echo loop a clean end-of-stream.
    }
    echo.join();
}

TEST_CASE("a remote collaborator behaves exactly like its local twin") {
    const TrainSettings settings = tiny_settings();
    const ParamStore init_d =
        init_params(settings.model, ModelHead::Denoiser, mix_seed(settings.seed, hash_name("init-denoiser")));
    const ParamStore init_r =
        init_params(settings.model, ModelHead::Regressor, mix_seed(settings.seed, hash_name("init-regressor")));

    LocalCollaborator served("c0", settings, slice_of(0, 12), slice_of(80, 84));
    LocalCollaborator twin("c0", settings, slice_of(0, 12), slice_of(80, 84));

    TcpListener listener(0);
    std::thread site([&] { serve_collaborator("127.0.0.1", listener.port(), served, 1); });

    ModelUpdate remote_update;
    {
        RemoteCollaborator remote(listener.accept_one());
        CHECK(remote.id() == "c0");
        remote_update = remote.execute_round(init_d, init_r, 1);
        // Dropping the proxy closes the connection and releases the site loop.
    }
    site.join();

    ModelUpdate local_update = twin.execute_round(init_d, init_r, 1);
    CHECK(remote_update == local_update);
    CHECK(remote_update.collaborator_id == "c0");
    CHECK(remote_update.train_sample_count == 12);
    for (const auto& [key, value] : remote_update.metrics) CHECK(is_documented_metric(key));
}
