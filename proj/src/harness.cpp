#include "fedmol/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "fedmol/error.hpp"
#include "fedmol/tcp.hpp"

namespace fedmol {

namespace {

using nlohmann::json;

constexpr std::uint64_t kSampleChainStream = 0x06;

json model_to_json(const ModelConfig& m) {
    return json{{"layers", m.layers}, {"hidden_node", m.hidden_node}, {"hidden_edge", m.hidden_edge}, {"heads", m.heads}};
}

void model_from_json(const json& j, ModelConfig& m) {
    m.layers = j.value("layers", m.layers);
    m.hidden_node = j.value("hidden_node", m.hidden_node);
    m.hidden_edge = j.value("hidden_edge", m.hidden_edge);
    m.heads = j.value("heads", m.heads);
}

json optimizer_to_json(const OptimizerConfig& o) {
    return json{{"kind", o.kind == OptimizerConfig::Kind::AdamW ? "adamw" : "sgd"},
                {"lr", o.lr},
                {"weight_decay", o.weight_decay},
                {"beta1", o.beta1},
                {"beta2", o.beta2},
                {"eps", o.eps}};
}

void optimizer_from_json(const json& j, OptimizerConfig& o) {
    std::string kind = j.value("kind", std::string(o.kind == OptimizerConfig::Kind::AdamW ? "adamw" : "sgd"));
    if (kind == "adamw") {
        o.kind = OptimizerConfig::Kind::AdamW;
    } else if (kind == "sgd") {
        o.kind = OptimizerConfig::Kind::Sgd;
    } else {
        fail(ErrorKind::Internal, "unknown optimizer kind '" + kind + "'");
    }
    o.lr = j.value("lr", o.lr);
    o.weight_decay = j.value("weight_decay", o.weight_decay);
    o.beta1 = j.value("beta1", o.beta1);
    o.beta2 = j.value("beta2", o.beta2);
    o.eps = j.value("eps", o.eps);
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::UnreadableFile, "cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::UnreadableFile, "cannot write '" + path + "'");
    out << text;
    if (!out) fail(ErrorKind::UnreadableFile, "short write to '" + path + "'");
}

std::filesystem::path prepare_out_dir(const std::string& out_dir) {
    std::filesystem::path dir(out_dir);
    std::filesystem::create_directories(dir);
    return dir;
}

/// History semantics shared by both modes: row r holds the validation metrics
/// of the parameters entering epoch/round r, the training metrics of r
/// itself, and (on sampling rounds) the sampling metrics of the parameters
/// produced by r.
bool is_sampling_row(int row, int total, int sample_every) {
    if (sample_every <= 0) return false;
    return row % sample_every == 0 || row == total;
}

SamplingSetup make_sampling_setup(const ExperimentConfig& cfg, const TransitionModel& transition,
                                  std::span<const MolGraph> train_graphs) {
    SamplingSetup setup;
    setup.model = cfg.model;
    setup.diffusion_steps = cfg.diffusion_steps;
    setup.transition = transition;
    setup.atom_histogram = atom_count_histogram(train_graphs);
    setup.guided = cfg.guidance.enabled && cfg.with_regressor;
    setup.lambda_g = cfg.guidance.lambda_g;
    setup.target = Eigen::Vector2d(cfg.guidance.target[0], cfg.guidance.target[1]);
    return setup;
}

std::map<std::string, double> final_metric_map(const std::map<std::string, double>& val, const SamplingMetrics& s,
                                               bool with_regressor) {
    std::map<std::string, double> out;
    out["nll"] = val.at("val_nll");
    if (with_regressor) out["mae"] = val.at("val_mae");
    out["validity"] = s.validity;
    out["uniqueness"] = s.uniqueness;
    return out;
}

json run_report_json(const RunResult& result) {
    json rep;
    rep["mode"] = result.config.mode;
    rep["seed"] = result.config.seed;
    rep["rounds"] = static_cast<int>(result.history.size());
    json fin = json::object();
    for (const auto& [key, value] : result.final_metrics) fin[key] = value;
    rep["final"] = fin;
    return rep;
}

double cell_or_nan(const std::string& cell, const std::string& path) {
    if (cell.empty()) return HistoryRow::kUnset;
    try {
        std::size_t pos = 0;
        double v = std::stod(cell, &pos);
        if (pos != cell.size()) fail(ErrorKind::UnreadableFile, "bad numeric cell in '" + path + "'");
        return v;
    } catch (const Error&) {
        throw;
    } catch (const std::exception&) {
        fail(ErrorKind::UnreadableFile, "bad numeric cell '" + cell + "' in '" + path + "'");
    }
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    for (char c : line) {
        if (c == ',') {
            cells.push_back(cell);
            cell.clear();
        } else if (c != '\r') {
            cell.push_back(c);
        }
    }
    cells.push_back(cell);
    return cells;
}

std::string csv_cell(double v) { return std::isnan(v) ? std::string() : format_g17(v); }

/// Columns available for curve emission, in report order.
const std::vector<std::pair<std::string, double HistoryRow::*>>& curve_columns() {
    static const std::vector<std::pair<std::string, double HistoryRow::*>> cols = {
        {"train_ce", &HistoryRow::train_ce}, {"val_nll", &HistoryRow::val_nll},
        {"val_mae", &HistoryRow::val_mae},   {"validity", &HistoryRow::validity},
        {"uniqueness", &HistoryRow::uniqueness}};
    return cols;
}

} // namespace

void ExperimentConfig::validate() const {
    if (mode != "CL" && mode != "FL") fail(ErrorKind::Internal, "mode must be CL or FL");
    if (transport != "inproc" && transport != "tcp") fail(ErrorKind::Internal, "transport must be inproc or tcp");
    if (weights_policy != "samples" && weights_policy != "uniform")
        fail(ErrorKind::Internal, "weights_policy must be samples or uniform");
    if (collaborators < 1) fail(ErrorKind::Internal, "collaborators must be >= 1");
    if (mode == "FL" && collaborators < 2) fail(ErrorKind::Internal, "FL mode needs >= 2 collaborators");
    if (rounds < 0 || local_epochs < 1) fail(ErrorKind::Internal, "rounds must be >= 0, local_epochs >= 1");
    if (diffusion_steps < 1) fail(ErrorKind::Internal, "diffusion_steps must be >= 1");
    if (batch_size < 1) fail(ErrorKind::Internal, "batch_size must be >= 1");
    if (chains < 1 || samples_per_eval < 1 || samples_per_eval % chains != 0)
        fail(ErrorKind::Internal, "samples_per_eval must be a positive multiple of chains");
    if (mc_val_samples < 1 || mc_final_samples < 1) fail(ErrorKind::Internal, "mc sample counts must be >= 1");
    if (sample_every < 0) fail(ErrorKind::Internal, "sample_every must be >= 0");
    SplitSpec split{seed, train_fraction, val_fraction, test_fraction, collaborators};
    split.validate();
    model.validate();
}

TrainSettings ExperimentConfig::train_settings() const {
    TrainSettings settings;
    settings.model = model;
    settings.optimizer = optimizer;
    settings.diffusion_steps = diffusion_steps;
    settings.batch_size = batch_size;
    settings.lambda_edge = lambda_edge;
    settings.seed = seed;
    settings.with_regressor = with_regressor;
    settings.normalize_targets = normalize_targets;
    settings.uniform_marginals = uniform_marginals;
    settings.mc_val_samples = mc_val_samples;
    return settings;
}

std::string ExperimentConfig::to_json_text() const {
    json j;
    j["mode"] = mode;
    j["dataset"] = dataset;
    j["seed"] = seed;
    j["collaborators"] = collaborators;
    j["split"] = json{{"train", train_fraction}, {"val", val_fraction}, {"test", test_fraction}};
    j["model"] = model_to_json(model);
    j["optimizer"] = optimizer_to_json(optimizer);
    j["diffusion_steps"] = diffusion_steps;
    j["rounds"] = rounds;
    j["local_epochs"] = local_epochs;
    j["batch_size"] = batch_size;
    j["samples_per_eval"] = samples_per_eval;
    j["chains"] = chains;
    j["sample_every"] = sample_every;
    j["mc_val_samples"] = mc_val_samples;
    j["mc_final_samples"] = mc_final_samples;
    j["weights_policy"] = weights_policy;
    j["with_regressor"] = with_regressor;
    j["normalize_targets"] = normalize_targets;
    j["uniform_marginals"] = uniform_marginals;
    j["lambda_edge"] = lambda_edge;
    j["guidance"] =
        json{{"enabled", guidance.enabled}, {"lambda", guidance.lambda_g}, {"target", guidance.target}};
    j["transport"] = transport;
    return j.dump(2) + "\n";
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorKind::UnreadableFile, std::string("config is not valid JSON: ") + e.what());
    }
    ExperimentConfig cfg;
    try {
        cfg.mode = j.value("mode", cfg.mode);
        cfg.dataset = j.value("dataset", cfg.dataset);
        cfg.seed = j.value("seed", cfg.seed);
        cfg.collaborators = j.value("collaborators", cfg.collaborators);
        if (j.contains("split")) {
            const json& s = j["split"];
            cfg.train_fraction = s.value("train", cfg.train_fraction);
            cfg.val_fraction = s.value("val", cfg.val_fraction);
            cfg.test_fraction = s.value("test", cfg.test_fraction);
        }
        if (j.contains("model")) model_from_json(j["model"], cfg.model);
        if (j.contains("optimizer")) optimizer_from_json(j["optimizer"], cfg.optimizer);
        cfg.diffusion_steps = j.value("diffusion_steps", cfg.diffusion_steps);
        cfg.rounds = j.value("rounds", cfg.rounds);
        cfg.local_epochs = j.value("local_epochs", cfg.local_epochs);
        cfg.batch_size = j.value("batch_size", cfg.batch_size);
        cfg.samples_per_eval = j.value("samples_per_eval", cfg.samples_per_eval);
        cfg.chains = j.value("chains", cfg.chains);
        cfg.sample_every = j.value("sample_every", cfg.sample_every);
        cfg.mc_val_samples = j.value("mc_val_samples", cfg.mc_val_samples);
        cfg.mc_final_samples = j.value("mc_final_samples", cfg.mc_final_samples);
        cfg.weights_policy = j.value("weights_policy", cfg.weights_policy);
        cfg.with_regressor = j.value("with_regressor", cfg.with_regressor);
        cfg.normalize_targets = j.value("normalize_targets", cfg.normalize_targets);
        cfg.uniform_marginals = j.value("uniform_marginals", cfg.uniform_marginals);
        cfg.lambda_edge = j.value("lambda_edge", cfg.lambda_edge);
        if (j.contains("guidance")) {
            const json& g = j["guidance"];
            cfg.guidance.enabled = g.value("enabled", cfg.guidance.enabled);
            cfg.guidance.lambda_g = g.value("lambda", cfg.guidance.lambda_g);
            if (g.contains("target")) {
                auto t = g["target"].get<std::vector<double>>();
                if (t.size() != 2) fail(ErrorKind::Internal, "guidance.target must have 2 entries");
                cfg.guidance.target = {t[0], t[1]};
            }
        }
        cfg.transport = j.value("transport", cfg.transport);
    } catch (const Error&) {
        throw;
    } catch (const json::exception& e) {
        fail(ErrorKind::UnreadableFile, std::string("config field has the wrong type: ") + e.what());
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::load_file(const std::string& path) {
    return from_json_text(read_text_file(path));
}

double percent_diff(double central, double federated) {
    double mean = (central + federated) / 2.0;
    if (mean == 0.0) fail(ErrorKind::DegenerateMean, "percent_diff undefined when the mean is zero");
    return std::abs(central - federated) / std::abs(mean) * 100.0;
}

std::string format_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

SamplingMetrics evaluate_sampling(const SamplingSetup& setup, const ParamStore& denoiser_params,
                                  const ParamStore& regressor_params, int samples, int chains, std::uint64_t seed) {
    if (chains < 1 || samples < 1 || samples % chains != 0)
        fail(ErrorKind::Internal, "samples must be a positive multiple of chains");
    if (setup.atom_histogram.empty()) fail(ErrorKind::EmptySampleSet, "empty atom histogram");

    NoiseSchedule schedule = NoiseSchedule::cosine(setup.diffusion_steps);
    DenoiserModel denoiser(setup.model, denoiser_params);
    std::optional<RegressorModel> regressor;
    std::optional<RegressorGuidance> guidance;
    SampleOptions options;
    if (setup.guided) {
        regressor.emplace(setup.model, regressor_params);
        guidance.emplace(*regressor);
        options.guidance_target = setup.target;
        options.lambda_g = setup.lambda_g;
    }

    SamplingMetrics out;
    out.samples.reserve(static_cast<std::size_t>(samples));
    int per_chain = samples / chains;
    for (int c = 0; c < chains; ++c) {
        Rng rng(mix_seed(seed, kSampleChainStream, static_cast<std::uint64_t>(c)));
        for (int s = 0; s < per_chain; ++s) {
            int n_atoms = 1 + rng.categorical(setup.atom_histogram);
            SampleResult r = sample_chain(denoiser, guidance ? &*guidance : nullptr, setup.transition, schedule,
                                          n_atoms, setup.diffusion_steps, rng, options);
            out.samples.push_back(std::move(r.graph));
        }
    }
    out.validity = validity_fraction(out.samples);
    out.uniqueness = uniqueness_fraction(out.samples);
    return out;
}

void write_metrics_csv(const std::string& path, std::span<const HistoryRow> rows) {
    std::ostringstream out;
    out << "round,train_ce,train_mse,val_nll,val_mae,validity,uniqueness\n";
    for (const HistoryRow& r : rows) {
        out << r.round << ',' << csv_cell(r.train_ce) << ',' << csv_cell(r.train_mse) << ',' << csv_cell(r.val_nll)
            << ',' << csv_cell(r.val_mae) << ',' << csv_cell(r.validity) << ',' << csv_cell(r.uniqueness) << '\n';
    }
    write_text_file(path, out.str());
}

std::vector<HistoryRow> read_metrics_csv(const std::string& path) {
    std::istringstream in(read_text_file(path));
    std::string line;
    if (!std::getline(in, line)) fail(ErrorKind::UnreadableFile, "empty metrics file '" + path + "'");
    if (split_csv_line(line) != split_csv_line("round,train_ce,train_mse,val_nll,val_mae,validity,uniqueness"))
        fail(ErrorKind::UnreadableFile, "unexpected metrics header in '" + path + "'");
    std::vector<HistoryRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells = split_csv_line(line);
        if (cells.size() != 7) fail(ErrorKind::UnreadableFile, "malformed metrics row in '" + path + "'");
        HistoryRow r;
        r.round = static_cast<int>(cell_or_nan(cells[0], path));
        r.train_ce = cell_or_nan(cells[1], path);
        r.train_mse = cell_or_nan(cells[2], path);
        r.val_nll = cell_or_nan(cells[3], path);
        r.val_mae = cell_or_nan(cells[4], path);
        r.validity = cell_or_nan(cells[5], path);
        r.uniqueness = cell_or_nan(cells[6], path);
        rows.push_back(r);
    }
    return rows;
}

void write_run_outputs(const RunResult& result, const std::string& out_dir) {
    std::filesystem::path dir = prepare_out_dir(out_dir);
    write_text_file((dir / "config.json").string(), result.config.to_json_text());
    write_metrics_csv((dir / "metrics.csv").string(), result.history);
    write_text_file((dir / "report.json").string(), run_report_json(result).dump(2) + "\n");
    write_fpk(result.denoiser, (dir / "denoiser.fpk").string());
    write_fpk(result.regressor, (dir / "regressor.fpk").string());
}

std::map<std::string, double> read_final_metrics(const std::string& run_dir) {
    std::filesystem::path dir(run_dir);
    json rep;
    try {
        rep = json::parse(read_text_file((dir / "report.json").string()));
    } catch (const json::exception& e) {
        fail(ErrorKind::UnreadableFile, std::string("report.json is not valid JSON: ") + e.what());
    }
    if (!rep.contains("final") || !rep["final"].is_object())
        fail(ErrorKind::UnreadableFile, "report.json has no final metrics object");
    std::map<std::string, double> out;
    for (const auto& [key, value] : rep["final"].items()) {
        if (!value.is_number()) fail(ErrorKind::UnreadableFile, "non-numeric final metric '" + key + "'");
        out[key] = value.get<double>();
    }
    return out;
}

RunResult run_central(const ExperimentConfig& config, const std::string& out_dir) {
    config.validate();
    if (config.mode != "CL") fail(ErrorKind::Internal, "run_central needs mode CL");

    LoadResult loaded = load_dataset(config.dataset);
    SplitSpec split{config.seed, config.train_fraction, config.val_fraction, config.test_fraction, 1};
    std::vector<IndexSplit> splits = shard_and_split(loaded.records.size(), split);
    DataSlice train = DataSlice::take(loaded, splits[0].train);
    DataSlice val = DataSlice::take(loaded, splits[0].val);

    TransitionModel transition =
        config.uniform_marginals ? TransitionModel::uniform() : marginals_from_graphs(train.graphs);
    SamplingSetup sampling = make_sampling_setup(config, transition, train.graphs);

    LocalTrainer trainer(config.train_settings(), std::move(train), std::move(val));

    RunResult result;
    result.config = config;

    const int epochs = config.rounds * config.local_epochs;
    for (int e = 1; e <= epochs; ++e) {
        HistoryRow row;
        row.round = e;
        std::map<std::string, double> vm = trainer.validate(config.mc_val_samples);
        row.val_nll = vm.at("val_nll");
        if (config.with_regressor) row.val_mae = vm.at("val_mae");
        std::map<std::string, double> tm = trainer.train_epochs(1);
        row.train_ce = tm.at("train_ce");
        if (config.with_regressor) row.train_mse = tm.at("train_mse");
        if (is_sampling_row(e, epochs, config.sample_every)) {
            SamplingMetrics sm = evaluate_sampling(sampling, trainer.denoiser_params(), trainer.regressor_params(),
                                                   config.samples_per_eval, config.chains, config.seed);
            row.validity = sm.validity;
            row.uniqueness = sm.uniqueness;
        }
        result.history.push_back(row);
    }

    std::map<std::string, double> final_val = trainer.validate(config.mc_final_samples);
    SamplingMetrics final_s = evaluate_sampling(sampling, trainer.denoiser_params(), trainer.regressor_params(),
                                                config.samples_per_eval, config.chains, config.seed);
    result.denoiser = trainer.denoiser_params();
    result.regressor = trainer.regressor_params();
    result.final_metrics = final_metric_map(final_val, final_s, config.with_regressor);

    if (!out_dir.empty()) write_run_outputs(result, out_dir);
    return result;
}

RunResult run_federated(const ExperimentConfig& config, const std::string& out_dir) {
    config.validate();
    if (config.mode != "FL") fail(ErrorKind::Internal, "run_federated needs mode FL");

    LoadResult loaded = load_dataset(config.dataset);
    SplitSpec split{config.seed, config.train_fraction, config.val_fraction, config.test_fraction,
                    config.collaborators};
    std::vector<IndexSplit> splits = shard_and_split(loaded.records.size(), split);

    std::vector<std::unique_ptr<LocalCollaborator>> locals;
    for (int k = 0; k < config.collaborators; ++k) {
        char name[16];
        std::snprintf(name, sizeof(name), "col%02d", k);
        DataSlice train = DataSlice::take(loaded, splits[static_cast<std::size_t>(k)].train);
        DataSlice val = DataSlice::take(loaded, splits[static_cast<std::size_t>(k)].val);
        locals.push_back(std::make_unique<LocalCollaborator>(name, config.train_settings(), std::move(train),
                                                             std::move(val)));
    }

    // Sampling-time statistics come from the pooled training split: sampling
    // is an aggregator-side evaluation concern, not part of a round, and the
    // transition model used for generation must match none of the sites in
    // particular. Pool the shards' training graphs for both.
    std::vector<MolGraph> pooled;
    for (int k = 0; k < config.collaborators; ++k)
        for (int idx : splits[static_cast<std::size_t>(k)].train)
            pooled.push_back(loaded.graphs[static_cast<std::size_t>(idx)]);
    TransitionModel transition =
        config.uniform_marginals ? TransitionModel::uniform() : marginals_from_graphs(pooled);
    SamplingSetup sampling = make_sampling_setup(config, transition, pooled);

    ParamStore init_denoiser =
        init_params(config.model, ModelHead::Denoiser, mix_seed(config.seed, hash_name("init-denoiser")));
    ParamStore init_regressor =
        init_params(config.model, ModelHead::Regressor, mix_seed(config.seed, hash_name("init-regressor")));

    WorkflowSpec spec;
    spec.rounds = config.rounds;
    spec.local_epochs_per_round = config.local_epochs;
    spec.weights = config.weights_policy == "uniform" ? WorkflowSpec::Weights::Uniform
                                                      : WorkflowSpec::Weights::SampleCount;

    RunResult result;
    result.config = config;

    RoundCallback on_round = [&](const FederationState& state, const RoundRecord& record) {
        HistoryRow row;
        row.round = record.round;
        row.val_nll = record.aggregated.at("val_nll");
        row.train_ce = record.aggregated.at("train_ce");
        if (config.with_regressor) {
            row.val_mae = record.aggregated.at("val_mae");
            row.train_mse = record.aggregated.at("train_mse");
        }
        if (is_sampling_row(record.round, config.rounds, config.sample_every)) {
            SamplingMetrics sm = evaluate_sampling(sampling, state.global_denoiser, state.global_regressor,
                                                   config.samples_per_eval, config.chains, config.seed);
            row.validity = sm.validity;
            row.uniqueness = sm.uniqueness;
        }
        result.history.push_back(row);
    };

    FederationState state;
    if (config.transport == "tcp") {
        TcpListener listener(0);
        std::vector<std::thread> servers;
        servers.reserve(locals.size());
        for (auto& local : locals)
            servers.emplace_back([&listener, &local, &config] {
                serve_collaborator("127.0.0.1", listener.port(), *local, config.local_epochs);
            });
        {
            std::vector<std::unique_ptr<RemoteCollaborator>> remotes;
            for (std::size_t k = 0; k < locals.size(); ++k)
                remotes.push_back(std::make_unique<RemoteCollaborator>(listener.accept_one()));
            std::vector<Collaborator*> handles;
            for (auto& r : remotes) handles.push_back(r.get());
            state = run_workflow(spec, init_denoiser, init_regressor, handles, on_round);
        } // dropping the proxies closes the connections and ends the servers
        for (std::thread& s : servers) s.join();
    } else {
        std::vector<Collaborator*> handles;
        for (auto& local : locals) handles.push_back(local.get());
        state = run_workflow(spec, init_denoiser, init_regressor, handles, on_round);
    }

    // Final metrics: one extra validation pass of the final global model on
    // every site's validation split, combined with the round weights.
    std::vector<ModelUpdate> final_updates;
    std::vector<double> weights;
    for (auto& local : locals) {
        LocalTrainer& trainer = local->trainer();
        trainer.set_global_params(state.global_denoiser, state.global_regressor);
        ModelUpdate u;
        u.collaborator_id = local->id();
        u.train_sample_count = trainer.train_sample_count();
        u.metrics = trainer.validate(config.mc_final_samples);
        final_updates.push_back(std::move(u));
        weights.push_back(spec.weights == WorkflowSpec::Weights::Uniform
                              ? 1.0
                              : static_cast<double>(trainer.train_sample_count()));
    }
    std::map<std::string, double> final_val = aggregate_metrics(final_updates, weights);
    SamplingMetrics final_s = evaluate_sampling(sampling, state.global_denoiser, state.global_regressor,
                                                config.samples_per_eval, config.chains, config.seed);

    result.denoiser = state.global_denoiser;
    result.regressor = state.global_regressor;
    result.final_metrics = final_metric_map(final_val, final_s, config.with_regressor);

    if (!out_dir.empty()) write_run_outputs(result, out_dir);
    return result;
}

RunResult run_experiment(const ExperimentConfig& config, const std::string& out_dir) {
    return config.mode == "FL" ? run_federated(config, out_dir) : run_central(config, out_dir);
}

std::map<std::string, double> evaluate_run(const std::string& run_dir, int mc_samples, int samples, int chains) {
    std::filesystem::path dir(run_dir);
    ExperimentConfig config = ExperimentConfig::load_file((dir / "config.json").string());
    config.validate();
    ParamStore denoiser = read_fpk((dir / "denoiser.fpk").string());
    ParamStore regressor = read_fpk((dir / "regressor.fpk").string());
    if (mc_samples <= 0) mc_samples = config.mc_final_samples;
    if (samples <= 0) samples = config.samples_per_eval;
    if (chains <= 0) chains = config.chains;

    LoadResult loaded = load_dataset(config.dataset);
    int shards = config.mode == "FL" ? config.collaborators : 1;
    SplitSpec split{config.seed, config.train_fraction, config.val_fraction, config.test_fraction, shards};
    std::vector<IndexSplit> splits = shard_and_split(loaded.records.size(), split);

    std::vector<MolGraph> pooled;
    for (const IndexSplit& s : splits)
        for (int idx : s.train) pooled.push_back(loaded.graphs[static_cast<std::size_t>(idx)]);
    TransitionModel transition =
        config.uniform_marginals ? TransitionModel::uniform() : marginals_from_graphs(pooled);
    SamplingSetup sampling = make_sampling_setup(config, transition, pooled);

    std::vector<ModelUpdate> updates;
    std::vector<double> weights;
    for (int k = 0; k < shards; ++k) {
        DataSlice train = DataSlice::take(loaded, splits[static_cast<std::size_t>(k)].train);
        DataSlice val = DataSlice::take(loaded, splits[static_cast<std::size_t>(k)].val);
        LocalTrainer trainer(config.train_settings(), std::move(train), std::move(val));
        trainer.set_global_params(denoiser, regressor);
        ModelUpdate u;
        u.collaborator_id = "shard";
        u.train_sample_count = trainer.train_sample_count();
        u.metrics = trainer.validate(mc_samples);
        weights.push_back(config.weights_policy == "uniform" ? 1.0
                                                             : static_cast<double>(trainer.train_sample_count()));
        updates.push_back(std::move(u));
    }
    std::map<std::string, double> val = aggregate_metrics(updates, weights);
    SamplingMetrics s = evaluate_sampling(sampling, denoiser, regressor, samples, chains, config.seed);
    return final_metric_map(val, s, config.with_regressor);
}

ComparisonReport compare_runs(const std::string& central_dir, const std::string& federated_dir,
                              const std::string& out_dir) {
    std::map<std::string, double> central = read_final_metrics(central_dir);
    std::map<std::string, double> federated = read_final_metrics(federated_dir);
    if (central.size() != federated.size())
        fail(ErrorKind::MetricKeyMismatch, "runs report different metric sets");
    for (const auto& [key, unused] : central)
        if (!federated.contains(key)) fail(ErrorKind::MetricKeyMismatch, "federated run lacks metric '" + key + "'");

    ComparisonReport report;
    for (const auto& [key, c] : central) {
        MetricComparison cmp;
        cmp.central = c;
        cmp.federated = federated.at(key);
        cmp.pct_diff = percent_diff(cmp.central, cmp.federated);
        report.metrics[key] = cmp;
    }

    if (!out_dir.empty()) {
        std::filesystem::path dir = prepare_out_dir(out_dir);
        json rep = json::object();
        for (const auto& [key, cmp] : report.metrics)
            rep[key] = json{{"central", cmp.central}, {"federated", cmp.federated}, {"pct_diff", cmp.pct_diff}};
        write_text_file((dir / "report.json").string(), rep.dump(2) + "\n");

        std::ostringstream table;
        table << "metric,central,federated,pct_diff\n";
        for (const auto& [key, cmp] : report.metrics)
            table << key << ',' << format_g17(cmp.central) << ',' << format_g17(cmp.federated) << ','
                  << format_g17(cmp.pct_diff) << '\n';
        write_text_file((dir / "table.csv").string(), table.str());

        std::vector<HistoryRow> ch = read_metrics_csv((std::filesystem::path(central_dir) / "metrics.csv").string());
        std::vector<HistoryRow> fh =
            read_metrics_csv((std::filesystem::path(federated_dir) / "metrics.csv").string());
        std::size_t rows = std::min(ch.size(), fh.size());
        std::filesystem::create_directories(dir / "curves");
        for (const auto& [name, member] : curve_columns()) {
            std::ostringstream curve;
            curve << "round,central,federated\n";
            for (std::size_t r = 0; r < rows; ++r)
                curve << ch[r].round << ',' << csv_cell(ch[r].*member) << ',' << csv_cell(fh[r].*member) << '\n';
            write_text_file((dir / "curves" / (name + ".csv")).string(), curve.str());
        }
    }
    return report;
}

namespace {

struct SelfTest {
    int failures = 0;

    void check(const std::string& name, bool ok) {
        std::printf("%s  %s\n", ok ? "PASS" : "FAIL", name.c_str());
        if (!ok) ++failures;
    }
};

} // namespace

int run_selftest() {
    SelfTest st;

    try {
        bool ok = std::abs(percent_diff(68.45, 70.58) - 3.06) < 0.01 &&
                  std::abs(percent_diff(0.6932, 0.7026) - 1.35) < 0.01 &&
                  std::abs(percent_diff(0.9600, 0.9560) - 0.42) < 0.01;
        st.check("percent_diff reference values", ok);
    } catch (const std::exception&) {
        st.check("percent_diff reference values", false);
    }

    try {
        NoiseSchedule sched = NoiseSchedule::cosine(100);
        TransitionModel model = TransitionModel::from_marginals(Eigen::Vector4d(0.7, 0.1, 0.1, 0.1),
                                                                Eigen::Vector4d(0.9, 0.05, 0.03, 0.02));
        bool ok = true;
        for (int t = 1; t <= 100 && ok; ++t) {
            for (Channel ch : {Channel::Nodes, Channel::Edges}) {
                Eigen::Matrix4d lhs = qbar_matrix(model, sched, t - 1, ch) *
                                      (ch == Channel::Nodes ? transition_matrices(model, sched, t).q_nodes
                                                            : transition_matrices(model, sched, t).q_edges);
                Eigen::Matrix4d rhs = qbar_matrix(model, sched, t, ch);
                if (((lhs - rhs).cwiseAbs().maxCoeff()) > 1e-9) ok = false;
            }
        }
        st.check("Chapman-Kolmogorov identity", ok);
    } catch (const std::exception&) {
        st.check("Chapman-Kolmogorov identity", false);
    }

    try {
        NoiseSchedule sched = NoiseSchedule::cosine(20);
        TransitionModel model = TransitionModel::uniform();
        bool ok = true;
        for (int t = 2; t <= 20 && ok; ++t)
            for (int z = 0; z < 4 && ok; ++z)
                for (int x = 0; x < 4 && ok; ++x) {
                    double sum = posterior_distribution(z, x, t, Channel::Nodes, model, sched).sum();
                    if (std::abs(sum - 1.0) > 1e-9) ok = false;
                }
        st.check("posterior normalization", ok);
    } catch (const std::exception&) {
        st.check("posterior normalization", false);
    }

    try {
        ParamStore a;
        a.add("w", {2}, {1.0f, 2.0f});
        ParamStore b;
        b.add("w", {2}, {3.0f, 4.0f});
        std::vector<ParamStore> stores{a, b};
        std::vector<double> w{1.0, 1.0};
        ParamStore mid = fedavg(stores, w);
        bool ok = mid.entry(0).values[0] == 2.0f && mid.entry(0).values[1] == 3.0f;
        std::vector<ParamStore> same{a, a, a};
        std::vector<double> w3{5.0, 1.0, 2.0};
        ParamStore ident = fedavg(same, w3);
        ok = ok && ident.entry(0).values == a.entry(0).values;
        st.check("fedavg identity and midpoint", ok);
    } catch (const std::exception&) {
        st.check("fedavg identity and midpoint", false);
    }

    try {
        ModelUpdate u;
        u.collaborator_id = "col00";
        u.train_sample_count = 17;
        u.metrics = {{"train_ce", 1.25}, {"val_nll", 42.0}};
        u.denoiser_params.add("w", {2, 2}, {1.0f, -2.0f, 0.5f, 3.0f});
        u.regressor_params.add("b", {2}, {0.0f, 1.0f});
        ModelUpdate back = decode_update(encode_update(u));
        st.check("wire round-trip", back == u);
    } catch (const std::exception&) {
        st.check("wire round-trip", false);
    }

    try {
        MolGraph g = parse_smiles("CC(=O)N");
        MolGraph back = parse_smiles(write_smiles(g));
        st.check("smiles round-trip", canonical_key(g) == canonical_key(back) && check_valid(g).valid);
    } catch (const std::exception&) {
        st.check("smiles round-trip", false);
    }

    try {
        ParamStore p;
        p.add("w", {1}, {0.0f});
        ParamStore g;
        g.add("w", {1}, {1.0f});
        OptimizerState state;
        OptimizerConfig opt;
        adamw_step(p, g, state, opt);
        st.check("adamw first step", std::abs(p.entry(0).values[0] + 2e-4f) < 1e-9f);
    } catch (const std::exception&) {
        st.check("adamw first step", false);
    }

    return st.failures;
}

} // namespace fedmol
