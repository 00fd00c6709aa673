#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "fedmol/error.hpp"
#include "fedmol/harness.hpp"

namespace {

using namespace fedmol;

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<int> rounds;
    std::optional<int> collaborators;
    std::optional<std::string> transport;
    std::optional<std::string> dataset;
};

void add_override_flags(CLI::App* cmd, std::string& config_path, Overrides& ov, std::string& out_dir) {
    cmd->add_option("--config", config_path, "experiment config JSON")->required();
    cmd->add_option("--seed", ov.seed, "override config seed");
    cmd->add_option("--rounds", ov.rounds, "override training rounds");
    cmd->add_option("--collaborators", ov.collaborators, "override collaborator count");
    cmd->add_option("--transport", ov.transport, "override transport (inproc|tcp)")
        ->check(CLI::IsMember({"inproc", "tcp"}));
    cmd->add_option("--dataset", ov.dataset, "override dataset path");
    cmd->add_option("--out", out_dir, "output directory for run artifacts");
}

ExperimentConfig load_with_overrides(const std::string& config_path, const Overrides& ov, const char* mode) {
    ExperimentConfig cfg = ExperimentConfig::load_file(config_path);
    cfg.mode = mode;
    if (ov.seed) cfg.seed = *ov.seed;
    if (ov.rounds) cfg.rounds = *ov.rounds;
    if (ov.collaborators) cfg.collaborators = *ov.collaborators;
    if (ov.transport) cfg.transport = *ov.transport;
    if (ov.dataset) cfg.dataset = *ov.dataset;
    return cfg;
}

void print_final(const std::map<std::string, double>& metrics) {
    for (const auto& [key, value] : metrics) std::printf("%s %s\n", key.c_str(), format_g17(value).c_str());
}

int cmd_prepare_data(const std::string& in_path, const std::string& out_path) {
    LoadResult loaded = load_dataset(in_path);
    std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::UnreadableFile, "cannot write '" + out_path + "'");
    out << "smiles,mu,homo\n";
    for (const Record& r : loaded.records)
        out << r.smiles << ',' << format_g17(r.mu) << ',' << format_g17(r.homo) << '\n';
    std::vector<double> histo = atom_count_histogram(loaded.graphs);
    std::printf("kept %zu rows, skipped %d\n", loaded.records.size(), loaded.skipped);
    std::printf("atom-count histogram:");
    for (std::size_t i = 0; i < histo.size(); ++i) std::printf(" %zu:%.4f", i + 1, histo[i]);
    std::printf("\n");
    return 0;
}

int cmd_sample(const std::string& config_path, const std::string& run_dir, int count, int chains,
               std::optional<std::uint64_t> seed, const std::string& out_path, const std::string& trajectory_path) {
    ExperimentConfig cfg = ExperimentConfig::load_file(config_path);
    std::filesystem::path dir(run_dir);
    ParamStore denoiser = read_fpk((dir / "denoiser.fpk").string());
    ParamStore regressor = read_fpk((dir / "regressor.fpk").string());
    std::uint64_t s = seed ? *seed : cfg.seed;

    LoadResult loaded = load_dataset(cfg.dataset);
    SplitSpec split{cfg.seed, cfg.train_fraction, cfg.val_fraction, cfg.test_fraction, 1};
    std::vector<IndexSplit> splits = shard_and_split(loaded.records.size(), split);
    DataSlice train = DataSlice::take(loaded, splits[0].train);

    SamplingSetup setup;
    setup.model = cfg.model;
    setup.diffusion_steps = cfg.diffusion_steps;
    setup.transition = cfg.uniform_marginals ? TransitionModel::uniform() : marginals_from_graphs(train.graphs);
    setup.atom_histogram = atom_count_histogram(train.graphs);
    setup.guided = cfg.guidance.enabled && cfg.with_regressor;
    setup.lambda_g = cfg.guidance.lambda_g;
    setup.target = Eigen::Vector2d(cfg.guidance.target[0], cfg.guidance.target[1]);

    SamplingMetrics metrics = evaluate_sampling(setup, denoiser, regressor, count, chains, s);

    std::ostream* out = &std::cout;
    std::ofstream file;
    if (!out_path.empty()) {
        file.open(out_path, std::ios::binary | std::ios::trunc);
        if (!file) fail(ErrorKind::UnreadableFile, "cannot write '" + out_path + "'");
        out = &file;
    }
    for (const MolGraph& g : metrics.samples) {
        ValidityResult v = check_valid(g);
        *out << (v.valid ? write_smiles(g) : std::string("# invalid")) << '\n';
    }
    std::fprintf(stderr, "validity %s uniqueness %s\n", format_g17(metrics.validity).c_str(),
                 format_g17(metrics.uniqueness).c_str());

    if (!trajectory_path.empty()) {
        NoiseSchedule schedule = NoiseSchedule::cosine(cfg.diffusion_steps);
        DenoiserModel model(cfg.model, denoiser);
        std::optional<RegressorModel> reg;
        std::optional<RegressorGuidance> guide;
        SampleOptions options;
        options.collect_trajectory = true;
        if (setup.guided) {
            reg.emplace(cfg.model, regressor);
            guide.emplace(*reg);
            options.guidance_target = setup.target;
            options.lambda_g = setup.lambda_g;
        }
        Rng rng(mix_seed(s, hash_name("trajectory")));
        int n_atoms = 1 + rng.categorical(setup.atom_histogram);
        SampleResult r = sample_chain(model, guide ? &*guide : nullptr, setup.transition, schedule, n_atoms,
                                      cfg.diffusion_steps, rng, options);
        write_trajectory_tsv(r.trajectory, trajectory_path);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"federated discrete-diffusion molecule generator"};
    app.require_subcommand(1);

    std::string prep_in, prep_out;
    CLI::App* prep = app.add_subcommand("prepare-data", "validate a smiles,mu,homo CSV and write the cleaned copy");
    prep->add_option("--in", prep_in, "input CSV")->required();
    prep->add_option("--out", prep_out, "output CSV")->required();

    std::string central_config, central_out;
    Overrides central_ov;
    CLI::App* central = app.add_subcommand("train-central", "centralized training run");
    add_override_flags(central, central_config, central_ov, central_out);

    std::string fed_config, fed_out;
    Overrides fed_ov;
    CLI::App* fed = app.add_subcommand("train-federated", "federated training run");
    add_override_flags(fed, fed_config, fed_ov, fed_out);

    std::string sample_config, sample_run, sample_out, sample_traj;
    int sample_count = 100;
    int sample_chains = 10;
    std::optional<std::uint64_t> sample_seed;
    CLI::App* sample = app.add_subcommand("sample", "draw molecules from a trained run");
    sample->add_option("--config", sample_config, "experiment config JSON")->required();
    sample->add_option("--run", sample_run, "run directory with .fpk checkpoints")->required();
    sample->add_option("--count", sample_count, "number of samples");
    sample->add_option("--chains", sample_chains, "number of chains");
    sample->add_option("--seed", sample_seed, "sampling seed (default: config seed)");
    sample->add_option("--out", sample_out, "write SMILES lines here instead of stdout");
    sample->add_option("--trajectory", sample_traj, "write one denoising trajectory TSV here");

    std::string eval_run, eval_out;
    int eval_mc = 0, eval_samples = 0, eval_chains = 0;
    CLI::App* eval = app.add_subcommand("evaluate", "recompute final metrics for a completed run");
    eval->add_option("--run", eval_run, "run directory")->required();
    eval->add_option("--mc", eval_mc, "MC samples for the NLL bound (default: config)");
    eval->add_option("--samples", eval_samples, "sampling-eval sample count (default: config)");
    eval->add_option("--chains", eval_chains, "sampling-eval chains (default: config)");
    eval->add_option("--out", eval_out, "write report.json here");

    std::string cmp_central, cmp_federated, cmp_out;
    CLI::App* cmp = app.add_subcommand("compare", "compare a centralized and a federated run");
    cmp->add_option("--central", cmp_central, "centralized run directory")->required();
    cmp->add_option("--federated", cmp_federated, "federated run directory")->required();
    cmp->add_option("--out", cmp_out, "output directory for report.json/table.csv/curves");

    CLI::App* self = app.add_subcommand("selftest", "run the built-in property checks");

    CLI11_PARSE(app, argc, argv);

    try {
        if (prep->parsed()) return cmd_prepare_data(prep_in, prep_out);
        if (central->parsed()) {
            ExperimentConfig cfg = load_with_overrides(central_config, central_ov, "CL");
            RunResult result = run_central(cfg, central_out);
            print_final(result.final_metrics);
            return 0;
        }
        if (fed->parsed()) {
            ExperimentConfig cfg = load_with_overrides(fed_config, fed_ov, "FL");
            RunResult result = run_federated(cfg, fed_out);
            print_final(result.final_metrics);
            return 0;
        }
        if (sample->parsed())
            return cmd_sample(sample_config, sample_run, sample_count, sample_chains, sample_seed, sample_out,
                              sample_traj);
        if (eval->parsed()) {
            std::map<std::string, double> metrics = evaluate_run(eval_run, eval_mc, eval_samples, eval_chains);
            print_final(metrics);
            if (!eval_out.empty()) {
                std::filesystem::create_directories(eval_out);
                std::ostringstream rep;
                rep << "{\n";
                bool first = true;
                for (const auto& [key, value] : metrics) {
                    if (!first) rep << ",\n";
                    first = false;
                    rep << "  \"" << key << "\": " << format_g17(value);
                }
                rep << "\n}\n";
                std::ofstream out(std::filesystem::path(eval_out) / "report.json",
                                  std::ios::binary | std::ios::trunc);
                out << rep.str();
            }
            return 0;
        }
        if (cmp->parsed()) {
            ComparisonReport report = compare_runs(cmp_central, cmp_federated, cmp_out);
            std::printf("metric central federated pct_diff\n");
            for (const auto& [key, m] : report.metrics)
                std::printf("%s %s %s %s\n", key.c_str(), format_g17(m.central).c_str(),
                            format_g17(m.federated).c_str(), format_g17(m.pct_diff).c_str());
            return 0;
        }
        if (self->parsed()) {
            int failures = run_selftest();
            std::printf("%d failure(s)\n", failures);
            return failures == 0 ? 0 : 1;
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
