#include "fedmol/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "fedmol/error.hpp"
#include "fedmol/rng.hpp"

namespace fedmol {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.push_back("");
    return fields;
}

std::string trimmed(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

} // namespace

LoadResult load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::UnreadableFile, "cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) fail(ErrorKind::EmptyDataset, "'" + path + "' has no header");

    std::vector<std::string> header = split_csv_line(line);
    for (std::string& h : header) h = trimmed(h);
    int smiles_col = -1, mu_col = -1, homo_col = -1;
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == "smiles") smiles_col = static_cast<int>(i);
        if (header[i] == "mu") mu_col = static_cast<int>(i);
        if (header[i] == "homo") homo_col = static_cast<int>(i);
    }
    if (smiles_col < 0) fail(ErrorKind::MissingColumn, "smiles");
    if (mu_col < 0) fail(ErrorKind::MissingColumn, "mu");
    if (homo_col < 0) fail(ErrorKind::MissingColumn, "homo");

    LoadResult out;
    int max_col = std::max({smiles_col, mu_col, homo_col});
    while (std::getline(in, line)) {
        if (trimmed(line).empty()) continue;
        std::vector<std::string> fields = split_csv_line(line);
        if (static_cast<int>(fields.size()) <= max_col) {
            ++out.skipped;
            continue;
        }
        Record rec;
        rec.smiles = trimmed(fields[static_cast<std::size_t>(smiles_col)]);
        try {
            rec.mu = std::stod(fields[static_cast<std::size_t>(mu_col)]);
            rec.homo = std::stod(fields[static_cast<std::size_t>(homo_col)]);
            if (!std::isfinite(rec.mu) || !std::isfinite(rec.homo)) throw std::invalid_argument("non-finite");
            MolGraph g = parse_smiles(rec.smiles);
            out.records.push_back(std::move(rec));
            out.graphs.push_back(std::move(g));
        } catch (const std::exception&) {
            ++out.skipped;
        }
    }
    if (out.records.empty()) fail(ErrorKind::EmptyDataset, "'" + path + "' has no usable rows");
    return out;
}

void SplitSpec::validate() const {
    if (collaborators < 1) fail(ErrorKind::DatasetTooSmall, "collaborator count must be >= 1");
    if (!(train > 0.0 && val > 0.0 && test > 0.0) || std::abs(train + val + test - 1.0) > 1e-9)
        fail(ErrorKind::Internal, "split fractions must be positive and sum to 1");
}

std::vector<IndexSplit> shard_and_split(std::size_t record_count, const SplitSpec& spec) {
    spec.validate();
    std::size_t k = static_cast<std::size_t>(spec.collaborators);
    if (record_count < 10 * k)
        fail(ErrorKind::DatasetTooSmall, std::to_string(record_count) + " records for " + std::to_string(k) +
                                             " collaborators (need at least " + std::to_string(10 * k) + ")");

    std::vector<int> order(record_count);
    for (std::size_t i = 0; i < record_count; ++i) order[i] = static_cast<int>(i);
    Rng rng(mix_seed(spec.seed, hash_name("shard-shuffle")));
    for (std::size_t i = record_count - 1; i > 0; --i) {
        std::size_t j = rng.uniform_index(i + 1);
        std::swap(order[i], order[j]);
    }

    std::size_t base = record_count / k;
    std::vector<IndexSplit> out(k);
    for (std::size_t s = 0; s < k; ++s) {
        std::size_t begin = s * base;
        std::size_t end = (s + 1 == k) ? record_count : begin + base;
        std::size_t size = end - begin;
        std::size_t n_train = static_cast<std::size_t>(std::floor(spec.train * static_cast<double>(size)));
        std::size_t n_val = static_cast<std::size_t>(std::floor(spec.val * static_cast<double>(size)));
        for (std::size_t i = begin; i < end; ++i) {
            std::size_t offset = i - begin;
            if (offset < n_train)
                out[s].train.push_back(order[i]);
            else if (offset < n_train + n_val)
                out[s].val.push_back(order[i]);
            else
                out[s].test.push_back(order[i]);
        }
    }
    return out;
}

Normalizer Normalizer::fit(std::span<const Record> train) {
    if (train.size() < 2) fail(ErrorKind::ZeroVariance, "need at least 2 records to fit a normalizer");
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    for (const Record& r : train) mean += Eigen::Vector2d(r.mu, r.homo);
    mean /= static_cast<double>(train.size());
    Eigen::Vector2d var = Eigen::Vector2d::Zero();
    for (const Record& r : train) {
        Eigen::Vector2d d = Eigen::Vector2d(r.mu, r.homo) - mean;
        var += d.cwiseProduct(d);
    }
    var /= static_cast<double>(train.size());
    if (var.minCoeff() <= 1e-24) fail(ErrorKind::ZeroVariance, "a target column is constant on the training split");
    Normalizer n;
    n.mean_ = mean;
    n.std_ = var.cwiseSqrt();
    return n;
}

Normalizer Normalizer::identity() { return Normalizer{}; }

Eigen::Vector2d Normalizer::apply(const Eigen::Vector2d& raw) const {
    return (raw - mean_).cwiseQuotient(std_);
}

Eigen::Vector2d Normalizer::invert(const Eigen::Vector2d& normalized) const {
    return normalized.cwiseProduct(std_) + mean_;
}

std::vector<double> atom_count_histogram(std::span<const MolGraph> graphs) {
    if (graphs.empty()) fail(ErrorKind::EmptySampleSet, "histogram over an empty graph set");
    std::vector<double> hist(static_cast<std::size_t>(kMaxAtoms), 0.0);
    for (const MolGraph& g : graphs) {
        if (g.size() < 1 || g.size() > kMaxAtoms) fail(ErrorKind::Internal, "graph size out of range");
        hist[static_cast<std::size_t>(g.size() - 1)] += 1.0;
    }
    for (double& h : hist) h /= static_cast<double>(graphs.size());
    return hist;
}

} // namespace fedmol
