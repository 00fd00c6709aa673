#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedmol/molgraph.hpp"

namespace fedmol {

struct Record {
    std::string smiles;
    double mu = 0.0;
    double homo = 0.0;
};

struct LoadResult {
    std::vector<Record> records;
    std::vector<MolGraph> graphs; // parsed per record, same order
    int skipped = 0;
};

/// Reads a `smiles,mu,homo` CSV. Rows that fail to parse (SMILES or numbers)
/// are skipped and counted.
LoadResult load_dataset(const std::string& path);

struct SplitSpec {
    std::uint64_t seed = 0;
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
    int collaborators = 1;

    void validate() const;
};

struct IndexSplit {
    std::vector<int> train;
    std::vector<int> val;
    std::vector<int> test;
};

/// Seeded Fisher-Yates shuffle, contiguous equal shards (remainder to the
/// last), then a contiguous train/val/test split inside each shard.
std::vector<IndexSplit> shard_and_split(std::size_t record_count, const SplitSpec& spec);

/// Per-target standardization fitted on a training split (population std).
class Normalizer {
  public:
    static Normalizer fit(std::span<const Record> train);
    static Normalizer identity();

    Eigen::Vector2d apply(const Eigen::Vector2d& raw) const;
    Eigen::Vector2d invert(const Eigen::Vector2d& normalized) const;

    const Eigen::Vector2d& mean() const { return mean_; }
    const Eigen::Vector2d& stddev() const { return std_; }

  private:
    Eigen::Vector2d mean_ = Eigen::Vector2d::Zero();
    Eigen::Vector2d std_ = Eigen::Vector2d::Ones();
};

/// Empirical heavy-atom-count distribution over n in [1, kMaxAtoms].
std::vector<double> atom_count_histogram(std::span<const MolGraph> graphs);

} // namespace fedmol
