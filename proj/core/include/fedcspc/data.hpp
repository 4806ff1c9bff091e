#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <vector>

#include "fedcspc/tensor.hpp"

namespace fedcspc {

using ClassId = std::size_t;
using ClientId = std::size_t;

struct LabeledDataset {
    Tensor features;  // n x dim
    std::vector<ClassId> labels;
    std::size_t class_count = 0;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t dim() const { return features.cols(); }
    void validate() const;
    std::vector<std::size_t> class_histogram() const;

    friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;
};

struct SyntheticSpec {
    std::size_t classes = 8;
    std::size_t dim = 32;
    std::size_t per_class = 100;
    double spread = 1.0;
    std::uint64_t seed = 1;
};

// Isotropic Gaussian clusters around per-class means drawn from N(0, I), with
// pairwise mean distance at least 4 * spread.
LabeledDataset make_synthetic(const SyntheticSpec& spec);

// Train and test sets drawn from the same class means.
struct SyntheticSplit {
    LabeledDataset train;
    LabeledDataset test;
};
SyntheticSplit make_synthetic_split(const SyntheticSpec& spec, std::size_t test_per_class);

std::vector<std::vector<double>> synthetic_means(const SyntheticSpec& spec);

// CSV: one sample per line as `label,f1,...,fd`; blank lines and '#' comments skipped.
// `class_count` of 0 means infer it as max label + 1.
LabeledDataset read_csv(std::istream& in, std::size_t class_count = 0);
LabeledDataset load_csv(const std::filesystem::path& path, std::size_t class_count = 0);
void write_csv(std::ostream& out, const LabeledDataset& data);
void save_csv(const std::filesystem::path& path, const LabeledDataset& data);

struct PartitionPlan {
    std::map<ClientId, std::vector<std::size_t>> assignments;
    double beta = 0.0;

    std::size_t client_count() const noexcept { return assignments.size(); }
    std::size_t total() const;
    // p_k = |D_k| / D
    std::vector<double> client_weights() const;
};

// Per class, q ~ Dir(beta * 1_N) splits the class's shuffled indices across
// clients with largest-remainder rounding. Every client ends up non-empty.
PartitionPlan dirichlet_partition(const LabeledDataset& data, std::size_t n_clients, double beta, std::uint64_t seed);

LabeledDataset split_client(const LabeledDataset& data, const PartitionPlan& plan, ClientId client);

// client -> per-class sample counts
std::vector<std::vector<std::size_t>> partition_histograms(const LabeledDataset& data, const PartitionPlan& plan);

// Text export, one `client <id>: i0 i1 ...` line per client.
void write_partition(std::ostream& out, const PartitionPlan& plan);
PartitionPlan read_partition(std::istream& in);

}  // namespace fedcspc
