#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fedcspc/data.hpp"
#include "fedcspc/tensor.hpp"

namespace fedcspc {

// A feature-space summary of part of one client's class, tagged with where it came from.
struct Prototype {
    std::vector<double> vector;
    ClassId class_id = 0;
    ClientId client_id = 0;
    std::size_t cluster_id = 0;
    std::size_t repeat_id = 0;

    friend bool operator==(const Prototype&, const Prototype&) = default;
};

struct ClusterResult {
    Tensor centroids;                     // k x dim
    std::vector<std::size_t> assignment;  // point -> cluster
    double inertia = 0.0;
    std::vector<double> inertia_trace;  // after each assignment step
    std::size_t iterations = 0;
};

inline constexpr std::size_t kKmeansMaxIterations = 100;

// Lloyd's algorithm from k-means++ seeding. Ties go to the lowest cluster id and an
// empty cluster is reseeded at the point farthest from its assigned centroid.
ClusterResult kmeans(const Tensor& points, std::size_t k, std::uint64_t seed);
// Lowest-inertia result over `restarts` seeds derived from `seed`.
ClusterResult kmeans_best_of(const Tensor& points, std::size_t k, std::uint64_t seed, std::size_t restarts);

double inertia(const Tensor& points, const Tensor& centroids, std::span<const std::size_t> assignment);

struct PrototypeOptions {
    std::size_t clusters = 2;  // k per class
    double ratio = 0.5;        // r, fraction of a cluster drawn per repeat
    std::size_t repeats = 5;   // n_repeat
};

// Per present class: k-means on the class's features, then `repeats` means of
// ceil(r * |cluster|) members drawn without replacement from each cluster.
std::vector<Prototype> make_prototypes(const Tensor& features, std::span<const ClassId> labels,
                                       const PrototypeOptions& options, ClientId client, std::uint64_t seed);

// One plain class mean per present class.
std::vector<Prototype> traditional_prototypes(const Tensor& features, std::span<const ClassId> labels,
                                              ClientId client);

std::vector<double> mean_of_rows(const Tensor& m, std::span<const std::size_t> rows);

}  // namespace fedcspc
