#include "fedcspc/prototype.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "fedcspc/error.hpp"
#include "fedcspc/rng.hpp"

namespace fedcspc {

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

Tensor seed_plus_plus(const Tensor& points, std::size_t k, Rng& rng) {
    std::size_t n = points.rows(), dim = points.cols();
    std::vector<std::size_t> chosen{std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)};
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    while (chosen.size() < k) {
        auto last = points.row_span(chosen.back());
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], sq_dist(points.row_span(i), last));
            total += d2[i];
        }
        std::size_t pick;
        if (total > 0.0) {
            std::discrete_distribution<std::size_t> dist(d2.begin(), d2.end());
            pick = dist(rng);
        } else {  // all remaining points coincide with a chosen centre
            std::vector<std::size_t> rest;
            for (std::size_t i = 0; i < n; ++i)
                if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) rest.push_back(i);
            pick = rest[std::uniform_int_distribution<std::size_t>(0, rest.size() - 1)(rng)];
        }
        chosen.push_back(pick);
    }
    std::vector<double> c;
    c.reserve(k * dim);
    for (auto i : chosen) c.insert(c.end(), points.row_span(i).begin(), points.row_span(i).end());
    return Tensor::matrix(k, dim, std::move(c));
}

// Nearest centroid for each point; returns inertia.
double assign(const Tensor& points, const Tensor& centroids, std::vector<std::size_t>& out) {
    double total = 0.0;
    for (std::size_t i = 0; i < points.rows(); ++i) {
        std::size_t best = 0;
        double best_d = sq_dist(points.row_span(i), centroids.row_span(0));
        for (std::size_t j = 1; j < centroids.rows(); ++j) {
            double d = sq_dist(points.row_span(i), centroids.row_span(j));
            if (d < best_d) best_d = d, best = j;
        }
        out[i] = best;
        total += best_d;
    }
    return total;
}

Tensor update_centroids(const Tensor& points, std::vector<std::size_t>& assignment, const Tensor& old, std::size_t k) {
    std::size_t dim = points.cols();
    std::vector<std::size_t> sizes(k, 0);
    for (auto a : assignment) ++sizes[a];
    for (std::size_t j = 0; j < k; ++j) {
        if (sizes[j] > 0) continue;
        // Farthest point from its own centroid, taken from a cluster that can spare it.
        std::size_t far = points.rows();
        double far_d = -1.0;
        for (std::size_t i = 0; i < points.rows(); ++i) {
            if (sizes[assignment[i]] < 2) continue;
            double d = sq_dist(points.row_span(i), old.row_span(assignment[i]));
            if (d > far_d) far_d = d, far = i;
        }
        if (far == points.rows()) break;
        --sizes[assignment[far]];
        assignment[far] = j;
        ++sizes[j];
    }
    Tensor c = Tensor::zeros({k, dim});
    std::vector<std::vector<std::size_t>> members(k);
    for (std::size_t i = 0; i < assignment.size(); ++i) members[assignment[i]].push_back(i);
    for (std::size_t j = 0; j < k; ++j) {
        if (members[j].empty()) {
            for (std::size_t d = 0; d < dim; ++d) c.at(j, d) = old.at(j, d);
            continue;
        }
        auto m = mean_of_rows(points, members[j]);
        for (std::size_t d = 0; d < dim; ++d) c.at(j, d) = m[d];
    }
    return c;
}

std::map<ClassId, std::vector<std::size_t>> rows_by_class(const Tensor& features, std::span<const ClassId> labels) {
    if (features.rank() != 2 || features.rows() != labels.size()) {
        throw DimensionError("features " + shape_string(features.shape()) + " do not match " +
                             std::to_string(labels.size()) + " labels");
    }
    std::map<ClassId, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < labels.size(); ++i) out[labels[i]].push_back(i);
    return out;
}

}  // namespace

std::vector<double> mean_of_rows(const Tensor& m, std::span<const std::size_t> rows) {
    std::vector<double> out(m.cols(), 0.0);
    for (auto r : rows) {
        auto v = m.row_span(r);
        for (std::size_t d = 0; d < out.size(); ++d) out[d] += v[d];
    }
    for (auto& v : out) v /= static_cast<double>(rows.size());
    return out;
}

double inertia(const Tensor& points, const Tensor& centroids, std::span<const std::size_t> assignment) {
    double total = 0.0;
    for (std::size_t i = 0; i < points.rows(); ++i) total += sq_dist(points.row_span(i), centroids.row_span(assignment[i]));
    return total;
}

ClusterResult kmeans(const Tensor& points, std::size_t k, std::uint64_t seed) {
    if (points.rank() != 2) throw DimensionError("kmeans expects an n x dim matrix");
    if (k < 1) throw ConfigError("kmeans needs k >= 1");
    if (k > points.rows()) {
        throw ConfigError("kmeans: k = " + std::to_string(k) + " exceeds " + std::to_string(points.rows()) + " points");
    }
    Rng rng(seed);
    ClusterResult res;
    res.centroids = seed_plus_plus(points, k, rng);
    res.assignment.assign(points.rows(), 0);
    std::vector<std::size_t> previous;
    bool converged = false;
    for (std::size_t iter = 0; iter < kKmeansMaxIterations; ++iter) {
        res.inertia = assign(points, res.centroids, res.assignment);
        res.inertia_trace.push_back(res.inertia);
        res.iterations = iter + 1;
        if (res.assignment == previous) {
            converged = true;
            break;
        }
        previous = res.assignment;
        res.centroids = update_centroids(points, res.assignment, res.centroids, k);
    }
    if (!converged) {
        res.inertia = assign(points, res.centroids, res.assignment);
        res.inertia_trace.push_back(res.inertia);
    }
    // Duplicate points can leave a cluster empty after the final assignment,
    // since ties go to the lowest id. Repair once more without reassigning.
    std::vector<bool> used(k, false);
    for (auto a : res.assignment) used[a] = true;
    if (std::find(used.begin(), used.end(), false) != used.end()) {
        res.centroids = update_centroids(points, res.assignment, res.centroids, k);
        res.inertia = inertia(points, res.centroids, res.assignment);
        res.inertia_trace.push_back(res.inertia);
    }
    return res;
}

ClusterResult kmeans_best_of(const Tensor& points, std::size_t k, std::uint64_t seed, std::size_t restarts) {
    ClusterResult best;
    for (std::size_t r = 0; r < std::max<std::size_t>(restarts, 1); ++r) {
        auto res = kmeans(points, k, derive_seed({seed, r}));
        if (r == 0 || res.inertia < best.inertia) best = std::move(res);
    }
    return best;
}

std::vector<Prototype> make_prototypes(const Tensor& features, std::span<const ClassId> labels,
                                       const PrototypeOptions& options, ClientId client, std::uint64_t seed) {
    if (!(options.ratio > 0.0 && options.ratio <= 1.0)) throw ConfigError("prototype sampling ratio must be in (0, 1]");
    if (options.repeats < 1) throw ConfigError("prototype repeats must be >= 1");
    if (options.clusters < 1) throw ConfigError("prototype clusters must be >= 1");
    std::vector<Prototype> out;
    for (const auto& [cls, rows] : rows_by_class(features, labels)) {
        Tensor points = gather_rows(features, rows);
        std::size_t k = std::min(options.clusters, rows.size());
        auto clusters = kmeans(points, k, derive_seed({seed, cls, 0}));
        std::vector<std::vector<std::size_t>> members(k);
        for (std::size_t i = 0; i < clusters.assignment.size(); ++i) members[clusters.assignment[i]].push_back(i);
        Rng rng(derive_seed({seed, cls, 1}));
        for (std::size_t j = 0; j < k; ++j) {
            if (members[j].empty()) continue;
            auto draw = static_cast<std::size_t>(std::ceil(options.ratio * static_cast<double>(members[j].size())));
            draw = std::clamp<std::size_t>(draw, 1, members[j].size());
            for (std::size_t t = 0; t < options.repeats; ++t) {
                std::vector<std::size_t> picked;
                std::sample(members[j].begin(), members[j].end(), std::back_inserter(picked), draw, rng);
                out.push_back({mean_of_rows(points, picked), cls, client, j, t});
            }
        }
    }
    return out;
}

std::vector<Prototype> traditional_prototypes(const Tensor& features, std::span<const ClassId> labels,
                                              ClientId client) {
    std::vector<Prototype> out;
    for (const auto& [cls, rows] : rows_by_class(features, labels)) out.push_back({mean_of_rows(features, rows), cls, client, 0, 0});
    return out;
}

}  // namespace fedcspc
