#include "fedcspc/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>

#include "fedcspc/error.hpp"
#include "fedcspc/rng.hpp"
#include "text_util.hpp"

namespace fedcspc {

namespace {

constexpr int kMeanAttempts = 1000;
constexpr int kMeanWidenings = 40;
constexpr int kPartitionAttempts = 10;

enum : std::uint64_t { kMeanStream = 11, kTrainStream = 12, kTestStream = 13 };

LabeledDataset sample_mixture(const std::vector<std::vector<double>>& means, std::size_t per_class, double spread,
                              Rng& rng) {
    std::size_t dim = means.front().size();
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<double> data;
    data.reserve(means.size() * per_class * dim);
    LabeledDataset out;
    out.class_count = means.size();
    for (std::size_t c = 0; c < means.size(); ++c) {
        for (std::size_t i = 0; i < per_class; ++i) {
            for (std::size_t d = 0; d < dim; ++d) data.push_back(means[c][d] + spread * noise(rng));
            out.labels.push_back(c);
        }
    }
    out.features = Tensor::matrix(out.labels.size(), dim, std::move(data));
    return out;
}

void validate_spec(const SyntheticSpec& spec) {
    if (spec.classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
    if (spec.dim < 2) throw ConfigError("synthetic data needs dim >= 2");
    if (spec.per_class < 1) throw ConfigError("synthetic data needs per_class >= 1");
    if (!(spec.spread >= 0.0)) throw ConfigError("synthetic spread must be >= 0");
}

}  // namespace

void LabeledDataset::validate() const {
    if (features.rank() != 2 || features.rows() != labels.size()) {
        throw DimensionError("dataset has " + std::to_string(labels.size()) + " labels but features of shape " +
                             shape_string(features.shape()));
    }
    for (auto y : labels)
        if (y >= class_count) throw ContractError("label " + std::to_string(y) + " outside [0, class_count)");
}

std::vector<std::size_t> LabeledDataset::class_histogram() const {
    std::vector<std::size_t> h(class_count, 0);
    for (auto y : labels) ++h.at(y);
    return h;
}

std::vector<std::vector<double>> synthetic_means(const SyntheticSpec& spec) {
    validate_spec(spec);
    Rng rng(derive_seed({spec.seed, kMeanStream}));
    std::normal_distribution<double> unit(0.0, 1.0);
    const double min_dist = 4.0 * spec.spread;
    // Start from N(0, I) and widen the mean distribution whenever the classes
    // cannot be separated, which happens in low dimensions.
    double scale = 1.0;
    for (int widen = 0; widen < kMeanWidenings; ++widen, scale *= 1.5) {
        std::vector<std::vector<double>> means;
        for (std::size_t c = 0; c < spec.classes; ++c) {
            bool placed = false;
            for (int attempt = 0; attempt < kMeanAttempts && !placed; ++attempt) {
                std::vector<double> m(spec.dim);
                for (auto& v : m) v = scale * unit(rng);
                placed = std::all_of(means.begin(), means.end(), [&](const std::vector<double>& other) {
                    double s = 0.0;
                    for (std::size_t d = 0; d < spec.dim; ++d) s += (m[d] - other[d]) * (m[d] - other[d]);
                    return std::sqrt(s) >= min_dist && s > 0.0;
                });
                if (placed) means.push_back(std::move(m));
            }
            if (!placed) break;
        }
        if (means.size() == spec.classes) return means;
    }
    throw ConfigError("could not place " + std::to_string(spec.classes) + " class means at distance >= " +
                      std::to_string(min_dist) + " in " + std::to_string(spec.dim) + " dimensions");
}

LabeledDataset make_synthetic(const SyntheticSpec& spec) {
    auto means = synthetic_means(spec);
    Rng rng(derive_seed({spec.seed, kTrainStream}));
    return sample_mixture(means, spec.per_class, spec.spread, rng);
}

SyntheticSplit make_synthetic_split(const SyntheticSpec& spec, std::size_t test_per_class) {
    auto means = synthetic_means(spec);
    Rng train_rng(derive_seed({spec.seed, kTrainStream}));
    Rng test_rng(derive_seed({spec.seed, kTestStream}));
    return {sample_mixture(means, spec.per_class, spec.spread, train_rng),
            sample_mixture(means, std::max<std::size_t>(test_per_class, 1), spec.spread, test_rng)};
}

LabeledDataset read_csv(std::istream& in, std::size_t class_count) {
    LabeledDataset out;
    std::vector<double> values;
    std::size_t dim = 0, lineno = 0;
    std::string line;
    while (std::getline(in, line)) {
        ++lineno;
        auto body = detail::trim(line);
        if (body.empty() || body.front() == '#') continue;
        auto fields = detail::split(body, ',');
        if (fields.size() < 2) throw ParseError("expected a label and at least one feature", lineno);
        auto label = detail::parse_int<std::size_t>(fields[0]);
        if (!label) throw ParseError("label '" + std::string(detail::trim(fields[0])) + "' is not a class id", lineno);
        if (dim == 0) dim = fields.size() - 1;
        if (fields.size() - 1 != dim) {
            throw ParseError("ragged row: " + std::to_string(fields.size() - 1) + " features, expected " +
                                 std::to_string(dim),
                             lineno);
        }
        for (std::size_t i = 1; i < fields.size(); ++i) {
            auto v = detail::parse_double(fields[i]);
            if (!v || !std::isfinite(*v))
                throw ParseError("non-numeric field '" + std::string(detail::trim(fields[i])) + "'", lineno);
            values.push_back(*v);
        }
        out.labels.push_back(*label);
    }
    if (out.labels.empty()) throw ParseError("no samples in CSV input", std::max<std::size_t>(lineno, 1));
    std::size_t max_label = *std::max_element(out.labels.begin(), out.labels.end());
    if (class_count == 0) class_count = max_label + 1;
    if (max_label >= class_count) throw ParseError("label exceeds class count", lineno);
    out.class_count = class_count;
    out.features = Tensor::matrix(out.labels.size(), dim, std::move(values));
    return out;
}

LabeledDataset load_csv(const std::filesystem::path& path, std::size_t class_count) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    return read_csv(in, class_count);
}

void write_csv(std::ostream& out, const LabeledDataset& data) {
    for (std::size_t i = 0; i < data.size(); ++i) {
        out << data.labels[i];
        for (double v : data.features.row_span(i)) out << ',' << detail::format_double(v);
        out << '\n';
    }
}

void save_csv(const std::filesystem::path& path, const LabeledDataset& data) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    write_csv(out, data);
}

std::size_t PartitionPlan::total() const {
    std::size_t n = 0;
    for (const auto& [_, idx] : assignments) n += idx.size();
    return n;
}

std::vector<double> PartitionPlan::client_weights() const {
    double total_n = static_cast<double>(total());
    std::vector<double> w;
    for (const auto& [_, idx] : assignments) w.push_back(static_cast<double>(idx.size()) / total_n);
    return w;
}

PartitionPlan dirichlet_partition(const LabeledDataset& data, std::size_t n_clients, double beta, std::uint64_t seed) {
    if (n_clients < 2) throw ConfigError("dirichlet partition needs at least 2 clients");
    if (!(beta > 0.0)) throw ConfigError("dirichlet concentration beta must be > 0");
    if (data.size() < n_clients) {
        throw ConfigError("cannot give " + std::to_string(n_clients) + " clients a sample each from " +
                          std::to_string(data.size()) + " samples");
    }
    std::vector<std::vector<std::size_t>> by_class(data.class_count);
    for (std::size_t i = 0; i < data.size(); ++i) by_class.at(data.labels[i]).push_back(i);

    Rng rng(seed);
    std::gamma_distribution<double> gamma(beta, 1.0);
    std::vector<std::vector<std::size_t>> clients;
    for (int attempt = 0; attempt < kPartitionAttempts; ++attempt) {
        clients.assign(n_clients, {});
        for (auto idx : by_class) {
            if (idx.empty()) continue;
            std::shuffle(idx.begin(), idx.end(), rng);
            std::vector<double> q(n_clients);
            double qsum = 0.0;
            for (auto& v : q) qsum += (v = gamma(rng));
            if (!(qsum > 0.0)) {  // every gamma draw underflowed; put the class on one client
                std::fill(q.begin(), q.end(), 0.0);
                q[std::uniform_int_distribution<std::size_t>(0, n_clients - 1)(rng)] = 1.0;
                qsum = 1.0;
            }
            // Largest-remainder rounding, ties to the lowest client id.
            std::size_t n = idx.size(), assigned = 0;
            std::vector<std::size_t> counts(n_clients);
            std::vector<std::pair<double, std::size_t>> rema;
            for (std::size_t k = 0; k < n_clients; ++k) {
                double exact = q[k] / qsum * static_cast<double>(n);
                counts[k] = static_cast<std::size_t>(std::floor(exact));
                assigned += counts[k];
                rema.emplace_back(exact - static_cast<double>(counts[k]), k);
            }
            std::stable_sort(rema.begin(), rema.end(), [](auto& a, auto& b) { return a.first > b.first; });
            for (std::size_t r = 0; assigned < n; ++r, ++assigned) ++counts[rema[r % n_clients].second];
            std::size_t offset = 0;
            for (std::size_t k = 0; k < n_clients; ++k) {
                clients[k].insert(clients[k].end(), idx.begin() + offset, idx.begin() + offset + counts[k]);
                offset += counts[k];
            }
        }
        if (std::none_of(clients.begin(), clients.end(), [](auto& c) { return c.empty(); })) break;
    }
    for (auto& c : clients) {
        if (!c.empty()) continue;
        auto largest = std::max_element(clients.begin(), clients.end(),
                                        [](auto& a, auto& b) { return a.size() < b.size(); });
        c.push_back(largest->back());
        largest->pop_back();
    }

    PartitionPlan plan;
    plan.beta = beta;
    for (std::size_t k = 0; k < n_clients; ++k) {
        std::sort(clients[k].begin(), clients[k].end());
        plan.assignments.emplace(k, std::move(clients[k]));
    }
    return plan;
}

LabeledDataset split_client(const LabeledDataset& data, const PartitionPlan& plan, ClientId client) {
    auto it = plan.assignments.find(client);
    if (it == plan.assignments.end()) throw ContractError("unknown client " + std::to_string(client));
    if (it->second.empty()) throw ContractError("client " + std::to_string(client) + " has no samples");
    LabeledDataset out;
    out.class_count = data.class_count;
    out.features = gather_rows(data.features, it->second);
    for (auto i : it->second) out.labels.push_back(data.labels.at(i));
    return out;
}

std::vector<std::vector<std::size_t>> partition_histograms(const LabeledDataset& data, const PartitionPlan& plan) {
    std::vector<std::vector<std::size_t>> h;
    for (const auto& [_, idx] : plan.assignments) {
        std::vector<std::size_t> row(data.class_count, 0);
        for (auto i : idx) ++row.at(data.labels.at(i));
        h.push_back(std::move(row));
    }
    return h;
}

void write_partition(std::ostream& out, const PartitionPlan& plan) {
    out << "# dirichlet beta=" << detail::format_double(plan.beta) << '\n';
    for (const auto& [client, idx] : plan.assignments) {
        out << "client " << client << ':';
        for (auto i : idx) out << ' ' << i;
        out << '\n';
    }
}

PartitionPlan read_partition(std::istream& in) {
    PartitionPlan plan;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto body = detail::trim(line);
        if (body.empty()) continue;
        if (body.front() == '#') {
            auto pos = body.find("beta=");
            if (pos != std::string_view::npos) plan.beta = detail::parse_double(body.substr(pos + 5)).value_or(0.0);
            continue;
        }
        auto colon = body.find(':');
        if (body.substr(0, 7) != "client " || colon == std::string_view::npos)
            throw ParseError("expected 'client <id>: indices'", lineno);
        auto id = detail::parse_int<std::size_t>(body.substr(7, colon - 7));
        if (!id) throw ParseError("bad client id", lineno);
        std::vector<std::size_t> idx;
        for (auto t : detail::split_ws(body.substr(colon + 1))) {
            auto v = detail::parse_int<std::size_t>(t);
            if (!v) throw ParseError("bad sample index '" + std::string(t) + "'", lineno);
            idx.push_back(*v);
        }
        plan.assignments[*id] = std::move(idx);
    }
    return plan;
}

}  // namespace fedcspc
