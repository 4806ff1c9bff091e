#include "fedcspc/client.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <set>

#include "fedcspc/error.hpp"

namespace fedcspc {

namespace {

double norm_of_diff(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

// Unit-normalized prototype matrix (classes in ascending order) and the row of each class.
struct PrototypeTable {
    Tensor unit;
    std::map<ClassId, std::size_t> row;
};

PrototypeTable unit_prototypes(const GlobalPrototypeSet& globals) {
    PrototypeTable t;
    std::vector<std::vector<double>> rows;
    for (const auto& [cls, v] : globals) {
        double n = 0.0;
        for (double x : v) n += x * x;
        n = std::sqrt(n);
        std::vector<double> u(v);
        if (n > 0.0)
            for (auto& x : u) x /= n;
        t.row.emplace(cls, rows.size());
        rows.push_back(std::move(u));
    }
    t.unit = stack_rows(rows);
    return t;
}

ad::Var sum_of(const std::vector<ad::Var>& terms) {
    ad::Var acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) acc = ad::add(acc, terms[i]);
    return acc;
}

ad::Var mean_of(const std::vector<ad::Var>& terms) {
    return ad::scale(sum_of(terms), 1.0 / static_cast<double>(terms.size()));
}

ad::Var unit_side(const ad::Var& from, const ad::Var& vertex) {
    ad::Var d = ad::sub(from, vertex);
    return ad::div(d, ad::l2_norm(d));
}

// Ordered index tuples over `pool` whose labels are pairwise distinct.
template <std::size_t N>
std::vector<std::array<std::size_t, N>> sample_label_distinct(std::span<const std::size_t> pool,
                                                              std::span<const ClassId> labels, std::size_t want,
                                                              Rng& rng) {
    std::vector<std::array<std::size_t, N>> out;
    std::set<ClassId> distinct;
    for (auto i : pool) distinct.insert(labels[i]);
    if (pool.size() < N || distinct.size() < N || want == 0) return out;
    std::set<std::array<std::size_t, N>> seen;
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    const std::size_t attempts = 20 * want;
    for (std::size_t a = 0; a < attempts && out.size() < want; ++a) {
        std::array<std::size_t, N> t{};
        for (auto& v : t) v = pool[pick(rng)];
        bool ok = true;
        for (std::size_t x = 0; x < N && ok; ++x)
            for (std::size_t y = x + 1; y < N && ok; ++y) ok = labels[t[x]] != labels[t[y]];
        if (ok && seen.insert(t).second) out.push_back(t);
    }
    return out;
}

}  // namespace

std::optional<ad::Var> loss_node(const ad::Var& f, const GlobalPrototypeSet& globals, ClassId label, double tau_l) {
    if (f.value().rank() != 2 || f.value().rows() != 1) {
        throw DimensionError("loss_node expects a 1 x d feature, got " + shape_string(f.shape()));
    }
    ClassId labels[] = {label};
    return loss_node_batch(f, labels, globals, tau_l);
}

std::optional<ad::Var> loss_node_batch(const ad::Var& features, std::span<const ClassId> labels,
                                       const GlobalPrototypeSet& globals, double tau_l) {
    if (!(tau_l > 0.0)) throw ContractError("node loss temperature must be > 0");
    if (globals.size() < 2) return std::nullopt;
    auto table = unit_prototypes(globals);
    if (table.unit.cols() != features.value().cols()) {
        throw DimensionError("feature width " + std::to_string(features.value().cols()) +
                             " differs from prototype width " + std::to_string(table.unit.cols()));
    }
    std::size_t n = labels.size(), c = table.unit.rows();
    Tensor mask = Tensor::zeros({n, c});
    std::size_t anchored = 0;
    for (std::size_t i = 0; i < n; ++i) {
        auto it = table.row.find(labels[i]);
        if (it == table.row.end()) continue;
        mask.at(i, it->second) = 1.0;
        ++anchored;
    }
    if (anchored == 0) return std::nullopt;
    ad::Var sims = ad::matmul(ad::normalize_rows(features), ad::transpose(ad::constant(table.unit)));
    ad::Var lsm = ad::log_softmax_rows(ad::scale(sims, 1.0 / tau_l));
    return ad::scale(ad::sum(ad::mul(lsm, ad::constant(mask))), -1.0 / static_cast<double>(anchored));
}

double cos_angle(std::span<const double> a, std::span<const double> b, std::span<const double> c) {
    double na = norm_of_diff(a, b), nc = norm_of_diff(c, b);
    if (na == 0.0 || nc == 0.0) throw DomainError("angle undefined for coincident points");
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += (a[i] - b[i]) / na * ((c[i] - b[i]) / nc);
    return dot;
}

std::optional<ad::Var> loss_angle(const ad::Var& f1, const ad::Var& f2, const ad::Var& f3, std::span<const double> g1,
                                  std::span<const double> g2, std::span<const double> g3) {
    if (norm_of_diff(f1.value().data(), f2.value().data()) == 0.0 ||
        norm_of_diff(f3.value().data(), f2.value().data()) == 0.0 || norm_of_diff(g1, g2) == 0.0 ||
        norm_of_diff(g3, g2) == 0.0)
        return std::nullopt;
    ad::Var cos_f = ad::sum(ad::mul(unit_side(f1, f2), unit_side(f3, f2)));
    return ad::abs(ad::shift(cos_f, -cos_angle(g1, g2, g3)));
}

double angle_pair_l1(std::span<const double> f1, std::span<const double> f2, std::span<const double> f3,
                     std::span<const double> g1, std::span<const double> g2, std::span<const double> g3) {
    return std::fabs(cos_angle(f1, f2, f3)) + std::fabs(cos_angle(g1, g2, g3));
}

ad::Var loss_edge(const ad::Var& f1, const ad::Var& f2, std::span<const double> g1, std::span<const double> g2,
                  EdgePenalty penalty) {
    ad::Var gap = ad::shift(ad::l2_norm(ad::sub(f1, f2)), -norm_of_diff(g1, g2));
    return penalty == EdgePenalty::square ? ad::square(gap) : ad::abs(gap);
}

ad::Var cross_entropy(const ad::Var& logits, std::span<const ClassId> labels) {
    std::size_t n = logits.value().rows(), c = logits.value().cols();
    if (labels.size() != n) throw DimensionError("cross_entropy: label count differs from logit rows");
    Tensor onehot = Tensor::zeros({n, c});
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= c) throw ContractError("cross_entropy: label outside the class range");
        onehot.at(i, labels[i]) = 1.0;
    }
    return ad::scale(ad::sum(ad::mul(ad::log_softmax_rows(logits), ad::constant(onehot))),
                     -1.0 / static_cast<double>(n));
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng) {
    if (batch == 0) throw ConfigError("batch size must be >= 1");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t s = 0; s < n; s += batch)
        out.emplace_back(order.begin() + s, order.begin() + std::min(n, s + batch));
    return out;
}

ClientStepLoss client_objective(const BoundModel& model, const Tensor& x, std::span<const ClassId> labels,
                                const GlobalPrototypeSet* globals, const ClientHyper& hp, Rng& align_rng) {
    ClientStepLoss out;
    ad::Var features = model.encode(ad::constant(x));
    ad::Var base = cross_entropy(model.classify(features), labels);
    out.total = base;
    out.parts.base = base.item();
    if (globals == nullptr || !hp.align || !(hp.kappa > 0.0) || globals->size() < 2) return out;

    std::vector<ad::Var> terms;
    if (auto node = loss_node_batch(features, labels, *globals, hp.tau_l)) {
        out.parts.node = node->item();
        terms.push_back(*node);
    }
    std::vector<std::size_t> pool;
    for (std::size_t r = 0; r < labels.size(); ++r)
        if (globals->count(labels[r])) pool.push_back(r);
    auto row = [&](std::size_t r) {
        std::size_t idx[] = {r};
        return ad::gather_rows(features, idx);
    };
    auto proto = [&](std::size_t r) -> std::span<const double> { return globals->at(labels[r]); };
    const std::size_t relations = std::min(labels.size(), hp.max_relations);

    std::vector<ad::Var> angles;
    for (const auto& t : sample_label_distinct<3>(pool, labels, relations, align_rng)) {
        if (auto term = loss_angle(row(t[0]), row(t[1]), row(t[2]), proto(t[0]), proto(t[1]), proto(t[2])))
            angles.push_back(*term);
        else
            ++out.parts.skipped_angles;
    }
    if (!angles.empty()) {
        ad::Var a = mean_of(angles);
        out.parts.angle = a.item();
        terms.push_back(a);
    }
    std::vector<ad::Var> edges;
    for (const auto& p : sample_label_distinct<2>(pool, labels, relations, align_rng))
        edges.push_back(loss_edge(row(p[0]), row(p[1]), proto(p[0]), proto(p[1]), hp.edge));
    if (!edges.empty()) {
        ad::Var e = mean_of(edges);
        out.parts.edge = e.item();
        terms.push_back(e);
    }
    if (!terms.empty()) out.total = ad::add(base, ad::scale(sum_of(terms), hp.kappa));
    return out;
}

ClientUpdate train_client(const ModelParams& params, const LabeledDataset& data, const GlobalPrototypeSet* globals,
                          const ClientHyper& hp, ClientId client, std::uint64_t seed) {
    if (data.size() == 0) throw ContractError("client " + std::to_string(client) + " has an empty dataset");
    data.validate();
    ClientUpdate update;
    update.params = params;
    update.sample_count = data.size();

    Rng shuffle = client_shuffle_rng(seed);
    Rng align_rng = client_align_rng(seed);
    for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
        LossTrace acc;
        auto batches = epoch_batches(data.size(), hp.batch_size, shuffle);
        for (const auto& batch : batches) {
            std::vector<ClassId> labels;
            labels.reserve(batch.size());
            for (auto i : batch) labels.push_back(data.labels[i]);
            BoundModel model(update.params);
            auto step = client_objective(model, gather_rows(data.features, batch), labels, globals, hp, align_rng);
            acc.base += step.parts.base;
            acc.node += step.parts.node;
            acc.angle += step.parts.angle;
            acc.edge += step.parts.edge;
            acc.skipped_angles += step.parts.skipped_angles;
            auto grads = ad::backward(step.total);
            update.params = sgd_step(update.params, collect_grads(model, grads), hp.lr, hp.weight_decay);
        }
        double nb = static_cast<double>(batches.size());
        acc.base /= nb;
        acc.node /= nb;
        acc.angle /= nb;
        acc.edge /= nb;
        update.trace.push_back(acc);
    }

    if (hp.emit_prototypes) {
        Tensor features = forward(update.params, data.features, Stage::encoder);
        update.prototypes =
            hp.prototype_mode == PrototypeMode::clustered
                ? make_prototypes(features, data.labels, hp.prototypes, client, client_prototype_seed(seed))
                : traditional_prototypes(features, data.labels, client);
    }
    return update;
}

}  // namespace fedcspc
