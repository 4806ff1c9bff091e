#include "fedcspc/server.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "fedcspc/error.hpp"
#include "fedcspc/rng.hpp"

namespace fedcspc {

namespace {

constexpr Partition kCalibrated[] = {Partition::head, Partition::classifier};

// Stand-in for log(0) that keeps masked logits finite.
constexpr double kMaskedLogit = -1e30;

Tensor stack_entries(const CalibrationBatch& batch, std::span<const std::size_t> idx) {
    std::vector<std::vector<double>> rows;
    rows.reserve(idx.size());
    for (auto i : idx) rows.push_back(batch.entries[i].vector);
    return stack_rows(rows);
}

Tensor stack_vectors(std::span<const Prototype> protos) {
    std::vector<std::vector<double>> rows;
    rows.reserve(protos.size());
    for (const auto& p : protos) rows.push_back(p.vector);
    return stack_rows(rows);
}

ClassVectors grouped_mean(const Tensor& rows, std::span<const Prototype> protos) {
    std::map<ClassId, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < protos.size(); ++i) by_class[protos[i].class_id].push_back(i);
    ClassVectors out;
    for (const auto& [cls, idx] : by_class) out.emplace(cls, mean_of_rows(rows, idx));
    return out;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

void normalize_scores(std::span<double> row, FusionNorm norm) {
    double mx = -std::numeric_limits<double>::infinity(), mn = std::numeric_limits<double>::infinity();
    for (double v : row) {
        if (!std::isfinite(v)) continue;
        mx = std::max(mx, v);
        mn = std::min(mn, v);
    }
    double total = 0.0;
    for (double& v : row) {
        if (!std::isfinite(v)) {
            v = 0.0;
            continue;
        }
        v = norm == FusionNorm::softmax ? std::exp(v - mx) : (mx > mn ? (v - mn) / (mx - mn) : 1.0);
        total += v;
    }
    if (total <= 0.0) return;  // nothing finite to normalize
    for (double& v : row) v /= total;
}

}  // namespace

std::vector<std::size_t> CalibrationBatch::real_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i)
        if (entries[i].kind == EntryKind::real) out.push_back(i);
    return out;
}

std::vector<std::size_t> CalibrationBatch::derived_from(std::size_t anchor) const {
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].anchor != anchor) continue;
        if (entries[i].kind == EntryKind::aug_positive) pos.push_back(i);
        if (entries[i].kind == EntryKind::aug_negative) neg.push_back(i);
    }
    pos.insert(pos.end(), neg.begin(), neg.end());
    return pos;
}

CalibrationBatch real_batch(std::span<const Prototype> pool) {
    CalibrationBatch batch;
    for (std::size_t i = 0; i < pool.size(); ++i)
        batch.entries.push_back({pool[i].vector, pool[i].class_id, pool[i].client_id, EntryKind::real, i});
    return batch;
}

CalibrationBatch augment(std::span<const Prototype> pool, double lambda_u, std::size_t n_aug, std::uint64_t seed) {
    if (!(lambda_u > 0.0)) throw ContractError("augmentation coefficient lambda_u must be > 0");
    if (pool.empty()) throw ContractError("cannot augment an empty prototype pool");
    CalibrationBatch batch = real_batch(pool);
    std::map<ClassId, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < pool.size(); ++i) by_class[pool[i].class_id].push_back(i);

    Rng rng(seed);
    const std::size_t dim = pool.front().vector.size();
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const auto& ui = pool[i].vector;
        std::vector<std::size_t> same, other;
        for (auto j : by_class[pool[i].class_id])
            if (j != i) same.push_back(j);
        for (std::size_t k = 0; k < pool.size(); ++k)
            if (pool[k].class_id != pool[i].class_id) other.push_back(k);

        if (same.empty()) ++batch.stats.anchors_without_partner;
        else {
            std::uniform_int_distribution<std::size_t> pick(0, same.size() - 1);
            for (std::size_t t = 0; t < n_aug; ++t) {
                const auto& uj = pool[same[pick(rng)]].vector;
                std::vector<double> v(dim);
                for (std::size_t d = 0; d < dim; ++d) v[d] = (uj[d] - ui[d]) * lambda_u + uj[d];
                batch.entries.push_back({std::move(v), pool[i].class_id, pool[i].client_id, EntryKind::aug_positive, i});
            }
        }
        if (other.empty()) ++batch.stats.anchors_without_negative;
        else {
            std::uniform_int_distribution<std::size_t> pick(0, other.size() - 1);
            for (std::size_t t = 0; t < n_aug; ++t) {
                const auto& pk = pool[other[pick(rng)]];
                std::vector<double> v(dim);
                for (std::size_t d = 0; d < dim; ++d) v[d] = (pk.vector[d] - ui[d]) * lambda_u + ui[d];
                batch.entries.push_back({std::move(v), pk.class_id, pool[i].client_id, EntryKind::aug_negative, i});
            }
        }
    }
    return batch;
}

double contrast_weight(const CalibrationEntry& i, const CalibrationEntry& j) {
    bool same_class = i.class_id == j.class_id, same_client = i.client_id == j.client_id;
    return (same_class && !same_client) || (!same_class && same_client) ? 1.0 : 0.5;
}

ad::Var loss_acl_embedded(const ad::Var& z_anchor, const ad::Var& z_positive, const ad::Var& z_negative, double alpha,
                          bool clamp) {
    if (!(alpha >= 0.0)) throw ContractError("triplet margin alpha must be >= 0");
    ad::Var pos = ad::sum(ad::square(ad::sub(z_anchor, z_positive)));
    ad::Var neg = ad::sum(ad::square(ad::sub(z_anchor, z_negative)));
    ad::Var raw = ad::shift(ad::sub(pos, neg), alpha);
    return clamp ? ad::relu(raw) : raw;
}

ad::Var loss_acl(const BoundModel& model, std::span<const double> anchor, std::span<const double> positive,
                 std::span<const double> negative, double alpha, bool clamp) {
    std::vector<std::vector<double>> rows{{anchor.begin(), anchor.end()},
                                          {positive.begin(), positive.end()},
                                          {negative.begin(), negative.end()}};
    ad::Var z = model.project(ad::constant(stack_rows(rows)));
    std::size_t a[] = {0}, p[] = {1}, n[] = {2};
    return loss_acl_embedded(ad::gather_rows(z, a), ad::gather_rows(z, p), ad::gather_rows(z, n), alpha, clamp);
}

std::optional<ad::Var> loss_wcl_subset(std::span<const std::size_t> anchors, std::span<const std::size_t> members,
                                       const CalibrationBatch& batch, const BoundModel& model, double tau_g,
                                       std::size_t* skipped) {
    if (!(tau_g > 0.0)) throw ContractError("contrast temperature tau_g must be > 0");
    const std::size_t m = members.size();
    std::vector<std::size_t> anchor_rows;
    std::size_t n_skipped = 0;
    std::vector<std::vector<double>> off_rows, pos_rows;
    for (auto a : anchors) {
        auto self = std::find(members.begin(), members.end(), a);
        if (self == members.end()) throw ContractError("loss_wcl: anchor is not part of the sample set");
        const auto& ea = batch.entries[a];
        std::vector<double> off(m), pos(m, 0.0);
        std::size_t n_pos = 0;
        for (std::size_t c = 0; c < m; ++c) {
            std::size_t j = members[c];
            if (j == a) {
                off[c] = kMaskedLogit;
                continue;
            }
            const auto& ej = batch.entries[j];
            off[c] = std::log(contrast_weight(ea, ej));
            if (ej.class_id == ea.class_id && ej.kind != EntryKind::aug_negative) {
                pos[c] = 1.0;
                ++n_pos;
            }
        }
        if (n_pos == 0) {
            ++n_skipped;
            continue;
        }
        for (auto& v : pos) v /= static_cast<double>(n_pos);
        anchor_rows.push_back(static_cast<std::size_t>(self - members.begin()));
        off_rows.push_back(std::move(off));
        pos_rows.push_back(std::move(pos));
    }
    if (skipped) *skipped += n_skipped;
    if (anchor_rows.empty()) return std::nullopt;

    ad::Var z = ad::normalize_rows(model.project(ad::constant(stack_entries(batch, members))));
    ad::Var za = ad::gather_rows(z, anchor_rows);
    ad::Var logits = ad::add(ad::scale(ad::matmul(za, ad::transpose(z)), 1.0 / tau_g), ad::constant(stack_rows(off_rows)));
    ad::Var lsm = ad::log_softmax_rows(logits);
    return ad::scale(ad::sum(ad::mul(lsm, ad::constant(stack_rows(pos_rows)))),
                     -1.0 / static_cast<double>(anchor_rows.size()));
}

std::optional<ad::Var> loss_wcl(std::size_t anchor, const CalibrationBatch& batch, const BoundModel& model,
                                double tau_g) {
    if (anchor >= batch.entries.size()) throw ContractError("loss_wcl: anchor index out of range");
    std::vector<std::size_t> all(batch.entries.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::size_t a[] = {anchor};
    return loss_wcl_subset(a, all, batch, model, tau_g);
}

ad::Var loss_sup(const BoundModel& model, std::span<const double> vector, ClassId label) {
    ClassId labels[] = {label};
    return cross_entropy(model.classify(ad::constant(Tensor::row({vector.begin(), vector.end()}))), labels);
}

GlobalPrototypeSet global_prototypes(std::span<const Prototype> prototypes) {
    if (prototypes.empty()) throw ContractError("global prototypes need at least one prototype");
    return grouped_mean(stack_vectors(prototypes), prototypes);
}

KnowledgeBase build_knowledge_base(const ModelParams& model, std::span<const Prototype> prototypes) {
    if (prototypes.empty()) return {};
    return {grouped_mean(project_features(model, stack_vectors(prototypes)), prototypes)};
}

std::optional<double> cross_client_similarity(const ModelParams& model, std::span<const Prototype> prototypes) {
    if (prototypes.size() < 2) return std::nullopt;
    Tensor z = project_features(model, stack_vectors(prototypes));
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < prototypes.size(); ++i)
        for (std::size_t j = i + 1; j < prototypes.size(); ++j) {
            if (prototypes[i].class_id != prototypes[j].class_id || prototypes[i].client_id == prototypes[j].client_id)
                continue;
            total += cosine(z.row_span(i), z.row_span(j));
            ++pairs;
        }
    if (pairs == 0) return std::nullopt;
    return total / static_cast<double>(pairs);
}

ServerStepLoss server_objective(const BoundModel& model, const CalibrationBatch& batch,
                                std::span<const std::size_t> anchors, const ServerHyper& hp) {
    if (anchors.empty()) throw ContractError("server objective needs at least one anchor");
    std::map<std::size_t, std::vector<std::size_t>> derived;
    for (auto a : anchors) {
        if (a >= batch.entries.size() || batch.entries[a].kind != EntryKind::real)
            throw ContractError("server objective anchors must be real entries");
        derived[a];
    }
    for (std::size_t i = 0; i < batch.entries.size(); ++i) {
        const auto& e = batch.entries[i];
        if (e.kind == EntryKind::real) continue;
        auto it = derived.find(e.anchor);
        if (it != derived.end()) it->second.push_back(i);
    }

    std::vector<std::size_t> members(anchors.begin(), anchors.end()), supervised(anchors.begin(), anchors.end());
    for (auto a : anchors)
        for (auto d : derived[a]) {
            members.push_back(d);
            if (batch.entries[d].kind == EntryKind::aug_positive) supervised.push_back(d);
        }

    ServerStepLoss out;
    std::vector<ClassId> sup_labels;
    for (auto i : supervised) sup_labels.push_back(batch.entries[i].class_id);
    ad::Var sup = cross_entropy(model.classify(ad::constant(stack_entries(batch, supervised))), sup_labels);
    out.total = sup;
    out.parts.sup = sup.item();
    if (!(hp.eta > 0.0)) return out;

    std::vector<ad::Var> extra;
    if (auto wcl = loss_wcl_subset(anchors, members, batch, model, hp.tau_g, &out.parts.skipped_wcl)) {
        out.parts.wcl = wcl->item();
        extra.push_back(*wcl);
    }
    ad::Var z = model.project(ad::constant(stack_entries(batch, members)));
    std::map<std::size_t, std::size_t> row_of;
    for (std::size_t r = 0; r < members.size(); ++r) row_of[members[r]] = r;
    std::vector<ad::Var> triplets;
    for (auto a : anchors) {
        std::vector<std::size_t> pos, neg;
        for (auto d : derived[a]) (batch.entries[d].kind == EntryKind::aug_positive ? pos : neg).push_back(row_of[d]);
        for (std::size_t t = 0; t < std::min(pos.size(), neg.size()); ++t) {
            std::size_t ra[] = {row_of[a]}, rp[] = {pos[t]}, rn[] = {neg[t]};
            triplets.push_back(loss_acl_embedded(ad::gather_rows(z, ra), ad::gather_rows(z, rp),
                                                 ad::gather_rows(z, rn), hp.alpha, hp.acl_clamp));
        }
    }
    if (!triplets.empty()) {
        ad::Var acl = triplets.front();
        for (std::size_t i = 1; i < triplets.size(); ++i) acl = ad::add(acl, triplets[i]);
        acl = ad::scale(acl, 1.0 / static_cast<double>(triplets.size()));
        out.parts.acl = acl.item();
        extra.push_back(acl);
    }
    if (!extra.empty()) {
        ad::Var e = extra.size() == 1 ? extra[0] : ad::add(extra[0], extra[1]);
        out.total = ad::add(sup, ad::scale(e, hp.eta));
    }
    return out;
}

ServerRoundOutput calibrate(const ModelParams& aggregated, std::span<const Prototype> prototypes, const ServerHyper& hp,
                            std::uint64_t seed) {
    if (prototypes.empty()) throw ConfigError("calibration needs a non-empty prototype pool");
    ServerRoundOutput out;
    out.model = aggregated;
    out.cross_client_similarity_before = cross_client_similarity(aggregated, prototypes);

    if (hp.calibrate && hp.epochs > 0) {
        CalibrationBatch batch = hp.augment ? augment(prototypes, hp.lambda_u, hp.n_aug, derive_seed({seed, 1}))
                                            : real_batch(prototypes);
        out.augment_stats = batch.stats;
        auto anchors = batch.real_indices();

        Rng shuffle(derive_seed({seed, 2}));
        for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
            ServerLossTrace acc;
            auto steps = epoch_batches(anchors.size(), std::max<std::size_t>(hp.batch_size, 1), shuffle);
            for (const auto& step : steps) {
                std::vector<std::size_t> step_anchors;
                for (auto s : step) step_anchors.push_back(anchors[s]);
                BoundModel model(out.model, kCalibrated);
                auto objective = server_objective(model, batch, step_anchors, hp);
                acc.sup += objective.parts.sup;
                acc.wcl += objective.parts.wcl;
                acc.acl += objective.parts.acl;
                acc.skipped_wcl += objective.parts.skipped_wcl;
                ad::Var total = objective.total;

                auto grads = ad::backward(total);
                out.model = sgd_step(out.model, collect_grads(model, grads), hp.lr, hp.weight_decay, kCalibrated);
            }
            double n = static_cast<double>(steps.size());
            acc.sup /= n;
            acc.wcl /= n;
            acc.acl /= n;
            out.trace.push_back(acc);
        }
    }

    out.knowledge = build_knowledge_base(out.model, prototypes);
    out.globals = global_prototypes(prototypes);
    out.cross_client_similarity_after = cross_client_similarity(out.model, prototypes);
    return out;
}

FusedPrediction predict_fused(const ModelParams& model, const KnowledgeBase& kb, const Tensor& x, double lambda_p,
                              FusionNorm norm) {
    if (!(lambda_p >= 0.0 && lambda_p <= 1.0)) throw ContractError("fusion weight lambda_p must lie in [0, 1]");
    if (lambda_p > 0.0 && kb.empty()) throw ContractError("knowledge-based prediction needs a non-empty knowledge base");
    Tensor features = forward(model, x, Stage::encoder);
    FusedPrediction out;
    out.network = classify_features(model, features);
    const std::size_t n = out.network.rows(), classes = out.network.cols();
    for (std::size_t i = 0; i < n; ++i) normalize_scores(out.network.data().subspan(i * classes, classes), norm);

    if (!kb.empty()) {
        Tensor z = project_features(model, features);
        out.knowledge = Tensor::filled({n, classes}, -std::numeric_limits<double>::infinity());
        for (std::size_t i = 0; i < n; ++i) {
            for (const auto& [cls, e] : kb.exemplars)
                if (cls < classes) out.knowledge.at(i, cls) = cosine(z.row_span(i), e);
            normalize_scores(out.knowledge.data().subspan(i * classes, classes), norm);
        }
    }
    out.fused = out.network;
    if (!kb.empty()) {
        for (std::size_t i = 0; i < out.fused.size(); ++i)
            out.fused[i] = (1.0 - lambda_p) * out.network[i] + lambda_p * out.knowledge[i];
    }
    return out;
}

std::size_t argmax(std::span<const double> scores) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i)
        if (scores[i] > scores[best]) best = i;
    return best;
}

double accuracy_of_scores(const Tensor& scores, std::span<const ClassId> labels) {
    if (labels.empty()) throw ContractError("accuracy of an empty dataset");
    if (scores.rows() != labels.size()) throw DimensionError("accuracy: score rows differ from label count");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += argmax(scores.row_span(i)) == labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double accuracy(const ModelParams& model, const KnowledgeBase& kb, const LabeledDataset& data, double lambda_p,
                FusionNorm norm) {
    if (data.size() == 0) throw ContractError("accuracy of an empty dataset");
    return accuracy_of_scores(predict_fused(model, kb, data.features, lambda_p, norm).fused, data.labels);
}

}  // namespace fedcspc
