#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fedcspc/autodiff.hpp"
#include "fedcspc/client.hpp"
#include "fedcspc/data.hpp"
#include "fedcspc/exchange.hpp"
#include "fedcspc/model.hpp"
#include "fedcspc/prototype.hpp"

namespace fedcspc {

enum class EntryKind { real, aug_positive, aug_negative };

struct CalibrationEntry {
    std::vector<double> vector;
    ClassId class_id = 0;
    ClientId client_id = 0;  // augmented entries carry their anchor's client
    EntryKind kind = EntryKind::real;
    std::size_t anchor = 0;  // index of the real entry this one was made from (itself for real entries)
};

struct AugmentStats {
    std::size_t anchors_without_partner = 0;   // no other same-class prototype: negatives only
    std::size_t anchors_without_negative = 0;  // pool holds a single class
};

// Real prototypes followed by the augmented entries generated from them.
struct CalibrationBatch {
    std::vector<CalibrationEntry> entries;
    AugmentStats stats;

    std::vector<std::size_t> real_indices() const;
    // Augmented entries derived from real entry `anchor`, positives then negatives.
    std::vector<std::size_t> derived_from(std::size_t anchor) const;
};

CalibrationBatch real_batch(std::span<const Prototype> pool);

// For every anchor u_i, n_aug positives (u_j - u_i) * lambda_u + u_j from random
// same-class partners u_j and n_aug negatives (u_k - u_i) * lambda_u + u_i from
// random other-class prototypes u_k. Negatives are labelled with u_k's class.
CalibrationBatch augment(std::span<const Prototype> pool, double lambda_u, std::size_t n_aug, std::uint64_t seed);

// Weight of entry j in the contrast of entry i: 1 for same class across clients
// or different classes within a client, 0.5 otherwise.
double contrast_weight(const CalibrationEntry& i, const CalibrationEntry& j);

// Margin triplet on head outputs: ||z - z+||^2 - ||z - z-||^2 + alpha, clamped at
// zero unless `clamp` is false.
ad::Var loss_acl_embedded(const ad::Var& z_anchor, const ad::Var& z_positive, const ad::Var& z_negative, double alpha,
                          bool clamp = true);
ad::Var loss_acl(const BoundModel& model, std::span<const double> anchor, std::span<const double> positive,
                 std::span<const double> negative, double alpha, bool clamp = true);

// Weighted supervised contrast of one anchor against every other entry of the
// batch, on L2-normalized head outputs. nullopt when the anchor has no positive.
std::optional<ad::Var> loss_wcl(std::size_t anchor, const CalibrationBatch& batch, const BoundModel& model,
                                double tau_g);

// Mean contrast over `anchors`, using only `members` (which must contain the
// anchors) as the sample set. `skipped` counts anchors without positives.
std::optional<ad::Var> loss_wcl_subset(std::span<const std::size_t> anchors, std::span<const std::size_t> members,
                                       const CalibrationBatch& batch, const BoundModel& model, double tau_g,
                                       std::size_t* skipped = nullptr);

// Cross-entropy of the classifier applied to a feature-space prototype.
ad::Var loss_sup(const BoundModel& model, std::span<const double> vector, ClassId label);

struct ServerHyper {
    double eta = 0.1;      // weight of the contrastive terms
    double alpha = 1.0;    // triplet margin
    double tau_g = 0.5;
    double lambda_u = 0.3;
    std::size_t n_aug = 5;
    std::size_t epochs = 20;
    double lr = 0.01;
    double weight_decay = 1e-5;
    std::size_t batch_size = 64;  // real anchors per step
    bool augment = true;          // prototype augmentation
    bool calibrate = true;        // retrain head and classifier
    bool acl_clamp = true;
};

struct ServerLossTrace {
    double sup = 0.0;
    double wcl = 0.0;
    double acl = 0.0;
    std::size_t skipped_wcl = 0;
};

struct ServerStepLoss {
    ad::Var total;
    ServerLossTrace parts;
};

// One calibration step: cross-entropy over the real anchors and their augmented
// positives, plus eta * (contrast over the anchors + mean triplet margin), where
// the sample set is the anchors together with every entry derived from them.
ServerStepLoss server_objective(const BoundModel& model, const CalibrationBatch& batch,
                                std::span<const std::size_t> anchors, const ServerHyper& hp);

struct KnowledgeBase {
    ClassVectors exemplars;  // class -> head-space exemplar
    bool empty() const noexcept { return exemplars.empty(); }
};

struct ServerRoundOutput {
    ModelParams model;
    GlobalPrototypeSet globals;
    KnowledgeBase knowledge;
    std::vector<ServerLossTrace> trace;
    AugmentStats augment_stats;
    // Mean head-space cosine similarity of same-class prototypes from different clients.
    std::optional<double> cross_client_similarity_before;
    std::optional<double> cross_client_similarity_after;
};

// Retrains head and classifier of the aggregated model on the prototype pool,
// leaving the encoder untouched, then builds exemplars and global prototypes.
ServerRoundOutput calibrate(const ModelParams& aggregated, std::span<const Prototype> prototypes, const ServerHyper& hp,
                            std::uint64_t seed);

// Per class, the flat mean over every client, cluster and repeat.
GlobalPrototypeSet global_prototypes(std::span<const Prototype> prototypes);
// Per class, the mean head output of the class's prototypes.
KnowledgeBase build_knowledge_base(const ModelParams& model, std::span<const Prototype> prototypes);

std::optional<double> cross_client_similarity(const ModelParams& model, std::span<const Prototype> prototypes);

enum class FusionNorm { softmax, minmax };

struct FusedPrediction {
    Tensor network;    // Norm(Pred_net), n x C
    Tensor knowledge;  // Norm(Pred_k), n x C; default-constructed when the knowledge base is empty
    Tensor fused;      // (1 - lambda_p) * network + lambda_p * knowledge
};

// Pred_net from the classifier logits, Pred_k from cosine similarity between
// the head embedding and each exemplar. Classes without an exemplar get zero
// knowledge probability.
FusedPrediction predict_fused(const ModelParams& model, const KnowledgeBase& kb, const Tensor& x, double lambda_p,
                              FusionNorm norm = FusionNorm::softmax);

std::size_t argmax(std::span<const double> scores);

// Top-1 accuracy of the fused prediction.
double accuracy(const ModelParams& model, const KnowledgeBase& kb, const LabeledDataset& data, double lambda_p,
                FusionNorm norm = FusionNorm::softmax);
double accuracy_of_scores(const Tensor& scores, std::span<const ClassId> labels);

}  // namespace fedcspc
