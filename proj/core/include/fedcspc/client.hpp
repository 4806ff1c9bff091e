#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fedcspc/autodiff.hpp"
#include "fedcspc/data.hpp"
#include "fedcspc/exchange.hpp"
#include "fedcspc/model.hpp"
#include "fedcspc/prototype.hpp"
#include "fedcspc/rng.hpp"

namespace fedcspc {

// One encoder-space vector per class, as broadcast by the server.
using GlobalPrototypeSet = ClassVectors;

enum class EdgePenalty { square, absolute };
enum class PrototypeMode { clustered, traditional };

struct ClientHyper {
    std::size_t epochs = 10;
    std::size_t batch_size = 64;
    double lr = 0.01;
    double weight_decay = 1e-5;
    double kappa = 0.1;   // weight of the alignment regularizer
    double tau_l = 0.5;   // temperature of the node-level contrast
    bool align = true;    // node/angle/edge regularizer on or off
    EdgePenalty edge = EdgePenalty::square;
    std::size_t max_relations = 16;  // triples and pairs sampled per batch, capped at the batch size
    PrototypeMode prototype_mode = PrototypeMode::clustered;
    PrototypeOptions prototypes;
    bool emit_prototypes = true;
};

struct LossTrace {
    double base = 0.0;
    double node = 0.0;
    double angle = 0.0;
    double edge = 0.0;
    std::size_t skipped_angles = 0;  // triples with coincident points
};

struct ClientUpdate {
    ModelParams params;
    std::vector<Prototype> prototypes;
    std::size_t sample_count = 0;
    std::vector<LossTrace> trace;  // one entry per local epoch
};

// -log softmax over temperature-scaled cosine similarities between feature `f`
// (1 x d) and every global prototype, read at the prototype of `label`. Returns
// nullopt when `label` has no prototype or no other class does.
std::optional<ad::Var> loss_node(const ad::Var& f, const GlobalPrototypeSet& globals, ClassId label, double tau_l);

// Mean node loss over the rows of `features` that have an anchor prototype.
std::optional<ad::Var> loss_node_batch(const ad::Var& features, std::span<const ClassId> labels,
                                       const GlobalPrototypeSet& globals, double tau_l);

// Cosine of the angle at vertex b of triangle (a, b, c).
double cos_angle(std::span<const double> a, std::span<const double> b, std::span<const double> c);

// |cos∠(f1,f2,f3) - cos∠(g1,g2,g3)|; nullopt when any triangle has a zero-length side at the vertex.
std::optional<ad::Var> loss_angle(const ad::Var& f1, const ad::Var& f2, const ad::Var& f3, std::span<const double> g1,
                                  std::span<const double> g2, std::span<const double> g3);

// |cos∠(f1,f2,f3)| + |cos∠(g1,g2,g3)|, the L1 norm of the pair taken literally.
// Reported for diagnostics only; it is not minimized.
double angle_pair_l1(std::span<const double> f1, std::span<const double> f2, std::span<const double> f3,
                     std::span<const double> g1, std::span<const double> g2, std::span<const double> g3);

// (||f1 - f2|| - ||g1 - g2||)^2, or its absolute value.
ad::Var loss_edge(const ad::Var& f1, const ad::Var& f2, std::span<const double> g1, std::span<const double> g2,
                  EdgePenalty penalty = EdgePenalty::square);

// Mean cross-entropy of `logits` (n x C) against `labels`.
ad::Var cross_entropy(const ad::Var& logits, std::span<const ClassId> labels);

// Mini-batch order for one epoch: a shuffled permutation cut into chunks of `batch`.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng);

struct ClientStepLoss {
    ad::Var total;
    LossTrace parts;
};

// L_base + kappa * (L_node + L_angle + L_edge) on one mini-batch. The alignment
// terms are dropped when `globals` is null, alignment is off or kappa is 0;
// triples and pairs are drawn from `align_rng`.
ClientStepLoss client_objective(const BoundModel& model, const Tensor& x, std::span<const ClassId> labels,
                                const GlobalPrototypeSet* globals, const ClientHyper& hp, Rng& align_rng);

// Local training on base cross-entropy plus kappa * (node + angle + edge) when
// `globals` is given, alignment is on and kappa > 0. `seed` fixes every random
// choice the client makes through the generators below.
ClientUpdate train_client(const ModelParams& params, const LabeledDataset& data, const GlobalPrototypeSet* globals,
                          const ClientHyper& hp, ClientId client, std::uint64_t seed);

// Independent generators a client derives from its seed.
inline Rng client_shuffle_rng(std::uint64_t seed) { return Rng(derive_seed({seed, 1})); }
inline Rng client_align_rng(std::uint64_t seed) { return Rng(derive_seed({seed, 2})); }
inline std::uint64_t client_prototype_seed(std::uint64_t seed) { return derive_seed({seed, 3}); }

}  // namespace fedcspc
