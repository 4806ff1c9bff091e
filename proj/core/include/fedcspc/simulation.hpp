#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fedcspc/client.hpp"
#include "fedcspc/config.hpp"
#include "fedcspc/data.hpp"
#include "fedcspc/model.hpp"
#include "fedcspc/server.hpp"

namespace fedcspc {

// Train/test data and the per-client split for one seed.
struct FederatedData {
    LabeledDataset train;
    LabeledDataset test;
    PartitionPlan plan;
    std::vector<LabeledDataset> clients;  // indexed by client id
};

FederatedData prepare_data(const ExperimentConfig& config, std::uint64_t seed);

// What the server holds between rounds.
struct SimState {
    ModelParams model;
    GlobalPrototypeSet globals;
    KnowledgeBase knowledge;
    std::vector<Prototype> pool;  // prototypes uploaded in the last round
    std::size_t round = 0;        // rounds completed
};

SimState init_state(const ExperimentConfig& config, const FederatedData& data, std::uint64_t seed);

struct RoundMetrics {
    std::size_t round = 0;  // 1-based
    std::uint64_t seed = 0;
    Method method = Method::fedcspc;
    std::vector<ClientId> participants;
    std::vector<LossTrace> client_losses;  // last local epoch, one per participant
    double acc_net = 0.0;
    double acc_kb = 0.0;  // 0 when no knowledge base exists
    double acc_fused = 0.0;
    LossTrace loss;          // mean of client_losses
    ServerLossTrace server;  // last calibration epoch; zero when calibration did not run
    bool calibrated = false;
    std::optional<double> similarity_before;
    std::optional<double> similarity_after;
    double wall_ms = 0.0;
};

// ceil(C * N) distinct clients drawn uniformly for `round`, in ascending order.
std::vector<ClientId> sample_participants(const ExperimentConfig& config, std::uint64_t seed, std::size_t round);

// Worker count for client training: FEDSIM_THREADS when set and positive,
// otherwise the hardware concurrency. Results never depend on it.
std::size_t worker_count();

// One round of local training, aggregation, optional calibration and evaluation.
RoundMetrics run_round(SimState& state, const FederatedData& data, const ExperimentConfig& config,
                       std::uint64_t seed);

struct SeedRun {
    std::uint64_t seed = 0;
    std::vector<RoundMetrics> rounds;
    SimState final_state;
};

using RoundObserver = std::function<void(const RoundMetrics&)>;

SeedRun run_seed(const ExperimentConfig& config, std::uint64_t seed, const RoundObserver& observer = {});

struct Statistic {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation, 0 for a single value
};

Statistic summarize(const std::vector<double>& values);

struct ExperimentSummary {
    Method method = Method::fedcspc;
    std::vector<std::uint64_t> seeds;
    std::vector<double> final_acc_net;
    std::vector<double> final_acc_kb;
    std::vector<double> final_acc_fused;
    Statistic acc_net;
    Statistic acc_kb;
    Statistic acc_fused;
};

ExperimentSummary summarize_runs(Method method, const std::vector<SeedRun>& runs);

void write_metrics_csv(std::ostream& out, const std::vector<RoundMetrics>& rounds);
void write_summary_csv(std::ostream& out, const ExperimentSummary& summary);

// Runs every seed and writes into `out_dir`:
//   config.txt, metrics_seed<S>.csv, calibration_seed<S>.csv, checkpoint_seed<S>.txt,
//   prototypes_seed<S>.csv, globals_seed<S>.csv, knowledge_seed<S>.csv, summary.csv.
// An output directory that cannot be written raises IoError before any training.
ExperimentSummary run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                                 const RoundObserver& observer = {});

// Throws IoError unless files can be created inside `dir` (created if missing).
void ensure_writable_dir(const std::filesystem::path& dir);

struct AblationVariant {
    std::string name;
    ExperimentConfig config;
};

// The nine component combinations, from plain FedAvg up to the full method.
std::vector<AblationVariant> ablation_variants(const ExperimentConfig& base);

struct AblationRow {
    std::string name;
    ExperimentSummary summary;
};

std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const RoundObserver& observer = {});
// Fixed-width text table, one line per variant.
void write_ablation_table(std::ostream& out, const std::vector<AblationRow>& rows);
void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);

}  // namespace fedcspc
