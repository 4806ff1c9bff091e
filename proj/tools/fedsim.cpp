#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "fedcspc/config.hpp"
#include "fedcspc/error.hpp"
#include "fedcspc/gradcheck.hpp"
#include "fedcspc/simulation.hpp"

namespace {

using namespace fedcspc;

void print_round(const RoundMetrics& m) {
    std::cerr << "seed " << m.seed << " round " << m.round << "  acc_net=" << m.acc_net << " acc_kb=" << m.acc_kb
              << " acc_fused=" << m.acc_fused << "  loss_base=" << m.loss.base;
    if (m.similarity_before && m.similarity_after)
        std::cerr << "  sim " << *m.similarity_before << " -> " << *m.similarity_after;
    std::cerr << '\n';
}

int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& out_dir,
            bool quiet) {
    ExperimentConfig config = load_config(config_path);
    if (seed) config.seeds = {*seed};
    RoundObserver observer;
    if (!quiet) observer = print_round;
    ExperimentSummary s = run_experiment(config, out_dir, observer);
    std::cout << "method " << method_name(s.method) << " over " << s.seeds.size() << " seed(s)\n";
    auto line = [](const char* name, const Statistic& st) {
        std::cout << "  final " << name << " = " << st.mean << " +- " << st.std << '\n';
    };
    line("acc_net", s.acc_net);
    line("acc_kb", s.acc_kb);
    line("acc_fused", s.acc_fused);
    std::cout << "artifacts written to " << out_dir << '\n';
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir, bool quiet) {
    ExperimentConfig config = load_config(config_path);
    if (!out_dir.empty()) ensure_writable_dir(out_dir);
    RoundObserver observer;
    if (!quiet) observer = print_round;
    auto rows = run_ablation(config, observer);
    write_ablation_table(std::cout, rows);
    if (!out_dir.empty()) {
        std::ofstream out(std::filesystem::path(out_dir) / "ablation.csv");
        write_ablation_csv(out, rows);
        if (!out) throw IoError("failed to write ablation.csv");
    }
    return 0;
}

int cmd_partition(const std::string& config_path, std::optional<std::uint64_t> seed, bool inspect) {
    ExperimentConfig config = load_config(config_path);
    const std::uint64_t s = seed.value_or(config.seeds.front());
    FederatedData data = prepare_data(config, s);
    if (!inspect) {
        write_partition(std::cout, data.plan);
        return 0;
    }
    auto hist = partition_histograms(data.train, data.plan);
    std::cout << "beta=" << data.plan.beta << " seed=" << s << " samples=" << data.plan.total() << '\n';
    std::cout << "client   size";
    for (std::size_t c = 0; c < data.train.class_count; ++c) std::cout << "  c" << c;
    std::cout << '\n';
    for (std::size_t k = 0; k < hist.size(); ++k) {
        std::size_t total = 0;
        for (auto v : hist[k]) total += v;
        std::cout << k << "\t " << total;
        for (auto v : hist[k]) std::cout << "  " << v;
        std::cout << '\n';
    }
    return 0;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t instances) {
    auto start = std::chrono::steady_clock::now();
    auto results = run_gradcheck(seed, instances);
    write_gradcheck_report(std::cout, results);
    bool ok = true;
    for (const auto& r : results) ok = ok && r.passed();
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << (ok ? "all gradients match" : "gradient mismatch") << " (" << secs << " s)\n";
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated learning simulator with cross-silo prototypical calibration"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "fedsim-out";
    std::optional<std::uint64_t> seed;
    bool quiet = false, inspect = false;
    std::uint64_t check_seed = 7;
    std::size_t instances = 20;

    auto* run = app.add_subcommand("run", "Run an experiment for every configured seed");
    run->add_option("--config", config_path, "Config file (key = value lines)")->required()->check(CLI::ExistingFile);
    run->add_option("--seed", seed, "Run only this seed");
    run->add_option("--out", out_dir, "Output directory")->capture_default_str();
    run->add_flag("-q,--quiet", quiet, "No per-round progress on stderr");

    auto* ablate = app.add_subcommand("ablate", "Run the nine component combinations and print a comparison table");
    ablate->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
    ablate->add_option("--out", out_dir, "Directory for ablation.csv")->capture_default_str();
    ablate->add_flag("-q,--quiet", quiet, "No per-round progress on stderr");

    auto* partition = app.add_subcommand("partition", "Show how the training set is split across clients");
    partition->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
    partition->add_option("--seed", seed, "Seed (defaults to the first configured seed)");
    partition->add_flag("--inspect", inspect, "Print per-client class histograms instead of index lists");

    auto* gradcheck = app.add_subcommand("gradcheck", "Compare every loss gradient with central differences");
    gradcheck->add_option("--seed", check_seed, "Seed for the random instances")->capture_default_str();
    gradcheck->add_option("--instances", instances, "Random instances per loss")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) return cmd_run(config_path, seed, out_dir, quiet);
        if (*ablate) return cmd_ablate(config_path, out_dir, quiet);
        if (*partition) return cmd_partition(config_path, seed, inspect);
        if (*gradcheck) return cmd_gradcheck(check_seed, instances);
    } catch (const fedcspc::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
