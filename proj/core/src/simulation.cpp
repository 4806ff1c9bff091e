#include "fedcspc/simulation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "fedcspc/error.hpp"
#include "fedcspc/exchange.hpp"
#include "fedcspc/rng.hpp"
#include "text_util.hpp"

namespace fedcspc {

namespace {

using detail::format_double;

// Rethrows the active exception with `context` prepended, keeping its type.
[[noreturn]] void rethrow_with_context(const std::string& context) {
    try {
        throw;
    } catch (const ParseError& e) {
        throw ParseError(context + e.what(), e.line());
    } catch (const DimensionError& e) {
        throw DimensionError(context + e.what());
    } catch (const DomainError& e) {
        throw DomainError(context + e.what());
    } catch (const ContractError& e) {
        throw ContractError(context + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(context + e.what());
    } catch (const IoError& e) {
        throw IoError(context + e.what());
    } catch (const std::exception& e) {
        throw Error(context + e.what());
    }
}

std::vector<ClientUpdate> train_participants(const SimState& state, const FederatedData& data,
                                             const ExperimentConfig& config, std::uint64_t seed,
                                             std::span<const ClientId> participants) {
    const ClientHyper hp = config.client_hyper();
    const GlobalPrototypeSet* globals = hp.align && state.globals.size() >= 2 ? &state.globals : nullptr;
    const std::size_t round = state.round + 1;

    std::vector<ClientUpdate> updates(participants.size());
    std::vector<std::exception_ptr> errors(participants.size());
    auto work = [&](std::size_t slot) {
        ClientId c = participants[slot];
        try {
            updates[slot] = train_client(state.model, data.clients.at(c), globals, hp, c,
                                         stream_seed(seed, Stream::client, round, c));
        } catch (...) {
            errors[slot] = std::current_exception();
        }
    };

    const std::size_t workers = std::min(worker_count(), participants.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < participants.size(); ++i) work(i);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                for (std::size_t i = w; i < participants.size(); i += workers) work(i);
            });
        for (auto& t : pool) t.join();
    }
    for (std::size_t i = 0; i < participants.size(); ++i) {
        if (!errors[i]) continue;
        try {
            std::rethrow_exception(errors[i]);
        } catch (...) {
            rethrow_with_context("round " + std::to_string(round) + ", client " + std::to_string(participants[i]) +
                                 ": ");
        }
    }
    return updates;
}

void evaluate(RoundMetrics& m, const SimState& state, const FederatedData& data, const ExperimentConfig& config) {
    const bool have_kb = !state.knowledge.empty();
    const double lambda_p = have_kb && config.use_kp() ? config.lambda_p : 0.0;
    FusedPrediction pred = predict_fused(state.model, have_kb ? state.knowledge : KnowledgeBase{}, data.test.features,
                                         lambda_p, config.fusion_norm);
    m.acc_net = accuracy_of_scores(pred.network, data.test.labels);
    m.acc_kb = have_kb ? accuracy_of_scores(pred.knowledge, data.test.labels) : 0.0;
    m.acc_fused = accuracy_of_scores(pred.fused, data.test.labels);
}

std::string optional_cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

void write_calibration_csv(std::ostream& out, const std::vector<RoundMetrics>& rounds) {
    out << "round,calibrated,similarity_before,similarity_after,skipped_wcl,skipped_angles\n";
    for (const auto& m : rounds) {
        out << m.round << ',' << (m.calibrated ? 1 : 0) << ',' << optional_cell(m.similarity_before) << ','
            << optional_cell(m.similarity_after) << ',' << m.server.skipped_wcl << ',' << m.loss.skipped_angles
            << '\n';
    }
}

template <typename Writer>
void write_file(const std::filesystem::path& path, Writer&& writer) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    writer(out);
    if (!out) throw IoError("failed while writing " + path.string());
}

}  // namespace

FederatedData prepare_data(const ExperimentConfig& config, std::uint64_t seed) {
    FederatedData d;
    if (config.dataset == DatasetKind::synthetic) {
        SyntheticSpec spec;
        spec.classes = config.classes;
        spec.dim = config.dim;
        spec.per_class = config.train_per_class;
        spec.spread = config.spread;
        spec.seed = stream_seed(seed, Stream::data);
        auto split = make_synthetic_split(spec, config.test_per_class);
        d.train = std::move(split.train);
        d.test = std::move(split.test);
    } else {
        d.train = load_csv(config.train_csv);
        d.test = load_csv(config.test_csv, d.train.class_count);
        if (d.test.dim() != d.train.dim()) throw ConfigError("train and test CSV files differ in feature width");
        d.train.class_count = std::max(d.train.class_count, d.test.class_count);
        d.test.class_count = d.train.class_count;
    }
    d.plan = dirichlet_partition(d.train, config.clients, config.beta, stream_seed(seed, Stream::partition));
    d.clients.reserve(config.clients);
    for (ClientId c = 0; c < config.clients; ++c) d.clients.push_back(split_client(d.train, d.plan, c));
    return d;
}

SimState init_state(const ExperimentConfig& config, const FederatedData& data, std::uint64_t seed) {
    SimState s;
    s.model = init_model(config.model_config(data.train.dim(), data.train.class_count),
                         stream_seed(seed, Stream::init));
    return s;
}

std::vector<ClientId> sample_participants(const ExperimentConfig& config, std::uint64_t seed, std::size_t round) {
    const auto n = config.clients;
    auto m = static_cast<std::size_t>(std::ceil(config.fraction * static_cast<double>(n) - 1e-9));
    m = std::clamp<std::size_t>(m, 1, n);
    std::vector<ClientId> all(n);
    std::iota(all.begin(), all.end(), ClientId{0});
    if (m == n) return all;
    Rng rng(stream_seed(seed, Stream::participation, round));
    std::vector<ClientId> chosen;
    std::sample(all.begin(), all.end(), std::back_inserter(chosen), m, rng);
    return chosen;
}

std::size_t worker_count() {
    if (const char* env = std::getenv("FEDSIM_THREADS")) {
        if (auto v = detail::parse_int<std::size_t>(env); v && *v > 0) return *v;
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

RoundMetrics run_round(SimState& state, const FederatedData& data, const ExperimentConfig& config,
                       std::uint64_t seed) {
    auto start = std::chrono::steady_clock::now();
    RoundMetrics m;
    m.round = state.round + 1;
    m.seed = seed;
    m.method = config.method;
    m.participants = sample_participants(config, seed, m.round);

    auto updates = train_participants(state, data, config, seed, m.participants);

    std::vector<ModelParams> models;
    std::vector<double> weights;
    std::vector<Prototype> pool;
    for (auto& u : updates) {
        models.push_back(std::move(u.params));
        weights.push_back(static_cast<double>(u.sample_count));
        pool.insert(pool.end(), u.prototypes.begin(), u.prototypes.end());
        LossTrace last = u.trace.empty() ? LossTrace{} : u.trace.back();
        m.client_losses.push_back(last);
        m.loss.base += last.base;
        m.loss.node += last.node;
        m.loss.angle += last.angle;
        m.loss.edge += last.edge;
        m.loss.skipped_angles += last.skipped_angles;
    }
    const double n = static_cast<double>(updates.size());
    m.loss.base /= n;
    m.loss.node /= n;
    m.loss.angle /= n;
    m.loss.edge /= n;

    state.model = aggregate(models, weights);
    if (config.uses_prototypes() && !pool.empty()) {
        ServerHyper hp = config.server_hyper();
        hp.calibrate = hp.calibrate && m.round % config.calibrate_every == 0;
        try {
            auto out = calibrate(state.model, pool, hp, stream_seed(seed, Stream::server, m.round));
            state.model = std::move(out.model);
            state.globals = std::move(out.globals);
            state.knowledge = std::move(out.knowledge);
            if (!out.trace.empty()) m.server = out.trace.back();
            m.calibrated = hp.calibrate && hp.epochs > 0;
            m.similarity_before = out.cross_client_similarity_before;
            m.similarity_after = out.cross_client_similarity_after;
        } catch (...) {
            rethrow_with_context("round " + std::to_string(m.round) + ", server: ");
        }
    }
    state.pool = std::move(pool);
    state.round = m.round;

    evaluate(m, state, data, config);
    if (config.record_wall_time)
        m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return m;
}

SeedRun run_seed(const ExperimentConfig& config, std::uint64_t seed, const RoundObserver& observer) {
    config.validate();
    FederatedData data = prepare_data(config, seed);
    SeedRun run;
    run.seed = seed;
    run.final_state = init_state(config, data, seed);
    for (std::size_t t = 0; t < config.rounds; ++t) {
        run.rounds.push_back(run_round(run.final_state, data, config, seed));
        if (observer) observer(run.rounds.back());
    }
    return run;
}

Statistic summarize(const std::vector<double>& values) {
    Statistic s;
    if (values.empty()) return s;
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return s;
}

ExperimentSummary summarize_runs(Method method, const std::vector<SeedRun>& runs) {
    ExperimentSummary s;
    s.method = method;
    for (const auto& r : runs) {
        if (r.rounds.empty()) throw ContractError("cannot summarize a run without rounds");
        s.seeds.push_back(r.seed);
        s.final_acc_net.push_back(r.rounds.back().acc_net);
        s.final_acc_kb.push_back(r.rounds.back().acc_kb);
        s.final_acc_fused.push_back(r.rounds.back().acc_fused);
    }
    s.acc_net = summarize(s.final_acc_net);
    s.acc_kb = summarize(s.final_acc_kb);
    s.acc_fused = summarize(s.final_acc_fused);
    return s;
}

void write_metrics_csv(std::ostream& out, const std::vector<RoundMetrics>& rounds) {
    out << "round,seed,method,acc_net,acc_kb,acc_fused,loss_base,loss_node,loss_angle,loss_edge,loss_sup,loss_wcl,"
           "loss_acl,wall_ms\n";
    for (const auto& m : rounds) {
        out << m.round << ',' << m.seed << ',' << method_name(m.method) << ',' << format_double(m.acc_net) << ','
            << format_double(m.acc_kb) << ',' << format_double(m.acc_fused) << ',' << format_double(m.loss.base)
            << ',' << format_double(m.loss.node) << ',' << format_double(m.loss.angle) << ','
            << format_double(m.loss.edge) << ',' << format_double(m.server.sup) << ',' << format_double(m.server.wcl)
            << ',' << format_double(m.server.acl) << ',' << format_double(m.wall_ms) << '\n';
    }
}

void write_summary_csv(std::ostream& out, const ExperimentSummary& s) {
    out << "method,metric,mean,std,n";
    for (auto seed : s.seeds) out << ",seed_" << seed;
    out << '\n';
    auto row = [&](const char* name, const Statistic& st, const std::vector<double>& finals) {
        out << method_name(s.method) << ',' << name << ',' << format_double(st.mean) << ',' << format_double(st.std)
            << ',' << finals.size();
        for (double v : finals) out << ',' << format_double(v);
        out << '\n';
    };
    row("acc_net", s.acc_net, s.final_acc_net);
    row("acc_kb", s.acc_kb, s.final_acc_kb);
    row("acc_fused", s.acc_fused, s.final_acc_fused);
}

void ensure_writable_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
    auto probe = dir / ".fedsim-write-probe";
    {
        std::ofstream out(probe);
        if (!out || !(out << "probe\n")) throw IoError("output directory is not writable: " + dir.string());
    }
    std::filesystem::remove(probe, ec);
}

ExperimentSummary run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                                 const RoundObserver& observer) {
    config.validate();
    ensure_writable_dir(out_dir);
    write_file(out_dir / "config.txt", [&](std::ostream& o) { write_config(o, config); });

    std::vector<SeedRun> runs;
    for (auto seed : config.seeds) {
        SeedRun run = run_seed(config, seed, observer);
        const std::string tag = "_seed" + std::to_string(seed);
        write_file(out_dir / ("metrics" + tag + ".csv"), [&](std::ostream& o) { write_metrics_csv(o, run.rounds); });
        write_file(out_dir / ("calibration" + tag + ".csv"),
                   [&](std::ostream& o) { write_calibration_csv(o, run.rounds); });
        save_checkpoint(out_dir / ("checkpoint" + tag + ".txt"), run.final_state.model);
        save_prototypes(out_dir / ("prototypes" + tag + ".csv"), run.final_state.pool);
        save_class_vectors(out_dir / ("globals" + tag + ".csv"), run.final_state.globals, "global");
        save_class_vectors(out_dir / ("knowledge" + tag + ".csv"), run.final_state.knowledge.exemplars, "exemplar");
        runs.push_back(std::move(run));
    }
    ExperimentSummary summary = summarize_runs(config.method, runs);
    write_file(out_dir / "summary.csv", [&](std::ostream& o) { write_summary_csv(o, summary); });
    return summary;
}

std::vector<AblationVariant> ablation_variants(const ExperimentConfig& base) {
    struct Row {
        const char* name;
        bool lrl;
        PrototypeMode mode;
        bool pa, kp;
    };
    const Row rows[] = {
        {"+TPG+CA", false, PrototypeMode::traditional, false, false},
        {"+CPM+CA", false, PrototypeMode::clustered, false, false},
        {"+LRL+CPM+CA", true, PrototypeMode::clustered, false, false},
        {"+LRL+CPM+CA+KP", true, PrototypeMode::clustered, false, true},
        {"+TPG+PA+CA", false, PrototypeMode::traditional, true, false},
        {"+CPM+PA+CA", false, PrototypeMode::clustered, true, false},
        {"+LRL+CPM+PA+CA", true, PrototypeMode::clustered, true, false},
        {"+LRL+CPM+PA+CA+KP", true, PrototypeMode::clustered, true, true},
    };
    std::vector<AblationVariant> out;
    ExperimentConfig plain = base;
    plain.method = Method::fedavg;
    out.push_back({"Base", plain});
    for (const auto& r : rows) {
        ExperimentConfig c = base;
        c.method = Method::fedcspc;
        c.lrl = r.lrl;
        c.prototypes = r.mode;
        c.pa = r.pa;
        c.ca = true;
        c.kp = r.kp;
        out.push_back({r.name, c});
    }
    return out;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const RoundObserver& observer) {
    std::vector<AblationRow> rows;
    for (const auto& v : ablation_variants(base)) {
        std::vector<SeedRun> runs;
        for (auto seed : v.config.seeds) runs.push_back(run_seed(v.config, seed, observer));
        rows.push_back({v.name, summarize_runs(v.config.method, runs)});
    }
    return rows;
}

void write_ablation_table(std::ostream& out, const std::vector<AblationRow>& rows) {
    auto cell = [](const Statistic& s) {
        std::ostringstream o;
        o << std::fixed << std::setprecision(2) << 100.0 * s.mean << " +- " << 100.0 * s.std;
        return o.str();
    };
    out << std::left << std::setw(22) << "variant" << std::setw(18) << "acc_fused" << std::setw(18) << "acc_net"
        << "acc_kb\n";
    for (const auto& r : rows) {
        out << std::left << std::setw(22) << r.name << std::setw(18) << cell(r.summary.acc_fused) << std::setw(18)
            << cell(r.summary.acc_net) << cell(r.summary.acc_kb) << '\n';
    }
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
    out << "variant,acc_fused_mean,acc_fused_std,acc_net_mean,acc_net_std,acc_kb_mean,acc_kb_std\n";
    for (const auto& r : rows) {
        const auto& s = r.summary;
        out << r.name << ',' << format_double(s.acc_fused.mean) << ',' << format_double(s.acc_fused.std) << ','
            << format_double(s.acc_net.mean) << ',' << format_double(s.acc_net.std) << ','
            << format_double(s.acc_kb.mean) << ',' << format_double(s.acc_kb.std) << '\n';
    }
}

}  // namespace fedcspc
