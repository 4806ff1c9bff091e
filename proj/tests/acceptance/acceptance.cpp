// Acceptance suite: one PASS/FAIL line per criterion, with timings.
// Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedcspc/config.hpp"
#include "fedcspc/data.hpp"
#include "fedcspc/gradcheck.hpp"
#include "fedcspc/model.hpp"
#include "fedcspc/prototype.hpp"
#include "fedcspc/server.hpp"
#include "fedcspc/simulation.hpp"
#include "oracles.hpp"

using namespace fedcspc;

namespace {

struct Outcome {
    bool passed = false;
    std::string detail;
};

// The heterogeneous synthetic experiment shared by the directional and ablation checks.
ExperimentConfig directional_fixture() {
    ExperimentConfig c;
    c.classes = 8;
    c.dim = 32;
    c.train_per_class = 250;
    c.test_per_class = 100;
    c.spread = 1.8;
    c.clients = 10;
    c.beta = 0.1;
    c.rounds = 20;
    c.local_epochs = 5;
    c.kappa = 0.01;
    c.edge_loss = EdgePenalty::absolute;
    c.lambda_p = 0.3;
    c.seeds = {1, 2, 3};
    return c;
}

Outcome gradients() {
    auto results = run_gradcheck(7, 20);
    std::ostringstream out;
    bool ok = true;
    double worst = 0.0;
    for (const auto& r : results) {
        ok = ok && r.passed() && r.instances >= 20;
        worst = std::max(worst, r.max_error / r.tolerance);
        if (!r.passed()) out << r.name << " error " << r.max_error << "; ";
    }
    out << results.size() << " losses, worst error/tolerance " << worst;
    return {ok, out.str()};
}

ModelConfig small_arch() {
    ModelConfig c;
    c.input_dim = 6;
    c.encoder_hidden = {5};
    c.feature_dim = 4;
    c.head_hidden = {3};
    c.embed_dim = 3;
    c.class_count = 3;
    return c;
}

Outcome aggregation() {
    std::mt19937_64 rng(11);
    std::size_t failures = 0;
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t m = 2 + rng() % 6;
        std::vector<ModelParams> models;
        std::vector<double> weights;
        std::uniform_real_distribution<double> w(0.1, 50.0);
        for (std::size_t i = 0; i < m; ++i) {
            models.push_back(init_model(small_arch(), rng()));
            weights.push_back(std::floor(w(rng)));
        }
        auto avg = aggregate(models, weights);

        // fixed point
        std::vector<ModelParams> copies(m, models[0]);
        auto same = aggregate(copies, weights);
        // permutation
        std::vector<std::size_t> order(m);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<ModelParams> pm;
        std::vector<double> pw;
        for (auto i : order) {
            pm.push_back(models[i]);
            pw.push_back(weights[i]);
        }
        auto permuted = aggregate(pm, pw);

        const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
        double err = 0.0;
        bool bounded = true;
        for (std::size_t l = 0; l < avg.layers().size(); ++l) {
            auto check = [&](auto pick) {
                const Tensor& out = pick(avg.layers()[l]);
                for (std::size_t i = 0; i < out.size(); ++i) {
                    double lo = INFINITY, hi = -INFINITY, mean = 0.0;
                    for (std::size_t k = 0; k < m; ++k) {
                        double v = pick(models[k].layers()[l])[i];
                        lo = std::min(lo, v);
                        hi = std::max(hi, v);
                        mean += weights[k] / total * v;
                    }
                    if (out[i] < lo - 1e-12 || out[i] > hi + 1e-12) bounded = false;
                    err = std::max(err, std::fabs(out[i] - mean));
                    err = std::max(err, std::fabs(pick(permuted.layers()[l])[i] - out[i]));
                    err = std::max(err, std::fabs(pick(same.layers()[l])[i] - pick(models[0].layers()[l])[i]));
                }
            };
            check([](const Layer& x) -> const Tensor& { return x.weight; });
            check([](const Layer& x) -> const Tensor& { return x.bias; });
        }
        worst = std::max(worst, err);
        if (!bounded || err > 1e-12) ++failures;
    }
    std::ostringstream out;
    out << "100 instances, " << failures << " failures, max deviation " << worst;
    return {failures == 0, out.str()};
}

Outcome kmeans_oracle() {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g(0.0, 1.0);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t k = 1 + rng() % 3;
        const std::size_t n = k + rng() % (9 - k);
        const std::size_t dim = 1 + rng() % 3;
        Tensor pts = Tensor::zeros({n, dim});
        for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = g(rng);
        auto res = kmeans_best_of(pts, k, rng(), 10);
        worst = std::max(worst, res.inertia - oracle::exhaustive_kmeans_inertia(pts, k));
    }
    std::ostringstream out;
    out << "50 instances, worst excess inertia " << worst;
    return {worst <= 1e-6, out.str()};
}

Outcome partitions() {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> log_beta(std::log(0.01), std::log(100.0));
    std::size_t bad = 0;
    for (int trial = 0; trial < 200; ++trial) {
        SyntheticSpec spec{2 + rng() % 9, 3, 5 + rng() % 40, 1.0, rng()};
        auto data = make_synthetic(spec);
        const std::size_t clients = 2 + rng() % 12;
        auto plan = dirichlet_partition(data, clients, std::exp(log_beta(rng)), rng());
        std::vector<int> seen(data.size(), 0);
        bool ok = plan.client_count() == clients;
        for (const auto& [client, idx] : plan.assignments) {
            ok = ok && !idx.empty();
            for (auto i : idx) ok = ok && i < data.size() && ++seen[i] == 1;
        }
        ok = ok && std::all_of(seen.begin(), seen.end(), [](int v) { return v == 1; });
        if (!ok) ++bad;
    }

    bool uniform = true;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        auto data = make_synthetic({10, 3, 100, 1.0, seed});
        auto hist = partition_histograms(data, dirichlet_partition(data, 10, 1e6, seed));
        for (const auto& row : hist)
            for (auto v : row) uniform = uniform && v >= 8 && v <= 12;
    }

    int skewed = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        auto data = make_synthetic({10, 3, 100, 1.0, seed});
        auto hist = partition_histograms(data, dirichlet_partition(data, 10, 0.1, seed));
        bool missing = false;
        for (const auto& row : hist) missing = missing || std::count(row.begin(), row.end(), 0) > 0;
        skewed += missing;
    }
    std::ostringstream out;
    out << "200 draws, " << bad << " invalid; beta=1e6 within 20% of uniform: " << (uniform ? "yes" : "no")
        << "; beta=0.1 missing a class in " << skewed << "/10 seeds";
    return {bad == 0 && uniform && skewed >= 8, out.str()};
}

Outcome fedavg_equivalence() {
    ExperimentConfig c;
    c.classes = 4;
    c.dim = 8;
    c.train_per_class = 40;
    c.test_per_class = 10;
    c.clients = 4;
    c.beta = 0.5;
    c.local_epochs = 2;
    c.batch_size = 16;
    c.lrl = c.pa = c.ca = c.kp = false;
    const std::uint64_t seed = 9;
    auto reference = oracle::reference_fedavg(c, seed, 5);
    auto data = prepare_data(c, seed);
    auto state = init_state(c, data, seed);
    std::size_t identical = 0;
    for (std::size_t t = 0; t < 5; ++t) {
        run_round(state, data, c, seed);
        identical += state.model == reference.models[t];
    }
    return {identical == 5, std::to_string(identical) + "/5 rounds bit-identical"};
}

Outcome directional() {
    auto fixture = directional_fixture();
    auto baseline = fixture;
    baseline.method = Method::fedavg;
    double fedavg = 0.0, fedcspc = 0.0;
    std::ostringstream out;
    bool similarity_ok = true;
    for (auto seed : fixture.seeds) {
        fedavg += run_seed(baseline, seed).rounds.back().acc_fused / 3.0;
        auto run = run_seed(fixture, seed);
        fedcspc += run.rounds.back().acc_fused / 3.0;
        int rising = 0;
        for (const auto& r : run.rounds)
            rising += r.similarity_before && r.similarity_after && *r.similarity_after > *r.similarity_before;
        similarity_ok = similarity_ok && rising >= 15;
        out << "seed " << seed << " similarity rose in " << rising << "/20 rounds; ";
    }
    out << "fedavg " << fedavg << " vs fedcspc " << fedcspc;
    return {fedcspc > fedavg && similarity_ok, out.str()};
}

Outcome ablation() {
    auto rows = run_ablation(directional_fixture());
    write_ablation_table(std::cout, rows);
    bool ok = rows.size() == 9;
    for (const auto& r : rows) ok = ok && r.summary.final_acc_fused.size() == 3;
    return {ok, std::to_string(rows.size()) + " variants completed"};
}

Outcome fusion() {
    std::mt19937_64 rng(21);
    std::normal_distribution<double> g(0.0, 1.0);
    auto model = init_model(small_arch(), 4);
    std::vector<Prototype> pool;
    for (std::size_t c = 0; c < 3; ++c)
        for (ClientId k = 0; k < 2; ++k) {
            std::vector<double> v(4);
            for (auto& x : v) x = g(rng);
            pool.push_back({v, c, k, 0, 0});
        }
    auto kb = build_knowledge_base(model, pool);
    Tensor x = Tensor::zeros({50, 6});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = 3.0 * g(rng);
    double worst = 0.0;
    bool endpoints = true;
    for (auto norm : {FusionNorm::softmax, FusionNorm::minmax})
        for (double lambda : {0.0, 0.1, 0.3, 0.5, 1.0}) {
            auto p = predict_fused(model, kb, x, lambda, norm);
            for (std::size_t i = 0; i < p.fused.rows(); ++i) {
                double s = 0.0;
                for (std::size_t c = 0; c < p.fused.cols(); ++c) s += p.fused.at(i, c);
                worst = std::max(worst, std::fabs(s - 1.0));
            }
            if (lambda == 0.0) endpoints = endpoints && p.fused == p.network;
            if (lambda == 1.0) endpoints = endpoints && p.fused == p.knowledge;
        }
    std::ostringstream out;
    out << "max |sum - 1| = " << worst << ", endpoints exact: " << (endpoints ? "yes" : "no");
    return {worst <= 1e-9 && endpoints, out.str()};
}

}  // namespace

int main(int argc, char** argv) {
    struct Criterion {
        int id;
        const char* name;
        double budget_s;
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> all{
        {1, "gradient suite", 60, gradients},
        {2, "aggregation algebra", 10, aggregation},
        {3, "k-means oracle", 30, kmeans_oracle},
        {4, "partition invariants", 30, partitions},
        {5, "fedavg equivalence", 0, fedavg_equivalence},
        {6, "directional heterogeneity", 600, directional},
        {7, "ablation harness", 0, ablation},
        {8, "fusion contract", 0, fusion},
    };
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

    int failed = 0;
    for (const auto& c : all) {
        if (!wanted.empty() && !wanted.count(c.id)) continue;
        auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        bool in_time = c.budget_s == 0 || secs < c.budget_s;
        bool ok = o.passed && in_time;
        failed += !ok;
        std::cout << (ok ? "PASS" : "FAIL") << "  criterion " << c.id << " (" << c.name << ")  " << o.detail << "  ["
                  << secs << " s";
        if (c.budget_s > 0) std::cout << " of " << c.budget_s << " s";
        std::cout << "]\n" << std::flush;
    }
    return failed == 0 ? 0 : 1;
}
