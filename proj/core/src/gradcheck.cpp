#include "fedcspc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <random>

#include "fedcspc/client.hpp"
#include "fedcspc/error.hpp"
#include "fedcspc/prototype.hpp"
#include "fedcspc/rng.hpp"
#include "fedcspc/server.hpp"

namespace fedcspc {

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Tensor t = Tensor::zeros({r, c});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = n(rng);
    return t;
}

std::vector<double> random_vector(std::size_t d, Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(d);
    for (auto& x : v) x = n(rng);
    return v;
}

ad::Var evaluate(const TensorLoss& loss, const std::vector<Tensor>& inputs, bool as_parameters,
                 std::vector<ad::Var>* leaves = nullptr) {
    std::vector<ad::Var> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.push_back(as_parameters ? ad::parameter(t) : ad::constant(t));
    ad::Var out = loss(vars);
    if (leaves) *leaves = std::move(vars);
    return out;
}

ModelConfig small_config(Rng& rng) {
    ModelConfig c;
    c.input_dim = 4;
    c.encoder_hidden = {6};
    c.feature_dim = 5;
    c.head_hidden = {6};
    c.embed_dim = 4;
    c.class_count = 3;
    c.relu_features = std::bernoulli_distribution(0.5)(rng);
    return c;
}

// Glorot init leaves biases at zero; random biases exercise their gradients too.
ModelParams random_model(const ModelConfig& config, Rng& rng) {
    ModelParams p = init_model(config, rng());
    std::normal_distribution<double> n(0.0, 0.2);
    for (auto& layer : p.layers())
        for (std::size_t i = 0; i < layer.bias.size(); ++i) layer.bias[i] = n(rng);
    return p;
}

std::vector<Prototype> random_pool(std::size_t clients, std::size_t classes, std::size_t per, std::size_t dim,
                                   Rng& rng) {
    std::vector<Prototype> pool;
    for (std::size_t c = 0; c < clients; ++c)
        for (std::size_t k = 0; k < classes; ++k)
            for (std::size_t t = 0; t < per; ++t) pool.push_back({random_vector(dim, rng), k, c, 0, t});
    return pool;
}

GlobalPrototypeSet random_globals(std::size_t classes, std::size_t dim, Rng& rng) {
    GlobalPrototypeSet g;
    for (std::size_t k = 0; k < classes; ++k) g[k] = random_vector(dim, rng);
    return g;
}

}  // namespace

double relative_error(std::span<const double> a, std::span<const double> b, double floor) {
    if (a.size() != b.size()) throw DimensionError("relative_error: lengths differ");
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

double check_tensor_gradient(const TensorLoss& loss, const std::vector<Tensor>& inputs, double step) {
    std::vector<ad::Var> leaves;
    ad::Var root = evaluate(loss, inputs, true, &leaves);
    auto grads = ad::backward(root);
    std::vector<double> analytic, numeric;
    std::vector<Tensor> probe = inputs;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        Tensor g = grads.contains(leaves[t]) ? grads.of(leaves[t]) : Tensor::zeros(inputs[t].shape());
        analytic.insert(analytic.end(), g.data().begin(), g.data().end());
        for (std::size_t i = 0; i < inputs[t].size(); ++i) {
            const double x = inputs[t][i];
            probe[t][i] = x + step;
            const double up = evaluate(loss, probe, false).item();
            probe[t][i] = x - step;
            const double down = evaluate(loss, probe, false).item();
            probe[t][i] = x;
            numeric.push_back((up - down) / (2.0 * step));
        }
    }
    return relative_error(analytic, numeric);
}

double check_model_gradient(const ModelLoss& loss, const ModelParams& params, std::span<const Partition> trainable,
                            double step) {
    BoundModel bound(params, trainable);
    auto grads = collect_grads(bound, ad::backward(loss(bound)));
    auto value_at = [&](const ModelParams& p) { return loss(BoundModel(p, trainable)).item(); };

    std::vector<double> analytic, numeric;
    ModelParams probe = params;
    for (std::size_t l = 0; l < params.layers().size(); ++l) {
        const Layer& layer = params.layers()[l];
        if (std::find(trainable.begin(), trainable.end(), layer.partition) == trainable.end()) continue;
        auto it = grads.find(layer.name);
        for (int which = 0; which < 2; ++which) {
            const Tensor& original = which == 0 ? layer.weight : layer.bias;
            Tensor& target = which == 0 ? probe.layers()[l].weight : probe.layers()[l].bias;
            if (it == grads.end()) {
                analytic.insert(analytic.end(), original.size(), 0.0);
            } else {
                const Tensor& g = which == 0 ? it->second.weight : it->second.bias;
                analytic.insert(analytic.end(), g.data().begin(), g.data().end());
            }
            for (std::size_t i = 0; i < original.size(); ++i) {
                const double x = original[i];
                target[i] = x + step;
                const double up = value_at(probe);
                target[i] = x - step;
                const double down = value_at(probe);
                target[i] = x;
                numeric.push_back((up - down) / (2.0 * step));
            }
        }
    }
    return relative_error(analytic, numeric);
}

std::vector<GradcheckResult> run_gradcheck(std::uint64_t seed, std::size_t instances) {
    std::vector<GradcheckResult> results;
    auto run = [&](const std::string& name, double tolerance, std::uint64_t tag, auto&& one_instance) {
        GradcheckResult r{name, instances, 0.0, tolerance};
        Rng rng(derive_seed({seed, tag}));
        for (std::size_t i = 0; i < instances; ++i) r.max_error = std::max(r.max_error, one_instance(rng));
        results.push_back(r);
    };

    run("matmul", 1e-6, 1, [](Rng& rng) {
        return check_tensor_gradient([](auto v) { return ad::sum(ad::matmul(v[0], v[1])); },
                                     {random_matrix(3, 3, rng), random_matrix(3, 3, rng)});
    });
    run("exp", 1e-6, 2, [](Rng& rng) {
        return check_tensor_gradient([](auto v) { return ad::sum(ad::exp(v[0])); }, {random_matrix(2, 4, rng)});
    });
    run("node contrast", 1e-4, 3, [](Rng& rng) {
        const std::size_t dim = 5, classes = 4;
        auto globals = random_globals(classes, dim, rng);
        std::vector<ClassId> labels{0, 1, 3, 3};
        return check_tensor_gradient(
            [&](auto v) { return *loss_node_batch(v[0], labels, globals, 0.5); },
            {random_matrix(labels.size(), dim, rng)});
    });
    run("angle alignment", 1e-4, 4, [](Rng& rng) {
        const std::size_t dim = 5;
        while (true) {
            auto g1 = random_vector(dim, rng), g2 = random_vector(dim, rng), g3 = random_vector(dim, rng);
            std::vector<Tensor> f{random_matrix(1, dim, rng), random_matrix(1, dim, rng), random_matrix(1, dim, rng)};
            TensorLoss loss = [&](auto v) { return *loss_angle(v[0], v[1], v[2], g1, g2, g3); };
            // Stay clear of the kink of |.| so central differences are meaningful.
            if (evaluate(loss, f, false).item() < 1e-3) continue;
            return check_tensor_gradient(loss, f);
        }
    });
    run("edge alignment", 1e-4, 5, [](Rng& rng) {
        const std::size_t dim = 5;
        auto g1 = random_vector(dim, rng), g2 = random_vector(dim, rng);
        return check_tensor_gradient([&](auto v) { return loss_edge(v[0], v[1], g1, g2); },
                                     {random_matrix(1, dim, rng), random_matrix(1, dim, rng)});
    });
    run("augmented triplet (active)", 1e-4, 6, [](Rng& rng) {
        const std::size_t dim = 4;
        while (true) {
            std::vector<Tensor> z{random_matrix(1, dim, rng), random_matrix(1, dim, rng), random_matrix(1, dim, rng)};
            TensorLoss loss = [](auto v) { return loss_acl_embedded(v[0], v[1], v[2], 1.0); };
            if (evaluate(loss, z, false).item() < 1e-3) continue;
            return check_tensor_gradient(loss, z);
        }
    });
    run("augmented triplet through head", 1e-4, 7, [](Rng& rng) {
        auto config = small_config(rng);
        while (true) {
            auto params = random_model(config, rng);
            auto a = random_vector(config.feature_dim, rng), p = random_vector(config.feature_dim, rng),
                 n = random_vector(config.feature_dim, rng);
            ModelLoss loss = [&](const BoundModel& m) { return loss_acl(m, a, p, n, 1.0); };
            const Partition head[] = {Partition::head};
            if (loss(BoundModel(params, head)).item() < 1e-3) continue;
            return check_model_gradient(loss, params, head);
        }
    });
    run("weighted contrast", 1e-4, 8, [](Rng& rng) {
        auto config = small_config(rng);
        auto params = random_model(config, rng);
        auto pool = random_pool(2, 3, 2, config.feature_dim, rng);
        auto batch = augment(pool, 0.3, 2, rng());
        const Partition head[] = {Partition::head};
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        std::size_t anchor = pick(rng);
        return check_model_gradient([&](const BoundModel& m) { return *loss_wcl(anchor, batch, m, 0.5); }, params,
                                    head);
    });
    run("server cross-entropy", 1e-4, 9, [](Rng& rng) {
        auto config = small_config(rng);
        auto params = random_model(config, rng);
        auto u = random_vector(config.feature_dim, rng);
        ClassId label = std::uniform_int_distribution<ClassId>(0, config.class_count - 1)(rng);
        const Partition classifier[] = {Partition::classifier};
        return check_model_gradient([&](const BoundModel& m) { return loss_sup(m, u, label); }, params, classifier);
    });
    run("client objective", 1e-4, 10, [](Rng& rng) {
        auto config = small_config(rng);
        auto params = random_model(config, rng);
        const std::size_t n = 8;
        Tensor x = random_matrix(n, config.input_dim, rng);
        std::vector<ClassId> labels(n);
        for (std::size_t i = 0; i < n; ++i) labels[i] = i % config.class_count;
        auto globals = random_globals(config.class_count, config.feature_dim, rng);
        ClientHyper hp;
        hp.kappa = 0.5;
        hp.max_relations = 4;
        Rng align(rng());
        const Partition all[] = {Partition::encoder, Partition::head, Partition::classifier};
        // Every evaluation restarts the relation sampler so it sees the same triples.
        return check_model_gradient(
            [&](const BoundModel& m) {
                Rng fresh = align;
                return client_objective(m, x, labels, &globals, hp, fresh).total;
            },
            params, all);
    });
    run("server objective", 1e-4, 11, [](Rng& rng) {
        auto config = small_config(rng);
        auto params = random_model(config, rng);
        auto pool = random_pool(2, 3, 2, config.feature_dim, rng);
        auto batch = augment(pool, 0.3, 2, rng());
        ServerHyper hp;
        hp.eta = 0.5;
        auto anchors = batch.real_indices();
        anchors.resize(4);
        const Partition calibrated[] = {Partition::head, Partition::classifier};
        return check_model_gradient(
            [&](const BoundModel& m) { return server_objective(m, batch, anchors, hp).total; }, params, calibrated);
    });
    return results;
}

void write_gradcheck_report(std::ostream& out, const std::vector<GradcheckResult>& results) {
    for (const auto& r : results) {
        out << (r.passed() ? "PASS " : "FAIL ") << std::left << std::setw(34) << r.name << " instances=" << r.instances
            << " max_rel_err=" << std::scientific << std::setprecision(3) << r.max_error << " tol=" << r.tolerance
            << std::defaultfloat << '\n';
    }
}

}  // namespace fedcspc
