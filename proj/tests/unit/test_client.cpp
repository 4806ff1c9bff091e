#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedcspc/client.hpp"
#include "fedcspc/error.hpp"
#include "support.hpp"

using namespace fedcspc;
namespace ts = testing_support;

namespace {

ad::Var row_var(std::vector<double> v) { return ad::parameter(Tensor::row(std::move(v))); }

// Prototype contrast written out directly on normalized vectors.
double node_oracle(const std::vector<double>& f, const GlobalPrototypeSet& g, ClassId label, double tau) {
    auto fu = ts::unit(f);
    double num = 0.0, den = 0.0;
    for (const auto& [c, u] : g) {
        double e = std::exp(ts::dot(fu, ts::unit(u)) / tau);
        den += e;
        if (c == label) num = e;
    }
    return -std::log(num / den);
}

double cos_oracle(const std::vector<double>& a, const std::vector<double>& b, const std::vector<double>& c) {
    std::vector<double> x(a.size()), y(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) x[i] = a[i] - b[i], y[i] = c[i] - b[i];
    return ts::dot(x, y) / (ts::norm(x) * ts::norm(y));
}

LabeledDataset two_blobs(std::size_t per_class, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 0.5);
    LabeledDataset d;
    std::vector<double> flat;
    for (std::size_t i = 0; i < 2 * per_class; ++i) {
        ClassId c = i % 2;
        double center = c == 0 ? -2.0 : 2.0;
        flat.push_back(center + n(rng));
        flat.push_back(center + n(rng));
        flat.push_back(n(rng));
        d.labels.push_back(c);
    }
    d.features = Tensor::matrix(2 * per_class, 3, flat);
    d.class_count = 2;
    return d;
}

ModelConfig blob_config() {
    ModelConfig c;
    c.input_dim = 3;
    c.encoder_hidden = {8};
    c.feature_dim = 6;
    c.head_hidden = {6};
    c.embed_dim = 4;
    c.class_count = 2;
    return c;
}

}  // namespace

TEST(NodeLoss, PositiveMatchesWithOrthogonalNegative) {
    GlobalPrototypeSet g{{0, {1, 0}}, {1, {0, 1}}};
    auto l = loss_node(row_var({1, 0}), g, 0, 0.5);
    ASSERT_TRUE(l);
    EXPECT_NEAR(l->item(), -std::log(std::exp(2.0) / (std::exp(2.0) + 1.0)), 1e-12);
    EXPECT_NEAR(l->item(), 0.12693, 1e-5);
}

TEST(NodeLoss, NegativesEqualToPositiveGiveLogThree) {
    GlobalPrototypeSet g{{0, {0, 3}}, {1, {0, 1}}, {2, {0, 2}}};
    EXPECT_NEAR(loss_node(row_var({0, 5}), g, 0, 0.5)->item(), std::log(3.0), 1e-12);
}

TEST(NodeLoss, SkipsAndErrors) {
    GlobalPrototypeSet one{{0, {1, 0}}};
    EXPECT_FALSE(loss_node(row_var({1, 0}), one, 0, 0.5));
    GlobalPrototypeSet two{{0, {1, 0}}, {1, {0, 1}}};
    EXPECT_FALSE(loss_node(row_var({1, 0}), two, 5, 0.5));
    EXPECT_THROW(loss_node(row_var({1, 0}), two, 0, 0.0), ContractError);
}

TEST(NodeLoss, MatchesOracleAndIsNonNegative) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 30; ++trial) {
        GlobalPrototypeSet g;
        for (ClassId c = 0; c < 4; ++c) g[c] = ts::gaussian(5, rng);
        auto f = ts::gaussian(5, rng);
        double got = loss_node(row_var(f), g, trial % 4, 0.5)->item();
        EXPECT_NEAR(got, node_oracle(f, g, trial % 4, 0.5), 1e-12);
        EXPECT_GE(got, 0.0);
    }
}

TEST(NodeLoss, BatchAveragesOnlyAnchoredRows) {
    std::mt19937_64 rng(2);
    GlobalPrototypeSet g{{0, ts::gaussian(3, rng)}, {2, ts::gaussian(3, rng)}};
    auto a = ts::gaussian(3, rng), b = ts::gaussian(3, rng), c = ts::gaussian(3, rng);
    std::vector<double> flat(a);
    flat.insert(flat.end(), b.begin(), b.end());
    flat.insert(flat.end(), c.begin(), c.end());
    std::vector<ClassId> labels{0, 1, 2};  // class 1 has no prototype
    auto l = loss_node_batch(ad::constant(Tensor::matrix(3, 3, flat)), labels, g, 0.5);
    EXPECT_NEAR(l->item(), 0.5 * (node_oracle(a, g, 0, 0.5) + node_oracle(c, g, 2, 0.5)), 1e-12);
}

TEST(NodeLoss, GradientMatchesCentralDifferences) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        GlobalPrototypeSet g;
        for (ClassId c = 0; c < 3; ++c) g[c] = ts::gaussian(4, rng);
        auto f0 = ts::gaussian(4, rng);
        auto f = row_var(f0);
        auto grad = ad::backward(*loss_node(f, g, 1, 0.5)).of(f);
        auto num = ts::numeric_gradient([&](const std::vector<double>& v) { return node_oracle(v, g, 1, 0.5); }, f0);
        EXPECT_LT(ts::norm_relative_error(ts::to_vector(grad), num), 1e-4);
    }
}

TEST(AngleLoss, ZeroWhenFeaturesEqualPrototypes) {
    std::mt19937_64 rng(4);
    auto a = ts::gaussian(3, rng), b = ts::gaussian(3, rng), c = ts::gaussian(3, rng);
    EXPECT_NEAR(loss_angle(row_var(a), row_var(b), row_var(c), a, b, c)->item(), 0.0, 1e-15);
}

TEST(AngleLoss, RightAngleVersusStraightLine) {
    auto l = loss_angle(row_var({1, 0}), row_var({0, 0}), row_var({0, 1}), std::vector<double>{1, 0},
                        std::vector<double>{0, 0}, std::vector<double>{-1, 0});
    EXPECT_NEAR(l->item(), 1.0, 1e-15);
    EXPECT_NEAR(angle_pair_l1(std::vector<double>{1, 0}, std::vector<double>{0, 0}, std::vector<double>{0, 1},
                              std::vector<double>{1, 0}, std::vector<double>{0, 0}, std::vector<double>{-1, 0}),
                1.0, 1e-15);
}

TEST(AngleLoss, CoincidentPointsAreSkipped) {
    std::vector<double> g1{1, 0}, g2{0, 0}, g3{0, 1};
    EXPECT_FALSE(loss_angle(row_var({1, 1}), row_var({1, 1}), row_var({0, 1}), g1, g2, g3));
    EXPECT_FALSE(loss_angle(row_var({1, 1}), row_var({0, 0}), row_var({0, 1}), g1, g1, g3));
    EXPECT_THROW(cos_angle(g1, g1, g3), DomainError);
}

TEST(AngleLoss, InvariantUnderSimilarityTransform) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = ts::gaussian(2, rng), b = ts::gaussian(2, rng), c = ts::gaussian(2, rng);
        auto g1 = ts::gaussian(2, rng), g2 = ts::gaussian(2, rng), g3 = ts::gaussian(2, rng);
        double theta = std::uniform_real_distribution<double>(0, 6.28)(rng);
        double s = std::uniform_real_distribution<double>(0.2, 5.0)(rng);
        auto tx = ts::gaussian(2, rng);
        auto tf = [&](const std::vector<double>& v) {
            return std::vector<double>{s * (std::cos(theta) * v[0] - std::sin(theta) * v[1]) + tx[0],
                                       s * (std::sin(theta) * v[0] + std::cos(theta) * v[1]) + tx[1]};
        };
        double base = loss_angle(row_var(a), row_var(b), row_var(c), g1, g2, g3)->item();
        double moved = loss_angle(row_var(tf(a)), row_var(tf(b)), row_var(tf(c)), g1, g2, g3)->item();
        EXPECT_NEAR(base, moved, 1e-12);
        EXPECT_NEAR(base, std::fabs(cos_oracle(a, b, c) - cos_oracle(g1, g2, g3)), 1e-12);
        EXPECT_GE(base, 0.0);
        EXPECT_LE(base, 2.0);
    }
}

TEST(AngleLoss, GradientMatchesCentralDifferences) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        auto g1 = ts::gaussian(3, rng), g2 = ts::gaussian(3, rng), g3 = ts::gaussian(3, rng);
        auto a0 = ts::gaussian(3, rng), b = ts::gaussian(3, rng), c = ts::gaussian(3, rng);
        auto a = row_var(a0);
        auto grad = ad::backward(*loss_angle(a, row_var(b), row_var(c), g1, g2, g3)).of(a);
        auto num = ts::numeric_gradient(
            [&](const std::vector<double>& v) { return std::fabs(cos_oracle(v, b, c) - cos_oracle(g1, g2, g3)); },
            a0);
        EXPECT_LT(ts::norm_relative_error(ts::to_vector(grad), num), 1e-4);
    }
}

TEST(EdgeLoss, Values) {
    std::vector<double> g1{0, 0}, g2{3, 0};
    EXPECT_NEAR(loss_edge(row_var({0, 0}), row_var({3, 0}), g1, g2).item(), 0.0, 1e-15);
    EXPECT_NEAR(loss_edge(row_var({0, 0}), row_var({3, 4}), g1, g2).item(), 4.0, 1e-12);
    EXPECT_NEAR(loss_edge(row_var({0, 0}), row_var({3, 4}), g1, g2, EdgePenalty::absolute).item(), 2.0, 1e-12);
}

TEST(EdgeLoss, GradientMatchesCentralDifferences) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        auto g1 = ts::gaussian(4, rng), g2 = ts::gaussian(4, rng), f2 = ts::gaussian(4, rng);
        auto f10 = ts::gaussian(4, rng);
        auto f1 = row_var(f10);
        auto grad = ad::backward(loss_edge(f1, row_var(f2), g1, g2)).of(f1);
        auto num = ts::numeric_gradient(
            [&](const std::vector<double>& v) {
                std::vector<double> d(4), e(4);
                for (int i = 0; i < 4; ++i) d[i] = v[i] - f2[i], e[i] = g1[i] - g2[i];
                return std::pow(ts::norm(d) - ts::norm(e), 2);
            },
            f10);
        EXPECT_LT(ts::norm_relative_error(ts::to_vector(grad), num), 1e-4);
    }
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
    std::vector<ClassId> labels{2};
    EXPECT_NEAR(cross_entropy(ad::constant(Tensor::matrix({{0.3, 0.3, 0.3, 0.3}})), labels).item(), std::log(4.0),
                1e-12);
    EXPECT_THROW(cross_entropy(ad::constant(Tensor::matrix({{0.0, 0.0}})), labels), ContractError);
}

TEST(EpochBatches, PermutationInChunks) {
    Rng rng(1);
    auto b = epoch_batches(10, 4, rng);
    ASSERT_EQ(b.size(), 3u);
    EXPECT_EQ(b[2].size(), 2u);
    std::vector<int> seen(10, 0);
    for (const auto& chunk : b)
        for (auto i : chunk) ++seen[i];
    for (int s : seen) EXPECT_EQ(s, 1);
    EXPECT_THROW(epoch_batches(10, 0, rng), ConfigError);
}

TEST(ClientObjective, KappaZeroEqualsBaseLoss) {
    auto params = init_model(blob_config(), 1);
    auto data = two_blobs(8, 1);
    GlobalPrototypeSet g{{0, std::vector<double>(6, 0.5)}, {1, std::vector<double>(6, -0.5)}};
    ClientHyper hp;
    hp.kappa = 0.0;
    Rng rng(1);
    BoundModel m(params);
    auto out = client_objective(m, data.features, data.labels, &g, hp, rng);
    EXPECT_EQ(out.total.item(), out.parts.base);
    EXPECT_EQ(out.parts.node, 0.0);
}

TEST(ClientObjective, AlignmentTermsAreAddedWithKappa) {
    auto params = init_model(blob_config(), 2);
    auto data = two_blobs(8, 2);
    std::mt19937_64 r(3);
    GlobalPrototypeSet g{{0, ts::gaussian(6, r)}, {1, ts::gaussian(6, r)}};
    ClientHyper hp;
    hp.kappa = 0.5;
    Rng rng(4);
    BoundModel m(params);
    auto out = client_objective(m, data.features, data.labels, &g, hp, rng);
    double expect = out.parts.base + 0.5 * (out.parts.node + out.parts.angle + out.parts.edge);
    EXPECT_NEAR(out.total.item(), expect, 1e-12);
    EXPECT_GT(out.parts.node, 0.0);
    EXPECT_GT(out.parts.edge, 0.0);
    EXPECT_EQ(out.parts.angle, 0.0);  // only two classes, no label-distinct triple
}

TEST(TrainClient, KappaZeroMatchesTrainingWithoutPrototypes) {
    auto params = init_model(blob_config(), 3);
    auto data = two_blobs(20, 3);
    GlobalPrototypeSet g{{0, std::vector<double>(6, 1.0)}, {1, std::vector<double>(6, -1.0)}};
    ClientHyper hp;
    hp.epochs = 3;
    hp.batch_size = 8;
    hp.kappa = 0.0;
    auto with = train_client(params, data, &g, hp, 0, 77);
    auto without = train_client(params, data, nullptr, hp, 0, 77);
    EXPECT_EQ(with.params, without.params);
    EXPECT_EQ(with.prototypes, without.prototypes);
}

TEST(TrainClient, ZeroEpochsReturnsParamsUnchanged) {
    auto params = init_model(blob_config(), 4);
    ClientHyper hp;
    hp.epochs = 0;
    auto u = train_client(params, two_blobs(5, 4), nullptr, hp, 3, 1);
    EXPECT_EQ(u.params, params);
    EXPECT_EQ(u.sample_count, 10u);
    EXPECT_TRUE(u.trace.empty());
}

TEST(TrainClient, EmptyDatasetIsContractError) {
    auto params = init_model(blob_config(), 4);
    LabeledDataset empty;
    EXPECT_THROW(train_client(params, empty, nullptr, ClientHyper{}, 0, 1), ContractError);
}

TEST(TrainClient, SeparableDataIsLearned) {
    auto params = init_model(blob_config(), 5);
    auto data = two_blobs(50, 5);
    ClientHyper hp;
    hp.epochs = 10;
    hp.batch_size = 16;
    hp.lr = 0.1;
    auto u = train_client(params, data, nullptr, hp, 0, 9);
    auto logits = forward(u.params, data.features, Stage::full);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < data.size(); ++i)
        hits += (logits.at(i, 1) > logits.at(i, 0) ? 1u : 0u) == data.labels[i];
    EXPECT_GE(static_cast<double>(hits) / static_cast<double>(data.size()), 0.95);
    ASSERT_EQ(u.trace.size(), 10u);
    for (const auto& t : u.trace) EXPECT_TRUE(std::isfinite(t.base));
}

TEST(TrainClient, PrototypesFollowOptions) {
    auto params = init_model(blob_config(), 6);
    auto data = two_blobs(10, 6);
    ClientHyper hp;
    hp.epochs = 1;
    hp.prototypes = {2, 0.5, 3};
    auto u = train_client(params, data, nullptr, hp, 4, 2);
    EXPECT_EQ(u.prototypes.size(), 2u * 2u * 3u);
    for (const auto& p : u.prototypes) EXPECT_EQ(p.client_id, 4u);
    hp.prototype_mode = PrototypeMode::traditional;
    EXPECT_EQ(train_client(params, data, nullptr, hp, 4, 2).prototypes.size(), 2u);
    hp.emit_prototypes = false;
    EXPECT_TRUE(train_client(params, data, nullptr, hp, 4, 2).prototypes.empty());
}

TEST(TrainClient, DeterministicPerSeed) {
    auto params = init_model(blob_config(), 7);
    auto data = two_blobs(12, 7);
    std::mt19937_64 r(1);
    GlobalPrototypeSet g{{0, ts::gaussian(6, r)}, {1, ts::gaussian(6, r)}};
    ClientHyper hp;
    hp.epochs = 2;
    hp.batch_size = 6;
    auto a = train_client(params, data, &g, hp, 1, 5), b = train_client(params, data, &g, hp, 1, 5);
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(a.prototypes, b.prototypes);
}
