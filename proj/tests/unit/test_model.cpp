#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "fedcspc/error.hpp"
#include "fedcspc/model.hpp"
#include "support.hpp"

using namespace fedcspc;
namespace ts = testing_support;

namespace {

ModelConfig config_small() {
    ModelConfig c;
    c.input_dim = 5;
    c.encoder_hidden = {7};
    c.feature_dim = 4;
    c.head_hidden = {6};
    c.embed_dim = 3;
    c.class_count = 3;
    return c;
}

ModelParams scaled(const ModelParams& p, double factor, double offset) {
    ModelParams q = p;
    for (auto& l : q.layers()) {
        for (auto& w : l.weight.data()) w = w * factor + offset;
        for (auto& b : l.bias.data()) b = b * factor + offset;
    }
    return q;
}

std::vector<double> flatten(const ModelParams& p) {
    std::vector<double> out;
    for (const auto& l : p.layers()) {
        out.insert(out.end(), l.weight.data().begin(), l.weight.data().end());
        out.insert(out.end(), l.bias.data().begin(), l.bias.data().end());
    }
    return out;
}

}  // namespace

TEST(InitModel, DeterministicPerSeed) {
    auto c = config_small();
    EXPECT_EQ(init_model(c, 3), init_model(c, 3));
    EXPECT_NE(init_model(c, 3), init_model(c, 4));
}

TEST(InitModel, ZeroBiasesAndGlorotBounds) {
    auto p = init_model(config_small(), 9);
    for (const auto& l : p.layers()) {
        for (double b : l.bias.data()) EXPECT_EQ(b, 0.0);
        double bound = std::sqrt(6.0 / static_cast<double>(l.weight.rows() + l.weight.cols()));
        for (double w : l.weight.data()) EXPECT_LE(std::fabs(w), bound);
    }
}

TEST(InitModel, PartitionsCoverEveryLayerOnce) {
    auto p = init_model(config_small(), 1);
    std::size_t total = p.partition(Partition::encoder).size() + p.partition(Partition::head).size() +
                        p.partition(Partition::classifier).size();
    EXPECT_EQ(total, p.layers().size());
    EXPECT_EQ(p.partition(Partition::encoder).size(), 2u);
    EXPECT_EQ(p.partition(Partition::head).size(), 2u);
    EXPECT_EQ(p.partition(Partition::classifier).size(), 1u);
}

TEST(ModelConfig, RejectsZeroDims) {
    auto c = config_small();
    c.embed_dim = 0;
    EXPECT_THROW(init_model(c, 1), ConfigError);
}

TEST(ModelParams, RejectsBrokenChain) {
    auto p = init_model(config_small(), 1);
    auto layers = p.layers();
    layers[1].weight = Tensor::zeros({3, 4});
    EXPECT_ANY_THROW(ModelParams(p.config(), layers));
}

TEST(Forward, ZeroWeightsZeroInputGiveZeroLogits) {
    auto p = scaled(init_model(config_small(), 1), 0.0, 0.0);
    Tensor logits = forward(p, Tensor::zeros({4, 5}), Stage::full);
    EXPECT_EQ(logits, Tensor::zeros({4, 3}));
}

TEST(Forward, RowCountAndWidthsPerStage) {
    auto p = init_model(config_small(), 2);
    std::mt19937_64 rng(1);
    Tensor x = ts::gaussian_matrix(6, 5, rng);
    EXPECT_EQ(forward(p, x, Stage::encoder).shape(), (Shape{6, 4}));
    EXPECT_EQ(forward(p, x, Stage::through_head).shape(), (Shape{6, 3}));
    EXPECT_EQ(forward(p, x, Stage::full).shape(), (Shape{6, 3}));
    EXPECT_THROW(forward(p, Tensor::zeros({2, 4}), Stage::full), DimensionError);
}

TEST(Forward, SingleLinearLayerMatchesHandProduct) {
    ModelConfig c;
    c.input_dim = 2;
    c.feature_dim = 2;
    c.head_hidden = {};
    c.embed_dim = 1;
    c.class_count = 2;
    c.relu_features = false;
    auto p = init_model(c, 1);
    auto layers = p.layers();
    for (auto& l : layers) {
        if (l.name == "encoder.0") {
            l.weight = Tensor::matrix({{1, 0}, {0, 1}});
        } else if (l.name == "classifier") {
            l.weight = Tensor::matrix({{1, 2}, {3, 4}});
            l.bias = Tensor::matrix({{0.5, -0.5}});
        }
    }
    ModelParams q(c, layers);
    Tensor logits = forward(q, Tensor::matrix({{1, 2}, {-1, 0}}), Stage::full);
    // [1,2]·W + b = [7.5, 9.5]; [-1,0]·W + b = [-0.5, -2.5]
    EXPECT_EQ(logits, Tensor::matrix({{7.5, 9.5}, {-0.5, -2.5}}));
}

TEST(Forward, FullEqualsClassifierOnEncoderFeatures) {
    auto p = init_model(config_small(), 5);
    std::mt19937_64 rng(2);
    Tensor x = ts::gaussian_matrix(8, 5, rng);
    EXPECT_EQ(forward(p, x, Stage::full), classify_features(p, forward(p, x, Stage::encoder)));
    EXPECT_EQ(forward(p, x, Stage::through_head), project_features(p, forward(p, x, Stage::encoder)));
}

TEST(Forward, ClassifierCanReadHeadOutput) {
    auto c = config_small();
    c.classifier_input = ClassifierInput::head;
    auto p = init_model(c, 5);
    EXPECT_EQ(p.layer("classifier").weight.rows(), c.embed_dim);
    std::mt19937_64 rng(3);
    Tensor x = ts::gaussian_matrix(3, 5, rng);
    EXPECT_EQ(forward(p, x, Stage::full).shape(), (Shape{3, 3}));
}

TEST(Forward, BoundModelAgreesWithForward) {
    auto p = init_model(config_small(), 6);
    std::mt19937_64 rng(4);
    Tensor x = ts::gaussian_matrix(3, 5, rng);
    BoundModel b(p);
    auto f = b.encode(ad::constant(x));
    EXPECT_EQ(b.classify(f).value(), forward(p, x, Stage::full));
    EXPECT_EQ(b.project(f).value(), forward(p, x, Stage::through_head));
}

TEST(SgdStep, ZeroLearningRateIsIdentity) {
    auto p = init_model(config_small(), 7);
    std::mt19937_64 rng(5);
    BoundModel b(p);
    auto loss = ad::sum(ad::square(b.classify(b.encode(ad::constant(ts::gaussian_matrix(2, 5, rng))))));
    auto grads = collect_grads(b, ad::backward(loss));
    EXPECT_EQ(sgd_step(p, grads, 0.0, 0.0), p);
}

TEST(SgdStep, ScalarArithmetic) {
    ModelConfig c;
    c.input_dim = 1;
    c.feature_dim = 1;
    c.head_hidden = {};
    c.embed_dim = 1;
    c.class_count = 1;
    auto p = init_model(c, 1);
    auto layers = p.layers();
    ParamGrads g;
    for (auto& l : layers) {
        l.weight = Tensor::matrix({{1.0}});
        l.bias = Tensor::matrix({{2.0}});
        g[l.name] = {Tensor::matrix({{1.0}}), Tensor::matrix({{0.5}})};
    }
    ModelParams q(c, layers);
    auto r = sgd_step(q, g, 0.1, 0.0);
    EXPECT_DOUBLE_EQ(r.layer("encoder.0").weight.item(), 0.9);
    EXPECT_DOUBLE_EQ(r.layer("encoder.0").bias.item(), 1.95);

    auto wd = sgd_step(q, g, 0.01, 1e-5);
    // closed form w(1 - lr wd) - lr g
    EXPECT_NEAR(wd.layer("head.0").weight.item(), 1.0 * (1 - 0.01 * 1e-5) - 0.01 * 1.0, 1e-15);
}

TEST(SgdStep, MissingGradientIsContractError) {
    auto p = init_model(config_small(), 1);
    ParamGrads empty;
    EXPECT_THROW(sgd_step(p, empty, 0.1, 0.0), ContractError);
    const Partition none[] = {Partition::head};
    ParamGrads only_head;
    for (const auto* l : p.partition(Partition::head))
        only_head[l->name] = {Tensor::zeros(l->weight.shape()), Tensor::zeros(l->bias.shape())};
    EXPECT_NO_THROW(sgd_step(p, only_head, 0.1, 0.0, none));
}

TEST(SgdStep, FrozenPartitionsStayBitIdentical) {
    auto p = init_model(config_small(), 8);
    const Partition head[] = {Partition::head};
    BoundModel b(p, head);
    std::mt19937_64 rng(6);
    auto loss = ad::sum(ad::square(b.project(b.encode(ad::constant(ts::gaussian_matrix(3, 5, rng))))));
    auto q = sgd_step(p, collect_grads(b, ad::backward(loss)), 0.1, 1e-3, head);
    for (const auto* l : p.partition(Partition::encoder)) EXPECT_EQ(q.layer(l->name), *l);
    for (const auto* l : p.partition(Partition::classifier)) EXPECT_EQ(q.layer(l->name), *l);
    EXPECT_NE(q.layer("head.0"), p.layer("head.0"));
}

TEST(Aggregate, IdenticalModelsFixedPoint) {
    auto p = init_model(config_small(), 10);
    std::vector<ModelParams> ms(4, p);
    std::vector<double> w{0.3, 7, 1, 2};
    auto avg = aggregate(ms, w);
    ASSERT_TRUE(avg.same_architecture(p));
    for (std::size_t l = 0; l < p.layers().size(); ++l) {
        const auto& a = avg.layers()[l];
        const auto& b = p.layers()[l];
        for (std::size_t i = 0; i < a.weight.size(); ++i) EXPECT_NEAR(a.weight[i], b.weight[i], 1e-15);
        for (std::size_t i = 0; i < a.bias.size(); ++i) EXPECT_NEAR(a.bias[i], b.bias[i], 1e-15);
    }
    std::vector<double> one{5.0};
    EXPECT_EQ(aggregate(std::span(ms).first(1), one), p);
}

TEST(Aggregate, TwoScalarModels) {
    ModelConfig c;
    c.input_dim = 1;
    c.feature_dim = 1;
    c.head_hidden = {};
    c.embed_dim = 1;
    c.class_count = 1;
    auto base = init_model(c, 1);
    auto a = scaled(base, 0.0, 0.0), b = scaled(base, 0.0, 4.0);
    std::vector<ModelParams> ms{a, b};
    std::vector<double> w{1, 3};
    for (double v : flatten(aggregate(ms, w))) EXPECT_DOUBLE_EQ(v, 3.0);
}

TEST(Aggregate, MatchesWeightedMeanOracle) {
    std::mt19937_64 rng(20);
    auto c = config_small();
    std::vector<ModelParams> ms{init_model(c, 1), init_model(c, 2), init_model(c, 3)};
    std::vector<double> w{5, 11, 2};
    auto out = flatten(aggregate(ms, w));
    std::vector<std::vector<double>> flat;
    for (auto& m : ms) flat.push_back(flatten(m));
    for (std::size_t i = 0; i < out.size(); ++i) {
        double expect = (5 * flat[0][i] + 11 * flat[1][i] + 2 * flat[2][i]) / 18.0;
        EXPECT_NEAR(out[i], expect, 1e-15);
    }
}

TEST(Aggregate, Errors) {
    auto c = config_small();
    auto p = init_model(c, 1);
    std::vector<ModelParams> none;
    std::vector<double> nw;
    EXPECT_THROW(aggregate(none, nw), ContractError);
    std::vector<ModelParams> two{p, p};
    std::vector<double> zeros{0, 0}, neg{1, -1};
    EXPECT_THROW(aggregate(two, zeros), ContractError);
    EXPECT_THROW(aggregate(two, neg), ContractError);
    auto other = c;
    other.feature_dim = 9;
    std::vector<ModelParams> mixed{p, init_model(other, 1)};
    std::vector<double> ones{1, 1};
    EXPECT_THROW(aggregate(mixed, ones), ContractError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    auto c = config_small();
    c.classifier_input = ClassifierInput::head;
    c.relu_features = false;
    auto p = scaled(init_model(c, 31), 1.0 / 3.0, 1e-17);
    std::stringstream s;
    write_checkpoint(s, p);
    EXPECT_EQ(read_checkpoint(s), p);
}

TEST(Checkpoint, RejectsGarbage) {
    std::stringstream s("not a checkpoint\n");
    EXPECT_THROW(read_checkpoint(s), ParseError);
}
