#include "fedcspc/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "fedcspc/error.hpp"
#include "fedcspc/rng.hpp"
#include "text_util.hpp"

namespace fedcspc {

namespace {

constexpr Partition kAllPartitions[] = {Partition::encoder, Partition::head, Partition::classifier};

bool listed(std::span<const Partition> ps, Partition p) { return std::find(ps.begin(), ps.end(), p) != ps.end(); }

Layer make_layer(std::string name, Partition part, std::size_t in, std::size_t out, Rng& rng) {
    double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> w(in * out);
    for (auto& v : w) v = dist(rng);
    return Layer{std::move(name), part, Tensor::matrix(in, out, std::move(w)), Tensor::zeros({1, out})};
}

std::string join_dims(const std::vector<std::size_t>& dims) {
    std::string s;
    for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "," : "") + std::to_string(dims[i]);
    return s.empty() ? "-" : s;
}

std::vector<std::size_t> parse_dims(std::string_view s, std::size_t line) {
    std::vector<std::size_t> dims;
    if (s == "-") return dims;
    for (auto part : detail::split(s, ',')) {
        auto v = detail::parse_int<std::size_t>(part);
        if (!v) throw ParseError("bad dimension list '" + std::string(s) + "'", line);
        dims.push_back(*v);
    }
    return dims;
}

Partition parse_partition(std::string_view s, std::size_t line) {
    if (s == "encoder") return Partition::encoder;
    if (s == "head") return Partition::head;
    if (s == "classifier") return Partition::classifier;
    throw ParseError("unknown partition '" + std::string(s) + "'", line);
}

}  // namespace

const char* partition_name(Partition p) {
    switch (p) {
        case Partition::encoder: return "encoder";
        case Partition::head: return "head";
        case Partition::classifier: return "classifier";
    }
    return "?";
}

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* what) {
        if (v == 0) throw ConfigError(std::string("model dimension '") + what + "' must be >= 1");
    };
    positive(input_dim, "input_dim");
    positive(feature_dim, "feature_dim");
    positive(embed_dim, "embed_dim");
    positive(class_count, "class_count");
    for (auto d : encoder_hidden) positive(d, "encoder_hidden");
    for (auto d : head_hidden) positive(d, "head_hidden");
}

std::size_t ModelConfig::classifier_input_dim() const {
    return classifier_input == ClassifierInput::encoder ? feature_dim : embed_dim;
}

ModelParams::ModelParams(ModelConfig config, std::vector<Layer> layers)
    : config_(std::move(config)), layers_(std::move(layers)) {
    config_.validate();
    // Check the chain input -> encoder -> feature, feature -> head -> embed, F input -> classes.
    std::size_t enc_in = config_.input_dim, head_in = config_.feature_dim;
    std::size_t n_cls = 0;
    for (const auto& l : layers_) {
        if (l.bias.rank() != 2 || l.bias.rows() != 1 || l.bias.cols() != l.weight.cols() || l.weight.rank() != 2) {
            throw DimensionError("layer " + l.name + ": bias " + shape_string(l.bias.shape()) +
                                 " does not match weight " + shape_string(l.weight.shape()));
        }
        std::size_t& cursor = l.partition == Partition::encoder ? enc_in : head_in;
        switch (l.partition) {
            case Partition::encoder:
            case Partition::head:
                if (l.weight.rows() != cursor) {
                    throw DimensionError("layer " + l.name + " expects input " + std::to_string(l.weight.rows()) +
                                         " but the chain provides " + std::to_string(cursor));
                }
                cursor = l.weight.cols();
                break;
            case Partition::classifier:
                ++n_cls;
                if (l.weight.rows() != config_.classifier_input_dim() || l.weight.cols() != config_.class_count) {
                    throw DimensionError("classifier layer has shape " + shape_string(l.weight.shape()));
                }
                break;
        }
    }
    if (enc_in != config_.feature_dim || head_in != config_.embed_dim || n_cls != 1) {
        throw DimensionError("layer chain does not match the model configuration");
    }
}

const Layer& ModelParams::layer(const std::string& name) const {
    for (const auto& l : layers_)
        if (l.name == name) return l;
    throw ContractError("no layer named '" + name + "'");
}

std::vector<const Layer*> ModelParams::partition(Partition p) const {
    std::vector<const Layer*> out;
    for (const auto& l : layers_)
        if (l.partition == p) out.push_back(&l);
    return out;
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
}

bool ModelParams::same_architecture(const ModelParams& other) const {
    if (layers_.size() != other.layers_.size()) return false;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto &a = layers_[i], &b = other.layers_[i];
        if (a.name != b.name || a.partition != b.partition || a.weight.shape() != b.weight.shape() ||
            a.bias.shape() != b.bias.shape())
            return false;
    }
    return config_ == other.config_;
}

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    std::vector<Layer> layers;
    std::size_t in = config.input_dim;
    auto enc_dims = config.encoder_hidden;
    enc_dims.push_back(config.feature_dim);
    for (std::size_t i = 0; i < enc_dims.size(); ++i) {
        layers.push_back(make_layer("encoder." + std::to_string(i), Partition::encoder, in, enc_dims[i], rng));
        in = enc_dims[i];
    }
    auto head_dims = config.head_hidden;
    head_dims.push_back(config.embed_dim);
    in = config.feature_dim;
    for (std::size_t i = 0; i < head_dims.size(); ++i) {
        layers.push_back(make_layer("head." + std::to_string(i), Partition::head, in, head_dims[i], rng));
        in = head_dims[i];
    }
    layers.push_back(
        make_layer("classifier", Partition::classifier, config.classifier_input_dim(), config.class_count, rng));
    return ModelParams(config, std::move(layers));
}

BoundModel::BoundModel(const ModelParams& params, std::span<const Partition> trainable) : params_(&params) {
    vars_.reserve(params.layers().size());
    for (const auto& l : params.layers()) {
        if (listed(trainable, l.partition)) {
            vars_.push_back({ad::parameter(l.weight), ad::parameter(l.bias)});
        } else {
            vars_.push_back({ad::constant(l.weight), ad::constant(l.bias)});
        }
    }
}

BoundModel::BoundModel(const ModelParams& params) : BoundModel(params, kAllPartitions) {}

ad::Var BoundModel::run(Partition p, ad::Var h, bool relu_last) const {
    const auto& layers = params_->layers();
    std::size_t count = 0, total = params_->partition(p).size();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].partition != p) continue;
        ++count;
        h = ad::add_row(ad::matmul(h, vars_[i].weight), vars_[i].bias);
        if (count < total || relu_last) h = ad::relu(h);
    }
    return h;
}

ad::Var BoundModel::encode(const ad::Var& x) const {
    if (x.value().rank() != 2 || x.value().cols() != params_->config().input_dim) {
        throw DimensionError("model input has shape " + shape_string(x.shape()) + ", expected n x " +
                             std::to_string(params_->config().input_dim));
    }
    return run(Partition::encoder, x, params_->config().relu_features);
}

ad::Var BoundModel::project(const ad::Var& features) const { return run(Partition::head, features, false); }

ad::Var BoundModel::classify(const ad::Var& features) const {
    ad::Var in = params_->config().classifier_input == ClassifierInput::head ? project(features) : features;
    return run(Partition::classifier, in, false);
}

ParamGrads collect_grads(const BoundModel& bound, const ad::Gradients& grads) {
    ParamGrads out;
    const auto& layers = bound.params().layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& v = bound.vars()[i];
        if (!v.weight.requires_grad()) continue;
        LayerGrad g{grads.contains(v.weight) ? grads.of(v.weight) : Tensor::zeros(v.weight.shape()),
                    grads.contains(v.bias) ? grads.of(v.bias) : Tensor::zeros(v.bias.shape())};
        out.emplace(layers[i].name, std::move(g));
    }
    return out;
}

Tensor forward(const ModelParams& params, const Tensor& x, Stage stage) {
    BoundModel m(params, {});
    ad::Var f = m.encode(ad::constant(x));
    switch (stage) {
        case Stage::encoder: return f.value();
        case Stage::through_head: return m.project(f).value();
        case Stage::full: return m.classify(f).value();
    }
    return f.value();
}

Tensor project_features(const ModelParams& params, const Tensor& features) {
    BoundModel m(params, {});
    return m.project(ad::constant(features)).value();
}

Tensor classify_features(const ModelParams& params, const Tensor& features) {
    BoundModel m(params, {});
    return m.classify(ad::constant(features)).value();
}

ModelParams sgd_step(const ModelParams& params, const ParamGrads& grads, double lr, double weight_decay,
                     std::span<const Partition> partitions) {
    ModelParams next = params;
    for (auto& l : next.layers()) {
        if (!listed(partitions, l.partition)) continue;
        auto it = grads.find(l.name);
        if (it == grads.end()) throw ContractError("sgd_step: no gradient for layer '" + l.name + "'");
        const auto& g = it->second;
        if (g.weight.shape() != l.weight.shape() || g.bias.shape() != l.bias.shape()) {
            throw DimensionError("sgd_step: gradient shape mismatch on layer '" + l.name + "'");
        }
        for (std::size_t i = 0; i < l.weight.size(); ++i)
            l.weight[i] -= lr * (g.weight[i] + weight_decay * l.weight[i]);
        for (std::size_t i = 0; i < l.bias.size(); ++i) l.bias[i] -= lr * (g.bias[i] + weight_decay * l.bias[i]);
    }
    return next;
}

ModelParams sgd_step(const ModelParams& params, const ParamGrads& grads, double lr, double weight_decay) {
    return sgd_step(params, grads, lr, weight_decay, kAllPartitions);
}

ModelParams aggregate(std::span<const ModelParams> models, std::span<const double> weights) {
    if (models.empty()) throw ContractError("aggregate: no models");
    if (models.size() != weights.size()) throw ContractError("aggregate: one weight per model required");
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw ContractError("aggregate: weights must be finite and non-negative");
        total += w;
    }
    if (total <= 0.0) throw ContractError("aggregate: all weights are zero");
    for (const auto& m : models) {
        if (!m.same_architecture(models.front())) throw ContractError("aggregate: architecture mismatch");
    }
    ModelParams out = models.front();
    for (std::size_t li = 0; li < out.layers().size(); ++li) {
        auto& dst = out.layers()[li];
        auto blend = [&](Tensor& t, auto member) {
            for (std::size_t i = 0; i < t.size(); ++i) {
                double acc = 0.0;
                for (std::size_t k = 0; k < models.size(); ++k)
                    acc += (weights[k] / total) * (models[k].layers()[li].*member)[i];
                t[i] = acc;
            }
        };
        blend(dst.weight, &Layer::weight);
        blend(dst.bias, &Layer::bias);
    }
    return out;
}

void write_checkpoint(std::ostream& out, const ModelParams& params) {
    const auto& c = params.config();
    out << "fedcspc-checkpoint 1\n";
    out << "config " << c.input_dim << ' ' << join_dims(c.encoder_hidden) << ' ' << c.feature_dim << ' '
        << join_dims(c.head_hidden) << ' ' << c.embed_dim << ' ' << c.class_count << ' '
        << (c.classifier_input == ClassifierInput::encoder ? "encoder" : "head") << ' '
        << (c.relu_features ? 1 : 0) << '\n';
    out << "layers " << params.layers().size() << '\n';
    auto values = [&](const char* tag, const Tensor& t) {
        out << tag;
        for (double v : t.data()) out << ' ' << detail::format_double(v);
        out << '\n';
    };
    for (const auto& l : params.layers()) {
        out << "layer " << l.name << ' ' << partition_name(l.partition) << ' ' << l.weight.rows() << ' '
            << l.weight.cols() << '\n';
        values("w", l.weight);
        values("b", l.bias);
    }
    out << "end\n";
}

ModelParams read_checkpoint(std::istream& in) {
    std::string line;
    std::size_t lineno = 0;
    auto next = [&]() -> std::vector<std::string_view> {
        if (!std::getline(in, line)) throw ParseError("unexpected end of checkpoint", lineno + 1);
        ++lineno;
        return detail::split_ws(line);
    };
    auto tok = next();
    if (tok.size() != 2 || tok[0] != "fedcspc-checkpoint" || tok[1] != "1")
        throw ParseError("not a version-1 checkpoint", lineno);

    auto size_at = [&](std::string_view s) {
        auto v = detail::parse_int<std::size_t>(s);
        if (!v) throw ParseError("expected an integer, got '" + std::string(s) + "'", lineno);
        return *v;
    };

    tok = next();
    if (tok.size() != 9 || tok[0] != "config") throw ParseError("malformed config line", lineno);
    ModelConfig c;
    c.input_dim = size_at(tok[1]);
    c.encoder_hidden = parse_dims(tok[2], lineno);
    c.feature_dim = size_at(tok[3]);
    c.head_hidden = parse_dims(tok[4], lineno);
    c.embed_dim = size_at(tok[5]);
    c.class_count = size_at(tok[6]);
    if (tok[7] == "encoder") c.classifier_input = ClassifierInput::encoder;
    else if (tok[7] == "head") c.classifier_input = ClassifierInput::head;
    else throw ParseError("unknown classifier input '" + std::string(tok[7]) + "'", lineno);
    c.relu_features = tok[8] == "1";

    tok = next();
    if (tok.size() != 2 || tok[0] != "layers") throw ParseError("expected layer count", lineno);
    std::size_t n_layers = size_at(tok[1]);

    auto read_values = [&](const char* tag, std::size_t count) {
        auto t = next();
        if (t.empty() || t[0] != tag || t.size() != count + 1)
            throw ParseError(std::string("expected ") + std::to_string(count) + " values on '" + tag + "' line", lineno);
        std::vector<double> v;
        v.reserve(count);
        for (std::size_t i = 1; i < t.size(); ++i) {
            auto d = detail::parse_double(t[i]);
            if (!d) throw ParseError("non-numeric value '" + std::string(t[i]) + "'", lineno);
            v.push_back(*d);
        }
        return v;
    };

    std::vector<Layer> layers;
    for (std::size_t i = 0; i < n_layers; ++i) {
        tok = next();
        if (tok.size() != 5 || tok[0] != "layer") throw ParseError("malformed layer header", lineno);
        std::string name(tok[1]);
        Partition p = parse_partition(tok[2], lineno);
        std::size_t rows = size_at(tok[3]), cols = size_at(tok[4]);
        auto w = read_values("w", rows * cols);
        auto b = read_values("b", cols);
        layers.push_back({name, p, Tensor::matrix(rows, cols, std::move(w)), Tensor::matrix(1, cols, std::move(b))});
    }
    tok = next();
    if (tok.size() != 1 || tok[0] != "end") throw ParseError("missing end marker", lineno);
    return ModelParams(c, std::move(layers));
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    write_checkpoint(out, params);
    if (!out) throw IoError("failed writing " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    return read_checkpoint(in);
}

}  // namespace fedcspc
