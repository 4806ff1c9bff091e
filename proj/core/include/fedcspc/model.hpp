#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedcspc/autodiff.hpp"
#include "fedcspc/tensor.hpp"

namespace fedcspc {

enum class Partition { encoder, head, classifier };

const char* partition_name(Partition p);

// Which representation the classifier reads. The default has F and H both hang
// off the encoder, so calibrating H never changes the classifier's input path.
enum class ClassifierInput { encoder, head };

struct ModelConfig {
    std::size_t input_dim = 2;
    std::vector<std::size_t> encoder_hidden;
    std::size_t feature_dim = 16;
    std::vector<std::size_t> head_hidden{16};
    std::size_t embed_dim = 16;
    std::size_t class_count = 2;
    ClassifierInput classifier_input = ClassifierInput::encoder;
    bool relu_features = true;  // ReLU on the encoder's last layer

    void validate() const;
    std::size_t classifier_input_dim() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct Layer {
    std::string name;
    Partition partition;
    Tensor weight;  // in x out
    Tensor bias;    // 1 x out

    friend bool operator==(const Layer&, const Layer&) = default;
};

/// Parameters of encoder E, projection head H and classifier F, stored as an
/// ordered chain of fully connected layers tagged with their partition.
class ModelParams {
public:
    ModelParams() = default;
    ModelParams(ModelConfig config, std::vector<Layer> layers);

    const ModelConfig& config() const noexcept { return config_; }
    const std::vector<Layer>& layers() const noexcept { return layers_; }
    std::vector<Layer>& layers() noexcept { return layers_; }

    const Layer& layer(const std::string& name) const;
    std::vector<const Layer*> partition(Partition p) const;
    std::size_t parameter_count() const;

    // Same layer names, partitions and shapes.
    bool same_architecture(const ModelParams& other) const;

    friend bool operator==(const ModelParams&, const ModelParams&) = default;

private:
    ModelConfig config_;
    std::vector<Layer> layers_;
};

ModelParams init_model(const ModelConfig& config, std::uint64_t seed);

// Parameters bound into a computation graph. Layers outside `trainable` become
// constants, so no gradient flows into them.
struct LayerVars {
    ad::Var weight;
    ad::Var bias;
};

class BoundModel {
public:
    BoundModel(const ModelParams& params, std::span<const Partition> trainable);
    explicit BoundModel(const ModelParams& params);  // everything trainable

    ad::Var encode(const ad::Var& x) const;
    ad::Var project(const ad::Var& features) const;
    ad::Var classify(const ad::Var& features) const;

    const ModelParams& params() const noexcept { return *params_; }
    const std::vector<LayerVars>& vars() const noexcept { return vars_; }

private:
    ad::Var run(Partition p, ad::Var h, bool relu_last) const;

    const ModelParams* params_;
    std::vector<LayerVars> vars_;
};

struct LayerGrad {
    Tensor weight;
    Tensor bias;
};
using ParamGrads = std::map<std::string, LayerGrad>;

// Gradients for every trainable layer of `bound` after backward().
ParamGrads collect_grads(const BoundModel& bound, const ad::Gradients& grads);

enum class Stage { encoder, through_head, full };

Tensor forward(const ModelParams& params, const Tensor& x, Stage stage);
// Head or classifier applied to already-computed encoder features.
Tensor project_features(const ModelParams& params, const Tensor& features);
Tensor classify_features(const ModelParams& params, const Tensor& features);

// w <- w - lr * (g + wd * w) on every layer whose partition is listed in
// `partitions`; each of those layers needs an entry in `grads`.
ModelParams sgd_step(const ModelParams& params, const ParamGrads& grads, double lr, double weight_decay,
                     std::span<const Partition> partitions);
ModelParams sgd_step(const ModelParams& params, const ParamGrads& grads, double lr, double weight_decay);

// Weighted average with weights normalized to sum to one.
ModelParams aggregate(std::span<const ModelParams> models, std::span<const double> weights);

// Checkpoints are line-oriented text; doubles use the shortest round-trip form.
void write_checkpoint(std::ostream& out, const ModelParams& params);
ModelParams read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace fedcspc
