#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "fedcspc/client.hpp"
#include "fedcspc/model.hpp"
#include "fedcspc/server.hpp"

namespace fedcspc {

enum class DatasetKind { synthetic, csv };
enum class Method { fedavg, fedcspc };

const char* method_name(Method m);

// Everything a simulation needs, read from a flat `key = value` file whose keys
// match the field names below.
struct ExperimentConfig {
    // data
    DatasetKind dataset = DatasetKind::synthetic;
    std::size_t classes = 8;
    std::size_t dim = 32;
    std::size_t train_per_class = 250;
    std::size_t test_per_class = 100;
    double spread = 1.0;
    std::string train_csv;
    std::string test_csv;

    // federation
    std::size_t clients = 10;
    double fraction = 1.0;
    std::size_t rounds = 100;
    double beta = 0.5;

    // model
    std::vector<std::size_t> encoder_hidden{64};
    std::size_t feature_dim = 32;
    std::vector<std::size_t> head_hidden{32};
    std::size_t embed_dim = 16;
    ClassifierInput classifier_input = ClassifierInput::encoder;

    // client
    std::size_t local_epochs = 10;
    std::size_t batch_size = 64;
    double lr = 0.01;
    double weight_decay = 1e-5;
    double kappa = 0.1;
    double tau_l = 0.5;
    EdgePenalty edge_loss = EdgePenalty::square;
    std::size_t max_relations = 16;

    // prototypes
    std::size_t k = 2;
    double r = 0.5;
    std::size_t n_repeat = 5;

    // server
    double lambda_u = 0.3;
    double lambda_p = 0.3;
    double alpha = 1.0;
    std::size_t n_aug = 5;
    double tau_g = 0.5;
    double eta = 0.1;
    std::size_t server_epochs = 20;
    double server_lr = 0.01;
    std::size_t server_batch = 64;
    bool acl_clamp = true;
    FusionNorm fusion_norm = FusionNorm::softmax;
    std::size_t calibrate_every = 1;

    // method and ablation switches; fedavg forces every switch off
    Method method = Method::fedcspc;
    bool lrl = true;                                     // client alignment regularizer
    PrototypeMode prototypes = PrototypeMode::clustered;  // cpm or tpg
    bool pa = true;                                      // prototype augmentation
    bool ca = true;                                      // server calibration
    bool kp = true;                                      // knowledge-based prediction

    std::vector<std::uint64_t> seeds{1};
    bool record_wall_time = false;

    // Throws ConfigError naming the offending key.
    void validate() const;

    // Switches after applying the method: all false under fedavg.
    bool use_lrl() const noexcept { return method == Method::fedcspc && lrl; }
    bool use_pa() const noexcept { return method == Method::fedcspc && pa; }
    bool use_ca() const noexcept { return method == Method::fedcspc && ca; }
    bool use_kp() const noexcept { return method == Method::fedcspc && kp; }
    // Clients upload prototypes only when something downstream consumes them.
    bool uses_prototypes() const noexcept { return use_lrl() || use_ca() || use_kp(); }

    ModelConfig model_config(std::size_t input_dim, std::size_t class_count) const;
    ClientHyper client_hyper() const;
    ServerHyper server_hyper() const;
};

// Applies one `key = value` assignment. Unknown keys and malformed values raise ConfigError.
void apply_setting(ExperimentConfig& config, std::string_view key, std::string_view value);

// Blank lines and lines starting with '#' are ignored; the result is validated.
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::filesystem::path& path);

// Every key in canonical form; parse_config(write_config(c)) reproduces c.
void write_config(std::ostream& out, const ExperimentConfig& config);

std::vector<std::string> config_keys();

}  // namespace fedcspc
