#include "fedcspc/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <utility>

#include "fedcspc/error.hpp"
#include "text_util.hpp"

namespace fedcspc {

namespace {

using detail::format_double;
using detail::trim;

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
    throw ConfigError("config key '" + std::string(key) + "': cannot read '" + std::string(value) + "' as " +
                      std::string(expected));
}

struct Field {
    const char* key;
    std::function<void(ExperimentConfig&, std::string_view)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T>
Field count_field(const char* key, T ExperimentConfig::*member) {
    return {key,
            [key, member](ExperimentConfig& c, std::string_view v) {
                auto parsed = detail::parse_int<T>(v);
                if (!parsed) bad_value(key, v, "a non-negative integer");
                c.*member = *parsed;
            },
            [member](const ExperimentConfig& c) { return std::to_string(c.*member); }};
}

Field real_field(const char* key, double ExperimentConfig::*member) {
    return {key,
            [key, member](ExperimentConfig& c, std::string_view v) {
                auto parsed = detail::parse_double(v);
                if (!parsed || !std::isfinite(*parsed)) bad_value(key, v, "a finite number");
                c.*member = *parsed;
            },
            [member](const ExperimentConfig& c) { return format_double(c.*member); }};
}

bool parse_flag(std::string_view key, std::string_view v) {
    v = trim(v);
    if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
    if (v == "off" || v == "false" || v == "0" || v == "no") return false;
    bad_value(key, v, "on/off");
}

Field flag_field(const char* key, bool ExperimentConfig::*member) {
    return {key, [key, member](ExperimentConfig& c, std::string_view v) { c.*member = parse_flag(key, v); },
            [member](const ExperimentConfig& c) { return std::string(c.*member ? "on" : "off"); }};
}

Field text_field(const char* key, std::string ExperimentConfig::*member) {
    return {key, [member](ExperimentConfig& c, std::string_view v) { c.*member = std::string(trim(v)); },
            [member](const ExperimentConfig& c) { return c.*member; }};
}

template <typename E>
Field choice_field(const char* key, E ExperimentConfig::*member, std::vector<std::pair<const char*, E>> names) {
    return {key,
            [key, member, names](ExperimentConfig& c, std::string_view v) {
                v = trim(v);
                for (const auto& [name, value] : names)
                    if (v == name) {
                        c.*member = value;
                        return;
                    }
                std::string options;
                for (const auto& [name, value] : names) options += (options.empty() ? "" : "|") + std::string(name);
                bad_value(key, v, options);
            },
            [member, names](const ExperimentConfig& c) {
                for (const auto& [name, value] : names)
                    if (c.*member == value) return std::string(name);
                return std::string();
            }};
}

template <typename T>
Field list_field(const char* key, std::vector<T> ExperimentConfig::*member) {
    return {key,
            [key, member](ExperimentConfig& c, std::string_view v) {
                std::vector<T> out;
                v = trim(v);
                if (!v.empty() && v != "none") {
                    for (auto part : detail::split(v, ',')) {
                        auto parsed = detail::parse_int<T>(part);
                        if (!parsed) bad_value(key, v, "a comma-separated list of integers");
                        out.push_back(*parsed);
                    }
                }
                c.*member = std::move(out);
            },
            [member](const ExperimentConfig& c) {
                if ((c.*member).empty()) return std::string("none");
                std::string s;
                for (auto x : c.*member) s += (s.empty() ? "" : ",") + std::to_string(x);
                return s;
            }};
}

const std::vector<Field>& fields() {
    using C = ExperimentConfig;
    static const std::vector<Field> table = {
        choice_field<DatasetKind>("dataset", &C::dataset, {{"synthetic", DatasetKind::synthetic}, {"csv", DatasetKind::csv}}),
        count_field("classes", &C::classes),
        count_field("dim", &C::dim),
        count_field("train_per_class", &C::train_per_class),
        count_field("test_per_class", &C::test_per_class),
        real_field("spread", &C::spread),
        text_field("train_csv", &C::train_csv),
        text_field("test_csv", &C::test_csv),
        count_field("clients", &C::clients),
        real_field("fraction", &C::fraction),
        count_field("rounds", &C::rounds),
        real_field("beta", &C::beta),
        list_field("encoder_hidden", &C::encoder_hidden),
        count_field("feature_dim", &C::feature_dim),
        list_field("head_hidden", &C::head_hidden),
        count_field("embed_dim", &C::embed_dim),
        choice_field<ClassifierInput>("classifier_input", &C::classifier_input,
                                      {{"encoder", ClassifierInput::encoder}, {"head", ClassifierInput::head}}),
        count_field("local_epochs", &C::local_epochs),
        count_field("batch_size", &C::batch_size),
        real_field("lr", &C::lr),
        real_field("weight_decay", &C::weight_decay),
        real_field("kappa", &C::kappa),
        real_field("tau_l", &C::tau_l),
        choice_field<EdgePenalty>("edge_loss", &C::edge_loss,
                                  {{"square", EdgePenalty::square}, {"abs", EdgePenalty::absolute}}),
        count_field("max_relations", &C::max_relations),
        count_field("k", &C::k),
        real_field("r", &C::r),
        count_field("n_repeat", &C::n_repeat),
        real_field("lambda_u", &C::lambda_u),
        real_field("lambda_p", &C::lambda_p),
        real_field("alpha", &C::alpha),
        count_field("n_aug", &C::n_aug),
        real_field("tau_g", &C::tau_g),
        real_field("eta", &C::eta),
        count_field("server_epochs", &C::server_epochs),
        real_field("server_lr", &C::server_lr),
        count_field("server_batch", &C::server_batch),
        flag_field("acl_clamp", &C::acl_clamp),
        choice_field<FusionNorm>("fusion_norm", &C::fusion_norm,
                                 {{"softmax", FusionNorm::softmax}, {"minmax", FusionNorm::minmax}}),
        count_field("calibrate_every", &C::calibrate_every),
        choice_field<Method>("method", &C::method, {{"fedavg", Method::fedavg}, {"fedcspc", Method::fedcspc}}),
        flag_field("lrl", &C::lrl),
        choice_field<PrototypeMode>("prototypes", &C::prototypes,
                                    {{"cpm", PrototypeMode::clustered}, {"tpg", PrototypeMode::traditional}}),
        flag_field("pa", &C::pa),
        flag_field("ca", &C::ca),
        flag_field("kp", &C::kp),
        list_field("seeds", &C::seeds),
        flag_field("record_wall_time", &C::record_wall_time),
    };
    return table;
}

void require(bool ok, const char* key, const std::string& rule) {
    if (!ok) throw ConfigError("config key '" + std::string(key) + "' " + rule);
}

}  // namespace

const char* method_name(Method m) { return m == Method::fedavg ? "fedavg" : "fedcspc"; }

void ExperimentConfig::validate() const {
    if (dataset == DatasetKind::synthetic) {
        require(classes >= 2, "classes", "must be >= 2");
        require(dim >= 2, "dim", "must be >= 2");
        require(train_per_class >= 1, "train_per_class", "must be >= 1");
        require(test_per_class >= 1, "test_per_class", "must be >= 1");
        require(spread >= 0.0, "spread", "must be >= 0");
    } else {
        require(!train_csv.empty(), "train_csv", "is required when dataset = csv");
        require(!test_csv.empty(), "test_csv", "is required when dataset = csv");
    }
    require(clients >= 2, "clients", "must be >= 2");
    require(fraction > 0.0 && fraction <= 1.0, "fraction", "must lie in (0, 1]");
    require(rounds >= 1, "rounds", "must be >= 1");
    require(beta > 0.0, "beta", "must be > 0");
    for (auto h : encoder_hidden) require(h >= 1, "encoder_hidden", "entries must be >= 1");
    for (auto h : head_hidden) require(h >= 1, "head_hidden", "entries must be >= 1");
    require(feature_dim >= 1, "feature_dim", "must be >= 1");
    require(embed_dim >= 1, "embed_dim", "must be >= 1");
    require(batch_size >= 1, "batch_size", "must be >= 1");
    require(lr >= 0.0, "lr", "must be >= 0");
    require(weight_decay >= 0.0, "weight_decay", "must be >= 0");
    require(kappa >= 0.0, "kappa", "must be >= 0");
    require(tau_l > 0.0, "tau_l", "must be > 0");
    require(k >= 1, "k", "must be >= 1");
    require(r > 0.0 && r <= 1.0, "r", "must lie in (0, 1]");
    require(n_repeat >= 1, "n_repeat", "must be >= 1");
    require(lambda_u > 0.0, "lambda_u", "must be > 0");
    require(lambda_p >= 0.0 && lambda_p <= 1.0, "lambda_p", "must lie in [0, 1]");
    require(alpha >= 0.0, "alpha", "must be >= 0");
    require(tau_g > 0.0, "tau_g", "must be > 0");
    require(eta >= 0.0, "eta", "must be >= 0");
    require(server_lr >= 0.0, "server_lr", "must be >= 0");
    require(server_batch >= 1, "server_batch", "must be >= 1");
    require(calibrate_every >= 1, "calibrate_every", "must be >= 1");
    require(!seeds.empty(), "seeds", "must list at least one seed");
}

ModelConfig ExperimentConfig::model_config(std::size_t input_dim, std::size_t class_count) const {
    ModelConfig m;
    m.input_dim = input_dim;
    m.encoder_hidden = encoder_hidden;
    m.feature_dim = feature_dim;
    m.head_hidden = head_hidden;
    m.embed_dim = embed_dim;
    m.class_count = class_count;
    m.classifier_input = classifier_input;
    return m;
}

ClientHyper ExperimentConfig::client_hyper() const {
    ClientHyper hp;
    hp.epochs = local_epochs;
    hp.batch_size = batch_size;
    hp.lr = lr;
    hp.weight_decay = weight_decay;
    hp.kappa = kappa;
    hp.tau_l = tau_l;
    hp.align = use_lrl();
    hp.edge = edge_loss;
    hp.max_relations = max_relations;
    hp.prototype_mode = prototypes;
    hp.prototypes = {k, r, n_repeat};
    hp.emit_prototypes = uses_prototypes();
    return hp;
}

ServerHyper ExperimentConfig::server_hyper() const {
    ServerHyper hp;
    hp.eta = eta;
    hp.alpha = alpha;
    hp.tau_g = tau_g;
    hp.lambda_u = lambda_u;
    hp.n_aug = n_aug;
    hp.epochs = server_epochs;
    hp.lr = server_lr;
    hp.weight_decay = weight_decay;
    hp.batch_size = server_batch;
    hp.augment = use_pa();
    hp.calibrate = use_ca();
    hp.acl_clamp = acl_clamp;
    return hp;
}

void apply_setting(ExperimentConfig& config, std::string_view key, std::string_view value) {
    key = trim(key);
    for (const auto& f : fields()) {
        if (key == f.key) {
            f.set(config, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + std::string(key) + "'");
}

ExperimentConfig parse_config(std::istream& in) {
    ExperimentConfig config;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        auto t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        auto eq = t.find('=');
        if (eq == std::string_view::npos) throw ParseError("expected 'key = value'", line_no);
        try {
            apply_setting(config, t.substr(0, eq), t.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(std::string(e.what()) + " (line " + std::to_string(line_no) + ")");
        }
    }
    config.validate();
    return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    return parse_config(in);
}

void write_config(std::ostream& out, const ExperimentConfig& config) {
    for (const auto& f : fields()) out << f.key << " = " << f.get(config) << '\n';
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& f : fields()) keys.emplace_back(f.key);
    return keys;
}

}  // namespace fedcspc
