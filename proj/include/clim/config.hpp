#pragma once

// Flat key=value run configuration: model + training + data paths. Unknown
// keys are rejected; the serialized form is embedded in checkpoints so eval
// and predict can rebuild the exact model.

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "clim/model.hpp"
#include "clim/train.hpp"

namespace clim {

struct RunConfig {
    std::string data_dir;
    std::string output_dir = "run";
    std::string train_split = "train";
    std::string valid_split = "valid";
    std::string test_split = "test";
    std::uint64_t seed = 1;
    ClimConfig model;
    TrainConfig train;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    }
}

inline long to_long(const std::string& key, const std::string& v) {
    try {
        std::size_t pos;
        long n = std::stol(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return n;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
    }
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("key '" + key + "': expected a boolean, got '" + v + "'");
}

}  // namespace config_detail

inline void apply_config_key(RunConfig& cfg, const std::string& key,
                             const std::string& value) {
    using namespace config_detail;
    if (key == "data_dir") cfg.data_dir = value;
    else if (key == "output_dir") cfg.output_dir = value;
    else if (key == "train_split") cfg.train_split = value;
    else if (key == "valid_split") cfg.valid_split = value;
    else if (key == "test_split") cfg.test_split = value;
    else if (key == "seed") { cfg.seed = std::uint64_t(to_long(key, value)); cfg.train.seed = cfg.seed; }
    else if (key == "encoder_variant") cfg.model.encoder_variant = parse_variant(value);
    else if (key == "hidden_size") cfg.model.hidden_size = to_long(key, value);
    else if (key == "embed_dim") cfg.model.embed_dim = to_long(key, value);
    else if (key == "head_count") cfg.model.head_count = to_long(key, value);
    else if (key == "ff_multiple") cfg.model.ff_multiple = to_long(key, value);
    else if (key == "attention_dim") cfg.model.attention_dim = to_long(key, value);
    else if (key == "attention_scoring") {
        if (value == "additive") cfg.model.attention_scoring = AttentionScoring::Additive;
        else if (value == "scaled_dot") cfg.model.attention_scoring = AttentionScoring::ScaledDot;
        else throw ConfigError("attention_scoring: want additive or scaled_dot, got '" + value + "'");
    }
    else if (key == "conv_width") cfg.model.conv_width = to_long(key, value);
    else if (key == "conv_channels") cfg.model.conv_channels = to_long(key, value);
    else if (key == "dropout") cfg.model.dropout = to_double(key, value);
    else if (key == "dpg_enabled") cfg.model.dpg_enabled = to_bool(key, value);
    else if (key == "epochs") cfg.train.epochs = to_long(key, value);
    else if (key == "batch_size") cfg.train.batch_size = to_long(key, value);
    else if (key == "learning_rate") cfg.train.learning_rate = to_double(key, value);
    else if (key == "embedding_freeze_epoch") cfg.train.embedding_freeze_epoch = to_long(key, value);
    else if (key == "lambda_slot") cfg.train.lambda_slot = to_double(key, value);
    else if (key == "lambda_intent") cfg.train.lambda_intent = to_double(key, value);
    else if (key == "schedule") cfg.train.schedule = parse_schedule(value);
    else if (key == "warmup_epochs") cfg.train.warmup_epochs = to_long(key, value);
    else if (key == "phase_epochs") cfg.train.phase_epochs = to_long(key, value);
    else if (key == "off_task_weight") cfg.train.off_task_weight = to_double(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
}

inline RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line;
    long lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::string t = config_detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected key=value, got '" + t + "'");
        apply_config_key(cfg, config_detail::trim(t.substr(0, eq)),
                         config_detail::trim(t.substr(eq + 1)));
    }
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_config_text(buf.str());
}

inline std::string serialize_config(const RunConfig& cfg) {
    std::ostringstream os;
    os << "data_dir = " << cfg.data_dir << "\n";
    os << "output_dir = " << cfg.output_dir << "\n";
    os << "train_split = " << cfg.train_split << "\n";
    os << "valid_split = " << cfg.valid_split << "\n";
    os << "test_split = " << cfg.test_split << "\n";
    os << "seed = " << cfg.seed << "\n";
    os << "encoder_variant = " << to_string(cfg.model.encoder_variant) << "\n";
    os << "hidden_size = " << cfg.model.hidden_size << "\n";
    os << "embed_dim = " << cfg.model.embed_dim << "\n";
    os << "head_count = " << cfg.model.head_count << "\n";
    os << "ff_multiple = " << cfg.model.ff_multiple << "\n";
    os << "attention_dim = " << cfg.model.attention_dim << "\n";
    os << "attention_scoring = "
       << (cfg.model.attention_scoring == AttentionScoring::Additive ? "additive"
                                                                     : "scaled_dot")
       << "\n";
    os << "conv_width = " << cfg.model.conv_width << "\n";
    os << "conv_channels = " << cfg.model.conv_channels << "\n";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", cfg.model.dropout);
    os << "dropout = " << buf << "\n";
    os << "dpg_enabled = " << (cfg.model.dpg_enabled ? "true" : "false") << "\n";
    os << "epochs = " << cfg.train.epochs << "\n";
    os << "batch_size = " << cfg.train.batch_size << "\n";
    std::snprintf(buf, sizeof buf, "%.17g", cfg.train.learning_rate);
    os << "learning_rate = " << buf << "\n";
    os << "embedding_freeze_epoch = " << cfg.train.embedding_freeze_epoch << "\n";
    std::snprintf(buf, sizeof buf, "%.17g", cfg.train.lambda_slot);
    os << "lambda_slot = " << buf << "\n";
    std::snprintf(buf, sizeof buf, "%.17g", cfg.train.lambda_intent);
    os << "lambda_intent = " << buf << "\n";
    os << "schedule = "
       << (cfg.train.schedule == Schedule::Joint ? "joint" : "continual") << "\n";
    os << "warmup_epochs = " << cfg.train.warmup_epochs << "\n";
    os << "phase_epochs = " << cfg.train.phase_epochs << "\n";
    std::snprintf(buf, sizeof buf, "%.17g", cfg.train.off_task_weight);
    os << "off_task_weight = " << buf << "\n";
    return os.str();
}

}  // namespace clim
