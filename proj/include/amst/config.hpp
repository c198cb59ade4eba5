#pragma once

#include "amst/trainer.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <fstream>
#include <string>
#include <vector>

namespace amst {

// Flat key = value configuration. Precedence: CLI override > config file >
// built-in default. Unknown keys are errors, not warnings.

namespace detail {

struct ConfigField {
    std::string key;
    std::function<void(TrainConfig&, const std::string&)> set;
    std::function<std::string(const TrainConfig&)> get;
};

inline long parse_long(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long out = std::stol(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        fail("config", "key '" + key + "': expected integer, got '" + v + "'");
    }
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        fail("config", "key '" + key + "': expected number, got '" + v + "'");
    }
}

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = [] {
        std::vector<ConfigField> f;
        auto add_u64 = [&f](const std::string& key, std::uint64_t TrainConfig::* m) {
            f.push_back({key,
                         [key, m](TrainConfig& c, const std::string& v) {
                             c.*m = static_cast<std::uint64_t>(parse_long(key, v));
                         },
                         [m](const TrainConfig& c) { return std::to_string(c.*m); }});
        };
        auto add_int = [&f](const std::string& key, int TrainConfig::* m) {
            f.push_back({key,
                         [key, m](TrainConfig& c, const std::string& v) {
                             c.*m = static_cast<int>(parse_long(key, v));
                         },
                         [m](const TrainConfig& c) { return std::to_string(c.*m); }});
        };
        auto add_long = [&f](const std::string& key, long TrainConfig::* m) {
            f.push_back({key,
                         [key, m](TrainConfig& c, const std::string& v) { c.*m = parse_long(key, v); },
                         [m](const TrainConfig& c) { return std::to_string(c.*m); }});
        };
        auto add_dbl = [&f](const std::string& key, double TrainConfig::* m) {
            f.push_back({key,
                         [key, m](TrainConfig& c, const std::string& v) { c.*m = parse_double(key, v); },
                         [m](const TrainConfig& c) { return format_double(c.*m); }});
        };
        auto add_str = [&f](const std::string& key, std::string TrainConfig::* m) {
            f.push_back({key, [m](TrainConfig& c, const std::string& v) { c.*m = v; },
                         [m](const TrainConfig& c) { return c.*m; }});
        };
        auto add_w = [&f](const std::string& key, double LossWeights::* m) {
            f.push_back({key,
                         [key, m](TrainConfig& c, const std::string& v) {
                             c.weights.*m = parse_double(key, v);
                         },
                         [m](const TrainConfig& c) { return format_double(c.weights.*m); }});
        };

        add_u64("seed", &TrainConfig::seed);
        add_str("out_dir", &TrainConfig::out_dir);
        add_str("mode", &TrainConfig::mode);
        add_str("grammar_file", &TrainConfig::grammar_file);
        add_long("synthetic_train", &TrainConfig::synthetic_train);
        add_long("synthetic_valid", &TrainConfig::synthetic_valid);
        add_long("synthetic_test", &TrainConfig::synthetic_test);
        add_str("train_file", &TrainConfig::train_file);
        add_str("valid_file", &TrainConfig::valid_file);
        add_str("test_file", &TrainConfig::test_file);
        add_str("data_format", &TrainConfig::data_format);
        add_int("min_count", &TrainConfig::min_count);
        add_int("mask_embed_dim", &TrainConfig::mask_embed_dim);
        add_int("mask_hidden", &TrainConfig::mask_hidden);
        add_int("mask_att_dim", &TrainConfig::mask_att_dim);
        add_dbl("tau", &TrainConfig::tau);
        add_int("mask_pretrain_epochs", &TrainConfig::mask_pretrain_epochs);
        add_int("clf_pretrain_epochs", &TrainConfig::clf_pretrain_epochs);
        add_int("clf_c_pretrain_epochs", &TrainConfig::clf_c_pretrain_epochs);
        add_int("adv_epochs", &TrainConfig::adv_epochs);
        add_int("adv_warmup_steps", &TrainConfig::adv_warmup_steps);
        add_dbl("mask_lr", &TrainConfig::mask_lr);
        add_dbl("disc_lr", &TrainConfig::disc_lr);
        add_int("mask_batch", &TrainConfig::mask_batch);
        add_int("mlm_dim", &TrainConfig::mlm_dim);
        add_int("mlm_layers", &TrainConfig::mlm_layers);
        add_int("mlm_heads", &TrainConfig::mlm_heads);
        add_int("mlm_ff", &TrainConfig::mlm_ff);
        add_int("max_len", &TrainConfig::max_len);
        add_int("stage1_epochs", &TrainConfig::stage1_epochs);
        add_int("stage2_epochs", &TrainConfig::stage2_epochs);
        add_int("stage3_epochs", &TrainConfig::stage3_epochs);
        add_dbl("mlm_lr", &TrainConfig::mlm_lr);
        add_int("mlm_batch", &TrainConfig::mlm_batch);
        add_int("cnn_embed_dim", &TrainConfig::cnn_embed_dim);
        add_int("cnn_channels", &TrainConfig::cnn_channels);
        add_dbl("cnn_lr", &TrainConfig::cnn_lr);
        add_int("disc_epochs", &TrainConfig::disc_epochs);
        add_w("lambda1", &LossWeights::lambda1);
        add_w("lambda2", &LossWeights::lambda2);
        add_w("lambda3", &LossWeights::lambda3);
        add_w("lambda4", &LossWeights::lambda4);
        add_w("theta1", &LossWeights::theta1);
        add_w("theta2", &LossWeights::theta2);
        add_w("theta3", &LossWeights::theta3);
        add_w("theta4", &LossWeights::theta4);
        return f;
    }();
    return fields;
}

inline std::string trim(const std::string& s) {
    std::size_t a = 0;
    std::size_t b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

}  // namespace detail

inline void set_config_key(TrainConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& f : detail::config_fields()) {
        if (f.key == key) {
            f.set(cfg, value);
            return;
        }
    }
    fail("config", "unknown key '" + key + "'");
}

inline void load_config_file(TrainConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("io", "cannot open config file: " + path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        if (detail::trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            fail("config", path + ":" + std::to_string(line_no) + ": expected key = value");
        }
        set_config_key(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
}

// "key=value" pairs from the command line; applied after the file.
inline void apply_overrides(TrainConfig& cfg, const std::vector<std::string>& overrides) {
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) fail("config", "override must be key=value: '" + o + "'");
        set_config_key(cfg, detail::trim(o.substr(0, eq)), detail::trim(o.substr(eq + 1)));
    }
}

// Canonical text rendering of every field; basis of the config digest that
// evaluation reports embed.
inline std::string canonical_config_text(const TrainConfig& cfg) {
    std::string out;
    for (const auto& f : detail::config_fields()) {
        out += f.key;
        out += " = ";
        out += f.get(cfg);
        out += '\n';
    }
    return out;
}

inline std::string config_digest(const TrainConfig& cfg) {
    return hex64(fnv1a(canonical_config_text(cfg)));
}

inline void save_config(const TrainConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("io", "cannot write config file: " + path);
    out << canonical_config_text(cfg);
}

}  // namespace amst
