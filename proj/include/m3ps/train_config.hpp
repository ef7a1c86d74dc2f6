#pragma once

#include "m3ps/config.hpp"
#include "m3ps/datamodel.hpp"
#include "m3ps/objectives.hpp"
#include "m3ps/synth.hpp"

#include "json.hpp"

#include <fstream>
#include <sstream>
#include <string>

namespace m3ps {

/// Everything needed to reproduce a training run. Serialized into every checkpoint.
struct TrainConfig {
    std::string preset = "desk";
    // model shape (filled from the preset, individually overridable)
    int d_txt = 64;
    int d_img = 64;
    int text_layers = 2;
    int text_heads = 4;
    int img_layers = 2;
    int img_heads = 4;
    int dec_layers = 2;
    int dec_heads = 4;
    int fusion_heads = 4;
    int ffn_mult = 2;
    int max_text_len = 400;
    int max_regions = 36;
    int max_summary_len = 80;
    bool text_layer_norm = true;
    bool fusion_layer_norm = false;

    // optimization
    int batch_size = 16;
    double learning_rate = 1e-3;
    std::string schedule = "cosine";
    int steps = 500;
    int warmup_steps = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 0.0;
    double dropout = 0.1;
    std::uint64_t seed = 1;

    // objective
    double lambda1 = 0.8;
    double lambda2 = 0.05;
    double lambda3 = 0.3;
    double mask_rate = 0.15;
    double tau_init = 0.07;
    bool saturate_gate = false;

    // data
    std::string tokenizer = "word";
    std::string category;
    bool mix_categories = false;
    double val_fraction = 0.0;
    int eval_every = 0;
    bool allow_large = false;

    TaskWeights weights() const { return TaskWeights{lambda1, lambda2, lambda3}; }
    void set_weights(const TaskWeights& w) {
        lambda1 = w.lambda1;
        lambda2 = w.lambda2;
        lambda3 = w.lambda3;
    }
    TokenizerMode tokenizer_mode() const { return tokenizer_mode_from_string(tokenizer); }

    void apply_preset(const std::string& name) {
        const ModelDims d = dims_preset(name);
        preset = name;
        d_txt = d.d_txt;
        d_img = d.d_img;
        text_layers = d.text_layers;
        text_heads = d.text_heads;
        img_layers = d.img_layers;
        img_heads = d.img_heads;
        dec_layers = d.dec_layers;
        dec_heads = d.dec_heads;
        fusion_heads = d.fusion_heads;
        ffn_mult = d.ffn_mult;
        if (name == "paper") learning_rate = 3e-5;
    }

    /// Model shape for a corpus with the given vocabulary and label sizes.
    ModelDims dims(int vocab_size, int k_cls, int n_attr) const {
        ModelDims d;
        d.vocab_size = vocab_size;
        d.d_txt = d_txt;
        d.d_img = d_img;
        d.text_layers = text_layers;
        d.text_heads = text_heads;
        d.img_layers = img_layers;
        d.img_heads = img_heads;
        d.dec_layers = dec_layers;
        d.dec_heads = dec_heads;
        d.fusion_heads = fusion_heads;
        d.ffn_mult = ffn_mult;
        d.max_text_len = max_text_len;
        d.max_regions = max_regions;
        d.max_summary_len = max_summary_len;
        d.k_cls = k_cls;
        d.n_attr = n_attr;
        d.text_layer_norm = text_layer_norm;
        d.fusion_layer_norm = fusion_layer_norm;
        d.dropout = dropout;
        return d;
    }

    Limits limits() const { return Limits{max_text_len, max_regions, tokenizer_mode()}; }

    void validate() const {
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
        if (steps < 1) throw ConfigError("steps must be >= 1");
        if (warmup_steps < 0 || warmup_steps >= steps) throw ConfigError("warmup_steps must be in [0, steps)");
        if (schedule != "cosine" && schedule != "constant") throw ConfigError("schedule must be cosine|constant");
        if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) throw ConfigError("mask_rate must be in [0,1]");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0,1)");
        if (!(tau_init > 0.0)) throw ConfigError("tau_init must be > 0");
        if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in [0,1)");
        weights().validate();
        (void)tokenizer_mode();
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"preset", c.preset},
            {"d_txt", c.d_txt},
            {"d_img", c.d_img},
            {"text_layers", c.text_layers},
            {"text_heads", c.text_heads},
            {"img_layers", c.img_layers},
            {"img_heads", c.img_heads},
            {"dec_layers", c.dec_layers},
            {"dec_heads", c.dec_heads},
            {"fusion_heads", c.fusion_heads},
            {"ffn_mult", c.ffn_mult},
            {"max_text_len", c.max_text_len},
            {"max_regions", c.max_regions},
            {"max_summary_len", c.max_summary_len},
            {"text_layer_norm", c.text_layer_norm},
            {"fusion_layer_norm", c.fusion_layer_norm},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"schedule", c.schedule},
            {"steps", c.steps},
            {"warmup_steps", c.warmup_steps},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps},
            {"grad_clip", c.grad_clip},
            {"dropout", c.dropout},
            {"seed", c.seed},
            {"lambda1", c.lambda1},
            {"lambda2", c.lambda2},
            {"lambda3", c.lambda3},
            {"mask_rate", c.mask_rate},
            {"tau_init", c.tau_init},
            {"saturate_gate", c.saturate_gate},
            {"tokenizer", c.tokenizer},
            {"category", c.category},
            {"mix_categories", c.mix_categories},
            {"val_fraction", c.val_fraction},
            {"eval_every", c.eval_every},
            {"allow_large", c.allow_large}};
}

/// Reads known keys from `j`; unknown keys are an error, missing keys keep their current value.
inline void update_from_json(TrainConfig& c, const nlohmann::json& j) {
    if (auto it = j.find("preset"); it != j.end()) c.apply_preset(it->get<std::string>());
    const nlohmann::json known = to_json(c);
    for (const auto& [key, value] : j.items())
        if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    auto get = [&](const char* key, auto& field) {
        if (auto it = j.find(key); it != j.end()) it->get_to(field);
    };
    get("d_txt", c.d_txt);
    get("d_img", c.d_img);
    get("text_layers", c.text_layers);
    get("text_heads", c.text_heads);
    get("img_layers", c.img_layers);
    get("img_heads", c.img_heads);
    get("dec_layers", c.dec_layers);
    get("dec_heads", c.dec_heads);
    get("fusion_heads", c.fusion_heads);
    get("ffn_mult", c.ffn_mult);
    get("max_text_len", c.max_text_len);
    get("max_regions", c.max_regions);
    get("max_summary_len", c.max_summary_len);
    get("text_layer_norm", c.text_layer_norm);
    get("fusion_layer_norm", c.fusion_layer_norm);
    get("batch_size", c.batch_size);
    get("learning_rate", c.learning_rate);
    get("schedule", c.schedule);
    get("steps", c.steps);
    get("warmup_steps", c.warmup_steps);
    get("adam_beta1", c.adam_beta1);
    get("adam_beta2", c.adam_beta2);
    get("adam_eps", c.adam_eps);
    get("grad_clip", c.grad_clip);
    get("dropout", c.dropout);
    get("seed", c.seed);
    get("lambda1", c.lambda1);
    get("lambda2", c.lambda2);
    get("lambda3", c.lambda3);
    get("mask_rate", c.mask_rate);
    get("tau_init", c.tau_init);
    get("saturate_gate", c.saturate_gate);
    get("tokenizer", c.tokenizer);
    get("category", c.category);
    get("mix_categories", c.mix_categories);
    get("val_fraction", c.val_fraction);
    get("eval_every", c.eval_every);
    get("allow_large", c.allow_large);
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    update_from_json(c, j);
    return c;
}

/// Converts a `key=value` string to the JSON type of the key's current value.
inline nlohmann::json typed_value(const nlohmann::json& current, const std::string& key, const std::string& raw) {
    try {
        if (current.is_boolean()) {
            if (raw == "true" || raw == "1") return true;
            if (raw == "false" || raw == "0") return false;
            throw ConfigError("expected true|false");
        }
        if (current.is_number_unsigned()) return std::stoull(raw);
        if (current.is_number_integer()) return std::stoll(raw);
        if (current.is_number_float()) return std::stod(raw);
        return raw;
    } catch (const std::logic_error&) {
        throw ConfigError("bad value for '" + key + "': " + raw);
    }
}

/// Flat `key = value` lines; `#` starts a comment.
inline TrainConfig parse_key_value_config(std::istream& in, TrainConfig base = {}) {
    nlohmann::json updates = nlohmann::json::object();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const auto eq = line.find('=');
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string();
            const auto e = s.find_last_not_of(" \t\r");
            return s.substr(b, e - b + 1);
        };
        if (trim(line).empty()) continue;
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "preset") {
            base.apply_preset(value);
            continue;
        }
        const nlohmann::json current = to_json(base);
        if (!current.contains(key)) throw ConfigError("unknown config key '" + key + "'");
        updates[key] = typed_value(current.at(key), key, value);
    }
    update_from_json(base, updates);
    return base;
}

/// Loads `.json` files as structured documents and anything else as key=value.
inline TrainConfig load_train_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot read " + path);
    if (path.size() >= 5 && path.substr(path.size() - 5) == ".json") return train_config_from_json(nlohmann::json::parse(f));
    return parse_key_value_config(f);
}

inline std::string to_key_value(const TrainConfig& c) {
    std::ostringstream os;
    const nlohmann::json j = to_json(c);
    for (const auto& [k, v] : j.items()) os << k << " = " << (v.is_string() ? v.get<std::string>() : v.dump()) << '\n';
    return os.str();
}

inline nlohmann::json to_json(const ModelDims& d) {
    return {{"vocab_size", d.vocab_size},     {"d_txt", d.d_txt},
            {"d_img", d.d_img},               {"text_layers", d.text_layers},
            {"text_heads", d.text_heads},     {"img_layers", d.img_layers},
            {"img_heads", d.img_heads},       {"dec_layers", d.dec_layers},
            {"dec_heads", d.dec_heads},       {"fusion_heads", d.fusion_heads},
            {"ffn_mult", d.ffn_mult},         {"max_text_len", d.max_text_len},
            {"max_regions", d.max_regions},   {"max_summary_len", d.max_summary_len},
            {"k_cls", d.k_cls},               {"n_attr", d.n_attr},
            {"d_proj", d.d_proj},             {"text_layer_norm", d.text_layer_norm},
            {"fusion_layer_norm", d.fusion_layer_norm}, {"dropout", d.dropout}};
}

inline ModelDims model_dims_from_json(const nlohmann::json& j) {
    ModelDims d;
    j.at("vocab_size").get_to(d.vocab_size);
    j.at("d_txt").get_to(d.d_txt);
    j.at("d_img").get_to(d.d_img);
    j.at("text_layers").get_to(d.text_layers);
    j.at("text_heads").get_to(d.text_heads);
    j.at("img_layers").get_to(d.img_layers);
    j.at("img_heads").get_to(d.img_heads);
    j.at("dec_layers").get_to(d.dec_layers);
    j.at("dec_heads").get_to(d.dec_heads);
    j.at("fusion_heads").get_to(d.fusion_heads);
    j.at("ffn_mult").get_to(d.ffn_mult);
    j.at("max_text_len").get_to(d.max_text_len);
    j.at("max_regions").get_to(d.max_regions);
    j.at("max_summary_len").get_to(d.max_summary_len);
    j.at("k_cls").get_to(d.k_cls);
    j.at("n_attr").get_to(d.n_attr);
    j.at("d_proj").get_to(d.d_proj);
    j.at("text_layer_norm").get_to(d.text_layer_norm);
    j.at("fusion_layer_norm").get_to(d.fusion_layer_norm);
    j.at("dropout").get_to(d.dropout);
    return d;
}

inline nlohmann::json to_json(const SynthSpec& s) {
    return {{"n_concepts", s.n_concepts},
            {"n_samples", s.n_samples},
            {"vocab_size", s.vocab_size},
            {"d_img", s.d_img},
            {"visual_only_concepts", s.visual_only_concepts},
            {"noise_std", s.noise_std},
            {"seed", s.seed},
            {"concept_prob", s.concept_prob},
            {"template_len", s.template_len},
            {"noise_tokens_min", s.noise_tokens_min},
            {"noise_tokens_max", s.noise_tokens_max}};
}

}  // namespace m3ps
