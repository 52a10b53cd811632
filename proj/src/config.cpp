#include "flowmimic/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "flowmimic/hash.hpp"
#include "json.hpp"

namespace flowmimic {

Profile profile_from_string(const std::string& s) {
    if (s == "desk") return Profile::desk;
    if (s == "paper") return Profile::paper;
    throw ConfigError("unknown profile: " + s);
}

std::string to_string(Profile p) {
    return p == Profile::desk ? "desk" : "paper";
}

namespace {

std::string fill_kind_to_string(FillMode::Kind k) {
    switch (k) {
        case FillMode::Kind::greedy: return "greedy";
        case FillMode::Kind::constrained: return "constrained";
        case FillMode::Kind::sampled: return "sampled";
    }
    throw ConfigError("unrepresentable fill kind");
}

FillMode::Kind fill_kind_from_string(const std::string& s) {
    if (s == "greedy") return FillMode::Kind::greedy;
    if (s == "constrained") return FillMode::Kind::constrained;
    if (s == "sampled") return FillMode::Kind::sampled;
    throw ConfigError("unknown fill kind: " + s);
}

// Object wrapper that tracks which keys were consumed so anything left over
// can be reported by its full dotted path.
class StrictView {
public:
    StrictView(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object())
            throw ConfigError((path_.empty() ? std::string("config") : path_) +
                              " must be a JSON object");
    }

    bool has(const char* key) const { return j_.contains(key); }

    const nlohmann::json& raw(const char* key) {
        seen_.insert(key);
        return j_.at(key);
    }

    std::string label(const std::string& key) const {
        return path_.empty() ? key : path_ + "." + key;
    }

    void get(const char* key, int& out) {
        if (!has(key)) return;
        const auto& v = raw(key);
        if (!v.is_number_integer()) throw ConfigError(label(key) + " must be an integer");
        out = v.get<int>();
    }

    void get(const char* key, int64_t& out) {
        if (!has(key)) return;
        const auto& v = raw(key);
        if (!v.is_number_integer()) throw ConfigError(label(key) + " must be an integer");
        out = v.get<int64_t>();
    }

    void get(const char* key, uint64_t& out) {
        if (!has(key)) return;
        const auto& v = raw(key);
        if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() &&
                                       v.get<int64_t>() < 0))
            throw ConfigError(label(key) + " must be a non-negative integer");
        out = v.get<uint64_t>();
    }

    void get(const char* key, double& out) {
        if (!has(key)) return;
        const auto& v = raw(key);
        if (!v.is_number()) throw ConfigError(label(key) + " must be a number");
        out = v.get<double>();
    }

    void get(const char* key, bool& out) {
        if (!has(key)) return;
        const auto& v = raw(key);
        if (!v.is_boolean()) throw ConfigError(label(key) + " must be a boolean");
        out = v.get<bool>();
    }

    void get(const char* key, std::string& out) {
        if (!has(key)) return;
        const auto& v = raw(key);
        if (!v.is_string()) throw ConfigError(label(key) + " must be a string");
        out = v.get<std::string>();
    }

    void finish() const {
        for (const auto& item : j_.items())
            if (!seen_.count(item.key()))
                throw ConfigError("unknown config key: " + label(item.key()));
    }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void overlay_data(StrictView& top, DataConfig& d) {
    if (!top.has("data")) return;
    StrictView v(top.raw("data"), "data");
    v.get("benign_train", d.benign_train);
    v.get("benign_eval", d.benign_eval);
    v.get("malicious_train", d.malicious_train);
    v.get("malicious_eval", d.malicious_eval);
    if (v.has("attack")) {
        std::string s;
        v.get("attack", s);
        try {
            d.attack = attack_kind_from_string(s);
        } catch (const std::exception&) {
            throw ConfigError("data.attack must be one of burst_flood, beacon (got " + s + ")");
        }
    }
    v.finish();
}

void overlay_vocab(StrictView& top, VocabConfig& c) {
    if (!top.has("vocab")) return;
    StrictView v(top.raw("vocab"), "vocab");
    v.get("ipd_value_bins", c.ipd_value_bins);
    v.get("log10_low", c.log10_low);
    v.get("log10_high", c.log10_high);
    v.get("mtu", c.mtu);
    v.get("size_capacity", c.size_capacity);
    v.finish();
}

void overlay_encoder(StrictView& top, EncoderConfig& c) {
    if (!top.has("encoder")) return;
    StrictView v(top.raw("encoder"), "encoder");
    v.get("n", c.n);
    v.get("d_k", c.d_k);
    v.get("n_layers", c.n_layers);
    v.get("attn_heads", c.attn_heads);
    v.get("d_ff", c.d_ff);
    v.finish();
}

void overlay_pretrain(StrictView& top, PretrainConfig& c) {
    if (!top.has("pretrain")) return;
    StrictView v(top.raw("pretrain"), "pretrain");
    v.get("steps", c.steps);
    v.get("batch_chunks", c.batch_chunks);
    v.get("lr", c.lr);
    v.finish();
}

void overlay_detector(StrictView& top, DetectorSpec& d) {
    if (!top.has("detector")) return;
    StrictView v(top.raw("detector"), "detector");
    v.get("kind", d.kind);
    v.get("quantile", d.quantile);
    v.get("noise_p", d.noise_p);
    v.get("probe_budget", d.probe_budget);
    if (v.has("mlp")) {
        StrictView m(v.raw("mlp"), "detector.mlp");
        m.get("epochs", d.mlp.epochs);
        m.get("batch", d.mlp.batch);
        m.get("hidden", d.mlp.hidden);
        m.get("lr", d.mlp.lr);
        m.get("val_fraction", d.mlp.val_fraction);
        m.finish();
    }
    if (v.has("centroid")) {
        StrictView m(v.raw("centroid"), "detector.centroid");
        m.get("k", d.centroid.k);
        m.get("max_iters", d.centroid.max_iters);
        m.get("calibration_quantile", d.centroid.calibration_quantile);
        m.get("windowed", d.centroid.windowed);
        m.finish();
    }
    v.finish();
}

void overlay_agent(StrictView& top, AgentConfig& a) {
    if (!top.has("agent")) return;
    StrictView v(top.raw("agent"), "agent");
    v.get("emb_dim", a.emb_dim);
    v.get("hidden", a.hidden);
    v.get("lr", a.lr);
    v.get("alpha_lr", a.alpha_lr);
    v.get("alpha_init", a.alpha_init);
    v.get("target_entropy", a.target_entropy);
    v.get("eta", a.eta);
    v.get("soft_lambda", a.soft_lambda);
    v.get("buffer_capacity", a.buffer_capacity);
    v.get("min_buffer", a.min_buffer);
    v.get("batch", a.batch);
    if (v.has("xi_prime_override")) {
        const auto& x = v.raw("xi_prime_override");
        if (x.is_null())
            a.xi_prime_override = std::numeric_limits<double>::quiet_NaN();
        else if (x.is_number())
            a.xi_prime_override = x.get<double>();
        else
            throw ConfigError("agent.xi_prime_override must be a number or null");
    }
    v.finish();
}

void overlay_env(StrictView& top, EnvConfig& e) {
    if (!top.has("env")) return;
    StrictView v(top.raw("env"), "env");
    v.get("beta", e.beta);
    v.get("gamma", e.gamma);
    v.get("tau", e.tau);
    v.get("xi", e.xi);
    if (v.has("effect")) {
        std::string s;
        v.get("effect", s);
        try {
            e.effect = effect_kind_from_string(s);
        } catch (const std::exception&) {
            throw ConfigError("env.effect must be one of rate, none (got " + s + ")");
        }
    }
    if (v.has("fill")) {
        StrictView f(v.raw("fill"), "env.fill");
        if (f.has("kind")) {
            std::string s;
            f.get("kind", s);
            e.fill.kind = fill_kind_from_string(s);
        }
        f.get("size_lo", e.fill.size_lo);
        f.get("size_hi", e.fill.size_hi);
        f.get("ipd_lo", e.fill.ipd_lo);
        f.get("ipd_hi", e.fill.ipd_hi);
        f.get("temperature", e.fill.temperature);
        f.finish();
    }
    v.finish();
}

void overlay_train(StrictView& top, TrainOptions& t) {
    if (!top.has("train")) return;
    StrictView v(top.raw("train"), "train");
    v.get("episodes", t.episodes);
    v.get("early_stop_window", t.early_stop_window);
    v.get("early_stop_rate", t.early_stop_rate);
    v.finish();
}

}  // namespace

void ExperimentConfig::sync_derived() {
    encoder.s_size = vocab.size_capacity;
    encoder.t_size = vocab.ipd_value_bins + 3;
    agent.n = encoder.n;
    agent.s_size = encoder.s_size;
    agent.t_size = encoder.t_size;
    pretrain.seed = seed ^ 0x9e3779b97f4a7c15ull;
    detector.mlp.seed = seed ^ 0xc2b2ae3d27d4eb4full;
    detector.centroid.seed = seed ^ 0x165667b19e3779f9ull;
    agent.seed = seed ^ 0x27d4eb2f165667c5ull;
    train.seed = seed ^ 0x94d049bb133111ebull;
}

void ExperimentConfig::validate() const {
    try {
        encoder.validate();
        agent.validate();
        env.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
    if (data.benign_train < 1) throw ConfigError("data.benign_train must be at least 1");
    if (data.benign_eval < 1) throw ConfigError("data.benign_eval must be at least 1");
    if (data.malicious_train < 1) throw ConfigError("data.malicious_train must be at least 1");
    if (data.malicious_eval < 1) throw ConfigError("data.malicious_eval must be at least 1");
    if (vocab.ipd_value_bins < 2) throw ConfigError("vocab.ipd_value_bins must be at least 2");
    if (!(vocab.log10_low < vocab.log10_high))
        throw ConfigError("vocab.log10_low must be below vocab.log10_high");
    if (vocab.mtu < 1) throw ConfigError("vocab.mtu must be at least 1");
    if (vocab.size_capacity < vocab.mtu + 4)
        throw ConfigError("vocab.size_capacity must leave room for the special tokens");
    if (pretrain.steps < 1) throw ConfigError("pretrain.steps must be at least 1");
    if (pretrain.batch_chunks < 1) throw ConfigError("pretrain.batch_chunks must be at least 1");
    if (!(pretrain.lr > 0)) throw ConfigError("pretrain.lr must be positive");
    if (detector.kind != "threshold" && detector.kind != "mlp" && detector.kind != "centroid")
        throw ConfigError("unknown detector kind: " + detector.kind);
    if (!(detector.quantile > 0.0 && detector.quantile <= 1.0))
        throw ConfigError("detector.quantile must be in (0, 1]");
    if (!(detector.noise_p >= 0.0 && detector.noise_p < 1.0))
        throw ConfigError("detector.noise_p must be in [0, 1)");
    if (detector.probe_budget < 0) throw ConfigError("detector.probe_budget must be non-negative");
    if (detector.mlp.epochs < 1) throw ConfigError("detector.mlp.epochs must be at least 1");
    if (detector.mlp.batch < 1) throw ConfigError("detector.mlp.batch must be at least 1");
    if (detector.mlp.hidden < 1) throw ConfigError("detector.mlp.hidden must be at least 1");
    if (!(detector.mlp.lr > 0)) throw ConfigError("detector.mlp.lr must be positive");
    if (!(detector.mlp.val_fraction >= 0.0 && detector.mlp.val_fraction < 1.0))
        throw ConfigError("detector.mlp.val_fraction must be in [0, 1)");
    if (detector.centroid.k < 1) throw ConfigError("detector.centroid.k must be at least 1");
    if (detector.centroid.max_iters < 1)
        throw ConfigError("detector.centroid.max_iters must be at least 1");
    if (!(detector.centroid.calibration_quantile > 0.0 &&
          detector.centroid.calibration_quantile <= 1.0))
        throw ConfigError("detector.centroid.calibration_quantile must be in (0, 1]");
    if (train.episodes < 1) throw ConfigError("train.episodes must be at least 1");
    if (train.early_stop_window < 1) throw ConfigError("train.early_stop_window must be at least 1");
    if (agent.n != encoder.n || agent.s_size != encoder.s_size || agent.t_size != encoder.t_size)
        throw ConfigError("agent and encoder dimensions diverged; call sync_derived");
}

ExperimentConfig default_config(Profile p) {
    ExperimentConfig cfg;
    cfg.profile = p;
    if (p == Profile::paper) {
        cfg.encoder.n = 512;
        cfg.encoder.d_k = 128;
        cfg.encoder.n_layers = 6;
        cfg.encoder.attn_heads = 8;
        cfg.encoder.d_ff = 512;
    }
    cfg.sync_derived();
    return cfg;
}

ExperimentConfig parse_config(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");

    Profile p = Profile::desk;
    if (j.contains("profile")) {
        if (!j["profile"].is_string()) throw ConfigError("profile must be a string");
        p = profile_from_string(j["profile"].get<std::string>());
    }
    ExperimentConfig cfg = default_config(p);

    StrictView top(j, "");
    if (top.has("profile")) (void)top.raw("profile");
    top.get("seed", cfg.seed);
    top.get("out_dir", cfg.out_dir);
    overlay_data(top, cfg.data);
    overlay_vocab(top, cfg.vocab);
    overlay_encoder(top, cfg.encoder);
    overlay_pretrain(top, cfg.pretrain);
    overlay_detector(top, cfg.detector);
    overlay_agent(top, cfg.agent);
    overlay_env(top, cfg.env);
    overlay_train(top, cfg.train);
    top.finish();

    cfg.sync_derived();
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::string resolved_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["profile"] = to_string(c.profile);
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    j["data"] = {{"benign_train", c.data.benign_train},
                 {"benign_eval", c.data.benign_eval},
                 {"malicious_train", c.data.malicious_train},
                 {"malicious_eval", c.data.malicious_eval},
                 {"attack", to_string(c.data.attack)}};
    j["vocab"] = {{"ipd_value_bins", c.vocab.ipd_value_bins},
                  {"log10_low", c.vocab.log10_low},
                  {"log10_high", c.vocab.log10_high},
                  {"mtu", c.vocab.mtu},
                  {"size_capacity", c.vocab.size_capacity}};
    j["encoder"] = {{"n", c.encoder.n},
                    {"d_k", c.encoder.d_k},
                    {"n_layers", c.encoder.n_layers},
                    {"attn_heads", c.encoder.attn_heads},
                    {"d_ff", c.encoder.d_ff}};
    j["pretrain"] = {{"steps", c.pretrain.steps},
                     {"batch_chunks", c.pretrain.batch_chunks},
                     {"lr", c.pretrain.lr}};
    j["detector"] = {{"kind", c.detector.kind},
                     {"quantile", c.detector.quantile},
                     {"noise_p", c.detector.noise_p},
                     {"probe_budget", c.detector.probe_budget},
                     {"mlp",
                      {{"epochs", c.detector.mlp.epochs},
                       {"batch", c.detector.mlp.batch},
                       {"hidden", c.detector.mlp.hidden},
                       {"lr", c.detector.mlp.lr},
                       {"val_fraction", c.detector.mlp.val_fraction}}},
                     {"centroid",
                      {{"k", c.detector.centroid.k},
                       {"max_iters", c.detector.centroid.max_iters},
                       {"calibration_quantile", c.detector.centroid.calibration_quantile},
                       {"windowed", c.detector.centroid.windowed}}}};
    j["agent"] = {{"emb_dim", c.agent.emb_dim},
                  {"hidden", c.agent.hidden},
                  {"lr", c.agent.lr},
                  {"alpha_lr", c.agent.alpha_lr},
                  {"alpha_init", c.agent.alpha_init},
                  {"target_entropy", c.agent.target_entropy},
                  {"eta", c.agent.eta},
                  {"soft_lambda", c.agent.soft_lambda},
                  {"buffer_capacity", c.agent.buffer_capacity},
                  {"min_buffer", c.agent.min_buffer},
                  {"batch", c.agent.batch}};
    if (std::isfinite(c.agent.xi_prime_override))
        j["agent"]["xi_prime_override"] = c.agent.xi_prime_override;
    else
        j["agent"]["xi_prime_override"] = nullptr;
    j["env"] = {{"beta", c.env.beta},
                {"gamma", c.env.gamma},
                {"tau", c.env.tau},
                {"xi", c.env.xi},
                {"effect", to_string(c.env.effect)},
                {"fill",
                 {{"kind", fill_kind_to_string(c.env.fill.kind)},
                  {"size_lo", c.env.fill.size_lo},
                  {"size_hi", c.env.fill.size_hi},
                  {"ipd_lo", c.env.fill.ipd_lo},
                  {"ipd_hi", c.env.fill.ipd_hi},
                  {"temperature", c.env.fill.temperature}}}};
    j["train"] = {{"episodes", c.train.episodes},
                  {"early_stop_window", c.train.early_stop_window},
                  {"early_stop_rate", c.train.early_stop_rate}};
    return j.dump(2) + "\n";
}

uint64_t config_fingerprint(const ExperimentConfig& cfg) {
    // The run directory is a deployment detail; two runs of one experiment
    // into different directories must fingerprint identically.
    ExperimentConfig keyed = cfg;
    keyed.out_dir = ".";
    return fnv1a64(resolved_json(keyed));
}

}  // namespace flowmimic
