#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "flowmimic/agent.hpp"
#include "flowmimic/detectors.hpp"
#include "flowmimic/encoder.hpp"
#include "flowmimic/env.hpp"
#include "flowmimic/tokenizer.hpp"
#include "flowmimic/traffic.hpp"

namespace flowmimic {

/**
 * @brief One configuration document for the whole experiment lifecycle.
 *
 * A run is fully determined by (config, seed). The JSON form is strict:
 * unknown keys are rejected by name rather than ignored, so typos cannot
 * silently fall back to defaults. Fields that must agree across modules
 * (window length, vocabulary capacities) are derived once here and are not
 * part of the JSON surface.
 */

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// desk fits an ordinary CPU; paper mirrors the published model dimensions.
enum class Profile { desk, paper };

Profile profile_from_string(const std::string& s);
std::string to_string(Profile p);

struct DataConfig {
    int benign_train = 1200;
    int benign_eval = 400;
    int malicious_train = 160;
    int malicious_eval = 200;
    AttackKind attack = AttackKind::burst_flood;
};

struct DetectorSpec {
    std::string kind = "threshold";  // threshold | mlp | centroid
    double quantile = 0.99;          // threshold calibration on benign flows
    MlpTrainConfig mlp;
    CentroidTrainConfig centroid;

    // Oracle wrappers applied during agent training only; evaluation always
    // queries the unwrapped detector.
    double noise_p = 0.0;
    int64_t probe_budget = 0;  // 0 = unlimited
};

struct ExperimentConfig {
    uint64_t seed = 1;
    Profile profile = Profile::desk;
    std::string out_dir = "run";

    DataConfig data;
    VocabConfig vocab;
    EncoderConfig encoder;
    PretrainConfig pretrain;
    DetectorSpec detector;
    AgentConfig agent;
    EnvConfig env;
    TrainOptions train;

    // Re-derives the coupled fields (agent.n from encoder.n, both token
    // capacities from the vocabulary) and fans the master seed out to the
    // stage-local seeds. parse_config calls this; call it again after
    // mutating fields by hand.
    void sync_derived();

    void validate() const;
};

ExperimentConfig default_config(Profile p);

// Overlays a JSON document onto the profile defaults. The document's own
// "profile" key decides the base; every other key must name a known field.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config_file(const std::string& path);

// Canonical echo of a resolved config; parse_config(resolved_json(c)) == c.
std::string resolved_json(const ExperimentConfig& cfg);

uint64_t config_fingerprint(const ExperimentConfig& cfg);

}  // namespace flowmimic
