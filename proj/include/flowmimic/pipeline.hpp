#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowmimic/config.hpp"

namespace flowmimic {

/**
 * @brief Stage orchestration over a run directory.
 *
 * Every stage reads its inputs from, and writes its artifacts into, one run
 * directory, so any prefix of the pipeline can be re-run or swapped out by
 * hand. report.json carries only seed-determined quantities and is
 * byte-identical across same-seed runs; wall-clock timings and throughput
 * live in perf.json, which is expected to differ.
 */

class StageError : public std::runtime_error {
public:
    StageError(const std::string& stage, const std::string& cause)
        : std::runtime_error("stage " + stage + " failed: " + cause), stage(stage) {}
    std::string stage;
};

struct RunPaths {
    std::string root;
    std::string resolved_config;
    std::string benign_train, benign_eval, malicious_train, malicious_eval;
    std::string vocab;
    std::string encoder_prefix, detector_prefix, agent_prefix;
    std::string pretrain_curve, pretrain_report;
    std::string detector_eval;
    std::string train_log, train_report, maxq_curve;
    std::string adversarial, infer_log;
    std::string verdicts, report, perf, ablation_report;

    static RunPaths under(const std::string& root);
};

struct StepStats {
    double mean = 0.0;
    double p50 = 0.0;
    double p90 = 0.0;
    int max = 0;
};

struct EvalReport {
    int flows = 0;
    int evaded = 0;
    double asr = 0.0;
    StepStats steps;
    double bandwidth_kl = 0.0;
    double detector_f1 = 0.0;
    double detector_auc = 0.0;
    int train_episodes = 0;
    int64_t train_probes = 0;
    double xi_prime = 0.0;
    bool budget_exhausted = false;
    std::map<std::string, std::string> artifact_hashes;
};

// Stage entry points. Each validates its prerequisites and wraps any failure
// in a StageError naming the stage.
void stage_gen_data(const ExperimentConfig& cfg, const RunPaths& paths);
void stage_build_vocab(const ExperimentConfig& cfg, const RunPaths& paths);
void stage_pretrain(const ExperimentConfig& cfg, const RunPaths& paths);
void stage_train_detector(const ExperimentConfig& cfg, const RunPaths& paths);
void stage_attack_train(const ExperimentConfig& cfg, const RunPaths& paths);
void stage_attack_infer(const ExperimentConfig& cfg, const RunPaths& paths);
EvalReport stage_eval(const ExperimentConfig& cfg, const RunPaths& paths);

// Creates the run directory, echoes the resolved config, and runs every
// stage in order, timing each into perf.json.
EvalReport run_pipeline(const ExperimentConfig& cfg);

// Runs one named stage (as the CLI subcommands do), timed into perf.json.
EvalReport run_stage(const std::string& name, const ExperimentConfig& cfg);

enum class AblationMode { s1, s2_s, s2_f, full };

AblationMode ablation_mode_from_string(const std::string& s);
std::string to_string(AblationMode m);

// Mask filling used by the reduced pipelines. s2_s draws each masked slot
// uniformly between the segment's minimum and maximum feature value; s2_f
// writes the segment's mean value. Exposed for direct testing.
TokenPair ablation_fill(const TokenPair& pair, AblationMode mode, const Flow& segment,
                        const Vocabulary& vocab, uint64_t seed);

// Greedy rollout variant per mode: s1 picks positions uniformly at random
// and keeps the encoder fill; s2_s / s2_f keep the learned positions and
// replace the fill. full delegates to the standard rollout.
InferResult infer_ablation(AblationMode mode, const DiscreteSac& agent,
                           const EncoderModel& encoder, const Vocabulary& vocab, const Flow& flow,
                           const InferConfig& icfg, uint64_t seed);

// Re-runs inference and evaluation per mode on top of the already trained
// artifacts in the run directory; writes ablation.json.
std::map<std::string, EvalReport> run_ablation(const ExperimentConfig& cfg,
                                               const std::vector<AblationMode>& modes);

}  // namespace flowmimic
