#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowmimic/tensor.hpp"
#include "flowmimic/traffic.hpp"

namespace flowmimic {

using nn::Tensor;

class DetectorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Raised by the budget wrapper when a query would exceed the probe budget.
// The offending query is not counted and never reaches the wrapped detector.
class BudgetExhausted : public DetectorError {
public:
    using DetectorError::DetectorError;
};

struct OracleVerdict {
    int evaded_non_chaff = 0;
    bool flow_passed = false;
};

// Hard-label black-box interface. The attacker side sees query() only; the
// score() hook exists for offline evaluation (AUC) and is never used during
// an attack.
class DetectorOracle {
public:
    virtual ~DetectorOracle() = default;

    OracleVerdict query(const Flow& flow) {
        OracleVerdict v = evaluate(flow);
        probes_.fetch_add(1, std::memory_order_relaxed);
        return v;
    }

    int64_t probe_count() const { return probes_.load(std::memory_order_relaxed); }

    virtual std::string kind() const = 0;
    virtual double score(const Flow& flow) const = 0;  // higher = more suspicious
    virtual std::map<std::string, double> info() const { return {}; }

protected:
    virtual OracleVerdict evaluate(const Flow& flow) = 0;

private:
    std::atomic<int64_t> probes_{0};
};

// 12-entry statistical descriptor: mean/std/min/max of sizes and gaps, then
// packet count, duration, rate, and size entropy.
constexpr int kFeatureDim = 12;
std::array<double, kFeatureDim> flow_features(const Flow& flow);

class ThresholdDetector : public DetectorOracle {
public:
    ThresholdDetector(double ipd_floor, double rate_ceiling)
        : ipd_floor_(ipd_floor), rate_ceiling_(rate_ceiling) {}

    std::string kind() const override { return "threshold"; }
    double score(const Flow& flow) const override;
    std::map<std::string, double> info() const override {
        return {{"ipd_floor", ipd_floor_}, {"rate_ceiling", rate_ceiling_}};
    }

protected:
    OracleVerdict evaluate(const Flow& flow) override;

private:
    double ipd_floor_;
    double rate_ceiling_;
};

class MlpDetector : public DetectorOracle {
public:
    MlpDetector(Tensor w1, Tensor b1, Tensor w2, Tensor b2, Tensor mu, Tensor sigma,
                double threshold);

    std::string kind() const override { return "mlp"; }
    double score(const Flow& flow) const override;  // malicious-class probability
    std::map<std::string, double> info() const override { return {{"threshold", threshold_}}; }

    const Tensor& weights1() const { return w1_; }
    double threshold() const { return threshold_; }

protected:
    OracleVerdict evaluate(const Flow& flow) override;

private:
    friend void save_detector(const std::string&, const DetectorOracle&);
    Tensor w1_, b1_, w2_, b2_, mu_, sigma_;
    double threshold_;
};

class CentroidDetector : public DetectorOracle {
public:
    CentroidDetector(Tensor centroids, Tensor mu, Tensor sigma, double dist_threshold,
                     bool windowed);

    std::string kind() const override { return windowed_ ? "centroid-window" : "centroid"; }
    double score(const Flow& flow) const override;  // nearest-centroid distance
    std::map<std::string, double> info() const override {
        return {{"dist_threshold", dist_threshold_}, {"k", static_cast<double>(centroids_.rows)}};
    }

protected:
    OracleVerdict evaluate(const Flow& flow) override;

private:
    friend void save_detector(const std::string&, const DetectorOracle&);
    double flow_distance(const Flow& flow) const;
    Tensor centroids_, mu_, sigma_;
    double dist_threshold_;
    bool windowed_;
};

std::unique_ptr<DetectorOracle> train_threshold(const std::vector<Flow>& benign,
                                                double quantile = 0.99);

struct MlpTrainConfig {
    int epochs = 30;
    int batch = 32;
    int hidden = 24;
    double lr = 1e-3;
    double val_fraction = 0.2;
    uint64_t seed = 1;
};

std::unique_ptr<DetectorOracle> train_mlp(const std::vector<Flow>& benign,
                                          const std::vector<Flow>& malicious,
                                          const MlpTrainConfig& cfg = {});

struct CentroidTrainConfig {
    int k = 4;
    int max_iters = 100;
    double calibration_quantile = 0.99;
    bool windowed = false;
    uint64_t seed = 1;
};

std::unique_ptr<DetectorOracle> train_centroid(const std::vector<Flow>& benign,
                                               const CentroidTrainConfig& cfg = {});

// Flips the wrapped verdict with probability p per query; flips are a fixed
// function of (seed, query index).
std::unique_ptr<DetectorOracle> with_noise(std::unique_ptr<DetectorOracle> inner, double p,
                                           uint64_t seed);

std::unique_ptr<DetectorOracle> with_budget(std::unique_ptr<DetectorOracle> inner,
                                            int64_t budget);

void save_detector(const std::string& prefix, const DetectorOracle& oracle);
std::unique_ptr<DetectorOracle> load_detector(const std::string& prefix);

struct BinaryEval {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double fpr = 0.0;
    double accuracy = 0.0;
    double auc = 0.0;
};

// Malicious is the positive class; predictions come from hard verdicts, AUC
// from the score hook.
BinaryEval evaluate_detector(DetectorOracle& oracle, const std::vector<Flow>& benign,
                             const std::vector<Flow>& malicious);

}  // namespace flowmimic
