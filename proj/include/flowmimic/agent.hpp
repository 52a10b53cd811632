#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowmimic/env.hpp"
#include "flowmimic/graph.hpp"
#include "flowmimic/optim.hpp"
#include "flowmimic/rng.hpp"

namespace flowmimic {

/**
 * @brief Discrete soft actor-critic over the token-edit MDP.
 *
 * The policy and both critics share one architecture: per-slot size/IPD
 * embeddings concatenated into a GRU, whose final hidden state feeds a
 * linear head over the 2n+1 action ids. Invalid actions are excluded from
 * every softmax, so their probability is exactly zero. Critic targets use
 * the expectation form of the soft value, which is exact at this action
 * count, and the temperature follows an analytic gradient on log alpha.
 */

struct AgentError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct AgentConfig {
    int n = 64;         // state slots; the action head covers 2n+1 ids
    int s_size = 1606;  // size-token vocabulary capacity
    int t_size = 56;    // IPD-token vocabulary capacity
    int emb_dim = 8;    // per-stream embedding width
    int hidden = 32;    // GRU hidden width

    double lr = 1e-3;
    double alpha_lr = 1e-3;
    double alpha_init = 0.2;
    double target_entropy = -10.0;
    double eta = 1.0;          // bootstrap discount
    double soft_lambda = 0.9;  // target <- lambda * online + (1 - lambda) * target

    int buffer_capacity = 100000;
    int min_buffer = 256;
    int batch = 64;
    uint64_t seed = 1;

    // When finite, overrides the percentile-calibrated inference threshold.
    double xi_prime_override = std::numeric_limits<double>::quiet_NaN();

    void validate() const;
};

// Minimal replayable record: token pairs carry everything the networks see,
// and the action mask is recomputable from valid_len alone.
struct Sample {
    TokenPair s;
    int action = 0;
    double reward = 0.0;
    TokenPair next;
    bool done = false;
};

class ReplayBuffer {
public:
    explicit ReplayBuffer(int capacity);
    void add(Sample sample);
    int size() const { return static_cast<int>(data_.size()); }
    const Sample& at(int i) const { return data_[static_cast<size_t>(i)]; }
    // Uniform without replacement within the batch.
    std::vector<Sample> sample(int batch, Rng& rng) const;

private:
    int capacity_;
    int write_ = 0;
    std::vector<Sample> data_;
};

// One architecture serves the policy and all four critics.
struct SeqNet {
    nn::Parameter emb_s, emb_i;
    nn::Parameter gru_w, gru_u, gru_bx, gru_bh;
    nn::Parameter head_w, head_b;

    std::vector<nn::Parameter*> parameters();
    std::vector<const nn::Parameter*> parameters() const;
    static SeqNet init(const AgentConfig& cfg, const std::string& prefix, uint64_t seed);
};

enum class SelectMode { sample, greedy };

struct UpdateStats {
    double critic1 = 0.0;
    double critic2 = 0.0;
    double actor = 0.0;
    double alpha = 0.0;  // value after the temperature step
};

class DiscreteSac {
public:
    explicit DiscreteSac(AgentConfig cfg);

    const AgentConfig& config() const { return cfg_; }
    int action_count() const { return 2 * cfg_.n + 1; }
    double alpha() const { return std::exp(log_alpha_.value.at(0, 0)); }

    std::vector<double> policy_probs(const TokenPair& s, const std::vector<uint8_t>& mask) const;
    int select_action(const TokenPair& s, const std::vector<uint8_t>& mask, SelectMode mode,
                      Rng& rng) const;
    // Row of action values; which: 1, 2 online critics, 3, 4 their targets.
    std::vector<double> q_row(const TokenPair& s, int which) const;
    // max over the two online critics at one action.
    double max_q(const TokenPair& s, int action) const;

    std::vector<double> compute_targets(const std::vector<Sample>& batch) const;
    std::pair<double, double> critic_update(const std::vector<Sample>& batch);
    double actor_update(const std::vector<Sample>& batch);
    double temperature_update(const std::vector<Sample>& batch);
    void soft_update_targets();
    UpdateStats update_all(const std::vector<Sample>& batch);

    // Loss builders shared by the updates and the finite-difference checks.
    nn::Graph::H build_critic_loss(nn::Graph& g, int which, const std::vector<Sample>& batch,
                                   const std::vector<double>& targets) const;
    nn::Graph::H build_actor_loss(nn::Graph& g, const std::vector<Sample>& batch) const;
    // Analytic d(loss)/d(log alpha) for the stated temperature objective.
    double temperature_grad(const std::vector<Sample>& batch) const;
    double temperature_loss(const std::vector<Sample>& batch, double log_alpha) const;

    SeqNet& policy() { return policy_; }
    SeqNet& q1() { return q1_; }
    SeqNet& q2() { return q2_; }
    SeqNet& target1() { return t1_; }
    SeqNet& target2() { return t2_; }
    const SeqNet& policy() const { return policy_; }
    const SeqNet& q1() const { return q1_; }
    const SeqNet& q2() const { return q2_; }
    const SeqNet& target1() const { return t1_; }
    const SeqNet& target2() const { return t2_; }
    nn::Parameter& log_alpha_param() { return log_alpha_; }
    const nn::Parameter& log_alpha_param() const { return log_alpha_; }

private:
    nn::Graph::H forward(nn::Graph& g, const SeqNet& net,
                         const std::vector<const TokenPair*>& batch) const;
    std::vector<uint8_t> batch_mask(const std::vector<const TokenPair*>& batch) const;

    AgentConfig cfg_;
    SeqNet policy_, q1_, q2_, t1_, t2_;
    nn::Parameter log_alpha_;
    nn::Adam adam_pi_, adam_q1_, adam_q2_, adam_alpha_;
};

struct EpisodeLog {
    int episode = 0;
    int steps = 0;
    double evaded_ratio = 0.0;
    double max_q = 0.0;  // max over the episode's (s_t, a_t)
    int64_t probes = 0;
    double alpha = 0.0;
    double critic_loss = 0.0;
    double actor_loss = 0.0;
    bool success = false;
};

std::string log_line(const EpisodeLog& log);

struct TrainOptions {
    int episodes = 200;
    uint64_t seed = 1;
    // Stop once this fraction of the trailing window succeeded; > 1 disables.
    int early_stop_window = 50;
    double early_stop_rate = 1.01;
};

struct TrainReport {
    std::vector<EpisodeLog> episodes;
    double xi_prime = std::numeric_limits<double>::infinity();
    bool budget_exhausted = false;
};

// Runs episodes against environments produced per episode index, updating
// all networks once per environment step after warm-up. A probe-budget
// failure ends training cleanly with the log collected so far. After the
// run, xi_prime is the 10th percentile of max-Q over the last 50 successful
// episodes (or the config override when set).
TrainReport train_agent(DiscreteSac& agent, ReplayBuffer& buffer,
                        const std::function<std::unique_ptr<AttackEnv>(int)>& env_factory,
                        const TrainOptions& opts);

struct InferConfig {
    int tau = 10;
    double xi_prime = std::numeric_limits<double>::infinity();
    double beta = 0.05;
    double gamma = 0.1;
    EffectKind effect = EffectKind::rate;
    FillMode fill = FillMode::greedy();
};

struct InferResult {
    Flow adversarial;
    int steps = 0;
    std::vector<int> actions;
    std::vector<double> q_values;
};

// Oracle-free greedy rollout. Long flows are split into consecutive
// fixed-length segments and the policy is applied to each in turn; every
// segment takes at least one edit before the Q-threshold test can stop it.
InferResult infer(const DiscreteSac& agent, const EncoderModel& encoder, const Vocabulary& vocab,
                  const Flow& flow, const InferConfig& cfg);

void save_agent(const std::string& prefix, const DiscreteSac& agent);
DiscreteSac load_agent(const std::string& prefix);

}  // namespace flowmimic
