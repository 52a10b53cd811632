#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowmimic/detectors.hpp"
#include "flowmimic/encoder.hpp"
#include "flowmimic/tokenizer.hpp"
#include "flowmimic/traffic.hpp"

namespace flowmimic {

/**
 * @brief Finite-horizon evasion MDP over one malicious flow.
 *
 * The state is the fixed-length token pair (sizes, IPDs) plus a chaff map
 * marking attacker-inserted slots. Each action masks exactly one site: odd
 * ids re-time an existing packet (its IPD slot becomes MASK), even ids
 * insert a fresh MASK column into both streams. The encoder then fills the
 * masks, the pair is detokenized back to packets, and the detector is asked
 * for a verdict. Rewards combine the evasion delta, a constant per-edit
 * cost, and an optional attack-effectiveness penalty.
 */

struct EnvError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class EffectKind { rate, none };

EffectKind effect_kind_from_string(const std::string& s);
std::string to_string(EffectKind k);

struct EnvConfig {
    double beta = 0.05;   // weight of the constant edit cost
    double gamma = 0.1;   // weight of the effectiveness penalty
    int tau = 10;         // hard step cap
    double xi = 0.95;     // evaded-ratio threshold ending the episode
    EffectKind effect = EffectKind::rate;
    FillMode fill = FillMode::greedy();

    void validate() const;
};

struct MdpState {
    TokenPair pair;
    std::vector<uint8_t> chaff;  // one flag per slot, 1 = attacker-inserted
    int t = 0;
    int64_t evaded = 0;  // non-chaff packets past the detector at this state
};

struct RewardBreakdown {
    double r_e = 0.0;
    double r_d = -1.0;
    double r_m = 0.0;
    double total = 0.0;
};

struct Transition {
    MdpState before;
    int action = 0;
    RewardBreakdown reward;
    MdpState after;
    bool done = false;
    double evaded_ratio = 0.0;   // after the step
    int64_t probe_count = 0;     // oracle counter after the step's query
};

// Boolean mask over the 2n+1 action ids. Odd ids need a real packet at the
// slot; even ids may target any boundary inside the valid prefix, appending
// included while capacity remains. At full capacity an insert is still legal
// and evicts the tail slot.
std::vector<uint8_t> action_mask(const TokenPair& pair, int n);
std::vector<uint8_t> action_mask(const MdpState& s, int n);

// Pure token-level edit: returns the masked successor without filling.
// Throws EnvError when the id is outside the mask.
MdpState apply_action(const MdpState& s, int action, const Vocabulary& vocab);

bool is_terminal(int t, double evaded_ratio, int tau, double xi);

// rate kind: min(0, relative rate change); none: always 0. Throws on a
// non-positive original rate.
double effectiveness_penalty(const Flow& original, const Flow& current, EffectKind kind);

// Flow as the victim sees it once chaff is discarded in-network.
Flow non_chaff_view(const Flow& flow);

// One JSON line per step for episode logs.
std::string trace_line(const Transition& tr);

class AttackEnv {
public:
    // Long flows are truncated to their first chunk; the policy is reapplied
    // per chunk at inference instead of widening the state.
    AttackEnv(const Flow& malicious, const EncoderModel& encoder, const Vocabulary& vocab,
              DetectorOracle& oracle, EnvConfig cfg = {});

    void reset();
    Transition step(int action);

    const MdpState& state() const { return state_; }
    std::vector<uint8_t> action_mask() const { return flowmimic::action_mask(state_, n()); }
    int n() const { return static_cast<int>(state_.pair.size_tokens.size()); }
    int action_count() const { return 2 * n() + 1; }
    int64_t n_total() const { return n_total_; }
    double evaded_ratio() const;
    bool done() const { return done_; }
    // True once the evaded ratio cleared the episode threshold.
    bool succeeded() const { return evaded_ratio() > cfg_.xi; }
    const EnvConfig& config() const { return cfg_; }

    const Flow& original() const { return original_; }
    // Packet realization of the current state, chaff flags applied.
    const Flow& current_flow() const { return restored_; }

private:
    Flow restore(const MdpState& s) const;

    const EncoderModel& encoder_;
    const Vocabulary& vocab_;
    DetectorOracle& oracle_;
    EnvConfig cfg_;
    Flow original_;    // first-chunk packets with their true timing
    TokenPair start_;  // tokenization of original_
    Flow start_flow_;  // detokenized start state, the rate baseline
    int64_t n_total_ = 0;
    MdpState state_;
    Flow restored_;
    bool done_ = false;
};

}  // namespace flowmimic
