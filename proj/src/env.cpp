#include "flowmimic/env.hpp"

#include <algorithm>

#include "json.hpp"

namespace flowmimic {

EffectKind effect_kind_from_string(const std::string& s) {
    if (s == "rate") return EffectKind::rate;
    if (s == "none") return EffectKind::none;
    throw EnvError("unknown effectiveness kind: " + s);
}

std::string to_string(EffectKind k) {
    return k == EffectKind::rate ? "rate" : "none";
}

void EnvConfig::validate() const {
    if (beta < 0.01 || beta > 0.1) throw EnvError("beta out of range [0.01, 0.1]");
    if (gamma < 0.0 || gamma > 0.2) throw EnvError("gamma out of range [0, 0.2]");
    if (tau < 1) throw EnvError("tau must be at least 1");
    if (!(xi > 0.0) || xi > 1.0) throw EnvError("xi out of range (0, 1]");
}

std::vector<uint8_t> action_mask(const TokenPair& pair, int n) {
    std::vector<uint8_t> mask(2 * n + 1, 0);
    const int len = pair.valid_len;
    for (int a = 0; a <= 2 * n; ++a) {
        if (a % 2 == 1) {
            mask[a] = (a / 2 < len) ? 1 : 0;
        } else {
            const int k = a / 2;
            mask[a] = (k <= len && k < n) ? 1 : 0;
        }
    }
    return mask;
}

std::vector<uint8_t> action_mask(const MdpState& s, int n) {
    return action_mask(s.pair, n);
}

MdpState apply_action(const MdpState& s, int action, const Vocabulary& vocab) {
    const int n = static_cast<int>(s.pair.size_tokens.size());
    if (action < 0 || action > 2 * n) throw EnvError("action id out of range");
    if (!action_mask(s, n)[action])
        throw EnvError("action " + std::to_string(action) + " invalid at valid_len " +
                       std::to_string(s.pair.valid_len));

    MdpState out = s;
    if (action % 2 == 1) {
        out.pair.ipd_tokens[action / 2] = vocab.ipd_mask();
        return out;
    }

    const int k = action / 2;
    const int len = s.pair.valid_len;
    const int new_len = std::min(len + 1, n);
    // Shift the suffix right by one slot; at capacity the tail falls off.
    for (int i = new_len - 1; i > k; --i) {
        out.pair.size_tokens[i] = s.pair.size_tokens[i - 1];
        out.pair.ipd_tokens[i] = s.pair.ipd_tokens[i - 1];
        out.chaff[i] = s.chaff[i - 1];
    }
    out.pair.size_tokens[k] = vocab.size_mask();
    out.pair.ipd_tokens[k] = vocab.ipd_mask();
    out.chaff[k] = 1;
    out.pair.valid_len = new_len;
    return out;
}

bool is_terminal(int t, double evaded_ratio, int tau, double xi) {
    return t >= tau || evaded_ratio > xi;
}

double effectiveness_penalty(const Flow& original, const Flow& current, EffectKind kind) {
    if (kind == EffectKind::none) return 0.0;
    if (original.pkts.empty()) throw EnvError("effectiveness baseline flow is empty");
    const double r0 = flow_rate_mbps(original);
    if (!(r0 > 0.0)) throw EnvError("effectiveness baseline rate is not positive");
    const double rc = current.pkts.empty() ? 0.0 : flow_rate_mbps(current);
    return std::min(0.0, (rc - r0) / r0);
}

Flow non_chaff_view(const Flow& flow) {
    Flow out;
    out.id = flow.id;
    out.label = flow.label;
    for (const auto& p : flow.pkts)
        if (!p.chaff) out.pkts.push_back(p);
    return out;
}

std::string trace_line(const Transition& tr) {
    nlohmann::json j;
    j["t"] = tr.before.t;
    j["action"] = tr.action;
    j["reward"] = {{"r_E", tr.reward.r_e},
                   {"r_D", tr.reward.r_d},
                   {"r_M", tr.reward.r_m},
                   {"total", tr.reward.total}};
    j["evaded_ratio"] = tr.evaded_ratio;
    j["probe_count"] = tr.probe_count;
    return j.dump();
}

AttackEnv::AttackEnv(const Flow& malicious, const EncoderModel& encoder, const Vocabulary& vocab,
                     DetectorOracle& oracle, EnvConfig cfg)
    : encoder_(encoder), vocab_(vocab), oracle_(oracle), cfg_(cfg) {
    cfg_.validate();
    if (malicious.pkts.empty()) throw EnvError("cannot attack an empty flow");
    const auto chunks = tokenize(malicious, vocab_, encoder_.cfg.n);
    start_ = chunks.chunks.front();
    n_total_ = start_.valid_len;
    original_ = malicious;
    original_.pkts.resize(static_cast<size_t>(start_.valid_len));
    reset();
}

void AttackEnv::reset() {
    state_ = MdpState{};
    state_.pair = start_;
    state_.chaff.assign(start_.size_tokens.size(), 0);
    restored_ = restore(state_);
    start_flow_ = restored_;
    done_ = false;
}

double AttackEnv::evaded_ratio() const {
    return static_cast<double>(state_.evaded) / static_cast<double>(n_total_);
}

Flow AttackEnv::restore(const MdpState& s) const {
    Flow f;
    f.id = original_.id;
    f.label = FlowLabel::malicious;
    f.pkts = detokenize(s.pair, vocab_, original_.pkts.front().time);
    for (size_t i = 0; i < f.pkts.size(); ++i) f.pkts[i].chaff = s.chaff[i] != 0;
    return f;
}

Transition AttackEnv::step(int action) {
    if (done_) throw EnvError("episode already finished");

    MdpState masked = apply_action(state_, action, vocab_);
    masked.pair = fill(masked.pair, encoder_, vocab_, cfg_.fill);
    Flow restored = restore(masked);

    // Query last so a throwing oracle leaves the episode untouched.
    const OracleVerdict verdict = oracle_.query(restored);

    masked.t = state_.t + 1;
    masked.evaded = verdict.evaded_non_chaff;

    RewardBreakdown reward;
    reward.r_e = static_cast<double>(masked.evaded - state_.evaded) / static_cast<double>(n_total_);
    reward.r_d = -1.0;
    if (cfg_.effect == EffectKind::rate) {
        // Compare against the start-state realization so bin quantization
        // cancels and only the agent's slowdown is charged.
        reward.r_m = effectiveness_penalty(start_flow_, non_chaff_view(restored), cfg_.effect);
    }
    reward.total = reward.r_e + cfg_.beta * reward.r_d + cfg_.gamma * reward.r_m;

    Transition tr;
    tr.before = state_;
    tr.action = action;
    tr.reward = reward;
    tr.after = masked;
    tr.evaded_ratio = static_cast<double>(masked.evaded) / static_cast<double>(n_total_);
    tr.done = is_terminal(masked.t, tr.evaded_ratio, cfg_.tau, cfg_.xi);
    tr.probe_count = oracle_.probe_count();

    state_ = std::move(masked);
    restored_ = std::move(restored);
    done_ = tr.done;
    return tr;
}

}  // namespace flowmimic
