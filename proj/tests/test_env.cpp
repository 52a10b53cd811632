#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <deque>

#include "json.hpp"

#include "flowmimic/env.hpp"
#include "flowmimic/rng.hpp"

using namespace flowmimic;

namespace {

struct Fixture {
    Vocabulary vocab;
    EncoderModel model;

    Fixture()
        : vocab(build_vocab(synth_benign(300, 11))),
          model(EncoderModel::init(
              [] {
                  EncoderConfig c;
                  c.n = 16;
                  c.d_k = 8;
                  c.n_layers = 1;
                  c.attn_heads = 2;
                  c.d_ff = 16;
                  return c;
              }(),
              21)) {}
};

Fixture& fx() {
    static Fixture f;
    return f;
}

Flow make_flow(int packets, double gap = 0.001, int size = 400) {
    Flow f;
    f.id = "mal";
    f.label = FlowLabel::malicious;
    double t = 0.0;
    for (int i = 0; i < packets; ++i) {
        f.pkts.push_back({t, size, false});
        t += gap;
    }
    return f;
}

MdpState make_state(int valid_len, int n) {
    MdpState s;
    auto chunks = tokenize(make_flow(valid_len), fx().vocab, n);
    s.pair = chunks.chunks.front();
    s.chaff.assign(static_cast<size_t>(n), 0);
    return s;
}

// Returns scripted evaded counts regardless of the flow contents.
class ScriptedOracle : public DetectorOracle {
public:
    explicit ScriptedOracle(std::deque<int64_t> counts) : counts_(std::move(counts)) {}
    std::string kind() const override { return "scripted"; }
    double score(const Flow&) const override { return 0.0; }

protected:
    OracleVerdict evaluate(const Flow& flow) override {
        OracleVerdict v;
        v.evaded_non_chaff = counts_.front();
        if (counts_.size() > 1) counts_.pop_front();
        v.flow_passed = v.evaded_non_chaff >= flow.non_chaff_count();
        return v;
    }

private:
    std::deque<int64_t> counts_;
};

int non_chaff_tokens(const MdpState& s) {
    int c = 0;
    for (int i = 0; i < s.pair.valid_len; ++i)
        if (!s.chaff[i]) ++c;
    return c;
}

void check_one_edit(const MdpState& before, const MdpState& after, int action) {
    if (action % 2 == 1) {
        const int j = action / 2;
        CHECK(after.pair.size_tokens == before.pair.size_tokens);
        CHECK(after.pair.valid_len == before.pair.valid_len);
        CHECK(after.chaff == before.chaff);
        for (int i = 0; i < static_cast<int>(before.pair.ipd_tokens.size()); ++i)
            if (i != j) CHECK(after.pair.ipd_tokens[i] == before.pair.ipd_tokens[i]);
    } else {
        const int k = action / 2;
        const int n = static_cast<int>(before.pair.size_tokens.size());
        CHECK(after.pair.valid_len == std::min(before.pair.valid_len + 1, n));
        CHECK(after.chaff[k] == 1);
        for (int i = 0; i < k; ++i) {
            CHECK(after.pair.size_tokens[i] == before.pair.size_tokens[i]);
            CHECK(after.pair.ipd_tokens[i] == before.pair.ipd_tokens[i]);
            CHECK(after.chaff[i] == before.chaff[i]);
        }
        for (int i = k + 1; i < after.pair.valid_len; ++i) {
            CHECK(after.pair.size_tokens[i] == before.pair.size_tokens[i - 1]);
            CHECK(after.chaff[i] == before.chaff[i - 1]);
        }
    }
}

}  // namespace

TEST_CASE("action ids decode to re-time and insert edits") {
    auto s = make_state(5, 16);
    const auto& vocab = fx().vocab;

    auto mod = apply_action(s, 7, vocab);
    CHECK(mod.pair.ipd_tokens[3] == vocab.ipd_mask());
    CHECK(mod.pair.size_tokens == s.pair.size_tokens);
    CHECK(mod.pair.valid_len == 5);
    CHECK(mod.chaff == s.chaff);
    for (int i = 0; i < 16; ++i)
        if (i != 3) CHECK(mod.pair.ipd_tokens[i] == s.pair.ipd_tokens[i]);

    auto ins = apply_action(s, 4, vocab);
    CHECK(ins.pair.size_tokens[2] == vocab.size_mask());
    CHECK(ins.pair.ipd_tokens[2] == vocab.ipd_mask());
    CHECK(ins.pair.valid_len == 6);
    CHECK(ins.chaff[2] == 1);
    CHECK(ins.pair.size_tokens[3] == s.pair.size_tokens[2]);
    CHECK(ins.pair.ipd_tokens[5] == s.pair.ipd_tokens[4]);

    auto prefix = apply_action(s, 0, vocab);
    CHECK(prefix.pair.size_tokens[0] == vocab.size_mask());
    CHECK(prefix.chaff[0] == 1);
    CHECK(prefix.pair.valid_len == 6);
    for (int i = 1; i <= 5; ++i)
        CHECK(prefix.pair.size_tokens[i] == s.pair.size_tokens[i - 1]);

    CHECK_THROWS_AS((void)apply_action(s, 11, vocab), EnvError);  // slot 5 has no packet
    CHECK_THROWS_AS((void)apply_action(s, -1, vocab), EnvError);
    CHECK_THROWS_AS((void)apply_action(s, 33, vocab), EnvError);
}

TEST_CASE("action mask matches the slot layout") {
    auto s = make_state(3, 8);
    auto mask = action_mask(s, 8);
    REQUIRE(mask.size() == 17);
    for (int a = 0; a <= 16; ++a) {
        const bool expect = (a % 2 == 1) ? (a / 2 < 3) : (a / 2 <= 3 && a / 2 < 8);
        CHECK(mask[a] == (expect ? 1 : 0));
    }

    // Monte-Carlo: sampling under the mask always yields applicable actions.
    Rng rng(404);
    int draws = 0;
    for (int trial = 0; trial < 2000; ++trial) {
        const int n = 8;
        auto st = make_state(1 + static_cast<int>(rng.uniform_int(0, n - 1)), n);
        for (int step = 0; step < 50; ++step) {
            auto m = action_mask(st, n);
            std::vector<int> valid;
            for (int a = 0; a < static_cast<int>(m.size()); ++a)
                if (m[a]) valid.push_back(a);
            REQUIRE(!valid.empty());
            const int a = valid[rng.uniform_int(0, valid.size() - 1)];
            auto next = apply_action(st, a, fx().vocab);
            ++draws;
            CHECK(next.pair.valid_len <= n);
            for (int i = next.pair.valid_len; i < n; ++i) {
                CHECK(next.pair.size_tokens[i] == fx().vocab.size_pad());
                CHECK(next.chaff[i] == 0);
            }
            st = std::move(next);
        }
    }
    CHECK(draws == 100000);
}

TEST_CASE("insertion at capacity evicts the tail slot") {
    const int n = 16;
    auto s = make_state(n, n);
    REQUIRE(s.pair.valid_len == n);

    auto first = apply_action(s, 2 * (n - 1), fx().vocab);  // insert at n-1
    CHECK(first.pair.valid_len == n);
    CHECK(first.chaff[n - 1] == 1);
    CHECK(non_chaff_tokens(first) == n - 1);
    for (int i = 0; i < n - 1; ++i)
        CHECK(first.pair.size_tokens[i] == s.pair.size_tokens[i]);

    // The evicted slot is the chaff one, so no further real packet is lost.
    auto second = apply_action(first, 0, fx().vocab);
    CHECK(second.pair.valid_len == n);
    CHECK(second.chaff[0] == 1);
    CHECK(non_chaff_tokens(second) == n - 1);
    int chaff_total = 0;
    for (auto c : second.chaff) chaff_total += c;
    CHECK(chaff_total == 1);
}

TEST_CASE("reward arithmetic follows the three-term form") {
    auto flow = make_flow(10);
    ScriptedOracle oracle({4, 7, 10});
    EnvConfig cfg;
    cfg.beta = 0.05;
    cfg.gamma = 0.0;
    cfg.effect = EffectKind::none;
    AttackEnv env(flow, fx().model, fx().vocab, oracle, cfg);
    CHECK(env.n_total() == 10);

    auto t1 = env.step(1);
    CHECK(t1.reward.r_e == doctest::Approx(0.4));
    CHECK(t1.reward.r_d == -1.0);
    CHECK(t1.reward.r_m == 0.0);
    CHECK(t1.reward.total == doctest::Approx(0.4 - 0.05));
    CHECK(t1.evaded_ratio == doctest::Approx(0.4));
    CHECK(!t1.done);

    auto t2 = env.step(1);
    CHECK(t2.reward.r_e == doctest::Approx(0.3));
    CHECK(t2.reward.total == doctest::Approx(0.25));

    auto t3 = env.step(1);  // 10 of 10 evade, ratio 1.0 > xi
    CHECK(t3.reward.r_e == doctest::Approx(0.3));
    CHECK(t3.done);
    CHECK(env.done());
    CHECK_THROWS_AS((void)env.step(1), EnvError);
}

TEST_CASE("horizon rules") {
    CHECK(is_terminal(10, 0.0, 10, 0.95));
    CHECK(is_terminal(3, 1.0, 10, 0.95));
    CHECK(is_terminal(1, 0.96, 10, 0.95));
    CHECK(!is_terminal(9, 0.95, 10, 0.95));  // strict inequality on xi
    CHECK(!is_terminal(1, 0.0, 10, 0.95));

    EnvConfig bad;
    bad.tau = 0;
    CHECK_THROWS_AS(bad.validate(), EnvError);
    bad = EnvConfig{};
    bad.beta = 0.5;
    CHECK_THROWS_AS(bad.validate(), EnvError);
    bad = EnvConfig{};
    bad.gamma = 0.3;
    CHECK_THROWS_AS(bad.validate(), EnvError);

    // Never-passing oracle: the step cap ends the episode.
    auto flow = make_flow(6);
    ScriptedOracle oracle({0});
    EnvConfig cfg;
    cfg.tau = 4;
    cfg.effect = EffectKind::none;
    AttackEnv env(flow, fx().model, fx().vocab, oracle, cfg);
    int steps = 0;
    while (!env.done()) {
        auto tr = env.step(1);
        ++steps;
        CHECK(tr.after.t == steps);
    }
    CHECK(steps == 4);
}

TEST_CASE("effectiveness penalty compares flow rates") {
    Flow fast;
    fast.pkts = {{0.0, 125, false}, {0.001, 125, false}};
    Flow slow;
    slow.pkts = {{0.0, 125, false}, {0.002, 125, false}};

    CHECK(effectiveness_penalty(fast, fast, EffectKind::rate) == 0.0);
    CHECK(effectiveness_penalty(fast, slow, EffectKind::rate) == doctest::Approx(-0.5));
    CHECK(effectiveness_penalty(slow, fast, EffectKind::rate) == 0.0);  // speedups unpunished
    CHECK(effectiveness_penalty(fast, slow, EffectKind::none) == 0.0);

    Flow empty;
    CHECK_THROWS_AS((void)effectiveness_penalty(empty, fast, EffectKind::rate), EnvError);
    CHECK(effectiveness_penalty(fast, empty, EffectKind::rate) == doctest::Approx(-1.0));

    Flow chaffy = fast;
    chaffy.pkts.push_back({0.003, 1500, true});
    auto seen = non_chaff_view(chaffy);
    CHECK(seen.pkts.size() == 2);
    CHECK(seen.pkts[1].size == 125);
}

TEST_CASE("each step edits exactly one site and conserves real packets") {
    auto benign = synth_benign(400, 31);
    auto oracle = train_threshold(benign, 0.99);
    auto flow = make_flow(6, 0.0004, 900);

    EnvConfig cfg;
    cfg.fill = FillMode::greedy();
    Rng rng(77);
    for (int episode = 0; episode < 20; ++episode) {
        AttackEnv env(flow, fx().model, fx().vocab, *oracle, cfg);
        while (!env.done()) {
            auto mask = env.action_mask();
            std::vector<int> valid;
            for (int a = 0; a < static_cast<int>(mask.size()); ++a)
                if (mask[a]) valid.push_back(a);
            const int a = valid[rng.uniform_int(0, valid.size() - 1)];
            auto before = env.state();
            auto tr = env.step(a);
            check_one_edit(before, tr.after, a);
            CHECK(non_chaff_tokens(tr.after) == env.n_total());
            CHECK(tr.after.evaded <= non_chaff_tokens(tr.after));
            CHECK(tr.after.t <= cfg.tau);
        }
    }
}

TEST_CASE("episodes replay bit-for-bit") {
    auto benign = synth_benign(400, 32);
    auto oracle = train_threshold(benign, 0.99);
    auto flow = make_flow(7, 0.0003, 1200);

    for (const auto& mode : {FillMode::greedy(), FillMode::sampled(1.0)}) {
        EnvConfig cfg;
        cfg.fill = mode;

        std::vector<int> actions;
        std::vector<Transition> first;
        {
            AttackEnv env(flow, fx().model, fx().vocab, *oracle, cfg);
            Rng rng(500);
            while (!env.done()) {
                auto mask = env.action_mask();
                std::vector<int> valid;
                for (int a = 0; a < static_cast<int>(mask.size()); ++a)
                    if (mask[a]) valid.push_back(a);
                const int a = valid[rng.uniform_int(0, valid.size() - 1)];
                actions.push_back(a);
                first.push_back(env.step(a));
            }
        }
        AttackEnv env(flow, fx().model, fx().vocab, *oracle, cfg);
        for (size_t i = 0; i < actions.size(); ++i) {
            auto tr = env.step(actions[i]);
            CHECK(tr.after.pair.size_tokens == first[i].after.pair.size_tokens);
            CHECK(tr.after.pair.ipd_tokens == first[i].after.pair.ipd_tokens);
            CHECK(tr.after.chaff == first[i].after.chaff);
            CHECK(tr.after.evaded == first[i].after.evaded);
            CHECK(std::memcmp(&tr.reward, &first[i].reward, sizeof tr.reward) == 0);
            CHECK(tr.done == first[i].done);
        }
    }
}

TEST_CASE("oracle failures leave the episode untouched") {
    auto oracle = with_budget(std::make_unique<ScriptedOracle>(std::deque<int64_t>{0}), 2);
    auto flow = make_flow(5);

    EnvConfig cfg;
    cfg.effect = EffectKind::none;
    AttackEnv env(flow, fx().model, fx().vocab, *oracle, cfg);
    (void)env.step(1);
    (void)env.step(3);
    const auto snapshot = env.state();
    CHECK_THROWS_AS((void)env.step(5), BudgetExhausted);
    CHECK(env.state().t == 2);
    CHECK(env.state().pair.size_tokens == snapshot.pair.size_tokens);
    CHECK(env.state().pair.ipd_tokens == snapshot.pair.ipd_tokens);
    CHECK(!env.done());
    CHECK(oracle->probe_count() == 2);
}

TEST_CASE("trace lines are single-line json records") {
    auto flow = make_flow(10);
    ScriptedOracle oracle({4, 7});
    EnvConfig cfg;
    cfg.effect = EffectKind::none;
    AttackEnv env(flow, fx().model, fx().vocab, oracle, cfg);
    auto tr = env.step(2);

    const auto line = trace_line(tr);
    CHECK(line.find('\n') == std::string::npos);
    auto j = nlohmann::json::parse(line);
    CHECK(j["t"] == 0);
    CHECK(j["action"] == 2);
    CHECK(j["reward"]["r_E"] == doctest::Approx(0.4));
    CHECK(j["reward"]["r_D"] == -1.0);
    CHECK(j["evaded_ratio"] == doctest::Approx(0.4));
    CHECK(j["probe_count"] == 1);
}

TEST_CASE("long flows attack only the first chunk") {
    auto flow = make_flow(36);  // n = 16, so 21 chunks exist
    ScriptedOracle oracle({0});
    EnvConfig cfg;
    cfg.effect = EffectKind::none;
    AttackEnv env(flow, fx().model, fx().vocab, oracle, cfg);
    CHECK(env.n() == 16);
    CHECK(env.n_total() == 16);
    CHECK(env.original().pkts.size() == 16);
    CHECK(env.current_flow().pkts.size() == 16);

    auto tr = env.step(0);
    CHECK(tr.after.pair.valid_len == 16);
    CHECK(env.current_flow().pkts.size() == 16);
    CHECK(env.current_flow().pkts[0].chaff);
}
