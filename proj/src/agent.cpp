#include "flowmimic/agent.hpp"

#include <algorithm>
#include <fstream>
#include <limits>

#include "json.hpp"

#include "flowmimic/checkpoint.hpp"
#include "flowmimic/hash.hpp"
#include "flowmimic/stats.hpp"

namespace flowmimic {

using nn::Tensor;

void AgentConfig::validate() const {
    if (n < 1) throw AgentError("n must be positive");
    if (s_size < 2 || t_size < 2) throw AgentError("vocabulary capacities must be at least 2");
    if (emb_dim < 1 || hidden < 1) throw AgentError("network widths must be positive");
    if (lr <= 0.0 || alpha_lr <= 0.0) throw AgentError("learning rates must be positive");
    if (alpha_init <= 0.0) throw AgentError("alpha_init must be positive");
    if (eta < 0.0 || eta > 1.0) throw AgentError("eta out of [0, 1]");
    if (soft_lambda <= 0.0 || soft_lambda > 1.0) throw AgentError("soft_lambda out of (0, 1]");
    if (batch < 1 || min_buffer < batch || buffer_capacity < min_buffer)
        throw AgentError("require batch <= min_buffer <= buffer_capacity");
}

ReplayBuffer::ReplayBuffer(int capacity) : capacity_(capacity) {
    if (capacity < 1) throw AgentError("buffer capacity must be positive");
}

void ReplayBuffer::add(Sample sample) {
    if (size() < capacity_) {
        data_.push_back(std::move(sample));
    } else {
        data_[static_cast<size_t>(write_)] = std::move(sample);
    }
    write_ = (write_ + 1) % capacity_;
}

std::vector<Sample> ReplayBuffer::sample(int batch, Rng& rng) const {
    if (batch > size()) throw AgentError("batch larger than buffer contents");
    std::vector<int> picked;
    picked.reserve(static_cast<size_t>(batch));
    while (static_cast<int>(picked.size()) < batch) {
        const int i = static_cast<int>(rng.uniform_int(0, static_cast<uint64_t>(size()) - 1));
        if (std::find(picked.begin(), picked.end(), i) == picked.end()) picked.push_back(i);
    }
    std::vector<Sample> out;
    out.reserve(picked.size());
    for (int i : picked) out.push_back(data_[static_cast<size_t>(i)]);
    return out;
}

std::vector<nn::Parameter*> SeqNet::parameters() {
    return {&emb_s, &emb_i, &gru_w, &gru_u, &gru_bx, &gru_bh, &head_w, &head_b};
}

std::vector<const nn::Parameter*> SeqNet::parameters() const {
    return {&emb_s, &emb_i, &gru_w, &gru_u, &gru_bx, &gru_bh, &head_w, &head_b};
}

SeqNet SeqNet::init(const AgentConfig& cfg, const std::string& prefix, uint64_t seed) {
    Rng rng(seed);
    SeqNet net;
    const int a = 2 * cfg.n + 1;
    net.emb_s = {prefix + ".emb_s", Tensor(cfg.s_size, cfg.emb_dim)};
    net.emb_i = {prefix + ".emb_i", Tensor(cfg.t_size, cfg.emb_dim)};
    net.gru_w = {prefix + ".gru_w", Tensor(2 * cfg.emb_dim, 3 * cfg.hidden)};
    net.gru_u = {prefix + ".gru_u", Tensor(cfg.hidden, 3 * cfg.hidden)};
    net.gru_bx = {prefix + ".gru_bx", Tensor(1, 3 * cfg.hidden)};
    net.gru_bh = {prefix + ".gru_bh", Tensor(1, 3 * cfg.hidden)};
    net.head_w = {prefix + ".head_w", Tensor(cfg.hidden, a)};
    net.head_b = {prefix + ".head_b", Tensor(1, a)};
    nn::init_embedding(net.emb_s.value, rng);
    nn::init_embedding(net.emb_i.value, rng);
    nn::init_xavier(net.gru_w.value, rng);
    nn::init_xavier(net.gru_u.value, rng);
    nn::init_xavier(net.head_w.value, rng);
    return net;
}

namespace {

SeqNet cloned_as(const SeqNet& src, const std::string& prefix) {
    SeqNet out = src;
    out.emb_s.name = prefix + ".emb_s";
    out.emb_i.name = prefix + ".emb_i";
    out.gru_w.name = prefix + ".gru_w";
    out.gru_u.name = prefix + ".gru_u";
    out.gru_bx.name = prefix + ".gru_bx";
    out.gru_bh.name = prefix + ".gru_bh";
    out.head_w.name = prefix + ".head_w";
    out.head_b.name = prefix + ".head_b";
    return out;
}

void soft_update(SeqNet& target, const SeqNet& online, double lambda) {
    if (lambda <= 0.0 || lambda > 1.0) throw AgentError("soft update lambda out of (0, 1]");
    auto tp = target.parameters();
    auto op = online.parameters();
    for (size_t i = 0; i < tp.size(); ++i) {
        Tensor& t = tp[i]->value;
        const Tensor& o = op[i]->value;
        if (!t.same_shape(o)) throw AgentError("soft update shape mismatch at " + tp[i]->name);
        for (size_t j = 0; j < t.data.size(); ++j)
            t.data[j] = lambda * o.data[j] + (1.0 - lambda) * t.data[j];
    }
}

nn::Graph::H leaf(nn::Graph& g, const nn::Parameter& p) {
    // Graphs take parameters by mutable reference to route gradients; the
    // no-grad readers funnel through here as well.
    return g.param(const_cast<nn::Parameter&>(p));
}

}  // namespace

DiscreteSac::DiscreteSac(AgentConfig cfg)
    : cfg_(cfg),
      adam_pi_(nn::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8}),
      adam_q1_(nn::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8}),
      adam_q2_(nn::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8}),
      adam_alpha_(nn::AdamConfig{cfg.alpha_lr, 0.9, 0.999, 1e-8}) {
    cfg_.validate();
    policy_ = SeqNet::init(cfg_, "pi", cfg_.seed ^ 0x9e3779b97f4a7c15ull);
    q1_ = SeqNet::init(cfg_, "q1", cfg_.seed ^ 0x71f3a2c1b5d90e77ull);
    q2_ = SeqNet::init(cfg_, "q2", cfg_.seed ^ 0x8ba56d031c9e24abull);
    t1_ = cloned_as(q1_, "t1");
    t2_ = cloned_as(q2_, "t2");
    log_alpha_ = {"log_alpha", Tensor(1, 1)};
    log_alpha_.value.at(0, 0) = std::log(cfg_.alpha_init);
}

nn::Graph::H DiscreteSac::forward(nn::Graph& g, const SeqNet& net,
                                  const std::vector<const TokenPair*>& batch) const {
    const int b_count = static_cast<int>(batch.size());
    if (b_count == 0) throw AgentError("empty batch");
    int t_max = 1;
    std::vector<int> lens(static_cast<size_t>(b_count));
    for (int b = 0; b < b_count; ++b) {
        lens[static_cast<size_t>(b)] = batch[static_cast<size_t>(b)]->valid_len;
        t_max = std::max(t_max, batch[static_cast<size_t>(b)]->valid_len);
    }
    std::vector<int> s_ids(static_cast<size_t>(t_max) * b_count, 0);
    std::vector<int> i_ids(static_cast<size_t>(t_max) * b_count, 0);
    for (int t = 0; t < t_max; ++t)
        for (int b = 0; b < b_count; ++b)
            if (t < lens[static_cast<size_t>(b)]) {
                const auto& pair = *batch[static_cast<size_t>(b)];
                s_ids[static_cast<size_t>(t) * b_count + b] = pair.size_tokens[static_cast<size_t>(t)];
                i_ids[static_cast<size_t>(t) * b_count + b] = pair.ipd_tokens[static_cast<size_t>(t)];
            }
    auto x = g.concat_cols({g.gather_rows(leaf(g, net.emb_s), s_ids),
                            g.gather_rows(leaf(g, net.emb_i), i_ids)});
    auto h = g.gru_final(x, t_max, b_count, leaf(g, net.gru_w), leaf(g, net.gru_u),
                         leaf(g, net.gru_bx), leaf(g, net.gru_bh), lens);
    return g.add_rowvec(g.matmul(h, leaf(g, net.head_w)), leaf(g, net.head_b));
}

std::vector<uint8_t> DiscreteSac::batch_mask(const std::vector<const TokenPair*>& batch) const {
    std::vector<uint8_t> out;
    out.reserve(batch.size() * static_cast<size_t>(action_count()));
    for (const auto* p : batch) {
        auto m = action_mask(*p, cfg_.n);
        out.insert(out.end(), m.begin(), m.end());
    }
    return out;
}

std::vector<double> DiscreteSac::policy_probs(const TokenPair& s,
                                              const std::vector<uint8_t>& mask) const {
    if (std::find(mask.begin(), mask.end(), uint8_t{1}) == mask.end())
        throw AgentError("action mask is all false");
    if (static_cast<int>(mask.size()) != action_count())
        throw AgentError("mask width does not match the action head");
    nn::Graph g(false);
    auto probs = g.softmax_rows(forward(g, policy_, {&s}), mask);
    return probs->val.data;
}

int DiscreteSac::select_action(const TokenPair& s, const std::vector<uint8_t>& mask,
                               SelectMode mode, Rng& rng) const {
    const auto probs = policy_probs(s, mask);
    if (mode == SelectMode::greedy) {
        int best = -1;
        for (int a = 0; a < static_cast<int>(probs.size()); ++a)
            if (mask[static_cast<size_t>(a)] && (best < 0 || probs[static_cast<size_t>(a)] >
                                                                  probs[static_cast<size_t>(best)]))
                best = a;
        return best;
    }
    const double u = rng.uniform();
    double cum = 0.0;
    int last_valid = -1;
    for (int a = 0; a < static_cast<int>(probs.size()); ++a) {
        if (!mask[static_cast<size_t>(a)]) continue;
        last_valid = a;
        cum += probs[static_cast<size_t>(a)];
        if (u < cum) return a;
    }
    return last_valid;
}

std::vector<double> DiscreteSac::q_row(const TokenPair& s, int which) const {
    const SeqNet* net = nullptr;
    switch (which) {
        case 1: net = &q1_; break;
        case 2: net = &q2_; break;
        case 3: net = &t1_; break;
        case 4: net = &t2_; break;
        default: throw AgentError("q_row selector must be 1..4");
    }
    nn::Graph g(false);
    return forward(g, *net, {&s})->val.data;
}

double DiscreteSac::max_q(const TokenPair& s, int action) const {
    if (action < 0 || action >= action_count()) throw AgentError("action id out of range");
    const auto a = q_row(s, 1);
    const auto b = q_row(s, 2);
    return std::max(a[static_cast<size_t>(action)], b[static_cast<size_t>(action)]);
}

std::vector<double> DiscreteSac::compute_targets(const std::vector<Sample>& batch) const {
    if (batch.empty()) throw AgentError("empty batch");
    std::vector<const TokenPair*> nexts;
    nexts.reserve(batch.size());
    for (const auto& s : batch) nexts.push_back(&s.next);

    nn::Graph g(false);
    auto logits = forward(g, policy_, nexts);
    auto mask = batch_mask(nexts);
    auto probs = g.softmax_rows(logits, mask);
    auto logp = g.log_softmax_rows(logits, std::move(mask));
    auto minq = g.min_elem(forward(g, t1_, nexts), forward(g, t2_, nexts));
    // V(s') = sum_a pi(a|s') [min_j Q_j(s',a) - alpha log pi(a|s')]; masked
    // entries contribute exactly zero through the zero probability.
    auto v = g.sum_rows(g.mul(probs, g.sub(minq, g.affine(logp, alpha(), 0.0))));

    std::vector<double> y(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
        const double boot = batch[i].done ? 0.0 : v->val.at(static_cast<int>(i), 0);
        y[i] = batch[i].reward + cfg_.eta * boot;
    }
    return y;
}

nn::Graph::H DiscreteSac::build_critic_loss(nn::Graph& g, int which,
                                            const std::vector<Sample>& batch,
                                            const std::vector<double>& targets) const {
    if (which != 1 && which != 2) throw AgentError("critic selector must be 1 or 2");
    if (targets.size() != batch.size()) throw AgentError("target count mismatch");
    std::vector<const TokenPair*> cur;
    std::vector<int> actions;
    cur.reserve(batch.size());
    actions.reserve(batch.size());
    for (const auto& s : batch) {
        cur.push_back(&s.s);
        actions.push_back(s.action);
    }
    auto logits = forward(g, which == 1 ? q1_ : q2_, cur);
    auto picked = g.pick_cols(logits, actions);
    Tensor yt(static_cast<int>(batch.size()), 1);
    for (size_t i = 0; i < targets.size(); ++i) yt.at(static_cast<int>(i), 0) = targets[i];
    auto diff = g.sub(picked, g.constant(std::move(yt)));
    return g.mean_all(g.mul(diff, diff));
}

std::pair<double, double> DiscreteSac::critic_update(const std::vector<Sample>& batch) {
    const auto y = compute_targets(batch);
    double losses[2] = {0.0, 0.0};
    for (int which = 1; which <= 2; ++which) {
        nn::Graph g;
        auto loss = build_critic_loss(g, which, batch, y);
        const double value = loss->val.at(0, 0);
        if (!std::isfinite(value)) throw AgentError("critic loss diverged");
        g.backward(loss);
        auto& net = which == 1 ? q1_ : q2_;
        auto& adam = which == 1 ? adam_q1_ : adam_q2_;
        adam.step(net.parameters(), g);
        losses[which - 1] = value;
    }
    return {losses[0], losses[1]};
}

nn::Graph::H DiscreteSac::build_actor_loss(nn::Graph& g,
                                           const std::vector<Sample>& batch) const {
    if (batch.empty()) throw AgentError("empty batch");
    std::vector<const TokenPair*> cur;
    cur.reserve(batch.size());
    for (const auto& s : batch) cur.push_back(&s.s);

    Tensor minq;
    {
        nn::Graph ng(false);
        minq = ng.min_elem(forward(ng, q1_, cur), forward(ng, q2_, cur))->val;
    }
    auto logits = forward(g, policy_, cur);
    auto mask = batch_mask(cur);
    auto probs = g.softmax_rows(logits, mask);
    auto logp = g.log_softmax_rows(logits, std::move(mask));
    auto inner = g.sub(g.affine(logp, alpha(), 0.0), g.constant(std::move(minq)));
    return g.mean_all(g.sum_rows(g.mul(probs, inner)));
}

double DiscreteSac::actor_update(const std::vector<Sample>& batch) {
    nn::Graph g;
    auto loss = build_actor_loss(g, batch);
    const double value = loss->val.at(0, 0);
    if (!std::isfinite(value)) throw AgentError("actor loss diverged");
    g.backward(loss);
    adam_pi_.step(policy_.parameters(), g);
    return value;
}

double DiscreteSac::temperature_loss(const std::vector<Sample>& batch, double log_alpha) const {
    if (batch.empty()) throw AgentError("empty batch");
    std::vector<const TokenPair*> cur;
    cur.reserve(batch.size());
    for (const auto& s : batch) cur.push_back(&s.s);
    nn::Graph g(false);
    auto logits = forward(g, policy_, cur);
    auto mask = batch_mask(cur);
    auto probs = g.softmax_rows(logits, mask);
    auto logp = g.log_softmax_rows(logits, std::move(mask));
    auto ent = g.mean_all(g.affine(g.sum_rows(g.mul(probs, logp)), -1.0, 0.0));
    return std::exp(log_alpha) * (ent->val.at(0, 0) - cfg_.target_entropy);
}

double DiscreteSac::temperature_grad(const std::vector<Sample>& batch) const {
    // d/d(log a) of exp(log a) (H - H0) is the loss itself.
    return temperature_loss(batch, log_alpha_.value.at(0, 0));
}

double DiscreteSac::temperature_update(const std::vector<Sample>& batch) {
    adam_alpha_.step_scalar(log_alpha_, temperature_grad(batch));
    return alpha();
}

void DiscreteSac::soft_update_targets() {
    soft_update(t1_, q1_, cfg_.soft_lambda);
    soft_update(t2_, q2_, cfg_.soft_lambda);
}

UpdateStats DiscreteSac::update_all(const std::vector<Sample>& batch) {
    UpdateStats st;
    std::tie(st.critic1, st.critic2) = critic_update(batch);
    st.actor = actor_update(batch);
    st.alpha = temperature_update(batch);
    soft_update_targets();
    return st;
}

std::string log_line(const EpisodeLog& log) {
    nlohmann::json j;
    j["episode"] = log.episode;
    j["steps"] = log.steps;
    j["evaded_ratio"] = log.evaded_ratio;
    j["max_q"] = std::isfinite(log.max_q) ? log.max_q : 0.0;
    j["probes"] = log.probes;
    j["alpha"] = log.alpha;
    j["losses"] = {{"critic", log.critic_loss}, {"actor", log.actor_loss}};
    j["success"] = log.success;
    return j.dump();
}

TrainReport train_agent(DiscreteSac& agent, ReplayBuffer& buffer,
                        const std::function<std::unique_ptr<AttackEnv>(int)>& env_factory,
                        const TrainOptions& opts) {
    if (opts.episodes < 1) throw AgentError("episode count must be positive");
    TrainReport rep;
    Rng rng(opts.seed ^ 0xac7e5700d1ce5ull);
    std::vector<double> success_q;
    int learn_from = -1;

    for (int ep = 0; ep < opts.episodes; ++ep) {
        auto env = env_factory(ep);
        if (env->action_count() != agent.action_count())
            throw AgentError("environment and agent disagree on the action space");

        EpisodeLog log;
        log.episode = ep;
        double ep_max_q = -std::numeric_limits<double>::infinity();
        UpdateStats last{};
        bool interrupted = false;
        try {
            while (!env->done()) {
                const auto mask = env->action_mask();
                const TokenPair& pair = env->state().pair;
                const int a = agent.select_action(pair, mask, SelectMode::sample, rng);
                ep_max_q = std::max(ep_max_q, agent.max_q(pair, a));
                auto tr = env->step(a);
                buffer.add({tr.before.pair, a, tr.reward.total, tr.after.pair, tr.done});
                log.steps += 1;
                log.probes = tr.probe_count;
                log.evaded_ratio = tr.evaded_ratio;
                if (buffer.size() >= agent.config().min_buffer) {
                    last = agent.update_all(buffer.sample(agent.config().batch, rng));
                    if (learn_from < 0) learn_from = ep;
                }
            }
        } catch (const BudgetExhausted&) {
            rep.budget_exhausted = true;
            interrupted = true;
        }
        if (interrupted) break;  // keep the completed-episode log only

        log.success = env->succeeded();
        log.max_q = ep_max_q;
        log.alpha = agent.alpha();
        log.critic_loss = 0.5 * (last.critic1 + last.critic2);
        log.actor_loss = last.actor;
        rep.episodes.push_back(log);
        if (log.success) success_q.push_back(ep_max_q);

        // A success streak from the warm-up phase proves nothing about the
        // policy, so the stop window only opens once updates have started.
        if (opts.early_stop_rate <= 1.0 && learn_from >= 0 &&
            static_cast<int>(rep.episodes.size()) - learn_from >= opts.early_stop_window) {
            int wins = 0;
            const int from = static_cast<int>(rep.episodes.size()) - opts.early_stop_window;
            for (int i = from; i < static_cast<int>(rep.episodes.size()); ++i)
                wins += rep.episodes[static_cast<size_t>(i)].success ? 1 : 0;
            if (static_cast<double>(wins) / opts.early_stop_window >= opts.early_stop_rate) break;
        }
    }

    if (std::isfinite(agent.config().xi_prime_override)) {
        rep.xi_prime = agent.config().xi_prime_override;
    } else if (!success_q.empty()) {
        // The median peak Q of recent wins separates "on a winning path"
        // from "already there" better than a low quantile, which stops the
        // greedy rollout while the flow is still one or two edits short.
        const size_t take = std::min<size_t>(50, success_q.size());
        std::vector<double> tail(success_q.end() - static_cast<long>(take), success_q.end());
        rep.xi_prime = stats::quantile(tail, 0.50);
    }
    return rep;
}

InferResult infer(const DiscreteSac& agent, const EncoderModel& encoder, const Vocabulary& vocab,
                  const Flow& flow, const InferConfig& cfg) {
    if (flow.pkts.empty()) throw AgentError("cannot attack an empty flow");
    if (cfg.tau < 1) throw AgentError("tau must be at least 1");
    const int n = encoder.cfg.n;
    if (2 * n + 1 != agent.action_count())
        throw AgentError("encoder and agent disagree on the action space");

    InferResult res;
    res.adversarial.id = flow.id;
    res.adversarial.label = FlowLabel::malicious;
    Rng unused(0);

    double prev_end = -std::numeric_limits<double>::infinity();
    for (size_t start = 0; start < flow.pkts.size(); start += static_cast<size_t>(n)) {
        Flow seg;
        seg.id = flow.id;
        seg.label = FlowLabel::malicious;
        const size_t stop = std::min(flow.pkts.size(), start + static_cast<size_t>(n));
        seg.pkts.assign(flow.pkts.begin() + static_cast<long>(start),
                        flow.pkts.begin() + static_cast<long>(stop));
        const double base = std::max(seg.pkts.front().time, prev_end);

        MdpState s;
        s.pair = tokenize(seg, vocab, n).chunks.front();
        s.chaff.assign(static_cast<size_t>(n), 0);
        Flow baseline;
        baseline.pkts = detokenize(s.pair, vocab, base);

        // Transitions are deterministic, so an action that left the state
        // unchanged stays a no-op until the state moves again. Re-picking it
        // would spin the rest of the budget on the same dead edit.
        std::vector<int> futile;
        for (int t = 0; t < cfg.tau; ++t) {
            auto mask = action_mask(s.pair, n);
            auto usable = mask;
            for (int f : futile) usable[static_cast<size_t>(f)] = 0;
            if (std::find(usable.begin(), usable.end(), uint8_t{1}) == usable.end())
                usable = mask;
            const int a = agent.select_action(s.pair, usable, SelectMode::greedy, unused);
            const double q = agent.max_q(s.pair, a);
            const TokenPair before = s.pair;
            s = apply_action(s, a, vocab);
            s.pair = fill(s.pair, encoder, vocab, cfg.fill);
            if (s.pair.size_tokens == before.size_tokens &&
                s.pair.ipd_tokens == before.ipd_tokens) {
                futile.push_back(a);
            } else {
                futile.clear();
            }
            res.actions.push_back(a);
            res.q_values.push_back(q);
            res.steps += 1;

            double threshold = cfg.xi_prime;
            if (cfg.effect == EffectKind::rate) {
                Flow cur;
                cur.pkts = detokenize(s.pair, vocab, base);
                for (size_t i = 0; i < cur.pkts.size(); ++i) cur.pkts[i].chaff = s.chaff[i] != 0;
                const double r_m = effectiveness_penalty(baseline, non_chaff_view(cur), cfg.effect);
                threshold = cfg.xi_prime + cfg.beta - cfg.gamma * r_m;
            }
            if (q >= threshold) break;
        }

        Flow out;
        out.pkts = detokenize(s.pair, vocab, base);
        for (size_t i = 0; i < out.pkts.size(); ++i) out.pkts[i].chaff = s.chaff[i] != 0;
        res.adversarial.pkts.insert(res.adversarial.pkts.end(), out.pkts.begin(), out.pkts.end());
        prev_end = out.pkts.back().time;
    }
    return res;
}

namespace {

nlohmann::json config_json(const AgentConfig& cfg) {
    nlohmann::json j;
    j["n"] = cfg.n;
    j["s_size"] = cfg.s_size;
    j["t_size"] = cfg.t_size;
    j["emb_dim"] = cfg.emb_dim;
    j["hidden"] = cfg.hidden;
    j["lr"] = cfg.lr;
    j["alpha_lr"] = cfg.alpha_lr;
    j["alpha_init"] = cfg.alpha_init;
    j["target_entropy"] = cfg.target_entropy;
    j["eta"] = cfg.eta;
    j["soft_lambda"] = cfg.soft_lambda;
    j["buffer_capacity"] = cfg.buffer_capacity;
    j["min_buffer"] = cfg.min_buffer;
    j["batch"] = cfg.batch;
    j["seed"] = cfg.seed;
    if (std::isfinite(cfg.xi_prime_override))
        j["xi_prime_override"] = cfg.xi_prime_override;
    else
        j["xi_prime_override"] = nullptr;
    return j;
}

}  // namespace

void save_agent(const std::string& prefix, const DiscreteSac& agent) {
    std::vector<std::pair<std::string, const Tensor*>> items;
    for (const auto* net : {&agent.policy(), &agent.q1(), &agent.q2(), &agent.target1(),
                            &agent.target2()})
        for (const auto* p : net->parameters()) items.emplace_back(p->name, &p->value);
    items.emplace_back("log_alpha", &agent.log_alpha_param().value);
    nn::save_tensors(prefix, items);

    const auto cfg = config_json(agent.config());
    nlohmann::json meta;
    meta["version"] = 1;
    meta["config"] = cfg;
    meta["config_fnv"] = hash_hex(fnv1a64(cfg.dump()));
    std::ofstream out(prefix + ".meta.json");
    if (!out) throw AgentError("cannot write " + prefix + ".meta.json");
    out << meta.dump(2) << "\n";
}

DiscreteSac load_agent(const std::string& prefix) {
    std::ifstream in(prefix + ".meta.json");
    if (!in) throw AgentError("cannot read " + prefix + ".meta.json");
    nlohmann::json meta = nlohmann::json::parse(in);

    AgentConfig cfg;
    const auto& j = meta.at("config");
    cfg.n = j.at("n").get<int>();
    cfg.s_size = j.at("s_size").get<int>();
    cfg.t_size = j.at("t_size").get<int>();
    cfg.emb_dim = j.at("emb_dim").get<int>();
    cfg.hidden = j.at("hidden").get<int>();
    cfg.lr = j.at("lr").get<double>();
    cfg.alpha_lr = j.at("alpha_lr").get<double>();
    cfg.alpha_init = j.at("alpha_init").get<double>();
    cfg.target_entropy = j.at("target_entropy").get<double>();
    cfg.eta = j.at("eta").get<double>();
    cfg.soft_lambda = j.at("soft_lambda").get<double>();
    cfg.buffer_capacity = j.at("buffer_capacity").get<int>();
    cfg.min_buffer = j.at("min_buffer").get<int>();
    cfg.batch = j.at("batch").get<int>();
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.xi_prime_override = j.at("xi_prime_override").is_null()
                                ? std::numeric_limits<double>::quiet_NaN()
                                : j.at("xi_prime_override").get<double>();

    if (meta.at("config_fnv").get<std::string>() != hash_hex(fnv1a64(config_json(cfg).dump())))
        throw AgentError("agent checkpoint config hash mismatch");

    DiscreteSac agent(cfg);
    auto stored = nn::load_tensors(prefix);
    auto restore = [&stored](nn::Parameter& p) {
        auto it = stored.find(p.name);
        if (it == stored.end()) throw AgentError("checkpoint missing tensor " + p.name);
        if (!it->second.same_shape(p.value))
            throw AgentError("checkpoint shape mismatch for " + p.name);
        p.value = it->second;
    };
    for (auto* net : {&agent.policy(), &agent.q1(), &agent.q2(), &agent.target1(),
                      &agent.target2()})
        for (auto* p : net->parameters()) restore(*p);
    restore(agent.log_alpha_param());
    return agent;
}

}  // namespace flowmimic
