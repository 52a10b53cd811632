#include "flowmimic/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "flowmimic/hash.hpp"
#include "flowmimic/stats.hpp"
#include "json.hpp"

namespace flowmimic {

namespace fs = std::filesystem;

namespace {

constexpr uint64_t kSeedBenignTrain = 0x62656e2d7472ull;
constexpr uint64_t kSeedBenignEval = 0x62656e2d6576ull;
constexpr uint64_t kSeedMalTrain = 0x6d616c2d7472ull;
constexpr uint64_t kSeedMalEval = 0x6d616c2d6576ull;
constexpr uint64_t kSeedEncoderInit = 0x656e632d696eull;
constexpr uint64_t kSeedMaskEval = 0x6d736b2d6576ull;
constexpr uint64_t kSeedNoise = 0x6e6f697365ull;
constexpr uint64_t kSeedAblation = 0x61626c617465ull;

template <typename Fn>
auto guarded(const std::string& stage, Fn&& fn) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(stage, e.what());
    }
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
    if (!out) throw std::runtime_error("short write to " + path);
}

nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    nlohmann::json j;
    in >> j;
    return j;
}

uint64_t file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return fnv1a64(buf.str());
}

// nlohmann cannot represent infinities; xi_prime = +inf (no calibration
// data) round-trips through null.
nlohmann::json xi_prime_json(double v) {
    if (std::isfinite(v)) return v;
    return nullptr;
}

double xi_prime_from_json(const nlohmann::json& v) {
    if (v.is_null()) return std::numeric_limits<double>::infinity();
    return v.get<double>();
}

void merge_perf(const RunPaths& paths, const std::string& section, const nlohmann::json& value) {
    nlohmann::json j;
    if (fs::exists(paths.perf)) j = read_json(paths.perf);
    for (const auto& item : value.items()) j[section][item.key()] = item.value();
    write_text(paths.perf, j.dump(2) + "\n");
}

template <typename Fn>
auto timed_stage(const RunPaths& paths, const std::string& name, Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    if constexpr (std::is_void_v<decltype(fn())>) {
        fn();
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        merge_perf(paths, "stage_seconds", {{name, secs}});
    } else {
        auto out = fn();
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        merge_perf(paths, "stage_seconds", {{name, secs}});
        return out;
    }
}

StepStats step_stats(const std::vector<double>& steps) {
    StepStats s;
    if (steps.empty()) return s;
    s.mean = stats::mean(steps);
    s.p50 = stats::quantile(steps, 0.50);
    s.p90 = stats::quantile(steps, 0.90);
    s.max = static_cast<int>(stats::maximum(steps));
    return s;
}

nlohmann::json report_json(const EvalReport& r) {
    nlohmann::json j;
    j["flows"] = r.flows;
    j["evaded"] = r.evaded;
    j["asr"] = r.asr;
    j["steps"] = {{"mean", r.steps.mean}, {"p50", r.steps.p50}, {"p90", r.steps.p90}, {"max", r.steps.max}};
    j["bandwidth_kl"] = r.bandwidth_kl;
    j["detector"] = {{"f1", r.detector_f1}, {"auc", r.detector_auc}};
    j["train"] = {{"episodes", r.train_episodes},
                  {"probes", r.train_probes},
                  {"xi_prime", xi_prime_json(r.xi_prime)},
                  {"budget_exhausted", r.budget_exhausted}};
    j["artifacts"] = r.artifact_hashes;
    return j;
}

InferConfig infer_config_for(const ExperimentConfig& cfg, double xi_prime) {
    InferConfig icfg;
    icfg.tau = cfg.env.tau;
    icfg.beta = cfg.env.beta;
    icfg.gamma = cfg.env.gamma;
    icfg.effect = cfg.env.effect;
    icfg.fill = cfg.env.fill;
    icfg.xi_prime = xi_prime;
    return icfg;
}

std::map<std::string, std::string> artifact_hashes(const ExperimentConfig& cfg,
                                                   const RunPaths& paths) {
    return {{"config", hash_hex(config_fingerprint(cfg))},
            {"vocab", hash_hex(file_hash(paths.vocab))},
            {"encoder", hash_hex(file_hash(paths.encoder_prefix + ".bin"))},
            {"detector", hash_hex(file_hash(paths.detector_prefix + ".bin"))},
            {"agent", hash_hex(file_hash(paths.agent_prefix + ".bin"))}};
}

// Verdict sweep shared by eval and ablation: query the plain detector on
// each adversarial flow and aggregate.
EvalReport score_adversarial(const ExperimentConfig& cfg, const RunPaths& paths,
                             DetectorOracle& det, const std::vector<Flow>& originals,
                             const std::vector<Flow>& adversarial,
                             const std::map<std::string, int>& steps_by_id,
                             std::string* verdict_csv) {
    EvalReport rep;
    rep.flows = static_cast<int>(adversarial.size());
    std::vector<double> steps;
    std::ostringstream csv;
    csv << "flow_id,flagged,steps\n";
    for (const auto& f : adversarial) {
        const auto it = steps_by_id.find(f.id);
        if (it == steps_by_id.end())
            throw std::runtime_error("no inference record for flow " + f.id);
        const bool passed = det.query(f).flow_passed;
        rep.evaded += passed ? 1 : 0;
        csv << f.id << ',' << (passed ? 0 : 1) << ',' << it->second << '\n';
        steps.push_back(static_cast<double>(it->second));
    }
    rep.asr = rep.flows > 0 ? static_cast<double>(rep.evaded) / rep.flows : 0.0;
    rep.steps = step_stats(steps);
    rep.bandwidth_kl = bandwidth_kl(originals, adversarial);

    const auto dj = read_json(paths.detector_eval);
    rep.detector_f1 = dj.at("f1").get<double>();
    rep.detector_auc = dj.at("auc").get<double>();
    const auto tj = read_json(paths.train_report);
    rep.train_episodes = tj.at("episodes").get<int>();
    rep.train_probes = tj.at("probes").get<int64_t>();
    rep.xi_prime = xi_prime_from_json(tj.at("xi_prime"));
    rep.budget_exhausted = tj.at("budget_exhausted").get<bool>();
    rep.artifact_hashes = artifact_hashes(cfg, paths);
    if (verdict_csv) *verdict_csv = csv.str();
    return rep;
}

std::map<std::string, int> read_infer_steps(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::map<std::string, int> by_id;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        by_id[j.at("id").get<std::string>()] = j.at("steps").get<int>();
    }
    return by_id;
}

}  // namespace

RunPaths RunPaths::under(const std::string& root) {
    RunPaths p;
    p.root = root;
    const auto at = [&](const char* name) { return (fs::path(root) / name).string(); };
    p.resolved_config = at("config.resolved.json");
    p.benign_train = at("benign_train.csv");
    p.benign_eval = at("benign_eval.csv");
    p.malicious_train = at("malicious_train.csv");
    p.malicious_eval = at("malicious_eval.csv");
    p.vocab = at("vocab.json");
    p.encoder_prefix = at("encoder");
    p.detector_prefix = at("detector");
    p.agent_prefix = at("agent");
    p.pretrain_curve = at("pretrain_curve.csv");
    p.pretrain_report = at("pretrain_report.json");
    p.detector_eval = at("detector_eval.json");
    p.train_log = at("train_log.jsonl");
    p.train_report = at("train_report.json");
    p.maxq_curve = at("maxq_curve.csv");
    p.adversarial = at("adversarial.csv");
    p.infer_log = at("infer_log.jsonl");
    p.verdicts = at("verdicts.csv");
    p.report = at("report.json");
    p.perf = at("perf.json");
    p.ablation_report = at("ablation.json");
    return p;
}

void stage_gen_data(const ExperimentConfig& cfg, const RunPaths& paths) {
    guarded("gen-data", [&] {
        fs::create_directories(paths.root);
        save_flows_csv(paths.benign_train,
                       synth_benign(cfg.data.benign_train, cfg.seed ^ kSeedBenignTrain));
        save_flows_csv(paths.benign_eval,
                       synth_benign(cfg.data.benign_eval, cfg.seed ^ kSeedBenignEval));
        save_flows_csv(paths.malicious_train,
                       synth_malicious(cfg.data.malicious_train, cfg.seed ^ kSeedMalTrain,
                                       cfg.data.attack));
        save_flows_csv(paths.malicious_eval,
                       synth_malicious(cfg.data.malicious_eval, cfg.seed ^ kSeedMalEval,
                                       cfg.data.attack));
    });
}

void stage_build_vocab(const ExperimentConfig& cfg, const RunPaths& paths) {
    guarded("build-vocab", [&] {
        const auto benign = load_flows_csv(paths.benign_train);
        const Vocabulary vocab = build_vocab(benign, cfg.vocab);
        save_vocab_json(paths.vocab, vocab);
    });
}

void stage_pretrain(const ExperimentConfig& cfg, const RunPaths& paths) {
    guarded("pretrain", [&] {
        const auto benign = load_flows_csv(paths.benign_train);
        const Vocabulary vocab = load_vocab_json(paths.vocab);
        std::vector<ChunkSet> corpus;
        corpus.reserve(benign.size());
        for (const auto& f : benign) corpus.push_back(tokenize(f, vocab, cfg.encoder.n));

        EncoderModel model = EncoderModel::init(cfg.encoder, cfg.seed ^ kSeedEncoderInit);
        const PretrainReport rep = pretrain(corpus, model, vocab, cfg.pretrain);
        save_encoder(paths.encoder_prefix, model, vocab);

        std::ostringstream csv;
        csv << "step,loss\n" << std::setprecision(10);
        for (size_t i = 0; i < rep.loss_curve.size(); ++i)
            csv << i << ',' << rep.loss_curve[i] << '\n';
        write_text(paths.pretrain_curve, csv.str());

        const auto held_out = load_flows_csv(paths.benign_eval);
        std::vector<ChunkSet> eval_corpus;
        eval_corpus.reserve(held_out.size());
        for (const auto& f : held_out) eval_corpus.push_back(tokenize(f, vocab, cfg.encoder.n));
        double accuracy = 0.0;
        const double eval_loss =
            masked_eval_loss(eval_corpus, model, vocab, cfg.seed ^ kSeedMaskEval, &accuracy);

        nlohmann::json pj;
        pj["step0_loss"] = rep.step0_loss;
        pj["final_loss"] = rep.final_loss;
        pj["eval_masked_loss"] = eval_loss;
        pj["eval_masked_accuracy"] = accuracy;
        write_text(paths.pretrain_report, pj.dump(2) + "\n");
    });
}

void stage_train_detector(const ExperimentConfig& cfg, const RunPaths& paths) {
    guarded("train-detector", [&] {
        const auto benign = load_flows_csv(paths.benign_train);
        const auto malicious = load_flows_csv(paths.malicious_train);
        std::unique_ptr<DetectorOracle> det;
        if (cfg.detector.kind == "threshold")
            det = train_threshold(benign, cfg.detector.quantile);
        else if (cfg.detector.kind == "mlp")
            det = train_mlp(benign, malicious, cfg.detector.mlp);
        else
            det = train_centroid(benign, cfg.detector.centroid);
        save_detector(paths.detector_prefix, *det);

        const auto quality = evaluate_detector(*det, load_flows_csv(paths.benign_eval),
                                               load_flows_csv(paths.malicious_eval));
        nlohmann::json j;
        j["kind"] = det->kind();
        j["precision"] = quality.precision;
        j["recall"] = quality.recall;
        j["f1"] = quality.f1;
        j["fpr"] = quality.fpr;
        j["accuracy"] = quality.accuracy;
        j["auc"] = quality.auc;
        write_text(paths.detector_eval, j.dump(2) + "\n");
    });
}

void stage_attack_train(const ExperimentConfig& cfg, const RunPaths& paths) {
    guarded("attack-train", [&] {
        const Vocabulary vocab = load_vocab_json(paths.vocab);
        const EncoderModel encoder = load_encoder(paths.encoder_prefix, vocab);
        const auto malicious = load_flows_csv(paths.malicious_train);
        if (malicious.empty()) throw std::runtime_error("no training flows in " + paths.malicious_train);

        std::unique_ptr<DetectorOracle> oracle = load_detector(paths.detector_prefix);
        if (cfg.detector.noise_p > 0.0)
            oracle = with_noise(std::move(oracle), cfg.detector.noise_p, cfg.seed ^ kSeedNoise);
        if (cfg.detector.probe_budget > 0)
            oracle = with_budget(std::move(oracle), cfg.detector.probe_budget);

        DiscreteSac agent(cfg.agent);
        ReplayBuffer buffer(static_cast<size_t>(cfg.agent.buffer_capacity));
        const auto factory = [&](int episode) {
            const auto& flow = malicious[static_cast<size_t>(episode) % malicious.size()];
            return std::make_unique<AttackEnv>(flow, encoder, vocab, *oracle, cfg.env);
        };
        const TrainReport rep = train_agent(agent, buffer, factory, cfg.train);
        save_agent(paths.agent_prefix, agent);

        std::ostringstream log;
        for (const auto& ep : rep.episodes) log << log_line(ep) << '\n';
        write_text(paths.train_log, log.str());

        std::ostringstream csv;
        csv << "episode,steps,evaded_ratio,max_q,alpha,success\n" << std::setprecision(10);
        for (const auto& ep : rep.episodes)
            csv << ep.episode << ',' << ep.steps << ',' << ep.evaded_ratio << ',' << ep.max_q
                << ',' << ep.alpha << ',' << (ep.success ? 1 : 0) << '\n';
        write_text(paths.maxq_curve, csv.str());

        int successes = 0;
        for (const auto& ep : rep.episodes) successes += ep.success ? 1 : 0;
        nlohmann::json tj;
        tj["episodes"] = static_cast<int>(rep.episodes.size());
        tj["successes"] = successes;
        tj["xi_prime"] = xi_prime_json(rep.xi_prime);
        tj["budget_exhausted"] = rep.budget_exhausted;
        tj["probes"] = oracle->probe_count();
        write_text(paths.train_report, tj.dump(2) + "\n");
    });
}

void stage_attack_infer(const ExperimentConfig& cfg, const RunPaths& paths) {
    guarded("attack-infer", [&] {
        const Vocabulary vocab = load_vocab_json(paths.vocab);
        const EncoderModel encoder = load_encoder(paths.encoder_prefix, vocab);
        const DiscreteSac agent = load_agent(paths.agent_prefix);
        const auto malicious = load_flows_csv(paths.malicious_eval);
        const auto tj = read_json(paths.train_report);
        const InferConfig icfg = infer_config_for(cfg, xi_prime_from_json(tj.at("xi_prime")));

        const auto t0 = std::chrono::steady_clock::now();
        std::vector<Flow> adversarial;
        adversarial.reserve(malicious.size());
        size_t packets = 0;
        std::ostringstream log;
        for (const auto& f : malicious) {
            InferResult res = infer(agent, encoder, vocab, f, icfg);
            packets += res.adversarial.pkts.size();
            nlohmann::json line;
            line["id"] = f.id;
            line["steps"] = res.steps;
            line["actions"] = res.actions;
            log << line.dump() << '\n';
            adversarial.push_back(std::move(res.adversarial));
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        save_flows_csv(paths.adversarial, adversarial);
        write_text(paths.infer_log, log.str());
        merge_perf(paths, "throughput",
                   {{"infer_seconds", secs},
                    {"flows_per_s", secs > 0 ? static_cast<double>(malicious.size()) / secs : 0.0},
                    {"packets_per_s", secs > 0 ? static_cast<double>(packets) / secs : 0.0}});
    });
}

EvalReport stage_eval(const ExperimentConfig& cfg, const RunPaths& paths) {
    return guarded("eval", [&]() -> EvalReport {
        const auto det = load_detector(paths.detector_prefix);
        const auto originals = load_flows_csv(paths.malicious_eval);
        const auto adversarial = load_flows_csv(paths.adversarial);
        const auto steps_by_id = read_infer_steps(paths.infer_log);

        std::string verdicts;
        EvalReport rep =
            score_adversarial(cfg, paths, *det, originals, adversarial, steps_by_id, &verdicts);
        write_text(paths.verdicts, verdicts);
        write_text(paths.report, report_json(rep).dump(2) + "\n");
        return rep;
    });
}

EvalReport run_pipeline(const ExperimentConfig& cfg) {
    const RunPaths paths = RunPaths::under(cfg.out_dir);
    guarded("pipeline", [&] {
        fs::create_directories(paths.root);
        write_text(paths.resolved_config, resolved_json(cfg));
    });
    timed_stage(paths, "gen-data", [&] { stage_gen_data(cfg, paths); });
    timed_stage(paths, "build-vocab", [&] { stage_build_vocab(cfg, paths); });
    timed_stage(paths, "pretrain", [&] { stage_pretrain(cfg, paths); });
    timed_stage(paths, "train-detector", [&] { stage_train_detector(cfg, paths); });
    timed_stage(paths, "attack-train", [&] { stage_attack_train(cfg, paths); });
    timed_stage(paths, "attack-infer", [&] { stage_attack_infer(cfg, paths); });
    return timed_stage(paths, "eval", [&] { return stage_eval(cfg, paths); });
}

EvalReport run_stage(const std::string& name, const ExperimentConfig& cfg) {
    const RunPaths paths = RunPaths::under(cfg.out_dir);
    guarded(name, [&] {
        fs::create_directories(paths.root);
        write_text(paths.resolved_config, resolved_json(cfg));
    });
    if (name == "gen-data") {
        timed_stage(paths, name, [&] { stage_gen_data(cfg, paths); });
    } else if (name == "build-vocab") {
        timed_stage(paths, name, [&] { stage_build_vocab(cfg, paths); });
    } else if (name == "pretrain") {
        timed_stage(paths, name, [&] { stage_pretrain(cfg, paths); });
    } else if (name == "train-detector") {
        timed_stage(paths, name, [&] { stage_train_detector(cfg, paths); });
    } else if (name == "attack-train") {
        timed_stage(paths, name, [&] { stage_attack_train(cfg, paths); });
    } else if (name == "attack-infer") {
        timed_stage(paths, name, [&] { stage_attack_infer(cfg, paths); });
    } else if (name == "eval") {
        return timed_stage(paths, name, [&] { return stage_eval(cfg, paths); });
    } else {
        throw StageError(name, "unknown stage");
    }
    return EvalReport{};
}

AblationMode ablation_mode_from_string(const std::string& s) {
    if (s == "S1" || s == "s1") return AblationMode::s1;
    if (s == "S2_S" || s == "s2_s") return AblationMode::s2_s;
    if (s == "S2_F" || s == "s2_f") return AblationMode::s2_f;
    if (s == "full") return AblationMode::full;
    throw ConfigError("unknown ablation mode: " + s);
}

std::string to_string(AblationMode m) {
    switch (m) {
        case AblationMode::s1: return "S1";
        case AblationMode::s2_s: return "S2_S";
        case AblationMode::s2_f: return "S2_F";
        case AblationMode::full: return "full";
    }
    throw ConfigError("unrepresentable ablation mode");
}

TokenPair ablation_fill(const TokenPair& pair, AblationMode mode, const Flow& segment,
                        const Vocabulary& vocab, uint64_t seed) {
    if (mode != AblationMode::s2_s && mode != AblationMode::s2_f)
        throw std::invalid_argument("ablation_fill applies to the S2 modes only");

    std::vector<double> sizes;
    for (const auto& p : segment.pkts) sizes.push_back(static_cast<double>(p.size));
    // Real gaps only: the structural zero in front of the first packet is
    // not part of the feature distribution being imitated.
    std::vector<double> gaps = segment.ipds();
    if (gaps.size() > 1) gaps.erase(gaps.begin());

    const double size_lo = stats::minimum(sizes), size_hi = stats::maximum(sizes);
    const double size_mean = stats::mean(sizes);
    const double gap_lo = stats::minimum(gaps), gap_hi = stats::maximum(gaps);
    const double gap_mean = stats::mean(gaps);

    Rng rng(seed);
    TokenPair out = pair;
    for (int i = 0; i < out.valid_len; ++i) {
        const auto slot = static_cast<size_t>(i);
        if (out.size_tokens[slot] == vocab.size_mask()) {
            const double v = mode == AblationMode::s2_f
                                 ? size_mean
                                 : rng.uniform(size_lo, size_hi);
            const int bytes = std::clamp(static_cast<int>(std::llround(v)), 1, vocab.mtu);
            out.size_tokens[slot] = vocab.size_token(bytes);
        }
        if (out.ipd_tokens[slot] == vocab.ipd_mask()) {
            const double v = mode == AblationMode::s2_f ? gap_mean : rng.uniform(gap_lo, gap_hi);
            out.ipd_tokens[slot] = vocab.ipd_token(v);
        }
    }
    return out;
}

InferResult infer_ablation(AblationMode mode, const DiscreteSac& agent,
                           const EncoderModel& encoder, const Vocabulary& vocab, const Flow& flow,
                           const InferConfig& icfg, uint64_t seed) {
    if (mode == AblationMode::full) return infer(agent, encoder, vocab, flow, icfg);
    if (flow.pkts.empty()) throw AgentError("cannot attack an empty flow");

    const int n = encoder.cfg.n;
    InferResult res;
    res.adversarial.id = flow.id;
    res.adversarial.label = FlowLabel::malicious;
    Rng unused(0);
    const uint64_t flow_seed = seed ^ fnv1a64(flow.id);

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

        Rng pos_rng(flow_seed ^ (0x5151ull * (start + 1)));
        for (int t = 0; t < icfg.tau; ++t) {
            const auto mask = action_mask(s.pair, n);
            int a;
            double q = 0.0;
            if (mode == AblationMode::s1) {
                std::vector<int> valid;
                for (size_t i = 0; i < mask.size(); ++i)
                    if (mask[i]) valid.push_back(static_cast<int>(i));
                a = valid[static_cast<size_t>(
                    pos_rng.uniform_int(0, static_cast<int64_t>(valid.size()) - 1))];
            } else {
                a = agent.select_action(s.pair, mask, SelectMode::greedy, unused);
                q = agent.max_q(s.pair, a);
            }
            s = apply_action(s, a, vocab);
            if (mode == AblationMode::s1)
                s.pair = fill(s.pair, encoder, vocab, icfg.fill);
            else
                s.pair = ablation_fill(s.pair, mode, seg, vocab,
                                       flow_seed ^ (0xf1ull * (start + 1)) ^
                                           (0x9e37ull * static_cast<uint64_t>(t + 1)));
            res.actions.push_back(a);
            res.q_values.push_back(q);
            res.steps += 1;

            if (mode == AblationMode::s1) continue;  // no learned stop signal
            double threshold = icfg.xi_prime;
            if (icfg.effect == EffectKind::rate) {
                Flow cur;
                cur.pkts = detokenize(s.pair, vocab, base);
                for (size_t i = 0; i < cur.pkts.size(); ++i) cur.pkts[i].chaff = s.chaff[i] != 0;
                const double r_m = effectiveness_penalty(baseline, non_chaff_view(cur), icfg.effect);
                threshold = icfg.xi_prime + icfg.beta - icfg.gamma * r_m;
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

std::map<std::string, EvalReport> run_ablation(const ExperimentConfig& cfg,
                                               const std::vector<AblationMode>& modes) {
    const RunPaths paths = RunPaths::under(cfg.out_dir);
    return guarded("ablate", [&]() -> std::map<std::string, EvalReport> {
        const Vocabulary vocab = load_vocab_json(paths.vocab);
        const EncoderModel encoder = load_encoder(paths.encoder_prefix, vocab);
        const DiscreteSac agent = load_agent(paths.agent_prefix);
        const auto det = load_detector(paths.detector_prefix);
        const auto originals = load_flows_csv(paths.malicious_eval);
        const auto tj = read_json(paths.train_report);
        const InferConfig icfg = infer_config_for(cfg, xi_prime_from_json(tj.at("xi_prime")));

        std::map<std::string, EvalReport> out;
        nlohmann::json all;
        for (const AblationMode mode : modes) {
            std::vector<Flow> adversarial;
            adversarial.reserve(originals.size());
            std::map<std::string, int> steps_by_id;
            for (const auto& f : originals) {
                InferResult res =
                    infer_ablation(mode, agent, encoder, vocab, f, icfg, cfg.seed ^ kSeedAblation);
                steps_by_id[f.id] = res.steps;
                adversarial.push_back(std::move(res.adversarial));
            }
            EvalReport rep = score_adversarial(cfg, paths, *det, originals, adversarial,
                                               steps_by_id, nullptr);
            all[to_string(mode)] = report_json(rep);
            out[to_string(mode)] = std::move(rep);
        }
        write_text(paths.ablation_report, all.dump(2) + "\n");
        return out;
    });
}

}  // namespace flowmimic
