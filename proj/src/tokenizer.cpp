#include "flowmimic/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace flowmimic {

namespace {

// Linear-interpolation quantile over an already sorted sample.
double quantile_sorted(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto idx = static_cast<size_t>(pos);
    if (idx + 1 >= sorted.size()) return sorted.back();
    const double frac = pos - static_cast<double>(idx);
    return sorted[idx] * (1.0 - frac) + sorted[idx + 1] * frac;
}

void validate_config(const VocabConfig& cfg) {
    if (cfg.ipd_value_bins < 1) throw TokenizerError("vocab config: need at least one IPD bin");
    if (!(cfg.log10_low < cfg.log10_high))
        throw TokenizerError("vocab config: log10 range is empty");
    if (cfg.mtu < 1) throw TokenizerError("vocab config: mtu must be positive");
    if (cfg.size_capacity < cfg.mtu + 4)
        throw TokenizerError("vocab config: size capacity too small for mtu plus specials");
}

}  // namespace

int Vocabulary::size_token(int bytes) const {
    if (bytes < 1) throw TokenizerError("size_token: non-positive packet size " + std::to_string(bytes));
    return bytes <= mtu ? bytes : size_unk();
}

int Vocabulary::ipd_token(double seconds) const {
    if (seconds <= 0.0) return 0;
    const double low = ipd_edges.front();
    const double high = ipd_edges.back();
    const double lg = std::clamp(std::log10(seconds), low, high);
    auto it = std::upper_bound(ipd_edges.begin(), ipd_edges.end(), lg);
    int bin = static_cast<int>(it - ipd_edges.begin()) - 1;
    return std::clamp(bin, 0, ipd_value_bins() - 1);
}

int Vocabulary::size_value(int token) const {
    if (token >= 1 && token <= mtu) return token;
    if (token == size_unk()) return mtu;
    throw TokenizerError("size_value: token " + std::to_string(token) + " has no byte value");
}

double Vocabulary::ipd_representative(int token) const {
    if (token >= 0 && token < ipd_value_bins())
        return std::pow(10.0, 0.5 * (ipd_edges[token] + ipd_edges[token + 1]));
    if (token == ipd_unk())
        return std::pow(10.0, 0.5 * (ipd_edges[ipd_value_bins() - 1] + ipd_edges.back()));
    throw TokenizerError("ipd_representative: token " + std::to_string(token) +
                         " has no delay value");
}

Vocabulary build_vocab(const std::vector<Flow>& benign, const VocabConfig& cfg) {
    validate_config(cfg);
    if (benign.empty()) throw TokenizerError("build_vocab: empty corpus");

    std::vector<double> lg;
    for (const auto& f : benign) {
        const auto d = f.ipds();
        for (size_t i = 1; i < d.size(); ++i)
            if (d[i] > 0.0) lg.push_back(std::log10(d[i]));
    }
    if (lg.empty()) throw TokenizerError("build_vocab: corpus has no positive inter-packet delays");
    std::sort(lg.begin(), lg.end());

    Vocabulary v;
    v.mtu = cfg.mtu;
    v.size_capacity = cfg.size_capacity;
    v.ipd_edges.resize(static_cast<size_t>(cfg.ipd_value_bins) + 1);
    v.ipd_edges.front() = cfg.log10_low;
    v.ipd_edges.back() = cfg.log10_high;
    for (int k = 1; k < cfg.ipd_value_bins; ++k) {
        double e = quantile_sorted(lg, static_cast<double>(k) / cfg.ipd_value_bins);
        e = std::clamp(e, cfg.log10_low, cfg.log10_high);
        // degenerate corpora can collapse neighbouring quantiles; keep edges strict
        if (e <= v.ipd_edges[k - 1]) e = v.ipd_edges[k - 1] + 1e-9;
        v.ipd_edges[k] = e;
    }
    if (v.ipd_edges[cfg.ipd_value_bins - 1] >= cfg.log10_high)
        throw TokenizerError("build_vocab: bin edges overflow the configured log10 range");
    return v;
}

void save_vocab_json(const std::string& path, const Vocabulary& vocab) {
    nlohmann::json j;
    j["version"] = 1;
    j["mtu"] = vocab.mtu;
    j["size_capacity"] = vocab.size_capacity;
    j["ipd_bin_edges"] = vocab.ipd_edges;
    j["special_ids"] = {{"size_pad", vocab.size_pad()},   {"size_mask", vocab.size_mask()},
                        {"size_unk", vocab.size_unk()},   {"ipd_pad", vocab.ipd_pad()},
                        {"ipd_mask", vocab.ipd_mask()},   {"ipd_unk", vocab.ipd_unk()}};
    std::ofstream out(path);
    if (!out) throw TokenizerError("save_vocab_json: cannot open " + path);
    out << j.dump(2) << "\n";
}

Vocabulary load_vocab_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw TokenizerError("load_vocab_json: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw TokenizerError("load_vocab_json: " + path + ": " + e.what());
    }
    if (!j.contains("version") || j["version"].get<int>() != 1)
        throw TokenizerError("load_vocab_json: unsupported vocabulary version in " + path);

    Vocabulary v;
    v.mtu = j.at("mtu").get<int>();
    v.size_capacity = j.at("size_capacity").get<int>();
    v.ipd_edges = j.at("ipd_bin_edges").get<std::vector<double>>();
    if (v.ipd_edges.size() < 2) throw TokenizerError("load_vocab_json: too few bin edges");
    for (size_t i = 1; i < v.ipd_edges.size(); ++i)
        if (!(v.ipd_edges[i] > v.ipd_edges[i - 1]))
            throw TokenizerError("load_vocab_json: bin edges not strictly increasing");

    const auto& ids = j.at("special_ids");
    if (ids.at("size_pad").get<int>() != v.size_pad() ||
        ids.at("size_mask").get<int>() != v.size_mask() ||
        ids.at("size_unk").get<int>() != v.size_unk() ||
        ids.at("ipd_pad").get<int>() != v.ipd_pad() ||
        ids.at("ipd_mask").get<int>() != v.ipd_mask() ||
        ids.at("ipd_unk").get<int>() != v.ipd_unk())
        throw TokenizerError("load_vocab_json: special ids disagree with mtu/bin layout");
    return v;
}

int choose_n(const std::vector<Flow>& corpus) {
    if (corpus.empty()) throw TokenizerError("choose_n: empty corpus");
    std::vector<size_t> lens;
    lens.reserve(corpus.size());
    for (const auto& f : corpus) lens.push_back(f.pkts.size());
    std::sort(lens.begin(), lens.end());
    const size_t rank = static_cast<size_t>(std::ceil(0.99 * static_cast<double>(lens.size())));
    const size_t q = lens[rank == 0 ? 0 : rank - 1];

    if (q <= 1) return 1;
    size_t lo = 1;
    while (lo * 2 <= q) lo *= 2;
    if (lo == q) return static_cast<int>(q);
    const size_t hi = lo * 2;
    return static_cast<int>(hi - q <= q - lo ? hi : lo);
}

ChunkSet tokenize(const Flow& flow, const Vocabulary& vocab, int n) {
    if (n < 1) throw TokenizerError("tokenize: window length must be positive");
    if (flow.pkts.empty()) throw TokenizerError("tokenize: empty flow " + flow.id);

    const int m = static_cast<int>(flow.pkts.size());
    const auto gaps = flow.ipds();
    std::vector<int> size_all(m), ipd_all(m);
    for (int i = 0; i < m; ++i) {
        size_all[i] = vocab.size_token(flow.pkts[i].size);
        ipd_all[i] = vocab.ipd_token(gaps[i]);
    }

    ChunkSet set;
    set.flow_id = flow.id;
    const int chunk_count = m <= n ? 1 : m - n + 1;
    for (int c = 0; c < chunk_count; ++c) {
        TokenPair pair;
        pair.size_tokens.resize(n, vocab.size_pad());
        pair.ipd_tokens.resize(n, vocab.ipd_pad());
        pair.positions.resize(n);
        pair.valid_len = std::min(n, m - c);
        for (int k = 0; k < pair.valid_len; ++k) {
            pair.size_tokens[k] = size_all[c + k];
            pair.ipd_tokens[k] = ipd_all[c + k];
        }
        for (int k = 0; k < n; ++k) pair.positions[k] = c + k;
        set.chunks.push_back(std::move(pair));
    }
    return set;
}

std::vector<PacketEvent> detokenize(const TokenPair& pair, const Vocabulary& vocab,
                                    double base_time) {
    if (pair.size_tokens.size() != pair.ipd_tokens.size())
        throw TokenizerError("detokenize: stream lengths differ");

    std::vector<PacketEvent> pkts;
    double t = base_time;
    for (size_t k = 0; k < pair.size_tokens.size(); ++k) {
        const bool size_pad = pair.size_tokens[k] == vocab.size_pad();
        const bool ipd_pad = pair.ipd_tokens[k] == vocab.ipd_pad();
        if (size_pad != ipd_pad)
            throw TokenizerError("detokenize: padding disagrees across streams at slot " +
                                 std::to_string(k));
        if (size_pad) continue;
        if (pair.size_tokens[k] == vocab.size_mask() || pair.ipd_tokens[k] == vocab.ipd_mask())
            throw TokenizerError("detokenize: unfilled mask at slot " + std::to_string(k));
        t += vocab.ipd_representative(pair.ipd_tokens[k]);
        pkts.push_back({t, vocab.size_value(pair.size_tokens[k]), false});
    }
    return pkts;
}

}  // namespace flowmimic
