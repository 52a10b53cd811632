#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>

#include "flowmimic/rng.hpp"
#include "flowmimic/tokenizer.hpp"

using namespace flowmimic;

namespace {

// Corpus whose log10 gaps are uniform on [-6, -2], built directly so the
// balancing claim does not lean on the synthetic traffic generator.
std::vector<Flow> uniform_log_corpus(int flows, int pkts_per_flow, uint64_t seed) {
    Rng rng(seed);
    std::vector<Flow> out;
    for (int i = 0; i < flows; ++i) {
        Flow f;
        f.id = "u" + std::to_string(i);
        double t = 0.0;
        for (int k = 0; k < pkts_per_flow; ++k) {
            if (k > 0) t += std::pow(10.0, rng.uniform(-6.0, -2.0));
            f.pkts.push_back({t, 100, false});
        }
        out.push_back(std::move(f));
    }
    return out;
}

std::vector<Flow> const_length_corpus(int flows, int len) {
    std::vector<Flow> out;
    for (int i = 0; i < flows; ++i) {
        Flow f;
        f.id = "c" + std::to_string(i);
        for (int k = 0; k < len; ++k) f.pkts.push_back({k * 1e-3, 64, false});
        out.push_back(std::move(f));
    }
    return out;
}

int linear_scan_bin(const Vocabulary& v, double lg) {
    for (int b = 0; b < v.ipd_value_bins(); ++b)
        if (lg >= v.ipd_edges[b] && lg < v.ipd_edges[b + 1]) return b;
    return v.ipd_value_bins() - 1;  // lg == top edge
}

}  // namespace

TEST_CASE("quantile bins balance a uniform corpus") {
    auto corpus = uniform_log_corpus(100, 531, 17);
    auto v = build_vocab(corpus);
    REQUIRE(v.ipd_value_bins() == 53);
    CHECK(v.ipd_edges.front() == -7.0);
    CHECK(v.ipd_edges.back() == 3.0);
    for (size_t i = 1; i < v.ipd_edges.size(); ++i) CHECK(v.ipd_edges[i] > v.ipd_edges[i - 1]);

    std::vector<int> occupancy(53, 0);
    int total = 0;
    for (const auto& f : corpus) {
        auto d = f.ipds();
        for (size_t i = 1; i < d.size(); ++i) {
            ++occupancy[v.ipd_token(d[i])];
            ++total;
        }
    }
    const double expect = 1.0 / 53.0;
    for (int b = 0; b < 53; ++b) {
        const double share = static_cast<double>(occupancy[b]) / total;
        CHECK(std::abs(share - expect) < 0.02 * expect + 2.0 / total);
    }
}

TEST_CASE("size tokens are direct values with UNK above the mtu") {
    auto v = build_vocab(uniform_log_corpus(10, 50, 1));
    CHECK(v.size_token(1500) == 1500);
    CHECK(v.size_token(9000) == v.size_unk());
    CHECK(v.size_pad() == 1501);
    CHECK(v.size_mask() == 1502);
    CHECK(v.size_unk() == 1503);
    CHECK(v.size_capacity == 1606);
    for (int b = 1; b <= v.mtu; ++b) REQUIRE(v.size_value(v.size_token(b)) == b);
    CHECK(v.size_value(v.size_unk()) == v.mtu);
    CHECK_THROWS_AS((void)v.size_value(v.size_pad()), TokenizerError);
    CHECK_THROWS_AS((void)v.size_token(0), TokenizerError);
}

TEST_CASE("ipd special ids sit just past the value bins") {
    auto v = build_vocab(uniform_log_corpus(10, 50, 2));
    CHECK(v.ipd_pad() == 53);
    CHECK(v.ipd_mask() == 54);
    CHECK(v.ipd_unk() == 55);
    CHECK(v.ipd_capacity() == 56);
}

TEST_CASE("binary-search binning matches a linear scan and clamps the range") {
    auto v = build_vocab(uniform_log_corpus(60, 200, 3));
    CHECK(v.ipd_token(1e-3) == linear_scan_bin(v, -3.0));
    Rng rng(99);
    for (int i = 0; i < 5000; ++i) {
        const double lg = rng.uniform(-8.0, 4.0);
        const double clamped = std::clamp(lg, -7.0, 3.0);
        CHECK(v.ipd_token(std::pow(10.0, lg)) == linear_scan_bin(v, clamped));
    }
    CHECK(v.ipd_token(0.0) == 0);
    CHECK(v.ipd_token(-1.0) == 0);
    CHECK(v.ipd_token(1e-9) == 0);
    CHECK(v.ipd_token(1e5) == v.ipd_value_bins() - 1);
}

TEST_CASE("every bin representative re-tokenizes to its own bin") {
    auto v = build_vocab(synth_benign(400, 21));
    for (int b = 0; b < v.ipd_value_bins(); ++b) {
        const double rep = v.ipd_representative(b);
        CHECK(v.ipd_token(rep) == b);
    }
    CHECK_THROWS_AS((void)v.ipd_representative(v.ipd_pad()), TokenizerError);
    CHECK_THROWS_AS((void)v.ipd_representative(v.ipd_mask()), TokenizerError);
}

TEST_CASE("window length picks the power of two closest to the tail length, ties up") {
    CHECK(choose_n(const_length_corpus(100, 500)) == 512);
    CHECK(choose_n(const_length_corpus(100, 48)) == 64);
    CHECK(choose_n(const_length_corpus(100, 3)) == 4);
    CHECK(choose_n(const_length_corpus(100, 64)) == 64);
}

TEST_CASE("short flows pad, long flows chunk with shifted positions") {
    auto v = build_vocab(uniform_log_corpus(10, 50, 4));
    Flow shorty;
    shorty.id = "s";
    for (int k = 0; k < 3; ++k) shorty.pkts.push_back({k * 1e-4, 100 + k, false});
    auto set = tokenize(shorty, v, 8);
    REQUIRE(set.chunks.size() == 1);
    const auto& p = set.chunks[0];
    CHECK(p.valid_len == 3);
    for (int k = 3; k < 8; ++k) {
        CHECK(p.size_tokens[k] == v.size_pad());
        CHECK(p.ipd_tokens[k] == v.ipd_pad());
    }
    CHECK(p.size_tokens[0] == 100);
    for (int k = 0; k < 8; ++k) CHECK(p.positions[k] == k);

    Flow longy;
    longy.id = "l";
    for (int k = 0; k < 10; ++k) longy.pkts.push_back({k * 1e-4, 100 + k, false});
    auto lset = tokenize(longy, v, 8);
    REQUIRE(lset.chunks.size() == 3);
    for (int c = 0; c < 3; ++c) {
        CHECK(lset.chunks[c].valid_len == 8);
        CHECK(lset.chunks[c].positions[0] == c);
        CHECK(lset.chunks[c].size_tokens[0] == 100 + c);
    }
}

TEST_CASE("chunk count and pad alignment hold for randomized lengths") {
    auto v = build_vocab(uniform_log_corpus(10, 50, 5));
    Rng rng(6);
    const int n = 8;
    for (int trial = 0; trial < 200; ++trial) {
        const int m = static_cast<int>(rng.uniform_int(1, 4 * n));
        Flow f;
        f.id = "r";
        double t = 0.0;
        for (int k = 0; k < m; ++k) {
            t += rng.uniform(1e-5, 1e-3);
            f.pkts.push_back({t, static_cast<int>(rng.uniform_int(40, 1500)), false});
        }
        auto set = tokenize(f, v, n);
        const size_t expect = m <= n ? 1 : static_cast<size_t>(m - n + 1);
        CHECK(set.chunks.size() == expect);
        for (const auto& pair : set.chunks) {
            for (int k = 0; k < n; ++k) {
                CHECK((pair.size_tokens[k] == v.size_pad()) ==
                      (pair.ipd_tokens[k] == v.ipd_pad()));
                if (k > 0) CHECK(pair.positions[k] == pair.positions[k - 1] + 1);
            }
        }
    }
}

TEST_CASE("tokenize then detokenize keeps sizes exact and token ids stable") {
    auto v = build_vocab(synth_benign(400, 22));
    auto flows = synth_benign(30, 23);
    for (const auto& f : flows) {
        if (f.pkts.size() > 64) continue;
        auto set = tokenize(f, v, 64);
        REQUIRE(set.chunks.size() == 1);
        auto pkts = detokenize(set.chunks[0], v, f.pkts[0].time);
        REQUIRE(pkts.size() == f.pkts.size());
        for (size_t k = 0; k < pkts.size(); ++k) CHECK(pkts[k].size == f.pkts[k].size);

        Flow back;
        back.id = f.id;
        back.pkts = pkts;
        auto again = tokenize(back, v, 64);
        CHECK(again.chunks[0].ipd_tokens == set.chunks[0].ipd_tokens);
        CHECK(again.chunks[0].size_tokens == set.chunks[0].size_tokens);
    }
}

TEST_CASE("detokenize edge cases") {
    auto v = build_vocab(uniform_log_corpus(10, 50, 7));
    TokenPair all_pad;
    all_pad.size_tokens.assign(4, v.size_pad());
    all_pad.ipd_tokens.assign(4, v.ipd_pad());
    all_pad.positions = {0, 1, 2, 3};
    CHECK(detokenize(all_pad, v, 0.0).empty());

    TokenPair masked = all_pad;
    masked.size_tokens[0] = 100;
    masked.ipd_tokens[0] = v.ipd_mask();
    CHECK_THROWS_AS((void)detokenize(masked, v, 0.0), TokenizerError);

    TokenPair skewed = all_pad;
    skewed.size_tokens[1] = 100;  // ipd stream still PAD at slot 1
    CHECK_THROWS_AS((void)detokenize(skewed, v, 0.0), TokenizerError);
}

TEST_CASE("vocabulary persists to json bit-exactly") {
    auto v = build_vocab(synth_benign(300, 24));
    const auto path = std::filesystem::temp_directory_path() / "fm_vocab.json";
    save_vocab_json(path.string(), v);
    auto w = load_vocab_json(path.string());
    CHECK(w.mtu == v.mtu);
    CHECK(w.size_capacity == v.size_capacity);
    REQUIRE(w.ipd_edges.size() == v.ipd_edges.size());
    for (size_t i = 0; i < v.ipd_edges.size(); ++i)
        CHECK(std::bit_cast<uint64_t>(w.ipd_edges[i]) == std::bit_cast<uint64_t>(v.ipd_edges[i]));
    std::filesystem::remove(path);
}

TEST_CASE("vocab build rejects degenerate corpora") {
    CHECK_THROWS_AS((void)build_vocab({}), TokenizerError);
    Flow f;
    f.id = "z";
    f.pkts = {{0.0, 100, false}, {0.0, 100, false}};  // zero gaps only
    CHECK_THROWS_AS((void)build_vocab({f}), TokenizerError);
}
