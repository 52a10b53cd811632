#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "flowmimic/traffic.hpp"

namespace flowmimic {

class TokenizerError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct VocabConfig {
    int ipd_value_bins = 53;
    double log10_low = -7.0;
    double log10_high = 3.0;
    int mtu = 1500;
    int size_capacity = 1606;
};

// Two token alphabets, one per feature stream. Size tokens map bytes directly
// (id == byte value, 0 unused); IPD tokens are quantile-balanced log10 bins.
// Specials occupy the ids just past the value range in each alphabet.
struct Vocabulary {
    int mtu = 1500;
    int size_capacity = 1606;
    std::vector<double> ipd_edges;  // value_bins + 1 strictly increasing log10 edges

    int ipd_value_bins() const { return static_cast<int>(ipd_edges.size()) - 1; }
    int ipd_pad() const { return ipd_value_bins(); }
    int ipd_mask() const { return ipd_value_bins() + 1; }
    int ipd_unk() const { return ipd_value_bins() + 2; }
    int ipd_capacity() const { return ipd_value_bins() + 3; }

    int size_pad() const { return mtu + 1; }
    int size_mask() const { return mtu + 2; }
    int size_unk() const { return mtu + 3; }

    bool is_ipd_special(int token) const { return token >= ipd_value_bins(); }
    bool is_size_special(int token) const { return token > mtu; }

    int size_token(int bytes) const;
    int ipd_token(double seconds) const;

    // Inverse maps. PAD and MASK have no concrete value and are rejected.
    int size_value(int token) const;
    double ipd_representative(int token) const;
};

Vocabulary build_vocab(const std::vector<Flow>& benign, const VocabConfig& cfg = {});

void save_vocab_json(const std::string& path, const Vocabulary& vocab);
Vocabulary load_vocab_json(const std::string& path);

// Power of two closest to the 99th-percentile flow length, ties upward.
int choose_n(const std::vector<Flow>& corpus);

struct TokenPair {
    std::vector<int> size_tokens;
    std::vector<int> ipd_tokens;
    std::vector<int> positions;
    int valid_len = 0;
};

struct ChunkSet {
    std::string flow_id;
    std::vector<TokenPair> chunks;
};

// Short flows become a single PAD-filled chunk; long flows become m - n + 1
// overlapping windows whose positions carry the window offset.
ChunkSet tokenize(const Flow& flow, const Vocabulary& vocab, int n);

// Maps tokens back to concrete packets. PAD slots are dropped (placement must
// agree across the two streams), MASK is rejected, times accumulate the bin
// representatives starting from base_time.
std::vector<PacketEvent> detokenize(const TokenPair& pair, const Vocabulary& vocab,
                                    double base_time);

}  // namespace flowmimic
