#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowmimic/graph.hpp"
#include "flowmimic/rng.hpp"
#include "flowmimic/tensor.hpp"
#include "flowmimic/tokenizer.hpp"

namespace flowmimic {

using nn::Tensor;

class EncoderError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct EncoderConfig {
    int n = 64;
    int d_k = 32;
    int n_layers = 2;
    int attn_heads = 2;
    int d_ff = 64;
    int t_size = 56;    // IPD vocabulary capacity
    int s_size = 1606;  // size vocabulary capacity

    void validate() const;
};

// One attention projection set. Heads are folded into the matrices and split
// column-wise at compute time.
struct AttnParams {
    nn::Parameter wq, wk, wv, wo;
};

struct LnParams {
    nn::Parameter gain, bias;
};

struct FfnParams {
    nn::Parameter w1, b1, w2, b2;
};

// Per-stream half of an encoder block: self-attention, cross-attention that
// queries this stream against the partner, and the feed-forward net. Each
// sub-layer is followed by residual add and layer norm.
struct StreamBlock {
    AttnParams self_attn;
    LnParams ln_self;
    AttnParams cross_attn;
    LnParams ln_cross;
    FfnParams ffn;
    LnParams ln_ffn;
};

struct EncoderBlock {
    StreamBlock p;  // packet sizes
    StreamBlock h;  // inter-packet delays
};

struct EncoderModel {
    EncoderConfig cfg;
    nn::Parameter emb_size, emb_ipd;
    std::vector<EncoderBlock> blocks;
    nn::Parameter out_size_w, out_size_b, out_ipd_w, out_ipd_b;

    EncoderModel() = default;
    EncoderModel(const EncoderModel&) = delete;
    EncoderModel& operator=(const EncoderModel&) = delete;
    EncoderModel(EncoderModel&&) = default;
    EncoderModel& operator=(EncoderModel&&) = default;

    // Stable iteration order; optimizer state and checkpoints key off this.
    std::vector<nn::Parameter*> parameters();
    std::vector<const nn::Parameter*> parameters() const;

    static EncoderModel init(const EncoderConfig& cfg, uint64_t seed);
};

// Sinusoidal position encoding rows for the given positions.
Tensor sinusoid_positions(const std::vector<int>& positions, int count, int d_k);

// Intermediate states captured for testing; one entry per block. The *_res
// tensors are the raw residual sums before layer norm, the *_out tensors are
// the normalized sub-layer outputs.
struct EncoderTrace {
    struct BlockTrace {
        Tensor p_self_res, h_self_res;
        Tensor p_self_out, h_self_out;
        Tensor p_cross_res, h_cross_res;
        Tensor p_cross_out, h_cross_out;
        Tensor p_ffn_res, h_ffn_res;
    };
    std::vector<BlockTrace> blocks;
};

// Full forward pass. Only the valid (non-PAD) prefix is computed; PAD rows of
// the returned tensors are zero. Optional trace captures residual sums.
struct EncodeResult {
    Tensor h_p, h_h;              // n x d_k
    Tensor logits_size;           // n x s_size
    Tensor logits_ipd;            // n x t_size
};
EncodeResult encode(const TokenPair& pair, const EncoderModel& model,
                    EncoderTrace* trace = nullptr);

enum class MaskTreatment { mask, random_token, keep };

struct MaskPlan {
    std::vector<int> positions;  // sorted, non-PAD slots only
    std::vector<MaskTreatment> treatments;
};

MaskPlan plan_masks(const TokenPair& pair, Rng& rng);

// Applies a plan in place: `mask` writes the MASK token into both streams,
// `random_token` draws a fresh value id per stream, `keep` leaves the slot.
void apply_plan(const MaskPlan& plan, const Vocabulary& vocab, TokenPair& pair, Rng& rng);

struct PretrainConfig {
    int steps = 300;
    int batch_chunks = 8;
    double lr = 1e-3;
    uint64_t seed = 1;
};

struct PretrainReport {
    std::vector<double> loss_curve;  // mean masked-position cross-entropy per step
    double step0_loss = 0.0;
    double final_loss = 0.0;
};

PretrainReport pretrain(const std::vector<ChunkSet>& corpus, EncoderModel& model,
                        const Vocabulary& vocab, const PretrainConfig& cfg);

// Masked cross-entropy of the current model on fresh plans, no updates.
double masked_eval_loss(const std::vector<ChunkSet>& corpus, const EncoderModel& model,
                        const Vocabulary& vocab, uint64_t seed, double* accuracy = nullptr);

struct FillMode {
    enum class Kind { greedy, constrained, sampled };
    Kind kind = Kind::greedy;
    // Candidate id ranges, inclusive; -1 means the natural upper limit.
    int size_lo = 1, size_hi = -1;
    int ipd_lo = 0, ipd_hi = -1;
    double temperature = 1.0;  // sampled mode only

    static FillMode greedy() { return {}; }
    static FillMode constrained(int slo, int shi, int ilo, int ihi);
    static FillMode sampled(double temp);
};

// Replaces every MASK slot with a concrete token chosen from that slot's head
// logits. Deterministic: sampled mode seeds its generator from the pair
// content, so the result is still a pure function of (pair, model, mode).
TokenPair fill(const TokenPair& pair, const EncoderModel& model, const Vocabulary& vocab,
               const FillMode& mode = {});

uint64_t vocab_fingerprint(const Vocabulary& vocab);

// Checkpoint plus a sidecar binding the weights to config and vocabulary.
void save_encoder(const std::string& prefix, const EncoderModel& model,
                  const Vocabulary& vocab);
EncoderModel load_encoder(const std::string& prefix, const Vocabulary& vocab);

}  // namespace flowmimic
