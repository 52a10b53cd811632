#include "flowmimic/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "flowmimic/checkpoint.hpp"
#include "flowmimic/hash.hpp"
#include "flowmimic/optim.hpp"
#include "json.hpp"

namespace flowmimic {

namespace {

using nn::Graph;
using H = Graph::H;

H attention(Graph& g, const AttnParams& a, H query_src, H kv_src, int heads) {
    auto& ap = const_cast<AttnParams&>(a);
    H q = g.matmul(query_src, g.param(ap.wq));
    H k = g.matmul(kv_src, g.param(ap.wk));
    H v = g.matmul(kv_src, g.param(ap.wv));
    const int d_k = a.wq.value.cols;
    const int d_h = d_k / heads;
    std::vector<H> merged;
    merged.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        H qh = g.slice_cols(q, h * d_h, (h + 1) * d_h);
        H kh = g.slice_cols(k, h * d_h, (h + 1) * d_h);
        H vh = g.slice_cols(v, h * d_h, (h + 1) * d_h);
        H scores = g.affine(g.matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(d_h)), 0.0);
        merged.push_back(g.matmul(g.softmax_rows(scores), vh));
    }
    H cat = heads == 1 ? merged[0] : g.concat_cols(merged);
    return g.matmul(cat, g.param(ap.wo));
}

H ffn_forward(Graph& g, const FfnParams& f, H x) {
    auto& fp = const_cast<FfnParams&>(f);
    H hidden = g.relu(g.add_rowvec(g.matmul(x, g.param(fp.w1)), g.param(fp.b1)));
    return g.add_rowvec(g.matmul(hidden, g.param(fp.w2)), g.param(fp.b2));
}

H post_norm(Graph& g, const LnParams& ln, H residual_sum) {
    auto& lp = const_cast<LnParams&>(ln);
    return g.layernorm(residual_sum, g.param(lp.gain), g.param(lp.bias));
}

struct EncodedStates {
    H h_p = nullptr;
    H h_h = nullptr;
    int rows = 0;
};

// Builds the full block stack over the valid prefix of the pair. Token inputs
// are passed separately so callers can feed masked variants.
EncodedStates encode_on_graph(Graph& g, const EncoderModel& model,
                              const std::vector<int>& size_tokens,
                              const std::vector<int>& ipd_tokens,
                              const std::vector<int>& positions, int valid_len,
                              EncoderTrace* trace) {
    auto& m = const_cast<EncoderModel&>(model);
    const int L = valid_len;
    const int heads = model.cfg.attn_heads;

    std::vector<int> size_ids(size_tokens.begin(), size_tokens.begin() + L);
    std::vector<int> ipd_ids(ipd_tokens.begin(), ipd_tokens.begin() + L);
    H pe = g.constant(sinusoid_positions(positions, L, model.cfg.d_k));
    H x_p = g.add(g.gather_rows(g.param(m.emb_size), size_ids), pe);
    H x_h = g.add(g.gather_rows(g.param(m.emb_ipd), ipd_ids), pe);

    for (size_t b = 0; b < model.blocks.size(); ++b) {
        const auto& blk = model.blocks[b];
        EncoderTrace::BlockTrace bt;

        H res_p = g.add(x_p, attention(g, blk.p.self_attn, x_p, x_p, heads));
        H res_h = g.add(x_h, attention(g, blk.h.self_attn, x_h, x_h, heads));
        if (trace) {
            bt.p_self_res = res_p->val;
            bt.h_self_res = res_h->val;
        }
        H sa_p = post_norm(g, blk.p.ln_self, res_p);
        H sa_h = post_norm(g, blk.h.ln_self, res_h);
        if (trace) {
            bt.p_self_out = sa_p->val;
            bt.h_self_out = sa_h->val;
        }

        // Each stream queries the other's post-self-attention state.
        H cr_p = g.add(sa_p, attention(g, blk.p.cross_attn, sa_p, sa_h, heads));
        H cr_h = g.add(sa_h, attention(g, blk.h.cross_attn, sa_h, sa_p, heads));
        if (trace) {
            bt.p_cross_res = cr_p->val;
            bt.h_cross_res = cr_h->val;
        }
        H cx_p = post_norm(g, blk.p.ln_cross, cr_p);
        H cx_h = post_norm(g, blk.h.ln_cross, cr_h);
        if (trace) {
            bt.p_cross_out = cx_p->val;
            bt.h_cross_out = cx_h->val;
        }

        H ff_p = g.add(cx_p, ffn_forward(g, blk.p.ffn, cx_p));
        H ff_h = g.add(cx_h, ffn_forward(g, blk.h.ffn, cx_h));
        if (trace) {
            bt.p_ffn_res = ff_p->val;
            bt.h_ffn_res = ff_h->val;
            trace->blocks.push_back(std::move(bt));
        }
        x_p = post_norm(g, blk.p.ln_ffn, ff_p);
        x_h = post_norm(g, blk.h.ln_ffn, ff_h);
    }
    return {x_p, x_h, L};
}

H head_logits(Graph& g, H hidden, nn::Parameter& w, nn::Parameter& b) {
    return g.add_rowvec(g.matmul(hidden, g.param(w)), g.param(b));
}

void check_pair_shape(const TokenPair& pair, const EncoderConfig& cfg) {
    const auto n = static_cast<size_t>(cfg.n);
    if (pair.size_tokens.size() != n || pair.ipd_tokens.size() != n ||
        pair.positions.size() != n)
        throw EncoderError("encode: token pair length does not match the configured n");
    if (pair.valid_len < 1 || pair.valid_len > cfg.n)
        throw EncoderError("encode: valid_len out of range");
}

struct ResolvedRanges {
    int size_lo, size_hi, ipd_lo, ipd_hi;
};

ResolvedRanges resolve_ranges(const FillMode& mode, const Vocabulary& vocab) {
    ResolvedRanges r;
    r.size_lo = std::max(1, mode.size_lo);
    r.size_hi = std::min(vocab.mtu, mode.size_hi < 0 ? vocab.mtu : mode.size_hi);
    r.ipd_lo = std::max(0, mode.ipd_lo);
    r.ipd_hi = std::min(vocab.ipd_value_bins() - 1, mode.ipd_hi < 0 ? vocab.ipd_value_bins() - 1
                                                                    : mode.ipd_hi);
    if (r.size_lo > r.size_hi || r.ipd_lo > r.ipd_hi)
        throw EncoderError("fill: empty candidate range");
    return r;
}

int argmax_in_range(const Tensor& logits, int row, int lo, int hi) {
    int best = lo;
    double best_v = logits.at(row, lo);
    for (int c = lo + 1; c <= hi; ++c)
        if (logits.at(row, c) > best_v) {
            best_v = logits.at(row, c);
            best = c;
        }
    return best;
}

int sample_in_range(const Tensor& logits, int row, int lo, int hi, double temp, Rng& rng) {
    double mx = logits.at(row, lo);
    for (int c = lo + 1; c <= hi; ++c) mx = std::max(mx, logits.at(row, c));
    std::vector<double> w(static_cast<size_t>(hi - lo + 1));
    double total = 0.0;
    for (int c = lo; c <= hi; ++c) {
        w[c - lo] = std::exp((logits.at(row, c) - mx) / temp);
        total += w[c - lo];
    }
    double u = rng.uniform() * total;
    for (int c = lo; c <= hi; ++c) {
        u -= w[c - lo];
        if (u <= 0.0) return c;
    }
    return hi;
}

uint64_t pair_hash(const TokenPair& pair) {
    std::vector<int> all;
    all.reserve(pair.size_tokens.size() * 3 + 1);
    all.insert(all.end(), pair.size_tokens.begin(), pair.size_tokens.end());
    all.insert(all.end(), pair.ipd_tokens.begin(), pair.ipd_tokens.end());
    all.insert(all.end(), pair.positions.begin(), pair.positions.end());
    all.push_back(pair.valid_len);
    return fnv1a64(all);
}

}  // namespace

Tensor sinusoid_positions(const std::vector<int>& positions, int count, int d_k) {
    Tensor pe(count, d_k);
    for (int r = 0; r < count; ++r) {
        const auto pos = static_cast<double>(positions[r]);
        for (int i = 0; i < d_k / 2; ++i) {
            const double freq = std::pow(10000.0, -2.0 * i / d_k);
            pe.at(r, 2 * i) = std::sin(pos * freq);
            if (2 * i + 1 < d_k) pe.at(r, 2 * i + 1) = std::cos(pos * freq);
        }
    }
    return pe;
}

void EncoderConfig::validate() const {
    if (n < 1 || d_k < 1 || n_layers < 1 || attn_heads < 1 || d_ff < 1 || t_size < 4 ||
        s_size < 4)
        throw EncoderError("encoder config: all dimensions must be positive");
    if (d_k % attn_heads != 0)
        throw EncoderError("encoder config: d_k must divide evenly across heads");
}

std::vector<nn::Parameter*> EncoderModel::parameters() {
    std::vector<nn::Parameter*> out{&emb_size, &emb_ipd};
    for (auto& blk : blocks) {
        for (StreamBlock* s : {&blk.p, &blk.h}) {
            for (AttnParams* a : {&s->self_attn, &s->cross_attn}) {
                out.push_back(&a->wq);
                out.push_back(&a->wk);
                out.push_back(&a->wv);
                out.push_back(&a->wo);
            }
            out.push_back(&s->ffn.w1);
            out.push_back(&s->ffn.b1);
            out.push_back(&s->ffn.w2);
            out.push_back(&s->ffn.b2);
            for (LnParams* l : {&s->ln_self, &s->ln_cross, &s->ln_ffn}) {
                out.push_back(&l->gain);
                out.push_back(&l->bias);
            }
        }
    }
    out.push_back(&out_size_w);
    out.push_back(&out_size_b);
    out.push_back(&out_ipd_w);
    out.push_back(&out_ipd_b);
    return out;
}

std::vector<const nn::Parameter*> EncoderModel::parameters() const {
    auto mut = const_cast<EncoderModel*>(this)->parameters();
    return {mut.begin(), mut.end()};
}

EncoderModel EncoderModel::init(const EncoderConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed ^ 0xe9c0de);
    EncoderModel m;
    m.cfg = cfg;

    auto embedding = [&](const std::string& name, int rows) {
        Tensor t(rows, cfg.d_k);
        nn::init_embedding(t, rng);
        return nn::Parameter(name, std::move(t));
    };
    auto weight = [&](const std::string& name, int rows, int cols) {
        Tensor t(rows, cols);
        nn::init_xavier(t, rng);
        return nn::Parameter(name, std::move(t));
    };
    auto bias = [&](const std::string& name, int cols) {
        return nn::Parameter(name, Tensor::zeros(1, cols));
    };
    auto ln = [&](const std::string& name) {
        return LnParams{nn::Parameter(name + ".gain", Tensor::full(1, cfg.d_k, 1.0)),
                        nn::Parameter(name + ".bias", Tensor::zeros(1, cfg.d_k))};
    };
    auto attn = [&](const std::string& name) {
        return AttnParams{weight(name + ".wq", cfg.d_k, cfg.d_k),
                          weight(name + ".wk", cfg.d_k, cfg.d_k),
                          weight(name + ".wv", cfg.d_k, cfg.d_k),
                          weight(name + ".wo", cfg.d_k, cfg.d_k)};
    };

    m.emb_size = embedding("emb.size", cfg.s_size);
    m.emb_ipd = embedding("emb.ipd", cfg.t_size);
    for (int b = 0; b < cfg.n_layers; ++b) {
        EncoderBlock blk;
        const std::pair<StreamBlock*, const char*> streams[] = {{&blk.p, "p"}, {&blk.h, "h"}};
        for (auto [stream, tag] : streams) {
            const std::string base = "blk" + std::to_string(b) + "." + tag + ".";
            stream->self_attn = attn(base + "self");
            stream->ln_self = ln(base + "ln_self");
            stream->cross_attn = attn(base + "cross");
            stream->ln_cross = ln(base + "ln_cross");
            stream->ffn = FfnParams{weight(base + "ffn.w1", cfg.d_k, cfg.d_ff),
                                    bias(base + "ffn.b1", cfg.d_ff),
                                    weight(base + "ffn.w2", cfg.d_ff, cfg.d_k),
                                    bias(base + "ffn.b2", cfg.d_k)};
            stream->ln_ffn = ln(base + "ln_ffn");
        }
        m.blocks.push_back(std::move(blk));
    }
    m.out_size_w = weight("out.size.w", cfg.d_k, cfg.s_size);
    m.out_size_b = bias("out.size.b", cfg.s_size);
    m.out_ipd_w = weight("out.ipd.w", cfg.d_k, cfg.t_size);
    m.out_ipd_b = bias("out.ipd.b", cfg.t_size);
    return m;
}

EncodeResult encode(const TokenPair& pair, const EncoderModel& model, EncoderTrace* trace) {
    check_pair_shape(pair, model.cfg);
    auto& m = const_cast<EncoderModel&>(model);
    Graph g(false);
    auto states = encode_on_graph(g, model, pair.size_tokens, pair.ipd_tokens, pair.positions,
                                  pair.valid_len, trace);
    H lp = head_logits(g, states.h_p, m.out_size_w, m.out_size_b);
    H lh = head_logits(g, states.h_h, m.out_ipd_w, m.out_ipd_b);

    EncodeResult out{Tensor::zeros(model.cfg.n, model.cfg.d_k),
                     Tensor::zeros(model.cfg.n, model.cfg.d_k),
                     Tensor::zeros(model.cfg.n, model.cfg.s_size),
                     Tensor::zeros(model.cfg.n, model.cfg.t_size)};
    for (int r = 0; r < states.rows; ++r) {
        for (int c = 0; c < model.cfg.d_k; ++c) {
            out.h_p.at(r, c) = states.h_p->val.at(r, c);
            out.h_h.at(r, c) = states.h_h->val.at(r, c);
        }
        for (int c = 0; c < model.cfg.s_size; ++c) out.logits_size.at(r, c) = lp->val.at(r, c);
        for (int c = 0; c < model.cfg.t_size; ++c) out.logits_ipd.at(r, c) = lh->val.at(r, c);
    }
    return out;
}

MaskPlan plan_masks(const TokenPair& pair, Rng& rng) {
    if (pair.valid_len < 1) throw EncoderError("plan_masks: pair has no valid slots");
    const int L = pair.valid_len;
    int k = static_cast<int>(std::floor(0.15 * L + 0.5));
    k = std::max(k, 1);

    std::vector<int> slots(L);
    for (int i = 0; i < L; ++i) slots[i] = i;
    rng.shuffle(slots);
    slots.resize(k);
    std::sort(slots.begin(), slots.end());

    MaskPlan plan;
    plan.positions = std::move(slots);
    plan.treatments.reserve(k);
    for (int i = 0; i < k; ++i) {
        const double u = rng.uniform();
        plan.treatments.push_back(u < 0.8 ? MaskTreatment::mask
                                  : u < 0.9 ? MaskTreatment::random_token
                                            : MaskTreatment::keep);
    }
    return plan;
}

void apply_plan(const MaskPlan& plan, const Vocabulary& vocab, TokenPair& pair, Rng& rng) {
    for (size_t i = 0; i < plan.positions.size(); ++i) {
        const int p = plan.positions[i];
        switch (plan.treatments[i]) {
            case MaskTreatment::mask:
                pair.size_tokens[p] = vocab.size_mask();
                pair.ipd_tokens[p] = vocab.ipd_mask();
                break;
            case MaskTreatment::random_token:
                pair.size_tokens[p] = static_cast<int>(rng.uniform_int(1, vocab.mtu));
                pair.ipd_tokens[p] =
                    static_cast<int>(rng.uniform_int(0, vocab.ipd_value_bins() - 1));
                break;
            case MaskTreatment::keep:
                break;
        }
    }
}

namespace {

struct BatchLossResult {
    double loss = 0.0;
    int positions = 0;
    int correct = 0;
    int predictions = 0;
};

// Shared by the train and eval paths: masked cross-entropy of both heads over
// a batch of pairs, averaged per masked position. When `g` has gradients
// enabled the caller can run backward on our returned root.
std::pair<H, BatchLossResult> batch_masked_loss(Graph& g, const EncoderModel& model,
                                                const Vocabulary& vocab,
                                                const std::vector<const TokenPair*>& batch,
                                                Rng& rng, bool count_accuracy) {
    auto& m = const_cast<EncoderModel&>(model);
    H total = nullptr;
    BatchLossResult stats;
    for (const TokenPair* src : batch) {
        TokenPair masked = *src;
        const MaskPlan plan = plan_masks(masked, rng);
        apply_plan(plan, vocab, masked, rng);

        auto states = encode_on_graph(g, model, masked.size_tokens, masked.ipd_tokens,
                                      masked.positions, masked.valid_len, nullptr);
        std::vector<int> size_targets, ipd_targets;
        for (int p : plan.positions) {
            size_targets.push_back(src->size_tokens[p]);
            ipd_targets.push_back(src->ipd_tokens[p]);
        }
        H rows_p = g.gather_rows(states.h_p, plan.positions);
        H rows_h = g.gather_rows(states.h_h, plan.positions);
        H logit_p = head_logits(g, rows_p, m.out_size_w, m.out_size_b);
        H logit_h = head_logits(g, rows_h, m.out_ipd_w, m.out_ipd_b);
        H ce = g.affine(g.add(g.sum_all(g.pick_cols(g.log_softmax_rows(logit_p), size_targets)),
                              g.sum_all(g.pick_cols(g.log_softmax_rows(logit_h), ipd_targets))),
                        -1.0, 0.0);
        total = total ? g.add(total, ce) : ce;
        stats.positions += static_cast<int>(plan.positions.size());

        if (count_accuracy) {
            for (size_t i = 0; i < plan.positions.size(); ++i) {
                const int r = static_cast<int>(i);
                stats.predictions += 2;
                if (argmax_in_range(logit_p->val, r, 1, vocab.mtu) == size_targets[i])
                    ++stats.correct;
                if (argmax_in_range(logit_h->val, r, 0, vocab.ipd_value_bins() - 1) ==
                    ipd_targets[i])
                    ++stats.correct;
            }
        }
    }
    H root = g.affine(total, 1.0 / stats.positions, 0.0);
    stats.loss = root->val.at(0, 0);
    return {root, stats};
}

std::vector<const TokenPair*> flatten_chunks(const std::vector<ChunkSet>& corpus) {
    std::vector<const TokenPair*> out;
    for (const auto& set : corpus)
        for (const auto& chunk : set.chunks) out.push_back(&chunk);
    return out;
}

}  // namespace

PretrainReport pretrain(const std::vector<ChunkSet>& corpus, EncoderModel& model,
                        const Vocabulary& vocab, const PretrainConfig& cfg) {
    auto all = flatten_chunks(corpus);
    if (all.empty()) throw EncoderError("pretrain: empty corpus");
    if (cfg.steps < 1 || cfg.batch_chunks < 1)
        throw EncoderError("pretrain: steps and batch size must be positive");

    Rng rng(cfg.seed ^ 0x93a5);
    nn::Adam adam({cfg.lr, 0.9, 0.999, 1e-8});
    auto params = model.parameters();

    PretrainReport report;
    size_t cursor = 0;
    auto order = all;
    rng.shuffle(order);
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<const TokenPair*> batch;
        for (int b = 0; b < cfg.batch_chunks; ++b) {
            if (cursor >= order.size()) {
                cursor = 0;
                rng.shuffle(order);
            }
            batch.push_back(order[cursor++]);
        }
        Graph g;
        auto [root, stats] = batch_masked_loss(g, model, vocab, batch, rng, false);
        if (!std::isfinite(stats.loss))
            throw EncoderError("pretrain: loss diverged at step " + std::to_string(step) +
                               " (value " + std::to_string(stats.loss) + ")");
        g.backward(root);
        adam.step(params, g);
        report.loss_curve.push_back(stats.loss);
    }
    report.step0_loss = report.loss_curve.front();
    report.final_loss = report.loss_curve.back();
    return report;
}

double masked_eval_loss(const std::vector<ChunkSet>& corpus, const EncoderModel& model,
                        const Vocabulary& vocab, uint64_t seed, double* accuracy) {
    auto all = flatten_chunks(corpus);
    if (all.empty()) throw EncoderError("masked_eval_loss: empty corpus");
    Rng rng(seed ^ 0xe7a1);
    Graph g(false);
    auto [root, stats] = batch_masked_loss(g, model, vocab, all, rng, accuracy != nullptr);
    (void)root;
    if (accuracy)
        *accuracy = stats.predictions ? static_cast<double>(stats.correct) / stats.predictions
                                      : 0.0;
    return stats.loss;
}

FillMode FillMode::constrained(int slo, int shi, int ilo, int ihi) {
    FillMode m;
    m.kind = Kind::constrained;
    m.size_lo = slo;
    m.size_hi = shi;
    m.ipd_lo = ilo;
    m.ipd_hi = ihi;
    return m;
}

FillMode FillMode::sampled(double temp) {
    FillMode m;
    m.kind = Kind::sampled;
    m.temperature = temp;
    return m;
}

TokenPair fill(const TokenPair& pair, const EncoderModel& model, const Vocabulary& vocab,
               const FillMode& mode) {
    check_pair_shape(pair, model.cfg);
    if (mode.kind == FillMode::Kind::sampled && mode.temperature <= 0.0)
        throw EncoderError("fill: temperature must be positive");
    const auto ranges = resolve_ranges(mode, vocab);

    std::vector<int> size_slots, ipd_slots;
    for (int k = 0; k < model.cfg.n; ++k) {
        const bool sm = pair.size_tokens[k] == vocab.size_mask();
        const bool im = pair.ipd_tokens[k] == vocab.ipd_mask();
        if ((sm || im) && k >= pair.valid_len)
            throw EncoderError("fill: mask token inside the padded tail at slot " +
                               std::to_string(k));
        if (sm) size_slots.push_back(k);
        if (im) ipd_slots.push_back(k);
    }
    if (size_slots.empty() && ipd_slots.empty())
        throw EncoderError("fill: no mask tokens present");

    auto& m = const_cast<EncoderModel&>(model);
    Graph g(false);
    auto states = encode_on_graph(g, model, pair.size_tokens, pair.ipd_tokens, pair.positions,
                                  pair.valid_len, nullptr);

    Rng sample_rng(pair_hash(pair) ^ 0x5a3171eULL);

    TokenPair out = pair;
    if (!size_slots.empty()) {
        H logits = head_logits(g, g.gather_rows(states.h_p, size_slots), m.out_size_w,
                               m.out_size_b);
        for (size_t i = 0; i < size_slots.size(); ++i) {
            const int r = static_cast<int>(i);
            out.size_tokens[size_slots[i]] =
                mode.kind == FillMode::Kind::sampled
                    ? sample_in_range(logits->val, r, ranges.size_lo, ranges.size_hi,
                                      mode.temperature, sample_rng)
                    : argmax_in_range(logits->val, r, ranges.size_lo, ranges.size_hi);
        }
    }
    if (!ipd_slots.empty()) {
        H logits = head_logits(g, g.gather_rows(states.h_h, ipd_slots), m.out_ipd_w,
                               m.out_ipd_b);
        for (size_t i = 0; i < ipd_slots.size(); ++i) {
            const int r = static_cast<int>(i);
            out.ipd_tokens[ipd_slots[i]] =
                mode.kind == FillMode::Kind::sampled
                    ? sample_in_range(logits->val, r, ranges.ipd_lo, ranges.ipd_hi,
                                      mode.temperature, sample_rng)
                    : argmax_in_range(logits->val, r, ranges.ipd_lo, ranges.ipd_hi);
        }
    }
    return out;
}

uint64_t vocab_fingerprint(const Vocabulary& vocab) {
    std::string buf = std::to_string(vocab.mtu) + "|" + std::to_string(vocab.size_capacity);
    for (double e : vocab.ipd_edges) {
        uint64_t bits;
        static_assert(sizeof(bits) == sizeof(e));
        std::memcpy(&bits, &e, sizeof(bits));
        for (int s = 0; s < 64; s += 8) buf.push_back(static_cast<char>((bits >> s) & 0xff));
    }
    return fnv1a64(buf);
}

void save_encoder(const std::string& prefix, const EncoderModel& model,
                  const Vocabulary& vocab) {
    std::vector<std::pair<std::string, const Tensor*>> items;
    for (const auto* p : model.parameters()) items.emplace_back(p->name, &p->value);
    nn::save_tensors(prefix, items);

    nlohmann::json meta;
    meta["version"] = 1;
    meta["config"] = {{"n", model.cfg.n},
                      {"d_k", model.cfg.d_k},
                      {"n_layers", model.cfg.n_layers},
                      {"attn_heads", model.cfg.attn_heads},
                      {"d_ff", model.cfg.d_ff},
                      {"t_size", model.cfg.t_size},
                      {"s_size", model.cfg.s_size}};
    meta["vocab_fnv"] = hash_hex(vocab_fingerprint(vocab));
    std::ofstream out(prefix + ".meta.json");
    if (!out) throw EncoderError("save_encoder: cannot open " + prefix + ".meta.json");
    out << meta.dump(2) << "\n";
}

EncoderModel load_encoder(const std::string& prefix, const Vocabulary& vocab) {
    std::ifstream in(prefix + ".meta.json");
    if (!in) throw EncoderError("load_encoder: cannot open " + prefix + ".meta.json");
    nlohmann::json meta;
    try {
        in >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw EncoderError("load_encoder: bad metadata: " + std::string(e.what()));
    }
    if (meta.at("vocab_fnv").get<std::string>() != hash_hex(vocab_fingerprint(vocab)))
        throw EncoderError("load_encoder: checkpoint was built against a different vocabulary");

    const auto& c = meta.at("config");
    EncoderConfig cfg{c.at("n").get<int>(),          c.at("d_k").get<int>(),
                      c.at("n_layers").get<int>(),   c.at("attn_heads").get<int>(),
                      c.at("d_ff").get<int>(),       c.at("t_size").get<int>(),
                      c.at("s_size").get<int>()};
    EncoderModel model = EncoderModel::init(cfg, 0);
    auto stored = nn::load_tensors(prefix);
    for (auto* p : model.parameters()) {
        auto it = stored.find(p->name);
        if (it == stored.end())
            throw EncoderError("load_encoder: checkpoint is missing tensor " + p->name);
        if (it->second.rows != p->value.rows || it->second.cols != p->value.cols)
            throw EncoderError("load_encoder: shape mismatch for tensor " + p->name);
        p->value = it->second;
    }
    return model;
}

}  // namespace flowmimic
