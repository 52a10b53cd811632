#include "flowmimic/detectors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "flowmimic/checkpoint.hpp"
#include "flowmimic/graph.hpp"
#include "flowmimic/optim.hpp"
#include "flowmimic/rng.hpp"
#include "flowmimic/stats.hpp"
#include "json.hpp"

namespace flowmimic {

namespace {

double size_entropy(const Flow& flow) {
    constexpr int kBins = 30;
    std::array<int, kBins> hist{};
    for (const auto& p : flow.pkts) {
        int idx = (std::max(p.size, 1) - 1) * kBins / 1500;
        hist[std::min(idx, kBins - 1)] += 1;
    }
    const double total = static_cast<double>(flow.pkts.size());
    double h = 0.0;
    for (int c : hist)
        if (c > 0) {
            const double p = c / total;
            h -= p * std::log(p);
        }
    return h;
}

std::vector<double> positive_gaps(const Flow& flow) {
    const auto d = flow.ipds();
    return {d.begin() + (d.empty() ? 0 : 1), d.end()};
}

// Windows of 100 ms measured from the first packet, skipping empty ones.
std::vector<Flow> split_windows(const Flow& flow) {
    std::vector<Flow> out;
    if (flow.pkts.empty()) return out;
    constexpr double kWin = 0.1;
    const double t0 = flow.pkts.front().time;
    Flow cur;
    int cur_idx = -1;
    for (const auto& p : flow.pkts) {
        const int idx = static_cast<int>((p.time - t0) / kWin);
        if (idx != cur_idx) {
            if (!cur.pkts.empty()) out.push_back(std::move(cur));
            cur = Flow{};
            cur.id = flow.id + "#w" + std::to_string(idx);
            cur.label = flow.label;
            cur_idx = idx;
        }
        cur.pkts.push_back(p);
    }
    if (!cur.pkts.empty()) out.push_back(std::move(cur));
    return out;
}

Tensor feature_tensor(const std::vector<Flow>& flows) {
    Tensor x(static_cast<int>(flows.size()), kFeatureDim);
    for (size_t i = 0; i < flows.size(); ++i) {
        const auto f = flow_features(flows[i]);
        for (int c = 0; c < kFeatureDim; ++c) x.at(static_cast<int>(i), c) = f[c];
    }
    return x;
}

// Column-wise z-score statistics with a variance floor so constant features
// stay finite.
void zscore_stats(const Tensor& x, Tensor& mu, Tensor& sigma) {
    mu = Tensor::zeros(1, x.cols);
    sigma = Tensor::zeros(1, x.cols);
    for (int c = 0; c < x.cols; ++c) {
        double m = 0.0;
        for (int r = 0; r < x.rows; ++r) m += x.at(r, c);
        m /= std::max(x.rows, 1);
        double v = 0.0;
        for (int r = 0; r < x.rows; ++r) v += (x.at(r, c) - m) * (x.at(r, c) - m);
        v /= std::max(x.rows, 1);
        mu.at(0, c) = m;
        sigma.at(0, c) = std::max(std::sqrt(v), 1e-9);
    }
}

Tensor apply_zscore(const Tensor& x, const Tensor& mu, const Tensor& sigma) {
    Tensor z(x.rows, x.cols);
    for (int r = 0; r < x.rows; ++r)
        for (int c = 0; c < x.cols; ++c) z.at(r, c) = (x.at(r, c) - mu.at(0, c)) / sigma.at(0, c);
    return z;
}

double f1_score(int tp, int fp, int fn) {
    const double denom = 2.0 * tp + fp + fn;
    return denom > 0.0 ? 2.0 * tp / denom : 0.0;
}

class NoiseOracle : public DetectorOracle {
public:
    NoiseOracle(std::unique_ptr<DetectorOracle> inner, double p, uint64_t seed)
        : inner_(std::move(inner)), p_(p), rng_(seed ^ 0xf11b) {}

    std::string kind() const override { return "noise(" + inner_->kind() + ")"; }
    double score(const Flow& flow) const override { return inner_->score(flow); }
    std::map<std::string, double> info() const override {
        auto m = inner_->info();
        m["noise_p"] = p_;
        return m;
    }

protected:
    OracleVerdict evaluate(const Flow& flow) override {
        OracleVerdict v = inner_->query(flow);
        if (rng_.uniform() < p_) {
            v.flow_passed = !v.flow_passed;
            v.evaded_non_chaff = v.flow_passed ? flow.non_chaff_count() : 0;
        }
        return v;
    }

private:
    std::unique_ptr<DetectorOracle> inner_;
    double p_;
    Rng rng_;
};

class BudgetOracle : public DetectorOracle {
public:
    BudgetOracle(std::unique_ptr<DetectorOracle> inner, int64_t budget)
        : inner_(std::move(inner)), budget_(budget) {}

    std::string kind() const override { return "budget(" + inner_->kind() + ")"; }
    double score(const Flow& flow) const override { return inner_->score(flow); }
    std::map<std::string, double> info() const override {
        auto m = inner_->info();
        m["budget"] = static_cast<double>(budget_);
        return m;
    }

protected:
    OracleVerdict evaluate(const Flow& flow) override {
        if (probe_count() >= budget_)
            throw BudgetExhausted("probe budget of " + std::to_string(budget_) + " exhausted");
        return inner_->query(flow);
    }

private:
    std::unique_ptr<DetectorOracle> inner_;
    int64_t budget_;
};

}  // namespace

std::array<double, kFeatureDim> flow_features(const Flow& flow) {
    std::vector<double> sizes;
    sizes.reserve(flow.pkts.size());
    for (const auto& p : flow.pkts) sizes.push_back(static_cast<double>(p.size));
    const auto gaps = positive_gaps(flow);

    return {stats::mean(sizes),
            stats::stddev(sizes),
            stats::minimum(sizes),
            stats::maximum(sizes),
            stats::mean(gaps),
            stats::stddev(gaps),
            stats::minimum(gaps),
            stats::maximum(gaps),
            static_cast<double>(flow.pkts.size()),
            flow.duration(),
            flow_rate_mbps(flow),
            size_entropy(flow)};
}

OracleVerdict ThresholdDetector::evaluate(const Flow& flow) {
    const bool flagged = score(flow) > 0.0;
    OracleVerdict v;
    v.flow_passed = !flagged;
    v.evaded_non_chaff = flagged ? 0 : flow.non_chaff_count();
    return v;
}

double ThresholdDetector::score(const Flow& flow) const {
    double worst = -1e300;
    const auto gaps = positive_gaps(flow);
    if (!gaps.empty()) {
        const double gap_mean = stats::mean(gaps);
        worst = std::max(worst, (ipd_floor_ - gap_mean) / std::max(std::abs(ipd_floor_), 1e-12));
    }
    const double peak = stats::maximum(window_rates_mbps(flow));
    worst = std::max(worst, (peak - rate_ceiling_) / std::max(std::abs(rate_ceiling_), 1e-12));
    return worst;
}

std::unique_ptr<DetectorOracle> train_threshold(const std::vector<Flow>& benign,
                                                double quantile) {
    if (benign.empty()) throw DetectorError("train_threshold: empty corpus");
    if (quantile <= 0.5 || quantile >= 1.0)
        throw DetectorError("train_threshold: quantile must lie in (0.5, 1)");

    std::vector<double> gap_means, peak_rates;
    for (const auto& f : benign) {
        const auto gaps = positive_gaps(f);
        if (!gaps.empty()) gap_means.push_back(stats::mean(gaps));
        peak_rates.push_back(stats::maximum(window_rates_mbps(f)));
    }
    double floor = stats::quantile(gap_means, 1.0 - quantile);
    double ceiling = stats::quantile(peak_rates, quantile);
    // epsilon margins keep degenerate (zero-variance) corpora on the benign side
    floor -= std::max(1e-12, 1e-9 * std::abs(floor));
    ceiling += std::max(1e-12, 1e-9 * std::abs(ceiling));
    return std::make_unique<ThresholdDetector>(floor, ceiling);
}

MlpDetector::MlpDetector(Tensor w1, Tensor b1, Tensor w2, Tensor b2, Tensor mu, Tensor sigma,
                         double threshold)
    : w1_(std::move(w1)),
      b1_(std::move(b1)),
      w2_(std::move(w2)),
      b2_(std::move(b2)),
      mu_(std::move(mu)),
      sigma_(std::move(sigma)),
      threshold_(threshold) {}

double MlpDetector::score(const Flow& flow) const {
    const auto feat = flow_features(flow);
    std::vector<double> h(static_cast<size_t>(w1_.cols), 0.0);
    for (int j = 0; j < w1_.cols; ++j) {
        double acc = b1_.at(0, j);
        for (int i = 0; i < kFeatureDim; ++i)
            acc += (feat[i] - mu_.at(0, i)) / sigma_.at(0, i) * w1_.at(i, j);
        h[j] = std::max(acc, 0.0);
    }
    double l0 = b2_.at(0, 0), l1 = b2_.at(0, 1);
    for (int j = 0; j < w1_.cols; ++j) {
        l0 += h[j] * w2_.at(j, 0);
        l1 += h[j] * w2_.at(j, 1);
    }
    const double mx = std::max(l0, l1);
    const double e0 = std::exp(l0 - mx), e1 = std::exp(l1 - mx);
    return e1 / (e0 + e1);
}

OracleVerdict MlpDetector::evaluate(const Flow& flow) {
    const bool flagged = score(flow) > threshold_;
    OracleVerdict v;
    v.flow_passed = !flagged;
    v.evaded_non_chaff = flagged ? 0 : flow.non_chaff_count();
    return v;
}

std::unique_ptr<DetectorOracle> train_mlp(const std::vector<Flow>& benign,
                                          const std::vector<Flow>& malicious,
                                          const MlpTrainConfig& cfg) {
    if (benign.empty() || malicious.empty())
        throw DetectorError("train_mlp: both classes must be non-empty");

    // Seeded per-class split so validation keeps the class balance.
    Rng rng(cfg.seed ^ 0x3175);
    std::vector<Flow> train, val;
    std::vector<int> train_y, val_y;
    auto push_split = [&](const std::vector<Flow>& flows, int label) {
        std::vector<int> idx(flows.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
        rng.shuffle(idx);
        const auto n_val = static_cast<size_t>(std::floor(cfg.val_fraction * flows.size()));
        for (size_t i = 0; i < idx.size(); ++i) {
            if (i < n_val) {
                val.push_back(flows[idx[i]]);
                val_y.push_back(label);
            } else {
                train.push_back(flows[idx[i]]);
                train_y.push_back(label);
            }
        }
    };
    push_split(benign, 0);
    push_split(malicious, 1);

    Tensor x_train = feature_tensor(train);
    Tensor mu, sigma;
    zscore_stats(x_train, mu, sigma);
    Tensor z_train = apply_zscore(x_train, mu, sigma);

    Rng init_rng(cfg.seed ^ 0x1111);
    nn::Parameter w1("w1", Tensor(kFeatureDim, cfg.hidden));
    nn::Parameter b1("b1", Tensor::zeros(1, cfg.hidden));
    nn::Parameter w2("w2", Tensor(cfg.hidden, 2));
    nn::Parameter b2("b2", Tensor::zeros(1, 2));
    nn::init_xavier(w1.value, init_rng);
    nn::init_xavier(w2.value, init_rng);
    std::vector<nn::Parameter*> params{&w1, &b1, &w2, &b2};
    nn::Adam adam({cfg.lr, 0.9, 0.999, 1e-8});

    std::vector<int> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (size_t at = 0; at < order.size(); at += cfg.batch) {
            const size_t end = std::min(at + cfg.batch, order.size());
            Tensor xb(static_cast<int>(end - at), kFeatureDim);
            std::vector<int> yb;
            for (size_t i = at; i < end; ++i) {
                for (int c = 0; c < kFeatureDim; ++c)
                    xb.at(static_cast<int>(i - at), c) = z_train.at(order[i], c);
                yb.push_back(train_y[order[i]]);
            }
            nn::Graph g;
            auto x = g.constant(std::move(xb));
            auto hid = g.relu(g.add_rowvec(g.matmul(x, g.param(w1)), g.param(b1)));
            auto logits = g.add_rowvec(g.matmul(hid, g.param(w2)), g.param(b2));
            auto ce = g.affine(g.sum_all(g.pick_cols(g.log_softmax_rows(logits), yb)),
                               -1.0 / static_cast<double>(yb.size()), 0.0);
            if (!std::isfinite(ce->val.at(0, 0)))
                throw DetectorError("train_mlp: loss diverged at epoch " + std::to_string(epoch));
            g.backward(ce);
            adam.step(params, g);
        }
    }

    // Decision threshold: best F1 over an evenly spaced grid on the held-out split.
    MlpDetector probe(w1.value, b1.value, w2.value, b2.value, mu, sigma, 0.5);
    std::vector<double> val_scores;
    for (const auto& f : val) val_scores.push_back(probe.score(f));
    double best_t = 0.5, best_f1 = -1.0;
    if (!val.empty()) {
        for (int i = 0; i <= 100; ++i) {
            const double t = i / 100.0;
            int tp = 0, fp = 0, fn = 0;
            for (size_t s = 0; s < val_scores.size(); ++s) {
                const bool pred = val_scores[s] > t;
                if (pred && val_y[s] == 1) ++tp;
                if (pred && val_y[s] == 0) ++fp;
                if (!pred && val_y[s] == 1) ++fn;
            }
            const double f1 = f1_score(tp, fp, fn);
            if (f1 > best_f1) {
                best_f1 = f1;
                best_t = t;
            }
        }
    }
    return std::make_unique<MlpDetector>(w1.value, b1.value, w2.value, b2.value, mu, sigma,
                                         best_t);
}

CentroidDetector::CentroidDetector(Tensor centroids, Tensor mu, Tensor sigma,
                                   double dist_threshold, bool windowed)
    : centroids_(std::move(centroids)),
      mu_(std::move(mu)),
      sigma_(std::move(sigma)),
      dist_threshold_(dist_threshold),
      windowed_(windowed) {}

double CentroidDetector::flow_distance(const Flow& flow) const {
    const auto feat = flow_features(flow);
    double best = 1e300;
    for (int r = 0; r < centroids_.rows; ++r) {
        double d2 = 0.0;
        for (int c = 0; c < kFeatureDim; ++c) {
            const double z = (feat[c] - mu_.at(0, c)) / sigma_.at(0, c);
            const double diff = z - centroids_.at(r, c);
            d2 += diff * diff;
        }
        best = std::min(best, d2);
    }
    return std::sqrt(best);
}

double CentroidDetector::score(const Flow& flow) const {
    if (!windowed_) return flow_distance(flow);
    double worst = 0.0;
    for (const auto& w : split_windows(flow)) worst = std::max(worst, flow_distance(w));
    return worst;
}

OracleVerdict CentroidDetector::evaluate(const Flow& flow) {
    OracleVerdict v;
    if (!windowed_) {
        const bool flagged = flow_distance(flow) > dist_threshold_;
        v.flow_passed = !flagged;
        v.evaded_non_chaff = flagged ? 0 : flow.non_chaff_count();
        return v;
    }
    int evaded = 0;
    for (const auto& w : split_windows(flow)) {
        if (flow_distance(w) <= dist_threshold_) {
            for (const auto& p : w.pkts)
                if (!p.chaff) ++evaded;
        }
    }
    v.evaded_non_chaff = evaded;
    v.flow_passed = evaded == flow.non_chaff_count();
    return v;
}

std::unique_ptr<DetectorOracle> train_centroid(const std::vector<Flow>& benign,
                                               const CentroidTrainConfig& cfg) {
    if (benign.empty()) throw DetectorError("train_centroid: empty corpus");
    std::vector<Flow> units;
    if (cfg.windowed) {
        for (const auto& f : benign) {
            auto wins = split_windows(f);
            units.insert(units.end(), wins.begin(), wins.end());
        }
    } else {
        units = benign;
    }
    if (cfg.k < 1 || static_cast<size_t>(cfg.k) > units.size())
        throw DetectorError("train_centroid: k must lie in [1, corpus size]");

    Tensor x = feature_tensor(units);
    Tensor mu, sigma;
    zscore_stats(x, mu, sigma);
    Tensor z = apply_zscore(x, mu, sigma);

    // Seeded Lloyd iterations; ties go to the lowest centroid index and empty
    // clusters keep their previous position.
    Rng rng(cfg.seed ^ 0xce117);
    std::vector<int> pick(units.size());
    for (size_t i = 0; i < pick.size(); ++i) pick[i] = static_cast<int>(i);
    rng.shuffle(pick);
    Tensor centroids(cfg.k, kFeatureDim);
    for (int r = 0; r < cfg.k; ++r)
        for (int c = 0; c < kFeatureDim; ++c) centroids.at(r, c) = z.at(pick[r], c);

    std::vector<int> assign(units.size(), -1);
    for (int iter = 0; iter < cfg.max_iters; ++iter) {
        bool changed = false;
        for (int i = 0; i < z.rows; ++i) {
            int best = 0;
            double best_d = 1e300;
            for (int r = 0; r < cfg.k; ++r) {
                double d2 = 0.0;
                for (int c = 0; c < kFeatureDim; ++c) {
                    const double diff = z.at(i, c) - centroids.at(r, c);
                    d2 += diff * diff;
                }
                if (d2 < best_d) {
                    best_d = d2;
                    best = r;
                }
            }
            if (assign[i] != best) {
                assign[i] = best;
                changed = true;
            }
        }
        if (!changed) break;
        Tensor sums = Tensor::zeros(cfg.k, kFeatureDim);
        std::vector<int> counts(cfg.k, 0);
        for (int i = 0; i < z.rows; ++i) {
            ++counts[assign[i]];
            for (int c = 0; c < kFeatureDim; ++c) sums.at(assign[i], c) += z.at(i, c);
        }
        for (int r = 0; r < cfg.k; ++r)
            if (counts[r] > 0)
                for (int c = 0; c < kFeatureDim; ++c)
                    centroids.at(r, c) = sums.at(r, c) / counts[r];
    }

    CentroidDetector probe(centroids, mu, sigma, 0.0, false);
    std::vector<double> dists;
    dists.reserve(units.size());
    for (const auto& u : units) dists.push_back(probe.score(u));
    const double threshold = stats::quantile(dists, cfg.calibration_quantile);
    return std::make_unique<CentroidDetector>(centroids, mu, sigma, threshold, cfg.windowed);
}

std::unique_ptr<DetectorOracle> with_noise(std::unique_ptr<DetectorOracle> inner, double p,
                                           uint64_t seed) {
    if (!inner) throw DetectorError("with_noise: null detector");
    if (p < 0.0 || p > 0.5) throw DetectorError("with_noise: p must lie in [0, 0.5]");
    return std::make_unique<NoiseOracle>(std::move(inner), p, seed);
}

std::unique_ptr<DetectorOracle> with_budget(std::unique_ptr<DetectorOracle> inner,
                                            int64_t budget) {
    if (!inner) throw DetectorError("with_budget: null detector");
    if (budget < 1) throw DetectorError("with_budget: budget must be at least 1");
    return std::make_unique<BudgetOracle>(std::move(inner), budget);
}

void save_detector(const std::string& prefix, const DetectorOracle& oracle) {
    nlohmann::json meta;
    meta["version"] = 1;
    std::vector<std::pair<std::string, const Tensor*>> items;
    Tensor bounds, thr;

    if (const auto* t = dynamic_cast<const ThresholdDetector*>(&oracle)) {
        meta["kind"] = "threshold";
        const auto info = t->info();
        bounds = Tensor::row({info.at("ipd_floor"), info.at("rate_ceiling")});
        items.emplace_back("bounds", &bounds);
    } else if (const auto* m = dynamic_cast<const MlpDetector*>(&oracle)) {
        meta["kind"] = "mlp";
        thr = Tensor::row({m->threshold_});
        items = {{"w1", &m->w1_}, {"b1", &m->b1_},       {"w2", &m->w2_},
                 {"b2", &m->b2_}, {"mu", &m->mu_},       {"sigma", &m->sigma_},
                 {"thr", &thr}};
    } else if (const auto* c = dynamic_cast<const CentroidDetector*>(&oracle)) {
        meta["kind"] = "centroid";
        meta["windowed"] = c->windowed_;
        thr = Tensor::row({c->dist_threshold_});
        items = {{"centroids", &c->centroids_},
                 {"mu", &c->mu_},
                 {"sigma", &c->sigma_},
                 {"thr", &thr}};
    } else {
        throw DetectorError("save_detector: only base detectors persist; unwrap " +
                            oracle.kind());
    }
    nn::save_tensors(prefix, items);
    std::ofstream out(prefix + ".meta.json");
    if (!out) throw DetectorError("save_detector: cannot open " + prefix + ".meta.json");
    out << meta.dump(2) << "\n";
}

std::unique_ptr<DetectorOracle> load_detector(const std::string& prefix) {
    std::ifstream in(prefix + ".meta.json");
    if (!in) throw DetectorError("load_detector: cannot open " + prefix + ".meta.json");
    nlohmann::json meta;
    try {
        in >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw DetectorError("load_detector: bad metadata: " + std::string(e.what()));
    }
    auto tensors = nn::load_tensors(prefix);
    auto need = [&](const char* name) -> Tensor& {
        auto it = tensors.find(name);
        if (it == tensors.end())
            throw DetectorError("load_detector: checkpoint is missing tensor " +
                                std::string(name));
        return it->second;
    };

    const auto kind = meta.at("kind").get<std::string>();
    if (kind == "threshold") {
        const Tensor& b = need("bounds");
        return std::make_unique<ThresholdDetector>(b.at(0, 0), b.at(0, 1));
    }
    if (kind == "mlp")
        return std::make_unique<MlpDetector>(need("w1"), need("b1"), need("w2"), need("b2"),
                                             need("mu"), need("sigma"), need("thr").at(0, 0));
    if (kind == "centroid")
        return std::make_unique<CentroidDetector>(need("centroids"), need("mu"), need("sigma"),
                                                  need("thr").at(0, 0),
                                                  meta.at("windowed").get<bool>());
    throw DetectorError("load_detector: unknown detector kind " + kind);
}

BinaryEval evaluate_detector(DetectorOracle& oracle, const std::vector<Flow>& benign,
                             const std::vector<Flow>& malicious) {
    int tp = 0, fp = 0, tn = 0, fn = 0;
    for (const auto& f : benign) {
        if (oracle.query(f).flow_passed) ++tn;
        else ++fp;
    }
    for (const auto& f : malicious) {
        if (oracle.query(f).flow_passed) ++fn;
        else ++tp;
    }

    BinaryEval e;
    e.precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    e.recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    e.f1 = f1_score(tp, fp, fn);
    e.fpr = fp + tn > 0 ? static_cast<double>(fp) / (fp + tn) : 0.0;
    e.accuracy = static_cast<double>(tp + tn) / std::max<size_t>(1, benign.size() + malicious.size());

    // Rank-based AUC with average ranks on ties.
    std::vector<std::pair<double, int>> scored;
    for (const auto& f : benign) scored.push_back({oracle.score(f), 0});
    for (const auto& f : malicious) scored.push_back({oracle.score(f), 1});
    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < scored.size()) {
        size_t j = i;
        while (j < scored.size() && scored[j].first == scored[i].first) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (size_t k = i; k < j; ++k)
            if (scored[k].second == 1) rank_sum_pos += avg_rank;
        i = j;
    }
    const double n_pos = static_cast<double>(malicious.size());
    const double n_neg = static_cast<double>(benign.size());
    e.auc = n_pos > 0 && n_neg > 0
                ? (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
                : 0.0;
    return e;
}

}  // namespace flowmimic
