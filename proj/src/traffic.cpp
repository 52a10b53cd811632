#include "flowmimic/traffic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "flowmimic/rng.hpp"
#include "json.hpp"

namespace flowmimic {

std::vector<double> Flow::ipds() const {
    std::vector<double> out(pkts.size(), 0.0);
    for (size_t i = 1; i < pkts.size(); ++i) out[i] = pkts[i].time - pkts[i - 1].time;
    return out;
}

double Flow::duration() const {
    return pkts.size() < 2 ? 0.0 : pkts.back().time - pkts.front().time;
}

int Flow::non_chaff_count() const {
    int n = 0;
    for (const auto& p : pkts)
        if (!p.chaff) ++n;
    return n;
}

long Flow::total_bytes() const {
    long b = 0;
    for (const auto& p : pkts) b += p.size;
    return b;
}

namespace {

const char* kCsvHeader = "flow_id,packet_index,arrival_time_s,size_bytes,chaff,label";

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

[[noreturn]] void io_fail(size_t line_no, const std::string& msg) {
    throw FlowIoError("line " + std::to_string(line_no) + ": " + msg);
}

}  // namespace

std::vector<Flow> load_flows_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FlowIoError("cannot open " + path);
    std::string line;
    size_t line_no = 0;
    if (!std::getline(in, line)) throw FlowIoError(path + ": empty file");
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kCsvHeader) io_fail(line_no, "expected header '" + std::string(kCsvHeader) + "'");

    std::vector<Flow> flows;
    std::map<std::string, size_t> index;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cols = split_csv(line);
        if (cols.size() != 6) io_fail(line_no, "expected 6 columns, got " + std::to_string(cols.size()));

        PacketEvent ev;
        long pkt_index = 0;
        try {
            pkt_index = std::stol(cols[1]);
            ev.time = std::stod(cols[2]);
            ev.size = std::stoi(cols[3]);
        } catch (const std::exception&) {
            io_fail(line_no, "unparseable numeric field");
        }
        if (ev.size <= 0) io_fail(line_no, "size_bytes must be positive");
        if (cols[4] == "0")
            ev.chaff = false;
        else if (cols[4] == "1")
            ev.chaff = true;
        else
            io_fail(line_no, "chaff must be 0 or 1");

        FlowLabel label;
        if (cols[5] == "benign")
            label = FlowLabel::benign;
        else if (cols[5] == "malicious")
            label = FlowLabel::malicious;
        else
            io_fail(line_no, "unknown label '" + cols[5] + "'");

        auto [it, fresh] = index.try_emplace(cols[0], flows.size());
        if (fresh) {
            flows.emplace_back();
            flows.back().id = cols[0];
            flows.back().label = label;
        }
        Flow& f = flows[it->second];
        if (f.label != label) io_fail(line_no, "label changes within flow '" + cols[0] + "'");
        if (pkt_index != static_cast<long>(f.pkts.size()))
            io_fail(line_no, "packet_index " + cols[1] + " out of order in flow '" + cols[0] + "'");
        if (!f.pkts.empty() && ev.time < f.pkts.back().time)
            io_fail(line_no, "non-monotone arrival time in flow '" + cols[0] + "'");
        f.pkts.push_back(ev);
    }
    if (flows.empty()) throw FlowIoError(path + ": no flow rows");
    return flows;
}

void save_flows_csv(const std::string& path, const std::vector<Flow>& flows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FlowIoError("cannot write " + path);
    out << kCsvHeader << "\n";
    char buf[64];
    for (const auto& f : flows) {
        for (size_t i = 0; i < f.pkts.size(); ++i) {
            // %.17g keeps the double exact across a save/load cycle
            std::snprintf(buf, sizeof(buf), "%.17g", f.pkts[i].time);
            out << f.id << ',' << i << ',' << buf << ',' << f.pkts[i].size << ','
                << (f.pkts[i].chaff ? 1 : 0) << ','
                << (f.label == FlowLabel::benign ? "benign" : "malicious") << "\n";
        }
    }
    if (!out) throw FlowIoError("short write to " + path);
}

double flow_rate_mbps(const Flow& f) {
    const double bits = static_cast<double>(f.total_bytes()) * 8.0;
    double dur = f.duration();
    if (f.pkts.size() < 2 || dur <= 0.0) dur = 1e-3;
    return bits / dur / 1e6;
}

std::vector<double> window_rates_mbps(const Flow& f, double window_s) {
    if (f.pkts.empty()) return {};
    const double t0 = f.pkts.front().time;
    const double span = f.pkts.back().time - t0;
    const int windows = std::max(1, static_cast<int>(std::floor(span / window_s)) + 1);
    std::vector<double> bytes(static_cast<size_t>(windows), 0.0);
    for (const auto& p : f.pkts) {
        int w = static_cast<int>(std::floor((p.time - t0) / window_s));
        w = std::clamp(w, 0, windows - 1);
        bytes[static_cast<size_t>(w)] += static_cast<double>(p.size);
    }
    std::vector<double> rates(bytes.size());
    for (size_t i = 0; i < bytes.size(); ++i) rates[i] = bytes[i] * 8.0 / window_s / 1e6;
    return rates;
}

std::vector<double> rate_histogram(const std::vector<double>& rates, double max_rate, int bins) {
    if (bins <= 0) throw std::invalid_argument("rate_histogram: bins must be positive");
    std::vector<double> h(static_cast<size_t>(bins), 0.0);
    if (rates.empty()) return h;
    const double hi = 1.2 * max_rate;
    const double width = hi > 0.0 ? hi / bins : 1.0;
    for (double r : rates) {
        int b = static_cast<int>(std::floor(r / width));
        b = std::clamp(b, 0, bins - 1);
        h[static_cast<size_t>(b)] += 1.0;
    }
    const double inv = 1.0 / static_cast<double>(rates.size());
    for (auto& v : h) v *= inv;
    return h;
}

double kl_divergence(const std::vector<double>& p, const std::vector<double>& q, double eps) {
    if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: length mismatch");
    if (p.empty()) throw std::invalid_argument("kl_divergence: empty distributions");
    double psum = 0.0, qsum = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] < 0.0 || q[i] < 0.0) throw std::invalid_argument("kl_divergence: negative mass");
        psum += p[i];
        qsum += q[i] + eps;
    }
    if (psum <= 0.0 || qsum <= 0.0) throw std::invalid_argument("kl_divergence: zero total mass");
    double kl = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        const double pi = p[i] / psum;
        if (pi == 0.0) continue;
        const double qi = (q[i] + eps) / qsum;
        if (qi == 0.0) throw std::invalid_argument("kl_divergence: q has a zero bin where p > 0");
        kl += pi * std::log(pi / qi);
    }
    return kl;
}

double bandwidth_kl(const std::vector<Flow>& original, const std::vector<Flow>& adversarial,
                    int bins, double window_s, double eps) {
    std::vector<double> ro, ra;
    for (const auto& f : original) {
        auto w = window_rates_mbps(f, window_s);
        ro.insert(ro.end(), w.begin(), w.end());
    }
    for (const auto& f : adversarial) {
        auto w = window_rates_mbps(f, window_s);
        ra.insert(ra.end(), w.begin(), w.end());
    }
    if (ro.empty() || ra.empty()) throw std::invalid_argument("bandwidth_kl: empty corpus");
    double mx = 0.0;
    for (double r : ro) mx = std::max(mx, r);
    for (double r : ra) mx = std::max(mx, r);
    return kl_divergence(rate_histogram(ro, mx, bins), rate_histogram(ra, mx, bins), eps);
}

AttackKind attack_kind_from_string(const std::string& s) {
    if (s == "burst_flood") return AttackKind::burst_flood;
    if (s == "beacon") return AttackKind::beacon;
    throw std::invalid_argument("unknown attack kind '" + s + "'");
}

std::string to_string(AttackKind k) {
    return k == AttackKind::burst_flood ? "burst_flood" : "beacon";
}

std::vector<Flow> synth_benign(int count, uint64_t seed, const BenignProfile& profile) {
    std::vector<Flow> flows;
    flows.reserve(static_cast<size_t>(count));
    Rng rng(seed ^ 0xbe9165ull);
    char idbuf[32];
    for (int i = 0; i < count; ++i) {
        Flow f;
        std::snprintf(idbuf, sizeof(idbuf), "benign-%06d", i);
        f.id = idbuf;
        f.label = FlowLabel::benign;
        int len = profile.len_min +
                  static_cast<int>(std::floor(std::exp(rng.normal(profile.len_mu, profile.len_sigma))));
        len = std::min(len, profile.len_cap);
        const double base = rng.uniform(profile.ipd_base_lo, profile.ipd_base_hi);
        double t = 0.0;
        for (int k = 0; k < len; ++k) {
            if (k > 0) {
                double lg = base + rng.normal(0.0, profile.ipd_noise);
                lg = std::clamp(lg, profile.ipd_log_min, profile.ipd_log_max);
                t += std::pow(10.0, lg);
            }
            // size mixture: small control segments, mid-range payloads, and
            // near-MTU bulk packets
            const double u = rng.uniform();
            int size;
            if (u < 0.45)
                size = static_cast<int>(rng.uniform_int(40, 90));
            else if (u < 0.78)
                size = static_cast<int>(rng.uniform_int(91, 1399));
            else
                size = static_cast<int>(rng.uniform_int(1400, 1500));
            f.pkts.push_back({t, size, false});
        }
        flows.push_back(std::move(f));
    }
    return flows;
}

std::vector<Flow> synth_malicious(int count, uint64_t seed, AttackKind kind) {
    std::vector<Flow> flows;
    flows.reserve(static_cast<size_t>(count));
    Rng rng(seed ^ (kind == AttackKind::burst_flood ? 0xf100dull : 0xb7ac0ull));
    char idbuf[32];
    for (int i = 0; i < count; ++i) {
        Flow f;
        f.label = FlowLabel::malicious;
        double t = 0.0;
        if (kind == AttackKind::burst_flood) {
            std::snprintf(idbuf, sizeof(idbuf), "burst-%06d", i);
            f.id = idbuf;
            const int len = static_cast<int>(rng.uniform_int(28, 46));
            const int size = static_cast<int>(rng.uniform_int(90, 140));
            for (int k = 0; k < len; ++k) {
                if (k > 0) t += std::pow(10.0, rng.uniform(-5.2, -4.7));
                f.pkts.push_back({t, size, false});
            }
        } else {
            std::snprintf(idbuf, sizeof(idbuf), "beacon-%06d", i);
            f.id = idbuf;
            const int len = static_cast<int>(rng.uniform_int(10, 22));
            const int size = static_cast<int>(rng.uniform_int(160, 260));
            const double period = rng.uniform(0.012, 0.05);
            for (int k = 0; k < len; ++k) {
                if (k > 0) t += period * std::max(0.2, 1.0 + rng.normal(0.0, 0.03));
                f.pkts.push_back({t, size, false});
            }
        }
        flows.push_back(std::move(f));
    }
    return flows;
}

std::string metric_line(const std::string& metric, double value,
                        const std::map<std::string, std::string>& tags) {
    nlohmann::json j;
    j["metric"] = metric;
    j["value"] = value;
    j["tags"] = tags;
    return j.dump();
}

}  // namespace flowmimic
