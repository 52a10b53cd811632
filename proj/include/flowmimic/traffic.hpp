#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowmimic {

/**
 * @brief Flow records and corpus plumbing.
 *
 * A flow is an ordered list of packet events relative to the flow start.
 * The inter-packet delay (IPD) sequence is derived, with the convention that
 * the first packet's delay is zero. Chaff marks packets injected by the
 * attack; detectors compute features over every packet (a monitor cannot
 * tell chaff apart) while evasion accounting only credits non-chaff packets.
 */

struct PacketEvent {
    double time = 0.0;  // seconds since flow start
    int size = 0;       // bytes on the wire
    bool chaff = false;
};

enum class FlowLabel { benign, malicious };

struct Flow {
    std::string id;
    FlowLabel label = FlowLabel::benign;
    std::vector<PacketEvent> pkts;

    // IPD sequence, same length as pkts; element 0 is always 0.
    std::vector<double> ipds() const;
    double duration() const;
    int non_chaff_count() const;
    long total_bytes() const;
};

struct FlowIoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// CSV schema: flow_id, packet_index, arrival_time_s, size_bytes, chaff, label.
// Reading validates per-flow packet_index ordering and non-decreasing
// arrival times; violations raise FlowIoError naming the offending line.
std::vector<Flow> load_flows_csv(const std::string& path);
void save_flows_csv(const std::string& path, const std::vector<Flow>& flows);

// Average flow rate in Mbit/s. Flows with fewer than two packets (or a zero
// time span) are rated against a 1 ms floor instead of dividing by zero.
double flow_rate_mbps(const Flow& f);

// Rates of consecutive 100 ms windows covering the flow, in Mbit/s.
std::vector<double> window_rates_mbps(const Flow& f, double window_s = 0.1);

// Normalized histogram over [0, 1.2 * max_rate] with equal-width bins.
std::vector<double> rate_histogram(const std::vector<double>& rates, double max_rate, int bins = 50);

// KL(p || q) with q smoothed additively by eps and renormalized so empty q
// bins cannot produce infinities. eps = 0 computes the raw divergence.
double kl_divergence(const std::vector<double>& p, const std::vector<double>& q, double eps = 1e-9);

// Window-rate distribution divergence between two corpora, binned over the
// combined range. The usual use is original vs adversarial flows.
double bandwidth_kl(const std::vector<Flow>& original, const std::vector<Flow>& adversarial,
                    int bins = 50, double window_s = 0.1, double eps = 1e-9);

/** Synthetic corpus generators. All are bit-deterministic under the seed. */

struct BenignProfile {
    // log flow length is roughly normal; lengths clip to [len_min, len_cap]
    double len_mu = 2.0;
    double len_sigma = 0.86;
    int len_min = 2;
    int len_cap = 240;
    // per-flow IPD decade base, uniform in [ipd_base_lo, ipd_base_hi], with
    // per-gap lognormal noise; gaps clip to [ipd_log_min, ipd_log_max] decades
    double ipd_base_lo = -4.6;
    double ipd_base_hi = -2.4;
    double ipd_noise = 0.7;
    double ipd_log_min = -6.0;
    double ipd_log_max = -0.8;
};

enum class AttackKind { burst_flood, beacon };

AttackKind attack_kind_from_string(const std::string& s);
std::string to_string(AttackKind k);

std::vector<Flow> synth_benign(int count, uint64_t seed, const BenignProfile& profile = {});
std::vector<Flow> synth_malicious(int count, uint64_t seed, AttackKind kind);

// One-line JSON metric record: {"metric":..., "value":..., "tags":{...}}.
std::string metric_line(const std::string& metric, double value,
                        const std::map<std::string, std::string>& tags = {});

}  // namespace flowmimic
