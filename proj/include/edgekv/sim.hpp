#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "edgekv/scenario.hpp"

namespace edgekv {

enum class Mode { naive_cloud, cached_cloud, naive_edge, ce_lslm };

std::string mode_name(Mode m);
Mode parse_mode(const std::string& s);
const std::vector<Mode>& all_modes();

struct RequestMetrics {
    int id = 0;
    double arrival = 0.0;
    double ttft = 0.0;     // seconds from arrival to first decode completion
    double latency = 0.0;  // seconds from arrival to completion
    int tokens = 0;
    std::string status;       // "completed" or "failed"
    std::string fail_reason;  // set when failed
};

struct MetricsReport {
    Mode mode = Mode::naive_edge;
    std::uint64_t seed = 0;
    std::vector<RequestMetrics> requests;
    int completed = 0;
    int failed = 0;
    double avg_ttft = 0.0;
    double avg_latency = 0.0;                   // user-perceived, completed requests
    double avg_normalized_ms_per_token = 0.0;   // latency / generated tokens
    double throughput_rps = 0.0;                // completed / (last completion - first arrival)
    std::int64_t bytes_total = 0;               // all link traffic
    std::int64_t user_bytes_to_cloud = 0;       // privacy ledger
    std::int64_t context_kv_bytes = 0;
    std::int64_t upload_bytes = 0;
    std::int64_t response_bytes = 0;
};

// One row per scheduled task, for work-conservation audits in tests.
struct TaskAudit {
    std::string resource;
    double ready = 0.0;
    double start = 0.0;
    double end = 0.0;  // resource occupancy end (transfers exclude propagation)
};

struct RunResult {
    MetricsReport report;
    std::vector<std::string> event_lines;  // newline-delimited JSON records
    std::vector<TaskAudit> audits;

    std::string event_log() const;
    std::uint64_t event_checksum() const;
};

// Deterministic discrete-event execution of one deployment strategy.
// Request-level failures are data in the report, not errors.
RunResult run(const Scenario& scenario, Mode mode);

struct SweepRow {
    double rate = 0.0;
    Mode mode = Mode::naive_edge;
    MetricsReport report;
};

// One run per (rate, mode) with the template's arrival rate overridden and
// the master seed offset per rate.
std::vector<SweepRow> sweep(const nlohmann::json& config_template,
                            const std::vector<double>& rates);

std::string metrics_to_csv(const MetricsReport& report);
std::string metrics_to_json(const MetricsReport& report);
std::string sweep_to_csv(const std::vector<SweepRow>& rows);

}  // namespace edgekv
