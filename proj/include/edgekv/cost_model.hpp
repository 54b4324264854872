#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace edgekv {

struct CostModel {
    double flops_rate = 1e12;        // flops/s
    double mem_bandwidth = 1e11;     // bytes/s
    double decode_overhead = 0.0;    // seconds per layer, applied uniformly
    double net_bandwidth = 1e9;      // bytes/s, default link rate for the analytic checks
    double edge_memory = 1e9;        // bytes
    double t_max = 10.0;             // seconds, maximum tolerable transmission delay

    void validate() const;
};

struct LayerCost {
    std::int64_t flops = 0;
    std::int64_t io_bytes = 0;   // memory traffic during compute
    std::int64_t kv_bytes = 0;   // transferable context-cache size of the layer
    std::int64_t req_bytes = 0;  // memory the edge must hold for the layer
};

// flops/flops_rate + io_bytes/mem_bandwidth + decode_overhead.
double layer_compute_time(const LayerCost& c, const CostModel& hw);

// bytes/bandwidth. A zero bandwidth is a dead link, reported distinctly from
// a slow one so callers can trigger fallback.
double comm_time(std::int64_t bytes, double bandwidth);

struct LayerTimes {
    double t_comm = 0.0;
    double t_comp = 0.0;
};

// Fully serialized total: sum of all transfer times plus all compute times.
double total_sequential(const std::vector<LayerTimes>& layers);

struct Violation {
    int layer;
    std::string constraint;  // "memory" or "transfer"
    double lhs;
    double rhs;
};

// Empty iff max(req_bytes) <= edge_memory and max(kv_bytes) <= net_bandwidth * t_max.
std::vector<Violation> feasibility_check(const std::vector<LayerCost>& layers,
                                         const CostModel& hw);

enum class CacheSource { local, peer, cloud };
std::string cache_source_name(CacheSource s);

// Cache-source rule for 1-based layer l of an M-layer model: layers above
// `boundary` form the deep block and always come from the cloud; layers at
// or below pick the cheaper of local/peer, ties to local. The default
// deployment sets boundary = M - n (shallow block first); passing
// boundary = n reproduces the alternative indexing.
CacheSource cache_source(int layer, double cost_local, double cost_peer, int boundary, int m);

struct ScheduleEntry {
    CacheSource source = CacheSource::local;
    double t_comm = 0.0;
    double t_comp = 0.0;
    double t_pip = 0.0;  // max(t_comm[l], t_comp[l-1])
};

struct ScheduleTrace {
    std::vector<ScheduleEntry> layers;
    double sequential_total = 0.0;
    double pipelined_total = 0.0;
};

// Per-layer overlap of transfer l with compute l-1:
// t_pip[l] = max(t_comm[l], t_comp[l-1]) with t_comp[0] = 0, and
// pipelined_total = sum(t_pip) + t_comp[last] since the final layer's
// computation overlaps nothing downstream.
ScheduleTrace pipeline_schedule(const std::vector<LayerTimes>& layers,
                                const std::vector<CacheSource>& sources = {});

std::string schedule_to_csv(const ScheduleTrace& trace);
std::string schedule_to_json(const ScheduleTrace& trace);

}  // namespace edgekv
