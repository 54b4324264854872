#include "edgekv/cost_model.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace edgekv {

void CostModel::validate() const {
    if (flops_rate <= 0.0 || mem_bandwidth <= 0.0 || net_bandwidth <= 0.0 ||
        edge_memory <= 0.0 || t_max <= 0.0 || decode_overhead < 0.0) {
        throw std::invalid_argument("CostModel: rates and budgets must be positive");
    }
}

double layer_compute_time(const LayerCost& c, const CostModel& hw) {
    return static_cast<double>(c.flops) / hw.flops_rate +
           static_cast<double>(c.io_bytes) / hw.mem_bandwidth + hw.decode_overhead;
}

double comm_time(std::int64_t bytes, double bandwidth) {
    if (bandwidth == 0.0) throw std::runtime_error("comm_time: link down");
    if (bandwidth < 0.0) throw std::invalid_argument("comm_time: negative bandwidth");
    return static_cast<double>(bytes) / bandwidth;
}

double total_sequential(const std::vector<LayerTimes>& layers) {
    if (layers.empty()) throw std::invalid_argument("total_sequential: empty layer list");
    double total = 0.0;
    for (const LayerTimes& t : layers) total += t.t_comm + t.t_comp;
    return total;
}

std::vector<Violation> feasibility_check(const std::vector<LayerCost>& layers,
                                         const CostModel& hw) {
    hw.validate();
    std::vector<Violation> out;
    const double transfer_budget = hw.net_bandwidth * hw.t_max;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const double req = static_cast<double>(layers[i].req_bytes);
        if (req > hw.edge_memory) {
            out.push_back(Violation{static_cast<int>(i), "memory", req, hw.edge_memory});
        }
        const double vol = static_cast<double>(layers[i].kv_bytes);
        if (vol > transfer_budget) {
            out.push_back(Violation{static_cast<int>(i), "transfer", vol, transfer_budget});
        }
    }
    return out;
}

std::string cache_source_name(CacheSource s) {
    switch (s) {
        case CacheSource::local: return "local";
        case CacheSource::peer: return "peer";
        case CacheSource::cloud: return "cloud";
    }
    return "?";
}

CacheSource cache_source(int layer, double cost_local, double cost_peer, int boundary, int m) {
    if (layer < 1 || layer > m) {
        throw std::invalid_argument("cache_source: layer " + std::to_string(layer) +
                                    " outside 1.." + std::to_string(m));
    }
    if (layer > boundary) return CacheSource::cloud;
    return cost_local <= cost_peer ? CacheSource::local : CacheSource::peer;
}

ScheduleTrace pipeline_schedule(const std::vector<LayerTimes>& layers,
                                const std::vector<CacheSource>& sources) {
    if (layers.empty()) throw std::invalid_argument("pipeline_schedule: empty layer list");
    for (const LayerTimes& t : layers) {
        if (t.t_comm < 0.0 || t.t_comp < 0.0) {
            throw std::invalid_argument("pipeline_schedule: negative time");
        }
    }
    if (!sources.empty() && sources.size() != layers.size()) {
        throw std::invalid_argument("pipeline_schedule: sources size mismatch");
    }
    ScheduleTrace trace;
    trace.layers.resize(layers.size());
    double prev_comp = 0.0;
    double pip_sum = 0.0;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        ScheduleEntry& e = trace.layers[l];
        e.source = sources.empty() ? CacheSource::local : sources[l];
        e.t_comm = layers[l].t_comm;
        e.t_comp = layers[l].t_comp;
        e.t_pip = std::max(e.t_comm, prev_comp);
        pip_sum += e.t_pip;
        prev_comp = e.t_comp;
    }
    trace.pipelined_total = pip_sum + layers.back().t_comp;
    trace.sequential_total = total_sequential(layers);
    return trace;
}

std::string schedule_to_csv(const ScheduleTrace& trace) {
    std::ostringstream out;
    out << "layer,source,t_comm,t_comp,t_pip\n";
    char buf[128];
    for (std::size_t l = 0; l < trace.layers.size(); ++l) {
        const ScheduleEntry& e = trace.layers[l];
        std::snprintf(buf, sizeof(buf), "%zu,%s,%.17g,%.17g,%.17g\n", l,
                      cache_source_name(e.source).c_str(), e.t_comm, e.t_comp, e.t_pip);
        out << buf;
    }
    return out.str();
}

std::string schedule_to_json(const ScheduleTrace& trace) {
    nlohmann::ordered_json j;
    nlohmann::ordered_json layers = nlohmann::ordered_json::array();
    for (const ScheduleEntry& e : trace.layers) {
        layers.push_back({{"source", cache_source_name(e.source)},
                          {"t_comm", e.t_comm},
                          {"t_comp", e.t_comp},
                          {"t_pip", e.t_pip}});
    }
    j["layers"] = layers;
    j["sequential_total"] = trace.sequential_total;
    j["pipelined_total"] = trace.pipelined_total;
    return j.dump(2);
}

}  // namespace edgekv
