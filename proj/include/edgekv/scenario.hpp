#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "edgekv/layer_match.hpp"
#include "edgekv/transformer.hpp"

namespace edgekv {

struct NodeSpec {
    std::string id;
    bool is_cloud = false;
    std::int64_t memory_bytes = 1ll << 30;
    std::vector<int> historical_prompts;  // deep-block KV pre-seeded on local disk
};

struct OutageWindow {
    double start = 0.0;
    double end = 0.0;
};

struct LinkSpec {
    int a = -1;  // node indices
    int b = -1;
    double bandwidth = 1e9;          // bytes/s
    double propagation_delay = 0.0;  // seconds
    std::vector<OutageWindow> outages;
};

struct RequestSpec {
    int id = 0;
    double arrival = 0.0;
    int edge_node = -1;  // node index
    int prompt_id = 0;
    int system_len = 0;
    int user_len = 1;
    int output_len = 1;
};

struct RoleCost {
    double flops_rate = 1e12;
    double mem_bandwidth = 1e11;
    double decode_overhead = 0.0;
};

// Fully resolved simulator input. All randomness (arrival jitter, prompt and
// user embedding content) is derived from the single master seed.
struct Scenario {
    std::uint64_t seed = 42;
    ModelConfig cloud_model;
    ModelConfig edge_model;
    std::vector<NodeSpec> nodes;
    std::vector<LinkSpec> links;
    std::vector<RequestSpec> requests;
    RoleCost cloud_cost;
    RoleCost edge_cost;
    double t_max = 10.0;
    double prune_lambda = 0.0;
    SimilarityConfig match_cfg;
    int deep_layers = 0;  // edge layers whose context KV is sourced from the cloud
    int batch_width = 1;

    int cloud_node = -1;
    std::vector<int> edge_nodes;

    int link_between(int x, int y) const;  // index into links, or -1
};

// Parses and validates a scenario config document. Validation failures name
// the offending field path.
Scenario build_scenario(const nlohmann::json& config);

}  // namespace edgekv
