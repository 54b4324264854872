#include "edgekv/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

#include "edgekv/head_prune.hpp"
#include "edgekv/rng.hpp"

namespace edgekv {

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& why) {
    throw std::invalid_argument("config: " + path + ": " + why);
}

const nlohmann::json& expect(const nlohmann::json& j, const std::string& key,
                             const std::string& path) {
    auto it = j.find(key);
    if (it == j.end()) fail(path + "." + key, "missing");
    return *it;
}

double num(const nlohmann::json& j, const std::string& path) {
    if (!j.is_number()) fail(path, "expected a number");
    return j.get<double>();
}

int integer(const nlohmann::json& j, const std::string& path) {
    if (!j.is_number_integer()) fail(path, "expected an integer");
    return j.get<int>();
}

ModelConfig parse_model(const nlohmann::json& j, const std::string& path,
                        std::uint64_t default_seed) {
    ModelConfig cfg;
    cfg.num_layers = integer(expect(j, "num_layers", path), path + ".num_layers");
    cfg.num_heads = integer(expect(j, "num_heads", path), path + ".num_heads");
    cfg.head_dim = integer(expect(j, "head_dim", path), path + ".head_dim");
    cfg.hidden_size = j.contains("hidden_size")
                          ? integer(j["hidden_size"], path + ".hidden_size")
                          : cfg.num_heads * cfg.head_dim;
    cfg.max_positions =
        j.contains("max_positions") ? integer(j["max_positions"], path + ".max_positions") : 128;
    cfg.seed = j.contains("seed") ? j["seed"].get<std::uint64_t>() : default_seed;
    try {
        cfg.validate();
    } catch (const std::exception& e) {
        fail(path, e.what());
    }
    return cfg;
}

RoleCost parse_cost(const nlohmann::json& j, const std::string& path) {
    RoleCost c;
    c.flops_rate = num(expect(j, "flops_per_s", path), path + ".flops_per_s");
    c.mem_bandwidth =
        num(expect(j, "mem_bandwidth_bytes_per_s", path), path + ".mem_bandwidth_bytes_per_s");
    c.decode_overhead =
        j.contains("decode_overhead_s") ? num(j["decode_overhead_s"], path + ".decode_overhead_s")
                                        : 0.0;
    if (c.flops_rate <= 0 || c.mem_bandwidth <= 0 || c.decode_overhead < 0) {
        fail(path, "rates must be positive");
    }
    return c;
}

}  // namespace

int Scenario::link_between(int x, int y) const {
    for (std::size_t i = 0; i < links.size(); ++i) {
        if ((links[i].a == x && links[i].b == y) || (links[i].a == y && links[i].b == x)) {
            return static_cast<int>(i);
        }
    }
    return -1;
}

Scenario build_scenario(const nlohmann::json& config) {
    if (!config.is_object()) fail("$", "expected an object");
    Scenario sc;
    sc.seed = config.contains("seed") ? config["seed"].get<std::uint64_t>() : 42u;

    const nlohmann::json& models = expect(config, "models", "$");
    sc.cloud_model = parse_model(expect(models, "cloud", "models"), "models.cloud", sc.seed + 1);
    sc.edge_model = parse_model(expect(models, "edge", "models"), "models.edge", sc.seed + 2);

    // nodes
    const nlohmann::json& nodes = expect(config, "nodes", "$");
    if (!nodes.is_array() || nodes.empty()) fail("nodes", "expected a non-empty array");
    std::map<std::string, int> node_index;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const std::string path = "nodes[" + std::to_string(i) + "]";
        const nlohmann::json& n = nodes[i];
        NodeSpec spec;
        spec.id = expect(n, "id", path).get<std::string>();
        const std::string role = expect(n, "role", path).get<std::string>();
        if (role == "cloud") {
            spec.is_cloud = true;
        } else if (role == "edge") {
            spec.is_cloud = false;
        } else {
            fail(path + ".role", "expected \"cloud\" or \"edge\", got \"" + role + "\"");
        }
        if (n.contains("memory_bytes")) {
            spec.memory_bytes = n["memory_bytes"].get<std::int64_t>();
            if (spec.memory_bytes <= 0) fail(path + ".memory_bytes", "must be positive");
        }
        if (n.contains("historical_prompts")) {
            for (const auto& p : n["historical_prompts"]) {
                spec.historical_prompts.push_back(p.get<int>());
            }
        }
        if (node_index.count(spec.id) != 0) fail(path + ".id", "duplicate node id " + spec.id);
        node_index[spec.id] = static_cast<int>(i);
        if (spec.is_cloud) {
            if (sc.cloud_node >= 0) fail(path + ".role", "a scenario has exactly one cloud node");
            sc.cloud_node = static_cast<int>(i);
        } else {
            sc.edge_nodes.push_back(static_cast<int>(i));
        }
        sc.nodes.push_back(spec);
    }
    if (sc.cloud_node < 0) fail("nodes", "a cloud node is required");
    if (sc.edge_nodes.empty()) fail("nodes", "at least one edge node is required");

    // links: explicit, or a full mesh with defaults
    if (config.contains("links")) {
        const nlohmann::json& links = config["links"];
        if (!links.is_array()) fail("links", "expected an array");
        std::set<std::pair<int, int>> seen;
        for (std::size_t i = 0; i < links.size(); ++i) {
            const std::string path = "links[" + std::to_string(i) + "]";
            const nlohmann::json& l = links[i];
            LinkSpec spec;
            const std::string a = expect(l, "a", path).get<std::string>();
            const std::string b = expect(l, "b", path).get<std::string>();
            if (node_index.count(a) == 0) fail(path + ".a", "unknown node " + a);
            if (node_index.count(b) == 0) fail(path + ".b", "unknown node " + b);
            spec.a = node_index[a];
            spec.b = node_index[b];
            if (spec.a == spec.b) fail(path, "self link");
            auto key = std::minmax(spec.a, spec.b);
            if (!seen.insert(key).second) fail(path, "duplicate link " + a + "<->" + b);
            spec.bandwidth = num(expect(l, "bandwidth_bytes_per_s", path),
                                 path + ".bandwidth_bytes_per_s");
            if (spec.bandwidth < 0) fail(path + ".bandwidth_bytes_per_s", "must be >= 0");
            if (l.contains("propagation_delay_s")) {
                spec.propagation_delay = num(l["propagation_delay_s"], path + ".propagation_delay_s");
                if (spec.propagation_delay < 0) fail(path + ".propagation_delay_s", "must be >= 0");
            }
            if (l.contains("outages")) {
                double prev_end = -1.0;
                for (std::size_t w = 0; w < l["outages"].size(); ++w) {
                    const auto& o = l["outages"][w];
                    const std::string opath = path + ".outages[" + std::to_string(w) + "]";
                    if (!o.is_array() || o.size() != 2) fail(opath, "expected [start,end]");
                    OutageWindow win{o[0].get<double>(), o[1].get<double>()};
                    if (win.end <= win.start) fail(opath, "end must exceed start");
                    if (win.start < prev_end) fail(opath, "windows must be sorted, non-overlapping");
                    prev_end = win.end;
                    spec.outages.push_back(win);
                }
            }
            sc.links.push_back(spec);
        }
    } else {
        for (std::size_t i = 0; i < sc.nodes.size(); ++i) {
            for (std::size_t j = i + 1; j < sc.nodes.size(); ++j) {
                LinkSpec spec;
                spec.a = static_cast<int>(i);
                spec.b = static_cast<int>(j);
                sc.links.push_back(spec);
            }
        }
    }

    // cost
    const nlohmann::json& cost = expect(config, "cost", "$");
    sc.cloud_cost = parse_cost(expect(cost, "cloud", "cost"), "cost.cloud");
    sc.edge_cost = parse_cost(expect(cost, "edge", "cost"), "cost.edge");
    if (cost.contains("t_max_s")) {
        sc.t_max = num(cost["t_max_s"], "cost.t_max_s");
        if (sc.t_max <= 0) fail("cost.t_max_s", "must be positive");
    }

    if (config.contains("prune")) {
        sc.prune_lambda = num(expect(config["prune"], "lambda", "prune"), "prune.lambda");
        if (sc.prune_lambda < 0 || sc.prune_lambda > 1) fail("prune.lambda", "outside [0,1]");
    }
    if (config.contains("match")) {
        const nlohmann::json& m = config["match"];
        if (m.contains("theta_cka")) sc.match_cfg.theta_cka = num(m["theta_cka"], "match.theta_cka");
        if (m.contains("theta_rsa")) sc.match_cfg.theta_rsa = num(m["theta_rsa"], "match.theta_rsa");
        if (m.contains("num_probe_samples")) {
            sc.match_cfg.num_probe_samples =
                integer(m["num_probe_samples"], "match.num_probe_samples");
        }
        try {
            sc.match_cfg.validate();
        } catch (const std::exception& e) {
            fail("match", e.what());
        }
    }
    if (sc.match_cfg.num_probe_samples > sc.cloud_model.max_positions ||
        sc.match_cfg.num_probe_samples > sc.edge_model.max_positions) {
        fail("match.num_probe_samples", "exceeds a model's max_positions");
    }

    if (config.contains("deep_layers")) {
        sc.deep_layers = integer(config["deep_layers"], "deep_layers");
        if (sc.deep_layers < 0 || sc.deep_layers > sc.edge_model.num_layers) {
            fail("deep_layers", "outside 0.." + std::to_string(sc.edge_model.num_layers));
        }
    }
    if (config.contains("batch_width")) {
        sc.batch_width = integer(config["batch_width"], "batch_width");
        if (sc.batch_width < 1) fail("batch_width", "must be >= 1");
    }

    // collaborative cache reuse needs aligned heads and a prune ratio that
    // lands exactly on the edge head dim
    if (sc.cloud_model.num_heads != sc.edge_model.num_heads) {
        fail("models", "cloud and edge num_heads must match for cache sharing");
    }
    const PruneSpec prune = PruneSpec::from_lambda(sc.prune_lambda, sc.cloud_model.head_dim);
    if (prune.retained != sc.edge_model.head_dim) {
        fail("prune.lambda", "retained channels " + std::to_string(prune.retained) +
                                 " != edge head_dim " +
                                 std::to_string(sc.edge_model.head_dim));
    }

    // requests: explicit list or an arrival process
    const bool has_requests = config.contains("requests");
    const bool has_arrival = config.contains("arrival");
    if (has_requests == has_arrival) {
        fail("$", "provide exactly one of \"requests\" and \"arrival\"");
    }
    auto check_request = [&](const RequestSpec& r, const std::string& path) {
        if (r.system_len < 0) fail(path + ".system_len", "must be >= 0");
        if (r.user_len < 1) fail(path + ".user_len", "must be >= 1");
        if (r.output_len < 1) fail(path + ".output_len", "must be >= 1");
        const int total = r.system_len + r.user_len + r.output_len;
        if (total > sc.edge_model.max_positions || total > sc.cloud_model.max_positions) {
            fail(path, "s + u + output = " + std::to_string(total) +
                           " exceeds a model's max_positions");
        }
        if (r.arrival < 0) fail(path + ".arrival_s", "must be >= 0");
    };
    if (has_requests) {
        const nlohmann::json& reqs = config["requests"];
        if (!reqs.is_array() || reqs.empty()) fail("requests", "expected a non-empty array");
        for (std::size_t i = 0; i < reqs.size(); ++i) {
            const std::string path = "requests[" + std::to_string(i) + "]";
            const nlohmann::json& r = reqs[i];
            RequestSpec spec;
            spec.id = static_cast<int>(i);
            spec.arrival = num(expect(r, "arrival_s", path), path + ".arrival_s");
            const std::string edge = expect(r, "edge", path).get<std::string>();
            if (node_index.count(edge) == 0) fail(path + ".edge", "unknown node " + edge);
            spec.edge_node = node_index[edge];
            if (sc.nodes[static_cast<std::size_t>(spec.edge_node)].is_cloud) {
                fail(path + ".edge", "requests target edge nodes");
            }
            spec.prompt_id = r.contains("prompt_id") ? integer(r["prompt_id"], path + ".prompt_id") : 0;
            spec.system_len = integer(expect(r, "system_len", path), path + ".system_len");
            spec.user_len = integer(expect(r, "user_len", path), path + ".user_len");
            spec.output_len = integer(expect(r, "output_len", path), path + ".output_len");
            check_request(spec, path);
            sc.requests.push_back(spec);
        }
    } else {
        const nlohmann::json& a = config["arrival"];
        const double rate = num(expect(a, "rate_per_s", "arrival"), "arrival.rate_per_s");
        const int count = integer(expect(a, "count", "arrival"), "arrival.count");
        if (rate <= 0) fail("arrival.rate_per_s", "must be positive");
        if (count < 1) fail("arrival.count", "must be >= 1");
        std::string dist = "fixed";
        if (a.contains("distribution")) dist = a["distribution"].get<std::string>();
        if (dist != "fixed" && dist != "poisson") {
            fail("arrival.distribution", "expected \"fixed\" or \"poisson\"");
        }
        RequestSpec base;
        base.prompt_id = a.contains("prompt_id") ? integer(a["prompt_id"], "arrival.prompt_id") : 0;
        base.system_len = integer(expect(a, "system_len", "arrival"), "arrival.system_len");
        base.user_len = integer(expect(a, "user_len", "arrival"), "arrival.user_len");
        base.output_len = integer(expect(a, "output_len", "arrival"), "arrival.output_len");
        Rng jitter = Rng(sc.seed).fork(0xA221);
        double t = 0.0;
        for (int i = 0; i < count; ++i) {
            RequestSpec spec = base;
            spec.id = i;
            if (dist == "fixed") {
                spec.arrival = static_cast<double>(i) / rate;
            } else {
                if (i > 0) t += jitter.exponential(1.0 / rate);
                spec.arrival = t;
            }
            spec.edge_node = sc.edge_nodes[static_cast<std::size_t>(i) % sc.edge_nodes.size()];
            check_request(spec, "arrival");
            sc.requests.push_back(spec);
        }
    }

    // requests sharing a prompt share its system length
    std::map<int, int> prompt_len;
    for (const RequestSpec& r : sc.requests) {
        auto [it, inserted] = prompt_len.emplace(r.prompt_id, r.system_len);
        if (!inserted && it->second != r.system_len) {
            fail("requests", "prompt " + std::to_string(r.prompt_id) +
                                 " used with different system_len values");
        }
    }

    // every edge node reaches the cloud
    for (int e : sc.edge_nodes) {
        if (sc.link_between(e, sc.cloud_node) < 0) {
            fail("links", "edge node " + sc.nodes[static_cast<std::size_t>(e)].id +
                              " has no link to the cloud");
        }
    }
    return sc;
}

}  // namespace edgekv
