#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "edgekv/cache_merge.hpp"
#include "edgekv/cost_model.hpp"
#include "edgekv/head_prune.hpp"
#include "edgekv/layer_match.hpp"
#include "edgekv/matrix.hpp"
#include "edgekv/rng.hpp"
#include "edgekv/scenario.hpp"
#include "edgekv/sim.hpp"
#include "edgekv/transformer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace edgekv;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitViolation = 1;
constexpr int kExitUsage = 2;

// Collects emitted files and finishes with a manifest listing their checksums.
class OutputDir {
  public:
    explicit OutputDir(std::string dir) : dir_(std::move(dir)) {}

    void write(const std::string& name, const std::string& content) {
        fs::create_directories(dir_);
        std::ofstream f(dir_ / name, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write " + (dir_ / name).string());
        f << content;
        entries_.push_back({name, to_hex(fnv1a64(content))});
    }

    void manifest(const std::string& subcommand, const std::string& config_path,
                  std::uint64_t seed) {
        ordered_json m;
        m["subcommand"] = subcommand;
        m["config"] = config_path;
        m["seed"] = seed;
        ordered_json outputs = ordered_json::array();
        for (const auto& [file, sum] : entries_) {
            outputs.push_back({{"file", file}, {"fnv64", sum}});
        }
        m["outputs"] = outputs;
        fs::create_directories(dir_);
        std::ofstream f(dir_ / "manifest.json", std::ios::binary);
        f << m.dump(2) << "\n";
    }

  private:
    fs::path dir_;
    std::vector<std::pair<std::string, std::string>> entries_;
};

json load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("cannot open config " + path);
    json j;
    f >> j;
    return j;
}

std::string matrix_csv(const Matrix& m) {
    std::ostringstream out;
    char buf[64];
    for (std::size_t i = 0; i < m.rows; ++i) {
        for (std::size_t c = 0; c < m.cols; ++c) {
            std::snprintf(buf, sizeof(buf), "%.17g", m(i, c));
            out << buf << (c + 1 == m.cols ? "" : ",");
        }
        out << "\n";
    }
    return out.str();
}

ModelConfig model_from_json(const json& j, std::uint64_t default_seed) {
    ModelConfig cfg;
    cfg.num_layers = j.at("num_layers").get<int>();
    cfg.num_heads = j.at("num_heads").get<int>();
    cfg.head_dim = j.at("head_dim").get<int>();
    cfg.hidden_size = j.contains("hidden_size") ? j["hidden_size"].get<int>()
                                                : cfg.num_heads * cfg.head_dim;
    cfg.max_positions = j.contains("max_positions") ? j["max_positions"].get<int>() : 128;
    cfg.seed = j.contains("seed") ? j["seed"].get<std::uint64_t>() : default_seed;
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------

int cmd_verify_merge(std::uint64_t seed, int trials, const std::string& out_dir) {
    Rng rng(seed);
    double worst = 0.0;
    double worst_alpha = 0.0;
    ordered_json offending;
    for (int trial = 0; trial < trials; ++trial) {
        const int d = 1 + static_cast<int>(rng.next_u64() % 16);
        const int split = 1 + static_cast<int>(rng.next_u64() % 64);  // segment lengths <= 64
        const int user_len = 1 + static_cast<int>(rng.next_u64() % 64);
        const int total = split + user_len;
        const double scale = (trial % 5 == 0) ? 3.0 : 1.0;
        Vec q(static_cast<std::size_t>(d));
        for (double& x : q) x = rng.uniform(-scale, scale);
        Matrix k(static_cast<std::size_t>(total), static_cast<std::size_t>(d));
        Matrix v(static_cast<std::size_t>(total), static_cast<std::size_t>(d));
        for (double& x : k.data) x = rng.uniform(-scale, scale);
        for (double& x : v.data) x = rng.uniform(-scale, scale);

        Matrix k_ctx(static_cast<std::size_t>(split), static_cast<std::size_t>(d));
        Matrix v_ctx(static_cast<std::size_t>(split), static_cast<std::size_t>(d));
        Matrix k_user(static_cast<std::size_t>(total - split), static_cast<std::size_t>(d));
        Matrix v_user(static_cast<std::size_t>(total - split), static_cast<std::size_t>(d));
        std::copy(k.data.begin(), k.data.begin() + split * d, k_ctx.data.begin());
        std::copy(v.data.begin(), v.data.begin() + split * d, v_ctx.data.begin());
        std::copy(k.data.begin() + split * d, k.data.end(), k_user.data.begin());
        std::copy(v.data.begin() + split * d, v.data.end(), v_user.data.begin());

        SegmentAttention ctx = segment_attention(q, k_ctx, v_ctx);
        SegmentAttention user = segment_attention(q, k_user, v_user);
        MergedAttention merged = merge_attention(ctx, user);
        worst_alpha = std::max(worst_alpha,
                               std::abs(merged.weights.alpha_ctx + merged.weights.alpha_user - 1.0));

        // monolithic softmax attention over the unsplit sequence
        Vec logits(static_cast<std::size_t>(total));
        for (int j = 0; j < total; ++j) {
            double acc = 0.0;
            for (int c = 0; c < d; ++c)
                acc += q[static_cast<std::size_t>(c)] * k(static_cast<std::size_t>(j),
                                                          static_cast<std::size_t>(c));
            logits[static_cast<std::size_t>(j)] = acc;
        }
        double mx = logits[0];
        for (double l : logits) mx = std::max(mx, l);
        double denom = 0.0;
        Vec want(static_cast<std::size_t>(d), 0.0);
        for (int j = 0; j < total; ++j) {
            const double w = std::exp(logits[static_cast<std::size_t>(j)] - mx);
            denom += w;
            for (int c = 0; c < d; ++c)
                want[static_cast<std::size_t>(c)] +=
                    w * v(static_cast<std::size_t>(j), static_cast<std::size_t>(c));
        }
        double dev = 0.0;
        for (int c = 0; c < d; ++c) {
            dev = std::max(dev, std::abs(merged.o[static_cast<std::size_t>(c)] -
                                         want[static_cast<std::size_t>(c)] / denom));
        }
        if (dev > worst) {
            worst = dev;
            if (dev > 1e-9) {
                offending = ordered_json{{"trial", trial}, {"split", split},
                                         {"q", q},         {"k", k.data},
                                         {"v", v.data},    {"rows", total},
                                         {"head_dim", d}};
            }
        }
    }
    const bool pass = worst <= 1e-9 && worst_alpha <= 1e-12;
    std::printf("merge identity: %d trials, max abs deviation %.3e, alpha-sum deviation %.3e\n",
                trials, worst, worst_alpha);
    OutputDir out(out_dir);
    ordered_json report{{"seed", seed},
                        {"trials", trials},
                        {"max_abs_deviation", worst},
                        {"max_alpha_sum_deviation", worst_alpha},
                        {"pass", pass}};
    if (!pass && !offending.is_null()) report["offending_case"] = offending;
    out.write("verify_merge.json", report.dump(2) + "\n");
    out.manifest("verify-merge", "", seed);
    return pass ? kExitOk : kExitViolation;
}

int cmd_match_layers(const json& cfg, std::uint64_t seed, const std::string& out_dir,
                     const std::string& cfg_path) {
    ModelConfig edge_cfg = model_from_json(cfg.at("models").at("edge"), seed + 2);
    ModelConfig cloud_cfg = model_from_json(cfg.at("models").at("cloud"), seed + 1);
    SimilarityConfig sim;
    if (cfg.contains("match")) {
        const json& m = cfg["match"];
        if (m.contains("theta_cka")) sim.theta_cka = m["theta_cka"].get<double>();
        if (m.contains("theta_rsa")) sim.theta_rsa = m["theta_rsa"].get<double>();
        if (m.contains("num_probe_samples"))
            sim.num_probe_samples = m["num_probe_samples"].get<int>();
    }
    sim.validate();
    if (sim.num_probe_samples > edge_cfg.max_positions ||
        sim.num_probe_samples > cloud_cfg.max_positions) {
        throw std::invalid_argument("match.num_probe_samples exceeds a model's max_positions");
    }
    Model edge = init_model(edge_cfg);
    Model cloud = init_model(cloud_cfg);
    Matrix probe_e = generate_embeddings(Rng::mix(seed, 0x9B0BE), sim.num_probe_samples,
                                         edge_cfg.hidden_size);
    Matrix probe_c = generate_embeddings(Rng::mix(seed, 0x9B0BE), sim.num_probe_samples,
                                         cloud_cfg.hidden_size);
    LayerMatchReport report = match_layers(prefill(edge, probe_e).layer_outputs,
                                           prefill(cloud, probe_c).layer_outputs, sim);
    for (const LayerMatch& m : report.matches) {
        std::printf("edge layer %d -> cloud layer %d (cka %.6g, rsa %.6g)\n", m.edge_layer,
                    m.cloud_layer, m.cka, m.rsa);
    }
    if (report.matches.empty()) {
        std::printf("warning: no layer pair passed the thresholds; shared set is empty\n");
    }
    OutputDir out(out_dir);
    out.write("cka.csv", matrix_csv(report.cka));
    out.write("rsa.csv", matrix_csv(report.rsa));
    out.write("pairs.csv", match_report_to_csv(report));
    out.write("report.json", match_report_to_json(report) + "\n");
    out.manifest("match-layers", cfg_path, seed);
    return kExitOk;
}

int cmd_prune(const json& cfg, std::uint64_t seed, const std::string& out_dir,
              const std::string& cfg_path) {
    ModelConfig cloud_cfg = model_from_json(cfg.at("models").at("cloud"), seed + 1);
    double lambda = 0.0;
    int probe_rows = 16;
    if (cfg.contains("prune")) {
        const json& p = cfg["prune"];
        if (p.contains("lambda")) lambda = p["lambda"].get<double>();
        if (p.contains("probe_rows")) probe_rows = p["probe_rows"].get<int>();
    }
    if (probe_rows < 1 || probe_rows > cloud_cfg.max_positions) {
        throw std::invalid_argument("prune.probe_rows outside 1..max_positions");
    }
    const PruneSpec spec = PruneSpec::from_lambda(lambda, cloud_cfg.head_dim);
    Model cloud = init_model(cloud_cfg);
    Matrix probe = generate_embeddings(Rng::mix(seed, 0x9B0BE), probe_rows,
                                       cloud_cfg.hidden_size);
    PrefillResult pre = prefill(cloud, probe);

    // reconstruct each layer's input to form Q alongside the cached K
    Matrix x0(probe.rows, probe.cols);
    for (std::size_t i = 0; i < probe.rows; ++i)
        for (std::size_t c = 0; c < probe.cols; ++c)
            x0(i, c) = cloud.layers[0].gamma[c] *
                           (probe(i, c) + cloud.pos_embedding(i, c)) +
                       cloud.layers[0].bias[c];

    const std::size_t rows_per = probe.rows;
    Matrix q_stack(rows_per * static_cast<std::size_t>(cloud_cfg.num_layers) *
                       static_cast<std::size_t>(cloud_cfg.num_heads),
                   static_cast<std::size_t>(cloud_cfg.head_dim));
    Matrix k_stack(q_stack.rows, q_stack.cols);
    ordered_json per_head = ordered_json::array();
    std::ostringstream csv;
    csv << "layer,head,objective,full_norm\n";
    std::size_t block = 0;
    std::vector<std::pair<int, QkvRows>> head_qkv;
    for (int l = 0; l < cloud_cfg.num_layers; ++l) {
        const Matrix& input = l == 0 ? x0 : pre.layer_outputs[static_cast<std::size_t>(l - 1)];
        for (int h = 0; h < cloud_cfg.num_heads; ++h) {
            QkvRows qkv = project_qkv(cloud, input, l, h);
            for (std::size_t i = 0; i < rows_per; ++i)
                for (std::size_t c = 0; c < static_cast<std::size_t>(cloud_cfg.head_dim); ++c) {
                    q_stack(block * rows_per + i, c) = qkv.q(i, c);
                    k_stack(block * rows_per + i, c) = qkv.k(i, c);
                }
            ++block;
            head_qkv.push_back({l * cloud_cfg.num_heads + h, std::move(qkv)});
        }
    }
    const ChannelMask mask = spec.retained == cloud_cfg.head_dim
                                 ? ChannelMask::full(cloud_cfg.head_dim)
                                 : select_channels(q_stack, k_stack, spec);
    char buf[160];
    for (int l = 0; l < cloud_cfg.num_layers; ++l) {
        for (int h = 0; h < cloud_cfg.num_heads; ++h) {
            const QkvRows& qkv =
                head_qkv[static_cast<std::size_t>(l * cloud_cfg.num_heads + h)].second;
            const double obj = prune_objective(qkv.q, qkv.k, mask);
            ChannelMask empty;
            empty.head_dim = cloud_cfg.head_dim;
            const double full = prune_objective(qkv.q, qkv.k, empty);
            per_head.push_back(
                {{"layer", l}, {"head", h}, {"objective", obj}, {"full_norm", full}});
            std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%.17g\n", l, h, obj, full);
            csv << buf;
        }
    }
    std::printf("pruning %d -> %d channels (lambda %.6g); kept:", cloud_cfg.head_dim,
                spec.retained, lambda);
    for (int c : mask.kept) std::printf(" %d", c);
    std::printf("\n");
    OutputDir out(out_dir);
    ordered_json j{{"lambda", lambda},
                   {"head_dim", cloud_cfg.head_dim},
                   {"retained", spec.retained},
                   {"kept", mask.kept},
                   {"per_head", per_head}};
    out.write("prune.json", j.dump(2) + "\n");
    out.write("prune.csv", csv.str());
    out.manifest("prune", cfg_path, seed);
    return kExitOk;
}

int cmd_cost(const json* cfg, bool paper_example, std::uint64_t seed,
             const std::string& out_dir, const std::string& cfg_path) {
    DeltaParams params;
    double flops_rate = 100e9;
    double bandwidth = 1e7;
    if (paper_example) {
        params = DeltaParams{1, 1024, 32, 80, 64, 32};
    } else {
        if (cfg == nullptr || !cfg->contains("cost_delta")) {
            throw std::invalid_argument("cost: provide --paper-example or a config with cost_delta");
        }
        const json& d = cfg->at("cost_delta");
        params.b = d.at("b").get<std::int64_t>();
        params.m = d.at("m").get<std::int64_t>();
        params.k = d.at("k").get<std::int64_t>();
        params.d_c = d.at("d_c").get<std::int64_t>();
        params.d_e = d.at("d_e").get<std::int64_t>();
        params.L = d.at("L").get<std::int64_t>();
        if (d.contains("flops_rate")) flops_rate = d["flops_rate"].get<double>();
        if (d.contains("bandwidth_bytes_per_s"))
            bandwidth = d["bandwidth_bytes_per_s"].get<double>();
    }
    const SavingsReport rep = savings_report(params, flops_rate, bandwidth);
    std::printf("delta_flops: %lld\n", static_cast<long long>(rep.flops_delta));
    std::printf("delta_io_bytes: %lld\n", static_cast<long long>(rep.io_bytes_delta));
    std::printf("%s", savings_to_text(rep).c_str());
    OutputDir out(out_dir);
    out.write("cost.json", savings_to_json(rep) + "\n");
    out.manifest("cost", cfg_path, seed);
    return kExitOk;
}

void print_summary_row(const MetricsReport& rep) {
    std::printf("%-12s ttft_avg %.6g s  total %.6g s  transmitted %lld B  user_upload %lld B  "
                "completed %d  failed %d\n",
                mode_name(rep.mode).c_str(), rep.avg_ttft, rep.avg_latency,
                static_cast<long long>(rep.bytes_total),
                static_cast<long long>(rep.user_bytes_to_cloud), rep.completed, rep.failed);
}

int cmd_simulate(const json& cfg, const std::string& mode_str, std::uint64_t seed,
                 bool seed_given, const std::string& out_dir, const std::string& cfg_path) {
    json effective = cfg;
    if (seed_given) effective["seed"] = seed;
    const Scenario sc = build_scenario(effective);
    const Mode mode = parse_mode(mode_str);
    RunResult res = run(sc, mode);
    print_summary_row(res.report);
    OutputDir out(out_dir);
    out.write("metrics.json", metrics_to_json(res.report) + "\n");
    out.write("metrics.csv", metrics_to_csv(res.report));
    out.write("events.ndjson", res.event_log());
    out.manifest("simulate", cfg_path, sc.seed);
    return kExitOk;
}

int cmd_sweep(const json& cfg, const std::vector<double>& rates, std::uint64_t seed,
              bool seed_given, const std::string& out_dir, const std::string& cfg_path) {
    if (rates.empty()) throw std::invalid_argument("sweep: at least one rate required");
    json effective = cfg;
    if (seed_given) effective["seed"] = seed;
    std::vector<SweepRow> rows = sweep(effective, rates);
    for (const SweepRow& row : rows) {
        std::printf("rate %-6.4g ", row.rate);
        print_summary_row(row.report);
    }
    OutputDir out(out_dir);
    out.write("sweep.csv", sweep_to_csv(rows));
    ordered_json j = ordered_json::array();
    for (const SweepRow& row : rows) {
        j.push_back({{"rate", row.rate},
                     {"mode", mode_name(row.mode)},
                     {"report", json::parse(metrics_to_json(row.report))}});
    }
    out.write("sweep.json", j.dump(2) + "\n");
    out.manifest("sweep", cfg_path, effective.contains("seed")
                                        ? effective["seed"].get<std::uint64_t>()
                                        : seed);
    return kExitOk;
}

int cmd_feasibility(const json& cfg, std::uint64_t seed, bool seed_given,
                    const std::string& out_dir, const std::string& cfg_path) {
    json effective = cfg;
    if (seed_given) effective["seed"] = seed;
    const Scenario sc = build_scenario(effective);
    int max_s = 0;
    for (const RequestSpec& r : sc.requests) max_s = std::max(max_s, r.system_len);

    ordered_json nodes = ordered_json::array();
    bool any_violation = false;
    for (int e : sc.edge_nodes) {
        const NodeSpec& node = sc.nodes[static_cast<std::size_t>(e)];
        const int li = sc.link_between(e, sc.cloud_node);
        CostModel hw;
        hw.flops_rate = sc.edge_cost.flops_rate;
        hw.mem_bandwidth = sc.edge_cost.mem_bandwidth;
        hw.decode_overhead = sc.edge_cost.decode_overhead;
        hw.net_bandwidth = sc.links[static_cast<std::size_t>(li)].bandwidth;
        hw.edge_memory = static_cast<double>(node.memory_bytes);
        hw.t_max = sc.t_max;
        std::vector<LayerCost> layers;
        for (int l = 0; l < sc.edge_model.num_layers; ++l) {
            LayerCost c;
            c.flops = layer_flop_counts(sc.edge_model, max_s, 0, l == 0).total();
            c.io_bytes = layer_io_bytes(sc.edge_model, max_s, 0);
            c.kv_bytes = layer_kv_bytes(sc.edge_model, max_s);
            c.req_bytes = layer_kv_bytes(sc.edge_model, max_s);
            layers.push_back(c);
        }
        const std::vector<Violation> violations = feasibility_check(layers, hw);
        ordered_json vj = ordered_json::array();
        for (const Violation& v : violations) {
            any_violation = true;
            std::printf("%s: layer %d violates %s (%.6g > %.6g)\n", node.id.c_str(), v.layer,
                        v.constraint.c_str(), v.lhs, v.rhs);
            vj.push_back({{"layer", v.layer},
                          {"constraint", v.constraint},
                          {"lhs", v.lhs},
                          {"rhs", v.rhs}});
        }
        nodes.push_back({{"node", node.id}, {"violations", vj}});
    }
    if (!any_violation) std::printf("feasible: all layer budgets hold\n");
    OutputDir out(out_dir);
    ordered_json j{{"system_len", max_s}, {"nodes", nodes}};
    out.write("feasibility.json", j.dump(2) + "\n");
    out.manifest("feasibility", cfg_path, sc.seed);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cloud-edge KV-cache collaborative inference toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    std::uint64_t seed = 42;
    std::string out_dir = "out";
    std::string config_path;
    app.add_option("--seed", seed, "master seed (default 42)");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--config", config_path, "JSON config path");

    auto* verify = app.add_subcommand("verify-merge", "check the attention merge identity");
    int trials = 1000;
    verify->add_option("--trials", trials, "number of random cases");

    auto* match = app.add_subcommand("match-layers", "layer similarity and matching report");
    auto* prune = app.add_subcommand("prune", "channel selection report for the cloud model");
    auto* cost = app.add_subcommand("cost", "dimensionality-reduction savings table");
    bool paper_example = false;
    cost->add_flag("--paper-example", paper_example,
                   "use the built-in worked example (b=1, m=1024, k=32, d_c=80, d_e=64, L=32)");
    auto* simulate = app.add_subcommand("simulate", "run one deployment mode");
    std::string mode_str = "ce_lslm";
    simulate->add_option("--mode", mode_str, "naive_cloud|cached_cloud|naive_edge|ce_lslm");
    auto* sweep_cmd = app.add_subcommand("sweep", "run all modes across request rates");
    std::vector<double> rates;
    sweep_cmd->add_option("--rates", rates, "request rates, comma separated")->delimiter(',');
    auto* feas = app.add_subcommand("feasibility", "check layer budgets against node limits");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    const bool seed_given = app.count("--seed") > 0;
    try {
        if (verify->parsed()) {
            if (trials < 1) {
                std::fprintf(stderr, "error: --trials must be >= 1\n");
                return kExitUsage;
            }
            return cmd_verify_merge(seed, trials, out_dir);
        }
        json cfg;
        const bool have_cfg = !config_path.empty();
        if (have_cfg) cfg = load_config(config_path);
        if (match->parsed() || prune->parsed() || simulate->parsed() || sweep_cmd->parsed() ||
            feas->parsed()) {
            if (!have_cfg) {
                std::fprintf(stderr, "error: --config is required\n");
                return kExitUsage;
            }
        }
        if (match->parsed()) return cmd_match_layers(cfg, seed, out_dir, config_path);
        if (prune->parsed()) return cmd_prune(cfg, seed, out_dir, config_path);
        if (cost->parsed()) {
            return cmd_cost(have_cfg ? &cfg : nullptr, paper_example, seed, out_dir, config_path);
        }
        if (simulate->parsed()) {
            return cmd_simulate(cfg, mode_str, seed, seed_given, out_dir, config_path);
        }
        if (sweep_cmd->parsed()) {
            return cmd_sweep(cfg, rates, seed, seed_given, out_dir, config_path);
        }
        if (feas->parsed()) return cmd_feasibility(cfg, seed, seed_given, out_dir, config_path);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    }
    return kExitUsage;
}
