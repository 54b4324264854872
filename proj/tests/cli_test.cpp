#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

#include "edgekv/rng.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string bin_path() {
    const char* p = std::getenv("EDGEKV_BIN");
    REQUIRE(p != nullptr);
    return p;
}

fs::path work_dir() {
    fs::path dir = fs::temp_directory_path() / "edgekv_cli_test";
    fs::create_directories(dir);
    return dir;
}

int run_cli(const std::string& args, const fs::path& stdout_file) {
    const std::string cmd =
        bin_path() + " " + args + " > " + stdout_file.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream out;
    out << f.rdbuf();
    return out.str();
}

void write_demo_config(const fs::path& p, bool self_match) {
    json models;
    if (self_match) {
        json m = {{"num_layers", 3}, {"num_heads", 2}, {"head_dim", 4},
                  {"max_positions", 64}, {"seed", 9}};
        models = {{"cloud", m}, {"edge", m}};
    } else {
        models = {{"cloud",
                   {{"num_layers", 4}, {"num_heads", 2}, {"head_dim", 6},
                    {"max_positions", 64}, {"seed", 11}}},
                  {"edge",
                   {{"num_layers", 2}, {"num_heads", 2}, {"head_dim", 4},
                    {"max_positions", 64}, {"seed", 13}}}};
    }
    json cfg = {
        {"seed", 42},
        {"models", models},
        {"nodes",
         {{{"id", "cloud0"}, {"role", "cloud"}}, {{"id", "edge0"}, {"role", "edge"}}}},
        {"cost",
         {{"cloud", {{"flops_per_s", 1e9}, {"mem_bandwidth_bytes_per_s", 1e9}}},
          {"edge", {{"flops_per_s", 1e9}, {"mem_bandwidth_bytes_per_s", 1e9}}},
          {"t_max_s", 5.0}}},
        {"prune", {{"lambda", self_match ? 0.0 : 1.0 / 3.0}}},
        {"match", {{"theta_cka", 0.0}, {"theta_rsa", -1.0}, {"num_probe_samples", 12}}},
        {"deep_layers", 1},
        {"requests",
         {{{"arrival_s", 0.0}, {"edge", "edge0"}, {"prompt_id", 0}, {"system_len", 6},
           {"user_len", 3}, {"output_len", 2}}}}};
    std::ofstream f(p);
    f << cfg.dump(2);
}

}  // namespace

TEST_CASE("verify-merge passes and is byte-deterministic") {
    const fs::path dir = work_dir();
    CHECK(run_cli("verify-merge --trials 500 --seed 7 --out " + (dir / "vm1").string(),
                  dir / "vm1.log") == 0);
    CHECK(run_cli("verify-merge --trials 500 --seed 7 --out " + (dir / "vm2").string(),
                  dir / "vm2.log") == 0);
    const std::string a = slurp(dir / "vm1" / "verify_merge.json");
    const std::string b = slurp(dir / "vm2" / "verify_merge.json");
    CHECK(a == b);
    CHECK(a.find("\"pass\": true") != std::string::npos);
    CHECK(slurp(dir / "vm1.log").find("max abs deviation") != std::string::npos);
}

TEST_CASE("verify-merge rejects zero trials with a usage error") {
    const fs::path dir = work_dir();
    CHECK(run_cli("verify-merge --trials 0 --out " + (dir / "vm0").string(),
                  dir / "vm0.log") == 2);
}

TEST_CASE("cost reproduces the worked example") {
    const fs::path dir = work_dir();
    CHECK(run_cli("cost --paper-example --out " + (dir / "cost").string(), dir / "cost.log") ==
          0);
    const std::string log = slurp(dir / "cost.log");
    CHECK(log.find("134217728") != std::string::npos);
    CHECK(log.find("67174400") != std::string::npos);
    const json j = json::parse(slurp(dir / "cost" / "cost.json"));
    CHECK(j["delta_flops"] == 134217728);
    CHECK(j["compute_seconds"].get<double>() == doctest::Approx(1.342e-3).epsilon(0.005));
}

TEST_CASE("match-layers on identical models reports the diagonal") {
    const fs::path dir = work_dir();
    write_demo_config(dir / "self.json", true);
    CHECK(run_cli("match-layers --config " + (dir / "self.json").string() + " --out " +
                      (dir / "ml").string(),
                  dir / "ml.log") == 0);
    const json rep = json::parse(slurp(dir / "ml" / "report.json"));
    REQUIRE(rep["matches"].size() == 3);
    for (const auto& m : rep["matches"]) {
        CHECK(m["edge_layer"] == m["cloud_layer"]);
        CHECK(std::abs(m["cka"].get<double>() - 1.0) < 1e-9);
    }
    CHECK(rep["shared_layers"].size() == 3);
}

TEST_CASE("match-layers warns when the threshold is infeasible") {
    const fs::path dir = work_dir();
    write_demo_config(dir / "hetero.json", false);
    json cfg = json::parse(slurp(dir / "hetero.json"));
    cfg["match"]["theta_cka"] = 1.01;
    std::ofstream(dir / "strict.json") << cfg.dump();
    CHECK(run_cli("match-layers --config " + (dir / "strict.json").string() + " --out " +
                      (dir / "ml_strict").string(),
                  dir / "ml_strict.log") == 0);
    CHECK(slurp(dir / "ml_strict.log").find("warning") != std::string::npos);
    const json rep = json::parse(slurp(dir / "ml_strict" / "report.json"));
    CHECK(rep["shared_layers"].empty());
}

TEST_CASE("prune reports the aggregate channel mask") {
    const fs::path dir = work_dir();
    write_demo_config(dir / "p.json", false);
    CHECK(run_cli("prune --config " + (dir / "p.json").string() + " --out " +
                      (dir / "prune").string(),
                  dir / "prune.log") == 0);
    const json rep = json::parse(slurp(dir / "prune" / "prune.json"));
    CHECK(rep["head_dim"] == 6);
    CHECK(rep["retained"] == 4);  // floor((1 - 1/3) * 6)
    CHECK(rep["kept"].size() == 4);
    // per-head rows cover every (layer, head) of the cloud model
    CHECK(rep["per_head"].size() == 4 * 2);
    for (const auto& row : rep["per_head"]) {
        CHECK(row["objective"].get<double>() >= 0.0);
        CHECK(row["objective"].get<double>() <= row["full_norm"].get<double>() + 1e-12);
    }
    const json manifest = json::parse(slurp(dir / "prune" / "manifest.json"));
    CHECK(manifest["subcommand"] == "prune");
    CHECK(manifest["outputs"].size() == 2);
}

TEST_CASE("every config subcommand writes a manifest") {
    const fs::path dir = work_dir();
    write_demo_config(dir / "c.json", false);
    CHECK(run_cli("cost --paper-example --out " + (dir / "cman").string(), dir / "cman.log") ==
          0);
    CHECK(json::parse(slurp(dir / "cman" / "manifest.json"))["subcommand"] == "cost");
    CHECK(run_cli("match-layers --config " + (dir / "c.json").string() + " --out " +
                      (dir / "mman").string(),
                  dir / "mman.log") == 0);
    CHECK(json::parse(slurp(dir / "mman" / "manifest.json"))["outputs"].size() == 4);
    CHECK(run_cli("feasibility --config " + (dir / "c.json").string() + " --out " +
                      (dir / "fman").string(),
                  dir / "fman.log") == 0);
    CHECK(json::parse(slurp(dir / "fman" / "manifest.json"))["seed"] == 42);
}

TEST_CASE("simulate runs every mode and is deterministic under a fixed seed") {
    const fs::path dir = work_dir();
    write_demo_config(dir / "sim.json", false);
    for (const std::string mode :
         {"naive_cloud", "cached_cloud", "naive_edge", "ce_lslm"}) {
        CAPTURE(mode);
        CHECK(run_cli("simulate --config " + (dir / "sim.json").string() + " --mode " + mode +
                          " --out " + (dir / ("sim_" + mode)).string(),
                      dir / ("sim_" + mode + ".log")) == 0);
        CHECK(slurp(dir / ("sim_" + mode + ".log")).find("ttft_avg") != std::string::npos);
    }
    CHECK(run_cli("simulate --config " + (dir / "sim.json").string() +
                      " --mode ce_lslm --out " + (dir / "sim_again").string(),
                  dir / "sim_again.log") == 0);
    CHECK(slurp(dir / "sim_ce_lslm" / "events.ndjson") ==
          slurp(dir / "sim_again" / "events.ndjson"));
    CHECK(slurp(dir / "sim_ce_lslm" / "metrics.json") ==
          slurp(dir / "sim_again" / "metrics.json"));
}

TEST_CASE("manifest lists every emitted file with its checksum") {
    const fs::path dir = work_dir();
    write_demo_config(dir / "m.json", false);
    CHECK(run_cli("simulate --config " + (dir / "m.json").string() + " --mode naive_edge --out " +
                      (dir / "manifested").string(),
                  dir / "m.log") == 0);
    const json manifest = json::parse(slurp(dir / "manifested" / "manifest.json"));
    CHECK(manifest["subcommand"] == "simulate");
    REQUIRE(manifest["outputs"].size() == 3);
    for (const auto& entry : manifest["outputs"]) {
        const std::string content = slurp(dir / "manifested" / entry["file"].get<std::string>());
        CHECK(edgekv::to_hex(edgekv::fnv1a64(content)) == entry["fnv64"].get<std::string>());
    }
}

TEST_CASE("config errors exit with the usage code") {
    const fs::path dir = work_dir();
    write_demo_config(dir / "bad.json", false);
    json cfg = json::parse(slurp(dir / "bad.json"));
    cfg["nodes"].push_back({{"id", "cloud1"}, {"role", "cloud"}});
    std::ofstream(dir / "two_clouds.json") << cfg.dump();
    CHECK(run_cli("simulate --config " + (dir / "two_clouds.json").string() +
                      " --mode ce_lslm --out " + (dir / "bad_out").string(),
                  dir / "bad.log") == 2);
    CHECK(slurp(dir / "bad.log").find("exactly one cloud") != std::string::npos);

    CHECK(run_cli("simulate --mode ce_lslm --out " + (dir / "noconf").string(),
                  dir / "noconf.log") == 2);
    CHECK(run_cli("sweep --config " + (dir / "bad.json").string() + " --rates 1,2 --out " +
                      (dir / "sw_req").string(),
                  dir / "sw_req.log") == 2);  // explicit requests cannot be swept
}

TEST_CASE("sweep emits one csv row per rate and mode") {
    const fs::path dir = work_dir();
    write_demo_config(dir / "swbase.json", false);
    json cfg = json::parse(slurp(dir / "swbase.json"));
    cfg.erase("requests");
    cfg["arrival"] = {{"rate_per_s", 1.0}, {"count", 4},    {"distribution", "fixed"},
                      {"system_len", 6},   {"user_len", 3}, {"output_len", 2},
                      {"prompt_id", 0}};
    std::ofstream(dir / "sw.json") << cfg.dump();
    CHECK(run_cli("sweep --config " + (dir / "sw.json").string() + " --rates 1,2 --out " +
                      (dir / "sw").string(),
                  dir / "sw.log") == 0);
    const std::string csv = slurp(dir / "sw" / "sweep.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);  // header + 2 rates x 4 modes
}

TEST_CASE("feasibility reports violations against node budgets") {
    const fs::path dir = work_dir();
    write_demo_config(dir / "f.json", false);
    json cfg = json::parse(slurp(dir / "f.json"));
    CHECK(run_cli("feasibility --config " + (dir / "f.json").string() + " --out " +
                      (dir / "feas_ok").string(),
                  dir / "feas_ok.log") == 0);
    CHECK(slurp(dir / "feas_ok.log").find("feasible") != std::string::npos);

    cfg["nodes"][1]["memory_bytes"] = 16;  // smaller than one layer's context cache
    std::ofstream(dir / "f_tight.json") << cfg.dump();
    CHECK(run_cli("feasibility --config " + (dir / "f_tight.json").string() + " --out " +
                      (dir / "feas_bad").string(),
                  dir / "feas_bad.log") == 0);
    CHECK(slurp(dir / "feas_bad.log").find("violates memory") != std::string::npos);
    const json rep = json::parse(slurp(dir / "feas_bad" / "feasibility.json"));
    CHECK(!rep["nodes"][0]["violations"].empty());
}
