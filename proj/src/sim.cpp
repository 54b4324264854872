#include "edgekv/sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>

#include "edgekv/cache_merge.hpp"
#include "edgekv/cost_model.hpp"
#include "edgekv/head_prune.hpp"
#include "edgekv/layer_match.hpp"
#include "edgekv/rng.hpp"

namespace edgekv {

std::string mode_name(Mode m) {
    switch (m) {
        case Mode::naive_cloud: return "naive_cloud";
        case Mode::cached_cloud: return "cached_cloud";
        case Mode::naive_edge: return "naive_edge";
        case Mode::ce_lslm: return "ce_lslm";
    }
    return "?";
}

Mode parse_mode(const std::string& s) {
    for (Mode m : all_modes()) {
        if (mode_name(m) == s) return m;
    }
    throw std::invalid_argument("unknown mode \"" + s +
                                "\" (naive_cloud|cached_cloud|naive_edge|ce_lslm)");
}

const std::vector<Mode>& all_modes() {
    static const std::vector<Mode> modes = {Mode::naive_cloud, Mode::cached_cloud,
                                            Mode::naive_edge, Mode::ce_lslm};
    return modes;
}

namespace {

double vec_norm(const Vec& v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}

// per-layer wall time of processing n_new rows over n_cached positions
double layer_time(const ModelConfig& cfg, const RoleCost& rc, int n_new, int n_cached,
                  bool first) {
    const FlopCounts fc = layer_flop_counts(cfg, n_new, n_cached, first);
    const std::int64_t io = layer_io_bytes(cfg, n_new, n_cached);
    return static_cast<double>(fc.total()) / rc.flops_rate +
           static_cast<double>(io) / rc.mem_bandwidth + rc.decode_overhead;
}

double pass_time(const ModelConfig& cfg, const RoleCost& rc, int n_new, int n_cached) {
    double total = 0.0;
    for (int l = 0; l < cfg.num_layers; ++l) total += layer_time(cfg, rc, n_new, n_cached, l == 0);
    return total;
}

// ---------------------------------------------------------------------------
// Timeless value artifacts: token embeddings, caches and per-step outputs are
// pure functions of the scenario seed, shared by every point on the timeline.
// ---------------------------------------------------------------------------

struct PromptArtifacts {
    int system_len = 0;
    Matrix ctx_emb_edge;
    Matrix ctx_emb_cloud;
    PrefillResult cloud_prefill;
    PrefillResult edge_ctx_prefill;
    ChannelMask mask;
    std::map<int, LayerKV> deep_kv;  // per edge deep layer, pruned to edge dims
};

struct StepValues {
    std::vector<double> out0;
    std::vector<double> out_norm;
};

class Artifacts {
  public:
    Artifacts(const Scenario& sc, Mode mode)
        : sc_(sc), mode_(mode), cloud_model_(init_model(sc.cloud_model)),
          edge_model_(init_model(sc.edge_model)) {}

    const Model& edge_model() const { return edge_model_; }

    // deep edge layer -> matched cloud layer; throws when a deep layer has
    // no cloud counterpart under the thresholds (scenario inconsistency)
    const std::map<int, int>& deep_match() {
        if (!match_ready_) {
            const int n_probe = sc_.match_cfg.num_probe_samples;
            Matrix probe_e = generate_embeddings(Rng::mix(sc_.seed, 0x9B0BE),
                                                 n_probe, sc_.edge_model.hidden_size);
            Matrix probe_c = generate_embeddings(Rng::mix(sc_.seed, 0x9B0BE),
                                                 n_probe, sc_.cloud_model.hidden_size);
            std::vector<Matrix> edge_outs = prefill(edge_model_, probe_e).layer_outputs;
            std::vector<Matrix> cloud_outs = prefill(cloud_model_, probe_c).layer_outputs;
            LayerMatchReport report = match_layers(edge_outs, cloud_outs, sc_.match_cfg);
            const int boundary = sc_.edge_model.num_layers - sc_.deep_layers;
            for (int l = boundary; l < sc_.edge_model.num_layers; ++l) {
                if (!report.best[static_cast<std::size_t>(l)].has_value()) {
                    throw std::invalid_argument(
                        "ce_lslm: edge layer " + std::to_string(l) +
                        " has no matched cloud layer under the configured thresholds");
                }
                deep_match_[l] = report.best[static_cast<std::size_t>(l)].value();
            }
            match_ready_ = true;
        }
        return deep_match_;
    }

    PromptArtifacts& prompt(int pid, int s) {
        auto it = prompts_.find(pid);
        if (it != prompts_.end()) return it->second;
        PromptArtifacts art;
        art.system_len = s;
        if (s > 0) {
            const std::uint64_t eseed = Rng::mix(sc_.seed, 0xC7E20000ull + static_cast<unsigned>(pid));
            art.ctx_emb_edge = generate_embeddings(eseed, s, sc_.edge_model.hidden_size);
            art.ctx_emb_cloud = generate_embeddings(eseed, s, sc_.cloud_model.hidden_size);
            art.edge_ctx_prefill = prefill(edge_model_, art.ctx_emb_edge);
            if (needs_cloud()) art.cloud_prefill = prefill(cloud_model_, art.ctx_emb_cloud);
            if (mode_ == Mode::ce_lslm && sc_.deep_layers > 0) build_deep_kv(art);
        }
        return prompts_.emplace(pid, std::move(art)).first->second;
    }

    // monolithic generation with `model` over (context || user): per-step
    // final-row summaries for the event log
    StepValues generate_monolithic(const Model& model, const Matrix& ctx_emb,
                                   const Matrix& user_emb, int steps) {
        StepValues vals;
        KVCache cache = KVCache::empty_for(model.config.num_layers, model.config.num_heads,
                                           model.config.head_dim);
        Vec next;
        if (ctx_emb.rows > 0) forward_rows(model, cache, ctx_emb, PositionKind::context, nullptr);
        std::vector<Matrix> outs =
            forward_rows(model, cache, user_emb, PositionKind::user, nullptr);
        next = outs.back().row(user_emb.rows - 1);
        for (int t = 0; t < steps; ++t) {
            next = decode_step(model, cache, next);
            vals.out0.push_back(next[0]);
            vals.out_norm.push_back(vec_norm(next));
        }
        return vals;
    }

    StepValues request_values(const RequestSpec& r) {
        auto it = values_.find(r.id);
        if (it != values_.end()) return it->second;
        StepValues vals;
        const std::uint64_t useed = Rng::mix(sc_.seed, 0x55E20000ull + static_cast<unsigned>(r.id));
        PromptArtifacts& pa = prompt(r.prompt_id, r.system_len);
        if (mode_ == Mode::naive_cloud || mode_ == Mode::cached_cloud) {
            Matrix user_emb = generate_embeddings(useed, r.user_len, sc_.cloud_model.hidden_size);
            vals = generate_monolithic(cloud_model_, pa.ctx_emb_cloud, user_emb, r.output_len);
        } else if (mode_ == Mode::naive_edge) {
            Matrix user_emb = generate_embeddings(useed, r.user_len, sc_.edge_model.hidden_size);
            vals = generate_monolithic(edge_model_, pa.ctx_emb_edge, user_emb, r.output_len);
        } else {
            Matrix user_emb = generate_embeddings(useed, r.user_len, sc_.edge_model.hidden_size);
            const AssembledContext& ctx = assembled_context(r.prompt_id, r.system_len);
            CollaborativeResult res =
                collaborative_decode(edge_model_, ctx, user_emb, r.output_len);
            for (const Vec& row : res.step_outputs) {
                vals.out0.push_back(row[0]);
                vals.out_norm.push_back(vec_norm(row));
            }
        }
        values_.emplace(r.id, vals);
        return vals;
    }

    const AssembledContext& assembled_context(int pid, int s) {
        auto it = assembled_.find(pid);
        if (it != assembled_.end()) return it->second;
        AssembledContext ctx;
        if (s == 0) {
            ctx.cache = KVCache::empty_for(sc_.edge_model.num_layers, sc_.edge_model.num_heads,
                                           sc_.edge_model.head_dim);
        } else {
            PromptArtifacts& pa = prompt(pid, s);
            const int m_layers = sc_.edge_model.num_layers;
            const int boundary = m_layers - sc_.deep_layers;
            std::map<int, LayerKV> local, shared;
            std::map<int, CacheOrigin> origins;
            for (int l = 0; l < boundary; ++l) {
                LayerKV kv;
                kv.keys = pa.edge_ctx_prefill.cache.keys[static_cast<std::size_t>(l)];
                kv.values = pa.edge_ctx_prefill.cache.values[static_cast<std::size_t>(l)];
                local[l] = std::move(kv);
            }
            for (int l = boundary; l < m_layers; ++l) {
                shared[l] = pa.deep_kv.at(l);
                origins[l] = CacheOrigin::cloud;
            }
            ctx = assemble_context(shared, local, origins, m_layers);
        }
        return assembled_.emplace(pid, std::move(ctx)).first->second;
    }

  private:
    bool needs_cloud() const { return mode_ == Mode::ce_lslm; }

    void build_deep_kv(PromptArtifacts& art) {
        const std::map<int, int>& match = deep_match();
        // channel scores aggregated by stacking every matched layer's Q and K
        std::set<int> cloud_layers;
        for (const auto& [le, lc] : match) cloud_layers.insert(lc);
        const int s = art.system_len;
        const ModelConfig& ccfg = sc_.cloud_model;
        Matrix x0(static_cast<std::size_t>(s), static_cast<std::size_t>(ccfg.hidden_size));
        for (int i = 0; i < s; ++i) {
            for (int c = 0; c < ccfg.hidden_size; ++c) {
                x0(static_cast<std::size_t>(i), static_cast<std::size_t>(c)) =
                    cloud_model_.layers[0].gamma[static_cast<std::size_t>(c)] *
                        (art.ctx_emb_cloud(static_cast<std::size_t>(i), static_cast<std::size_t>(c)) +
                         cloud_model_.pos_embedding(static_cast<std::size_t>(i),
                                                    static_cast<std::size_t>(c))) +
                    cloud_model_.layers[0].bias[static_cast<std::size_t>(c)];
            }
        }
        const std::size_t rows_per = static_cast<std::size_t>(s);
        const std::size_t blocks = cloud_layers.size() * static_cast<std::size_t>(ccfg.num_heads);
        Matrix q_stack(blocks * rows_per, static_cast<std::size_t>(ccfg.head_dim));
        Matrix k_stack(blocks * rows_per, static_cast<std::size_t>(ccfg.head_dim));
        std::size_t block = 0;
        for (int lc : cloud_layers) {
            const Matrix& input =
                lc == 0 ? x0 : art.cloud_prefill.layer_outputs[static_cast<std::size_t>(lc - 1)];
            for (int h = 0; h < ccfg.num_heads; ++h) {
                QkvRows qkv = project_qkv(cloud_model_, input, lc, h);
                for (std::size_t i = 0; i < rows_per; ++i) {
                    for (std::size_t c = 0; c < static_cast<std::size_t>(ccfg.head_dim); ++c) {
                        q_stack(block * rows_per + i, c) = qkv.q(i, c);
                        k_stack(block * rows_per + i, c) = qkv.k(i, c);
                    }
                }
                ++block;
            }
        }
        const PruneSpec spec = PruneSpec::from_lambda(sc_.prune_lambda, ccfg.head_dim);
        art.mask = spec.retained == ccfg.head_dim ? ChannelMask::full(ccfg.head_dim)
                                                  : select_channels(q_stack, k_stack, spec);

        const KVCache pruned = prune_cache(art.cloud_prefill.cache, art.mask);
        for (const auto& [le, lc] : match) {
            LayerKV kv;
            kv.keys = pruned.keys[static_cast<std::size_t>(lc)];
            kv.values = pruned.values[static_cast<std::size_t>(lc)];
            art.deep_kv[le] = std::move(kv);
        }
    }

    const Scenario& sc_;
    Mode mode_;
    Model cloud_model_;
    Model edge_model_;
    bool match_ready_ = false;
    std::map<int, int> deep_match_;
    std::map<int, PromptArtifacts> prompts_;
    std::map<int, StepValues> values_;
    std::map<int, AssembledContext> assembled_;
};

// ---------------------------------------------------------------------------
// Event engine: single logical loop, (time, sequence) ordering.
// ---------------------------------------------------------------------------

struct Ev {
    double time;
    std::uint64_t seq;
    std::function<void()> fn;
};
struct EvCmp {
    bool operator()(const Ev& a, const Ev& b) const {
        return a.time > b.time || (a.time == b.time && a.seq > b.seq);
    }
};

enum class TransferKind { upload, token, cloud_kv, peer_kv };

const char* transfer_kind_name(TransferKind k) {
    switch (k) {
        case TransferKind::upload: return "upload";
        case TransferKind::token: return "token";
        case TransferKind::cloud_kv: return "cloud_kv";
        case TransferKind::peer_kv: return "peer_kv";
    }
    return "?";
}

struct ReqState {
    RequestSpec spec;
    bool done = false;
    double ttft = -1.0;
    double complete_time = -1.0;
    bool failed = false;
    std::string reason;
    int tokens = 0;
};

class Sim {
  public:
    Sim(const Scenario& sc, Mode mode) : sc_(sc), mode_(mode), art_(sc, mode) {}

    RunResult execute() {
        // resources: one compute unit per node, one per link
        for (const NodeSpec& n : sc_.nodes) {
            Resource r;
            r.name = "compute:" + n.id;
            r.lane_free.assign(
                static_cast<std::size_t>(n.is_cloud ? 1 : sc_.batch_width), 0.0);
            resources_.push_back(r);
        }
        for (const LinkSpec& l : sc_.links) {
            Resource r;
            r.name = "link:" + sc_.nodes[static_cast<std::size_t>(l.a)].id + "-" +
                     sc_.nodes[static_cast<std::size_t>(l.b)].id;
            r.lane_free.assign(1, 0.0);
            r.link = &l;
            resources_.push_back(r);
        }
        // force the layer matching (and its config errors) before any event
        if (mode_ == Mode::ce_lslm && sc_.deep_layers > 0) art_.deep_match();

        requests_.reserve(sc_.requests.size());
        for (const RequestSpec& r : sc_.requests) {
            ReqState st;
            st.spec = r;
            requests_.push_back(st);
        }
        for (std::size_t i = 0; i < requests_.size(); ++i) {
            at(requests_[i].spec.arrival, [this, i] { arrive(static_cast<int>(i)); });
        }
        while (!events_.empty()) {
            Ev e = events_.top();
            events_.pop();
            now_ = e.time;
            e.fn();
        }
        return finalize();
    }

  private:
    struct Resource {
        std::string name;
        std::vector<double> lane_free;
        const LinkSpec* link = nullptr;
    };

    // ---- engine primitives ----

    void at(double t, std::function<void()> fn) {
        events_.push(Ev{std::max(t, now_), seq_++, std::move(fn)});
    }

    void log(double t, const std::string& event, const std::string& node, int request,
             nlohmann::ordered_json detail) {
        LogRec rec;
        rec.time = t;
        rec.order = log_seq_++;
        rec.j = nlohmann::ordered_json{
            {"time", t}, {"event", event}, {"node", node}, {"request", request},
            {"detail", std::move(detail)}};
        log_.push_back(std::move(rec));
    }

    int compute_resource(int node) const { return node; }
    int link_resource(int link_idx) const {
        return static_cast<int>(sc_.nodes.size()) + link_idx;
    }

    void submit_compute(int node, double duration, std::function<void(double)> done) {
        Resource& r = resources_[static_cast<std::size_t>(compute_resource(node))];
        std::size_t lane = 0;
        for (std::size_t i = 1; i < r.lane_free.size(); ++i) {
            if (r.lane_free[i] < r.lane_free[lane]) lane = i;
        }
        const double start = std::max(now_, r.lane_free[lane]);
        const double end = start + duration;
        r.lane_free[lane] = end;
        audits_.push_back(TaskAudit{r.name, now_, start, end});
        at(end, [done, end] { done(end); });
    }

    static double clear_outages(const LinkSpec& l, double t) {
        for (const OutageWindow& w : l.outages) {
            if (t >= w.start && t < w.end) t = w.end;
        }
        return t;
    }

    static bool link_healthy_at(const LinkSpec& l, double t) {
        if (l.bandwidth <= 0.0) return false;
        for (const OutageWindow& w : l.outages) {
            if (t >= w.start && t < w.end) return false;
        }
        return true;
    }

    // Schedules a transfer; honors FIFO serialization, outage windows and the
    // wait bound for cloud-critical payloads. Returns false (and does not
    // schedule) when the wait until the link clears exceeds t_max.
    bool submit_transfer(int link_idx, std::int64_t bytes, TransferKind kind,
                         std::int64_t user_bytes, int request,
                         std::function<void(double)> delivered) {
        const LinkSpec& l = sc_.links[static_cast<std::size_t>(link_idx)];
        Resource& r = resources_[static_cast<std::size_t>(link_resource(link_idx))];
        const bool critical =
            kind == TransferKind::upload || kind == TransferKind::token ||
            kind == TransferKind::cloud_kv;
        if (l.bandwidth <= 0.0) return false;
        double start = std::max(now_, r.lane_free[0]);
        start = clear_outages(l, start);
        if (critical && start - now_ > sc_.t_max) return false;
        const double end = start + static_cast<double>(bytes) / l.bandwidth;
        const double arrive = end + l.propagation_delay;
        r.lane_free[0] = end;
        audits_.push_back(TaskAudit{r.name, now_, start, end});
        bytes_total_ += bytes;
        const bool touches_cloud = l.a == sc_.cloud_node || l.b == sc_.cloud_node;
        if (touches_cloud) user_bytes_to_cloud_ += user_bytes;
        switch (kind) {
            case TransferKind::upload: upload_bytes_ += bytes; break;
            case TransferKind::token: response_bytes_ += bytes; break;
            case TransferKind::cloud_kv:
            case TransferKind::peer_kv: context_kv_bytes_ += bytes; break;
        }
        log(arrive, "transfer", r.name, request,
            {{"kind", transfer_kind_name(kind)},
             {"bytes", bytes},
             {"user_bytes", user_bytes},
             {"start", start}});
        at(arrive, [delivered, arrive] { delivered(arrive); });
        return true;
    }

    // ---- request lifecycle ----

    void arrive(int rid) {
        ReqState& st = requests_[static_cast<std::size_t>(rid)];
        const RequestSpec& r = st.spec;
        log(now_, "arrival", sc_.nodes[static_cast<std::size_t>(r.edge_node)].id, rid,
            {{"prompt", r.prompt_id},
             {"system_len", r.system_len},
             {"user_len", r.user_len},
             {"output_len", r.output_len}});
        switch (mode_) {
            case Mode::naive_cloud: start_naive_cloud(rid); break;
            case Mode::cached_cloud: start_cached_cloud(rid); break;
            case Mode::naive_edge: start_naive_edge(rid); break;
            case Mode::ce_lslm: start_ce(rid); break;
        }
    }

    void fail_request(int rid, double t, const std::string& reason) {
        ReqState& st = requests_[static_cast<std::size_t>(rid)];
        if (st.done) return;
        st.done = true;
        st.failed = true;
        st.reason = reason;
        st.complete_time = t;
        log(t, "failed", "", rid, {{"reason", reason}});
    }

    void complete_request(int rid, double t) {
        ReqState& st = requests_[static_cast<std::size_t>(rid)];
        if (st.done) return;
        st.done = true;
        st.complete_time = t;
        log(t, "complete", "", rid,
            {{"ttft_s", st.ttft}, {"latency_s", t - st.spec.arrival}, {"tokens", st.tokens}});
    }

    void emit_decode(int rid, int step, double t, const StepValues& vals) {
        ReqState& st = requests_[static_cast<std::size_t>(rid)];
        st.tokens += 1;
        log(t, "decode_step", "", rid,
            {{"step", step},
             {"out0", vals.out0[static_cast<std::size_t>(step)]},
             {"out_norm", vals.out_norm[static_cast<std::size_t>(step)]}});
    }

    // ---- cloud modes ----

    int cloud_link(int edge_node) const { return sc_.link_between(edge_node, sc_.cloud_node); }

    void start_naive_cloud(int rid) {
        const RequestSpec& r = requests_[static_cast<std::size_t>(rid)].spec;
        const std::int64_t token_bytes = 8ll * sc_.cloud_model.hidden_size;
        const std::int64_t upload = token_bytes * (r.system_len + r.user_len);
        const std::int64_t user_part = token_bytes * r.user_len;
        const bool ok = submit_transfer(
            cloud_link(r.edge_node), upload, TransferKind::upload, user_part, rid,
            [this, rid, r](double) {
                // the naive deployment recomputes the full prompt per request
                const double dur =
                    pass_time(sc_.cloud_model, sc_.cloud_cost, r.system_len + r.user_len, 0);
                submit_compute(sc_.cloud_node, dur, [this, rid](double t) {
                    log(t, "prefill_done", sc_.nodes[static_cast<std::size_t>(sc_.cloud_node)].id,
                        rid, {});
                    cloud_decode(rid, 0);
                });
            });
        if (!ok) fail_request(rid, now_, "cloud unreachable");
    }

    void start_cached_cloud(int rid) {
        const RequestSpec& r = requests_[static_cast<std::size_t>(rid)].spec;
        const std::int64_t token_bytes = 8ll * sc_.cloud_model.hidden_size;
        const bool ok = submit_transfer(
            cloud_link(r.edge_node), token_bytes * r.user_len, TransferKind::upload,
            token_bytes * r.user_len, rid, [this, rid, r](double) {
                ensure_cloud_context(r.prompt_id, r.system_len, [this, rid, r](double) {
                    const double dur =
                        pass_time(sc_.cloud_model, sc_.cloud_cost, r.user_len, r.system_len);
                    submit_compute(sc_.cloud_node, dur, [this, rid](double t) {
                        log(t, "prefill_done",
                            sc_.nodes[static_cast<std::size_t>(sc_.cloud_node)].id, rid, {});
                        cloud_decode(rid, 0);
                    });
                });
            });
        if (!ok) fail_request(rid, now_, "cloud unreachable");
    }

    void cloud_decode(int rid, int step) {
        const RequestSpec& r = requests_[static_cast<std::size_t>(rid)].spec;
        const int cache_len = r.system_len + r.user_len + step;
        const double dur = pass_time(sc_.cloud_model, sc_.cloud_cost, 1, cache_len);
        submit_compute(sc_.cloud_node, dur, [this, rid, r, step](double t) {
            if (requests_[static_cast<std::size_t>(rid)].done) return;
            const StepValues vals = art_.request_values(r);
            emit_decode(rid, step, t, vals);
            // the next step runs while this token streams back
            if (step + 1 < r.output_len) cloud_decode(rid, step + 1);
            const std::int64_t token_bytes = 8ll * sc_.cloud_model.hidden_size;
            const bool ok = submit_transfer(
                cloud_link(r.edge_node), token_bytes, TransferKind::token, 0, rid,
                [this, rid, r, step](double arrive) {
                    ReqState& st = requests_[static_cast<std::size_t>(rid)];
                    if (step == 0) st.ttft = arrive - st.spec.arrival;
                    if (step + 1 == r.output_len) complete_request(rid, arrive);
                });
            if (!ok) fail_request(rid, now_, "cloud unreachable");
        });
    }

    // cached_cloud: the system-prompt cache is computed once per prompt
    struct CloudCtxState {
        bool started = false;
        bool ready = false;
        double ready_time = 0.0;
        std::vector<std::function<void(double)>> waiters;
    };

    void ensure_cloud_context(int pid, int s, std::function<void(double)> done) {
        if (s == 0) {
            done(now_);
            return;
        }
        CloudCtxState& st = cloud_ctx_[pid];
        if (st.ready) {
            done(now_);
            return;
        }
        st.waiters.push_back(std::move(done));
        if (st.started) return;
        st.started = true;
        log(now_, "cloud_context_compute", sc_.nodes[static_cast<std::size_t>(sc_.cloud_node)].id,
            -1, {{"prompt", pid}, {"layers", sc_.cloud_model.num_layers}});
        cloud_ctx_layer(pid, s, 0);
    }

    void cloud_ctx_layer(int pid, int s, int layer) {
        const double dur = layer_time(sc_.cloud_model, sc_.cloud_cost, s, 0, layer == 0);
        submit_compute(sc_.cloud_node, dur, [this, pid, s, layer](double t) {
            CloudCtxState& st = cloud_ctx_[pid];
            if (layer + 1 < sc_.cloud_model.num_layers) {
                cloud_ctx_layer(pid, s, layer + 1);
                return;
            }
            st.ready = true;
            st.ready_time = t;
            std::vector<std::function<void(double)>> waiters;
            waiters.swap(st.waiters);
            for (auto& w : waiters) w(t);
        });
    }

    // ---- naive edge ----

    void start_naive_edge(int rid) {
        const RequestSpec& r = requests_[static_cast<std::size_t>(rid)].spec;
        auto user_phase = [this, rid, r](double) {
            const double dur = pass_time(sc_.edge_model, sc_.edge_cost, r.user_len, r.system_len);
            submit_compute(r.edge_node, dur, [this, rid, r](double t) {
                log(t, "prefill_done", sc_.nodes[static_cast<std::size_t>(r.edge_node)].id, rid,
                    {});
                edge_decode(rid, 0);
            });
        };
        if (r.system_len > 0) {
            // no reuse in this deployment: every request recomputes the context
            const double ctx_dur = pass_time(sc_.edge_model, sc_.edge_cost, r.system_len, 0);
            submit_compute(r.edge_node, ctx_dur, user_phase);
        } else {
            user_phase(now_);
        }
    }

    void edge_decode(int rid, int step) {
        const RequestSpec& r = requests_[static_cast<std::size_t>(rid)].spec;
        const int cache_len = r.system_len + r.user_len + step;
        const double dur = pass_time(sc_.edge_model, sc_.edge_cost, 1, cache_len);
        submit_compute(r.edge_node, dur, [this, rid, r, step](double t) {
            const StepValues vals = art_.request_values(r);
            emit_decode(rid, step, t, vals);
            ReqState& st = requests_[static_cast<std::size_t>(rid)];
            if (step == 0) st.ttft = t - st.spec.arrival;
            if (step + 1 == r.output_len) {
                complete_request(rid, t);
            } else {
                edge_decode(rid, step + 1);
            }
        });
    }

    // ---- collaborative mode ----

    // streaming per-layer cloud context computation (values + completion
    // times per layer, shared across every edge node)
    struct CloudStream {
        bool started = false;
        std::vector<double> layer_done;  // per cloud layer, <0 until finished
        std::vector<std::vector<std::function<void(double)>>> waiters;
    };

    void ensure_cloud_stream(int pid, int s) {
        CloudStream& cs = cloud_stream_[pid];
        if (cs.started) return;
        cs.started = true;
        cs.layer_done.assign(static_cast<std::size_t>(sc_.cloud_model.num_layers), -1.0);
        cs.waiters.assign(static_cast<std::size_t>(sc_.cloud_model.num_layers), {});
        log(now_, "cloud_context_compute", sc_.nodes[static_cast<std::size_t>(sc_.cloud_node)].id,
            -1, {{"prompt", pid}, {"layers", sc_.cloud_model.num_layers}});
        cloud_stream_layer(pid, s, 0);
    }

    void cloud_stream_layer(int pid, int s, int layer) {
        const double dur = layer_time(sc_.cloud_model, sc_.cloud_cost, s, 0, layer == 0);
        submit_compute(sc_.cloud_node, dur, [this, pid, s, layer](double t) {
            CloudStream& cs = cloud_stream_[pid];
            cs.layer_done[static_cast<std::size_t>(layer)] = t;
            std::vector<std::function<void(double)>> waiters;
            waiters.swap(cs.waiters[static_cast<std::size_t>(layer)]);
            for (auto& w : waiters) w(t);
            if (layer + 1 < sc_.cloud_model.num_layers) cloud_stream_layer(pid, s, layer + 1);
        });
    }

    void when_cloud_layer(int pid, int s, int layer, std::function<void(double)> fn) {
        ensure_cloud_stream(pid, s);
        CloudStream& cs = cloud_stream_[pid];
        if (cs.layer_done[static_cast<std::size_t>(layer)] >= 0.0) {
            fn(now_);
        } else {
            cs.waiters[static_cast<std::size_t>(layer)].push_back(std::move(fn));
        }
    }

    // per-(edge node, prompt) context preparation
    struct ContextPrep {
        int node = -1;
        int prompt = -1;
        int system_len = 0;
        int boundary = 0;  // shallow layers are [0, boundary)
        std::vector<char> ready;
        std::vector<char> submitted;       // local compute chain bookkeeping
        std::vector<CacheSource> sources;  // decision per shallow layer
        std::map<int, int> peer_choice;    // shallow layer -> chosen peer node
        int remaining = 0;
        int shallow_remaining = 0;
        bool failed = false;
        bool complete = false;
        std::vector<std::function<void(int)>> layer_waiters;  // fired per ready layer
        std::vector<int> attached;                            // request ids, for failure
    };

    using PrepKey = std::pair<int, int>;

    double peer_layer_cost(int from_edge, int to_edge, int s) const {
        const int li = sc_.link_between(from_edge, to_edge);
        if (li < 0) return -1.0;
        const LinkSpec& l = sc_.links[static_cast<std::size_t>(li)];
        if (!link_healthy_at(l, now_)) return -1.0;
        const std::int64_t bytes = peer_layer_bytes(s);
        return static_cast<double>(bytes) / l.bandwidth + l.propagation_delay;
    }

    std::int64_t deep_layer_bytes(int s) const { return layer_kv_bytes(sc_.edge_model, s); }
    std::int64_t peer_layer_bytes(int s) const {
        // shallow peer payload carries K/V plus the layer's hidden states so
        // the receiver can keep computing subsequent local layers
        return layer_kv_bytes(sc_.edge_model, s) + 8ll * s * sc_.edge_model.hidden_size;
    }

    ContextPrep& get_prep(int node, int pid, int s) {
        const PrepKey key{node, pid};
        auto it = preps_.find(key);
        if (it != preps_.end()) return it->second;
        ContextPrep prep;
        prep.node = node;
        prep.prompt = pid;
        prep.system_len = s;
        const int m_layers = sc_.edge_model.num_layers;
        prep.boundary = m_layers - sc_.deep_layers;
        prep.ready.assign(static_cast<std::size_t>(m_layers), 0);
        prep.submitted.assign(static_cast<std::size_t>(m_layers), 0);
        prep.sources.assign(static_cast<std::size_t>(m_layers), CacheSource::local);
        prep.remaining = m_layers;
        prep.shallow_remaining = prep.boundary;
        ContextPrep& ref = preps_.emplace(key, std::move(prep)).first->second;
        start_prep(ref);
        return ref;
    }

    void start_prep(ContextPrep& prep) {
        const int m_layers = sc_.edge_model.num_layers;
        if (prep.system_len == 0) {
            for (int l = 0; l < m_layers; ++l) mark_layer_ready(prep, l, "none", now_);
            return;
        }
        NodeCache& cache = node_cache_[prep.node];
        const bool have_shallow = cache.shallow.count(prep.prompt) != 0;
        const bool have_deep =
            cache.deep.count(prep.prompt) != 0 || sc_.deep_layers == 0;

        // shallow block: cached, else per-layer local-vs-peer decision
        const double local_cost_first = layer_time(sc_.edge_model, sc_.edge_cost,
                                                   prep.system_len, 0, true);
        const double local_cost_rest =
            layer_time(sc_.edge_model, sc_.edge_cost, prep.system_len, 0, false);
        for (int l = 0; l < prep.boundary; ++l) {
            if (have_shallow) {
                mark_layer_ready(prep, l, "cache", now_);
                continue;
            }
            double best_peer = -1.0;
            for (int peer : sc_.edge_nodes) {
                if (peer == prep.node) continue;
                auto pub = published_.find({peer, prep.prompt});
                if (pub == published_.end() || pub->second > now_) continue;
                const double c = peer_layer_cost(peer, prep.node, prep.system_len);
                if (c >= 0.0 && (best_peer < 0.0 || c < best_peer)) {
                    best_peer = c;
                    prep.peer_choice[l] = peer;
                }
            }
            const double local_cost = l == 0 ? local_cost_first : local_cost_rest;
            const CacheSource src =
                cache_source(l + 1, local_cost,
                             best_peer < 0.0 ? std::numeric_limits<double>::infinity() : best_peer,
                             prep.boundary, m_layers);
            prep.sources[static_cast<std::size_t>(l)] = src;
            if (src == CacheSource::peer) {
                const int peer = prep.peer_choice[l];
                const int li = sc_.link_between(peer, prep.node);
                submit_transfer(li, peer_layer_bytes(prep.system_len), TransferKind::peer_kv, 0,
                                -1, [this, key = PrepKey{prep.node, prep.prompt}, l](double t) {
                                    mark_layer_ready(preps_.at(key), l, "peer", t);
                                });
            }
        }
        // kick the local compute chain (layer l waits for layer l-1's hidden
        // state, whatever source delivered it)
        maybe_submit_local(prep, 0);

        // deep block: cache hit or streamed from the cloud
        for (int l = prep.boundary; l < m_layers; ++l) {
            if (have_deep) {
                mark_layer_ready(prep, l, "cache", now_);
            } else {
                fetch_deep_layer(prep, l);
            }
        }
    }

    void fetch_deep_layer(ContextPrep& prep, int l) {
        const int lc = art_.deep_match().at(l);
        const PrepKey key{prep.node, prep.prompt};
        when_cloud_layer(prep.prompt, prep.system_len, lc, [this, key, l](double) {
            ContextPrep& p = preps_.at(key);
            if (p.failed) return;
            const int li = sc_.link_between(p.node, sc_.cloud_node);
            const bool ok = submit_transfer(
                li, deep_layer_bytes(p.system_len), TransferKind::cloud_kv, 0, -1,
                [this, key, l](double t) { mark_layer_ready(preps_.at(key), l, "cloud", t); });
            if (!ok) fail_prep(p);
        });
    }

    void fail_prep(ContextPrep& prep) {
        if (prep.failed) return;
        prep.failed = true;
        for (int rid : prep.attached) fail_request(rid, now_, "cloud unreachable");
    }

    void maybe_submit_local(ContextPrep& prep, int from_layer) {
        // submit the next pending local shallow layer whose predecessor is ready
        for (int l = from_layer; l < prep.boundary; ++l) {
            if (prep.ready[static_cast<std::size_t>(l)]) continue;
            if (prep.sources[static_cast<std::size_t>(l)] != CacheSource::local) return;
            if (prep.submitted[static_cast<std::size_t>(l)]) return;
            if (l > 0 && !prep.ready[static_cast<std::size_t>(l - 1)]) return;
            prep.submitted[static_cast<std::size_t>(l)] = 1;
            const double dur =
                layer_time(sc_.edge_model, sc_.edge_cost, prep.system_len, 0, l == 0);
            const PrepKey key{prep.node, prep.prompt};
            submit_compute(prep.node, dur, [this, key, l](double t) {
                mark_layer_ready(preps_.at(key), l, "local", t);
            });
            return;
        }
    }

    void mark_layer_ready(ContextPrep& prep, int l, const std::string& source, double t) {
        if (prep.ready[static_cast<std::size_t>(l)]) return;
        prep.ready[static_cast<std::size_t>(l)] = 1;
        prep.remaining -= 1;
        if (l < prep.boundary) prep.shallow_remaining -= 1;
        if (prep.system_len > 0 && source != "none") {
            log(t, "context_layer_ready", sc_.nodes[static_cast<std::size_t>(prep.node)].id, -1,
                {{"prompt", prep.prompt}, {"layer", l}, {"source", source}});
        }
        // a finished shallow block is shareable before the deep block lands
        if (prep.system_len > 0 && prep.boundary > 0 && prep.shallow_remaining == 0 &&
            published_.count({prep.node, prep.prompt}) == 0) {
            node_cache_[prep.node].shallow.insert(prep.prompt);
            published_[{prep.node, prep.prompt}] = t;
            log(t, "shallow_published", sc_.nodes[static_cast<std::size_t>(prep.node)].id, -1,
                {{"prompt", prep.prompt}});
        }
        if (l + 1 < prep.boundary) maybe_submit_local(prep, l + 1);
        std::vector<std::function<void(int)>> waiters = prep.layer_waiters;
        for (auto& w : waiters) w(l);
        if (prep.remaining == 0 && !prep.complete) {
            prep.complete = true;
            NodeCache& cache = node_cache_[prep.node];
            if (prep.system_len > 0) {
                cache.shallow.insert(prep.prompt);
                if (sc_.deep_layers > 0) cache.deep.insert(prep.prompt);
                log(t, "context_ready", sc_.nodes[static_cast<std::size_t>(prep.node)].id, -1,
                    {{"prompt", prep.prompt}});
            }
        }
    }

    // per-request user pipeline: layer l of the user prefill needs the
    // context for layer l plus the previous user layer
    struct UserPipeline {
        int rid = -1;
        PrepKey prep;
        int next_layer = 0;
        bool in_flight = false;
    };

    void start_ce(int rid) {
        ReqState& st = requests_[static_cast<std::size_t>(rid)];
        const RequestSpec& r = st.spec;
        NodeCache& cache = node_cache_[r.edge_node];
        if (r.system_len > 0 && sc_.deep_layers > 0 &&
            cache.deep.count(r.prompt_id) == 0) {
            // pre-seeded historical cache counts as already downloaded
            const NodeSpec& node = sc_.nodes[static_cast<std::size_t>(r.edge_node)];
            for (int p : node.historical_prompts) {
                if (p == r.prompt_id) {
                    cache.deep.insert(p);
                    log(now_, "historical_cache_hit", node.id, rid, {{"prompt", p}});
                }
            }
        }
        ContextPrep& prep = get_prep(r.edge_node, r.prompt_id, r.system_len);
        if (prep.failed) {
            fail_request(rid, now_, "cloud unreachable");
            return;
        }
        prep.attached.push_back(rid);
        auto pipe = std::make_shared<UserPipeline>();
        pipe->rid = rid;
        pipe->prep = PrepKey{r.edge_node, r.prompt_id};
        prep.layer_waiters.push_back([this, pipe](int) { advance_user(pipe); });
        advance_user(pipe);
    }

    void advance_user(const std::shared_ptr<UserPipeline>& pipe) {
        ReqState& st = requests_[static_cast<std::size_t>(pipe->rid)];
        if (st.done || pipe->in_flight) return;
        const RequestSpec& r = st.spec;
        const int m_layers = sc_.edge_model.num_layers;
        if (pipe->next_layer >= m_layers) return;
        ContextPrep& prep = preps_.at(pipe->prep);
        if (!prep.ready[static_cast<std::size_t>(pipe->next_layer)]) return;
        pipe->in_flight = true;
        const int l = pipe->next_layer;
        const double dur =
            layer_time(sc_.edge_model, sc_.edge_cost, r.user_len, r.system_len, l == 0);
        submit_compute(r.edge_node, dur, [this, pipe, m_layers](double t) {
            pipe->in_flight = false;
            pipe->next_layer += 1;
            if (pipe->next_layer == m_layers) {
                const ReqState& st2 = requests_[static_cast<std::size_t>(pipe->rid)];
                log(t, "prefill_done",
                    sc_.nodes[static_cast<std::size_t>(st2.spec.edge_node)].id, pipe->rid, {});
                ce_decode(pipe->rid, 0);
            } else {
                advance_user(pipe);
            }
        });
    }

    void ce_decode(int rid, int step) {
        const RequestSpec& r = requests_[static_cast<std::size_t>(rid)].spec;
        const int cache_len = r.system_len + r.user_len + step;
        const double dur = pass_time(sc_.edge_model, sc_.edge_cost, 1, cache_len);
        submit_compute(r.edge_node, dur, [this, rid, r, step](double t) {
            const StepValues vals = art_.request_values(r);
            emit_decode(rid, step, t, vals);
            ReqState& st = requests_[static_cast<std::size_t>(rid)];
            if (step == 0) st.ttft = t - st.spec.arrival;
            if (step + 1 == r.output_len) {
                complete_request(rid, t);
            } else {
                ce_decode(rid, step + 1);
            }
        });
    }

    // ---- finalization ----

    RunResult finalize() {
        RunResult out;
        MetricsReport& rep = out.report;
        rep.mode = mode_;
        rep.seed = sc_.seed;
        double first_arrival = 0.0, last_completion = 0.0;
        bool any = false;
        double sum_ttft = 0.0, sum_latency = 0.0, sum_norm = 0.0;
        for (const ReqState& st : requests_) {
            RequestMetrics m;
            m.id = st.spec.id;
            m.arrival = st.spec.arrival;
            m.tokens = st.tokens;
            if (st.failed) {
                m.status = "failed";
                m.fail_reason = st.reason;
                rep.failed += 1;
            } else {
                m.status = "completed";
                m.ttft = st.ttft;
                m.latency = st.complete_time - st.spec.arrival;
                rep.completed += 1;
                sum_ttft += m.ttft;
                sum_latency += m.latency;
                sum_norm += m.latency / static_cast<double>(m.tokens) * 1000.0;
                if (!any || st.spec.arrival < first_arrival) first_arrival = st.spec.arrival;
                if (!any || st.complete_time > last_completion) last_completion = st.complete_time;
                any = true;
            }
            rep.requests.push_back(m);
        }
        if (rep.completed > 0) {
            rep.avg_ttft = sum_ttft / rep.completed;
            rep.avg_latency = sum_latency / rep.completed;
            rep.avg_normalized_ms_per_token = sum_norm / rep.completed;
            const double span = std::max(last_completion - first_arrival, 1e-12);
            rep.throughput_rps = rep.completed / span;
        }
        rep.bytes_total = bytes_total_;
        rep.user_bytes_to_cloud = user_bytes_to_cloud_;
        rep.context_kv_bytes = context_kv_bytes_;
        rep.upload_bytes = upload_bytes_;
        rep.response_bytes = response_bytes_;

        std::stable_sort(log_.begin(), log_.end(), [](const LogRec& a, const LogRec& b) {
            return a.time < b.time || (a.time == b.time && a.order < b.order);
        });
        out.event_lines.reserve(log_.size());
        for (const LogRec& rec : log_) {
            out.event_lines.push_back(rec.j.dump());
        }
        out.audits = audits_;
        return out;
    }

    struct LogRec {
        double time;
        std::uint64_t order;
        nlohmann::ordered_json j;
    };

    struct NodeCache {
        std::set<int> shallow;  // prompts with shallow context present
        std::set<int> deep;     // prompts with deep (cloud) context present
    };

    const Scenario& sc_;
    Mode mode_;
    Artifacts art_;
    double now_ = 0.0;
    std::uint64_t seq_ = 0;
    std::uint64_t log_seq_ = 0;
    std::priority_queue<Ev, std::vector<Ev>, EvCmp> events_;
    std::vector<Resource> resources_;
    std::vector<ReqState> requests_;
    std::vector<TaskAudit> audits_;
    std::vector<LogRec> log_;
    std::map<int, CloudCtxState> cloud_ctx_;
    std::map<int, CloudStream> cloud_stream_;
    std::map<PrepKey, ContextPrep> preps_;
    std::map<int, NodeCache> node_cache_;
    std::map<PrepKey, double> published_;  // (node, prompt) -> publish time
    std::int64_t bytes_total_ = 0;
    std::int64_t user_bytes_to_cloud_ = 0;
    std::int64_t context_kv_bytes_ = 0;
    std::int64_t upload_bytes_ = 0;
    std::int64_t response_bytes_ = 0;
};

}  // namespace

std::string RunResult::event_log() const {
    std::string out;
    for (const std::string& line : event_lines) {
        out += line;
        out += '\n';
    }
    return out;
}

std::uint64_t RunResult::event_checksum() const { return fnv1a64(event_log()); }

RunResult run(const Scenario& scenario, Mode mode) {
    Sim sim(scenario, mode);
    return sim.execute();
}

std::vector<SweepRow> sweep(const nlohmann::json& config_template,
                            const std::vector<double>& rates) {
    if (!config_template.contains("arrival")) {
        throw std::invalid_argument("sweep: config must use an \"arrival\" process");
    }
    for (double r : rates) {
        if (r <= 0) throw std::invalid_argument("sweep: rates must be positive");
    }
    std::vector<SweepRow> rows;
    const std::uint64_t base_seed =
        config_template.contains("seed") ? config_template["seed"].get<std::uint64_t>() : 42u;
    for (std::size_t i = 0; i < rates.size(); ++i) {
        nlohmann::json cfg = config_template;
        cfg["arrival"]["rate_per_s"] = rates[i];
        cfg["seed"] = base_seed + i;
        const Scenario sc = build_scenario(cfg);
        for (Mode m : all_modes()) {
            SweepRow row;
            row.rate = rates[i];
            row.mode = m;
            row.report = run(sc, m).report;
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

std::string metrics_to_csv(const MetricsReport& report) {
    std::ostringstream out;
    out << "request_id,mode,ttft_s,latency_s,tokens,status\n";
    char buf[160];
    for (const RequestMetrics& r : report.requests) {
        std::snprintf(buf, sizeof(buf), "%d,%s,%.17g,%.17g,%d,%s\n", r.id,
                      mode_name(report.mode).c_str(), r.ttft, r.latency, r.tokens,
                      r.status.c_str());
        out << buf;
    }
    return out.str();
}

std::string metrics_to_json(const MetricsReport& report) {
    nlohmann::ordered_json j;
    j["mode"] = mode_name(report.mode);
    j["seed"] = report.seed;
    j["queueing"] = "fifo";
    nlohmann::ordered_json reqs = nlohmann::ordered_json::array();
    for (const RequestMetrics& r : report.requests) {
        nlohmann::ordered_json rj{{"id", r.id},       {"arrival_s", r.arrival},
                                  {"ttft_s", r.ttft}, {"latency_s", r.latency},
                                  {"tokens", r.tokens}, {"status", r.status}};
        if (!r.fail_reason.empty()) rj["reason"] = r.fail_reason;
        reqs.push_back(std::move(rj));
    }
    j["requests"] = reqs;
    j["aggregates"] = {{"completed", report.completed},
                       {"failed", report.failed},
                       {"avg_ttft_s", report.avg_ttft},
                       {"avg_latency_s", report.avg_latency},
                       {"normalized_ms_per_token", report.avg_normalized_ms_per_token},
                       {"throughput_rps", report.throughput_rps}};
    j["traffic"] = {{"bytes_total", report.bytes_total},
                    {"user_bytes_to_cloud", report.user_bytes_to_cloud},
                    {"context_kv_bytes", report.context_kv_bytes},
                    {"upload_bytes", report.upload_bytes},
                    {"response_bytes", report.response_bytes}};
    return j.dump(2);
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out << "rate,mode,completed,failed,avg_ttft_s,avg_latency_s,normalized_ms_per_token,"
           "throughput_rps\n";
    char buf[256];
    for (const SweepRow& row : rows) {
        std::snprintf(buf, sizeof(buf), "%.17g,%s,%d,%d,%.17g,%.17g,%.17g,%.17g\n", row.rate,
                      mode_name(row.mode).c_str(), row.report.completed, row.report.failed,
                      row.report.avg_ttft, row.report.avg_latency,
                      row.report.avg_normalized_ms_per_token, row.report.throughput_rps);
        out << buf;
    }
    return out.str();
}

}  // namespace edgekv
