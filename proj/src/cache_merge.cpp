#include "edgekv/cache_merge.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace edgekv {

namespace {

SegmentAttention segment_attention_prefix(const Vec& q, const Matrix& k, const Matrix& v,
                                          int visible) {
    SegmentAttention res;
    const int d = static_cast<int>(k.cols);
    const int vd = static_cast<int>(v.cols);
    std::vector<double> logits(static_cast<std::size_t>(visible));
    for (int j = 0; j < visible; ++j) {
        const double* krow = k.row_ptr(static_cast<std::size_t>(j));
        double acc = 0.0;
        for (int c = 0; c < d; ++c) acc += q[static_cast<std::size_t>(c)] * krow[c];
        logits[static_cast<std::size_t>(j)] = acc;
    }
    double mx = logits[0];
    for (int j = 1; j < visible; ++j) mx = std::max(mx, logits[static_cast<std::size_t>(j)]);
    double sig = 0.0;
    res.o.assign(static_cast<std::size_t>(vd), 0.0);
    for (int j = 0; j < visible; ++j) {
        const double w = std::exp(logits[static_cast<std::size_t>(j)] - mx);
        sig += w;
        const double* vrow = v.row_ptr(static_cast<std::size_t>(j));
        for (int c = 0; c < vd; ++c) res.o[static_cast<std::size_t>(c)] += w * vrow[c];
    }
    for (double& x : res.o) x /= sig;
    res.sigma = sig;
    res.shift = mx;
    return res;
}

}  // namespace

double SegmentAttention::sigma_raw() const { return sigma * std::exp(shift); }

SegmentAttention segment_attention(const Vec& q, const Matrix& k, const Matrix& v) {
    if (k.rows == 0 || v.rows == 0) {
        throw std::invalid_argument("segment_attention: empty segment");
    }
    if (k.rows != v.rows) {
        throw std::invalid_argument("segment_attention: K/V row mismatch (" + shape_str(k) +
                                    " vs " + shape_str(v) + ")");
    }
    if (q.size() != k.cols) {
        throw std::invalid_argument("segment_attention: q has " + std::to_string(q.size()) +
                                    " dims, K has " + std::to_string(k.cols));
    }
    return segment_attention_prefix(q, k, v, static_cast<int>(k.rows));
}

MergedAttention merge_attention(const SegmentAttention& ctx, const SegmentAttention& user) {
    if (ctx.o.size() != user.o.size()) {
        throw std::invalid_argument("merge_attention: head_dim mismatch (" +
                                    std::to_string(ctx.o.size()) + " vs " +
                                    std::to_string(user.o.size()) + ")");
    }
    if (!(ctx.sigma > 0.0) || !(user.sigma > 0.0) || !std::isfinite(ctx.sigma) ||
        !std::isfinite(user.sigma)) {
        throw std::invalid_argument("merge_attention: non-positive or non-finite sigma");
    }
    const double m = std::max(ctx.shift, user.shift);
    const double sc = ctx.sigma * std::exp(ctx.shift - m);
    const double su = user.sigma * std::exp(user.shift - m);
    MergedAttention res;
    res.weights.alpha_ctx = sc / (sc + su);
    res.weights.alpha_user = su / (sc + su);
    res.o.resize(ctx.o.size());
    for (std::size_t i = 0; i < ctx.o.size(); ++i) {
        res.o[i] = res.weights.alpha_ctx * ctx.o[i] + res.weights.alpha_user * user.o[i];
    }
    return res;
}

AssembledContext assemble_context(const std::map<int, LayerKV>& shared,
                                  const std::map<int, LayerKV>& local,
                                  const std::map<int, CacheOrigin>& shared_origins,
                                  int expected_layers) {
    const int total = expected_layers >= 0 ? expected_layers
                                           : static_cast<int>(shared.size() + local.size());
    if (total == 0) throw std::invalid_argument("assemble_context: no layers supplied");

    std::vector<const LayerKV*> by_layer(static_cast<std::size_t>(total), nullptr);
    std::vector<CacheOrigin> provenance(static_cast<std::size_t>(total), CacheOrigin::local);
    auto place = [&](int layer, const LayerKV& kv, CacheOrigin origin) {
        if (layer < 0 || layer >= total) {
            throw std::invalid_argument("assemble_context: layer " + std::to_string(layer) +
                                        " outside 0.." + std::to_string(total - 1));
        }
        if (by_layer[static_cast<std::size_t>(layer)] != nullptr) {
            throw std::invalid_argument("assemble_context: duplicate layer " +
                                        std::to_string(layer));
        }
        by_layer[static_cast<std::size_t>(layer)] = &kv;
        provenance[static_cast<std::size_t>(layer)] = origin;
    };
    for (const auto& [layer, kv] : local) place(layer, kv, CacheOrigin::local);
    for (const auto& [layer, kv] : shared) {
        auto it = shared_origins.find(layer);
        place(layer, kv, it == shared_origins.end() ? CacheOrigin::cloud : it->second);
    }
    for (int l = 0; l < total; ++l) {
        if (by_layer[static_cast<std::size_t>(l)] == nullptr) {
            throw std::invalid_argument("assemble_context: missing layer " + std::to_string(l));
        }
    }

    const LayerKV& first = *by_layer[0];
    if (first.keys.empty()) throw std::invalid_argument("assemble_context: layer 0 has no heads");
    const int heads = static_cast<int>(first.keys.size());
    const int dim = static_cast<int>(first.keys[0].cols);
    const int positions = static_cast<int>(first.keys[0].rows);

    AssembledContext out;
    out.cache = KVCache::empty_for(total, heads, dim);
    out.provenance = provenance;
    for (int l = 0; l < total; ++l) {
        const LayerKV& kv = *by_layer[static_cast<std::size_t>(l)];
        if (static_cast<int>(kv.keys.size()) != heads ||
            static_cast<int>(kv.values.size()) != heads) {
            throw std::invalid_argument("assemble_context: layer " + std::to_string(l) +
                                        " head count mismatch");
        }
        for (int hd = 0; hd < heads; ++hd) {
            const Matrix& k = kv.keys[static_cast<std::size_t>(hd)];
            const Matrix& v = kv.values[static_cast<std::size_t>(hd)];
            if (static_cast<int>(k.cols) != dim || static_cast<int>(v.cols) != dim ||
                k.rows != v.rows || static_cast<int>(k.rows) != positions) {
                throw std::invalid_argument("assemble_context: layer " + std::to_string(l) +
                                            " dim mismatch (K " + shape_str(k) + ", V " +
                                            shape_str(v) + ", expected " +
                                            std::to_string(positions) + "x" +
                                            std::to_string(dim) + ")");
            }
            out.cache.keys[static_cast<std::size_t>(l)][static_cast<std::size_t>(hd)] = k;
            out.cache.values[static_cast<std::size_t>(l)][static_cast<std::size_t>(hd)] = v;
        }
    }
    for (int p = 0; p < positions; ++p) {
        out.cache.positions.push_back(PositionTag{PositionKind::context, p});
    }
    return out;
}

namespace {

// One forward pass of new rows through the edge model where each attention
// call merges the fixed context segment with the growing user segment.
std::vector<Vec> merged_forward(const Model& model, const AssembledContext& context,
                                KVCache& user_cache, const Matrix& embeddings,
                                PositionKind kind) {
    const ModelConfig& cfg = model.config;
    const int s = context.cache.size();
    const int h = cfg.hidden_size;
    const int d = cfg.head_dim;
    const int n = static_cast<int>(embeddings.rows);
    const int old_user = user_cache.size();
    if (s + old_user + n > cfg.max_positions) {
        throw std::invalid_argument("position overflow: " + std::to_string(s + old_user + n) +
                                    " > max_positions " + std::to_string(cfg.max_positions));
    }

    const Vec& gamma = model.layers[0].gamma;
    const Vec& bias = model.layers[0].bias;
    Matrix x(static_cast<std::size_t>(n), static_cast<std::size_t>(h));
    for (int i = 0; i < n; ++i) {
        const double* emb = embeddings.row_ptr(static_cast<std::size_t>(i));
        const double* pos =
            model.pos_embedding.row_ptr(static_cast<std::size_t>(s + old_user + i));
        double* dst = x.row_ptr(static_cast<std::size_t>(i));
        for (int c = 0; c < h; ++c) {
            dst[c] = gamma[static_cast<std::size_t>(c)] * (emb[c] + pos[c]) +
                     bias[static_cast<std::size_t>(c)];
        }
    }

    std::vector<Vec> final_rows;
    for (int l = 0; l < cfg.num_layers; ++l) {
        Matrix concat(static_cast<std::size_t>(n), static_cast<std::size_t>(h));
        for (int hd = 0; hd < cfg.num_heads; ++hd) {
            QkvRows qkv = project_qkv(model, x, l, hd);
            Matrix& uk = user_cache.keys[static_cast<std::size_t>(l)][static_cast<std::size_t>(hd)];
            Matrix& uv =
                user_cache.values[static_cast<std::size_t>(l)][static_cast<std::size_t>(hd)];
            for (int i = 0; i < n; ++i) {
                uk.data.insert(uk.data.end(), qkv.k.row_ptr(static_cast<std::size_t>(i)),
                               qkv.k.row_ptr(static_cast<std::size_t>(i)) + d);
                uk.rows += 1;
                uv.data.insert(uv.data.end(), qkv.v.row_ptr(static_cast<std::size_t>(i)),
                               qkv.v.row_ptr(static_cast<std::size_t>(i)) + d);
                uv.rows += 1;
            }
            const Matrix& ck =
                context.cache.keys[static_cast<std::size_t>(l)][static_cast<std::size_t>(hd)];
            const Matrix& cv =
                context.cache.values[static_cast<std::size_t>(l)][static_cast<std::size_t>(hd)];
            for (int i = 0; i < n; ++i) {
                Vec q = qkv.q.row(static_cast<std::size_t>(i));
                SegmentAttention user_att =
                    segment_attention_prefix(q, uk, uv, old_user + i + 1);
                Vec merged;
                if (s == 0) {
                    merged = user_att.o;  // degenerate merge: alpha_user = 1
                } else {
                    SegmentAttention ctx_att = segment_attention_prefix(q, ck, cv, s);
                    merged = merge_attention(ctx_att, user_att).o;
                }
                double* crow = concat.row_ptr(static_cast<std::size_t>(i));
                for (int c = 0; c < d; ++c) crow[hd * d + c] = merged[static_cast<std::size_t>(c)];
            }
        }
        x = matmul(concat, model.layers[static_cast<std::size_t>(l)].out_proj);
    }
    for (int i = 0; i < n; ++i) {
        user_cache.positions.push_back(PositionTag{kind, s + old_user + i});
        final_rows.push_back(x.row(static_cast<std::size_t>(i)));
    }
    return final_rows;
}

}  // namespace

CollaborativeResult collaborative_decode(const Model& edge_model,
                                         const AssembledContext& context,
                                         const Matrix& user_embeddings, int steps) {
    const ModelConfig& cfg = edge_model.config;
    if (steps < 1) throw std::invalid_argument("collaborative_decode: steps must be >= 1");
    if (context.cache.size() > 0) {
        if (context.cache.num_layers != cfg.num_layers) {
            throw std::invalid_argument(
                "collaborative_decode: context has " + std::to_string(context.cache.num_layers) +
                " layers, model has " + std::to_string(cfg.num_layers));
        }
        if (context.cache.num_heads != cfg.num_heads ||
            context.cache.head_dim != cfg.head_dim) {
            throw std::invalid_argument(
                "collaborative_decode: context dims (heads " +
                std::to_string(context.cache.num_heads) + ", dim " +
                std::to_string(context.cache.head_dim) +
                ") do not match model; align with head pruning first");
        }
    }

    CollaborativeResult res;
    KVCache user_cache = KVCache::empty_for(cfg.num_layers, cfg.num_heads, cfg.head_dim);
    if (user_embeddings.rows > 0) {
        res.prefill_outputs =
            merged_forward(edge_model, context, user_cache, user_embeddings, PositionKind::user);
    }

    Vec next;
    if (!res.prefill_outputs.empty()) {
        next = res.prefill_outputs.back();
    } else {
        next.assign(static_cast<std::size_t>(cfg.hidden_size), 0.0);
    }
    for (int t = 0; t < steps; ++t) {
        Matrix row(1, next.size());
        row.data = next;
        std::vector<Vec> outs =
            merged_forward(edge_model, context, user_cache, row, PositionKind::generated);
        next = outs.back();
        res.step_outputs.push_back(next);
    }
    return res;
}

}  // namespace edgekv
