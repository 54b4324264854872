#include "edgekv/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "edgekv/rng.hpp"

namespace edgekv {

void ModelConfig::validate() const {
    if (num_layers < 1) throw std::invalid_argument("ModelConfig: num_layers must be >= 1");
    if (head_dim < 1) throw std::invalid_argument("ModelConfig: head_dim must be >= 1");
    if (num_heads < 1) throw std::invalid_argument("ModelConfig: num_heads must be >= 1");
    if (max_positions < 1) throw std::invalid_argument("ModelConfig: max_positions must be >= 1");
    if (hidden_size != num_heads * head_dim) {
        throw std::invalid_argument("ModelConfig: hidden_size " + std::to_string(hidden_size) +
                                    " != num_heads*head_dim " +
                                    std::to_string(num_heads * head_dim));
    }
}

KVCache KVCache::empty_for(int layers, int heads, int dim) {
    KVCache c;
    c.num_layers = layers;
    c.num_heads = heads;
    c.head_dim = dim;
    c.keys.assign(layers, std::vector<Matrix>(heads, Matrix(0, dim)));
    c.values.assign(layers, std::vector<Matrix>(heads, Matrix(0, dim)));
    return c;
}

namespace {

void fill_uniform(Matrix& m, Rng& rng, double lo, double hi) {
    for (double& v : m.data) v = rng.uniform(lo, hi);
}

void append_row(Matrix& dst, const double* src, std::size_t n) {
    dst.data.insert(dst.data.end(), src, src + n);
    dst.rows += 1;
}

void hash_matrix(const Matrix& m, std::uint64_t& h) {
    h = fnv1a64(m.data.data(), m.data.size() * sizeof(double), h);
}

// Attention of one query row over the first `visible` rows of K/V.
// Returns sigma in raw form (finite at toy logit scales).
void row_attention(const double* q, const Matrix& k, const Matrix& v, int visible,
                   double* out, double* sigma_raw, FlopCounts* fc) {
    const int d = static_cast<int>(k.cols);
    const int vd = static_cast<int>(v.cols);
    std::vector<double> logits(static_cast<std::size_t>(visible));
    for (int j = 0; j < visible; ++j) {
        const double* krow = k.row_ptr(static_cast<std::size_t>(j));
        double acc = 0.0;
        for (int c = 0; c < d; ++c) acc += q[c] * krow[c];
        logits[static_cast<std::size_t>(j)] = acc;
    }
    double mx = logits[0];
    for (int j = 1; j < visible; ++j) mx = std::max(mx, logits[static_cast<std::size_t>(j)]);
    double sig = 0.0;
    std::fill(out, out + vd, 0.0);
    for (int j = 0; j < visible; ++j) {
        const double w = std::exp(logits[static_cast<std::size_t>(j)] - mx);
        sig += w;
        const double* vrow = v.row_ptr(static_cast<std::size_t>(j));
        for (int c = 0; c < vd; ++c) out[c] += w * vrow[c];
    }
    for (int c = 0; c < vd; ++c) out[c] /= sig;
    if (sigma_raw != nullptr) *sigma_raw = sig * std::exp(mx);
    if (fc != nullptr) {
        fc->score += static_cast<std::int64_t>(visible) * (2 * d - 1);
        fc->softmax += 3 * static_cast<std::int64_t>(visible) + 1;
        fc->value += static_cast<std::int64_t>(visible) * 2 * vd + vd;
    }
}

}  // namespace

Model init_model(const ModelConfig& config) {
    config.validate();
    Model m;
    m.config = config;
    Rng root(config.seed);
    const int h = config.hidden_size;
    const int d = config.head_dim;
    m.layers.resize(static_cast<std::size_t>(config.num_layers));
    for (int l = 0; l < config.num_layers; ++l) {
        LayerWeights& lw = m.layers[static_cast<std::size_t>(l)];
        lw.heads.resize(static_cast<std::size_t>(config.num_heads));
        for (int hd = 0; hd < config.num_heads; ++hd) {
            Rng r = root.fork(Rng::mix(static_cast<std::uint64_t>(l),
                                       static_cast<std::uint64_t>(hd)));
            HeadWeights& w = lw.heads[static_cast<std::size_t>(hd)];
            w.wq = Matrix(static_cast<std::size_t>(h), static_cast<std::size_t>(d));
            w.wk = Matrix(static_cast<std::size_t>(h), static_cast<std::size_t>(d));
            w.wv = Matrix(static_cast<std::size_t>(h), static_cast<std::size_t>(d));
            fill_uniform(w.wq, r, -0.1, 0.1);
            fill_uniform(w.wk, r, -0.1, 0.1);
            fill_uniform(w.wv, r, -0.1, 0.1);
        }
        Rng r = root.fork(Rng::mix(0x70726F6A, static_cast<std::uint64_t>(l)));
        lw.out_proj = Matrix(static_cast<std::size_t>(h), static_cast<std::size_t>(h));
        fill_uniform(lw.out_proj, r, -0.1, 0.1);
        lw.gamma.assign(static_cast<std::size_t>(h), 1.0);
        lw.bias.assign(static_cast<std::size_t>(h), 0.0);
    }
    Rng rp = root.fork(0x706F73);
    m.pos_embedding =
        Matrix(static_cast<std::size_t>(config.max_positions), static_cast<std::size_t>(h));
    fill_uniform(m.pos_embedding, rp, -0.1, 0.1);
    return m;
}

std::uint64_t Model::checksum() const {
    std::uint64_t h = 14695981039346656037ull;
    for (const LayerWeights& lw : layers) {
        for (const HeadWeights& w : lw.heads) {
            hash_matrix(w.wq, h);
            hash_matrix(w.wk, h);
            hash_matrix(w.wv, h);
        }
        hash_matrix(lw.out_proj, h);
        h = fnv1a64(lw.gamma.data(), lw.gamma.size() * sizeof(double), h);
        h = fnv1a64(lw.bias.data(), lw.bias.size() * sizeof(double), h);
    }
    hash_matrix(pos_embedding, h);
    return h;
}

QkvRows project_qkv(const Model& model, const Matrix& x, int layer, int head) {
    if (layer < 0 || layer >= model.config.num_layers) {
        throw std::invalid_argument("project_qkv: layer " + std::to_string(layer) +
                                    " out of range [0," +
                                    std::to_string(model.config.num_layers - 1) + "]");
    }
    if (head < 0 || head >= model.config.num_heads) {
        throw std::invalid_argument("project_qkv: head " + std::to_string(head) +
                                    " out of range [0," +
                                    std::to_string(model.config.num_heads - 1) + "]");
    }
    if (static_cast<int>(x.cols) != model.config.hidden_size) {
        throw std::invalid_argument("project_qkv: input has " + std::to_string(x.cols) +
                                    " cols, expected hidden_size " +
                                    std::to_string(model.config.hidden_size));
    }
    const HeadWeights& w =
        model.layers[static_cast<std::size_t>(layer)].heads[static_cast<std::size_t>(head)];
    return QkvRows{matmul(x, w.wq), matmul(x, w.wk), matmul(x, w.wv)};
}

AttentionResult causal_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                 FlopCounts* fc) {
    if (q.rows != k.rows || k.rows != v.rows) {
        throw std::invalid_argument("causal_attention: row mismatch (q " + shape_str(q) +
                                    ", k " + shape_str(k) + ", v " + shape_str(v) + ")");
    }
    if (q.cols != k.cols) {
        throw std::invalid_argument("causal_attention: head_dim mismatch (q " + shape_str(q) +
                                    " vs k " + shape_str(k) + ")");
    }
    if (q.empty()) throw std::invalid_argument("causal_attention: empty input");
    AttentionResult res;
    res.output = Matrix(q.rows, v.cols);
    res.sigma.resize(q.rows);
    for (std::size_t i = 0; i < q.rows; ++i) {
        row_attention(q.row_ptr(i), k, v, static_cast<int>(i) + 1, res.output.row_ptr(i),
                      &res.sigma[i], fc);
    }
    return res;
}

std::vector<Matrix> forward_rows(const Model& model, KVCache& cache,
                                 const Matrix& embeddings, PositionKind kind,
                                 FlopCounts* fc) {
    const ModelConfig& cfg = model.config;
    if (cache.num_layers != cfg.num_layers || cache.num_heads != cfg.num_heads ||
        cache.head_dim != cfg.head_dim) {
        throw std::invalid_argument("forward_rows: cache shape does not match model");
    }
    if (static_cast<int>(embeddings.cols) != cfg.hidden_size) {
        throw std::invalid_argument("forward_rows: embeddings have " +
                                    std::to_string(embeddings.cols) +
                                    " cols, expected hidden_size " +
                                    std::to_string(cfg.hidden_size));
    }
    const int n = static_cast<int>(embeddings.rows);
    const int old = cache.size();
    if (old + n > cfg.max_positions) {
        throw std::invalid_argument("position overflow: " + std::to_string(old + n) +
                                    " > max_positions " + std::to_string(cfg.max_positions));
    }
    const int h = cfg.hidden_size;
    const int d = cfg.head_dim;

    // Input transform x0 = gamma*(r + pos) + b before layer 0.
    const Vec& gamma = model.layers[0].gamma;
    const Vec& bias = model.layers[0].bias;
    Matrix x(static_cast<std::size_t>(n), static_cast<std::size_t>(h));
    for (int i = 0; i < n; ++i) {
        const double* emb = embeddings.row_ptr(static_cast<std::size_t>(i));
        const double* pos = model.pos_embedding.row_ptr(static_cast<std::size_t>(old + i));
        double* dst = x.row_ptr(static_cast<std::size_t>(i));
        for (int c = 0; c < h; ++c) {
            dst[c] = gamma[static_cast<std::size_t>(c)] * (emb[c] + pos[c]) +
                     bias[static_cast<std::size_t>(c)];
        }
    }
    if (fc != nullptr) fc->proj += 3ll * n * h;

    std::vector<Matrix> layer_outputs;
    layer_outputs.reserve(static_cast<std::size_t>(cfg.num_layers));
    for (int l = 0; l < cfg.num_layers; ++l) {
        Matrix concat(static_cast<std::size_t>(n), static_cast<std::size_t>(h));
        for (int hd = 0; hd < cfg.num_heads; ++hd) {
            QkvRows qkv = project_qkv(model, x, l, hd);
            if (fc != nullptr) fc->proj += 3ll * n * d * (2ll * h - 1);
            Matrix& ck = cache.keys[static_cast<std::size_t>(l)][static_cast<std::size_t>(hd)];
            Matrix& cv = cache.values[static_cast<std::size_t>(l)][static_cast<std::size_t>(hd)];
            for (int i = 0; i < n; ++i) {
                append_row(ck, qkv.k.row_ptr(static_cast<std::size_t>(i)),
                           static_cast<std::size_t>(d));
                append_row(cv, qkv.v.row_ptr(static_cast<std::size_t>(i)),
                           static_cast<std::size_t>(d));
            }
            std::vector<double> out(static_cast<std::size_t>(d));
            for (int i = 0; i < n; ++i) {
                row_attention(qkv.q.row_ptr(static_cast<std::size_t>(i)), ck, cv, old + i + 1,
                              out.data(), nullptr, fc);
                double* crow = concat.row_ptr(static_cast<std::size_t>(i));
                for (int c = 0; c < d; ++c) crow[hd * d + c] = out[static_cast<std::size_t>(c)];
            }
        }
        x = matmul(concat, model.layers[static_cast<std::size_t>(l)].out_proj);
        if (fc != nullptr) fc->out_proj += static_cast<std::int64_t>(n) * h * (2ll * h - 1);
        layer_outputs.push_back(x);
    }
    for (int i = 0; i < n; ++i) cache.positions.push_back(PositionTag{kind, old + i});
    return layer_outputs;
}

PrefillResult prefill(const Model& model, const Matrix& embeddings, FlopCounts* fc,
                      PositionKind kind) {
    PrefillResult res;
    res.cache = KVCache::empty_for(model.config.num_layers, model.config.num_heads,
                                   model.config.head_dim);
    res.layer_outputs = forward_rows(model, res.cache, embeddings, kind, fc);
    return res;
}

Vec decode_step(const Model& model, KVCache& cache, const Vec& embedding, FlopCounts* fc,
                PositionKind kind) {
    if (static_cast<int>(embedding.size()) != model.config.hidden_size) {
        throw std::invalid_argument("decode_step: embedding size " +
                                    std::to_string(embedding.size()) +
                                    " != hidden_size " +
                                    std::to_string(model.config.hidden_size));
    }
    Matrix row(1, embedding.size());
    row.data = embedding;
    std::vector<Matrix> outs = forward_rows(model, cache, row, kind, fc);
    return outs.back().row(0);
}

FlopCounts layer_flop_counts(const ModelConfig& cfg, int n_new, int n_cached,
                             bool input_transform) {
    FlopCounts fc;
    const std::int64_t h = cfg.hidden_size;
    const std::int64_t d = cfg.head_dim;
    const std::int64_t k = cfg.num_heads;
    if (input_transform) fc.proj += 3ll * n_new * h;
    fc.proj += static_cast<std::int64_t>(n_new) * k * 3 * d * (2 * h - 1);
    for (int i = 0; i < n_new; ++i) {
        const std::int64_t vis = n_cached + i + 1;
        fc.score += k * vis * (2 * d - 1);
        fc.softmax += k * (3 * vis + 1);
        fc.value += k * (vis * 2 * d + d);
    }
    fc.out_proj += static_cast<std::int64_t>(n_new) * h * (2 * h - 1);
    return fc;
}

double attention_flops_estimate(std::int64_t b, std::int64_t m, std::int64_t k,
                                std::int64_t d) {
    return 4.0 * static_cast<double>(b) * static_cast<double>(m) * static_cast<double>(k) *
           static_cast<double>(d);
}

std::int64_t layer_io_bytes(const ModelConfig& cfg, int n_new, int n_cached) {
    const std::int64_t h = cfg.hidden_size;
    const std::int64_t d = cfg.head_dim;
    const std::int64_t k = cfg.num_heads;
    std::int64_t visible_sum = 0;
    for (int i = 0; i < n_new; ++i) visible_sum += n_cached + i + 1;
    const std::int64_t weights = 3 * h * d * k + h * h;
    const std::int64_t activations = 2ll * n_new * h;
    const std::int64_t kv_append = 2ll * n_new * k * d;
    const std::int64_t kv_read = 2 * visible_sum * k * d;
    return 8 * (weights + activations + kv_append + kv_read);
}

std::int64_t layer_kv_bytes(const ModelConfig& cfg, int positions) {
    return 8ll * 2 * positions * cfg.num_heads * cfg.head_dim;
}

Matrix generate_embeddings(std::uint64_t seed, int n, int hidden_size) {
    Rng root(seed);
    Matrix m(static_cast<std::size_t>(n), static_cast<std::size_t>(hidden_size));
    for (int i = 0; i < n; ++i) {
        Rng r = root.fork(static_cast<std::uint64_t>(i));
        double* row = m.row_ptr(static_cast<std::size_t>(i));
        for (int c = 0; c < hidden_size; ++c) row[c] = r.uniform(-1.0, 1.0);
    }
    return m;
}

}  // namespace edgekv
