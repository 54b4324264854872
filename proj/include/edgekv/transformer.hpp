#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "edgekv/matrix.hpp"

namespace edgekv {

struct ModelConfig {
    int num_layers = 1;
    int num_heads = 1;
    int head_dim = 1;
    int hidden_size = 1;  // must equal num_heads * head_dim
    int max_positions = 128;
    std::uint64_t seed = 0;

    void validate() const;  // throws on invariant violation
};

struct HeadWeights {
    Matrix wq, wk, wv;  // hidden_size x head_dim
};

struct LayerWeights {
    std::vector<HeadWeights> heads;
    Matrix out_proj;  // hidden_size x hidden_size
    Vec gamma;        // input transform scale, hidden_size (used before layer 0)
    Vec bias;         // input transform bias, hidden_size
};

// Exact floating-op counts (each multiply, add, exp, div counts 1),
// split by stage so the cost model can reason about the attention part
// separately from the projections.
struct FlopCounts {
    std::int64_t proj = 0;
    std::int64_t score = 0;
    std::int64_t softmax = 0;
    std::int64_t value = 0;
    std::int64_t out_proj = 0;

    std::int64_t attention() const { return score + softmax + value; }
    std::int64_t total() const { return proj + score + softmax + value + out_proj; }
    FlopCounts& operator+=(const FlopCounts& o) {
        proj += o.proj;
        score += o.score;
        softmax += o.softmax;
        value += o.value;
        out_proj += o.out_proj;
        return *this;
    }
};

enum class PositionKind { context, user, generated };

struct PositionTag {
    PositionKind kind;
    int index;  // absolute position
};

// Per-layer, per-head key/value matrices plus segment metadata.
// Rows are ordered: context positions, then user, then generated.
struct KVCache {
    int num_layers = 0;
    int num_heads = 0;
    int head_dim = 0;
    std::vector<std::vector<Matrix>> keys;    // [layer][head], positions x head_dim
    std::vector<std::vector<Matrix>> values;  // [layer][head]
    std::vector<PositionTag> positions;

    int size() const { return static_cast<int>(positions.size()); }
    static KVCache empty_for(int layers, int heads, int dim);
};

struct Model {
    ModelConfig config;
    std::vector<LayerWeights> layers;
    Matrix pos_embedding;  // max_positions x hidden_size

    // FNV-1a over all weight bytes; printable via to_hex() for golden tests.
    std::uint64_t checksum() const;
};

// Weights drawn uniform in [-0.1, 0.1] from the seeded generator; the same
// seed reproduces the model bit-for-bit.
Model init_model(const ModelConfig& config);

struct QkvRows {
    Matrix q, k, v;
};

// Q = x*W_Q etc. for the addressed head. x is n x hidden_size.
QkvRows project_qkv(const Model& model, const Matrix& x, int layer, int head);

struct AttentionResult {
    Matrix output;  // same rows as q
    Vec sigma;      // per query row: sum of exp(q_i . k_j) over j <= i
};

// Causal attention for row-aligned Q, K, V (query row i attends rows 0..i).
// Unnormalized weights are exp(q.kT) with no scale factor; computed with
// max-subtraction, sigma reported in raw form.
AttentionResult causal_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                 FlopCounts* fc = nullptr);

struct PrefillResult {
    KVCache cache;
    std::vector<Matrix> layer_outputs;  // per layer, n x hidden_size
};

// Runs all layers over the embedding rows (tagged `kind`, absolute
// positions starting at the current cache size when extending).
PrefillResult prefill(const Model& model, const Matrix& embeddings,
                      FlopCounts* fc = nullptr,
                      PositionKind kind = PositionKind::context);

// Appends one position; attention covers all cached positions plus self.
// Returns the final layer's output row.
Vec decode_step(const Model& model, KVCache& cache, const Vec& embedding,
                FlopCounts* fc = nullptr,
                PositionKind kind = PositionKind::generated);

// Shared forward pass: processes `embeddings` rows on top of an existing
// cache (which must belong to this model's shape). Returns per-layer outputs
// for the new rows and appends K/V to the cache. This is the single code
// path behind prefill and decode_step, so incremental and monolithic
// execution produce identical bits.
std::vector<Matrix> forward_rows(const Model& model, KVCache& cache,
                                 const Matrix& embeddings, PositionKind kind,
                                 FlopCounts* fc);

// Closed-form flop counts mirroring the instrumented loops exactly:
// one layer processing n_new rows on top of n_cached positions.
FlopCounts layer_flop_counts(const ModelConfig& cfg, int n_new, int n_cached,
                             bool input_transform = false);

// Closed-form estimate of the cache-coupled attention flops of one decode
// step at context length m: score and value stages at 2 flops per
// multiply-add, i.e. 4*b*m*k*d. The instrumented counts carry an extra
// ~1/(2*head_dim) of softmax overhead on top of this.
double attention_flops_estimate(std::int64_t b, std::int64_t m, std::int64_t k,
                                std::int64_t d);

// Per-layer byte traffic at 64-bit storage: weights + activations + KV reads
// and appends for n_new rows over n_cached positions.
std::int64_t layer_io_bytes(const ModelConfig& cfg, int n_new, int n_cached);

// Transferable context-cache size of one layer holding `positions` rows.
std::int64_t layer_kv_bytes(const ModelConfig& cfg, int positions);

// Deterministic embedding rows shared across heterogeneous widths: row i of
// generate_embeddings(seed, n, h) is a prefix of row i at any larger h.
Matrix generate_embeddings(std::uint64_t seed, int n, int hidden_size);

}  // namespace edgekv
