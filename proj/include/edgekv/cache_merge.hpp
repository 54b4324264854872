#pragma once

#include <map>
#include <vector>

#include "edgekv/matrix.hpp"
#include "edgekv/transformer.hpp"

namespace edgekv {

// Partial attention output of one segment. The softmax normalizer is
// carried as (mantissa, shift) with sigma = mantissa * exp(shift), so two
// segments whose logits differ by hundreds still merge exactly.
struct SegmentAttention {
    Vec o;                 // partial attention output, head_dim wide
    double sigma = 0.0;    // shifted mantissa, > 0
    double shift = 0.0;    // max logit used for stabilization

    double sigma_raw() const;  // mantissa * exp(shift); may overflow by design
};

struct MergeWeights {
    double alpha_ctx = 0.0;
    double alpha_user = 0.0;
};

// o = sum_j softmax(q.kT)_j v_j over the whole segment, with the shared
// max-shift reported so merging stays exact.
SegmentAttention segment_attention(const Vec& q, const Matrix& k, const Matrix& v);

struct MergedAttention {
    Vec o;
    MergeWeights weights;
};

// Recombines two segment outputs with normalizer-derived weights:
// alpha_ctx = sigma_ctx / (sigma_ctx + sigma_user), shifts reconciled first.
MergedAttention merge_attention(const SegmentAttention& ctx, const SegmentAttention& user);

enum class CacheOrigin { local, peer, cloud };

// One layer's per-head context K/V.
struct LayerKV {
    std::vector<Matrix> keys;    // per head, positions x head_dim
    std::vector<Matrix> values;  // per head
};

struct AssembledContext {
    KVCache cache;
    std::vector<CacheOrigin> provenance;  // per layer
};

// Builds the full per-layer context from mixed sources. `shared` holds
// layers delivered from cloud or peers (origin looked up in
// `shared_origins`, defaulting to cloud); `local` holds locally computed
// layers. The union must cover layers 0..M-1 exactly once; M defaults to
// the combined entry count and can be pinned via `expected_layers`.
AssembledContext assemble_context(const std::map<int, LayerKV>& shared,
                                  const std::map<int, LayerKV>& local,
                                  const std::map<int, CacheOrigin>& shared_origins = {},
                                  int expected_layers = -1);

struct CollaborativeResult {
    std::vector<Vec> step_outputs;      // one final-layer row per decode step
    std::vector<Vec> prefill_outputs;   // final-layer rows of the user prefill
};

// Runs user-prompt prefill plus `steps` autoregressive decode steps on the
// edge model, where every attention call is segment_attention over the
// assembled context plus segment_attention over the user/generated cache,
// recombined by merge_attention. An empty context (s = 0) bypasses the
// merge entirely (alpha_user = 1).
CollaborativeResult collaborative_decode(const Model& edge_model,
                                         const AssembledContext& context,
                                         const Matrix& user_embeddings, int steps);

}  // namespace edgekv
