#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "edgekv/matrix.hpp"
#include "edgekv/transformer.hpp"

namespace edgekv {

struct PruneSpec {
    double lambda = 0.0;  // pruning ratio in [0, 1]
    int head_dim = 0;
    int retained = 0;     // floor((1 - lambda) * head_dim)

    static PruneSpec from_lambda(double lambda, int head_dim);
    void validate() const;
};

struct ChannelMask {
    int head_dim = 0;
    std::vector<int> kept;  // unique, ascending, each < head_dim

    void validate() const;
    static ChannelMask full(int head_dim);
};

// || Q K^T - Q_S (K_S)^T ||_F where Q_S, K_S keep only masked columns.
double prune_objective(const Matrix& q, const Matrix& k, const ChannelMask& mask);

// Greedy channel selection: score channel i by ||Q[:,i]|| * ||K[:,i]||, keep
// the top `retained`, ties toward the smaller index. Satisfies the retained
// budget exactly.
ChannelMask select_channels(const Matrix& q, const Matrix& k, const PruneSpec& spec);

struct DeltaParams {
    std::int64_t b = 1;    // batch size
    std::int64_t m = 1;    // sequence length
    std::int64_t k = 1;    // head count
    std::int64_t d_c = 1;  // cloud head dim
    std::int64_t d_e = 1;  // edge head dim, <= d_c
    std::int64_t L = 1;    // layer count

    void validate() const;
};

// L * 8*b*m*k*(d_c - d_e), exact integer arithmetic.
std::int64_t delta_flops(const DeltaParams& p);

// L * (4*b*m*k*(d_c - d_e) + 4*b*k*(d_c - d_e)) bytes, exact.
std::int64_t delta_io_bytes(const DeltaParams& p);

struct SavingsReport {
    DeltaParams params;
    std::int64_t flops_delta = 0;
    std::int64_t io_bytes_delta = 0;
    double flops_rate = 0.0;
    double bandwidth = 0.0;
    double compute_seconds = 0.0;
    double comm_seconds = 0.0;
};

SavingsReport savings_report(const DeltaParams& p, double flops_rate, double bandwidth);
std::string savings_to_text(const SavingsReport& r);
std::string savings_to_json(const SavingsReport& r);

// Column-slices every K/V matrix to the kept channels; segment metadata is
// preserved.
KVCache prune_cache(const KVCache& cache, const ChannelMask& mask);

}  // namespace edgekv
