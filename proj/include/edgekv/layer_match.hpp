#pragma once

#include <optional>
#include <string>
#include <vector>

#include "edgekv/matrix.hpp"

namespace edgekv {

struct SimilarityConfig {
    double theta_cka = 0.5;   // in [0, 1]
    double theta_rsa = 0.3;   // in [-1, 1]
    int num_probe_samples = 64;

    void validate() const;
};

struct LayerMatch {
    int edge_layer;
    int cloud_layer;
    double cka;
    double rsa;
};

struct LayerMatchReport {
    Matrix cka;  // edge layers x cloud layers
    Matrix rsa;
    std::vector<LayerMatch> matches;       // matched edge layers only
    std::vector<int> shared_layers;        // matched edge layer indices, ascending
    std::vector<std::optional<int>> best;  // per edge layer: matched cloud layer
    SimilarityConfig config;
};

// Linear-kernel representational similarity matrix S = O * O^T.
Matrix rsm(const Matrix& o);

// (1/(N-1)^2) tr(H S_e H S_c) with H the centering matrix.
double hsic(const Matrix& s_e, const Matrix& s_c);

// Normalized HSIC in [0, 1] over linear-kernel RSMs. Column counts of the
// two inputs may differ. Throws "degenerate representation" when either
// self-HSIC vanishes (constant activations).
double cka(const Matrix& o_e, const Matrix& o_c);

// Pearson correlation of the flattened strict lower triangles of the two
// cosine-similarity matrices.
double rsa(const Matrix& o_e, const Matrix& o_c);

// For every edge layer, scores all cloud layers and picks the argmax by CKA
// among candidates passing both thresholds (RSA acts as a gate); ties break
// toward the shallower cloud layer. Unmatched edge layers are reported.
LayerMatchReport match_layers(const std::vector<Matrix>& edge_outputs,
                              const std::vector<Matrix>& cloud_outputs,
                              const SimilarityConfig& cfg);

std::string match_report_to_csv(const LayerMatchReport& report);
std::string match_report_to_json(const LayerMatchReport& report);

}  // namespace edgekv
