#include "edgekv/layer_match.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace edgekv {

void SimilarityConfig::validate() const {
    // values above the metric range are allowed: they gate everything out
    if (theta_cka < 0.0) {
        throw std::invalid_argument("SimilarityConfig: theta_cka must be >= 0");
    }
    if (theta_rsa < -1.0) {
        throw std::invalid_argument("SimilarityConfig: theta_rsa must be >= -1");
    }
    if (num_probe_samples < 2) {
        throw std::invalid_argument("SimilarityConfig: num_probe_samples must be >= 2");
    }
}

Matrix rsm(const Matrix& o) {
    if (o.rows < 2) {
        throw std::invalid_argument("rsm: need at least 2 samples, got " +
                                    std::to_string(o.rows));
    }
    Matrix s(o.rows, o.rows);
    for (std::size_t i = 0; i < o.rows; ++i) {
        for (std::size_t j = 0; j < o.rows; ++j) {
            double acc = 0.0;
            const double* a = o.row_ptr(i);
            const double* b = o.row_ptr(j);
            for (std::size_t c = 0; c < o.cols; ++c) acc += a[c] * b[c];
            s(i, j) = acc;
        }
    }
    return s;
}

namespace {

// H S H computed via row/column/total means.
Matrix double_center(const Matrix& s) {
    const std::size_t n = s.rows;
    Vec row_mean(n, 0.0), col_mean(n, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            row_mean[i] += s(i, j);
            col_mean[j] += s(i, j);
            total += s(i, j);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        row_mean[i] /= static_cast<double>(n);
        col_mean[i] /= static_cast<double>(n);
    }
    total /= static_cast<double>(n * n);
    Matrix out(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out(i, j) = s(i, j) - row_mean[i] - col_mean[j] + total;
        }
    }
    return out;
}

Matrix cosine_matrix(const Matrix& o) {
    const std::size_t n = o.rows;
    Vec norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        const double* r = o.row_ptr(i);
        for (std::size_t c = 0; c < o.cols; ++c) acc += r[c] * r[c];
        norms[i] = std::sqrt(acc);
        if (norms[i] == 0.0) {
            throw std::invalid_argument("rsa: zero-norm row " + std::to_string(i));
        }
    }
    Matrix s(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            const double* a = o.row_ptr(i);
            const double* b = o.row_ptr(j);
            for (std::size_t c = 0; c < o.cols; ++c) acc += a[c] * b[c];
            s(i, j) = acc / (norms[i] * norms[j]);
        }
    }
    return s;
}

Vec strict_lower_flat(const Matrix& s) {
    Vec out;
    out.reserve(s.rows * (s.rows - 1) / 2);
    for (std::size_t i = 1; i < s.rows; ++i) {
        for (std::size_t j = 0; j < i; ++j) out.push_back(s(i, j));
    }
    return out;
}

// CKA is invariant to scaling, so inputs are normalized to Frobenius norm
// sqrt(N) before forming Grams; deep toy layers otherwise shrink until the
// absolute degeneracy guard misfires.
Matrix scale_normalize(const Matrix& o) {
    const double f = frobenius_norm(o);
    if (f == 0.0) return o;
    Matrix out = o;
    const double target = std::sqrt(static_cast<double>(o.rows));
    for (double& v : out.data) v *= target / f;
    return out;
}

}  // namespace

double hsic(const Matrix& s_e, const Matrix& s_c) {
    if (s_e.rows != s_e.cols || s_c.rows != s_c.cols) {
        throw std::invalid_argument("hsic: inputs must be square (" + shape_str(s_e) + ", " +
                                    shape_str(s_c) + ")");
    }
    if (s_e.rows != s_c.rows) {
        throw std::invalid_argument("hsic: size mismatch (" + shape_str(s_e) + " vs " +
                                    shape_str(s_c) + ")");
    }
    if (s_e.rows < 2) throw std::invalid_argument("hsic: need N >= 2");
    const std::size_t n = s_e.rows;
    const Matrix a = double_center(s_e);
    // tr(H Se H Sc) = <H Se H, Sc> elementwise, Sc symmetric.
    double tr = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) tr += a(i, j) * s_c(j, i);
    }
    const double denom = static_cast<double>(n - 1) * static_cast<double>(n - 1);
    return tr / denom;
}

double cka(const Matrix& o_e, const Matrix& o_c) {
    if (o_e.rows != o_c.rows) {
        throw std::invalid_argument("cka: row mismatch (" + shape_str(o_e) + " vs " +
                                    shape_str(o_c) + ")");
    }
    const Matrix s_e = rsm(o_e);
    const Matrix s_c = rsm(o_c);
    const double self_e = hsic(s_e, s_e);
    const double self_c = hsic(s_c, s_c);
    if (self_e < 1e-15 || self_c < 1e-15) {
        throw std::invalid_argument("cka: degenerate representation");
    }
    return hsic(s_e, s_c) / std::sqrt(self_e * self_c);
}

double rsa(const Matrix& o_e, const Matrix& o_c) {
    if (o_e.rows != o_c.rows) {
        throw std::invalid_argument("rsa: row mismatch (" + shape_str(o_e) + " vs " +
                                    shape_str(o_c) + ")");
    }
    if (o_e.rows < 3) throw std::invalid_argument("rsa: need N >= 3 samples");
    const Vec fe = strict_lower_flat(cosine_matrix(o_e));
    const Vec fc = strict_lower_flat(cosine_matrix(o_c));
    return pearson_corr(fe, fc);
}

LayerMatchReport match_layers(const std::vector<Matrix>& edge_outputs,
                              const std::vector<Matrix>& cloud_outputs,
                              const SimilarityConfig& cfg) {
    cfg.validate();
    if (edge_outputs.empty() || cloud_outputs.empty()) {
        throw std::invalid_argument("match_layers: empty layer output list");
    }
    const std::size_t n_rows = edge_outputs[0].rows;
    for (const Matrix& m : edge_outputs) {
        if (m.rows != n_rows) {
            throw std::invalid_argument("match_layers: probe row-count mismatch (" +
                                        std::to_string(m.rows) + " vs " +
                                        std::to_string(n_rows) + ")");
        }
    }
    for (const Matrix& m : cloud_outputs) {
        if (m.rows != n_rows) {
            throw std::invalid_argument("match_layers: probe row-count mismatch (" +
                                        std::to_string(m.rows) + " vs " +
                                        std::to_string(n_rows) + ")");
        }
    }

    std::vector<Matrix> edge_norm, cloud_norm;
    edge_norm.reserve(edge_outputs.size());
    cloud_norm.reserve(cloud_outputs.size());
    for (const Matrix& m : edge_outputs) edge_norm.push_back(scale_normalize(m));
    for (const Matrix& m : cloud_outputs) cloud_norm.push_back(scale_normalize(m));

    const int me = static_cast<int>(edge_outputs.size());
    const int nc = static_cast<int>(cloud_outputs.size());
    LayerMatchReport report;
    report.config = cfg;
    report.cka = Matrix(static_cast<std::size_t>(me), static_cast<std::size_t>(nc));
    report.rsa = Matrix(static_cast<std::size_t>(me), static_cast<std::size_t>(nc));
    report.best.assign(static_cast<std::size_t>(me), std::nullopt);

    for (int le = 0; le < me; ++le) {
        int best_lc = -1;
        double best_cka = 0.0, best_rsa = 0.0;
        for (int lc = 0; lc < nc; ++lc) {
            const double c = cka(edge_norm[static_cast<std::size_t>(le)],
                                 cloud_norm[static_cast<std::size_t>(lc)]);
            const double r = rsa(edge_norm[static_cast<std::size_t>(le)],
                                 cloud_norm[static_cast<std::size_t>(lc)]);
            report.cka(static_cast<std::size_t>(le), static_cast<std::size_t>(lc)) = c;
            report.rsa(static_cast<std::size_t>(le), static_cast<std::size_t>(lc)) = r;
            if (c >= cfg.theta_cka && r >= cfg.theta_rsa) {
                if (best_lc < 0 || c > best_cka) {  // tie keeps the shallower cloud layer
                    best_lc = lc;
                    best_cka = c;
                    best_rsa = r;
                }
            }
        }
        if (best_lc >= 0) {
            report.best[static_cast<std::size_t>(le)] = best_lc;
            report.matches.push_back(LayerMatch{le, best_lc, best_cka, best_rsa});
            report.shared_layers.push_back(le);
        }
    }
    return report;
}

std::string match_report_to_csv(const LayerMatchReport& report) {
    std::ostringstream out;
    out << "l_e,l_c,cka,rsa\n";
    char buf[64];
    for (std::size_t le = 0; le < report.cka.rows; ++le) {
        for (std::size_t lc = 0; lc < report.cka.cols; ++lc) {
            out << le << "," << lc << ",";
            std::snprintf(buf, sizeof(buf), "%.17g", report.cka(le, lc));
            out << buf << ",";
            std::snprintf(buf, sizeof(buf), "%.17g", report.rsa(le, lc));
            out << buf << "\n";
        }
    }
    return out.str();
}

std::string match_report_to_json(const LayerMatchReport& report) {
    nlohmann::ordered_json j;
    j["theta_cka"] = report.config.theta_cka;
    j["theta_rsa"] = report.config.theta_rsa;
    j["num_probe_samples"] = report.config.num_probe_samples;
    j["score_rule"] = "argmax cka, rsa as gate, ties to shallower cloud layer";
    auto matrix_to_json = [](const Matrix& m) {
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        for (std::size_t i = 0; i < m.rows; ++i) {
            nlohmann::ordered_json row = nlohmann::ordered_json::array();
            for (std::size_t c = 0; c < m.cols; ++c) row.push_back(m(i, c));
            rows.push_back(row);
        }
        return rows;
    };
    j["cka"] = matrix_to_json(report.cka);
    j["rsa"] = matrix_to_json(report.rsa);
    nlohmann::ordered_json matches = nlohmann::ordered_json::array();
    for (const LayerMatch& m : report.matches) {
        matches.push_back({{"edge_layer", m.edge_layer},
                           {"cloud_layer", m.cloud_layer},
                           {"cka", m.cka},
                           {"rsa", m.rsa}});
    }
    j["matches"] = matches;
    j["shared_layers"] = report.shared_layers;
    return j.dump(2);
}

}  // namespace edgekv
