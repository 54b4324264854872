#include "edgekv/head_prune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace edgekv {

PruneSpec PruneSpec::from_lambda(double lambda, int head_dim) {
    PruneSpec s;
    s.lambda = lambda;
    s.head_dim = head_dim;
    // small epsilon so exact fractions like (1 - 1/3)*6 floor to 4, not 3
    s.retained = static_cast<int>(std::floor((1.0 - lambda) * head_dim + 1e-9));
    s.validate();
    return s;
}

void PruneSpec::validate() const {
    if (lambda < 0.0 || lambda > 1.0) {
        throw std::invalid_argument("PruneSpec: lambda outside [0,1]");
    }
    if (head_dim < 1) throw std::invalid_argument("PruneSpec: head_dim must be >= 1");
    if (retained < 0 || retained > head_dim) {
        throw std::invalid_argument("PruneSpec: retained " + std::to_string(retained) +
                                    " outside [0," + std::to_string(head_dim) + "]");
    }
    const int budget = static_cast<int>(std::floor((1.0 - lambda) * head_dim + 1e-9));
    if (retained != budget) {
        throw std::invalid_argument("PruneSpec: retained " + std::to_string(retained) +
                                    " != floor((1-lambda)*head_dim) = " +
                                    std::to_string(budget));
    }
}

void ChannelMask::validate() const {
    int prev = -1;
    for (int c : kept) {
        if (c <= prev || c < 0 || c >= head_dim) {
            throw std::invalid_argument("ChannelMask: kept channels must be unique, ascending "
                                        "and < head_dim");
        }
        prev = c;
    }
}

ChannelMask ChannelMask::full(int head_dim) {
    ChannelMask m;
    m.head_dim = head_dim;
    m.kept.resize(static_cast<std::size_t>(head_dim));
    std::iota(m.kept.begin(), m.kept.end(), 0);
    return m;
}

double prune_objective(const Matrix& q, const Matrix& k, const ChannelMask& mask) {
    if (q.cols != k.cols || static_cast<int>(q.cols) != mask.head_dim) {
        throw std::invalid_argument("prune_objective: dim mismatch (Q " + shape_str(q) +
                                    ", K " + shape_str(k) + ", mask dim " +
                                    std::to_string(mask.head_dim) + ")");
    }
    mask.validate();
    std::vector<bool> keep(q.cols, false);
    for (int c : mask.kept) keep[static_cast<std::size_t>(c)] = true;
    // residual = sum over dropped channels of the outer product Q[:,c] K[:,c]^T
    double acc = 0.0;
    for (std::size_t i = 0; i < q.rows; ++i) {
        for (std::size_t j = 0; j < k.rows; ++j) {
            double r = 0.0;
            for (std::size_t c = 0; c < q.cols; ++c) {
                if (!keep[c]) r += q(i, c) * k(j, c);
            }
            acc += r * r;
        }
    }
    return std::sqrt(acc);
}

ChannelMask select_channels(const Matrix& q, const Matrix& k, const PruneSpec& spec) {
    spec.validate();
    if (q.cols != k.cols || static_cast<int>(q.cols) != spec.head_dim) {
        throw std::invalid_argument("select_channels: dim mismatch (Q " + shape_str(q) +
                                    ", K " + shape_str(k) + ", spec dim " +
                                    std::to_string(spec.head_dim) + ")");
    }
    const std::size_t d = q.cols;
    Vec score(d, 0.0);
    for (std::size_t c = 0; c < d; ++c) {
        double qn = 0.0, kn = 0.0;
        for (std::size_t i = 0; i < q.rows; ++i) qn += q(i, c) * q(i, c);
        for (std::size_t j = 0; j < k.rows; ++j) kn += k(j, c) * k(j, c);
        score[c] = std::sqrt(qn) * std::sqrt(kn);
    }
    std::vector<int> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(b)];
    });
    ChannelMask mask;
    mask.head_dim = spec.head_dim;
    mask.kept.assign(order.begin(), order.begin() + spec.retained);
    std::sort(mask.kept.begin(), mask.kept.end());
    return mask;
}

void DeltaParams::validate() const {
    if (b < 1 || m < 1 || k < 1 || d_c < 1 || d_e < 1 || L < 1) {
        throw std::invalid_argument("DeltaParams: all parameters must be positive");
    }
    if (d_e > d_c) {
        throw std::invalid_argument("DeltaParams: d_e " + std::to_string(d_e) + " > d_c " +
                                    std::to_string(d_c));
    }
}

std::int64_t delta_flops(const DeltaParams& p) {
    p.validate();
    return p.L * 8 * p.b * p.m * p.k * (p.d_c - p.d_e);
}

std::int64_t delta_io_bytes(const DeltaParams& p) {
    p.validate();
    return p.L * (4 * p.b * p.m * p.k * (p.d_c - p.d_e) + 4 * p.b * p.k * (p.d_c - p.d_e));
}

SavingsReport savings_report(const DeltaParams& p, double flops_rate, double bandwidth) {
    if (flops_rate <= 0.0 || bandwidth <= 0.0) {
        throw std::invalid_argument("savings_report: rates must be positive");
    }
    SavingsReport r;
    r.params = p;
    r.flops_delta = delta_flops(p);
    r.io_bytes_delta = delta_io_bytes(p);
    r.flops_rate = flops_rate;
    r.bandwidth = bandwidth;
    r.compute_seconds = static_cast<double>(r.flops_delta) / flops_rate;
    r.comm_seconds = static_cast<double>(r.io_bytes_delta) / bandwidth;
    return r;
}

std::string savings_to_text(const SavingsReport& r) {
    char buf[256];
    std::ostringstream out;
    std::snprintf(buf, sizeof(buf), "compute: %lld flops saved -> %.6g s at %.6g flops/s\n",
                  static_cast<long long>(r.flops_delta), r.compute_seconds, r.flops_rate);
    out << buf;
    std::snprintf(buf, sizeof(buf), "comm:    %lld bytes saved -> %.6g s at %.6g bytes/s\n",
                  static_cast<long long>(r.io_bytes_delta), r.comm_seconds, r.bandwidth);
    out << buf;
    return out.str();
}

std::string savings_to_json(const SavingsReport& r) {
    nlohmann::ordered_json j;
    j["params"] = {{"b", r.params.b}, {"m", r.params.m},     {"k", r.params.k},
                   {"d_c", r.params.d_c}, {"d_e", r.params.d_e}, {"L", r.params.L}};
    j["delta_flops"] = r.flops_delta;
    j["delta_io_bytes"] = r.io_bytes_delta;
    j["flops_rate"] = r.flops_rate;
    j["bandwidth_bytes_per_s"] = r.bandwidth;
    j["compute_seconds"] = r.compute_seconds;
    j["comm_seconds"] = r.comm_seconds;
    return j.dump(2);
}

KVCache prune_cache(const KVCache& cache, const ChannelMask& mask) {
    if (mask.head_dim != cache.head_dim) {
        throw std::invalid_argument("prune_cache: mask dim " + std::to_string(mask.head_dim) +
                                    " != cache head_dim " + std::to_string(cache.head_dim));
    }
    mask.validate();
    KVCache out = KVCache::empty_for(cache.num_layers, cache.num_heads,
                                     static_cast<int>(mask.kept.size()));
    out.positions = cache.positions;
    auto slice = [&](const Matrix& src) {
        Matrix dst(src.rows, mask.kept.size());
        for (std::size_t i = 0; i < src.rows; ++i) {
            for (std::size_t c = 0; c < mask.kept.size(); ++c) {
                dst(i, c) = src(i, static_cast<std::size_t>(mask.kept[c]));
            }
        }
        return dst;
    };
    for (int l = 0; l < cache.num_layers; ++l) {
        for (int h = 0; h < cache.num_heads; ++h) {
            out.keys[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)] =
                slice(cache.keys[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)]);
            out.values[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)] =
                slice(cache.values[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)]);
        }
    }
    return out;
}

}  // namespace edgekv
