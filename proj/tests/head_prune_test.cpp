#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "edgekv/head_prune.hpp"
#include "edgekv/matrix.hpp"
#include "edgekv/rng.hpp"
#include "edgekv/transformer.hpp"

using namespace edgekv;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    Matrix m(r, c);
    for (double& v : m.data) v = rng.uniform(-scale, scale);
    return m;
}

// residual computed through the full matrices rather than per-channel sums
double objective_oracle(const Matrix& q, const Matrix& k, const ChannelMask& mask) {
    Matrix full = matmul(q, [&] {
        Matrix kt(k.cols, k.rows);
        for (std::size_t i = 0; i < k.rows; ++i)
            for (std::size_t j = 0; j < k.cols; ++j) kt(j, i) = k(i, j);
        return kt;
    }());
    Matrix qs(q.rows, mask.kept.size()), ks(k.rows, mask.kept.size());
    for (std::size_t c = 0; c < mask.kept.size(); ++c) {
        for (std::size_t i = 0; i < q.rows; ++i)
            qs(i, c) = q(i, static_cast<std::size_t>(mask.kept[c]));
        for (std::size_t i = 0; i < k.rows; ++i)
            ks(i, c) = k(i, static_cast<std::size_t>(mask.kept[c]));
    }
    Matrix kst(ks.cols, ks.rows);
    for (std::size_t i = 0; i < ks.rows; ++i)
        for (std::size_t j = 0; j < ks.cols; ++j) kst(j, i) = ks(i, j);
    Matrix approx = mask.kept.empty() ? Matrix(q.rows, k.rows) : matmul(qs, kst);
    Matrix diff(full.rows, full.cols);
    for (std::size_t i = 0; i < full.data.size(); ++i)
        diff.data[i] = full.data[i] - approx.data[i];
    return frobenius_norm(diff);
}

double best_exhaustive(const Matrix& q, const Matrix& k, int d, int keep) {
    std::vector<int> idx(static_cast<std::size_t>(keep));
    double best = 1e300;
    // enumerate all C(d, keep) subsets
    std::vector<bool> pick(static_cast<std::size_t>(d), false);
    std::fill(pick.begin(), pick.begin() + keep, true);
    std::sort(pick.begin(), pick.end());
    do {
        ChannelMask m;
        m.head_dim = d;
        for (int c = 0; c < d; ++c)
            if (pick[static_cast<std::size_t>(c)]) m.kept.push_back(c);
        best = std::min(best, prune_objective(q, k, m));
    } while (std::next_permutation(pick.begin(), pick.end()));
    return best;
}

}  // namespace

TEST_CASE("prune spec retained budget") {
    PruneSpec s = PruneSpec::from_lambda(0.2, 80);
    CHECK(s.retained == 64);
    CHECK(PruneSpec::from_lambda(0.0, 7).retained == 7);
    CHECK(PruneSpec::from_lambda(1.0, 7).retained == 0);
    CHECK(PruneSpec::from_lambda(1.0 / 3.0, 6).retained == 4);  // exact fraction floors up
    CHECK(PruneSpec::from_lambda(0.5, 7).retained == 3);
    CHECK_THROWS_AS(PruneSpec::from_lambda(-0.1, 4), std::invalid_argument);

    PruneSpec inconsistent;
    inconsistent.lambda = 0.5;
    inconsistent.head_dim = 6;
    inconsistent.retained = 4;  // budget says 3
    CHECK_THROWS_WITH_AS(inconsistent.validate(), doctest::Contains("floor"),
                         std::invalid_argument);
}

TEST_CASE("prune objective boundary masks") {
    Rng rng(3);
    Matrix q = random_matrix(rng, 5, 4);
    Matrix k = random_matrix(rng, 5, 4);
    CHECK(prune_objective(q, k, ChannelMask::full(4)) == 0.0);
    ChannelMask empty;
    empty.head_dim = 4;
    Matrix kt(4, 5);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 4; ++j) kt(j, i) = k(i, j);
    CHECK(prune_objective(q, k, empty) ==
          doctest::Approx(frobenius_norm(matmul(q, kt))).epsilon(1e-14));
}

TEST_CASE("prune objective matches the full-matrix oracle") {
    Rng rng(5);
    Matrix q = random_matrix(rng, 6, 4);
    Matrix k = random_matrix(rng, 6, 4);
    ChannelMask m;
    m.head_dim = 4;
    m.kept = {0, 1, 3};  // drop channel 2
    CHECK(std::abs(prune_objective(q, k, m) - objective_oracle(q, k, m)) < 1e-12);
}

TEST_CASE("exact channel decomposition of the score matrix") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix q = random_matrix(rng, 4, 5);
        Matrix k = random_matrix(rng, 6, 5);
        ChannelMask m;
        m.head_dim = 5;
        for (int c = 0; c < 5; ++c)
            if (rng.next_u64() % 2 == 0) m.kept.push_back(c);
        CHECK(std::abs(prune_objective(q, k, m) - objective_oracle(q, k, m)) < 1e-12);
    }
}

TEST_CASE("select_channels boundary ratios") {
    Rng rng(9);
    Matrix q = random_matrix(rng, 8, 6);
    Matrix k = random_matrix(rng, 8, 6);
    ChannelMask all = select_channels(q, k, PruneSpec::from_lambda(0.0, 6));
    CHECK(all.kept.size() == 6);
    CHECK(prune_objective(q, k, all) == 0.0);
    ChannelMask none = select_channels(q, k, PruneSpec::from_lambda(1.0, 6));
    CHECK(none.kept.empty());
}

// Channels with dissimilar magnitudes are the regime channel pruning
// targets; scales here are log-uniform over roughly e^[-1.5, 1.5].
Matrix prunable_matrix(Rng& rng, std::size_t rows, std::size_t d) {
    Vec scale(d);
    for (double& s : scale) s = std::exp(rng.uniform(-1.5, 1.5));
    Matrix m(rows, d);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t c = 0; c < d; ++c) m(i, c) = scale[c] * rng.uniform(-1, 1);
    return m;
}

TEST_CASE("greedy selection stays near the exhaustive optimum") {
    Rng rng(11);
    int ok = 0;
    const int trials = 200;
    for (int t = 0; t < trials; ++t) {
        Matrix q = prunable_matrix(rng, 8, 6);
        Matrix k = prunable_matrix(rng, 8, 6);
        PruneSpec spec = PruneSpec::from_lambda(0.5, 6);
        ChannelMask greedy = select_channels(q, k, spec);
        REQUIRE(static_cast<int>(greedy.kept.size()) == spec.retained);
        const double got = prune_objective(q, k, greedy);
        const double best = best_exhaustive(q, k, 6, spec.retained);
        CHECK(got >= best - 1e-12);  // greedy can never beat the optimum
        if (got <= 1.10 * best) ++ok;
    }
    CHECK(ok >= trials * 95 / 100);
}

TEST_CASE("greedy ties break toward smaller channel index") {
    Matrix q(2, 3), k(2, 3);
    // all channels identical in score
    q.data = {1, 1, 1, 0, 0, 0};
    k.data = {1, 1, 1, 0, 0, 0};
    ChannelMask m = select_channels(q, k, PruneSpec::from_lambda(1.0 / 3.0, 3));
    CHECK(m.kept == std::vector<int>{0, 1});
}

TEST_CASE("delta flops") {
    DeltaParams p{1, 1024, 32, 80, 64, 32};
    CHECK(delta_flops(p) == 134217728);
    DeltaParams same{1, 1024, 32, 64, 64, 32};
    CHECK(delta_flops(same) == 0);
    DeltaParams tiny{1, 2, 1, 4, 2, 1};
    CHECK(delta_flops(tiny) == 32);
}

TEST_CASE("delta io bytes") {
    DeltaParams p{1, 1024, 32, 80, 64, 32};
    CHECK(delta_io_bytes(p) == 67174400);
    DeltaParams same{1, 1024, 32, 64, 64, 32};
    CHECK(delta_io_bytes(same) == 0);
    DeltaParams tiny{1, 1, 1, 2, 1, 1};
    CHECK(delta_io_bytes(tiny) == 8);
}

TEST_CASE("deltas are linear in the dim gap and layer count") {
    Rng rng(13);
    for (int t = 0; t < 50; ++t) {
        const std::int64_t b = 1 + static_cast<std::int64_t>(rng.next_u64() % 4);
        const std::int64_t m = 1 + static_cast<std::int64_t>(rng.next_u64() % 512);
        const std::int64_t k = 1 + static_cast<std::int64_t>(rng.next_u64() % 16);
        const std::int64_t de = 1 + static_cast<std::int64_t>(rng.next_u64() % 32);
        const std::int64_t gap = static_cast<std::int64_t>(rng.next_u64() % 32);
        const std::int64_t L = 1 + static_cast<std::int64_t>(rng.next_u64() % 8);
        DeltaParams one{b, m, k, de + gap, de, 1};
        DeltaParams many{b, m, k, de + gap, de, L};
        CHECK(delta_flops(many) == L * delta_flops(one));
        CHECK(delta_io_bytes(many) == L * delta_io_bytes(one));
        DeltaParams doubled{b, m, k, de + 2 * gap, de, L};
        CHECK(delta_flops(doubled) == 2 * delta_flops(many));
    }
}

TEST_CASE("savings report") {
    DeltaParams p{1, 1024, 32, 80, 64, 32};
    SavingsReport r = savings_report(p, 100e9, 10000000.0);
    CHECK(r.compute_seconds == doctest::Approx(1.342e-3).epsilon(0.005));
    CHECK(r.comm_seconds == doctest::Approx(6.71744).epsilon(1e-12));

    DeltaParams zero{1, 1024, 32, 64, 64, 32};
    SavingsReport rz = savings_report(zero, 100e9, 1e7);
    CHECK(rz.compute_seconds == 0.0);
    CHECK(rz.comm_seconds == 0.0);

    CHECK_THROWS_AS(savings_report(p, 0.0, 1e7), std::invalid_argument);
    CHECK_THROWS_AS(savings_report(p, 1e9, -5.0), std::invalid_argument);

    const std::string text = savings_to_text(r);
    CHECK(text.find("compute:") != std::string::npos);
    const std::string json = savings_to_json(r);
    CHECK(json.find("134217728") != std::string::npos);
}

TEST_CASE("prune_cache slices channels and keeps metadata") {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.head_dim = 6;
    cfg.hidden_size = 12;
    cfg.seed = 17;
    Model m = init_model(cfg);
    Matrix emb = generate_embeddings(19, 4, cfg.hidden_size);
    PrefillResult pre = prefill(m, emb);

    SUBCASE("full mask is the identity") {
        KVCache out = prune_cache(pre.cache, ChannelMask::full(6));
        CHECK(out.head_dim == 6);
        for (std::size_t i = 0; i < out.keys[0][0].data.size(); ++i)
            CHECK(out.keys[0][0].data[i] == pre.cache.keys[0][0].data[i]);
    }
    SUBCASE("mask of size d_e shrinks the cache") {
        ChannelMask mask;
        mask.head_dim = 6;
        mask.kept = {0, 2, 4, 5};
        KVCache out = prune_cache(pre.cache, mask);
        CHECK(out.head_dim == 4);
        CHECK(out.keys[1][1].cols == 4);
        CHECK(out.positions.size() == pre.cache.positions.size());
        CHECK(out.keys[0][0](2, 1) == pre.cache.keys[0][0](2, 2));
    }
    SUBCASE("mismatched mask rejected") {
        ChannelMask mask;
        mask.head_dim = 5;
        mask.kept = {0, 1};
        CHECK_THROWS_AS(prune_cache(pre.cache, mask), std::invalid_argument);
    }
}
