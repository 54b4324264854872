#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "edgekv/matrix.hpp"
#include "edgekv/rng.hpp"
#include "edgekv/transformer.hpp"

using namespace edgekv;

namespace {

ModelConfig small_config(std::uint64_t seed, int layers = 2, int heads = 2, int dim = 4) {
    ModelConfig cfg;
    cfg.num_layers = layers;
    cfg.num_heads = heads;
    cfg.head_dim = dim;
    cfg.hidden_size = heads * dim;
    cfg.max_positions = 64;
    cfg.seed = seed;
    return cfg;
}

double max_abs_diff(const Vec& a, const Vec& b) {
    double mx = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) mx = std::max(mx, std::abs(a[i] - b[i]));
    return mx;
}

}  // namespace

TEST_CASE("init_model determinism") {
    Model a = init_model(small_config(42));
    Model b = init_model(small_config(42));
    Model c = init_model(small_config(43));
    CHECK(a.checksum() == b.checksum());
    CHECK(a.checksum() != c.checksum());
    CHECK(to_hex(a.checksum()).size() == 16);
}

TEST_CASE("invalid config rejected") {
    ModelConfig cfg = small_config(1);
    cfg.hidden_size = 5;  // != heads * dim
    CHECK_THROWS_AS(init_model(cfg), std::invalid_argument);
}

TEST_CASE("project_qkv basics") {
    Model m = init_model(small_config(7));
    Matrix zero(3, static_cast<std::size_t>(m.config.hidden_size));
    QkvRows qkv = project_qkv(m, zero, 0, 0);
    for (double v : qkv.q.data) CHECK(v == 0.0);
    for (double v : qkv.k.data) CHECK(v == 0.0);
    for (double v : qkv.v.data) CHECK(v == 0.0);

    Matrix one_row = generate_embeddings(9, 1, m.config.hidden_size);
    QkvRows single = project_qkv(m, one_row, 1, 1);
    CHECK(single.q.rows == 1);
    CHECK(single.k.cols == static_cast<std::size_t>(m.config.head_dim));

    // matches an independent matmul
    Matrix want = matmul(one_row, m.layers[1].heads[1].wq);
    for (std::size_t i = 0; i < want.data.size(); ++i)
        CHECK(single.q.data[i] == want.data[i]);

    CHECK_THROWS_AS(project_qkv(m, one_row, 5, 0), std::invalid_argument);
    CHECK_THROWS_AS(project_qkv(m, one_row, 0, 9), std::invalid_argument);
}

TEST_CASE("causal attention single position") {
    Rng rng(3);
    Matrix q(1, 4), k(1, 4), v(1, 4);
    for (auto* m : {&q, &k, &v})
        for (double& x : m->data) x = rng.uniform(-1, 1);
    AttentionResult res = causal_attention(q, k, v);
    for (std::size_t c = 0; c < 4; ++c) CHECK(res.output(0, c) == doctest::Approx(v(0, c)));
    double dot = 0.0;
    for (std::size_t c = 0; c < 4; ++c) dot += q(0, c) * k(0, c);
    CHECK(res.sigma[0] == doctest::Approx(std::exp(dot)).epsilon(1e-12));
}

TEST_CASE("causal attention with identical value rows is a fixed point") {
    Rng rng(5);
    Matrix q(4, 3), k(4, 3), v(4, 2);
    for (auto* m : {&q, &k})
        for (double& x : m->data) x = rng.uniform(-2, 2);
    for (std::size_t i = 0; i < 4; ++i) {
        v(i, 0) = 0.25;
        v(i, 1) = -1.5;
    }
    AttentionResult res = causal_attention(q, k, v);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(res.output(i, 0) == doctest::Approx(0.25).epsilon(1e-12));
        CHECK(res.output(i, 1) == doctest::Approx(-1.5).epsilon(1e-12));
    }
}

TEST_CASE("causal attention matches brute-force masked softmax") {
    Rng rng(17);
    Matrix q(4, 2), k(4, 2), v(4, 2);
    for (auto* m : {&q, &k, &v})
        for (double& x : m->data) x = rng.uniform(-2, 2);
    AttentionResult res = causal_attention(q, k, v);
    for (std::size_t i = 0; i < 4; ++i) {
        // explicit double loop, no shift (logits are small here)
        double denom = 0.0;
        Vec out(2, 0.0);
        for (std::size_t j = 0; j <= i; ++j) {
            double logit = 0.0;
            for (std::size_t c = 0; c < 2; ++c) logit += q(i, c) * k(j, c);
            const double w = std::exp(logit);
            denom += w;
            for (std::size_t c = 0; c < 2; ++c) out[c] += w * v(j, c);
        }
        CHECK(std::abs(res.sigma[i] - denom) < 1e-12 * denom);
        for (std::size_t c = 0; c < 2; ++c)
            CHECK(std::abs(res.output(i, c) - out[c] / denom) < 1e-12);
    }
}

TEST_CASE("sigma entries strictly positive and finite") {
    Model m = init_model(small_config(23));
    Matrix emb = generate_embeddings(4, 10, m.config.hidden_size);
    Matrix x(emb.rows, emb.cols);
    x.data = emb.data;
    QkvRows qkv = project_qkv(m, x, 0, 0);
    AttentionResult res = causal_attention(qkv.q, qkv.k, qkv.v);
    for (double s : res.sigma) {
        CHECK(s > 0.0);
        CHECK(std::isfinite(s));
    }
}

TEST_CASE("prefill of zeros equals projections of the transformed zeros") {
    Model m = init_model(small_config(31));
    Matrix zeros(3, static_cast<std::size_t>(m.config.hidden_size));
    PrefillResult res = prefill(m, zeros);
    // layer-0 input is gamma*(0 + pos) + bias
    Matrix x0(3, zeros.cols);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t c = 0; c < zeros.cols; ++c)
            x0(i, c) = m.layers[0].gamma[c] * m.pos_embedding(i, c) + m.layers[0].bias[c];
    Matrix want_k = matmul(x0, m.layers[0].heads[0].wk);
    const Matrix& got_k = res.cache.keys[0][0];
    REQUIRE(got_k.rows == 3);
    for (std::size_t i = 0; i < want_k.data.size(); ++i)
        CHECK(got_k.data[i] == want_k.data[i]);
}

TEST_CASE("layer_outputs length equals num_layers") {
    Model m = init_model(small_config(37, 3));
    Matrix emb = generate_embeddings(1, 5, m.config.hidden_size);
    PrefillResult res = prefill(m, emb);
    CHECK(res.layer_outputs.size() == 3);
    CHECK(res.cache.size() == 5);
}

TEST_CASE("prefill then decode equals monolithic prefill") {
    Model m = init_model(small_config(41));
    Matrix full = generate_embeddings(8, 6, m.config.hidden_size);
    Matrix prefix(5, full.cols);
    std::copy(full.data.begin(), full.data.begin() + 5 * static_cast<long>(full.cols),
              prefix.data.begin());

    PrefillResult monolithic = prefill(m, full);
    PrefillResult inc = prefill(m, prefix);
    Vec out;
    for (int t = 5; t < 6; ++t) out = decode_step(m, inc.cache, full.row(static_cast<std::size_t>(t)));
    Vec want = monolithic.layer_outputs.back().row(5);
    CHECK(max_abs_diff(out, want) < 1e-9);
}

TEST_CASE("decode into empty cache equals prefill of length 1") {
    Model m = init_model(small_config(43));
    Matrix emb = generate_embeddings(11, 1, m.config.hidden_size);
    KVCache cache = KVCache::empty_for(m.config.num_layers, m.config.num_heads, m.config.head_dim);
    Vec dec = decode_step(m, cache, emb.row(0));
    PrefillResult pre = prefill(m, emb);
    CHECK(max_abs_diff(dec, pre.layer_outputs.back().row(0)) == 0.0);
}

TEST_CASE("two decode steps equal prefill of two positions") {
    Model m = init_model(small_config(47));
    Matrix emb = generate_embeddings(13, 2, m.config.hidden_size);
    KVCache cache = KVCache::empty_for(m.config.num_layers, m.config.num_heads, m.config.head_dim);
    decode_step(m, cache, emb.row(0));
    Vec second = decode_step(m, cache, emb.row(1));
    PrefillResult pre = prefill(m, emb);
    CHECK(max_abs_diff(second, pre.layer_outputs.back().row(1)) < 1e-9);
    CHECK(cache.size() == 2);
    for (int l = 0; l < m.config.num_layers; ++l)
        for (int h = 0; h < m.config.num_heads; ++h)
            CHECK(cache.keys[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)].rows == 2);
}

TEST_CASE("incremental decoding equals monolithic prefill over random sequences") {
    Rng seeds(51);
    for (int trial = 0; trial < 20; ++trial) {
        ModelConfig cfg = small_config(seeds.next_u64() % 1000, 1 + trial % 4, 1 + trial % 4,
                                       2 + trial % 3);
        Model m = init_model(cfg);
        const int len = 2 + static_cast<int>(seeds.next_u64() % 31);
        Matrix full = generate_embeddings(seeds.next_u64(), len, cfg.hidden_size);
        const int split = 1 + static_cast<int>(seeds.next_u64() % static_cast<unsigned>(len - 1));

        PrefillResult mono = prefill(m, full);
        Matrix prefix(static_cast<std::size_t>(split), full.cols);
        std::copy(full.data.begin(),
                  full.data.begin() + split * static_cast<long>(full.cols),
                  prefix.data.begin());
        PrefillResult inc = prefill(m, prefix);
        Vec out;
        for (int t = split; t < len; ++t)
            out = decode_step(m, inc.cache, full.row(static_cast<std::size_t>(t)));
        CHECK(max_abs_diff(out, mono.layer_outputs.back().row(static_cast<std::size_t>(len - 1))) <
              1e-9);
    }
}

TEST_CASE("causality: perturbing position j leaves earlier outputs untouched") {
    Model m = init_model(small_config(53));
    Matrix emb = generate_embeddings(19, 6, m.config.hidden_size);
    PrefillResult base = prefill(m, emb);
    Matrix perturbed = emb;
    perturbed(4, 1) += 0.37;
    PrefillResult mod = prefill(m, perturbed);
    for (int l = 0; l < m.config.num_layers; ++l) {
        for (std::size_t i = 0; i < 4; ++i) {
            for (std::size_t c = 0; c < base.layer_outputs[static_cast<std::size_t>(l)].cols; ++c) {
                CHECK(base.layer_outputs[static_cast<std::size_t>(l)](i, c) ==
                      mod.layer_outputs[static_cast<std::size_t>(l)](i, c));
            }
        }
    }
}

TEST_CASE("position overflow rejected") {
    ModelConfig cfg = small_config(57);
    cfg.max_positions = 4;
    Model m = init_model(cfg);
    Matrix emb = generate_embeddings(1, 5, cfg.hidden_size);
    CHECK_THROWS_WITH_AS(prefill(m, emb), doctest::Contains("position overflow"),
                         std::invalid_argument);
    Matrix ok(4, emb.cols);
    std::copy(emb.data.begin(), emb.data.begin() + 4 * static_cast<long>(emb.cols),
              ok.data.begin());
    PrefillResult res = prefill(m, ok);
    CHECK_THROWS_AS(decode_step(m, res.cache, emb.row(4)), std::invalid_argument);
}

TEST_CASE("instrumented flop counts match the closed form exactly") {
    for (int layers : {1, 3}) {
        for (int n : {1, 4}) {
            ModelConfig cfg = small_config(61, layers, 2, 4);
            Model m = init_model(cfg);
            Matrix emb = generate_embeddings(23, n + 3, cfg.hidden_size);
            Matrix prefix(static_cast<std::size_t>(n), emb.cols);
            std::copy(emb.data.begin(), emb.data.begin() + n * static_cast<long>(emb.cols),
                      prefix.data.begin());
            FlopCounts got;
            PrefillResult res = prefill(m, prefix, &got);
            FlopCounts want;
            for (int l = 0; l < layers; ++l) {
                FlopCounts layer = layer_flop_counts(cfg, n, 0, l == 0);
                want += layer;
            }
            // the input transform is shared, not per layer
            CHECK(got.proj == want.proj);
            CHECK(got.score == want.score);
            CHECK(got.softmax == want.softmax);
            CHECK(got.value == want.value);
            CHECK(got.out_proj == want.out_proj);

            FlopCounts dec_got;
            decode_step(m, res.cache, emb.row(static_cast<std::size_t>(n)), &dec_got);
            FlopCounts dec_want;
            for (int l = 0; l < layers; ++l) dec_want += layer_flop_counts(cfg, 1, n, l == 0);
            CHECK(dec_got.total() == dec_want.total());
        }
    }
}

TEST_CASE("decode attention flops track the closed-form estimate") {
    ModelConfig cfg = small_config(67, 2, 4, 16);
    Model m = init_model(cfg);
    for (int len : {16, 32}) {
        Matrix emb = generate_embeddings(29, len + 1, cfg.hidden_size);
        Matrix prefix(static_cast<std::size_t>(len), emb.cols);
        std::copy(emb.data.begin(), emb.data.begin() + len * static_cast<long>(emb.cols),
                  prefix.data.begin());
        PrefillResult res = prefill(m, prefix);
        FlopCounts fc;
        decode_step(m, res.cache, emb.row(static_cast<std::size_t>(len)), &fc);
        const double per_layer =
            static_cast<double>(fc.attention()) / cfg.num_layers;
        const double est = attention_flops_estimate(1, len + 1, cfg.num_heads, cfg.head_dim);
        CHECK(std::abs(per_layer - est) / est < 0.05);
    }
}

TEST_CASE("model checksum matches the frozen golden value") {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.head_dim = 4;
    cfg.hidden_size = 8;
    cfg.max_positions = 32;
    cfg.seed = 12345;
    CHECK(to_hex(init_model(cfg).checksum()) == "fa0d3d12020757f7");
}

TEST_CASE("cache position tags stay ordered across segments") {
    Model m = init_model(small_config(71));
    Matrix ctx = generate_embeddings(61, 3, m.config.hidden_size);
    KVCache cache = KVCache::empty_for(m.config.num_layers, m.config.num_heads,
                                       m.config.head_dim);
    forward_rows(m, cache, ctx, PositionKind::context, nullptr);
    Matrix user = generate_embeddings(63, 2, m.config.hidden_size);
    forward_rows(m, cache, user, PositionKind::user, nullptr);
    decode_step(m, cache, user.row(1));
    REQUIRE(cache.positions.size() == 6);
    int prev_index = -1;
    int prev_kind = 0;
    for (const PositionTag& tag : cache.positions) {
        CHECK(tag.index == prev_index + 1);  // strictly increasing, no gaps
        const int kind = static_cast<int>(tag.kind);
        CHECK(kind >= prev_kind);  // context, then user, then generated
        prev_index = tag.index;
        prev_kind = kind;
    }
}

TEST_CASE("long autoregressive rollouts stay finite") {
    Model m = init_model(small_config(73, 3, 2, 4));
    Matrix emb = generate_embeddings(67, 2, m.config.hidden_size);
    PrefillResult res = prefill(m, emb);
    Vec next = res.layer_outputs.back().row(1);
    for (int t = 0; t < 32; ++t) {
        next = decode_step(m, res.cache, next);
        for (double v : next) CHECK(std::isfinite(v));
    }
    CHECK(res.cache.size() == 34);
}

TEST_CASE("embedding generator is width-stable") {
    Matrix narrow = generate_embeddings(99, 3, 4);
    Matrix wide = generate_embeddings(99, 3, 8);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t c = 0; c < 4; ++c) CHECK(narrow(i, c) == wide(i, c));
}
