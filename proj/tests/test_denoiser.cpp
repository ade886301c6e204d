#include <cmath>

#include "doctest.h"
#include "xar/denoiser.hpp"
#include "xar/errors.hpp"
#include "xar/training.hpp"

using namespace xar;

namespace {

DenoiserConfig small_config() {
    DenoiserConfig c;
    c.depth = 2;
    c.width = 16;
    c.heads = 2;
    c.token_dim = 2;
    c.max_tokens = 32;
    c.num_classes = 3;
    c.mlp_ratio = 2;
    c.time_freq_dim = 8;
    return c;
}

void randomize(DenoiserModel& m, std::uint64_t seed, double scale = 0.1) {
    Rng rng(seed);
    for (double& v : m.params().values()) v += scale * rng.normal();
}

EntitySequence random_sequence(const EntityLayout& layout, std::uint64_t seed) {
    Rng rng(seed);
    LatentGrid g(layout.grid());
    rng.fill_normal(g.values());
    return latent_to_entities(g, layout);
}

}  // namespace

TEST_CASE("config validation") {
    DenoiserConfig c = small_config();
    CHECK_NOTHROW(c.validate());
    c.heads = 3;
    CHECK_THROWS_AS(c.validate(), DomainError);
    c = small_config();
    c.dropout = 1.0;
    CHECK_THROWS_AS(c.validate(), DomainError);
}

TEST_CASE("block causal mask examples") {
    const AttentionMask m = build_block_causal_mask({{0, 2}, {2, 2}});
    REQUIRE(m.size == 4);
    for (std::size_t q = 0; q < 4; ++q) {
        for (std::size_t k = 0; k < 4; ++k) {
            CHECK(m(q, k) == (q < 2 ? k < 2 : true));
        }
    }
    const AttentionMask full = build_block_causal_mask({{0, 5}});
    CHECK(full.count_true() == 25);

    const std::vector<TokenSpan> spans{{0, 3}, {3, 1}, {4, 4}, {8, 2}};
    std::size_t expect = 0;
    for (std::size_t j = 0; j < spans.size(); ++j)
        for (std::size_t i = 0; i <= j; ++i) expect += spans[i].count * spans[j].count;
    CHECK(build_block_causal_mask(spans).count_true() == expect);

    CHECK_THROWS_AS(build_block_causal_mask({{0, 3}, {2, 2}}), MaskError);
    CHECK_THROWS_AS(build_block_causal_mask({{0, 2}, {3, 2}}), MaskError);
}

TEST_CASE("dual stream geometry visibility") {
    const auto layout = build_layout(EntityKind::Cell, {4, 4, 1}, std::size_t{2});
    const SequenceGeometry g = dual_stream_geometry(layout, 16);
    REQUIRE(g.tokens == 32);
    for (std::size_t q = 0; q < 32; ++q) {
        const bool target_q = q >= 16;
        const std::size_t eq = layout.entity_of_token(q % 16);
        for (std::size_t k = 0; k < 32; ++k) {
            const bool target_k = k >= 16;
            const std::size_t ek = layout.entity_of_token(k % 16);
            bool want;
            if (!target_q) {
                want = !target_k && ek <= eq;
            } else {
                want = target_k ? ek == eq : ek < eq;
            }
            REQUIRE(g.mask(q, k) == want);
        }
    }
}

TEST_CASE("degenerate network outputs its bias") {
    DenoiserModel m(small_config(), 1);
    std::fill(m.params().values().begin(), m.params().values().end(), 0.0);
    auto b = m.params().value(m.index().out_b);
    b[0] = 0.25;
    b[1] = -1.5;
    const auto layout = build_layout(EntityKind::Cell, {4, 4, 2}, std::size_t{2});
    const auto x = random_sequence(layout, 2);
    Rng rng(0);
    const auto out = forward(m, x, {0.1, 0.2, 0.3, 0.4}, 1, build_block_causal_mask(layout.spans()), false, rng);
    for (std::size_t r = 0; r < out.tokens.rows; ++r) {
        CHECK(out.tokens(r, 0) == 0.25);
        CHECK(out.tokens(r, 1) == -1.5);
    }
}

TEST_CASE("initial model predicts zero velocity") {
    DenoiserModel m(small_config(), 3);
    const auto layout = build_layout(EntityKind::Token, {2, 2, 2});
    Rng rng(0);
    const auto out =
        forward(m, random_sequence(layout, 4), {0.5, 0.5, 0.5, 0.5}, 0, build_block_causal_mask(layout.spans()), false, rng);
    for (double v : out.tokens.data) CHECK(v == 0.0);
}

TEST_CASE("causality probe") {
    DenoiserModel m(small_config(), 5);
    randomize(m, 6);
    const auto layout = build_layout(EntityKind::Cell, {4, 4, 2}, std::size_t{2});
    const AttentionMask mask = build_block_causal_mask(layout.spans());
    const auto x = random_sequence(layout, 7);
    const TimeVector t{0.3, 0.6, 0.1, 0.8};
    Rng rng(0);
    const auto base = forward(m, x, t, 2, mask, false, rng);
    for (std::size_t n = 0; n + 1 < layout.entity_count(); ++n) {
        auto y = x;
        const TokenSpan next = layout.spans()[n + 1];
        for (std::size_t r = next.offset; r < next.offset + next.count; ++r) y.tokens(r, 1) -= 3.0;
        auto t2 = t;
        t2[n + 1] = 0.99;
        const auto out = forward(m, y, t2, 2, mask, false, rng);
        const TokenSpan cur = layout.spans()[n];
        for (std::size_t r = 0; r < cur.offset + cur.count; ++r) {
            CHECK(out.tokens(r, 0) == base.tokens(r, 0));
            CHECK(out.tokens(r, 1) == base.tokens(r, 1));
        }
        bool changed = false;
        for (std::size_t r = next.offset; r < next.offset + next.count; ++r) changed |= out.tokens(r, 0) != base.tokens(r, 0);
        CHECK(changed);
    }
}

TEST_CASE("inference mode is deterministic and ignores the rng") {
    DenoiserModel m(small_config(), 8);
    randomize(m, 9);
    const auto layout = build_layout(EntityKind::Subsample, {4, 4, 2}, std::size_t{2});
    const auto x = random_sequence(layout, 10);
    const AttentionMask mask = build_block_causal_mask(layout.spans());
    Rng r1(1);
    Rng r2(2);
    CHECK(forward(m, x, {0.1, 0.2, 0.3, 0.4}, 1, mask, false, r1).tokens ==
          forward(m, x, {0.1, 0.2, 0.3, 0.4}, 1, mask, false, r2).tokens);
    Rng r3(1);
    Rng r4(2);
    CHECK(forward(m, x, {0.1, 0.2, 0.3, 0.4}, 1, mask, true, r3).tokens !=
          forward(m, x, {0.1, 0.2, 0.3, 0.4}, 1, mask, true, r4).tokens);
}

TEST_CASE("labels are validated") {
    DenoiserModel m(small_config(), 11);
    const auto layout = build_layout(EntityKind::Image, {2, 2, 2});
    const auto x = random_sequence(layout, 12);
    const AttentionMask mask = build_block_causal_mask(layout.spans());
    Rng rng(0);
    CHECK_THROWS_AS(forward(m, x, {0.5}, 3, mask, false, rng), DomainError);
    CHECK_NOTHROW(forward(m, x, {0.5}, std::nullopt, mask, false, rng));
    CHECK_NOTHROW(forward(m, x, {0.5}, 2, mask, false, rng));
}

TEST_CASE("cfg_combine") {
    const Matrix c(1, 2, 2.0);
    const Matrix u(1, 2, 0.0);
    CHECK(cfg_combine(c, u, 1.0) == c);
    CHECK(cfg_combine(c, u, 0.0) == u);
    CHECK(cfg_combine(c, u, 1.5).data == std::vector<double>{3.0, 3.0});
}

TEST_CASE("batched forward equals per-sample forward") {
    DenoiserModel m(small_config(), 13);
    randomize(m, 14);
    const auto layout = build_layout(EntityKind::Cell, {4, 4, 2}, std::size_t{2});
    const SequenceGeometry geom = single_stream_geometry(layout, m.config().width);
    const std::size_t B = 5;
    const std::size_t T = layout.total_tokens();
    BatchInput in;
    in.batch = B;
    in.tokens = Matrix(B * T, 2);
    Rng rng(15);
    rng.fill_normal(in.tokens.data);
    for (std::size_t i = 0; i < B * 4; ++i) in.times.push_back(rng.uniform());
    in.labels = {0, 1, 2, kNullLabel, 1};
    const Matrix all = forward_batch(m, geom, in, ForwardOptions{});
    for (std::size_t b = 0; b < B; ++b) {
        BatchInput one;
        one.batch = 1;
        one.tokens = rows_slice(in.tokens, b * T, T);
        one.times.assign(in.times.begin() + b * 4, in.times.begin() + b * 4 + 4);
        one.labels = {in.labels[b]};
        CHECK(forward_batch(m, geom, one, ForwardOptions{}) == rows_slice(all, b * T, T));
    }
}

TEST_CASE("incremental decoder reproduces the full forward") {
    DenoiserModel m(small_config(), 16);
    randomize(m, 17);
    const auto layout = build_layout(EntityKind::Cell, {4, 4, 2}, std::size_t{2});
    const std::size_t B = 3;
    const std::vector<int> labels{0, kNullLabel, 2};
    IncrementalDecoder dec(m, layout, labels);
    const SequenceGeometry geom = single_stream_geometry(layout, m.config().width);
    Rng rng(18);
    Matrix clean(B * layout.total_tokens(), 2);
    rng.fill_normal(clean.data);
    const std::size_t T = layout.total_tokens();
    for (std::size_t n = 0; n < layout.entity_count(); ++n) {
        const TokenSpan s = layout.spans()[n];
        Matrix current(B * s.count, 2);
        rng.fill_normal(current.data);
        const double t = 0.37;
        const Matrix v = dec.velocity(current, t);

        BatchInput in;
        in.batch = B;
        in.tokens = clean;
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t p = 0; p < s.count; ++p) {
                for (std::size_t c = 0; c < 2; ++c) in.tokens(b * T + s.offset + p, c) = current(b * s.count + p, c);
            }
            for (std::size_t e = 0; e < layout.entity_count(); ++e) in.times.push_back(e < n ? 0.0 : t);
        }
        in.labels = labels;
        const Matrix full = forward_batch(m, geom, in, ForwardOptions{});
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t p = 0; p < s.count; ++p) {
                for (std::size_t c = 0; c < 2; ++c) {
                    REQUIRE(v(b * s.count + p, c) == full(b * T + s.offset + p, c));
                }
            }
        }
        Matrix entity(B * s.count, 2);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t p = 0; p < s.count; ++p)
                for (std::size_t c = 0; c < 2; ++c) entity(b * s.count + p, c) = clean(b * T + s.offset + p, c);
        dec.append_clean(entity);
    }
}

TEST_CASE("gradient check over every parameter") {
    DenoiserConfig cfg = small_config();
    cfg.depth = 1;
    cfg.width = 8;
    cfg.max_tokens = 8;
    DenoiserModel m(cfg, 19);
    randomize(m, 20, 0.2);
    const auto layout = build_layout(EntityKind::Cell, {4, 4, 2}, std::size_t{2});
    const auto x = random_sequence(layout, 21);
    for (TimePolicy policy : {TimePolicy::Random, TimePolicy::Clean}) {
        Rng r0(22);
        ncl_loss(m, x, 1, policy, r0, true);
        const std::vector<double> analytic = m.params().grads();
        auto& theta = m.params().values();
        double worst = 0.0;
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double keep = theta[i];
            theta[i] = keep + 1e-4;
            Rng rp(22);
            const double lp = ncl_loss(m, x, 1, policy, rp, true).total;
            theta[i] = keep - 1e-4;
            Rng rm(22);
            const double lm = ncl_loss(m, x, 1, policy, rm, true).total;
            theta[i] = keep;
            const double numeric = (lp - lm) / 2e-4;
            worst = std::max(worst, std::abs(numeric - analytic[i]) /
                                        std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6}));
        }
        CHECK(worst <= 1e-3);
    }
}

TEST_CASE("timestep embedding") {
    const auto e = timestep_embedding(0.0, 8);
    REQUIRE(e.size() == 8);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(std::abs(e[i]) + std::abs(e[i + 4]) == doctest::Approx(1.0));
    }
    CHECK(timestep_embedding(0.3, 8) != timestep_embedding(0.31, 8));
}
