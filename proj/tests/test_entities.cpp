#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "xar/entities.hpp"
#include "xar/errors.hpp"
#include "xar/rng.hpp"

using namespace xar;

namespace {

LatentGrid iota_grid(GridShape s) {
    LatentGrid g(s);
    std::iota(g.values().begin(), g.values().end(), 0.0);
    return g;
}

LatentGrid random_grid(GridShape s, std::uint64_t seed) {
    Rng rng(seed);
    LatentGrid g(s);
    rng.fill_normal(g.values());
    return g;
}

// Index maps written directly from the rearrangement patterns.
std::vector<std::size_t> cell_order(std::size_t H, std::size_t W, std::size_t k) {
    std::vector<std::size_t> out;
    for (std::size_t h = 0; h < H / k; ++h)
        for (std::size_t w = 0; w < W / k; ++w)
            for (std::size_t k1 = 0; k1 < k; ++k1)
                for (std::size_t k2 = 0; k2 < k; ++k2) out.push_back((h * k + k1) * W + (w * k + k2));
    return out;
}

std::vector<std::size_t> subsample_order(std::size_t H, std::size_t W, std::size_t d) {
    const std::size_t sh = H / d;
    const std::size_t sw = W / d;
    std::vector<std::size_t> out;
    for (std::size_t h = 0; h < sh; ++h)
        for (std::size_t w = 0; w < sw; ++w)
            for (std::size_t d1 = 0; d1 < d; ++d1)
                for (std::size_t d2 = 0; d2 < d; ++d2) out.push_back((d1 * sh + h) * W + (d2 * sw + w));
    return out;
}

}  // namespace

TEST_CASE("layout span examples") {
    const auto cell = build_layout(EntityKind::Cell, {16, 16, 4}, std::size_t{8});
    CHECK(cell.entity_count() == 4);
    CHECK(entity_token_spans(cell) ==
          std::vector<TokenSpan>{{0, 64}, {64, 64}, {128, 64}, {192, 64}});

    const auto image = build_layout(EntityKind::Image, {16, 16, 4});
    CHECK(image.entity_count() == 1);
    CHECK(image.spans()[0].count == 256);
    CHECK(entity_token_spans(build_layout(EntityKind::Image, {4, 4, 1})) == std::vector<TokenSpan>{{0, 16}});

    const auto scale = build_layout(EntityKind::Scale, {16, 16, 4}, std::vector<std::size_t>{2, 4, 8, 16});
    std::vector<std::size_t> counts;
    for (const auto& s : scale.spans()) counts.push_back(s.count);
    CHECK(counts == std::vector<std::size_t>{4, 16, 64, 256});

    CHECK(entity_token_spans(build_layout(EntityKind::Token, {2, 2, 1})) ==
          std::vector<TokenSpan>{{0, 1}, {1, 1}, {2, 1}, {3, 1}});
}

TEST_CASE("layout errors") {
    CHECK_THROWS_AS(build_layout(EntityKind::Cell, {6, 6, 1}, std::size_t{4}), LayoutError);
    CHECK_THROWS_AS(build_layout(EntityKind::Subsample, {6, 8, 1}, std::size_t{4}), LayoutError);
    CHECK_THROWS_AS(build_layout(EntityKind::Scale, {16, 16, 1}, std::vector<std::size_t>{2, 4, 8}), LayoutError);
    CHECK_THROWS_AS(build_layout(EntityKind::Scale, {8, 4, 1}, std::size_t{2}), LayoutError);
    const auto layout = build_layout(EntityKind::Cell, {4, 4, 1}, std::size_t{2});
    CHECK_THROWS_AS(latent_to_entities(LatentGrid(GridShape{4, 4, 2}), layout), LayoutError);
}

TEST_CASE("default scale schedule") {
    CHECK(default_scale_schedule(16, 4) == std::vector<std::size_t>{2, 4, 8, 16});
    CHECK(default_scale_schedule(16, 1) == std::vector<std::size_t>{16});
    CHECK(default_scale_schedule(8, 3) == std::vector<std::size_t>{2, 4, 8});
    CHECK_THROWS_AS(default_scale_schedule(12, 4), ScheduleError);
    CHECK_THROWS_AS(default_scale_schedule(16, 0), ScheduleError);
}

TEST_CASE("token orderings on the 4x4 index grid") {
    const LatentGrid g = iota_grid({4, 4, 1});
    const auto as_vec = [](const Matrix& m) { return m.data; };
    CHECK(as_vec(latent_to_entities(g, build_layout(EntityKind::Cell, g.shape(), std::size_t{2})).tokens) ==
          std::vector<double>{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15});
    CHECK(as_vec(latent_to_entities(g, build_layout(EntityKind::Subsample, g.shape(), std::size_t{2})).tokens) ==
          std::vector<double>{0, 2, 8, 10, 1, 3, 9, 11, 4, 6, 12, 14, 5, 7, 13, 15});
    std::vector<double> ident(16);
    std::iota(ident.begin(), ident.end(), 0.0);
    CHECK(as_vec(latent_to_entities(g, build_layout(EntityKind::Token, g.shape())).tokens) == ident);
    CHECK(as_vec(latent_to_entities(g, build_layout(EntityKind::Image, g.shape())).tokens) == ident);
}

TEST_CASE("orderings match the enumerated index maps on larger grids") {
    for (std::size_t H : {4, 8, 16}) {
        for (std::size_t W : {4, 8, 16}) {
            const LatentGrid g = iota_grid({H, W, 1});
            for (std::size_t k : {1, 2, 4}) {
                const auto cell = latent_to_entities(g, build_layout(EntityKind::Cell, g.shape(), k));
                const auto want = cell_order(H, W, k);
                for (std::size_t i = 0; i < want.size(); ++i) REQUIRE(cell.tokens.data[i] == double(want[i]));
                const auto sub = latent_to_entities(g, build_layout(EntityKind::Subsample, g.shape(), k));
                const auto want_s = subsample_order(H, W, k);
                for (std::size_t i = 0; i < want_s.size(); ++i) REQUIRE(sub.tokens.data[i] == double(want_s[i]));
            }
        }
    }
}

TEST_CASE("cell and subsample orders are distinct permutations") {
    const LatentGrid g = iota_grid({4, 4, 1});
    auto a = latent_to_entities(g, build_layout(EntityKind::Cell, g.shape(), std::size_t{2})).tokens.data;
    auto b = latent_to_entities(g, build_layout(EntityKind::Subsample, g.shape(), std::size_t{2})).tokens.data;
    CHECK(a != b);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == g.values());
    CHECK(b == g.values());
}

TEST_CASE("round trip is bit exact") {
    std::uint64_t seed = 1;
    for (std::size_t h : {4, 8, 16}) {
        for (std::size_t w : {4, 8, 16}) {
            for (std::size_t c : {1, 4}) {
                const LatentGrid x = random_grid({h, w, c}, seed++);
                std::vector<EntityLayout> layouts{build_layout(EntityKind::Token, x.shape()),
                                                  build_layout(EntityKind::Image, x.shape())};
                for (std::size_t k : {1, 2, 4}) {
                    layouts.push_back(build_layout(EntityKind::Cell, x.shape(), k));
                    layouts.push_back(build_layout(EntityKind::Subsample, x.shape(), k));
                }
                for (const auto& layout : layouts) {
                    const EntitySequence seq = latent_to_entities(x, layout);
                    REQUIRE(entities_to_latent(seq) == x);
                    auto vals = seq.tokens.data;
                    auto ref = x.values();
                    std::sort(vals.begin(), vals.end());
                    std::sort(ref.begin(), ref.end());
                    REQUIRE(vals == ref);
                }
            }
        }
    }
}

TEST_CASE("scale entities") {
    const LatentGrid x = random_grid({16, 16, 4}, 3);
    const auto layout = build_layout(EntityKind::Scale, x.shape(), std::vector<std::size_t>{2, 4, 8, 16});
    const EntitySequence seq = latent_to_entities(x, layout);
    CHECK(seq.tokens.rows == 4 + 16 + 64 + 256);
    CHECK(entities_to_latent(seq) == x);
    CHECK(seq.entity(3).data == x.values());

    // Each coarse token is the plain average of its source block.
    const Matrix e0 = seq.entity(0);
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t j = 0; j < 2; ++j) {
            for (std::size_t ch = 0; ch < 4; ++ch) {
                double s = 0.0;
                for (std::size_t a = 0; a < 8; ++a)
                    for (std::size_t b = 0; b < 8; ++b) s += x.at(i * 8 + a, j * 8 + b, ch);
                CHECK(e0(i * 2 + j, ch) == doctest::Approx(s / 64.0).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("resize_area on non-divisible sizes preserves the mean") {
    const LatentGrid x = random_grid({5, 5, 1}, 4);
    const LatentGrid y = resize_area(x, 5);
    CHECK(y == x);
    const LatentGrid z = resize_area(x, 1);
    double m = 0.0;
    for (double v : x.values()) m += v;
    CHECK(z.values()[0] == doctest::Approx(m / 25.0).epsilon(1e-12));
}

TEST_CASE("token coordinates and entity lookup") {
    const auto layout = build_layout(EntityKind::Cell, {4, 4, 1}, std::size_t{2});
    CHECK(layout.entity_of_token(0) == 0);
    CHECK(layout.entity_of_token(4) == 1);
    CHECK(layout.entity_of_token(15) == 3);
    const auto coords = layout.token_coordinates();
    REQUIRE(coords.size() == 16);
    // token 2 of the cell order is grid position 4 = (1, 0)
    CHECK(coords[2].first == doctest::Approx(1.0));
    CHECK(coords[2].second == doctest::Approx(0.0));
}

TEST_CASE("layout spec text round trip") {
    const auto layout = build_layout(EntityKind::Subsample, {8, 8, 2}, std::size_t{4});
    const LayoutSpec spec = layout.spec();
    CHECK(build_layout(spec, layout.grid()) == layout);
    CHECK(spec.to_config().find("subsample") != std::string::npos);
}
