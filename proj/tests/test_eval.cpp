#include <cmath>

#include "doctest.h"
#include "xar/errors.hpp"
#include "xar/eval.hpp"

using namespace xar;

namespace {

std::vector<LatentGrid> gaussian_set(std::size_t n, GridShape shape, double shift, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<LatentGrid> out;
    for (std::size_t i = 0; i < n; ++i) {
        LatentGrid g(shape);
        rng.fill_normal(g.values());
        g.values()[0] += shift;
        out.push_back(std::move(g));
    }
    return out;
}

// Reference W2 between equal-size samples: sorted pairing.
double w2_sorted(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s / a.size());
}

}  // namespace

TEST_CASE("1-D W2") {
    CHECK(wasserstein2_1d({1, 2, 3}, {3, 1, 2}) == 0.0);
    CHECK(wasserstein2_1d({0}, {2}) == doctest::Approx(2.0));
    CHECK(wasserstein2_1d({0, 0}, {1, 1}) == doctest::Approx(1.0));
    Rng rng(1);
    std::vector<double> a(50);
    std::vector<double> b(50);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = 2 * rng.normal() + 1;
    CHECK(wasserstein2_1d(a, b) == doctest::Approx(w2_sorted(a, b)).epsilon(1e-12));
    // unequal sizes: replicating each sample k times leaves the distribution unchanged
    std::vector<double> a3;
    for (double v : a)
        for (int k = 0; k < 3; ++k) a3.push_back(v);
    CHECK(wasserstein2_1d(a3, b) == doctest::Approx(wasserstein2_1d(a, b)).epsilon(1e-12));
    // {0, 1} against {0, 0, 1}: mass 1/6 moves distance 1
    CHECK(wasserstein2_1d({0, 1}, {0, 0, 1}) == doctest::Approx(std::sqrt(1.0 / 6.0)));
}

TEST_CASE("sliced W2 pseudometric properties") {
    const GridShape shape{2, 2, 2};
    const auto a = gaussian_set(100, shape, 0.0, 2);
    const auto b = gaussian_set(150, shape, 0.5, 3);
    Rng p(4);
    CHECK(sliced_wasserstein(a, a, 32, p) == 0.0);
    auto shuffled = a;
    std::reverse(shuffled.begin(), shuffled.end());
    Rng p0(4);
    CHECK(sliced_wasserstein(a, shuffled, 32, p0) == 0.0);
    Rng p1(5);
    Rng p2(5);
    const double ab = sliced_wasserstein(a, b, 32, p1);
    CHECK(ab == sliced_wasserstein(b, a, 32, p2));
    CHECK(ab > 0.0);
}

TEST_CASE("sliced W2 of shifted Gaussians") {
    const GridShape shape{2, 2, 1};
    const double mu = 2.0;
    const auto a = gaussian_set(20000, shape, 0.0, 6);
    const auto b = gaussian_set(20000, shape, mu, 7);
    const std::size_t projections = 64;
    Rng p(8);
    const double sw = sliced_wasserstein(a, b, projections, p);
    // same directions again: W2 between N(0,1) and N(mu <d, e1>, 1) is |mu <d, e1>|
    Rng q(8);
    const auto dirs = random_projections(4, projections, q);
    double c = 0.0;
    for (const auto& d : dirs) c += std::abs(d[0]);
    c /= projections;
    CHECK(std::abs(sw - c * mu) <= 0.1 * c * mu);
}

TEST_CASE("sliced W2 errors") {
    const auto a = gaussian_set(4, {2, 2, 1}, 0.0, 1);
    const auto b = gaussian_set(4, {2, 2, 2}, 0.0, 1);
    Rng p(1);
    CHECK_THROWS_AS(sliced_wasserstein(a, b, 8, p), DomainError);
    CHECK_THROWS_AS(sliced_wasserstein({a[0]}, a, 8, p), DomainError);
}

TEST_CASE("projections are unit vectors") {
    Rng rng(9);
    for (const auto& d : random_projections(7, 20, rng)) {
        double n = 0.0;
        for (double v : d) n += v * v;
        CHECK(n == doctest::Approx(1.0));
    }
}

TEST_CASE("compare_samples metrics") {
    const GridShape shape{2, 2, 1};
    auto gen = gaussian_set(400, shape, 0.0, 10);
    auto ref = gaussian_set(400, shape, 0.0, 11);
    std::vector<int> gl(400);
    std::vector<int> rl(400);
    for (int i = 0; i < 400; ++i) gl[i] = rl[i] = i % 2;
    const MetricReport same = compare_samples(ref, rl, ref, rl, 16, 1);
    CHECK(same.sliced_w2 == 0.0);
    CHECK(same.mean_err == 0.0);
    CHECK(same.cov_err == 0.0);
    const MetricReport rep = compare_samples(gen, gl, ref, rl, 16, 1);
    CHECK(rep.sliced_w2 >= 0.0);
    CHECK(rep.mean_err >= 0.0);
    CHECK(rep.cov_err >= 0.0);
    REQUIRE(rep.per_class.size() == 2);
    for (const auto& c : rep.per_class) {
        CHECK(c.generated == 200);
        CHECK(c.mean_z_rms < 3.0);
    }
    for (auto& g : gen) g.values()[1] += 1.0;
    const MetricReport shifted = compare_samples(gen, gl, ref, rl, 16, 1);
    for (const auto& c : shifted.per_class) CHECK(c.mean_z_max > 5.0);
    const auto j = rep.to_json();
    CHECK(j.contains("sliced_w2"));
    CHECK(j["per_class"].size() == 2);
}

TEST_CASE("axis values") {
    RunConfig base;
    base.train.data.grid = {8, 8, 2};
    base.train.layout.cell_size = 2;
    CHECK(apply_axis(base, AblationAxis::CellSize, "4").train.layout.cell_size == 4);
    CHECK(apply_axis(base, AblationAxis::TimePolicy, "clean").train.policy == TimePolicy::Clean);
    CHECK(apply_axis(base, AblationAxis::Steps, "7").sample.steps == 7);
    const RunConfig sc = apply_axis(base, AblationAxis::EntityKind, "scale");
    CHECK(sc.train.layout.kind == EntityKind::Scale);
    CHECK(build_layout(sc.train.layout, sc.train.data.grid).scales() == std::vector<std::size_t>{1, 2, 4, 8});
    CHECK(apply_axis(base, AblationAxis::EntityKind, "subsample:4").train.layout.distance == 4);
    CHECK_THROWS(apply_axis(base, AblationAxis::CellSize, "3"));
    CHECK_THROWS(apply_axis(base, AblationAxis::CellSize, "x"));
    CHECK_THROWS(apply_axis(base, AblationAxis::TimePolicy, "sideways"));
    CHECK(parse_ablation_axis("entity_kind") == AblationAxis::EntityKind);
    CHECK(default_axis_values(AblationAxis::TimePolicy).size() == 4);
}

namespace {

RunConfig tiny_run() {
    RunConfig rc;
    rc.train.epochs = 2;
    rc.train.warmup_epochs = 0;
    rc.train.batch_size = 16;
    rc.train.peak_lr = 1e-3;
    rc.train.layout.kind = EntityKind::Cell;
    rc.train.layout.cell_size = 2;
    rc.train.data.grid = {4, 4, 2};
    rc.train.data.num_classes = 2;
    rc.train.data.size = 32;
    rc.train.model.depth = 1;
    rc.train.model.width = 16;
    rc.train.model.heads = 2;
    rc.train.model.token_dim = 2;
    rc.train.model.num_classes = 2;
    rc.train.model.max_tokens = 16;
    rc.train.model.mlp_ratio = 2;
    rc.train.model.time_freq_dim = 8;
    rc.sample.steps = 3;
    rc.eval.samples = 16;
    rc.eval.heldout_size = 16;
    rc.eval.projections = 8;
    return rc;
}

}  // namespace

TEST_CASE("singleton sweep equals plain train and evaluate") {
    const RunConfig rc = tiny_run();
    const AblationTable t = ablate(rc, AblationAxis::TimePolicy, {"random"}, {0});
    REQUIRE(t.rows.size() == 1);
    REQUIRE(t.rows[0].runs.size() == 1);
    REQUIRE(t.rows[0].runs[0].ok);
    const MetricReport plain = train_and_evaluate(apply_axis(rc, AblationAxis::TimePolicy, "random"));
    CHECK(t.rows[0].runs[0].report.sliced_w2 == plain.sliced_w2);
    CHECK(t.rows[0].runs[0].report.config_hash == plain.config_hash);
    CHECK(t.rows[0].rank == 1);
}

TEST_CASE("sweeps keep going after a failing value") {
    const RunConfig rc = tiny_run();
    const AblationTable t = ablate(rc, AblationAxis::CellSize, {"2", "3", "1"}, {0, 1});
    REQUIRE(t.rows.size() == 3);
    CHECK(t.rows[0].runs[0].ok);
    CHECK_FALSE(t.rows[1].runs[0].ok);
    CHECK_FALSE(t.rows[1].runs[0].error.empty());
    CHECK(t.rows[2].runs[1].ok);
    CHECK(t.rows[1].rank == 3);
    const std::string text = t.to_text();
    CHECK(text.find("failed") != std::string::npos);
    // rows are reproducible per (config, seed)
    const AblationTable again = ablate(rc, AblationAxis::CellSize, {"2"}, {1});
    CHECK(again.rows[0].runs[0].report.sliced_w2 == t.rows[0].runs[1].report.sliced_w2);
}

TEST_CASE("cell size sweep on 8x8 grids") {
    RunConfig rc = tiny_run();
    rc.train.epochs = 1;
    rc.train.data.grid = {8, 8, 1};
    rc.train.model.token_dim = 1;
    rc.train.model.max_tokens = 64;
    const AblationTable t = ablate(rc, AblationAxis::CellSize, {"1", "2", "4"}, {0});
    REQUIRE(t.rows.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(t.rows[i].value == std::to_string(1u << i));
        CHECK(t.rows[i].runs[0].ok);
        CHECK(std::isfinite(t.rows[i].mean_sliced_w2));
    }
    std::vector<std::size_t> ranks;
    for (const auto& r : t.rows) ranks.push_back(r.rank);
    std::sort(ranks.begin(), ranks.end());
    CHECK(ranks == std::vector<std::size_t>{1, 2, 3});
}
