#include "doctest.h"
#include "xar/errors.hpp"
#include "xar/sampling.hpp"

using namespace xar;

namespace {

DenoiserConfig small_config() {
    DenoiserConfig c;
    c.depth = 2;
    c.width = 16;
    c.heads = 2;
    c.token_dim = 2;
    c.max_tokens = 64;
    c.num_classes = 3;
    c.mlp_ratio = 2;
    c.time_freq_dim = 8;
    return c;
}

DenoiserModel trained_looking_model(std::uint64_t seed) {
    DenoiserModel m(small_config(), seed);
    Rng rng(seed + 100);
    for (double& v : m.params().values()) v += 0.1 * rng.normal();
    return m;
}

// Straight-line velocity towards a fixed latent, entity by entity.
class OracleField : public EntityVelocityField {
public:
    explicit OracleField(EntitySequence target) : target_(std::move(target)) {}
    void reset(std::size_t) override {}
    Matrix velocity(std::size_t n, const Matrix& f, double t) override {
        const Matrix x = target_.entity(n);
        Matrix v(f.rows, f.cols);
        for (std::size_t i = 0; i < f.size(); ++i) v.data[i] = (f.data[i] - x.data[i % x.size()]) / t;
        return v;
    }
    void commit(std::size_t, const Matrix&) override {}

private:
    EntitySequence target_;
};

}  // namespace

TEST_CASE("oracle field reproduces the target latent") {
    Rng rng(1);
    LatentGrid target(GridShape{8, 8, 2});
    rng.fill_normal(target.values());
    const std::vector<EntityLayout> layouts{
        build_layout(EntityKind::Cell, target.shape(), std::size_t{2}),
        build_layout(EntityKind::Cell, target.shape(), std::size_t{4}),
        build_layout(EntityKind::Token, target.shape()),
        build_layout(EntityKind::Image, target.shape()),
        build_layout(EntityKind::Subsample, target.shape(), std::size_t{2}),
        build_layout(EntityKind::Scale, target.shape(), std::vector<std::size_t>{2, 4, 8}),
    };
    for (const auto& layout : layouts) {
        for (int steps : {1, 3, 50}) {
            OracleField field(latent_to_entities(target, layout));
            std::vector<Rng> streams{Rng(2), Rng(3)};
            const Matrix out = generate_tokens(field, layout, SolverOptions{steps, SolverMode::ODE, 1.0}, streams);
            const std::size_t T = layout.total_tokens();
            for (std::size_t b = 0; b < 2; ++b) {
                const LatentGrid g = entities_to_latent(EntitySequence{rows_slice(out, b * T, T), layout});
                double err = 0.0;
                for (std::size_t i = 0; i < g.values().size(); ++i)
                    err = std::max(err, std::abs(g.values()[i] - target.values()[i]));
                CHECK(err <= 1e-5);
            }
        }
    }
}

TEST_CASE("generation is deterministic per seed") {
    const DenoiserModel m = trained_looking_model(4);
    const auto layout = build_layout(EntityKind::Cell, {4, 4, 2}, std::size_t{2});
    SampleConfig cfg;
    cfg.steps = 5;
    cfg.mode = SolverMode::ODE;
    cfg.label = 1;
    Rng a(7);
    Rng b(7);
    CHECK(generate(m, layout, cfg, a) == generate(m, layout, cfg, b));
    Rng c(8);
    Rng d(7);
    CHECK(generate(m, layout, cfg, c) != generate(m, layout, cfg, d));
}

TEST_CASE("SDE with zero churn equals ODE") {
    const DenoiserModel m = trained_looking_model(5);
    const auto layout = build_layout(EntityKind::Subsample, {4, 4, 2}, std::size_t{2});
    SampleConfig cfg;
    cfg.steps = 6;
    cfg.mode = SolverMode::ODE;
    Rng a(9);
    const LatentGrid ode = generate(m, layout, cfg, a);
    cfg.mode = SolverMode::SDE;
    cfg.churn = 0.0;
    Rng b(9);
    CHECK(generate(m, layout, cfg, b) == ode);
    CHECK(a.state() == b.state());
    cfg.churn = 1.0;
    Rng c(9);
    CHECK(generate(m, layout, cfg, c) != ode);
}

TEST_CASE("prefix cache gives the same samples as re-encoding") {
    const DenoiserModel m = trained_looking_model(6);
    for (const auto& layout : {build_layout(EntityKind::Cell, {4, 4, 2}, std::size_t{2}),
                               build_layout(EntityKind::Scale, {4, 4, 2}, std::size_t{3}),
                               build_layout(EntityKind::Token, {2, 2, 2})}) {
        for (double w : {1.0, 2.0}) {
            SampleConfig cfg;
            cfg.steps = 4;
            cfg.guidance = w;
            cfg.mode = SolverMode::SDE;
            cfg.prefix_cache = true;
            Rng a(10);
            const auto cached = batch_generate(m, layout, cfg, {0, 1, kNullLabel, 2}, a);
            cfg.prefix_cache = false;
            Rng b(10);
            CHECK(batch_generate(m, layout, cfg, {0, 1, kNullLabel, 2}, b) == cached);
        }
    }
}

TEST_CASE("batch streams") {
    const DenoiserModel m = trained_looking_model(7);
    const auto layout = build_layout(EntityKind::Cell, {4, 4, 2}, std::size_t{2});
    SampleConfig cfg;
    cfg.steps = 3;
    cfg.label = 2;
    Rng a(11);
    const auto five = batch_generate(m, layout, cfg, 5, a);
    Rng probe(11);
    const std::uint64_t base = probe.next_u64();
    for (std::size_t i = 0; i < 5; ++i) {
        Rng s = Rng::derive(base, i);
        CHECK(generate(m, layout, cfg, s) == five[i]);
    }
    Rng b(11);
    CHECK(batch_generate(m, layout, cfg, 1, b)[0] == five[0]);
    Rng c(11);
    const std::vector<int> labels(5, 2);
    CHECK(batch_generate(m, layout, cfg, labels, c, 2) == five);
    Rng d(0);
    CHECK_THROWS_AS(batch_generate(m, layout, cfg, 0, d), DomainError);
}

TEST_CASE("entity n depends only on the first n noises") {
    const DenoiserModel m = trained_looking_model(8);
    const auto layout = build_layout(EntityKind::Cell, {4, 4, 2}, std::size_t{2});
    const SolverOptions opts{5, SolverMode::ODE, 1.0};
    Rng rng(12);
    std::vector<Matrix> noise;
    for (const auto& s : layout.spans()) noise.push_back(draw_noise(s.count, 2, rng));
    const NoiseFn unused = [](Matrix&) {};
    DenoiserField f1(m, layout, {1}, 1.5, true);
    const Matrix base = generate_tokens_from(f1, layout, opts, noise, unused);
    for (std::size_t n = 0; n < layout.entity_count(); ++n) {
        std::vector<Matrix> altered = noise;
        for (std::size_t j = n + 1; j < altered.size(); ++j) altered[j] = draw_noise(altered[j].rows, 2, rng);
        altered[n].data[0] += 0.5;
        DenoiserField f2(m, layout, {1}, 1.5, true);
        const Matrix out = generate_tokens_from(f2, layout, opts, altered, unused);
        const TokenSpan s = layout.spans()[n];
        CHECK(rows_slice(out, 0, s.offset) == rows_slice(base, 0, s.offset));
        CHECK(rows_slice(out, s.offset, s.count) != rows_slice(base, s.offset, s.count));
    }
}

TEST_CASE("single-entity layout is plain flow matching") {
    const DenoiserModel m = trained_looking_model(9);
    const auto layout = build_layout(EntityKind::Image, {4, 4, 2});
    SampleConfig cfg;
    cfg.steps = 4;
    cfg.mode = SolverMode::ODE;
    cfg.guidance = 1.0;
    cfg.label = 0;
    Rng a(13);
    const LatentGrid g = generate(m, layout, cfg, a);

    const SequenceGeometry geom = single_stream_geometry(layout, m.config().width);
    const VelocityFn v = [&](const Matrix& f, double t) {
        BatchInput in;
        in.batch = 1;
        in.tokens = f;
        in.times = {t};
        in.labels = {0};
        return forward_batch(m, geom, in, ForwardOptions{});
    };
    Rng b(13);
    const Matrix direct = integrate_entity(v, 16, 2, SolverOptions{4, SolverMode::ODE, 1.0}, b);
    CHECK(direct.data == g.values());
}

TEST_CASE("sample config validation") {
    SampleConfig c;
    c.steps = 0;
    CHECK_THROWS_AS(c.validate(), DomainError);
    c = SampleConfig{};
    c.guidance = -1.0;
    CHECK_THROWS_AS(c.validate(), DomainError);
    const DenoiserModel m = trained_looking_model(10);
    const auto big = build_layout(EntityKind::Token, {16, 16, 2});
    Rng rng(0);
    CHECK_THROWS_AS(generate(m, big, SampleConfig{}, rng), DomainError);
    const auto wrong_c = build_layout(EntityKind::Token, {2, 2, 3});
    CHECK_THROWS_AS(generate(m, wrong_c, SampleConfig{}, rng), DomainError);
}
