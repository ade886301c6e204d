#include "xar/selftest.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "xar/checkpoint.hpp"
#include "xar/config.hpp"
#include "xar/eval.hpp"
#include "xar/sampling.hpp"
#include "xar/training.hpp"

namespace xar {

namespace {

struct Failure {
    std::string what;
};

void expect(bool cond, const std::string& what) {
    if (!cond) {
        throw Failure{what};
    }
}

LatentGrid random_grid(GridShape shape, Rng& rng) {
    LatentGrid g(shape);
    rng.fill_normal(g.values());
    return g;
}

DenoiserConfig tiny_model(std::size_t token_dim, std::size_t classes) {
    DenoiserConfig c;
    c.depth = 2;
    c.width = 16;
    c.heads = 2;
    c.token_dim = token_dim;
    c.max_tokens = 64;
    c.num_classes = classes;
    c.mlp_ratio = 2;
    c.time_freq_dim = 8;
    return c;
}

// Gives the zero-initialized output projection nonzero weights.
void perturb_params(DenoiserModel& m, std::uint64_t seed) {
    Rng rng(seed);
    for (double& v : m.params().values()) {
        v += 0.05 * rng.normal();
    }
}

class TargetField : public EntityVelocityField {
public:
    TargetField(const EntitySequence& target) : target_(target) {}
    void reset(std::size_t) override {}
    Matrix velocity(std::size_t entity, const Matrix& f, double t) override {
        const Matrix x = target_.entity(entity);
        Matrix v(f.rows, f.cols);
        for (std::size_t i = 0; i < f.size(); ++i) {
            v.data[i] = (f.data[i] - x.data[i]) / t;
        }
        return v;
    }
    void commit(std::size_t, const Matrix&) override {}

private:
    const EntitySequence& target_;
};

void check_roundtrip() {
    Rng rng(1);
    for (std::size_t h : {4, 8}) {
        for (std::size_t c : {1, 4}) {
            const GridShape shape{h, h, c};
            const LatentGrid x = random_grid(shape, rng);
            for (EntityKind kind : {EntityKind::Token, EntityKind::Cell, EntityKind::Subsample, EntityKind::Image}) {
                LayoutParam p;
                if (kind == EntityKind::Cell || kind == EntityKind::Subsample) {
                    p = std::size_t{2};
                }
                const EntityLayout layout = build_layout(kind, shape, p);
                expect(entities_to_latent(latent_to_entities(x, layout)) == x,
                       "round trip " + std::string(to_string(kind)));
            }
            const EntityLayout scale = build_layout(EntityKind::Scale, shape, std::size_t{3});
            expect(entities_to_latent(latent_to_entities(x, scale)) == x, "scale final entity");
        }
    }
}

void check_ordering() {
    LatentGrid g(GridShape{4, 4, 1});
    for (std::size_t i = 0; i < 16; ++i) {
        g.values()[i] = static_cast<double>(i);
    }
    const std::vector<double> cell{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15};
    const std::vector<double> sub{0, 2, 8, 10, 1, 3, 9, 11, 4, 6, 12, 14, 5, 7, 13, 15};
    expect(latent_to_entities(g, build_layout(EntityKind::Cell, g.shape(), std::size_t{2})).tokens.data == cell,
           "cell order");
    expect(latent_to_entities(g, build_layout(EntityKind::Subsample, g.shape(), std::size_t{2})).tokens.data == sub,
           "subsample order");
}

void check_flow() {
    Rng rng(2);
    const LatentGrid x = random_grid(GridShape{4, 4, 2}, rng);
    const EntityLayout layout = build_layout(EntityKind::Cell, x.shape(), std::size_t{2});
    const EntitySequence seq = latent_to_entities(x, layout);
    const Matrix eps = draw_noise(seq.tokens.rows, seq.tokens.cols, rng);
    const std::size_t n = layout.entity_count();
    expect(interpolate(seq, eps, TimeVector(n, 0.0)).tokens == seq.tokens, "t=0 endpoint");
    expect(interpolate(seq, eps, TimeVector(n, 1.0)).tokens == eps, "t=1 endpoint");
    const EntitySequence v = velocity_target(seq, eps);
    const double h = 1e-6;
    const Matrix fp = interpolate(seq, eps, TimeVector(n, 0.4 + h)).tokens;
    const Matrix fm = interpolate(seq, eps, TimeVector(n, 0.4 - h)).tokens;
    double err = 0.0;
    for (std::size_t i = 0; i < fp.size(); ++i) {
        err = std::max(err, std::abs((fp.data[i] - fm.data[i]) / (2 * h) - v.tokens.data[i]));
    }
    expect(err < 1e-8, "interpolant derivative");
    const Matrix f1 = interpolate(seq, eps, TimeVector(n, 1.0)).tokens;
    expect(max_abs_diff(euler_ode_step(f1, v.tokens, 1.0), seq.tokens) <= 1e-12, "one Euler step");
}

void check_mask() {
    const EntityLayout layout = build_layout(EntityKind::Cell, GridShape{4, 4, 1}, std::size_t{2});
    const AttentionMask m = build_block_causal_mask(layout.spans());
    expect(m.count_true() == 4 * (4 + 8 + 12 + 16), "block causal mask size");
    for (std::size_t q = 0; q < 16; ++q) {
        for (std::size_t k = 0; k < 16; ++k) {
            expect(m(q, k) == (layout.entity_of_token(k) <= layout.entity_of_token(q)), "mask entry");
        }
    }
}

void check_gradients() {
    DenoiserConfig cfg = tiny_model(2, 3);
    cfg.depth = 1;
    cfg.width = 8;
    DenoiserModel model(cfg, 5);
    perturb_params(model, 6);
    const EntityLayout layout = build_layout(EntityKind::Cell, GridShape{4, 4, 2}, std::size_t{2});
    Rng drng(7);
    const EntitySequence x = latent_to_entities(random_grid(layout.grid(), drng), layout);
    for (TimePolicy policy : {TimePolicy::Random, TimePolicy::Increasing}) {
        Rng r0(11);
        ncl_loss(model, x, 1, policy, r0, true);
        const std::vector<double> analytic = model.params().grads();
        std::vector<double>& theta = model.params().values();
        Rng pick(3);
        double worst = 0.0;
        for (int trial = 0; trial < 60; ++trial) {
            const std::size_t i = pick.below(theta.size());
            const double keep = theta[i];
            const double h = 1e-4;
            theta[i] = keep + h;
            Rng rp(11);
            const double lp = ncl_loss(model, x, 1, policy, rp, true).total;
            theta[i] = keep - h;
            Rng rm(11);
            const double lm = ncl_loss(model, x, 1, policy, rm, true).total;
            theta[i] = keep;
            const double numeric = (lp - lm) / (2 * h);
            const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
            worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
        }
        expect(worst <= 1e-3, "gradient relative error " + std::to_string(worst));
    }
}

void check_causality() {
    DenoiserModel model(tiny_model(2, 3), 8);
    perturb_params(model, 9);
    const EntityLayout layout = build_layout(EntityKind::Cell, GridShape{4, 4, 2}, std::size_t{2});
    const AttentionMask mask = build_block_causal_mask(layout.spans());
    Rng rng(10);
    EntitySequence x = latent_to_entities(random_grid(layout.grid(), rng), layout);
    TimeVector t{0.1, 0.5, 0.7, 0.9};
    Rng unused(0);
    const EntitySequence base = forward(model, x, t, 2, mask, false, unused);
    for (std::size_t j = 1; j < layout.entity_count(); ++j) {
        EntitySequence y = x;
        TimeVector tj = t;
        const TokenSpan s = layout.spans()[j];
        for (std::size_t r = s.offset; r < s.offset + s.count; ++r) {
            y.tokens(r, 0) += 1.0;
        }
        tj[j] = 0.05;
        const EntitySequence out = forward(model, y, tj, 2, mask, false, unused);
        for (std::size_t r = 0; r < s.offset; ++r) {
            for (std::size_t ch = 0; ch < 2; ++ch) {
                expect(out.tokens(r, ch) == base.tokens(r, ch), "entity before perturbed one changed");
            }
        }
    }
}

void check_sampling() {
    DenoiserModel model(tiny_model(2, 3), 12);
    perturb_params(model, 13);
    const EntityLayout layout = build_layout(EntityKind::Cell, GridShape{4, 4, 2}, std::size_t{2});
    SampleConfig cfg;
    cfg.steps = 4;
    cfg.mode = SolverMode::SDE;
    cfg.guidance = 1.5;
    cfg.label = 1;
    Rng a(14);
    const LatentGrid cached = generate(model, layout, cfg, a);
    cfg.prefix_cache = false;
    Rng b(14);
    expect(generate(model, layout, cfg, b) == cached, "prefix cache changes samples");

    cfg.prefix_cache = true;
    cfg.churn = 0.0;
    Rng c(15);
    const LatentGrid sde0 = generate(model, layout, cfg, c);
    cfg.mode = SolverMode::ODE;
    Rng d(15);
    expect(generate(model, layout, cfg, d) == sde0, "churn 0 differs from ODE");

    Rng e(16);
    const auto batch = batch_generate(model, layout, cfg, {0, 1, 2}, e, 2);
    Rng f(16);
    const std::uint64_t base = f.next_u64();
    for (std::size_t i = 0; i < 3; ++i) {
        SampleConfig one = cfg;
        one.label = static_cast<int>(i);
        Rng s = Rng::derive(base, i);
        expect(generate(model, layout, one, s) == batch[i], "batch sample differs from single");
    }
}

void check_oracle_sampler() {
    Rng rng(17);
    const LatentGrid target = random_grid(GridShape{4, 4, 2}, rng);
    for (EntityKind kind : {EntityKind::Cell, EntityKind::Token, EntityKind::Image}) {
        const EntityLayout layout =
            build_layout(kind, target.shape(), kind == EntityKind::Cell ? LayoutParam{std::size_t{2}} : LayoutParam{});
        const EntitySequence seq = latent_to_entities(target, layout);
        for (int steps : {1, 50}) {
            TargetField field(seq);
            std::vector<Rng> streams{Rng(18)};
            const Matrix out = generate_tokens(field, layout, SolverOptions{steps, SolverMode::ODE, 1.0}, streams);
            expect(max_abs_diff(out, seq.tokens) <= 1e-5, "oracle sampler");
        }
    }
}

void check_sliced_w2() {
    Rng rng(19);
    std::vector<LatentGrid> a;
    std::vector<LatentGrid> b;
    for (int i = 0; i < 40; ++i) {
        a.push_back(random_grid(GridShape{2, 2, 1}, rng));
        b.push_back(random_grid(GridShape{2, 2, 1}, rng));
    }
    Rng p1(20);
    expect(sliced_wasserstein(a, a, 16, p1) == 0.0, "sliced W2 of identical sets");
    Rng p2(21);
    Rng p3(21);
    expect(sliced_wasserstein(a, b, 16, p2) == sliced_wasserstein(b, a, 16, p3), "sliced W2 symmetry");
}

void check_training_determinism() {
    RunConfig rc;
    rc.train.epochs = 1;
    rc.train.warmup_epochs = 0;
    rc.train.batch_size = 16;
    rc.train.layout.kind = EntityKind::Cell;
    rc.train.layout.cell_size = 2;
    rc.train.data.size = 32;
    rc.train.data.num_classes = 4;
    rc.train.model = tiny_model(2, 4);
    const Dataset data = synth_dataset(rc.train.data);
    const TrainResult r1 = train(rc.train, data);
    const TrainResult r2 = train(rc.train, data);
    expect(r1.state.model.params().values() == r2.state.model.params().values(), "training not deterministic");
    expect(std::isfinite(r1.metrics.back().loss), "training loss not finite");
    const RunConfig back = parse_run_config(to_config_text(rc));
    expect(to_config_text(back) == to_config_text(rc), "config text round trip");
}

}  // namespace

bool run_selftest(std::ostream& out) {
    const std::vector<std::pair<std::string, std::function<void()>>> checks{
        {"entity round trip", check_roundtrip},
        {"entity ordering", check_ordering},
        {"flow identities", check_flow},
        {"block causal mask", check_mask},
        {"gradient check", check_gradients},
        {"block causality", check_causality},
        {"sampler determinism", check_sampling},
        {"oracle sampler", check_oracle_sampler},
        {"sliced wasserstein", check_sliced_w2},
        {"training determinism", check_training_determinism},
    };
    std::size_t failed = 0;
    for (const auto& [name, fn] : checks) {
        const auto t0 = std::chrono::steady_clock::now();
        std::string detail;
        bool ok = true;
        try {
            fn();
        } catch (const Failure& f) {
            ok = false;
            detail = f.what;
        } catch (const std::exception& e) {
            ok = false;
            detail = std::string("exception: ") + e.what();
        }
        const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out << (ok ? "ok   " : "FAIL ") << name;
        if (!ok) {
            out << ": " << detail;
        }
        out << " (" << std::fixed << sec << "s)\n";
        failed += ok ? 0 : 1;
    }
    out << (failed == 0 ? "all checks passed" : std::to_string(failed) + " check(s) failed") << "\n";
    return failed == 0;
}

}  // namespace xar
