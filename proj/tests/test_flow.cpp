#include <cmath>

#include "doctest.h"
#include "xar/errors.hpp"
#include "xar/flow.hpp"

using namespace xar;

namespace {

EntitySequence single_entity(std::vector<double> values, std::size_t cols) {
    const std::size_t rows = values.size() / cols;
    EntitySequence s;
    s.layout = build_layout(EntityKind::Image, GridShape{1, rows, cols});
    s.tokens = Matrix(rows, cols);
    s.tokens.data = std::move(values);
    return s;
}

}  // namespace

TEST_CASE("sample_times policies") {
    Rng rng(1);
    const TimeVector clean = sample_times(TimePolicy::Clean, 4, rng);
    CHECK(clean == TimeVector{0, 0, 0, 0});
    for (int rep = 0; rep < 100; ++rep) {
        const TimeVector inc = sample_times(TimePolicy::Increasing, 4, rng);
        CHECK(std::is_sorted(inc.begin(), inc.end()));
        const TimeVector dec = sample_times(TimePolicy::Decreasing, 4, rng);
        CHECK(std::is_sorted(dec.rbegin(), dec.rend()));
        for (double t : sample_times(TimePolicy::Random, 4, rng)) {
            CHECK(t >= 0.0);
            CHECK(t <= 1.0);
        }
    }
    Rng a(5);
    Rng b(5);
    CHECK(sample_times(TimePolicy::Random, 7, a) == sample_times(TimePolicy::Random, 7, b));
}

TEST_CASE("random times have uniform moments") {
    Rng rng(2);
    const std::size_t n = 200000;
    const TimeVector t = sample_times(TimePolicy::Random, n, rng);
    double m = 0.0;
    double m2 = 0.0;
    for (double v : t) {
        m += v;
        m2 += v * v;
    }
    m /= n;
    m2 /= n;
    CHECK(std::abs(m - 0.5) < 4.0 * std::sqrt(1.0 / 12.0 / n));
    CHECK(std::abs(m2 - 1.0 / 3.0) < 0.005);
}

TEST_CASE("policy names round trip") {
    for (TimePolicy p : {TimePolicy::Clean, TimePolicy::Increasing, TimePolicy::Decreasing, TimePolicy::Random}) {
        CHECK(parse_time_policy(to_string(p)) == p);
    }
    CHECK(parse_solver_mode("ode") == SolverMode::ODE);
    CHECK(parse_solver_mode("sde") == SolverMode::SDE);
}

TEST_CASE("interpolate examples") {
    const EntitySequence x = single_entity({2.0, -1.0}, 2);
    Matrix eps(1, 2);
    CHECK(interpolate(x, eps, {0.5}).tokens.data == std::vector<double>{1.0, -0.5});
    eps.data = {0.3, 0.7};
    CHECK(interpolate(x, eps, {0.0}).tokens == x.tokens);
    CHECK(interpolate(x, eps, {1.0}).tokens == eps);
    CHECK_THROWS_AS(interpolate(x, eps, {1.5}), DomainError);
    CHECK_THROWS_AS(interpolate(x, eps, {-0.1}), DomainError);
}

TEST_CASE("interpolate is per entity and invertible") {
    Rng rng(3);
    LatentGrid g(GridShape{4, 4, 2});
    rng.fill_normal(g.values());
    const auto layout = build_layout(EntityKind::Cell, g.shape(), std::size_t{2});
    const EntitySequence x = latent_to_entities(g, layout);
    const Matrix eps = draw_noise(x.tokens.rows, x.tokens.cols, rng);
    const TimeVector t{0.1, 0.4, 0.0, 0.9};
    const EntitySequence f = interpolate(x, eps, t);
    for (std::size_t r = 0; r < f.tokens.rows; ++r) {
        const double tn = t[layout.entity_of_token(r)];
        for (std::size_t c = 0; c < 2; ++c) {
            CHECK(f.tokens(r, c) == doctest::Approx((1 - tn) * x.tokens(r, c) + tn * eps(r, c)).epsilon(1e-14));
            CHECK((f.tokens(r, c) - tn * eps(r, c)) / (1 - tn) == doctest::Approx(x.tokens(r, c)).epsilon(1e-12));
        }
    }
}

TEST_CASE("velocity target") {
    const EntitySequence x = single_entity({1.0, 2.0}, 2);
    Matrix eps(1, 2);
    CHECK(velocity_target(x, eps).tokens.data == std::vector<double>{-1.0, -2.0});
    CHECK(velocity_target(x, x.tokens).tokens.data == std::vector<double>{0.0, 0.0});
}

TEST_CASE("Euler steps") {
    const EntitySequence x = single_entity({1.0, -2.0, 0.5, 3.0}, 2);
    Rng rng(4);
    const Matrix eps = draw_noise(2, 2, rng);
    const Matrix v = velocity_target(x, eps).tokens;
    CHECK(max_abs_diff(euler_ode_step(eps, v, 1.0), x.tokens) <= 1e-12);
    CHECK(euler_ode_step(eps, Matrix(2, 2), 0.3) == eps);

    Rng r1(9);
    CHECK(euler_maruyama_step(eps, v, 0.7, 0.1, 0.0, r1) == euler_ode_step(eps, v, 0.1));
    // churn 0 draws nothing
    Rng r2(9);
    CHECK(r1.next_u64() == r2.next_u64());
    Rng r3(10);
    CHECK_FALSE(euler_maruyama_step(eps, v, 0.5, 0.1, 1.0, r3) == euler_ode_step(eps, v, 0.1));
    CHECK_THROWS_AS(euler_maruyama_step(eps, v, 0.05, 0.1, 1.0, r3), DomainError);
}

TEST_CASE("SDE step is unbiased") {
    Matrix f(1, 1, 0.4);
    Matrix v(1, 1, -0.2);
    const double t = 0.6;
    const double dt = 0.05;
    const double churn = 1.0;
    const double ode = euler_ode_step(f, v, dt).data[0];
    Rng rng(11);
    const int n = 20000;
    double mean = 0.0;
    for (int i = 0; i < n; ++i) {
        mean += euler_maruyama_step(f, v, t, dt, churn, rng).data[0];
    }
    mean /= n;
    const double sigma = churn * std::sqrt(dt) * t / std::sqrt(double(n));
    CHECK(std::abs(mean - ode) <= 3 * sigma);
}

TEST_CASE("integrate_entity with oracle velocity") {
    Rng data(12);
    Matrix target(3, 2);
    data.fill_normal(target.data);
    const VelocityFn oracle = [&](const Matrix& f, double t) {
        Matrix v(f.rows, f.cols);
        for (std::size_t i = 0; i < f.size(); ++i) v.data[i] = (f.data[i] - target.data[i]) / t;
        return v;
    };
    for (int steps : {1, 2, 7, 50}) {
        Rng rng(13);
        const Matrix out = integrate_entity(oracle, 3, 2, SolverOptions{steps, SolverMode::ODE, 1.0}, rng);
        if (steps == 1) {
            CHECK(max_abs_diff(out, target) <= 1e-15);
        }
        CHECK(max_abs_diff(out, target) <= 1e-5);
    }
    // SDE: noise enters with factor t and the oracle drift absorbs all of it except the last step's
    Rng rng(14);
    const int steps = 10;
    const Matrix sde = integrate_entity(oracle, 3, 2, SolverOptions{steps, SolverMode::SDE, 1.0}, rng);
    CHECK(max_abs_diff(sde, target) <= 6.0 * std::pow(1.0 / steps, 1.5));
    Rng bad(0);
    CHECK_THROWS_AS(integrate_entity(oracle, 3, 2, SolverOptions{0, SolverMode::ODE, 1.0}, bad), DomainError);
}

TEST_CASE("integration visits the uniform grid from 1 to 0") {
    std::vector<double> seen;
    const VelocityFn record = [&](const Matrix& f, double t) {
        seen.push_back(t);
        return Matrix(f.rows, f.cols);
    };
    Rng rng(0);
    integrate_entity(record, 1, 1, SolverOptions{4, SolverMode::ODE, 1.0}, rng);
    CHECK(seen == std::vector<double>{1.0, 0.75, 0.5, 0.25});
}
