#include "xar/flow.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "xar/errors.hpp"

namespace xar {

std::string_view to_string(TimePolicy p) {
    switch (p) {
        case TimePolicy::Clean: return "clean";
        case TimePolicy::Increasing: return "increasing";
        case TimePolicy::Decreasing: return "decreasing";
        case TimePolicy::Random: return "random";
    }
    return "?";
}

TimePolicy parse_time_policy(std::string_view name) {
    for (TimePolicy p : {TimePolicy::Clean, TimePolicy::Increasing, TimePolicy::Decreasing, TimePolicy::Random}) {
        if (to_string(p) == name) {
            return p;
        }
    }
    throw ConfigError("unknown time policy '" + std::string(name) + "'");
}

std::string_view to_string(SolverMode m) {
    return m == SolverMode::ODE ? "ode" : "sde";
}

SolverMode parse_solver_mode(std::string_view name) {
    if (name == "ode") {
        return SolverMode::ODE;
    }
    if (name == "sde") {
        return SolverMode::SDE;
    }
    throw ConfigError("unknown solver mode '" + std::string(name) + "'");
}

TimeVector sample_times(TimePolicy policy, std::size_t n, Rng& rng) {
    if (n == 0) {
        throw DomainError("sample_times: entity count must be positive");
    }
    TimeVector t(n, 0.0);
    if (policy == TimePolicy::Clean) {
        return t;
    }
    for (double& v : t) {
        v = rng.uniform();
    }
    if (policy == TimePolicy::Increasing) {
        std::sort(t.begin(), t.end());
    } else if (policy == TimePolicy::Decreasing) {
        std::sort(t.begin(), t.end(), std::greater<>());
    }
    return t;
}

Matrix draw_noise(std::size_t rows, std::size_t cols, Rng& rng) {
    Matrix m(rows, cols);
    rng.fill_normal(m.data);
    return m;
}

EntitySequence interpolate(const EntitySequence& x, const Matrix& eps, const TimeVector& times) {
    if (!x.tokens.same_shape(eps)) {
        throw DomainError("interpolate: noise shape does not match entities");
    }
    const auto& spans = x.layout.spans();
    if (times.size() != spans.size()) {
        throw DomainError("interpolate: need one time per entity");
    }
    EntitySequence out{Matrix(x.tokens.rows, x.tokens.cols), x.layout};
    for (std::size_t n = 0; n < spans.size(); ++n) {
        const double t = times[n];
        if (!(t >= 0.0 && t <= 1.0)) {
            throw DomainError("interpolate: time " + std::to_string(t) + " outside [0, 1]");
        }
        const std::size_t begin = spans[n].offset * x.tokens.cols;
        const std::size_t end = begin + spans[n].count * x.tokens.cols;
        for (std::size_t i = begin; i < end; ++i) {
            out.tokens.data[i] = (1.0 - t) * x.tokens.data[i] + t * eps.data[i];
        }
    }
    return out;
}

EntitySequence velocity_target(const EntitySequence& x, const Matrix& eps) {
    if (!x.tokens.same_shape(eps)) {
        throw DomainError("velocity_target: noise shape does not match entities");
    }
    EntitySequence out{Matrix(x.tokens.rows, x.tokens.cols), x.layout};
    for (std::size_t i = 0; i < eps.data.size(); ++i) {
        out.tokens.data[i] = eps.data[i] - x.tokens.data[i];
    }
    return out;
}

Matrix euler_ode_step(const Matrix& f, const Matrix& v_hat, double dt) {
    if (!f.same_shape(v_hat)) {
        throw DomainError("euler_ode_step: velocity shape mismatch");
    }
    if (!(dt > 0.0)) {
        throw DomainError("euler_ode_step: dt must be positive");
    }
    Matrix out(f.rows, f.cols);
    for (std::size_t i = 0; i < f.data.size(); ++i) {
        out.data[i] = f.data[i] - dt * v_hat.data[i];
    }
    return out;
}

namespace {

Matrix maruyama_with(const Matrix& f, const Matrix& v_hat, double t, double dt, double churn, const Matrix& xi) {
    Matrix out = euler_ode_step(f, v_hat, dt);
    if (churn == 0.0) {
        return out;
    }
    const double scale = churn * std::sqrt(dt) * t;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] += scale * xi.data[i];
    }
    return out;
}

void check_sde_args(double t, double dt, double churn) {
    if (!(dt > 0.0 && dt <= t && t <= 1.0)) {
        throw DomainError("euler_maruyama_step: need 0 < dt <= t <= 1");
    }
    if (!(churn >= 0.0)) {
        throw DomainError("euler_maruyama_step: churn must be non-negative");
    }
}

}  // namespace

Matrix euler_maruyama_step(const Matrix& f, const Matrix& v_hat, double t, double dt, double churn, Rng& rng) {
    check_sde_args(t, dt, churn);
    if (churn == 0.0) {
        return euler_ode_step(f, v_hat, dt);
    }
    const Matrix xi = draw_noise(f.rows, f.cols, rng);
    return maruyama_with(f, v_hat, t, dt, churn, xi);
}

Matrix integrate_from(Matrix start, const VelocityFn& velocity, const SolverOptions& opts, const NoiseFn& noise) {
    if (opts.steps < 1) {
        throw DomainError("integrate: steps must be >= 1");
    }
    const double dt = 1.0 / static_cast<double>(opts.steps);
    Matrix f = std::move(start);
    Matrix xi(f.rows, f.cols);
    for (int k = 0; k < opts.steps; ++k) {
        const double t = static_cast<double>(opts.steps - k) / static_cast<double>(opts.steps);
        const Matrix v = velocity(f, t);
        if (opts.mode == SolverMode::SDE && opts.churn != 0.0) {
            check_sde_args(t, dt, opts.churn);
            // No draws at churn = 0, so the stream advances exactly as in ODE mode.
            noise(xi);
            f = maruyama_with(f, v, t, dt, opts.churn, xi);
        } else {
            f = euler_ode_step(f, v, dt);
        }
    }
    return f;
}

Matrix integrate_entity(const VelocityFn& velocity, std::size_t rows, std::size_t cols, const SolverOptions& opts,
                        Rng& rng) {
    if (opts.steps < 1) {
        throw DomainError("integrate: steps must be >= 1");
    }
    Matrix start = draw_noise(rows, cols, rng);
    return integrate_from(std::move(start), velocity, opts, [&rng](Matrix& m) { rng.fill_normal(m.data); });
}

}  // namespace xar
