#pragma once

#include <cstddef>
#include <functional>
#include <string_view>
#include <vector>

#include "xar/entities.hpp"
#include "xar/matrix.hpp"
#include "xar/rng.hpp"

namespace xar {

// Flow time convention: t = 0 is clean data, t = 1 is pure noise.
using TimeVector = std::vector<double>;

enum class TimePolicy { Clean, Increasing, Decreasing, Random };

std::string_view to_string(TimePolicy p);
TimePolicy parse_time_policy(std::string_view name);

enum class SolverMode { ODE, SDE };

std::string_view to_string(SolverMode m);
SolverMode parse_solver_mode(std::string_view name);

// Random: i.i.d. U[0,1]. Increasing/Decreasing: sorted i.i.d. uniforms. Clean: all zero.
TimeVector sample_times(TimePolicy policy, std::size_t n, Rng& rng);

// Standard-normal draw shaped like `tokens`.
Matrix draw_noise(std::size_t rows, std::size_t cols, Rng& rng);

// F_n = (1 - t_n) X_n + t_n eps_n, one time per entity broadcast over its tokens.
EntitySequence interpolate(const EntitySequence& x, const Matrix& eps, const TimeVector& times);

// V_n = eps_n - X_n.
EntitySequence velocity_target(const EntitySequence& x, const Matrix& eps);

// One Euler step of dF/dt = v towards t = 0: F - dt * v.
Matrix euler_ode_step(const Matrix& f, const Matrix& v_hat, double dt);

// Drift as euler_ode_step plus churn * sqrt(dt) * t * xi, xi ~ N(0, I).
Matrix euler_maruyama_step(const Matrix& f, const Matrix& v_hat, double t, double dt, double churn, Rng& rng);

using VelocityFn = std::function<Matrix(const Matrix& f, double t)>;
// Fills a matrix with standard normals; lets batched callers route draws to per-sample streams.
using NoiseFn = std::function<void(Matrix& out)>;

struct SolverOptions {
    int steps = 50;
    SolverMode mode = SolverMode::ODE;
    double churn = 1.0;
};

// Integrates from F = start at t = 1 down to t = 0 over `steps` uniform steps.
Matrix integrate_from(Matrix start, const VelocityFn& velocity, const SolverOptions& opts, const NoiseFn& noise);

// Draws the t = 1 starting point from `rng`, then integrates to a clean estimate.
Matrix integrate_entity(const VelocityFn& velocity, std::size_t rows, std::size_t cols, const SolverOptions& opts,
                        Rng& rng);

}  // namespace xar
