#include "anchorkit/schedule.hpp"

#include <cmath>
#include <string>

namespace anchorkit {

NoiseSchedule make_linear_schedule(int num_steps, double beta_start, double beta_end) {
    if (num_steps < 2)
        throw config_error("make_linear_schedule: num_steps must be >= 2, got " +
                           std::to_string(num_steps));
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw config_error("make_linear_schedule: need 0 < beta_start <= beta_end < 1, got [" +
                           std::to_string(beta_start) + ", " + std::to_string(beta_end) + "]");

    NoiseSchedule s;
    s.num_steps = num_steps;
    s.betas.resize(num_steps);
    s.alphas.resize(num_steps);
    s.alpha_bars.resize(num_steps);

    double span = beta_end - beta_start;
    double prod = 1.0;
    for (int t = 0; t < num_steps; ++t) {
        double beta = beta_start + span * static_cast<double>(t) / (num_steps - 1);
        s.betas[t] = beta;
        s.alphas[t] = 1.0 - beta;
        prod *= s.alphas[t];
        s.alpha_bars[t] = prod;
        if (!(prod > 0.0))
            throw config_error("make_linear_schedule: alpha_bar underflowed to 0 at t=" +
                               std::to_string(t));
    }
    return s;
}

namespace {

void check_step_inputs(const LatentGrid& x_t, const LatentGrid& eps_hat,
                       const char* where) {
    require_same_shape(x_t, eps_hat, where);
}

// Shared x0 estimate at noise level abar_t.
inline double x0_hat(double x, double eps, double sqrt_abar, double sqrt_one_minus) {
    return (x - sqrt_one_minus * eps) / sqrt_abar;
}

}  // namespace

LatentGrid ddim_step(const LatentGrid& x_t, const LatentGrid& eps_hat, int t,
                     const NoiseSchedule& schedule) {
    check_step_inputs(x_t, eps_hat, "ddim_step");
    if (t < 1 || t >= schedule.num_steps)
        throw contract_error("ddim_step: t must be in [1, num_steps-1], got " +
                             std::to_string(t));

    double abar_t = schedule.alpha_bars[t];
    double abar_prev = schedule.alpha_bars[t - 1];
    double sa_t = std::sqrt(abar_t);
    double so_t = std::sqrt(1.0 - abar_t);
    double sa_p = std::sqrt(abar_prev);
    double so_p = std::sqrt(1.0 - abar_prev);

    LatentGrid out(x_t.channels, x_t.height, x_t.width);
    for (std::size_t i = 0; i < x_t.data.size(); ++i) {
        double x0 = x0_hat(x_t.data[i], eps_hat.data[i], sa_t, so_t);
        out.data[i] = sa_p * x0 + so_p * eps_hat.data[i];
    }
    return out;
}

LatentGrid ddim_invert_step(const LatentGrid& x_t, const LatentGrid& eps_hat, int t,
                            const NoiseSchedule& schedule) {
    check_step_inputs(x_t, eps_hat, "ddim_invert_step");
    if (t < 0 || t > schedule.num_steps - 2)
        throw contract_error("ddim_invert_step: t must be in [0, num_steps-2], got " +
                             std::to_string(t));

    double abar_t = schedule.alpha_bars[t];
    double abar_next = schedule.alpha_bars[t + 1];
    double sa_t = std::sqrt(abar_t);
    double so_t = std::sqrt(1.0 - abar_t);
    double sa_n = std::sqrt(abar_next);
    double so_n = std::sqrt(1.0 - abar_next);

    LatentGrid out(x_t.channels, x_t.height, x_t.width);
    for (std::size_t i = 0; i < x_t.data.size(); ++i) {
        double x0 = x0_hat(x_t.data[i], eps_hat.data[i], sa_t, so_t);
        out.data[i] = sa_n * x0 + so_n * eps_hat.data[i];
    }
    return out;
}

}  // namespace anchorkit
