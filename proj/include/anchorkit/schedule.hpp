#ifndef ANCHORKIT_SCHEDULE_HPP
#define ANCHORKIT_SCHEDULE_HPP

#include <vector>

#include "anchorkit/tensor.hpp"

namespace anchorkit {

// Diffusion noise schedule. t = 0 is the clean (data) end; sampling runs
// t = num_steps-1 -> 0 and inversion runs the mirror direction.
struct NoiseSchedule {
    int num_steps = 0;
    std::vector<double> betas;       // beta_t in (0,1)
    std::vector<double> alphas;      // 1 - beta_t
    std::vector<double> alpha_bars;  // prod_{s<=t} alpha_s, strictly decreasing
};

// Linear beta ramp inclusive of both endpoints.
NoiseSchedule make_linear_schedule(int num_steps, double beta_start, double beta_end);

// Deterministic DDIM update x_t -> x_{t-1} (eta = 0 everywhere):
//   x0_hat  = (x_t - sqrt(1-abar_t) * eps) / sqrt(abar_t)
//   x_{t-1} = sqrt(abar_{t-1}) * x0_hat + sqrt(1-abar_{t-1}) * eps
LatentGrid ddim_step(const LatentGrid& x_t, const LatentGrid& eps_hat, int t,
                     const NoiseSchedule& schedule);

// Mirror recursion x_t -> x_{t+1} used for inversion; same x0_hat estimate.
LatentGrid ddim_invert_step(const LatentGrid& x_t, const LatentGrid& eps_hat, int t,
                            const NoiseSchedule& schedule);

}  // namespace anchorkit

#endif
