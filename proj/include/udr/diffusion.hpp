#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "udr/rng.hpp"
#include "udr/tensor.hpp"

// Predict-x0 conditional diffusion. Images live in [-1,1] inside this
// module; callers hand in [0,1] images only at the sample() boundary.

namespace udr {

struct DiffusionSchedule {
    long t_max = 0;
    std::vector<double> alpha;     // alpha[0] = 1, alpha[t] = 1 - beta_t
    std::vector<double> alpha_bar; // running product of alpha

    double sqrt_ab(long t) const { return std::sqrt(alpha_bar[static_cast<std::size_t>(t)]); }
    double sqrt_one_minus_ab(long t) const {
        return std::sqrt(1.0 - alpha_bar[static_cast<std::size_t>(t)]);
    }
};

inline DiffusionSchedule make_schedule(long t_max = 100, double beta_start = 1e-4,
                                       double beta_end = 0.02) {
    if (t_max < 1) throw std::invalid_argument("make_schedule: t_max must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1, got " +
                                    std::to_string(beta_start) + "/" + std::to_string(beta_end));
    DiffusionSchedule s;
    s.t_max = t_max;
    s.alpha.resize(static_cast<std::size_t>(t_max) + 1);
    s.alpha_bar.resize(static_cast<std::size_t>(t_max) + 1);
    s.alpha[0] = 1.0;
    s.alpha_bar[0] = 1.0;
    for (long t = 1; t <= t_max; ++t) {
        const double frac = t_max > 1 ? static_cast<double>(t - 1) / static_cast<double>(t_max - 1)
                                      : 0.0;
        const double beta = beta_start + (beta_end - beta_start) * frac;
        s.alpha[static_cast<std::size_t>(t)] = 1.0 - beta;
        s.alpha_bar[static_cast<std::size_t>(t)] =
            s.alpha_bar[static_cast<std::size_t>(t - 1)] * (1.0 - beta);
    }
    return s;
}

namespace detail {
inline void check_t(long t, const DiffusionSchedule& s, const char* who) {
    if (t < 0 || t > s.t_max)
        throw std::invalid_argument(std::string(who) + ": t = " + std::to_string(t) +
                                    " outside [0," + std::to_string(s.t_max) + "]");
}
} // namespace detail

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <class T>
Tensor<T> forward_noise(Tensor<T> x0, long t, Tensor<T> eps, const DiffusionSchedule& sched) {
    detail::check_t(t, sched, "forward_noise");
    if (x0.shape() != eps.shape())
        throw std::invalid_argument("forward_noise: x0 " + shape_str(x0.shape()) + " vs eps " +
                                    shape_str(eps.shape()));
    return add(scale(x0, static_cast<T>(sched.sqrt_ab(t))),
               scale(eps, static_cast<T>(sched.sqrt_one_minus_ab(t))));
}

// Deterministic jump from t to any earlier t_prev given a prediction of the
// clean image: keep the normalized residual noise direction, rescale both
// terms with the target step's coefficients.
template <class T>
Tensor<T> reverse_step(Tensor<T> x_t, Tensor<T> x0_hat, long t, long t_prev,
                       const DiffusionSchedule& sched) {
    detail::check_t(t, sched, "reverse_step");
    if (!(t_prev >= 0 && t_prev < t))
        throw std::invalid_argument("reverse_step: need 0 <= t_prev < t, got t_prev = " +
                                    std::to_string(t_prev) + ", t = " + std::to_string(t));
    if (x_t.shape() != x0_hat.shape())
        throw std::invalid_argument("reverse_step: x_t " + shape_str(x_t.shape()) + " vs x0_hat " +
                                    shape_str(x0_hat.shape()));
    const double ab_t = sched.alpha_bar[static_cast<std::size_t>(t)];
    if (ab_t >= 1.0)
        throw std::runtime_error("reverse_step: alpha_bar at t = " + std::to_string(t) +
                                 " is 1, residual direction undefined");
    // x_prev = c * x_t + (a_prev - c * a_t) * x0_hat with c the ratio of
    // noise scales; at t_prev = 0 this collapses to exactly x0_hat.
    const double c = sched.sqrt_one_minus_ab(t_prev) / sched.sqrt_one_minus_ab(t);
    const double k = sched.sqrt_ab(t_prev) - c * sched.sqrt_ab(t);
    return add(scale(x_t, static_cast<T>(c)), scale(x0_hat, static_cast<T>(k)));
}

// Evenly strided descent from t_max to 0, inclusive on both ends.
inline std::vector<long> timestep_ladder(long t_max, long steps) {
    if (steps < 1) throw std::invalid_argument("timestep_ladder: steps must be >= 1");
    if (steps > t_max)
        throw std::invalid_argument("timestep_ladder: steps = " + std::to_string(steps) +
                                    " exceeds t_max = " + std::to_string(t_max));
    std::vector<long> ts(static_cast<std::size_t>(steps) + 1);
    for (long i = 0; i <= steps; ++i)
        ts[static_cast<std::size_t>(i)] =
            std::lround(static_cast<double>(t_max) * static_cast<double>(steps - i) /
                        static_cast<double>(steps));
    return ts;
}

// Full restoration pass. x_d01 is a [0,1] image; the denoiser is called as
// denoiser(x_t, x_d, task, prior_pool, t) with [-1,1] image tensors and must
// return the predicted clean image in the same convention.
template <class T, class F>
Tensor<T> sample(const Tensor<T>& x_d01, const Tensor<T>& task, const Tensor<T>& prior_pool,
                 long steps, F&& denoiser, const DiffusionSchedule& sched, std::uint64_t seed) {
    NoGradGuard ng;
    const auto ts = timestep_ladder(sched.t_max, steps);
    Tensor<T> x_d = affine(x_d01.detach(), T(2), T(-1));
    Rng rng(seed);
    Tensor<T> x_t = Tensor<T>::randn(x_d01.shape(), rng);
    Tensor<T> x0_hat;
    for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
        const long t = ts[i], t_prev = ts[i + 1];
        x0_hat = clamp(denoiser(x_t, x_d, task, prior_pool, t), T(-1), T(1));
        x_t = reverse_step(x_t, x0_hat, t, t_prev, sched);
    }
    return affine(x0_hat, T(0.5), T(0.5));
}

} // namespace udr
