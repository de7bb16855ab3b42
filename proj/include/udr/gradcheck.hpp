#pragma once

#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "udr/rng.hpp"
#include "udr/tensor.hpp"

namespace udr {

// Central finite-difference verification of reverse-mode gradients.
// Always run in double: float FD noise would drown the signal long
// before it says anything about the graph.
struct GradCheckResult {
    double max_rel_err = 0.0;
    long worst_input = -1;
    long worst_elem = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

namespace detail {

// Probes the listed elements of each input with central differences. The
// lists decide coverage; everything else is shared between the full and
// sampled entry points.
inline GradCheckResult fd_probe(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& loss_fn,
    std::vector<Tensor<double>>& inputs, double eps,
    const std::vector<std::vector<long>>& probe_elems) {
    for (auto& in : inputs) {
        in.set_requires_grad(true);
        in.zero_grad();
    }
    Tensor<double> loss = loss_fn(inputs);
    loss.backward();

    GradCheckResult res;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& in = inputs[k];
        if (!in.has_grad())
            throw std::runtime_error("check_gradients: input " + std::to_string(k) +
                                     " received no gradient");
        std::vector<double> analytic(in.grad().begin(), in.grad().end());
        NoGradGuard ng; // FD probes need values only
        for (const long i : probe_elems[k]) {
            const double saved = in.data()[i];
            in.data()[i] = saved + eps;
            const double lp = loss_fn(inputs).data()[0];
            in.data()[i] = saved - eps;
            const double lm = loss_fn(inputs).data()[0];
            in.data()[i] = saved;
            const double num = (lp - lm) / (2.0 * eps);
            const double ana = analytic[static_cast<std::size_t>(i)];
            const double denom = std::max({1.0, std::abs(ana), std::abs(num)});
            const double rel = std::abs(ana - num) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_input = static_cast<long>(k);
                res.worst_elem = i;
                res.analytic = ana;
                res.numeric = num;
            }
        }
    }
    return res;
}

} // namespace detail

// `loss_fn` maps the current input values to a scalar tensor. Inputs must
// be leaves with requires_grad set. Relative error uses a unit floor so
// near-zero gradients are compared absolutely.
inline GradCheckResult check_gradients(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& loss_fn,
    std::vector<Tensor<double>>& inputs, double eps = 1e-5) {
    std::vector<std::vector<long>> elems(inputs.size());
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        elems[k].resize(static_cast<std::size_t>(inputs[k].numel()));
        for (long i = 0; i < inputs[k].numel(); ++i) elems[k][static_cast<std::size_t>(i)] = i;
    }
    return detail::fd_probe(loss_fn, inputs, eps, elems);
}

// Same check but probing at most `per_tensor` distinct random elements of
// each input, for graphs too large to sweep exhaustively.
inline GradCheckResult check_gradients_sampled(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& loss_fn,
    std::vector<Tensor<double>>& inputs, long per_tensor, Rng& rng, double eps = 1e-5) {
    if (per_tensor < 1) throw std::invalid_argument("check_gradients_sampled: per_tensor >= 1");
    std::vector<std::vector<long>> elems(inputs.size());
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const long n = inputs[k].numel();
        if (n <= per_tensor) {
            elems[k].resize(static_cast<std::size_t>(n));
            for (long i = 0; i < n; ++i) elems[k][static_cast<std::size_t>(i)] = i;
        } else {
            std::set<long> picked;
            while (static_cast<long>(picked.size()) < per_tensor)
                picked.insert(rng.uniform_int(0, n - 1));
            elems[k].assign(picked.begin(), picked.end());
        }
    }
    return detail::fd_probe(loss_fn, inputs, eps, elems);
}

} // namespace udr
