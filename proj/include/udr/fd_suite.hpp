#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "udr/cpb.hpp"
#include "udr/diffusion.hpp"
#include "udr/filters.hpp"
#include "udr/gradcheck.hpp"
#include "udr/losses.hpp"
#include "udr/network.hpp"
#include "udr/nn_ops.hpp"
#include "udr/param_store.hpp"
#include "udr/rng.hpp"
#include "udr/tasks.hpp"
#include "udr/tensor.hpp"

// Finite-difference audit: every differentiable operation plus the full
// denoiser, fusion, and coordinate-branch graphs, all in 64-bit mode.
// Small operator inputs are swept exhaustively; the big graphs probe a
// random handful of elements per tensor.

namespace udr {

struct FdCase {
    std::string name;
    double max_rel_err = 0;
    bool pass = false;
    std::string detail;
};

inline constexpr double kFdTolerance = 1e-4;
inline constexpr long kFdProbesPerTensor = 8;

namespace detail {

using FdInputs = std::vector<Tensor<double>>;
using FdLoss = std::function<Tensor<double>(const FdInputs&)>;

inline void run_fd_case(std::vector<FdCase>& out, const std::string& name, const FdLoss& loss,
                        FdInputs inputs, double tol) {
    FdCase c{name, 0, false, ""};
    try {
        const auto res = check_gradients(loss, inputs);
        c.max_rel_err = res.max_rel_err;
        c.pass = res.max_rel_err < tol;
        if (!c.pass)
            c.detail = "worst input " + std::to_string(res.worst_input) + " elem " +
                       std::to_string(res.worst_elem) + ": analytic " +
                       std::to_string(res.analytic) + " vs numeric " + std::to_string(res.numeric);
    } catch (const std::exception& e) {
        c.detail = e.what();
    }
    out.push_back(std::move(c));
}

inline void run_fd_case_sampled(std::vector<FdCase>& out, const std::string& name,
                                const FdLoss& loss, FdInputs inputs, Rng& rng, double tol) {
    FdCase c{name, 0, false, ""};
    try {
        const auto res = check_gradients_sampled(loss, inputs, kFdProbesPerTensor, rng);
        c.max_rel_err = res.max_rel_err;
        c.pass = res.max_rel_err < tol;
        if (!c.pass)
            c.detail = "worst input " + std::to_string(res.worst_input) + " elem " +
                       std::to_string(res.worst_elem) + ": analytic " +
                       std::to_string(res.analytic) + " vs numeric " + std::to_string(res.numeric);
    } catch (const std::exception& e) {
        c.detail = e.what();
    }
    out.push_back(std::move(c));
}

// Shifts every element away from zero so kinked ops (abs, L1) never see a
// finite-difference probe straddling the kink.
inline Tensor<double> off_zero(Tensor<double> x, double margin) {
    for (long i = 0; i < x.numel(); ++i)
        x.data()[i] += x.data()[i] >= 0 ? margin : -margin;
    return x;
}

} // namespace detail

inline std::vector<FdCase> finite_difference_suite(std::uint64_t seed,
                                                   double tol = kFdTolerance) {
    using detail::run_fd_case;
    using detail::run_fd_case_sampled;
    using T = double;
    std::vector<FdCase> out;
    Rng rng(Rng::mix(seed, 0x66647375)); // fd-suite stream

    // elementwise and shape ops
    {
        auto a = Tensor<T>::randn({2, 3, 4, 5}, rng);
        auto b = Tensor<T>::randn({2, 3, 4, 5}, rng);
        run_fd_case(
            out, "arithmetic",
            [](const detail::FdInputs& in) {
                return mean(mul(add(in[0], in[1]),
                                sub(affine(in[0], 1.5, 0.25), scale(in[1], 0.7))));
            },
            {a, b}, tol);
    }
    {
        auto a = detail::off_zero(Tensor<T>::randn({2, 3, 4, 5}, rng), 0.5);
        auto b = Tensor<T>::randn({2, 3, 4, 5}, rng);
        run_fd_case(
            out, "abs_silu_tanh_clamp",
            [](const detail::FdInputs& in) {
                return mean(add(abs_val(in[0]),
                                add(silu(in[1]), add(tanh_op(in[1]), clamp(in[1], -6.0, 6.0)))));
            },
            {a, b}, tol);
    }
    {
        auto a = Tensor<T>::randn({2, 3, 4, 5}, rng);
        auto b = Tensor<T>::randn({2, 3, 4, 5}, rng);
        run_fd_case(
            out, "reshape_concat_transpose",
            [](const detail::FdInputs& in) {
                const std::vector<Tensor<double>> parts = {reshape(in[0], {2, 60}),
                                                           reshape(in[1], {2, 60})};
                return add(mean(transpose_last2(concat(parts, 1))), sum(scale(in[0], 0.01)));
            },
            {a, b}, tol);
    }
    {
        auto a = Tensor<T>::randn({2, 3, 4}, rng);
        auto b = Tensor<T>::randn({2, 4, 5}, rng);
        run_fd_case(
            out, "bmm_softmax",
            [](const detail::FdInputs& in) {
                return mean(bmm(softmax_lastdim(in[0]), in[1]));
            },
            {a, b}, tol);
    }

    // structured ops
    {
        auto x = Tensor<T>::randn({2, 3, 6, 6}, rng);
        auto w = Tensor<T>::randn({4, 3, 3, 3}, rng);
        auto b = Tensor<T>::randn({4}, rng);
        run_fd_case(
            out, "conv2d",
            [](const detail::FdInputs& in) {
                return mean(conv2d(in[0], in[1], in[2], 1, 1, 1));
            },
            {x, w, b}, tol);
    }
    {
        auto x = Tensor<T>::randn({1, 2, 7, 7}, rng);
        auto w = Tensor<T>::randn({3, 2, 3, 3}, rng);
        run_fd_case(
            out, "conv2d_strided_dilated",
            [](const detail::FdInputs& in) { return mean(conv2d(in[0], in[1], {}, 2, 2, 2)); },
            {x, w}, tol);
    }
    {
        auto x = Tensor<T>::randn({3, 5}, rng);
        auto w = Tensor<T>::randn({4, 5}, rng);
        auto b = Tensor<T>::randn({4}, rng);
        run_fd_case(
            out, "linear",
            [](const detail::FdInputs& in) { return mean(linear(in[0], in[1], in[2])); },
            {x, w, b}, tol);
    }
    {
        auto x = Tensor<T>::randn({2, 3, 4, 4}, rng);
        auto bias = Tensor<T>::randn({2, 3}, rng);
        auto s = Tensor<T>::randn({2, 3}, rng);
        run_fd_case(
            out, "channel_bias_and_scale",
            [](const detail::FdInputs& in) {
                return mean(scale_channels(add_channel_bias(in[0], in[1]), in[2]));
            },
            {x, bias, s}, tol);
    }
    {
        auto x = Tensor<T>::randn({1, 2, 6, 10}, rng);
        run_fd_case(
            out, "pool_and_upsample",
            [](const detail::FdInputs& in) {
                return add(mean(upsample_nearest2x(adaptive_avg_pool(in[0], 3, 5))),
                           mean(global_avg_pool(in[0])));
            },
            {x}, tol);
    }
    {
        auto x = Tensor<T>::randn({1, 2, 5, 5}, rng);
        auto grid = Tensor<T>::rand_uniform({1, 2, 4, 4}, rng, -0.8, 0.8);
        run_fd_case(
            out, "grid_sample",
            [](const detail::FdInputs& in) {
                return mean(bilinear_grid_sample(in[0], in[1]));
            },
            {x, grid}, tol);
    }
    {
        auto x = Tensor<T>::randn({1, 3, 5, 7}, rng);
        run_fd_case(
            out, "bilinear_resize",
            [](const detail::FdInputs& in) { return mean(bilinear_resize(in[0], 8, 6)); },
            {x}, tol);
    }
    {
        auto x = Tensor<T>::randn({1, 2, 6, 7}, rng);
        run_fd_case(
            out, "reflect_pad_and_crop",
            [](const detail::FdInputs& in) {
                return mean(crop2d(reflect_pad2d(in[0], 2, 3), 1, 2, 6, 8));
            },
            {x}, tol);
    }
    {
        auto x = Tensor<T>::randn({1, 4, 3, 3}, rng);
        auto wq = Tensor<T>::randn({4, 4}, rng), bq = Tensor<T>::randn({4}, rng);
        auto wk = Tensor<T>::randn({4, 4}, rng), bk = Tensor<T>::randn({4}, rng);
        auto wv = Tensor<T>::randn({4, 4}, rng), bv = Tensor<T>::randn({4}, rng);
        auto wo = Tensor<T>::randn({4, 4}, rng), bo = Tensor<T>::randn({4}, rng);
        run_fd_case(
            out, "self_attention",
            [](const detail::FdInputs& in) {
                return mean(self_attention(in[0], in[1], in[2], in[3], in[4], in[5], in[6],
                                           in[7], in[8]));
            },
            {x, wq, bq, wk, bk, wv, bv, wo, bo}, tol);
    }
    {
        auto x = Tensor<T>::randn({1, 3, 8, 8}, rng);
        run_fd_case(
            out, "gaussian_blur",
            [](const detail::FdInputs& in) { return mean(gaussian_blur(in[0], 1.2)); },
            {x}, tol);
    }

    // losses; gt sits 3 sigma away so the L1 kink is never probed
    {
        auto pred = Tensor<T>::randn({1, 3, 8, 8}, rng);
        auto gt = affine(Tensor<T>::randn({1, 3, 8, 8}, rng), 1.0, 3.0);
        run_fd_case(
            out, "task_loss_bands",
            [](const detail::FdInputs& in) {
                return add(task_loss(in[0], in[1], "deblur"),
                           task_loss(in[0], in[1], "deshadow"));
            },
            {pred, gt}, tol);
    }
    {
        auto bm = Tensor<T>::randn({1, 2, 4, 4}, rng);
        auto bm_gt = affine(Tensor<T>::randn({1, 2, 4, 4}, rng), 1.0, 3.0);
        run_fd_case(
            out, "coordinate_loss",
            [](const detail::FdInputs& in) { return cpb_loss(in[0], in[1]); },
            {bm, bm_gt}, tol);
    }

    // noise schedule algebra stays differentiable end to end
    {
        const auto sched = make_schedule(50, 1e-4, 0.02);
        auto x0 = Tensor<T>::randn({1, 3, 4, 4}, rng);
        auto x0_hat = Tensor<T>::randn({1, 3, 4, 4}, rng);
        auto eps0 = Tensor<T>::randn({1, 3, 4, 4}, rng).detach();
        run_fd_case(
            out, "noise_and_reverse_step",
            [sched, eps0](const detail::FdInputs& in) {
                auto x_t = forward_noise(in[0], 30, eps0, sched);
                return mean(reverse_step(x_t, in[1], 30, 9, sched));
            },
            {x0, x0_hat}, tol);
    }

    // full graphs, probed at a few random elements per tensor
    const long S = 16;
    {
        ParamStore<T> ps;
        DenoiserConfig dc;
        Rng init(Rng::mix(seed, 1));
        Denoiser<T>::init_params(ps, dc, init);
        const Denoiser<T> net(ps, dc);
        auto x_t = Tensor<T>::randn({1, 3, S, S}, rng);
        auto x_d = Tensor<T>::randn({1, 3, S, S}, rng);
        auto pool = Tensor<T>::rand_uniform({1, kPriorChannels, S, S}, rng, 0.0, 1.0);
        auto task = reshape(task_one_hot<T>("deshadow"), {1, kTaskSlots});
        detail::FdInputs probes = {x_t,
                                   x_d,
                                   task,
                                   ps.get("encoder.s1.rb1.conv1.w"),
                                   ps.get("mid.attn.wv"),
                                   ps.get("pfm.s1.task.w2"),
                                   ps.get("decoder.s1.rb.temb.w"),
                                   ps.get("decoder.head.w")};
        run_fd_case_sampled(
            out, "denoiser_graph",
            [&net, pool](const detail::FdInputs& in) {
                return mean(net.forward(in[0], in[1], in[2], pool, 37));
            },
            probes, rng, tol);

        // fusion stage on its own, including the prior stack input
        auto f1 = Tensor<T>::randn({1, 16, S / 2, S / 2}, rng);
        auto temb = Denoiser<T>::time_vector(21, dc.time_dim, 1);
        run_fd_case_sampled(
            out, "fusion_graph",
            [&net, temb](const detail::FdInputs& in) {
                return mean(net.pfm_forward(in[0], in[2], in[1], 1, temb));
            },
            {f1, pool, task, ps.get("pfm.s1.ref1.w"), ps.get("pfm.s1.content.w2"),
             ps.get("pfm.s1.recon.conv1.w")},
            rng, tol);
    }
    {
        ParamStore<T> ps;
        DenoiserConfig dc;
        Rng init(Rng::mix(seed, 2));
        Denoiser<T>::init_params(ps, dc, init);
        init_cpb_params(ps, dc, init);
        const Denoiser<T> net(ps, dc);
        auto x_d = Tensor<T>::randn({1, 3, 32, 32}, rng);
        detail::FdInputs probes = {x_d, ps.get("cpb.b1.w"), ps.get("cpb.b5.c2.w"),
                                   ps.get("cpb.head.c1.w"), ps.get("cpb.head.c3.b"),
                                   ps.get("encoder.s4.down.w")};
        run_fd_case_sampled(
            out, "coordinate_branch_graph",
            [&net, &ps](const detail::FdInputs& in) {
                return mean(cpb_forward(net, ps, in[0], 8));
            },
            probes, rng, tol);
    }
    {
        ParamStore<T> ps;
        DenoiserConfig dc;
        dc.learned_prior = true;
        Rng init(Rng::mix(seed, 3));
        Denoiser<T>::init_params(ps, dc, init);
        const Denoiser<T> net(ps, dc);
        auto x_t = Tensor<T>::randn({1, 3, S, S}, rng);
        auto x_d = Tensor<T>::randn({1, 3, S, S}, rng);
        auto pool = Tensor<T>::rand_uniform({1, kPriorChannels, S, S}, rng, 0.0, 1.0);
        auto task = reshape(task_one_hot<T>("deblur"), {1, kTaskSlots});
        run_fd_case_sampled(
            out, "denoiser_graph_learned_prior",
            [&net, x_d, task, pool](const detail::FdInputs& in) {
                return mean(net.forward(in[0], x_d, task, pool, 11));
            },
            {x_t, ps.get("pfm.const_pool"), ps.get("pfm.s2.task.w1")}, rng, tol);
    }
    {
        ParamStore<T> ps;
        DenoiserConfig dc;
        dc.per_task_blocks = true;
        Rng init(Rng::mix(seed, 4));
        Denoiser<T>::init_params(ps, dc, init);
        const Denoiser<T> net(ps, dc);
        auto x_t = Tensor<T>::randn({1, 3, S, S}, rng);
        auto x_d = Tensor<T>::randn({1, 3, S, S}, rng);
        auto pool = Tensor<T>::rand_uniform({1, kPriorChannels, S, S}, rng, 0.0, 1.0);
        auto task = reshape(task_one_hot<T>("binarize"), {1, kTaskSlots});
        run_fd_case_sampled(
            out, "denoiser_graph_task_blocks",
            [&net, x_d, task, pool](const detail::FdInputs& in) {
                return mean(net.forward(in[0], x_d, task, pool, 11));
            },
            {x_t, ps.get("pfm.s1.task" + std::to_string(task_index("binarize")) + ".w")}, rng,
            tol);
    }
    return out;
}

} // namespace udr
