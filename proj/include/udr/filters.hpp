#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "udr/nn_ops.hpp"
#include "udr/tensor.hpp"

namespace udr {

// Normalized 1-D Gaussian taps over [-radius, radius].
template <class T>
std::vector<T> gaussian_kernel1d(double sigma, long radius) {
    if (sigma <= 0 || radius < 0)
        throw std::invalid_argument("gaussian_kernel1d: sigma must be > 0 and radius >= 0");
    std::vector<T> k(static_cast<std::size_t>(2 * radius + 1));
    double total = 0;
    for (long i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (static_cast<double>(i) * i) / (sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = static_cast<T>(v);
        total += v;
    }
    for (auto& v : k) v = static_cast<T>(v / total);
    return k;
}

inline long default_gauss_radius(double sigma) {
    return static_cast<long>(std::ceil(3.0 * sigma));
}

namespace detail {

// 1-D correlation along one spatial axis with mirror padding and the exact
// adjoint in backward. axis: 0 = height, 1 = width.
template <class T>
Tensor<T> conv1d_mirror(Tensor<T> x, std::vector<T> kernel, int axis) {
    check_rank4(x.shape(), "conv1d_mirror", "input");
    if (kernel.size() % 2 == 0) throw std::invalid_argument("conv1d_mirror: kernel must be odd");
    const long radius = static_cast<long>(kernel.size() / 2);
    const long B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const long n = axis == 0 ? H : W;

    // Folded source offsets, hoisted out of the pixel loops.
    std::vector<long> src(static_cast<std::size_t>(n * (2 * radius + 1)));
    for (long i = 0; i < n; ++i)
        for (long j = -radius; j <= radius; ++j)
            src[static_cast<std::size_t>(i * (2 * radius + 1) + j + radius)] = mirror_fold(i + j, n);

    std::vector<T> out(static_cast<std::size_t>(x.numel()), T(0));
    const long K = 2 * radius + 1;
    for (long bc = 0; bc < B * C; ++bc) {
        const T* ip = x.data().data() + bc * H * W;
        T* op = out.data() + bc * H * W;
        if (axis == 1) {
            for (long h = 0; h < H; ++h) {
                const T* row = ip + h * W;
                T* orow = op + h * W;
                for (long w = 0; w < W; ++w) {
                    const long* s = src.data() + w * K;
                    T acc = 0;
                    for (long j = 0; j < K; ++j) acc += kernel[static_cast<std::size_t>(j)] * row[s[j]];
                    orow[w] = acc;
                }
            }
        } else {
            for (long h = 0; h < H; ++h) {
                const long* s = src.data() + h * K;
                T* orow = op + h * W;
                for (long j = 0; j < K; ++j) {
                    const T kv = kernel[static_cast<std::size_t>(j)];
                    const T* srow = ip + s[j] * W;
                    for (long w = 0; w < W; ++w) orow[w] += kv * srow[w];
                }
            }
        }
    }
    auto bwd = [x, kernel, src, axis, B, C, H, W, K](typename Tensor<T>::Node& self) mutable {
        if (!x.requires_grad()) return;
        std::vector<T> gx(static_cast<std::size_t>(x.numel()), T(0));
        for (long bc = 0; bc < B * C; ++bc) {
            const T* g = self.grad.data() + bc * H * W;
            T* gp = gx.data() + bc * H * W;
            if (axis == 1) {
                for (long h = 0; h < H; ++h) {
                    const T* grow = g + h * W;
                    T* gprow = gp + h * W;
                    for (long w = 0; w < W; ++w) {
                        const long* s = src.data() + w * K;
                        const T gv = grow[w];
                        for (long j = 0; j < K; ++j)
                            gprow[s[j]] += kernel[static_cast<std::size_t>(j)] * gv;
                    }
                }
            } else {
                for (long h = 0; h < H; ++h) {
                    const long* s = src.data() + h * K;
                    const T* grow = g + h * W;
                    for (long j = 0; j < K; ++j) {
                        const T kv = kernel[static_cast<std::size_t>(j)];
                        T* gprow = gp + s[j] * W;
                        for (long w = 0; w < W; ++w) gprow[w] += kv * grow[w];
                    }
                }
            }
        }
        x.accumulate_grad(gx);
    };
    return Tensor<T>::make_op(x.shape(), std::move(out), {x}, std::move(bwd));
}

} // namespace detail

// Separable Gaussian blur with mirror padding; differentiable, exact
// adjoint. radius < 0 selects ceil(3*sigma).
template <class T>
Tensor<T> gaussian_blur(Tensor<T> x, double sigma, long radius = -1) {
    if (radius < 0) radius = default_gauss_radius(sigma);
    auto k = gaussian_kernel1d<T>(sigma, radius);
    return detail::conv1d_mirror(detail::conv1d_mirror(std::move(x), k, 1), k, 0);
}

} // namespace udr
