#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "udr/network.hpp"
#include "udr/nn_ops.hpp"
#include "udr/param_store.hpp"
#include "udr/rng.hpp"
#include "udr/tensor.hpp"

// Coordinate-prediction branch: pools the shared encoder's stage features
// onto a fixed control grid, mixes them through six dilated conv branches,
// and regresses a bounded backward map that dewarp() applies at full
// resolution. Pooling to a fixed grid is what makes the branch independent
// of the input extent.

namespace udr {

inline constexpr long kControlGrid = 16;

template <class T>
void init_cpb_params(ParamStore<T>& ps, const DenoiserConfig& cfg, Rng& rng) {
    long csum = 0;
    for (long c : cfg.stage_channels) csum += c;
    const long width = 32;
    for (int i = 1; i <= 3; ++i) {
        const std::string b = "cpb.b" + std::to_string(i);
        ps.conv_weight(b + ".w", width, csum, 3, 3, rng);
        ps.bias(b + ".b", width);
    }
    for (int i = 4; i <= 6; ++i) {
        const std::string b = "cpb.b" + std::to_string(i);
        ps.conv_weight(b + ".c1.w", width, csum, 3, 3, rng);
        ps.bias(b + ".c1.b", width);
        ps.conv_weight(b + ".c2.w", width, width, 3, 3, rng);
        ps.bias(b + ".c2.b", width);
        ps.conv_weight(b + ".c3.w", width, width, 3, 3, rng);
        ps.bias(b + ".c3.b", width);
    }
    ps.conv_weight("cpb.head.c1.w", 64, 6 * width, 3, 3, rng);
    ps.bias("cpb.head.c1.b", 64);
    ps.conv_weight("cpb.head.c2.w", 32, 64, 3, 3, rng);
    ps.bias("cpb.head.c2.b", 32);
    ps.conv_weight("cpb.head.c3.w", 2, 32, 3, 3, rng);
    ps.bias("cpb.head.c3.b", 2);
}

// Adaptive-average-pools every stage feature to G x G and concatenates on
// channels, so any input extent lands on the same control grid.
template <class T>
Tensor<T> cpb_fuse(const EncoderFeatures<T>& feats, long G) {
    if (G < 2) throw std::invalid_argument("cpb_fuse: control grid must be at least 2, got " +
                                           std::to_string(G));
    std::vector<Tensor<T>> pooled;
    pooled.reserve(4);
    for (const auto& f : feats.f) pooled.push_back(adaptive_avg_pool(f, G, G));
    return concat<T>(pooled, 1);
}

namespace detail {

template <class T>
Tensor<T> dilated_conv(Tensor<T> x, ParamStore<T>& ps, const std::string& name, long dilation,
                       int branch) {
    // pad == dilation keeps the grid size; the arithmetic is re-derived
    // here so a bad grid names the offending branch instead of surfacing
    // as a generic conv error.
    const long G = x.dim(2);
    const long out = G + 2 * dilation - 2 * dilation - 1 + 1;
    if (out < 2)
        throw std::invalid_argument("dilated_context: grid " + std::to_string(G) +
                                    " too small for branch " + std::to_string(branch) +
                                    " (dilation " + std::to_string(dilation) + ")");
    return silu(conv2d(x, ps.get(name + ".w"), ps.get(name + ".b"), 1, dilation, dilation));
}

} // namespace detail

// Six parallel context branches over the fused grid: three single convs at
// dilations 1, 2, 5 and three chains at (8,3,2), (12,7,4), (18,12,6).
template <class T>
Tensor<T> dilated_context(Tensor<T> f_c, ParamStore<T>& ps) {
    if (f_c.rank() != 4)
        throw std::invalid_argument("dilated_context: expected [B,C,G,G], got " +
                                    shape_str(f_c.shape()));
    static constexpr long kSingle[3] = {1, 2, 5};
    static constexpr long kChain[3][3] = {{8, 3, 2}, {12, 7, 4}, {18, 12, 6}};
    std::vector<Tensor<T>> branches;
    branches.reserve(6);
    for (int i = 0; i < 3; ++i)
        branches.push_back(
            detail::dilated_conv(f_c, ps, "cpb.b" + std::to_string(i + 1), kSingle[i], i + 1));
    for (int i = 0; i < 3; ++i) {
        const std::string b = "cpb.b" + std::to_string(i + 4);
        Tensor<T> h = detail::dilated_conv(f_c, ps, b + ".c1", kChain[i][0], i + 4);
        h = detail::dilated_conv(h, ps, b + ".c2", kChain[i][1], i + 4);
        h = detail::dilated_conv(h, ps, b + ".c3", kChain[i][2], i + 4);
        branches.push_back(h);
    }
    return concat<T>(branches, 1);
}

// Three convs down to two channels, bounded by tanh so every coordinate is
// a valid sampling position.
template <class T>
Tensor<T> bm_head(Tensor<T> f_d, ParamStore<T>& ps) {
    Tensor<T> h = silu(conv2d(f_d, ps.get("cpb.head.c1.w"), ps.get("cpb.head.c1.b"), 1, 1));
    h = silu(conv2d(h, ps.get("cpb.head.c2.w"), ps.get("cpb.head.c2.b"), 1, 1));
    h = conv2d(h, ps.get("cpb.head.c3.w"), ps.get("cpb.head.c3.b"), 1, 1);
    return tanh_op(h);
}

// Full branch: the shared encoder sees (zeros ‖ x_d) at step 0, since no
// diffusion state exists on the coordinate path.
template <class T>
Tensor<T> cpb_forward(const Denoiser<T>& net, ParamStore<T>& ps, Tensor<T> x_d,
                      long G = kControlGrid) {
    if (x_d.rank() != 4 || x_d.dim(1) != 3)
        throw std::invalid_argument("cpb_forward: expected [B,3,H,W], got " +
                                    shape_str(x_d.shape()));
    Tensor<T> x6 = concat<T>({Tensor<T>::zeros(x_d.shape()), x_d}, 1);
    Tensor<T> temb = Denoiser<T>::time_vector(0, net.config().time_dim, x_d.dim(0));
    EncoderFeatures<T> feats = net.encoder_forward(x6, temb);
    return bm_head(dilated_context(cpb_fuse(feats, G), ps), ps);
}

// bm is a backward map [B,2,G,G] in normalized [-1,1] coordinates
// (channel 0 = x, channel 1 = y): for each output position it names the
// location in `distorted` whose value belongs there. Upsampled bilinearly
// to the image grid and applied via grid sampling.
template <class T>
Tensor<T> dewarp(Tensor<T> distorted, Tensor<T> bm) {
    if (distorted.rank() != 4)
        throw std::invalid_argument("dewarp: expected [B,C,H,W] input, got " +
                                    shape_str(distorted.shape()));
    if (bm.rank() != 4 || bm.dim(1) != 2)
        throw std::invalid_argument("dewarp: expected [B,2,G,G] backward map, got " +
                                    shape_str(bm.shape()));
    if (bm.dim(0) != distorted.dim(0))
        throw std::invalid_argument("dewarp: batch mismatch between image and map");
    Tensor<T> grid = bilinear_resize(bm, distorted.dim(2), distorted.dim(3));
    return bilinear_grid_sample(distorted, grid);
}

} // namespace udr
