#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "udr/filters.hpp"
#include "udr/tensor.hpp"

// Evaluation metrics over [C,H,W] images in [0,1]. Plain double math, no
// autodiff; nothing here is trained through.

namespace udr {

inline constexpr long kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double cap = 99.0) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("psnr: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    double mse = 0;
    for (long i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse == 0) return cap;
    return std::min(cap, 10.0 * std::log10(1.0 / mse));
}

namespace detail {

struct SsimSums {
    double ssim = 0; // mean of the full local SSIM map
    double cs = 0;   // mean of the contrast-structure factor alone
};

// Valid-window gaussian-weighted SSIM over one channel.
inline SsimSums ssim_channel(const double* a, const double* b, long H, long W) {
    const long r = kSsimWindow / 2;
    static const std::vector<double> win = [] {
        auto k = gaussian_kernel1d<double>(kSsimSigma, kSsimWindow / 2);
        std::vector<double> w2(static_cast<std::size_t>(kSsimWindow * kSsimWindow));
        for (long i = 0; i < kSsimWindow; ++i)
            for (long j = 0; j < kSsimWindow; ++j)
                w2[static_cast<std::size_t>(i * kSsimWindow + j)] =
                    k[static_cast<std::size_t>(i)] * k[static_cast<std::size_t>(j)];
        return w2;
    }();
    const double c1 = kSsimK1 * kSsimK1, c2 = kSsimK2 * kSsimK2; // L = 1
    SsimSums out;
    long count = 0;
    for (long i = r; i < H - r; ++i)
        for (long j = r; j < W - r; ++j) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            const double* w = win.data();
            for (long di = -r; di <= r; ++di)
                for (long dj = -r; dj <= r; ++dj, ++w) {
                    const double va = a[(i + di) * W + j + dj];
                    const double vb = b[(i + di) * W + j + dj];
                    ma += *w * va;
                    mb += *w * vb;
                    saa += *w * va * va;
                    sbb += *w * vb * vb;
                    sab += *w * va * vb;
                }
            const double var_a = saa - ma * ma;
            const double var_b = sbb - mb * mb;
            const double cov = sab - ma * mb;
            const double lum = (2 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            const double cs = (2 * cov + c2) / (var_a + var_b + c2);
            out.ssim += lum * cs;
            out.cs += cs;
            ++count;
        }
    out.ssim /= static_cast<double>(count);
    out.cs /= static_cast<double>(count);
    return out;
}

template <class T>
SsimSums ssim_sums(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.shape() != b.shape())
        throw std::invalid_argument("ssim: expected matching [C,H,W], got " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const long C = a.dim(0), H = a.dim(1), W = a.dim(2);
    if (H < kSsimWindow || W < kSsimWindow)
        throw std::invalid_argument("ssim: image " + std::to_string(H) + "x" + std::to_string(W) +
                                    " smaller than the " + std::to_string(kSsimWindow) +
                                    "-pixel window");
    std::vector<double> ca(static_cast<std::size_t>(H * W)), cb(ca.size());
    SsimSums acc;
    for (long c = 0; c < C; ++c) {
        for (long i = 0; i < H * W; ++i) {
            ca[static_cast<std::size_t>(i)] = static_cast<double>(a.data()[c * H * W + i]);
            cb[static_cast<std::size_t>(i)] = static_cast<double>(b.data()[c * H * W + i]);
        }
        const auto s = ssim_channel(ca.data(), cb.data(), H, W);
        acc.ssim += s.ssim;
        acc.cs += s.cs;
    }
    acc.ssim /= static_cast<double>(C);
    acc.cs /= static_cast<double>(C);
    return acc;
}

// 2x2 mean pooling with stride 2; odd trailing rows/columns are dropped.
template <class T>
Tensor<T> halve(const Tensor<T>& x) {
    const long C = x.dim(0), H = x.dim(1) / 2, W = x.dim(2) / 2;
    Tensor<T> out = Tensor<T>::zeros({C, H, W});
    for (long c = 0; c < C; ++c)
        for (long i = 0; i < H; ++i)
            for (long j = 0; j < W; ++j) {
                const long src = c * x.dim(1) * x.dim(2) + 2 * i * x.dim(2) + 2 * j;
                out.data()[c * H * W + i * W + j] =
                    static_cast<T>(0.25) * (x.data()[src] + x.data()[src + 1] +
                                            x.data()[src + x.dim(2)] + x.data()[src + x.dim(2) + 1]);
            }
    return out;
}

} // namespace detail

template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::ssim_sums(a, b).ssim;
}

inline const std::vector<double>& msssim_weights() {
    static const std::vector<double> w = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    return w;
}

struct MsSsim {
    double value = 0;
    int scales = 0; // < 5 means the image was too small and weights were renormalized
};

// Multi-scale structural similarity: contrast-structure at every scale,
// luminance only at the coarsest, dyadic mean-pool pyramid.
template <class T>
MsSsim msssim(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 3 || a.shape() != b.shape())
        throw std::invalid_argument("msssim: expected matching [C,H,W], got " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const auto& full_w = msssim_weights();
    long side = std::min(a.dim(1), a.dim(2));
    int scales = 0;
    while (scales < static_cast<int>(full_w.size()) && side >= kSsimWindow) {
        ++scales;
        side /= 2;
    }
    if (scales == 0)
        throw std::invalid_argument("msssim: image smaller than the similarity window");
    std::vector<double> w(full_w.begin(), full_w.begin() + scales);
    double wsum = 0;
    for (double v : w) wsum += v;
    for (double& v : w) v /= wsum;

    Tensor<T> xa = a.detach(), xb = b.detach();
    double value = 1.0;
    for (int s = 0; s < scales; ++s) {
        const auto sums = detail::ssim_sums(xa, xb);
        // negative similarity would make fractional powers undefined
        const double term = s + 1 == scales ? std::max(sums.ssim, 0.0) : std::max(sums.cs, 0.0);
        value *= std::pow(term, w[static_cast<std::size_t>(s)]);
        if (s + 1 < scales) {
            xa = detail::halve(xa);
            xb = detail::halve(xb);
        }
    }
    return {value, scales};
}

// Iterative two-subpass thinning to a one-pixel skeleton; input and output
// are {0,1} masks of shape [1,H,W].
template <class T>
Tensor<T> zhang_suen_thin(const Tensor<T>& mask) {
    if (mask.rank() != 3 || mask.dim(0) != 1)
        throw std::invalid_argument("zhang_suen_thin: expected [1,H,W], got " +
                                    shape_str(mask.shape()));
    const long H = mask.dim(1), W = mask.dim(2);
    std::vector<int> m(static_cast<std::size_t>(H * W));
    for (long i = 0; i < H * W; ++i) {
        const T v = mask.data()[i];
        if (v != T(0) && v != T(1))
            throw std::invalid_argument("zhang_suen_thin: mask must be binary");
        m[static_cast<std::size_t>(i)] = v == T(1) ? 1 : 0;
    }
    auto px = [&](long r, long c) -> int {
        return (r < 0 || r >= H || c < 0 || c >= W) ? 0 : m[static_cast<std::size_t>(r * W + c)];
    };
    bool changed = true;
    std::vector<long> kill;
    while (changed) {
        changed = false;
        for (int pass = 0; pass < 2; ++pass) {
            kill.clear();
            for (long r = 0; r < H; ++r)
                for (long c = 0; c < W; ++c) {
                    if (!px(r, c)) continue;
                    // neighbors clockwise from north
                    const int p2 = px(r - 1, c), p3 = px(r - 1, c + 1), p4 = px(r, c + 1),
                              p5 = px(r + 1, c + 1), p6 = px(r + 1, c), p7 = px(r + 1, c - 1),
                              p8 = px(r, c - 1), p9 = px(r - 1, c - 1);
                    const int nb = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9;
                    if (nb < 2 || nb > 6) continue;
                    const int seq[9] = {p2, p3, p4, p5, p6, p7, p8, p9, p2};
                    int transitions = 0;
                    for (int i = 0; i < 8; ++i)
                        if (seq[i] == 0 && seq[i + 1] == 1) ++transitions;
                    if (transitions != 1) continue;
                    const bool ok = pass == 0 ? (p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0)
                                              : (p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0);
                    if (ok) kill.push_back(r * W + c);
                }
            for (long i : kill) m[static_cast<std::size_t>(i)] = 0;
            changed = changed || !kill.empty();
        }
    }
    Tensor<T> out = Tensor<T>::zeros(mask.shape());
    for (long i = 0; i < H * W; ++i) out.data()[i] = static_cast<T>(m[static_cast<std::size_t>(i)]);
    return out;
}

struct FMeasures {
    double fm = 0;       // percent
    double pfm = 0;      // percent, recall taken against the skeleton of gt
    bool empty_gt = false;
};

// Ink is 1. Precision counts predicted ink that is real; recall counts real
// ink recovered; pseudo-recall only asks for the skeleton to be recovered.
template <class T>
FMeasures f_measures(const Tensor<T>& pred, const Tensor<T>& gt) {
    if (pred.shape() != gt.shape())
        throw std::invalid_argument("f_measures: shape mismatch " + shape_str(pred.shape()) +
                                    " vs " + shape_str(gt.shape()));
    long tp = 0, fp = 0, fn = 0, gt_ink = 0;
    for (long i = 0; i < pred.numel(); ++i) {
        const T p = pred.data()[i], g = gt.data()[i];
        if ((p != T(0) && p != T(1)) || (g != T(0) && g != T(1)))
            throw std::invalid_argument("f_measures: inputs must be binary masks");
        if (g == T(1)) ++gt_ink;
        if (p == T(1) && g == T(1)) ++tp;
        if (p == T(1) && g == T(0)) ++fp;
        if (p == T(0) && g == T(1)) ++fn;
    }
    FMeasures out;
    if (gt_ink == 0) {
        out.empty_gt = true;
        return out;
    }
    const double precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    out.fm = precision + recall > 0 ? 200.0 * precision * recall / (precision + recall) : 0.0;

    const auto skel = zhang_suen_thin(gt);
    long sk_total = 0, sk_hit = 0;
    for (long i = 0; i < pred.numel(); ++i) {
        if (skel.data()[i] == T(1)) {
            ++sk_total;
            if (pred.data()[i] == T(1)) ++sk_hit;
        }
    }
    const double p_recall = sk_total > 0 ? static_cast<double>(sk_hit) / static_cast<double>(sk_total) : 0.0;
    out.pfm = precision + p_recall > 0 ? 200.0 * precision * p_recall / (precision + p_recall) : 0.0;
    return out;
}

} // namespace udr
