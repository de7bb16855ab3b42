#pragma once

#include <algorithm>
#include <cmath>
#include <queue>
#include <stdexcept>
#include <string>
#include <vector>

#include "udr/filters.hpp"
#include "udr/tensor.hpp"

// Classical-operator feature stack supplied to the denoiser as fixed
// conditioning. Nothing in here trains or tracks gradients; images are
// single [C,H,W] tensors and batching is the caller's concern.

namespace udr {

struct PriorParams {
    double canny_low = 0.1;
    double canny_high = 0.3;
    long median_k = 5;
    double gauss_sigma = 4.0;
    double dct_keep_frac = 0.1;
};

// Channel layout of the assembled pool.
enum PriorChannel : long {
    kPriorSobelX = 0,
    kPriorSobelY = 1,
    kPriorCanny = 2,
    kPriorMedianR = 3,
    kPriorMedianG = 4,
    kPriorMedianB = 5,
    kPriorGaussR = 6,
    kPriorGaussG = 7,
    kPriorGaussB = 8,
    kPriorDctLow = 9,
};
inline constexpr long kPriorChannels = 10;

template <class T>
Tensor<T> to_luminance(const Tensor<T>& rgb) {
    if (rgb.rank() != 3 || rgb.dim(0) != 3)
        throw std::invalid_argument("to_luminance: expected [3,H,W], got " + shape_str(rgb.shape()));
    const long H = rgb.dim(1), W = rgb.dim(2), N = H * W;
    Tensor<T> out = Tensor<T>::zeros({1, H, W});
    const T* r = rgb.data().data();
    const T* g = r + N;
    const T* b = g + N;
    T* o = out.data().data();
    for (long i = 0; i < N; ++i)
        o[i] = static_cast<T>(0.299) * r[i] + static_cast<T>(0.587) * g[i] +
               static_cast<T>(0.114) * b[i];
    return out;
}

// Signed 3x3 Sobel derivatives with reflect padding. gx responds to
// horizontal change (along columns), gy to vertical change (along rows).
template <class T>
std::pair<Tensor<T>, Tensor<T>> sobel(const Tensor<T>& gray) {
    if (gray.rank() != 3 || gray.dim(0) != 1)
        throw std::invalid_argument("sobel: expected [1,H,W], got " + shape_str(gray.shape()));
    const long H = gray.dim(1), W = gray.dim(2);
    if (H < 3 || W < 3)
        throw std::invalid_argument("sobel: image must be at least 3x3, got " + std::to_string(H) +
                                    "x" + std::to_string(W));
    Tensor<T> gx = Tensor<T>::zeros({1, H, W});
    Tensor<T> gy = Tensor<T>::zeros({1, H, W});
    const T* src = gray.data().data();
    // Taps grouped as differences so flat regions cancel exactly instead
    // of leaving one-ulp residue that edge normalization would amplify.
    for (long i = 0; i < H; ++i) {
        const long t = mirror_fold(i - 1, H), b = mirror_fold(i + 1, H);
        for (long j = 0; j < W; ++j) {
            const long l = mirror_fold(j - 1, W), r = mirror_fold(j + 1, W);
            gx.data()[i * W + j] = (src[t * W + r] - src[t * W + l]) +
                                   2 * (src[i * W + r] - src[i * W + l]) +
                                   (src[b * W + r] - src[b * W + l]);
            gy.data()[i * W + j] = (src[b * W + l] - src[t * W + l]) +
                                   2 * (src[b * W + j] - src[t * W + j]) +
                                   (src[b * W + r] - src[t * W + r]);
        }
    }
    return {gx, gy};
}

namespace detail {

// Quantize a gradient direction into one of four neighbor axes and report
// the (dr,dc) step along the gradient. Angles fold modulo 180 degrees.
inline std::pair<int, int> nms_step(double gx, double gy) {
    double ang = std::atan2(gy, gx) * 180.0 / 3.14159265358979323846;
    if (ang < 0) ang += 180.0;
    if (ang >= 180.0) ang -= 180.0;
    if (ang < 22.5 || ang >= 157.5) return {0, 1};  // horizontal gradient
    if (ang < 67.5) return {1, 1};                  // diagonal down-right
    if (ang < 112.5) return {1, 0};                 // vertical
    return {1, -1};                                 // diagonal down-left
}

} // namespace detail

// Classical Canny pipeline; thresholds are fractions of the max gradient
// magnitude after non-maximum suppression. Output is strictly {0,1}.
template <class T>
Tensor<T> canny(const Tensor<T>& gray, double low, double high) {
    if (gray.rank() != 3 || gray.dim(0) != 1)
        throw std::invalid_argument("canny: expected [1,H,W], got " + shape_str(gray.shape()));
    if (!(low >= 0.0 && low < high))
        throw std::invalid_argument("canny: thresholds must satisfy 0 <= low < high, got " +
                                    std::to_string(low) + "/" + std::to_string(high));
    const long H = gray.dim(1), W = gray.dim(2);

    Tensor<T> smoothed;
    {
        NoGradGuard ng;
        auto x4 = reshape(gray.detach(), {1, 1, H, W});
        smoothed = reshape(gaussian_blur(x4, 1.4), {1, H, W});
    }
    auto [gx, gy] = sobel(smoothed);

    std::vector<double> mag(static_cast<std::size_t>(H * W));
    double max_mag = 0;
    for (long i = 0; i < H * W; ++i) {
        const double m = std::hypot(static_cast<double>(gx.data()[i]),
                                    static_cast<double>(gy.data()[i]));
        mag[static_cast<std::size_t>(i)] = m;
        max_mag = std::max(max_mag, m);
    }

    Tensor<T> out = Tensor<T>::zeros({1, H, W});
    if (max_mag == 0) return out;

    // non-maximum suppression: survive only as a ridge along the gradient
    std::vector<double> thin(static_cast<std::size_t>(H * W), 0.0);
    for (long i = 0; i < H; ++i)
        for (long j = 0; j < W; ++j) {
            const double m = mag[static_cast<std::size_t>(i * W + j)];
            if (m == 0) continue;
            const auto [dr, dc] = detail::nms_step(gx.data()[i * W + j], gy.data()[i * W + j]);
            auto at = [&](long r, long c) -> double {
                if (r < 0 || r >= H || c < 0 || c >= W) return 0.0;
                return mag[static_cast<std::size_t>(r * W + c)];
            };
            if (m >= at(i + dr, j + dc) && m >= at(i - dr, j - dc))
                thin[static_cast<std::size_t>(i * W + j)] = m;
        }

    const double t_high = high * max_mag, t_low = low * max_mag;
    std::vector<unsigned char> cls(static_cast<std::size_t>(H * W), 0); // 0 none, 1 weak, 2 strong
    std::queue<long> frontier;
    for (long i = 0; i < H * W; ++i) {
        const double m = thin[static_cast<std::size_t>(i)];
        if (m > t_high) {
            cls[static_cast<std::size_t>(i)] = 2;
            frontier.push(i);
        } else if (m > t_low) {
            cls[static_cast<std::size_t>(i)] = 1;
        }
    }
    // hysteresis: weak pixels join only when 8-connected to a strong chain
    while (!frontier.empty()) {
        const long p = frontier.front();
        frontier.pop();
        const long r = p / W, c = p % W;
        for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc) {
                const long rr = r + dr, cc = c + dc;
                if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
                const long q = rr * W + cc;
                if (cls[static_cast<std::size_t>(q)] == 1) {
                    cls[static_cast<std::size_t>(q)] = 2;
                    frontier.push(q);
                }
            }
    }
    for (long i = 0; i < H * W; ++i)
        out.data()[i] = cls[static_cast<std::size_t>(i)] == 2 ? T(1) : T(0);
    return out;
}

template <class T>
Tensor<T> median_filter(const Tensor<T>& img, long k) {
    if (img.rank() != 3)
        throw std::invalid_argument("median_filter: expected [C,H,W], got " + shape_str(img.shape()));
    if (k < 3 || k % 2 == 0)
        throw std::invalid_argument("median_filter: k must be odd and >= 3, got " + std::to_string(k));
    const long C = img.dim(0), H = img.dim(1), W = img.dim(2), r = k / 2;
    Tensor<T> out = Tensor<T>::zeros(img.shape());
    std::vector<T> window(static_cast<std::size_t>(k * k));
    for (long c = 0; c < C; ++c) {
        const T* src = img.data().data() + c * H * W;
        T* dst = out.data().data() + c * H * W;
        for (long i = 0; i < H; ++i)
            for (long j = 0; j < W; ++j) {
                std::size_t n = 0;
                for (long di = -r; di <= r; ++di) {
                    const long si = mirror_fold(i + di, H);
                    for (long dj = -r; dj <= r; ++dj)
                        window[n++] = src[si * W + mirror_fold(j + dj, W)];
                }
                auto mid = window.begin() + static_cast<long>(n / 2);
                std::nth_element(window.begin(), mid, window.begin() + static_cast<long>(n));
                dst[i * W + j] = *mid;
            }
    }
    return out;
}

template <class T>
Tensor<T> gaussian_filter(const Tensor<T>& img, double sigma) {
    if (img.rank() != 3)
        throw std::invalid_argument("gaussian_filter: expected [C,H,W], got " + shape_str(img.shape()));
    if (sigma <= 0) throw std::invalid_argument("gaussian_filter: sigma must be > 0");
    NoGradGuard ng;
    const long C = img.dim(0), H = img.dim(1), W = img.dim(2);
    auto x4 = reshape(img.detach(), {1, C, H, W});
    return reshape(gaussian_blur(x4, sigma), {C, H, W});
}

namespace detail {

// Orthonormal DCT-II basis matrix: M[u][i] = a(u) cos(pi (2i+1) u / 2N).
inline std::vector<double> dct_matrix(long n) {
    std::vector<double> m(static_cast<std::size_t>(n * n));
    const double pi = 3.14159265358979323846;
    for (long u = 0; u < n; ++u) {
        const double a = u == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
        for (long i = 0; i < n; ++i)
            m[static_cast<std::size_t>(u * n + i)] =
                a * std::cos(pi * (2 * i + 1) * u / (2.0 * n));
    }
    return m;
}

} // namespace detail

// Orthonormal 2-D DCT (type II forward, type III inverse). Square only;
// callers pad non-square inputs first.
template <class T>
Tensor<T> dct2(const Tensor<T>& x, bool inverse) {
    if (x.rank() != 3 || x.dim(0) != 1 || x.dim(1) != x.dim(2))
        throw std::invalid_argument("dct2: expected square [1,N,N], got " + shape_str(x.shape()));
    const long N = x.dim(1);
    const auto M = detail::dct_matrix(N);
    // forward: Y = M X M^T, computed in double; inverse swaps M and M^T
    auto mul_left = [&](const std::vector<double>& src, std::vector<double>& dst, bool transposed) {
        for (long u = 0; u < N; ++u)
            for (long j = 0; j < N; ++j) {
                double acc = 0;
                for (long i = 0; i < N; ++i) {
                    const double mv = transposed ? M[static_cast<std::size_t>(i * N + u)]
                                                 : M[static_cast<std::size_t>(u * N + i)];
                    acc += mv * src[static_cast<std::size_t>(i * N + j)];
                }
                dst[static_cast<std::size_t>(u * N + j)] = acc;
            }
    };
    std::vector<double> a(static_cast<std::size_t>(N * N));
    for (long i = 0; i < N * N; ++i) a[static_cast<std::size_t>(i)] = x.data()[i];
    std::vector<double> b(a.size()), c(a.size());
    mul_left(a, b, inverse);
    // right-multiply by M^T == left-multiply the transpose; reuse by
    // transposing operands: (B M^T)^T = M B^T
    std::vector<double> bt(a.size());
    for (long i = 0; i < N; ++i)
        for (long j = 0; j < N; ++j)
            bt[static_cast<std::size_t>(j * N + i)] = b[static_cast<std::size_t>(i * N + j)];
    mul_left(bt, c, inverse);
    Tensor<T> out = Tensor<T>::zeros({1, N, N});
    for (long i = 0; i < N; ++i)
        for (long j = 0; j < N; ++j)
            out.data()[i * N + j] = static_cast<T>(c[static_cast<std::size_t>(j * N + i)]);
    return out;
}

// Zero high-order DCT coefficients and invert. The cutoff scales with the
// padded square's max diagonal index so keep_frac = 1 keeps everything.
template <class T>
Tensor<T> dct_lowpass(const Tensor<T>& gray, double keep_frac) {
    if (gray.rank() != 3 || gray.dim(0) != 1)
        throw std::invalid_argument("dct_lowpass: expected [1,H,W], got " + shape_str(gray.shape()));
    if (!(keep_frac > 0.0 && keep_frac <= 1.0))
        throw std::invalid_argument("dct_lowpass: keep_frac must be in (0,1], got " +
                                    std::to_string(keep_frac));
    const long H = gray.dim(1), W = gray.dim(2);
    const long N = std::max(H, W);

    // pad to square with edge replication
    Tensor<T> sq = Tensor<T>::zeros({1, N, N});
    for (long i = 0; i < N; ++i)
        for (long j = 0; j < N; ++j)
            sq.data()[i * N + j] = gray.data()[std::min(i, H - 1) * W + std::min(j, W - 1)];

    Tensor<T> coef = dct2(sq, false);
    const double cutoff = keep_frac * static_cast<double>(2 * N - 2);
    for (long u = 0; u < N; ++u)
        for (long v = 0; v < N; ++v)
            if (static_cast<double>(u + v) > cutoff) coef.data()[u * N + v] = T(0);
    Tensor<T> rec = dct2(coef, true);

    Tensor<T> out = Tensor<T>::zeros({1, H, W});
    for (long i = 0; i < H; ++i)
        for (long j = 0; j < W; ++j)
            out.data()[i * W + j] =
                std::min(T(1), std::max(T(0), rec.data()[i * N + j]));
    return out;
}

// Assemble the 10-channel pool; see PriorChannel for the layout.
template <class T>
Tensor<T> build_prior_pool(const Tensor<T>& x_d, const PriorParams& pp = {}) {
    if (x_d.rank() != 3 || x_d.dim(0) != 3)
        throw std::invalid_argument("build_prior_pool: expected [3,H,W], got " + shape_str(x_d.shape()));
    const long H = x_d.dim(1), W = x_d.dim(2), N = H * W;
    Tensor<T> pool = Tensor<T>::zeros({kPriorChannels, H, W});
    auto channel = [&](long c) { return pool.data().data() + c * N; };

    const auto lum = to_luminance(x_d);
    auto [gx, gy] = sobel(lum);
    auto write_normed_abs = [&](const Tensor<T>& g, long ch) {
        T mx = 0;
        for (long i = 0; i < N; ++i) mx = std::max(mx, std::abs(g.data()[i]));
        T* dst = channel(ch);
        if (mx > 0)
            for (long i = 0; i < N; ++i) dst[i] = std::abs(g.data()[i]) / mx;
    };
    write_normed_abs(gx, kPriorSobelX);
    write_normed_abs(gy, kPriorSobelY);

    const auto edges = canny(lum, pp.canny_low, pp.canny_high);
    std::copy_n(edges.data().data(), N, channel(kPriorCanny));

    const auto med = median_filter(x_d, pp.median_k);
    std::copy_n(med.data().data(), 3 * N, channel(kPriorMedianR));

    const auto smooth = gaussian_filter(x_d, pp.gauss_sigma);
    std::copy_n(smooth.data().data(), 3 * N, channel(kPriorGaussR));

    const auto low = dct_lowpass(lum, pp.dct_keep_frac);
    std::copy_n(low.data().data(), N, channel(kPriorDctLow));
    return pool;
}

} // namespace udr
