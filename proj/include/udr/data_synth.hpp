#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "udr/cpb.hpp"
#include "udr/metrics.hpp"
#include "udr/nn_ops.hpp"
#include "udr/priors.hpp"
#include "udr/rng.hpp"
#include "udr/tasks.hpp"
#include "udr/tensor.hpp"

// Synthetic document corpus. Pages are procedurally "typeset" (text-like
// runs of dark rectangles on bright paper under an ink budget), then each
// task applies its own degradation recipe. Warp pairs additionally carry
// the ground-truth backward map used to supervise coordinate prediction.

namespace udr {

template <class T>
struct SamplePair {
    Tensor<T> input;   // degraded observation, [3,H,W] in [0,1]
    Tensor<T> gt;      // restoration target, [3,H,W] in [0,1]
    std::string task;
    std::uint64_t seed = 0;
    bool has_bm = false;
    Tensor<T> bm_gt;   // [2,G,G] backward map, only for dewarp pairs
};

inline constexpr long kWarpGrid = 16;
inline constexpr const char* kDewarpTaskName = "dewarp";

namespace detail {

inline constexpr std::uint64_t kSaltPage = 0x70616765ull;
inline constexpr std::uint64_t kSaltWarp = 0x77617270ull;
inline constexpr std::uint64_t kSaltClean = 0x636c65616eull;
inline constexpr std::uint64_t kSaltTask = 0x7461736bull;

// Displacement field: a handful of low-frequency plane waves per axis.
// Amplitudes are fractions of the unit page extent and kept small enough
// that p -> p - d(p) stays a contraction, so the inverse map below is a
// plain fixed-point iteration.
struct WarpField {
    struct Wave {
        double amp, fx, fy, phase;
    };
    std::vector<Wave> dx, dy;

    static std::vector<Wave> random_axis(Rng& rng, double total_amp) {
        const long k = rng.uniform_int(2, 4);
        std::vector<Wave> waves(static_cast<std::size_t>(k));
        double raw_sum = 0;
        for (auto& wv : waves) {
            wv.amp = rng.uniform(0.3, 1.0);
            const double freq = rng.uniform(0.4, 1.2);
            const double dir = rng.uniform(0.0, 6.283185307179586);
            wv.fx = freq * std::cos(dir);
            wv.fy = freq * std::sin(dir);
            wv.phase = rng.uniform(0.0, 6.283185307179586);
            raw_sum += wv.amp;
        }
        for (auto& wv : waves) wv.amp *= total_amp / raw_sum;
        return waves;
    }

    static double eval_axis(const std::vector<Wave>& waves, double xn, double yn) {
        double v = 0;
        for (const auto& wv : waves)
            v += wv.amp * std::sin(6.283185307179586 * (wv.fx * xn + wv.fy * yn) + wv.phase);
        return v;
    }

    double dxv(double xn, double yn) const { return eval_axis(dx, xn, yn); }
    double dyv(double xn, double yn) const { return eval_axis(dy, xn, yn); }

    // Partial of one axis component wrt xn or yn.
    static double grad_axis(const std::vector<Wave>& waves, double xn, double yn, bool wrt_x) {
        double v = 0;
        for (const auto& wv : waves) {
            const double c = std::cos(6.283185307179586 * (wv.fx * xn + wv.fy * yn) + wv.phase);
            v += wv.amp * 6.283185307179586 * (wrt_x ? wv.fx : wv.fy) * c;
        }
        return v;
    }

    // Smallest Jacobian determinant of p + d(p) over a dense probe grid.
    // A positive floor rules out folds before any image is resampled.
    double min_jacobian_det(long probes = 33) const {
        double best = 1e30;
        for (long i = 0; i < probes; ++i)
            for (long j = 0; j < probes; ++j) {
                const double yn = static_cast<double>(i) / (probes - 1);
                const double xn = static_cast<double>(j) / (probes - 1);
                const double axx = 1.0 + grad_axis(dx, xn, yn, true);
                const double axy = grad_axis(dx, xn, yn, false);
                const double ayx = grad_axis(dy, xn, yn, true);
                const double ayy = 1.0 + grad_axis(dy, xn, yn, false);
                best = std::min(best, axx * ayy - axy * ayx);
            }
        return best;
    }
};

} // namespace detail

// Procedural clean page: bright paper with slight tint and grain, dark
// text-like runs laid out line by line until a random ink budget is met.
// Ink stays below 0.45 and paper above 0.9, so a 0.5 luminance threshold
// separates them exactly.
template <class T>
Tensor<T> gen_clean_doc(std::uint64_t seed, long h, long w) {
    if (h < 32 || w < 32)
        throw std::invalid_argument("gen_clean_doc: page must be at least 32x32, got " +
                                    std::to_string(h) + "x" + std::to_string(w));
    NoGradGuard ng;
    Rng rng(Rng::mix(seed, detail::kSaltPage));
    Tensor<T> page = Tensor<T>::zeros({3, h, w});
    auto* d = page.data().data();
    const long N = h * w;

    const double base = rng.uniform(0.93, 0.97);
    double tint[3];
    for (double& t : tint) t = rng.uniform(-0.005, 0.005);
    for (long i = 0; i < N; ++i) {
        const double grain = rng.uniform(-0.01, 0.01);
        for (long c = 0; c < 3; ++c)
            d[c * N + i] = static_cast<T>(std::clamp(base + tint[c] + grain, 0.9, 0.99));
    }

    long placed = 0;
    auto stamp = [&](long y0, long y1, long x0, long x1, double ink) {
        for (long i = y0; i < y1; ++i)
            for (long j = x0; j < x1; ++j) {
                if (static_cast<double>(d[i * w + j]) > 0.5) ++placed;
                const double v = std::clamp(ink + rng.uniform(-0.03, 0.03), 0.02, 0.45);
                for (long c = 0; c < 3; ++c) d[c * N + i * w + j] = static_cast<T>(v);
            }
    };

    const double target_frac = rng.uniform(0.05, 0.18);
    const long target = static_cast<long>(target_frac * static_cast<double>(N));
    const long margin_y = std::max<long>(2, h / 16);
    const long margin_x = std::max<long>(2, w / 16);
    const long lh_max = std::max<long>(3, h / 16);

    long y = margin_y;
    while (placed < target) {
        const long lh = rng.uniform_int(2, lh_max);
        if (y + lh > h - margin_y) break;
        if (rng.uniform() < 0.1) {
            stamp(y, y + 1, margin_x, w - margin_x, rng.uniform(0.25, 0.45));
        } else {
            long x = margin_x + rng.uniform_int(0, 3);
            while (x < w - margin_x && placed < target) {
                const long run = rng.uniform_int(2, 8);
                const long gap = rng.uniform_int(1, 4);
                if (rng.uniform() < 0.8)
                    stamp(y, y + lh, x, std::min(x + run, w - margin_x), rng.uniform(0.05, 0.3));
                x += run + gap;
            }
        }
        y += lh + rng.uniform_int(2, 4);
    }

    // Sparse layouts can stop early; guarantee a usable minimum of ink.
    const long min_ink = N / 40;
    while (placed < min_ink) {
        const long lh = rng.uniform_int(2, lh_max);
        const long run = rng.uniform_int(3, 8);
        const long yy = rng.uniform_int(margin_y, h - margin_y - lh);
        const long xx = rng.uniform_int(margin_x, w - margin_x - run);
        stamp(yy, yy + lh, xx, xx + run, rng.uniform(0.05, 0.3));
    }
    return page;
}

// Applies the named pixel task's degradation recipe to a clean page.
// The ground truth is the clean page except for binarize, whose target
// is the thresholded two-level version.
template <class T>
SamplePair<T> degrade(const std::string& task, const Tensor<T>& clean, std::uint64_t seed) {
    if (clean.rank() != 3 || clean.dim(0) != 3)
        throw std::invalid_argument("degrade: expected [3,H,W] page, got " + shape_str(clean.shape()));
    NoGradGuard ng;
    const long idx = task_index(task); // validates the name
    const long h = clean.dim(1), w = clean.dim(2), N = h * w;
    Rng rng(Rng::mix(seed, detail::kSaltTask + static_cast<std::uint64_t>(idx)));

    SamplePair<T> out;
    out.task = task;
    out.seed = seed;
    out.gt = clean.detach();
    const auto* src = clean.data().data();

    if (task == "deblur") {
        out.input = gaussian_filter(clean, rng.uniform(1.0, 2.5));
    } else if (task == "deshadow") {
        // Smooth half-plane shadow: attenuation eases from 1 down to a
        // random floor across a sigmoid edge.
        const double ang = rng.uniform(0.0, 6.283185307179586);
        const double nx = std::cos(ang), ny = std::sin(ang);
        const double off = rng.uniform(-0.2, 0.2);
        const double width = rng.uniform(0.05, 0.2);
        const double floor = rng.uniform(0.4, 0.7);
        out.input = Tensor<T>::zeros({3, h, w});
        auto* dst = out.input.data().data();
        for (long i = 0; i < h; ++i)
            for (long j = 0; j < w; ++j) {
                const double xn = static_cast<double>(j) / (w - 1) - 0.5;
                const double yn = static_cast<double>(i) / (h - 1) - 0.5;
                const double dist = nx * xn + ny * yn - off;
                const double f = floor + (1.0 - floor) / (1.0 + std::exp(-dist / width));
                for (long c = 0; c < 3; ++c)
                    dst[c * N + i * w + j] = static_cast<T>(src[c * N + i * w + j] * f);
            }
    } else if (task == "illuminate") {
        // Directional brightness ramp between a dim and a bright side.
        const double ang = rng.uniform(0.0, 6.283185307179586);
        const double nx = std::cos(ang), ny = std::sin(ang);
        const double m = (std::abs(nx) + std::abs(ny)) / 2.0;
        const double lo = rng.uniform(0.5, 0.7);
        const double hi = rng.uniform(0.9, 1.0);
        out.input = Tensor<T>::zeros({3, h, w});
        auto* dst = out.input.data().data();
        for (long i = 0; i < h; ++i)
            for (long j = 0; j < w; ++j) {
                const double xn = static_cast<double>(j) / (w - 1) - 0.5;
                const double yn = static_cast<double>(i) / (h - 1) - 0.5;
                const double u = (nx * xn + ny * yn + m) / (2.0 * m);
                const double g = lo + (hi - lo) * u;
                for (long c = 0; c < 3; ++c)
                    dst[c * N + i * w + j] = static_cast<T>(src[c * N + i * w + j] * g);
            }
    } else if (task == "binarize") {
        // Grayscale grain plus a smooth darkening stain; the target is the
        // clean page thresholded to pure black and white.
        const double stain_amp = rng.uniform(0.05, 0.15);
        const double fx = rng.uniform(0.5, 1.5), fy = rng.uniform(0.5, 1.5);
        const double px = rng.uniform(0.0, 6.283185307179586);
        const double py = rng.uniform(0.0, 6.283185307179586);
        out.input = Tensor<T>::zeros({3, h, w});
        out.gt = Tensor<T>::zeros({3, h, w});
        auto* dst = out.input.data().data();
        auto* gtd = out.gt.data().data();
        for (long i = 0; i < h; ++i)
            for (long j = 0; j < w; ++j) {
                const double xn = static_cast<double>(j) / (w - 1);
                const double yn = static_cast<double>(i) / (h - 1);
                const double stain = stain_amp * (0.5 + 0.5 * std::sin(6.283185307179586 * fx * xn + px) *
                                                            std::sin(6.283185307179586 * fy * yn + py));
                const double noise = 0.08 * rng.normal();
                const long at = i * w + j;
                const double lum = 0.299 * src[at] + 0.587 * src[N + at] + 0.114 * src[2 * N + at];
                const double bin = lum < 0.5 ? 0.0 : 1.0;
                for (long c = 0; c < 3; ++c) {
                    dst[c * N + at] = static_cast<T>(std::clamp(src[c * N + at] + noise - stain, 0.0, 1.0));
                    gtd[c * N + at] = static_cast<T>(bin);
                }
            }
    } else if (task == "hw_remove") {
        // Dark cubic Bezier strokes stamped over the page.
        out.input = clean.detach();
        auto* dst = out.input.data().data();
        const long strokes = rng.uniform_int(2, 4);
        for (long s = 0; s < strokes; ++s) {
            double ptx[4], pty[4];
            for (int k = 0; k < 4; ++k) {
                ptx[k] = rng.uniform(0.1, 0.9) * (w - 1);
                pty[k] = rng.uniform(0.1, 0.9) * (h - 1);
            }
            double col[3];
            for (double& c : col) c = rng.uniform(0.05, 0.35);
            const double radius = rng.uniform(0.8, 1.6);
            const long steps = 4 * (h + w);
            for (long st = 0; st <= steps; ++st) {
                const double t = static_cast<double>(st) / steps;
                const double u = 1.0 - t;
                const double cx = u * u * u * ptx[0] + 3 * u * u * t * ptx[1] +
                                  3 * u * t * t * ptx[2] + t * t * t * ptx[3];
                const double cy = u * u * u * pty[0] + 3 * u * u * t * pty[1] +
                                  3 * u * t * t * pty[2] + t * t * t * pty[3];
                const long j0 = std::max<long>(0, static_cast<long>(std::floor(cx - radius)));
                const long j1 = std::min<long>(w - 1, static_cast<long>(std::ceil(cx + radius)));
                const long i0 = std::max<long>(0, static_cast<long>(std::floor(cy - radius)));
                const long i1 = std::min<long>(h - 1, static_cast<long>(std::ceil(cy + radius)));
                for (long i = i0; i <= i1; ++i)
                    for (long j = j0; j <= j1; ++j) {
                        const double dx = j - cx, dy = i - cy;
                        if (dx * dx + dy * dy <= radius * radius)
                            for (long c = 0; c < 3; ++c)
                                dst[c * N + i * w + j] = static_cast<T>(col[c]);
                    }
            }
        }
    } else if (task == "denoise") {
        const double sigma = rng.uniform(0.15, 0.3);
        out.input = Tensor<T>::zeros({3, h, w});
        auto* dst = out.input.data().data();
        for (long i = 0; i < 3 * N; ++i)
            dst[i] = static_cast<T>(std::clamp(static_cast<double>(src[i]) + sigma * rng.normal(), 0.0, 1.0));
    } else {
        throw std::invalid_argument("degrade: no pixel recipe for task '" + task + "'");
    }
    return out;
}

// Distorted/flat page pair plus the ground-truth backward map on a
// kWarpGrid^2 lattice. amp_scale exists so callers can dial the warp down
// to zero (identity map) or probe stronger distortions; fields that fold
// or reconstruct poorly are rerolled from a fresh substream.
template <class T>
SamplePair<T> gen_warp_pair(std::uint64_t seed, long h, long w, double amp_scale = 1.0) {
    if (h < 32 || w < 32)
        throw std::invalid_argument("gen_warp_pair: page must be at least 32x32, got " +
                                    std::to_string(h) + "x" + std::to_string(w));
    if (amp_scale < 0.0) throw std::invalid_argument("gen_warp_pair: amp_scale must be >= 0");
    NoGradGuard ng;
    // Slightly softened page: warp supervision compares resampled images,
    // and band-limited content keeps the round trip faithful.
    const Tensor<T> flat = gaussian_filter(gen_clean_doc<T>(Rng::mix(seed, detail::kSaltPage), h, w), 0.7);
    const Tensor<T> flat4 = reshape(flat, {1, 3, h, w});
    const long G = kWarpGrid;

    for (int attempt = 0; attempt < 40; ++attempt) {
        Rng rng(Rng::mix(seed, detail::kSaltWarp + static_cast<std::uint64_t>(attempt)));
        detail::WarpField field;
        field.dx = detail::WarpField::random_axis(rng, amp_scale * rng.uniform(0.025, 0.06));
        field.dy = detail::WarpField::random_axis(rng, amp_scale * rng.uniform(0.025, 0.06));
        if (field.min_jacobian_det() < 0.1) continue;

        // Invert p = q + d(q) per output pixel by fixed-point iteration,
        // then pull the flat page through the inverse to get the distorted
        // observation.
        Tensor<T> grid = Tensor<T>::zeros({1, 2, h, w});
        auto* g = grid.data().data();
        for (long i = 0; i < h; ++i)
            for (long j = 0; j < w; ++j) {
                const double pxn = static_cast<double>(j) / (w - 1);
                const double pyn = static_cast<double>(i) / (h - 1);
                double sx = pxn, sy = pyn;
                for (int it = 0; it < 15; ++it) {
                    const double ndx = field.dxv(sx, sy);
                    const double ndy = field.dyv(sx, sy);
                    sx = pxn - ndx;
                    sy = pyn - ndy;
                }
                g[i * w + j] = static_cast<T>(2.0 * sx - 1.0);
                g[h * w + i * w + j] = static_cast<T>(2.0 * sy - 1.0);
            }
        const Tensor<T> distorted4 = bilinear_grid_sample(flat4, grid);

        Tensor<T> bm = Tensor<T>::zeros({2, G, G});
        auto* b = bm.data().data();
        for (long gi = 0; gi < G; ++gi)
            for (long gj = 0; gj < G; ++gj) {
                const double qx = static_cast<double>(gj) / (G - 1);
                const double qy = static_cast<double>(gi) / (G - 1);
                const double tx = qx + field.dxv(qx, qy);
                const double ty = qy + field.dyv(qx, qy);
                b[gi * G + gj] = static_cast<T>(std::clamp(2.0 * tx - 1.0, -1.0, 1.0));
                b[G * G + gi * G + gj] = static_cast<T>(std::clamp(2.0 * ty - 1.0, -1.0, 1.0));
            }

        // Reject fields whose own map cannot reconstruct the page well;
        // they would make the supervision target unreachable.
        const Tensor<T> redone = dewarp(distorted4, reshape(bm, {1, 2, G, G}));
        if (psnr(redone, flat4) <= 25.0) continue;

        SamplePair<T> out;
        out.input = reshape(distorted4, {3, h, w});
        out.gt = flat.detach();
        out.task = kDewarpTaskName;
        out.seed = seed;
        out.has_bm = true;
        out.bm_gt = bm;
        return out;
    }
    throw std::runtime_error("gen_warp_pair: no acceptable warp field after 40 attempts (seed " +
                             std::to_string(seed) + ")");
}

// One-call sample factory used by the training loops and the synth tool.
template <class T>
SamplePair<T> make_sample(const std::string& task, std::uint64_t seed, long h, long w) {
    if (task == kDewarpTaskName) return gen_warp_pair<T>(seed, h, w);
    const Tensor<T> clean = gen_clean_doc<T>(Rng::mix(seed, detail::kSaltClean), h, w);
    return degrade(task, clean, seed);
}

} // namespace udr
