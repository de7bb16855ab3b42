#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "udr/tensor.hpp"

namespace udr {

namespace detail {

// Contiguous dot product with reassociation allowed so the compiler can
// vectorize the reduction. Weight gradients funnel through here; the
// looser float semantics stay deterministic within a build.
#if defined(__GNUC__) && !defined(__clang__)
template <class T>
__attribute__((optimize("unsafe-math-optimizations")))
inline T dot_n(const T* a, const T* b, long n) {
    T acc = 0;
    for (long i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}
#else
template <class T>
inline T dot_n(const T* a, const T* b, long n) {
    T a0 = 0, a1 = 0, a2 = 0, a3 = 0;
    const long m = n & ~3L;
    for (long i = 0; i < m; i += 4) {
        a0 += a[i] * b[i];
        a1 += a[i + 1] * b[i + 1];
        a2 += a[i + 2] * b[i + 2];
        a3 += a[i + 3] * b[i + 3];
    }
    for (long i = m; i < n; ++i) a0 += a[i] * b[i];
    return (a0 + a1) + (a2 + a3);
}
#endif

// Output indices o for which 0 <= o*stride + off < in_extent, clipped to
// [0, out_extent). Returns {lo, hi} inclusive; lo > hi means empty.
inline std::pair<long, long> tap_range(long off, long stride, long in_extent, long out_extent) {
    long lo = 0;
    if (off < 0) lo = (-off + stride - 1) / stride;
    const long num = in_extent - 1 - off;
    if (num < 0) return {1, 0};
    long hi = num / stride;
    if (hi > out_extent - 1) hi = out_extent - 1;
    return {lo, hi};
}

inline void check_rank4(const Shape& s, const char* op, const char* what) {
    if (s.size() != 4)
        throw std::invalid_argument(std::string(op) + ": " + what + " must be rank-4 [B,C,H,W], got " +
                                    shape_str(s));
}

} // namespace detail

// Cross-correlation with zero padding. The inner loops run over clipped
// output ranges so padding costs nothing and the stride-1 case reduces to
// contiguous axpy sweeps the compiler can vectorize. This is the hot path
// of the whole artifact; keep it free of per-pixel branches.
template <class T>
Tensor<T> conv2d(Tensor<T> input, Tensor<T> weight, Tensor<T> bias = {}, long stride = 1,
                 long zero_pad = 0, long dilation = 1) {
    detail::check_rank4(input.shape(), "conv2d", "input");
    if (weight.rank() != 4)
        throw std::invalid_argument("conv2d: weight must be rank-4 [Cout,Cin,kh,kw], got " +
                                    shape_str(weight.shape()));
    const long B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
    const long Cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != Cin)
        throw std::invalid_argument("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                                    " input channels, input has " + std::to_string(Cin));
    if (kh % 2 == 0 || kw % 2 == 0)
        throw std::invalid_argument("conv2d: kernel extents must be odd, got " + std::to_string(kh) +
                                    "x" + std::to_string(kw));
    if (stride < 1 || dilation < 1 || zero_pad < 0)
        throw std::invalid_argument("conv2d: stride/dilation must be >= 1 and pad >= 0");
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout))
        throw std::invalid_argument("conv2d: bias must be [Cout]=" + std::to_string(Cout) + ", got " +
                                    shape_str(bias.shape()));
    const long Hout = (H + 2 * zero_pad - dilation * (kh - 1) - 1) / stride + 1;
    const long Wout = (W + 2 * zero_pad - dilation * (kw - 1) - 1) / stride + 1;
    if (Hout < 1 || Wout < 1)
        throw std::invalid_argument("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                    " dilation " + std::to_string(dilation) + " does not fit input " +
                                    std::to_string(H) + "x" + std::to_string(W) + " with pad " +
                                    std::to_string(zero_pad));

    std::vector<T> out(static_cast<std::size_t>(B * Cout * Hout * Wout));
    const T* in = input.data().data();
    const T* wp = weight.data().data();
    for (long b = 0; b < B; ++b)
        for (long co = 0; co < Cout; ++co) {
            T* op = out.data() + (b * Cout + co) * Hout * Wout;
            const T bv = bias.defined() ? bias.data()[co] : T(0);
            for (long i = 0; i < Hout * Wout; ++i) op[i] = bv;
            for (long ci = 0; ci < Cin; ++ci) {
                const T* ip = in + (b * Cin + ci) * H * W;
                const T* wk = wp + (co * Cin + ci) * kh * kw;
                for (long ki = 0; ki < kh; ++ki) {
                    const long ih0 = ki * dilation - zero_pad;
                    const auto [oh_lo, oh_hi] = detail::tap_range(ih0, stride, H, Hout);
                    for (long kj = 0; kj < kw; ++kj) {
                        const T wv = wk[ki * kw + kj];
                        const long iw0 = kj * dilation - zero_pad;
                        const auto [ow_lo, ow_hi] = detail::tap_range(iw0, stride, W, Wout);
                        for (long oh = oh_lo; oh <= oh_hi; ++oh) {
                            const T* ir = ip + (oh * stride + ih0) * W + iw0;
                            T* orow = op + oh * Wout;
                            if (stride == 1) {
                                for (long ow = ow_lo; ow <= ow_hi; ++ow) orow[ow] += wv * ir[ow];
                            } else {
                                for (long ow = ow_lo; ow <= ow_hi; ++ow)
                                    orow[ow] += wv * ir[ow * stride];
                            }
                        }
                    }
                }
            }
        }

    auto bwd = [input, weight, bias, B, Cin, H, W, Cout, kh, kw, Hout, Wout, stride, zero_pad,
                dilation](typename Tensor<T>::Node& self) mutable {
        const T* g = self.grad.data();
        if (input.requires_grad()) {
            std::vector<T> gi(static_cast<std::size_t>(B * Cin * H * W), T(0));
            const T* wp = weight.data().data();
            for (long b = 0; b < B; ++b)
                for (long co = 0; co < Cout; ++co) {
                    const T* gp = g + (b * Cout + co) * Hout * Wout;
                    for (long ci = 0; ci < Cin; ++ci) {
                        T* gip = gi.data() + (b * Cin + ci) * H * W;
                        const T* wk = wp + (co * Cin + ci) * kh * kw;
                        for (long ki = 0; ki < kh; ++ki) {
                            const long ih0 = ki * dilation - zero_pad;
                            const auto [oh_lo, oh_hi] = detail::tap_range(ih0, stride, H, Hout);
                            for (long kj = 0; kj < kw; ++kj) {
                                const T wv = wk[ki * kw + kj];
                                const long iw0 = kj * dilation - zero_pad;
                                const auto [ow_lo, ow_hi] = detail::tap_range(iw0, stride, W, Wout);
                                for (long oh = oh_lo; oh <= oh_hi; ++oh) {
                                    T* gir = gip + (oh * stride + ih0) * W + iw0;
                                    const T* grow = gp + oh * Wout;
                                    if (stride == 1) {
                                        for (long ow = ow_lo; ow <= ow_hi; ++ow)
                                            gir[ow] += wv * grow[ow];
                                    } else {
                                        for (long ow = ow_lo; ow <= ow_hi; ++ow)
                                            gir[ow * stride] += wv * grow[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            input.accumulate_grad(gi);
        }
        if (weight.requires_grad()) {
            std::vector<T> gw(static_cast<std::size_t>(Cout * Cin * kh * kw), T(0));
            const T* in = input.data().data();
            for (long b = 0; b < B; ++b)
                for (long co = 0; co < Cout; ++co) {
                    const T* gp = g + (b * Cout + co) * Hout * Wout;
                    for (long ci = 0; ci < Cin; ++ci) {
                        const T* ip = in + (b * Cin + ci) * H * W;
                        T* gwk = gw.data() + (co * Cin + ci) * kh * kw;
                        for (long ki = 0; ki < kh; ++ki) {
                            const long ih0 = ki * dilation - zero_pad;
                            const auto [oh_lo, oh_hi] = detail::tap_range(ih0, stride, H, Hout);
                            for (long kj = 0; kj < kw; ++kj) {
                                const long iw0 = kj * dilation - zero_pad;
                                const auto [ow_lo, ow_hi] = detail::tap_range(iw0, stride, W, Wout);
                                T acc = 0;
                                for (long oh = oh_lo; oh <= oh_hi; ++oh) {
                                    const T* ir = ip + (oh * stride + ih0) * W + iw0;
                                    const T* grow = gp + oh * Wout;
                                    if (stride == 1) {
                                        acc += detail::dot_n(ir + ow_lo, grow + ow_lo,
                                                             ow_hi - ow_lo + 1);
                                    } else {
                                        for (long ow = ow_lo; ow <= ow_hi; ++ow)
                                            acc += ir[ow * stride] * grow[ow];
                                    }
                                }
                                gwk[ki * kw + kj] += acc;
                            }
                        }
                    }
                }
            weight.accumulate_grad(gw);
        }
        if (bias.defined() && bias.requires_grad()) {
            std::vector<T> gb(static_cast<std::size_t>(Cout), T(0));
            for (long b = 0; b < B; ++b)
                for (long co = 0; co < Cout; ++co) {
                    const T* gp = g + (b * Cout + co) * Hout * Wout;
                    T acc = 0;
                    for (long i = 0; i < Hout * Wout; ++i) acc += gp[i];
                    gb[static_cast<std::size_t>(co)] += acc;
                }
            bias.accumulate_grad(gb);
        }
    };
    return Tensor<T>::make_op({B, Cout, Hout, Wout}, std::move(out), {input, weight, bias},
                              std::move(bwd));
}

// y[..., o] = sum_i x[..., i] * w[o, i] + b[o]; leading axes are batch rows.
template <class T>
Tensor<T> linear(Tensor<T> x, Tensor<T> w, Tensor<T> b = {}) {
    if (w.rank() != 2)
        throw std::invalid_argument("linear: weight must be rank-2 [out,in], got " + shape_str(w.shape()));
    const long in = w.dim(1), outd = w.dim(0);
    if (x.rank() < 1 || x.dim(x.rank() - 1) != in)
        throw std::invalid_argument("linear: last input dim must be " + std::to_string(in) + ", got " +
                                    shape_str(x.shape()));
    if (b.defined() && (b.rank() != 1 || b.dim(0) != outd))
        throw std::invalid_argument("linear: bias must be [" + std::to_string(outd) + "], got " +
                                    shape_str(b.shape()));
    const long rows = x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = outd;

    std::vector<T> out(static_cast<std::size_t>(rows * outd));
    const T* xp = x.data().data();
    const T* wp = w.data().data();
    for (long r = 0; r < rows; ++r) {
        const T* xr = xp + r * in;
        T* yr = out.data() + r * outd;
        for (long o = 0; o < outd; ++o)
            yr[o] = (b.defined() ? b.data()[o] : T(0)) + detail::dot_n(xr, wp + o * in, in);
    }
    auto bwd = [x, w, b, rows, in, outd](typename Tensor<T>::Node& self) mutable {
        const T* g = self.grad.data();
        if (x.requires_grad()) {
            std::vector<T> gx(static_cast<std::size_t>(rows * in), T(0));
            const T* wp = w.data().data();
            for (long r = 0; r < rows; ++r) {
                const T* gr = g + r * outd;
                T* gxr = gx.data() + r * in;
                for (long o = 0; o < outd; ++o) {
                    const T gv = gr[o];
                    const T* wr = wp + o * in;
                    for (long i = 0; i < in; ++i) gxr[i] += gv * wr[i];
                }
            }
            x.accumulate_grad(gx);
        }
        if (w.requires_grad()) {
            std::vector<T> gw(static_cast<std::size_t>(outd * in), T(0));
            const T* xp = x.data().data();
            for (long r = 0; r < rows; ++r) {
                const T* gr = g + r * outd;
                const T* xr = xp + r * in;
                for (long o = 0; o < outd; ++o) {
                    const T gv = gr[o];
                    T* gwr = gw.data() + o * in;
                    for (long i = 0; i < in; ++i) gwr[i] += gv * xr[i];
                }
            }
            w.accumulate_grad(gw);
        }
        if (b.defined() && b.requires_grad()) {
            std::vector<T> gb(static_cast<std::size_t>(outd), T(0));
            for (long r = 0; r < rows; ++r)
                for (long o = 0; o < outd; ++o) gb[static_cast<std::size_t>(o)] += g[r * outd + o];
            b.accumulate_grad(gb);
        }
    };
    return Tensor<T>::make_op(std::move(out_shape), std::move(out), {x, w, b}, std::move(bwd));
}

// Per-sample per-channel shift, broadcast over the spatial grid.
template <class T>
Tensor<T> add_channel_bias(Tensor<T> x, Tensor<T> bias) {
    detail::check_rank4(x.shape(), "add_channel_bias", "input");
    const long B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (bias.rank() != 2 || bias.dim(0) != B || bias.dim(1) != C)
        throw std::invalid_argument("add_channel_bias: bias must be [B,C]=[" + std::to_string(B) + "," +
                                    std::to_string(C) + "], got " + shape_str(bias.shape()));
    std::vector<T> out(x.data().begin(), x.data().end());
    for (long bc = 0; bc < B * C; ++bc) {
        const T bv = bias.data()[bc];
        T* op = out.data() + bc * HW;
        for (long i = 0; i < HW; ++i) op[i] += bv;
    }
    auto bwd = [x, bias, B, C, HW](typename Tensor<T>::Node& self) mutable {
        x.accumulate_grad(self.grad);
        if (bias.requires_grad()) {
            std::vector<T> gb(static_cast<std::size_t>(B * C), T(0));
            for (long bc = 0; bc < B * C; ++bc) {
                const T* g = self.grad.data() + bc * HW;
                T acc = 0;
                for (long i = 0; i < HW; ++i) acc += g[i];
                gb[static_cast<std::size_t>(bc)] = acc;
            }
            bias.accumulate_grad(gb);
        }
    };
    return Tensor<T>::make_op(x.shape(), std::move(out), {x, bias}, std::move(bwd));
}

// Per-sample per-channel gain, broadcast over the spatial grid.
template <class T>
Tensor<T> scale_channels(Tensor<T> x, Tensor<T> s) {
    detail::check_rank4(x.shape(), "scale_channels", "input");
    const long B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (s.rank() != 2 || s.dim(0) != B || s.dim(1) != C)
        throw std::invalid_argument("scale_channels: scale must be [B,C]=[" + std::to_string(B) + "," +
                                    std::to_string(C) + "], got " + shape_str(s.shape()));
    std::vector<T> out(static_cast<std::size_t>(x.numel()));
    for (long bc = 0; bc < B * C; ++bc) {
        const T sv = s.data()[bc];
        const T* ip = x.data().data() + bc * HW;
        T* op = out.data() + bc * HW;
        for (long i = 0; i < HW; ++i) op[i] = sv * ip[i];
    }
    auto bwd = [x, s, B, C, HW](typename Tensor<T>::Node& self) mutable {
        if (x.requires_grad()) {
            std::vector<T> gx(self.grad.size());
            for (long bc = 0; bc < B * C; ++bc) {
                const T sv = s.data()[bc];
                const T* g = self.grad.data() + bc * HW;
                T* gp = gx.data() + bc * HW;
                for (long i = 0; i < HW; ++i) gp[i] = sv * g[i];
            }
            x.accumulate_grad(gx);
        }
        if (s.requires_grad()) {
            std::vector<T> gs(static_cast<std::size_t>(B * C), T(0));
            for (long bc = 0; bc < B * C; ++bc) {
                const T* g = self.grad.data() + bc * HW;
                const T* ip = x.data().data() + bc * HW;
                T acc = 0;
                for (long i = 0; i < HW; ++i) acc += g[i] * ip[i];
                gs[static_cast<std::size_t>(bc)] = acc;
            }
            s.accumulate_grad(gs);
        }
    };
    return Tensor<T>::make_op(x.shape(), std::move(out), {x, s}, std::move(bwd));
}

template <class T>
Tensor<T> global_avg_pool(Tensor<T> x) {
    detail::check_rank4(x.shape(), "global_avg_pool", "input");
    const long B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const T inv = T(1) / static_cast<T>(HW);
    std::vector<T> out(static_cast<std::size_t>(B * C));
    for (long bc = 0; bc < B * C; ++bc) {
        const T* ip = x.data().data() + bc * HW;
        T acc = 0;
        for (long i = 0; i < HW; ++i) acc += ip[i];
        out[static_cast<std::size_t>(bc)] = acc * inv;
    }
    auto bwd = [x, B, C, HW, inv](typename Tensor<T>::Node& self) mutable {
        std::vector<T> gx(static_cast<std::size_t>(x.numel()));
        for (long bc = 0; bc < B * C; ++bc) {
            const T gv = self.grad[static_cast<std::size_t>(bc)] * inv;
            T* gp = gx.data() + bc * HW;
            for (long i = 0; i < HW; ++i) gp[i] = gv;
        }
        x.accumulate_grad(gx);
    };
    return Tensor<T>::make_op({B, C}, std::move(out), {x}, std::move(bwd));
}

// Mean over floor/ceil bins: bin i spans [floor(i*H/oh), ceil((i+1)*H/oh)).
// Bins may overlap for awkward ratios; each output is the mean of its bin.
template <class T>
Tensor<T> adaptive_avg_pool(Tensor<T> x, long out_h, long out_w) {
    detail::check_rank4(x.shape(), "adaptive_avg_pool", "input");
    if (out_h < 1 || out_w < 1)
        throw std::invalid_argument("adaptive_avg_pool: output extents must be >= 1, got " +
                                    std::to_string(out_h) + "x" + std::to_string(out_w));
    const long B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto lo = [](long i, long n, long out) { return (i * n) / out; };
    auto hi = [](long i, long n, long out) { return ((i + 1) * n + out - 1) / out; };

    std::vector<T> out(static_cast<std::size_t>(B * C * out_h * out_w));
    for (long bc = 0; bc < B * C; ++bc) {
        const T* ip = x.data().data() + bc * H * W;
        T* op = out.data() + bc * out_h * out_w;
        for (long i = 0; i < out_h; ++i) {
            const long h0 = lo(i, H, out_h), h1 = hi(i, H, out_h);
            for (long j = 0; j < out_w; ++j) {
                const long w0 = lo(j, W, out_w), w1 = hi(j, W, out_w);
                T acc = 0;
                for (long ih = h0; ih < h1; ++ih)
                    for (long iw = w0; iw < w1; ++iw) acc += ip[ih * W + iw];
                op[i * out_w + j] = acc / static_cast<T>((h1 - h0) * (w1 - w0));
            }
        }
    }
    auto bwd = [x, B, C, H, W, out_h, out_w, lo, hi](typename Tensor<T>::Node& self) mutable {
        std::vector<T> gx(static_cast<std::size_t>(x.numel()), T(0));
        for (long bc = 0; bc < B * C; ++bc) {
            T* gp = gx.data() + bc * H * W;
            const T* g = self.grad.data() + bc * out_h * out_w;
            for (long i = 0; i < out_h; ++i) {
                const long h0 = lo(i, H, out_h), h1 = hi(i, H, out_h);
                for (long j = 0; j < out_w; ++j) {
                    const long w0 = lo(j, W, out_w), w1 = hi(j, W, out_w);
                    const T gv = g[i * out_w + j] / static_cast<T>((h1 - h0) * (w1 - w0));
                    for (long ih = h0; ih < h1; ++ih)
                        for (long iw = w0; iw < w1; ++iw) gp[ih * W + iw] += gv;
                }
            }
        }
        x.accumulate_grad(gx);
    };
    return Tensor<T>::make_op({B, C, out_h, out_w}, std::move(out), {x}, std::move(bwd));
}

template <class T>
Tensor<T> upsample_nearest2x(Tensor<T> x) {
    detail::check_rank4(x.shape(), "upsample_nearest2x", "input");
    const long B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    std::vector<T> out(static_cast<std::size_t>(B * C * 4 * H * W));
    for (long bc = 0; bc < B * C; ++bc) {
        const T* ip = x.data().data() + bc * H * W;
        T* op = out.data() + bc * 4 * H * W;
        const long Wo = 2 * W;
        for (long h = 0; h < H; ++h)
            for (long w = 0; w < W; ++w) {
                const T v = ip[h * W + w];
                T* o0 = op + (2 * h) * Wo + 2 * w;
                o0[0] = v;
                o0[1] = v;
                o0[Wo] = v;
                o0[Wo + 1] = v;
            }
    }
    auto bwd = [x, B, C, H, W](typename Tensor<T>::Node& self) mutable {
        std::vector<T> gx(static_cast<std::size_t>(x.numel()));
        const long Wo = 2 * W;
        for (long bc = 0; bc < B * C; ++bc) {
            const T* g = self.grad.data() + bc * 4 * H * W;
            T* gp = gx.data() + bc * H * W;
            for (long h = 0; h < H; ++h)
                for (long w = 0; w < W; ++w) {
                    const T* g0 = g + (2 * h) * Wo + 2 * w;
                    gp[h * W + w] = g0[0] + g0[1] + g0[Wo] + g0[Wo + 1];
                }
        }
        x.accumulate_grad(gx);
    };
    return Tensor<T>::make_op({B, C, 2 * H, 2 * W}, std::move(out), {x}, std::move(bwd));
}

// Bilinear sampling through normalized coordinates. Grid channel 0 carries
// x (width) and channel 1 carries y (height); (-1,-1) is the center of
// pixel (0,0) and (1,1) the center of (W-1,H-1). Coordinates outside the
// image clamp to the border, and their positional gradient is zero there.
template <class T>
Tensor<T> bilinear_grid_sample(Tensor<T> input, Tensor<T> grid) {
    detail::check_rank4(input.shape(), "bilinear_grid_sample", "input");
    detail::check_rank4(grid.shape(), "bilinear_grid_sample", "grid");
    if (grid.dim(1) != 2)
        throw std::invalid_argument("bilinear_grid_sample: grid needs 2 channels (x,y), got " +
                                    std::to_string(grid.dim(1)));
    const long B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (grid.dim(0) != B)
        throw std::invalid_argument("bilinear_grid_sample: batch mismatch, input " + std::to_string(B) +
                                    " vs grid " + std::to_string(grid.dim(0)));
    const long Hg = grid.dim(2), Wg = grid.dim(3), Ng = Hg * Wg;

    // Resolve each grid point to its cell corner, fractions, and the
    // inside mask once; forward and backward share the decomposition.
    struct Pt {
        long x0, y0;
        T fx, fy;
        T dx, dy; // d(pixel coord)/d(grid value), zero when clamped
    };
    std::vector<Pt> pts(static_cast<std::size_t>(B * Ng));
    const T sx = W > 1 ? T(0.5) * (W - 1) : T(0);
    const T sy = H > 1 ? T(0.5) * (H - 1) : T(0);
    for (long b = 0; b < B; ++b) {
        const T* gx = grid.data().data() + (b * 2 + 0) * Ng;
        const T* gy = grid.data().data() + (b * 2 + 1) * Ng;
        for (long i = 0; i < Ng; ++i) {
            T px = (gx[i] + T(1)) * sx;
            T py = (gy[i] + T(1)) * sy;
            Pt& p = pts[static_cast<std::size_t>(b * Ng + i)];
            p.dx = (px >= T(0) && px <= T(W - 1)) ? sx : T(0);
            p.dy = (py >= T(0) && py <= T(H - 1)) ? sy : T(0);
            px = std::min(T(W - 1), std::max(T(0), px));
            py = std::min(T(H - 1), std::max(T(0), py));
            long x0 = static_cast<long>(std::floor(px));
            long y0 = static_cast<long>(std::floor(py));
            if (x0 > W - 2) x0 = std::max<long>(0, W - 2);
            if (y0 > H - 2) y0 = std::max<long>(0, H - 2);
            p.x0 = x0;
            p.y0 = y0;
            p.fx = W > 1 ? px - static_cast<T>(x0) : T(0);
            p.fy = H > 1 ? py - static_cast<T>(y0) : T(0);
        }
    }
    const long x_step = W > 1 ? 1 : 0;
    const long y_step = H > 1 ? W : 0;

    std::vector<T> out(static_cast<std::size_t>(B * C * Ng));
    for (long b = 0; b < B; ++b)
        for (long c = 0; c < C; ++c) {
            const T* ip = input.data().data() + (b * C + c) * H * W;
            T* op = out.data() + (b * C + c) * Ng;
            for (long i = 0; i < Ng; ++i) {
                const Pt& p = pts[static_cast<std::size_t>(b * Ng + i)];
                const T* base = ip + p.y0 * W + p.x0;
                const T v00 = base[0], v01 = base[x_step];
                const T v10 = base[y_step], v11 = base[y_step + x_step];
                const T top = v00 + p.fx * (v01 - v00);
                const T bot = v10 + p.fx * (v11 - v10);
                op[i] = top + p.fy * (bot - top);
            }
        }
    auto bwd = [input, grid, pts, B, C, H, W, Ng, x_step, y_step](typename Tensor<T>::Node& self) mutable {
        const T* g = self.grad.data();
        if (input.requires_grad()) {
            std::vector<T> gi(static_cast<std::size_t>(input.numel()), T(0));
            for (long b = 0; b < B; ++b)
                for (long c = 0; c < C; ++c) {
                    T* gp = gi.data() + (b * C + c) * H * W;
                    const T* go = g + (b * C + c) * Ng;
                    for (long i = 0; i < Ng; ++i) {
                        const Pt& p = pts[static_cast<std::size_t>(b * Ng + i)];
                        T* base = gp + p.y0 * W + p.x0;
                        const T gv = go[i];
                        const T wx1 = p.fx, wx0 = T(1) - p.fx;
                        const T wy1 = p.fy, wy0 = T(1) - p.fy;
                        base[0] += gv * wx0 * wy0;
                        base[x_step] += gv * wx1 * wy0;
                        base[y_step] += gv * wx0 * wy1;
                        base[y_step + x_step] += gv * wx1 * wy1;
                    }
                }
            input.accumulate_grad(gi);
        }
        if (grid.requires_grad()) {
            std::vector<T> gg(static_cast<std::size_t>(grid.numel()), T(0));
            for (long b = 0; b < B; ++b) {
                T* ggx = gg.data() + (b * 2 + 0) * Ng;
                T* ggy = gg.data() + (b * 2 + 1) * Ng;
                for (long c = 0; c < C; ++c) {
                    const T* ip = input.data().data() + (b * C + c) * H * W;
                    const T* go = g + (b * C + c) * Ng;
                    for (long i = 0; i < Ng; ++i) {
                        const Pt& p = pts[static_cast<std::size_t>(b * Ng + i)];
                        const T* base = ip + p.y0 * W + p.x0;
                        const T v00 = base[0], v01 = base[x_step];
                        const T v10 = base[y_step], v11 = base[y_step + x_step];
                        const T gv = go[i];
                        // d out / d px and d out / d py of the bilinear form
                        const T dpx = (T(1) - p.fy) * (v01 - v00) + p.fy * (v11 - v10);
                        const T dpy = (T(1) - p.fx) * (v10 - v00) + p.fx * (v11 - v01);
                        ggx[i] += gv * dpx * p.dx;
                        ggy[i] += gv * dpy * p.dy;
                    }
                }
            }
            grid.accumulate_grad(gg);
        }
    };
    return Tensor<T>::make_op({B, C, Hg, Wg}, std::move(out), {input, grid}, std::move(bwd));
}

// Identity sampling grid for a target resolution: linspace over [-1,1] per
// axis (a single-point axis sits at -1, matching linspace's first sample).
template <class T>
Tensor<T> identity_grid(long batch, long out_h, long out_w) {
    if (out_h < 1 || out_w < 1)
        throw std::invalid_argument("identity_grid: extents must be >= 1");
    Tensor<T> g = Tensor<T>::zeros({batch, 2, out_h, out_w});
    T* gx = g.data().data();
    for (long b = 0; b < batch; ++b)
        for (long i = 0; i < out_h; ++i)
            for (long j = 0; j < out_w; ++j) {
                const T x = out_w > 1 ? T(-1) + T(2) * j / static_cast<T>(out_w - 1) : T(-1);
                const T y = out_h > 1 ? T(-1) + T(2) * i / static_cast<T>(out_h - 1) : T(-1);
                gx[((b * 2 + 0) * out_h + i) * out_w + j] = x;
                gx[((b * 2 + 1) * out_h + i) * out_w + j] = y;
            }
    return g;
}

template <class T>
Tensor<T> bilinear_resize(Tensor<T> x, long out_h, long out_w) {
    detail::check_rank4(x.shape(), "bilinear_resize", "input");
    if (out_h < 1 || out_w < 1)
        throw std::invalid_argument("bilinear_resize: extents must be >= 1, got " + std::to_string(out_h) +
                                    "x" + std::to_string(out_w));
    return bilinear_grid_sample(x, identity_grid<T>(x.dim(0), out_h, out_w));
}

// Reflect padding (edge pixel not duplicated). fold() walks the triangular
// wave so pads wider than the image stay well defined.
inline long mirror_fold(long i, long n) {
    if (n == 1) return 0;
    const long period = 2 * (n - 1);
    long m = i % period;
    if (m < 0) m += period;
    return m < n ? m : period - m;
}

template <class T>
Tensor<T> reflect_pad2d(Tensor<T> x, long pad_h, long pad_w) {
    detail::check_rank4(x.shape(), "reflect_pad2d", "input");
    if (pad_h < 0 || pad_w < 0) throw std::invalid_argument("reflect_pad2d: negative pad");
    const long B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const long Ho = H + 2 * pad_h, Wo = W + 2 * pad_w;
    std::vector<T> out(static_cast<std::size_t>(B * C * Ho * Wo));
    for (long bc = 0; bc < B * C; ++bc) {
        const T* ip = x.data().data() + bc * H * W;
        T* op = out.data() + bc * Ho * Wo;
        for (long i = 0; i < Ho; ++i) {
            const long si = mirror_fold(i - pad_h, H);
            for (long j = 0; j < Wo; ++j) op[i * Wo + j] = ip[si * W + mirror_fold(j - pad_w, W)];
        }
    }
    auto bwd = [x, B, C, H, W, Ho, Wo, pad_h, pad_w](typename Tensor<T>::Node& self) mutable {
        std::vector<T> gx(static_cast<std::size_t>(x.numel()), T(0));
        for (long bc = 0; bc < B * C; ++bc) {
            const T* g = self.grad.data() + bc * Ho * Wo;
            T* gp = gx.data() + bc * H * W;
            for (long i = 0; i < Ho; ++i) {
                const long si = mirror_fold(i - pad_h, H);
                for (long j = 0; j < Wo; ++j) gp[si * W + mirror_fold(j - pad_w, W)] += g[i * Wo + j];
            }
        }
        x.accumulate_grad(gx);
    };
    return Tensor<T>::make_op({B, C, Ho, Wo}, std::move(out), {x}, std::move(bwd));
}

template <class T>
Tensor<T> crop2d(Tensor<T> x, long top, long left, long h, long w) {
    detail::check_rank4(x.shape(), "crop2d", "input");
    const long B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (top < 0 || left < 0 || h < 1 || w < 1 || top + h > H || left + w > W)
        throw std::invalid_argument("crop2d: window " + std::to_string(h) + "x" + std::to_string(w) +
                                    "+" + std::to_string(top) + "+" + std::to_string(left) +
                                    " outside input " + shape_str(x.shape()));
    std::vector<T> out(static_cast<std::size_t>(B * C * h * w));
    for (long bc = 0; bc < B * C; ++bc) {
        const T* ip = x.data().data() + bc * H * W;
        T* op = out.data() + bc * h * w;
        for (long i = 0; i < h; ++i)
            std::copy_n(ip + (top + i) * W + left, w, op + i * w);
    }
    auto bwd = [x, B, C, H, W, top, left, h, w](typename Tensor<T>::Node& self) mutable {
        std::vector<T> gx(static_cast<std::size_t>(x.numel()), T(0));
        for (long bc = 0; bc < B * C; ++bc) {
            const T* g = self.grad.data() + bc * h * w;
            T* gp = gx.data() + bc * H * W;
            for (long i = 0; i < h; ++i)
                for (long j = 0; j < w; ++j) gp[(top + i) * W + left + j] += g[i * w + j];
        }
        x.accumulate_grad(gx);
    };
    return Tensor<T>::make_op({B, C, h, w}, std::move(out), {x}, std::move(bwd));
}

// Single-head scaled dot-product attention over the flattened spatial grid
// with a residual connection; built from graph primitives so the gradient
// needs no dedicated backward.
template <class T>
Tensor<T> self_attention(Tensor<T> x, Tensor<T> wq, Tensor<T> bq, Tensor<T> wk, Tensor<T> bk,
                         Tensor<T> wv, Tensor<T> bv, Tensor<T> wo, Tensor<T> bo) {
    detail::check_rank4(x.shape(), "self_attention", "input");
    const long B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    for (const auto* w : {&wq, &wk, &wv, &wo})
        if (w->rank() != 2 || w->dim(0) != C || w->dim(1) != C)
            throw std::invalid_argument("self_attention: projection weights must be [" +
                                        std::to_string(C) + "," + std::to_string(C) + "], got " +
                                        shape_str(w->shape()));
    for (long i = 0; i < x.numel(); ++i)
        if (!std::isfinite(x.data()[i]))
            throw std::invalid_argument("self_attention: non-finite input value");

    auto tokens = transpose_last2(reshape(x, {B, C, H * W})); // [B,N,C]
    auto q = linear(tokens, wq, bq);
    auto k = linear(tokens, wk, bk);
    auto v = linear(tokens, wv, bv);
    auto logits = scale(bmm(q, transpose_last2(k)), T(1) / std::sqrt(static_cast<T>(C)));
    auto att = softmax_lastdim(logits);        // [B,N,N]
    auto mixed = linear(bmm(att, v), wo, bo);  // [B,N,C]
    auto y = reshape(transpose_last2(mixed), {B, C, H, W});
    return add(x, y);
}

// Sinusoidal position code for the diffusion step: half sines, half
// cosines on a geometric frequency ladder with base 10000.
template <class T>
Tensor<T> time_embedding(long t, long dim) {
    if (dim < 2 || dim % 2 != 0)
        throw std::invalid_argument("time_embedding: dim must be even and >= 2, got " +
                                    std::to_string(dim));
    const long half = dim / 2;
    Tensor<T> out = Tensor<T>::zeros({dim});
    for (long i = 0; i < half; ++i) {
        const double expo = half > 1 ? static_cast<double>(i) / static_cast<double>(half - 1) : 0.0;
        const double omega = std::exp(-std::log(10000.0) * expo);
        out.data()[i] = static_cast<T>(std::sin(static_cast<double>(t) * omega));
        out.data()[half + i] = static_cast<T>(std::cos(static_cast<double>(t) * omega));
    }
    return out;
}

} // namespace udr
