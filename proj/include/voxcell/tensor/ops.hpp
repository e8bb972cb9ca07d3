#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include "graph.hpp"

namespace voxcell::tc {

namespace detail {

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* what) {
    if (t.rank() != rank)
        fail(ErrorKind::ShapeMismatch, std::string(what) + " expects rank " + std::to_string(rank) +
                                           ", got " + shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* what) {
    if (a.shape() != b.shape())
        fail(ErrorKind::ShapeMismatch,
             std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline long floor_div(long a, long b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
inline long ceil_div(long a, long b) { return -floor_div(-a, b); }

// Output indices o for which o * stride + offset lands inside [0, extent).
inline std::pair<long, long> valid_range(long offset, long stride, long extent, long out_extent) {
    const long lo = std::max(0L, ceil_div(-offset, stride));
    const long hi = std::min(out_extent - 1, floor_div(extent - 1 - offset, stride));
    return {lo, hi};
}

}  // namespace detail

struct Conv3dGeometry {
    long stride = 1;
    long pad_lo = 0;
    long pad_hi = 0;

    static Conv3dGeometry symmetric(long stride, long pad) { return {stride, pad, pad}; }
    /// Output extent equals input extent at stride 1 (extra padding goes high).
    static Conv3dGeometry same(long kernel) { return {1, (kernel - 1) / 2, kernel - 1 - (kernel - 1) / 2}; }

    long out_extent(long in, long k) const { return (in + pad_lo + pad_hi - k) / stride + 1; }
};

namespace kernels {

namespace unit_stride {

// Stride-1 convolutions on a zero-padded copy of the input. Outputs live in
// the padded row/plane pitch, so every kernel tap becomes one long
// contiguous loop over `span` elements.
struct Layout {
    long D, H, W, OD, OH, OW, Dp, Hp, Wp, pad, K;
    long plane() const { return Hp * Wp; }
    long volume() const { return Dp * Hp * Wp; }
    long out_volume() const { return OD * Hp * Wp; }
    long span() const { return (OD - 1) * Hp * Wp + (OH - 1) * Wp + OW; }
    long offset(long kd, long kh, long kw) const { return (kd * Hp + kh) * Wp + kw; }
};

inline Layout layout(long D, long H, long W, long K, const Conv3dGeometry& g) {
    Layout l{D, H, W, 0, 0, 0, D + g.pad_lo + g.pad_hi, H + g.pad_lo + g.pad_hi, W + g.pad_lo + g.pad_hi, g.pad_lo, K};
    l.OD = l.Dp - K + 1;
    l.OH = l.Hp - K + 1;
    l.OW = l.Wp - K + 1;
    return l;
}

template <typename T>
void pad_input(const T* src, const Layout& l, T* dst) {
    std::fill(dst, dst + l.volume(), T(0));
    for (long d = 0; d < l.D; ++d)
        for (long h = 0; h < l.H; ++h)
            std::copy(src + (d * l.H + h) * l.W, src + (d * l.H + h + 1) * l.W,
                      dst + ((d + l.pad) * l.Hp + h + l.pad) * l.Wp + l.pad);
}

template <typename T>
void pitch_output(const T* src, const Layout& l, T* dst) {
    std::fill(dst, dst + l.out_volume(), T(0));
    for (long d = 0; d < l.OD; ++d)
        for (long h = 0; h < l.OH; ++h)
            std::copy(src + (d * l.OH + h) * l.OW, src + (d * l.OH + h + 1) * l.OW, dst + (d * l.Hp + h) * l.Wp);
}

template <typename T>
void padded_copies(const T* src, long count, const Layout& l, std::vector<T>& out) {
    out.assign(static_cast<std::size_t>(count * l.volume()), T(0));
#pragma omp parallel for schedule(static)
    for (long i = 0; i < count; ++i) pad_input(src + i * l.D * l.H * l.W, l, out.data() + i * l.volume());
}

template <typename T>
void pitched_copies(const T* src, long count, const Layout& l, std::vector<T>& out) {
    out.assign(static_cast<std::size_t>(count * l.out_volume()), T(0));
#pragma omp parallel for schedule(static)
    for (long i = 0; i < count; ++i) pitch_output(src + i * l.OD * l.OH * l.OW, l, out.data() + i * l.out_volume());
}

template <typename T>
void forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b, const Conv3dGeometry& g, Tensor<T>& y) {
    const long N = static_cast<long>(x.dim(0)), C = static_cast<long>(x.dim(1)), O = static_cast<long>(w.dim(0));
    const long K = static_cast<long>(w.dim(2));
    const auto l = layout(static_cast<long>(x.dim(2)), static_cast<long>(x.dim(3)), static_cast<long>(x.dim(4)), K, g);
    std::vector<T> xpad;
    padded_copies(x.data(), N * C, l, xpad);
    const long span = l.span(), K3 = K * K * K;
    const T* wp = w.data();
    T* yp = y.data();
#pragma omp parallel for schedule(static)
    for (long no = 0; no < N * O; ++no) {
        const long n = no / O, o = no % O;
        std::vector<T> acc(static_cast<std::size_t>(l.out_volume()), T(0));
        T* __restrict a = acc.data();
        for (long c = 0; c < C; ++c) {
            const T* xc = xpad.data() + (n * C + c) * l.volume();
            const T* wc = wp + (o * C + c) * K3;
            for (long kd = 0; kd < K; ++kd)
                for (long kh = 0; kh < K; ++kh)
                    for (long kw = 0; kw < K; ++kw) {
                        const T wv = wc[(kd * K + kh) * K + kw];
                        const T* __restrict src = xc + l.offset(kd, kh, kw);
                        for (long q = 0; q < span; ++q) a[q] += wv * src[q];
                    }
        }
        const T bias = b ? (*b)[static_cast<std::size_t>(o)] : T(0);
        T* yo = yp + no * l.OD * l.OH * l.OW;
        for (long d = 0; d < l.OD; ++d)
            for (long h = 0; h < l.OH; ++h)
                for (long wi = 0; wi < l.OW; ++wi) yo[(d * l.OH + h) * l.OW + wi] = bias + a[(d * l.Hp + h) * l.Wp + wi];
    }
}

template <typename T>
void backward_input(const Tensor<T>& gy, const Tensor<T>& w, const Conv3dGeometry& g, Tensor<T>& gx) {
    const long N = static_cast<long>(gx.dim(0)), C = static_cast<long>(gx.dim(1)), O = static_cast<long>(w.dim(0));
    const long K = static_cast<long>(w.dim(2));
    const auto l = layout(static_cast<long>(gx.dim(2)), static_cast<long>(gx.dim(3)), static_cast<long>(gx.dim(4)), K, g);
    std::vector<T> gyq;
    pitched_copies(gy.data(), N * O, l, gyq);
    const long span = l.span(), K3 = K * K * K;
    const T* wp = w.data();
    T* gxp = gx.data();
#pragma omp parallel for schedule(static)
    for (long nc = 0; nc < N * C; ++nc) {
        const long n = nc / C, c = nc % C;
        std::vector<T> acc(static_cast<std::size_t>(l.volume()), T(0));
        for (long o = 0; o < O; ++o) {
            const T* __restrict src = gyq.data() + (n * O + o) * l.out_volume();
            const T* wc = wp + (o * C + c) * K3;
            for (long kd = 0; kd < K; ++kd)
                for (long kh = 0; kh < K; ++kh)
                    for (long kw = 0; kw < K; ++kw) {
                        const T wv = wc[(kd * K + kh) * K + kw];
                        T* __restrict dst = acc.data() + l.offset(kd, kh, kw);
                        for (long q = 0; q < span; ++q) dst[q] += wv * src[q];
                    }
        }
        T* gxc = gxp + nc * l.D * l.H * l.W;
        for (long d = 0; d < l.D; ++d)
            for (long h = 0; h < l.H; ++h)
                for (long wi = 0; wi < l.W; ++wi)
                    gxc[(d * l.H + h) * l.W + wi] += acc[((d + l.pad) * l.Hp + h + l.pad) * l.Wp + wi + l.pad];
    }
}

template <typename T>
void backward_weight(const Tensor<T>& x, const Tensor<T>& gy, const Conv3dGeometry& g, Tensor<T>& gw) {
    const long N = static_cast<long>(x.dim(0)), C = static_cast<long>(x.dim(1)), O = static_cast<long>(gw.dim(0));
    const long K = static_cast<long>(gw.dim(2));
    const auto l = layout(static_cast<long>(x.dim(2)), static_cast<long>(x.dim(3)), static_cast<long>(x.dim(4)), K, g);
    std::vector<T> xpad, gyq;
    padded_copies(x.data(), N * C, l, xpad);
    pitched_copies(gy.data(), N * O, l, gyq);
    const long span = l.span(), K3 = K * K * K;
    T* gwp = gw.data();
#pragma omp parallel for schedule(static)
    for (long oc = 0; oc < O * C; ++oc) {
        const long o = oc / C, c = oc % C;
        for (long t = 0; t < K3; ++t) {
            const long kd = t / (K * K), kh = (t / K) % K, kw = t % K;
            T acc = 0;
            for (long n = 0; n < N; ++n) {
                const T* __restrict a = gyq.data() + (n * O + o) * l.out_volume();
                const T* __restrict b = xpad.data() + (n * C + c) * l.volume() + l.offset(kd, kh, kw);
                T dot = 0;
#pragma omp simd reduction(+ : dot)
                for (long q = 0; q < span; ++q) dot += a[q] * b[q];
                acc += dot;
            }
            gwp[oc * K3 + t] += acc;
        }
    }
}

}  // namespace unit_stride

/// y[n,o] += sum_c w[o,c] (*) x[n,c]; cross-correlation, cubic kernels.
template <typename T>
void conv3d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b, const Conv3dGeometry& g,
                    Tensor<T>& y) {
    if (g.stride == 1) return unit_stride::forward(x, w, b, g, y);
    const long N = static_cast<long>(x.dim(0)), C = static_cast<long>(x.dim(1));
    const long D = static_cast<long>(x.dim(2)), H = static_cast<long>(x.dim(3)), W = static_cast<long>(x.dim(4));
    const long O = static_cast<long>(w.dim(0)), K = static_cast<long>(w.dim(2));
    const long OD = static_cast<long>(y.dim(2)), OH = static_cast<long>(y.dim(3)), OW = static_cast<long>(y.dim(4));
    const long s = g.stride;
    const T* xp = x.data();
    const T* wp = w.data();
    T* yp = y.data();

#pragma omp parallel for schedule(static)
    for (long no = 0; no < N * O; ++no) {
        const long n = no / O, o = no % O;
        T* yo = yp + no * OD * OH * OW;
        std::fill(yo, yo + OD * OH * OW, b ? (*b)[static_cast<std::size_t>(o)] : T(0));
        for (long c = 0; c < C; ++c) {
            const T* xc = xp + (n * C + c) * D * H * W;
            const T* wc = wp + (o * C + c) * K * K * K;
            for (long kd = 0; kd < K; ++kd) {
                const auto [d0, d1] = detail::valid_range(kd - g.pad_lo, s, D, OD);
                for (long kh = 0; kh < K; ++kh) {
                    const auto [h0, h1] = detail::valid_range(kh - g.pad_lo, s, H, OH);
                    for (long kw = 0; kw < K; ++kw) {
                        const auto [w0, w1] = detail::valid_range(kw - g.pad_lo, s, W, OW);
                        const T wv = wc[(kd * K + kh) * K + kw];
                        if (w0 > w1) continue;
                        for (long od = d0; od <= d1; ++od) {
                            const long id = od * s + kd - g.pad_lo;
                            for (long oh = h0; oh <= h1; ++oh) {
                                const long ih = oh * s + kh - g.pad_lo;
                                T* yrow = yo + (od * OH + oh) * OW;
                                const T* xrow = xc + (id * H + ih) * W;
                                const long shift = kw - g.pad_lo;
                                if (s == 1) {
                                    for (long ow = w0; ow <= w1; ++ow) yrow[ow] += wv * xrow[ow + shift];
                                } else {
                                    for (long ow = w0; ow <= w1; ++ow) yrow[ow] += wv * xrow[ow * s + shift];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv3d_backward_input(const Tensor<T>& gy, const Tensor<T>& w, const Conv3dGeometry& g, Tensor<T>& gx) {
    if (g.stride == 1) return unit_stride::backward_input(gy, w, g, gx);
    const long N = static_cast<long>(gx.dim(0)), C = static_cast<long>(gx.dim(1));
    const long D = static_cast<long>(gx.dim(2)), H = static_cast<long>(gx.dim(3)), W = static_cast<long>(gx.dim(4));
    const long O = static_cast<long>(w.dim(0)), K = static_cast<long>(w.dim(2));
    const long OD = static_cast<long>(gy.dim(2)), OH = static_cast<long>(gy.dim(3)), OW = static_cast<long>(gy.dim(4));
    const long s = g.stride;
    const T* gyp = gy.data();
    const T* wp = w.data();
    T* gxp = gx.data();

#pragma omp parallel for schedule(static)
    for (long nc = 0; nc < N * C; ++nc) {
        const long n = nc / C, c = nc % C;
        T* gxc = gxp + nc * D * H * W;
        for (long o = 0; o < O; ++o) {
            const T* gyo = gyp + (n * O + o) * OD * OH * OW;
            const T* wc = wp + (o * C + c) * K * K * K;
            for (long kd = 0; kd < K; ++kd) {
                const auto [d0, d1] = detail::valid_range(kd - g.pad_lo, s, D, OD);
                for (long kh = 0; kh < K; ++kh) {
                    const auto [h0, h1] = detail::valid_range(kh - g.pad_lo, s, H, OH);
                    for (long kw = 0; kw < K; ++kw) {
                        const auto [w0, w1] = detail::valid_range(kw - g.pad_lo, s, W, OW);
                        const T wv = wc[(kd * K + kh) * K + kw];
                        if (w0 > w1) continue;
                        for (long od = d0; od <= d1; ++od) {
                            const long id = od * s + kd - g.pad_lo;
                            for (long oh = h0; oh <= h1; ++oh) {
                                const long ih = oh * s + kh - g.pad_lo;
                                const T* gyrow = gyo + (od * OH + oh) * OW;
                                T* gxrow = gxc + (id * H + ih) * W;
                                const long shift = kw - g.pad_lo;
                                if (s == 1) {
                                    for (long ow = w0; ow <= w1; ++ow) gxrow[ow + shift] += wv * gyrow[ow];
                                } else {
                                    for (long ow = w0; ow <= w1; ++ow) gxrow[ow * s + shift] += wv * gyrow[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv3d_backward_weight(const Tensor<T>& x, const Tensor<T>& gy, const Conv3dGeometry& g, Tensor<T>& gw) {
    if (g.stride == 1) return unit_stride::backward_weight(x, gy, g, gw);
    const long N = static_cast<long>(x.dim(0)), C = static_cast<long>(x.dim(1));
    const long D = static_cast<long>(x.dim(2)), H = static_cast<long>(x.dim(3)), W = static_cast<long>(x.dim(4));
    const long O = static_cast<long>(gw.dim(0)), K = static_cast<long>(gw.dim(2));
    const long OD = static_cast<long>(gy.dim(2)), OH = static_cast<long>(gy.dim(3)), OW = static_cast<long>(gy.dim(4));
    const long s = g.stride;
    const T* xp = x.data();
    const T* gyp = gy.data();
    T* gwp = gw.data();

#pragma omp parallel for schedule(static)
    for (long oc = 0; oc < O * C; ++oc) {
        const long o = oc / C, c = oc % C;
        T* gwc = gwp + oc * K * K * K;
        for (long kd = 0; kd < K; ++kd) {
            const auto [d0, d1] = detail::valid_range(kd - g.pad_lo, s, D, OD);
            for (long kh = 0; kh < K; ++kh) {
                const auto [h0, h1] = detail::valid_range(kh - g.pad_lo, s, H, OH);
                for (long kw = 0; kw < K; ++kw) {
                    const auto [w0, w1] = detail::valid_range(kw - g.pad_lo, s, W, OW);
                    if (w0 > w1) continue;
                    T acc = 0;
                    for (long n = 0; n < N; ++n) {
                        const T* xc = xp + (n * C + c) * D * H * W;
                        const T* gyo = gyp + (n * O + o) * OD * OH * OW;
                        for (long od = d0; od <= d1; ++od) {
                            const long id = od * s + kd - g.pad_lo;
                            for (long oh = h0; oh <= h1; ++oh) {
                                const long ih = oh * s + kh - g.pad_lo;
                                const T* gyrow = gyo + (od * OH + oh) * OW;
                                const T* xrow = xc + (id * H + ih) * W;
                                const long shift = kw - g.pad_lo;
                                // Four fixed partial sums: vectorisable, same order every run.
                                T a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                                long ow = w0;
                                for (; ow + 3 <= w1; ow += 4) {
                                    a0 += gyrow[ow] * xrow[ow * s + shift];
                                    a1 += gyrow[ow + 1] * xrow[(ow + 1) * s + shift];
                                    a2 += gyrow[ow + 2] * xrow[(ow + 2) * s + shift];
                                    a3 += gyrow[ow + 3] * xrow[(ow + 3) * s + shift];
                                }
                                for (; ow <= w1; ++ow) a0 += gyrow[ow] * xrow[ow * s + shift];
                                acc += (a0 + a1) + (a2 + a3);
                            }
                        }
                    }
                    gwc[(kd * K + kh) * K + kw] += acc;
                }
            }
        }
    }
}

}  // namespace kernels

/// 3-D cross-correlation over [N,C,D,H,W] with a cubic [O,C,K,K,K] kernel.
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, std::optional<Var<T>> b, Conv3dGeometry geom) {
    const auto& xv = x.value();
    const auto& wv = w.value();
    detail::require_rank(xv, 5, "conv3d input");
    detail::require_rank(wv, 5, "conv3d kernel");
    const long K = static_cast<long>(wv.dim(2));
    if (wv.dim(1) != xv.dim(1) || wv.dim(3) != wv.dim(2) || wv.dim(4) != wv.dim(2))
        fail(ErrorKind::ShapeMismatch,
             "conv3d kernel " + shape_str(wv.shape()) + " incompatible with input " + shape_str(xv.shape()));
    if (b && (b->value().rank() != 1 || b->value().dim(0) != wv.dim(0)))
        fail(ErrorKind::ShapeMismatch, "conv3d bias must have one entry per output channel");
    if (geom.stride < 1) fail(ErrorKind::ShapeMismatch, "conv3d stride must be >= 1");
    Shape out{xv.dim(0), wv.dim(0)};
    for (std::size_t d = 2; d < 5; ++d) {
        const long e = geom.out_extent(static_cast<long>(xv.dim(d)), K);
        if (e < 1) fail(ErrorKind::ShapeMismatch, "conv3d kernel larger than padded input");
        out.push_back(static_cast<std::size_t>(e));
    }
    Tensor<T> y(out);
    kernels::conv3d_forward(xv, wv, b ? &b->value() : nullptr, geom, y);

    std::vector<std::size_t> parents{x.id(), w.id()};
    if (b) parents.push_back(b->id());
    const std::size_t xid = x.id(), wid = w.id();
    const std::optional<std::size_t> bid = b ? std::optional<std::size_t>(b->id()) : std::nullopt;
    return x.graph().push(std::move(y), std::move(parents), [xid, wid, bid, geom](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_out(self);
        if (g.active(xid)) kernels::conv3d_backward_input(gy, g.value(wid), geom, g.grad(xid));
        if (g.active(wid)) kernels::conv3d_backward_weight(g.value(xid), gy, geom, g.grad(wid));
        if (bid && g.active(*bid)) {
            auto& gb = g.grad(*bid);
            const std::size_t N = gy.dim(0), O = gy.dim(1), S = gy.size() / (N * O);
            for (std::size_t o = 0; o < O; ++o) {
                T acc = 0;
                for (std::size_t n = 0; n < N; ++n) {
                    const T* p = gy.data() + (n * O + o) * S;
                    for (std::size_t i = 0; i < S; ++i) acc += p[i];
                }
                gb[o] += acc;
            }
        }
    });
}

namespace detail {

// Source taps for align_corners=false linear interpolation along one axis.
struct LinearTaps {
    std::vector<std::size_t> i0, i1;
    std::vector<double> w1;  // weight of i1; i0 gets 1 - w1
};

inline LinearTaps linear_taps(std::size_t in, std::size_t out) {
    LinearTaps t;
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        if (src < 0) src = 0;
        auto i0 = static_cast<std::size_t>(src);
        if (i0 > in - 1) i0 = in - 1;
        const std::size_t i1 = i0 + (i0 < in - 1 ? 1 : 0);
        t.i0.push_back(i0);
        t.i1.push_back(i1);
        t.w1.push_back(src - static_cast<double>(i0));
    }
    return t;
}

}  // namespace detail

/// Trilinear resampling (align_corners = false) to an explicit spatial size.
template <typename T>
Var<T> trilinear_resize(const Var<T>& x, std::size_t od, std::size_t oh, std::size_t ow) {
    const auto& xv = x.value();
    detail::require_rank(xv, 5, "trilinear_resize input");
    const std::size_t NC = xv.dim(0) * xv.dim(1), D = xv.dim(2), H = xv.dim(3), W = xv.dim(4);
    const auto td = detail::linear_taps(D, od), th = detail::linear_taps(H, oh), tw = detail::linear_taps(W, ow);
    Tensor<T> y({xv.dim(0), xv.dim(1), od, oh, ow});

    // Visits the 8 taps of every output voxel; forward gathers, backward scatters.
    auto sweep = [=](auto&& visit) {
        for (std::size_t nc = 0; nc < NC; ++nc)
            for (std::size_t d = 0; d < od; ++d)
                for (std::size_t h = 0; h < oh; ++h)
                    for (std::size_t w = 0; w < ow; ++w) {
                        const std::size_t out = ((nc * od + d) * oh + h) * ow + w;
                        const std::size_t ds[2] = {td.i0[d], td.i1[d]};
                        const std::size_t hs[2] = {th.i0[h], th.i1[h]};
                        const std::size_t ws[2] = {tw.i0[w], tw.i1[w]};
                        const T wd[2] = {T(1 - td.w1[d]), T(td.w1[d])};
                        const T wh[2] = {T(1 - th.w1[h]), T(th.w1[h])};
                        const T ww[2] = {T(1 - tw.w1[w]), T(tw.w1[w])};
                        for (int a = 0; a < 2; ++a)
                            for (int b = 0; b < 2; ++b)
                                for (int c = 0; c < 2; ++c)
                                    visit(out, ((nc * D + ds[a]) * H + hs[b]) * W + ws[c], wd[a] * wh[b] * ww[c]);
                    }
    };
    sweep([&](std::size_t out, std::size_t in, T wt) { y[out] += wt * xv[in]; });

    const std::size_t xid = x.id();
    return x.graph().push(std::move(y), {xid}, [xid, sweep](Graph<T>& g, std::size_t self) {
        if (!g.active(xid)) return;
        const auto& gy = g.grad_out(self);
        auto& gx = g.grad(xid);
        sweep([&](std::size_t out, std::size_t in, T wt) { gx[in] += wt * gy[out]; });
    });
}

template <typename T>
Var<T> trilinear_upsample(const Var<T>& x, std::size_t factor = 2) {
    if (factor < 2) fail(ErrorKind::InvalidArgument, "upsample factor must be >= 2");
    return trilinear_resize(x, x.dim(2) * factor, x.dim(3) * factor, x.dim(4) * factor);
}

struct BatchNormOptions {
    bool train = true;
    double momentum = 0.1;
    double eps = 1e-5;
};

/// Per-channel normalisation over batch and spatial positions of [N,C,...].
/// In training mode batch statistics are used and the running estimates
/// (unbiased variance) are updated in place.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& scale, const Var<T>& shift, Tensor<T>& running_mean,
                  Tensor<T>& running_var, BatchNormOptions opt = {}) {
    const auto& xv = x.value();
    if (xv.rank() < 2) fail(ErrorKind::ShapeMismatch, "batch_norm expects [N,C,...]");
    const std::size_t N = xv.dim(0), C = xv.dim(1), S = xv.size() / (N * C), M = N * S;
    if (scale.value().size() != C || shift.value().size() != C || running_mean.size() != C ||
        running_var.size() != C)
        fail(ErrorKind::ShapeMismatch, "batch_norm parameters must have one entry per channel");
    if (opt.train && M == 1) fail(ErrorKind::BatchTooSmall, "batch_norm training needs more than one value per channel");

    std::vector<T> mean(C), inv_std(C);
    if (opt.train) {
        for (std::size_t c = 0; c < C; ++c) {
            T sum = 0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = xv.data() + (n * C + c) * S;
                for (std::size_t i = 0; i < S; ++i) sum += p[i];
            }
            const T mu = sum / T(M);
            T sq = 0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = xv.data() + (n * C + c) * S;
                for (std::size_t i = 0; i < S; ++i) sq += (p[i] - mu) * (p[i] - mu);
            }
            const T var = sq / T(M);
            mean[c] = mu;
            inv_std[c] = T(1) / std::sqrt(var + T(opt.eps));
            const T m = T(opt.momentum);
            running_mean[c] = (1 - m) * running_mean[c] + m * mu;
            running_var[c] = (1 - m) * running_var[c] + m * sq / T(M - 1);
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = running_mean[c];
            inv_std[c] = T(1) / std::sqrt(running_var[c] + T(opt.eps));
        }
    }

    Tensor<T> xhat(xv.shape());
    Tensor<T> y(xv.shape());
    const auto& gamma = scale.value();
    const auto& beta = shift.value();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * S;
            for (std::size_t i = 0; i < S; ++i) {
                xhat[off + i] = (xv[off + i] - mean[c]) * inv_std[c];
                y[off + i] = gamma[c] * xhat[off + i] + beta[c];
            }
        }

    const std::size_t xid = x.id(), gid = scale.id(), bid = shift.id();
    const bool train = opt.train;
    return x.graph().push(
        std::move(y), {xid, gid, bid},
        [xid, gid, bid, train, N, C, S, M, xhat = std::move(xhat), inv_std](Graph<T>& g, std::size_t self) {
            const auto& gy = g.grad_out(self);
            const auto& gamma = g.value(gid);
            std::vector<T> sum_gy(C, 0), sum_gy_xhat(C, 0);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t off = (n * C + c) * S;
                    for (std::size_t i = 0; i < S; ++i) {
                        sum_gy[c] += gy[off + i];
                        sum_gy_xhat[c] += gy[off + i] * xhat[off + i];
                    }
                }
            if (g.active(gid)) {
                auto& gg = g.grad(gid);
                for (std::size_t c = 0; c < C; ++c) gg[c] += sum_gy_xhat[c];
            }
            if (g.active(bid)) {
                auto& gb = g.grad(bid);
                for (std::size_t c = 0; c < C; ++c) gb[c] += sum_gy[c];
            }
            if (g.active(xid)) {
                auto& gx = g.grad(xid);
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t off = (n * C + c) * S;
                        const T k = gamma[c] * inv_std[c];
                        if (train) {
                            const T mg = sum_gy[c] / T(M), mgx = sum_gy_xhat[c] / T(M);
                            for (std::size_t i = 0; i < S; ++i)
                                gx[off + i] += k * (gy[off + i] - mg - xhat[off + i] * mgx);
                        } else {
                            for (std::size_t i = 0; i < S; ++i) gx[off + i] += k * gy[off + i];
                        }
                    }
            }
        });
}

namespace detail {

// Elementwise unary op with a derivative expressed through input and output.
template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& x, F f, DF df) {
    const auto& xv = x.value();
    Tensor<T> y(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
    const std::size_t xid = x.id();
    return x.graph().push(std::move(y), {xid}, [xid, df](Graph<T>& g, std::size_t self) {
        if (!g.active(xid)) return;
        const auto& gy = g.grad_out(self);
        const auto& xv = g.value(xid);
        const auto& yv = g.value(self);
        auto& gx = g.grad(xid);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * df(xv[i], yv[i]);
    });
}

}  // namespace detail

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope = T(0.01)) {
    return detail::unary(
        x, [slope](T v) { return v > 0 ? v : slope * v; }, [slope](T v, T) { return v > 0 ? T(1) : slope; });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    return detail::unary(x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    return detail::unary(
        x,
        [](T v) {
            if (v >= 0) return T(1) / (T(1) + std::exp(-v));
            const T e = std::exp(v);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
    return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

/// Clamps values; the gradient is zero where the clamp is active.
template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
    return detail::unary(
        x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
        [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
    return detail::unary(x, [factor](T v) { return factor * v; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a, b, "add");
    Tensor<T> y = a.value();
    y += b.value();
    const std::size_t aid = a.id(), bid = b.id();
    return a.graph().push(std::move(y), {aid, bid}, [aid, bid](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_out(self);
        if (g.active(aid)) g.grad(aid) += gy;
        if (g.active(bid)) g.grad(bid) += gy;
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a, b, "mul");
    const auto& av = a.value();
    const auto& bv = b.value();
    Tensor<T> y(av.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
    const std::size_t aid = a.id(), bid = b.id();
    return a.graph().push(std::move(y), {aid, bid}, [aid, bid](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_out(self);
        if (g.active(aid)) {
            auto& ga = g.grad(aid);
            const auto& bv = g.value(bid);
            for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[i];
        }
        if (g.active(bid)) {
            auto& gb = g.grad(bid);
            const auto& av = g.value(aid);
            for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av[i];
        }
    });
}

/// Scales row n of x (any rank, leading batch axis) by factors[n].
template <typename T>
Var<T> scale_rows(const Var<T>& x, std::vector<T> factors) {
    const auto& xv = x.value();
    const std::size_t N = xv.dim(0), S = xv.size() / N;
    if (factors.size() != N) fail(ErrorKind::ShapeMismatch, "scale_rows needs one factor per batch row");
    Tensor<T> y(xv.shape());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < S; ++i) y[n * S + i] = factors[n] * xv[n * S + i];
    const std::size_t xid = x.id();
    return x.graph().push(std::move(y), {xid}, [xid, N, S, factors = std::move(factors)](Graph<T>& g, std::size_t self) {
        if (!g.active(xid)) return;
        const auto& gy = g.grad_out(self);
        auto& gx = g.grad(xid);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < S; ++i) gx[n * S + i] += factors[n] * gy[n * S + i];
    });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Tensor<T> y = x.value().reshaped(std::move(shape));
    const std::size_t xid = x.id();
    return x.graph().push(std::move(y), {xid}, [xid](Graph<T>& g, std::size_t self) {
        if (!g.active(xid)) return;
        const auto& gy = g.grad_out(self);
        auto& gx = g.grad(xid);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    });
}

/// Flattens [N, ...] to [N, prod(...)].
template <typename T>
Var<T> flatten(const Var<T>& x) {
    const std::size_t N = x.dim(0);
    return reshape(x, {N, x.value().size() / N});
}

/// Concatenates [N,Ca,...] and [N,Cb,...] along the channel axis.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rank() < 2 || av.rank() != bv.rank() || av.dim(0) != bv.dim(0) ||
        !std::equal(av.shape().begin() + 2, av.shape().end(), bv.shape().begin() + 2))
        fail(ErrorKind::ShapeMismatch, "concat_channels: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    const std::size_t N = av.dim(0), CA = av.dim(1), CB = bv.dim(1), S = av.size() / (N * CA);
    Shape out = av.shape();
    out[1] = CA + CB;
    Tensor<T> y(out);
    for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(av.data() + n * CA * S, CA * S, y.data() + n * (CA + CB) * S);
        std::copy_n(bv.data() + n * CB * S, CB * S, y.data() + n * (CA + CB) * S + CA * S);
    }
    const std::size_t aid = a.id(), bid = b.id();
    return a.graph().push(std::move(y), {aid, bid}, [aid, bid, N, CA, CB, S](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_out(self);
        for (std::size_t n = 0; n < N; ++n) {
            if (g.active(aid)) {
                auto& ga = g.grad(aid);
                for (std::size_t i = 0; i < CA * S; ++i) ga[n * CA * S + i] += gy[n * (CA + CB) * S + i];
            }
            if (g.active(bid)) {
                auto& gb = g.grad(bid);
                for (std::size_t i = 0; i < CB * S; ++i) gb[n * CB * S + i] += gy[n * (CA + CB) * S + CA * S + i];
            }
        }
    });
}

/// x[N,C,...] times a single-channel map gate[N,1,...], broadcast over C.
template <typename T>
Var<T> mul_channel_broadcast(const Var<T>& x, const Var<T>& gate) {
    const auto& xv = x.value();
    const auto& av = gate.value();
    if (av.rank() != xv.rank() || av.dim(0) != xv.dim(0) || av.dim(1) != 1 ||
        !std::equal(av.shape().begin() + 2, av.shape().end(), xv.shape().begin() + 2))
        fail(ErrorKind::ShapeMismatch, "mul_channel_broadcast: " + shape_str(xv.shape()) + " vs " + shape_str(av.shape()));
    const std::size_t N = xv.dim(0), C = xv.dim(1), S = xv.size() / (N * C);
    Tensor<T> y(xv.shape());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < S; ++i) y[(n * C + c) * S + i] = xv[(n * C + c) * S + i] * av[n * S + i];
    const std::size_t xid = x.id(), aid = gate.id();
    return x.graph().push(std::move(y), {xid, aid}, [xid, aid, N, C, S](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_out(self);
        const auto& xv = g.value(xid);
        const auto& av = g.value(aid);
        if (g.active(xid)) {
            auto& gx = g.grad(xid);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < S; ++i) gx[(n * C + c) * S + i] += gy[(n * C + c) * S + i] * av[n * S + i];
        }
        if (g.active(aid)) {
            auto& ga = g.grad(aid);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < S; ++i) ga[n * S + i] += gy[(n * C + c) * S + i] * xv[(n * C + c) * S + i];
        }
    });
}

/// Affine map of [N,F] by weight [O,F] and bias [O].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, std::optional<Var<T>> b) {
    const auto& xv = x.value();
    const auto& wv = w.value();
    detail::require_rank(xv, 2, "linear input");
    detail::require_rank(wv, 2, "linear weight");
    const std::size_t N = xv.dim(0), F = xv.dim(1), O = wv.dim(0);
    if (wv.dim(1) != F) fail(ErrorKind::ShapeMismatch, "linear weight " + shape_str(wv.shape()) + " vs input " + shape_str(xv.shape()));
    if (b && b->value().size() != O) fail(ErrorKind::ShapeMismatch, "linear bias size mismatch");
    Tensor<T> y({N, O});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
            T acc = b ? b->value()[o] : T(0);
            const T* wr = wv.data() + o * F;
            const T* xr = xv.data() + n * F;
            for (std::size_t f = 0; f < F; ++f) acc += wr[f] * xr[f];
            y[n * O + o] = acc;
        }
    std::vector<std::size_t> parents{x.id(), w.id()};
    if (b) parents.push_back(b->id());
    const std::size_t xid = x.id(), wid = w.id();
    const std::optional<std::size_t> bid = b ? std::optional<std::size_t>(b->id()) : std::nullopt;
    return x.graph().push(std::move(y), std::move(parents), [xid, wid, bid, N, F, O](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad_out(self);
        if (g.active(xid)) {
            auto& gx = g.grad(xid);
            const auto& wv = g.value(wid);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < O; ++o) {
                    const T gv = gy[n * O + o];
                    const T* wr = wv.data() + o * F;
                    T* gr = gx.data() + n * F;
                    for (std::size_t f = 0; f < F; ++f) gr[f] += gv * wr[f];
                }
        }
        if (g.active(wid)) {
            auto& gw = g.grad(wid);
            const auto& xv = g.value(xid);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < O; ++o) {
                    const T gv = gy[n * O + o];
                    const T* xr = xv.data() + n * F;
                    T* gr = gw.data() + o * F;
                    for (std::size_t f = 0; f < F; ++f) gr[f] += gv * xr[f];
                }
        }
        if (bid && g.active(*bid)) {
            auto& gb = g.grad(*bid);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < O; ++o) gb[o] += gy[n * O + o];
        }
    });
}

/// Scalar sum_i w_i * terms_i for scalar terms.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
    if (terms.empty() || terms.size() != weights.size())
        fail(ErrorKind::InvalidArgument, "weighted_sum needs one weight per term");
    T total = 0;
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i].value().size() != 1) fail(ErrorKind::ShapeMismatch, "weighted_sum terms must be scalars");
        total += weights[i] * terms[i].value()[0];
        ids.push_back(terms[i].id());
    }
    return terms[0].graph().push(Tensor<T>({1}, total), ids, [ids, weights](Graph<T>& g, std::size_t self) {
        const T gy = g.grad_out(self)[0];
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (g.active(ids[i])) g.grad(ids[i])[0] += weights[i] * gy;
    });
}

/// Scalar sum_i x_i * r_i against a constant tensor; used to reduce tensor
/// outputs to a scalar for gradient checks.
template <typename T>
Var<T> dot_constant(const Var<T>& x, const Tensor<T>& r) {
    x.value().check_same(r);
    T acc = 0;
    for (std::size_t i = 0; i < r.size(); ++i) acc += x.value()[i] * r[i];
    const std::size_t xid = x.id();
    return x.graph().push(Tensor<T>({1}, acc), {xid}, [xid, r](Graph<T>& g, std::size_t self) {
        if (!g.active(xid)) return;
        const T gy = g.grad_out(self)[0];
        auto& gx = g.grad(xid);
        for (std::size_t i = 0; i < r.size(); ++i) gx[i] += gy * r[i];
    });
}

}  // namespace voxcell::tc
