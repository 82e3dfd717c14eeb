#pragma once

#include "pbfm/autodiff.hpp"
#include "pbfm/spectral.hpp"

// Grid-shaped primitives on [B,C,H,W] tensors: border padding, valid
// cross-correlation (the conv building block), and exact spectral
// derivatives for periodic fields.

namespace pbfm::ad {

enum class PadMode { Zero, Periodic, Replicate };

namespace detail {

inline std::int64_t pad_src(std::int64_t i, std::int64_t n, PadMode mode) {
    if (i >= 0 && i < n) return i;
    switch (mode) {
        case PadMode::Periodic:
            return ((i % n) + n) % n;
        case PadMode::Replicate:
            return i < 0 ? 0 : n - 1;
        default:
            return -1;  // zero padding: outside
    }
}

}  // namespace detail

inline Tensor pad2d(const Tensor& x, std::int64_t p, PadMode mode) {
    if (x.shape().size() != 4)
        throw ShapeError("pad2d: expected rank-4, got " + shape_str(x.shape()));
    const std::int64_t b = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    const std::int64_t hp = h + 2 * p, wp = w + 2 * p;
    std::vector<double> out(static_cast<std::size_t>(b * c * hp * wp), 0.0);
    const double* src = x.value().data();
    for (std::int64_t bc = 0; bc < b * c; ++bc) {
        const double* sp = src + bc * h * w;
        double* dp = out.data() + bc * hp * wp;
        for (std::int64_t i = 0; i < hp; ++i) {
            const std::int64_t si = detail::pad_src(i - p, h, mode);
            for (std::int64_t j = 0; j < wp; ++j) {
                const std::int64_t sj = detail::pad_src(j - p, w, mode);
                dp[i * wp + j] = (si < 0 || sj < 0) ? 0.0 : sp[si * w + sj];
            }
        }
    }
    auto xn = x.node();
    return detail::make_op("pad2d", {b, c, hp, wp}, std::move(out), {x},
                           [xn, b, c, h, w, p, mode](detail::Node& self) {
                               if (!xn->requires_grad) return;
                               const std::int64_t hp = h + 2 * p, wp = w + 2 * p;
                               const double* g = self.grad.data();
                               double* d = xn->grad.data();
                               for (std::int64_t bc = 0; bc < b * c; ++bc) {
                                   const double* gp = g + bc * hp * wp;
                                   double* dp = d + bc * h * w;
                                   for (std::int64_t i = 0; i < hp; ++i) {
                                       const std::int64_t si = detail::pad_src(i - p, h, mode);
                                       if (si < 0) continue;
                                       for (std::int64_t j = 0; j < wp; ++j) {
                                           const std::int64_t sj = detail::pad_src(j - p, w, mode);
                                           if (sj < 0) continue;
                                           dp[si * w + sj] += gp[i * wp + j];
                                       }
                                   }
                               }
                           });
}

namespace detail {

// gather kernel windows of one padded plane set into a [C*kh*kw, Ho*Wo]
// matrix; rows are contiguous Wo-long segments of the source
inline void im2col(const double* xp, std::int64_t c, std::int64_t hp, std::int64_t wp,
                   std::int64_t kh, std::int64_t kw, std::int64_t ho, std::int64_t wo,
                   double* col) {
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t u = 0; u < kh; ++u)
            for (std::int64_t v = 0; v < kw; ++v) {
                const double* src = xp + ci * hp * wp;
                double* row = col + ((ci * kh + u) * kw + v) * ho * wo;
                for (std::int64_t i = 0; i < ho; ++i)
                    std::copy(src + (i + u) * wp + v, src + (i + u) * wp + v + wo, row + i * wo);
            }
}

// adjoint of im2col: scatter-add matrix rows back into the padded plane
inline void col2im(const double* col, std::int64_t c, std::int64_t hp, std::int64_t wp,
                   std::int64_t kh, std::int64_t kw, std::int64_t ho, std::int64_t wo,
                   double* xp) {
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t u = 0; u < kh; ++u)
            for (std::int64_t v = 0; v < kw; ++v) {
                double* dst = xp + ci * hp * wp;
                const double* row = col + ((ci * kh + u) * kw + v) * ho * wo;
                for (std::int64_t i = 0; i < ho; ++i) {
                    double* d = dst + (i + u) * wp + v;
                    const double* r = row + i * wo;
                    for (std::int64_t j = 0; j < wo; ++j) d[j] += r[j];
                }
            }
}

}  // namespace detail

// valid cross-correlation: x [B,C,Hp,Wp], kernel [F,C,kh,kw] -> [B,F,Hp-kh+1,Wp-kw+1].
// Lowered to one GEMM per sample via im2col.
inline Tensor conv2d_valid(const Tensor& x, const Tensor& kernel) {
    if (x.shape().size() != 4 || kernel.shape().size() != 4 || x.shape()[1] != kernel.shape()[1])
        throw ShapeError("conv2d_valid: incompatible shapes " + shape_str(x.shape()) + " vs " +
                         shape_str(kernel.shape()));
    const std::int64_t b = x.shape()[0], c = x.shape()[1], hp = x.shape()[2], wp = x.shape()[3];
    const std::int64_t f = kernel.shape()[0], kh = kernel.shape()[2], kw = kernel.shape()[3];
    const std::int64_t ho = hp - kh + 1, wo = wp - kw + 1;
    if (ho < 1 || wo < 1)
        throw ShapeError("conv2d_valid: kernel " + shape_str(kernel.shape()) + " larger than input " +
                         shape_str(x.shape()));
    const std::int64_t krows = c * kh * kw, cols = ho * wo;
    std::vector<double> out(static_cast<std::size_t>(b * f * cols));
    std::vector<double> col(static_cast<std::size_t>(krows * cols));
    detail::ConstMap w(kernel.value().data(), f, krows);
    for (std::int64_t bi = 0; bi < b; ++bi) {
        detail::im2col(x.value().data() + bi * c * hp * wp, c, hp, wp, kh, kw, ho, wo, col.data());
        detail::MutMap(out.data() + bi * f * cols, f, cols).noalias() =
            w * detail::ConstMap(col.data(), krows, cols);
    }
    auto xn = x.node(), kn = kernel.node();
    return detail::make_op(
        "conv2d_valid", {b, f, ho, wo}, std::move(out), {x, kernel},
        [xn, kn, b, c, hp, wp, f, kh, kw, ho, wo, krows, cols](detail::Node& self) {
            std::vector<double> col(static_cast<std::size_t>(krows * cols));
            std::vector<double> dcol(static_cast<std::size_t>(krows * cols));
            for (std::int64_t bi = 0; bi < b; ++bi) {
                detail::ConstMap g(self.grad.data() + bi * f * cols, f, cols);
                if (kn->requires_grad) {
                    detail::im2col(xn->value.data() + bi * c * hp * wp, c, hp, wp, kh, kw, ho, wo,
                                   col.data());
                    detail::MutMap(kn->grad.data(), f, krows).noalias() +=
                        g * detail::ConstMap(col.data(), krows, cols).transpose();
                }
                if (xn->requires_grad) {
                    detail::MutMap(dcol.data(), krows, cols).noalias() =
                        detail::ConstMap(kn->value.data(), f, krows).transpose() * g;
                    detail::col2im(dcol.data(), c, hp, wp, kh, kw, ho, wo,
                                   xn->grad.data() + bi * c * hp * wp);
                }
            }
        });
}

// 3x3 same-size convolution with border handling, the building block used
// by the conv velocity nets and residual stencils
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, PadMode mode) {
    const std::int64_t kh = kernel.shape()[2];
    return conv2d_valid(pad2d(x, (kh - 1) / 2, mode), kernel);
}

// Exact Fourier derivative along x (axis=1) or y (axis=0) of periodic fields.
// The spectral differentiation matrix is antisymmetric (Nyquist zeroed), so
// the adjoint is its negation.
inline Tensor spectral_deriv(const Tensor& x, int axis, double domain) {
    if (x.shape().size() != 4)
        throw ShapeError("spectral_deriv: expected rank-4, got " + shape_str(x.shape()));
    const std::int64_t bc = x.shape()[0] * x.shape()[1];
    const int h = static_cast<int>(x.shape()[2]), w = static_cast<int>(x.shape()[3]);
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    std::vector<double> out(x.value().size());
    for (std::int64_t i = 0; i < bc; ++i)
        spectral::derivative(x.value().data() + i * hw, out.data() + i * hw, h, w, axis, domain);
    auto xn = x.node();
    return detail::make_op("spectral_deriv", x.shape(), std::move(out), {x},
                           [xn, bc, h, w, hw, axis, domain](detail::Node& self) {
                               if (!xn->requires_grad) return;
                               std::vector<double> tmp(static_cast<std::size_t>(hw));
                               for (std::int64_t i = 0; i < bc; ++i) {
                                   spectral::derivative(self.grad.data() + i * hw, tmp.data(), h, w,
                                                        axis, domain);
                                   double* d = xn->grad.data() + i * hw;
                                   for (std::int64_t j = 0; j < hw; ++j) d[j] -= tmp[j];
                               }
                           });
}

}  // namespace pbfm::ad
