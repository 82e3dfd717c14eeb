#pragma once

#include <fftw3.h>

#include <cmath>
#include <cstring>
#include <map>
#include <mutex>
#include <utility>
#include <vector>

// Thin FFTW front end for periodic H x W planes: exact Fourier derivatives
// and white-noise spectral filtering. One plan pair is cached per size;
// execution is serialized because the cached plans share scratch buffers.
// FFTW_ESTIMATE keeps plan selection (and therefore rounding behavior)
// identical run to run.

namespace pbfm::spectral {

namespace detail {

struct Plans {
    fftw_complex* buf = nullptr;
    fftw_plan fwd = nullptr;
    fftw_plan bwd = nullptr;
};

inline std::mutex& lock() {
    static std::mutex m;
    return m;
}

inline Plans& plans_for(int h, int w) {
    static std::map<std::pair<int, int>, Plans> cache;
    auto it = cache.find({h, w});
    if (it == cache.end()) {
        Plans p;
        p.buf = fftw_alloc_complex(static_cast<std::size_t>(h) * w);
        p.fwd = fftw_plan_dft_2d(h, w, p.buf, p.buf, FFTW_FORWARD, FFTW_ESTIMATE);
        p.bwd = fftw_plan_dft_2d(h, w, p.buf, p.buf, FFTW_BACKWARD, FFTW_ESTIMATE);
        it = cache.emplace(std::make_pair(h, w), p).first;
    }
    return it->second;
}

// signed integer wavenumber for index m on an n-grid; Nyquist dropped for
// odd-order derivatives (the trig-interpolation convention)
inline int wavenumber(int m, int n) {
    if (2 * m == n) return 0;
    return m <= n / 2 ? m : m - n;
}

}  // namespace detail

// d/dx (axis = 1, along rows) or d/dy (axis = 0, down columns) of a real
// periodic plane on [0, domain)^2. in and out may alias.
inline void derivative(const double* in, double* out, int h, int w, int axis, double domain) {
    std::lock_guard<std::mutex> guard(detail::lock());
    auto& p = detail::plans_for(h, w);
    const std::size_t n = static_cast<std::size_t>(h) * w;
    for (std::size_t i = 0; i < n; ++i) {
        p.buf[i][0] = in[i];
        p.buf[i][1] = 0.0;
    }
    fftw_execute(p.fwd);
    const double two_pi = 2.0 * M_PI / domain;
    for (int iy = 0; iy < h; ++iy) {
        const int my = detail::wavenumber(iy, h);
        for (int ix = 0; ix < w; ++ix) {
            const int mx = detail::wavenumber(ix, w);
            const double k = two_pi * (axis == 1 ? mx : my);
            fftw_complex& c = p.buf[static_cast<std::size_t>(iy) * w + ix];
            const double re = c[0], im = c[1];
            c[0] = -k * im;  // multiply by i*k
            c[1] = k * re;
        }
    }
    fftw_execute(p.bwd);
    const double scale = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = p.buf[i][0] * scale;
}

// out = Re(IFFT(amp .* FFT(noise))); amp is laid out in FFT index order
// [iy*w + ix]. Used for Gaussian-field and stream-function synthesis.
inline void filter(const double* noise, double* out, int h, int w, const std::vector<double>& amp) {
    std::lock_guard<std::mutex> guard(detail::lock());
    auto& p = detail::plans_for(h, w);
    const std::size_t n = static_cast<std::size_t>(h) * w;
    for (std::size_t i = 0; i < n; ++i) {
        p.buf[i][0] = noise[i];
        p.buf[i][1] = 0.0;
    }
    fftw_execute(p.fwd);
    for (std::size_t i = 0; i < n; ++i) {
        p.buf[i][0] *= amp[i];
        p.buf[i][1] *= amp[i];
    }
    fftw_execute(p.bwd);
    const double scale = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = p.buf[i][0] * scale;
}

}  // namespace pbfm::spectral
