#pragma once

#include "pbfm/residuals.hpp"
#include "pbfm/rng.hpp"
#include "pbfm/spectral.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

// Synthetic dataset generators, one per residual structure, plus channel
// normalization. Every sample derives its RNG stream from (dataset seed,
// sample index), so regeneration is exact regardless of batching or order.

namespace pbfm::data {

struct GridDataset {
    std::vector<std::string> channels;
    std::int64_t count = 0;
    std::int64_t h = 1;
    std::int64_t w = 1;
    std::int64_t cond_dim = 0;
    std::vector<double> samples;  // [count, C, h, w] row-major
    std::vector<double> cond;     // [count, cond_dim]

    // physical per-channel statistics; when `standardized` is set the sample
    // payload is (x - mean)/std and these record the transform
    std::vector<double> chan_mean, chan_std;
    std::vector<double> cond_mean, cond_std;
    bool standardized = false;

    nlohmann::ordered_json manifest;  // generator provenance (seed, spec)

    std::int64_t channel_count() const { return static_cast<std::int64_t>(channels.size()); }
    std::int64_t sample_stride() const { return channel_count() * h * w; }

    const double* sample(std::int64_t i) const { return samples.data() + i * sample_stride(); }
    const double* condition(std::int64_t i) const { return cond.data() + i * cond_dim; }

    void validate() const {
        if (samples.size() != static_cast<std::size_t>(count * sample_stride()))
            throw std::runtime_error("dataset: payload size mismatch");
        if (cond_dim > 0 && cond.size() != static_cast<std::size_t>(count * cond_dim))
            throw std::runtime_error("dataset: conditioning count does not match sample count");
        for (double v : samples)
            if (!std::isfinite(v)) throw std::runtime_error("dataset: non-finite sample value");
    }
};

// fills chan_* and cond_* with the statistics of the current payload
inline void compute_stats(GridDataset& ds) {
    const std::int64_t c = ds.channel_count(), hw = ds.h * ds.w;
    ds.chan_mean.assign(c, 0.0);
    ds.chan_std.assign(c, 0.0);
    const double n = static_cast<double>(ds.count * hw);
    for (std::int64_t ci = 0; ci < c; ++ci) {
        double m = 0;
        for (std::int64_t s = 0; s < ds.count; ++s) {
            const double* p = ds.sample(s) + ci * hw;
            for (std::int64_t i = 0; i < hw; ++i) m += p[i];
        }
        m /= n;
        double var = 0;
        for (std::int64_t s = 0; s < ds.count; ++s) {
            const double* p = ds.sample(s) + ci * hw;
            for (std::int64_t i = 0; i < hw; ++i) var += (p[i] - m) * (p[i] - m);
        }
        ds.chan_mean[ci] = m;
        ds.chan_std[ci] = std::sqrt(var / n);
    }
    ds.cond_mean.assign(ds.cond_dim, 0.0);
    ds.cond_std.assign(ds.cond_dim, 1.0);
    if (ds.cond_dim > 0 && ds.count > 0) {
        for (std::int64_t d = 0; d < ds.cond_dim; ++d) {
            double m = 0;
            for (std::int64_t s = 0; s < ds.count; ++s) m += ds.cond[s * ds.cond_dim + d];
            m /= static_cast<double>(ds.count);
            double var = 0;
            for (std::int64_t s = 0; s < ds.count; ++s) {
                const double dv = ds.cond[s * ds.cond_dim + d] - m;
                var += dv * dv;
            }
            ds.cond_mean[d] = m;
            const double sd = std::sqrt(var / static_cast<double>(ds.count));
            ds.cond_std[d] = sd > 1e-12 ? sd : 1.0;  // a single condition value stays unscaled
        }
    }
}

// standardizes channels to zero mean / unit variance; the returned dataset
// records the transform so denormalize() is exact
inline GridDataset normalize(const GridDataset& ds) {
    if (ds.standardized) throw std::invalid_argument("normalize: dataset already standardized");
    GridDataset out = ds;
    if (out.chan_mean.empty() || out.chan_std.empty()) compute_stats(out);
    const std::int64_t c = out.channel_count(), hw = out.h * out.w;
    for (std::int64_t ci = 0; ci < c; ++ci)
        if (!(out.chan_std[ci] > 1e-12))
            throw std::invalid_argument("normalize: channel '" + out.channels[ci] +
                                        "' is constant (std " + std::to_string(out.chan_std[ci]) +
                                        ")");
    for (std::int64_t s = 0; s < out.count; ++s)
        for (std::int64_t ci = 0; ci < c; ++ci) {
            double* p = out.samples.data() + (s * c + ci) * hw;
            for (std::int64_t i = 0; i < hw; ++i) p[i] = (p[i] - out.chan_mean[ci]) / out.chan_std[ci];
        }
    out.standardized = true;
    return out;
}

inline GridDataset denormalize(const GridDataset& ds) {
    if (!ds.standardized) throw std::invalid_argument("denormalize: dataset is not standardized");
    GridDataset out = ds;
    const std::int64_t c = out.channel_count(), hw = out.h * out.w;
    for (std::int64_t s = 0; s < out.count; ++s)
        for (std::int64_t ci = 0; ci < c; ++ci) {
            double* p = out.samples.data() + (s * c + ci) * hw;
            for (std::int64_t i = 0; i < hw; ++i) p[i] = p[i] * out.chan_std[ci] + out.chan_mean[ci];
        }
    out.standardized = false;
    return out;
}

// ---------------------------------------------------------------------------
// Gaussian random fields (squared-exponential spectrum, periodic unit square)

struct GrfSpec {
    double corr_len = 0.1;  // > 0
    double variance = 1.0;
    std::uint64_t seed = 0;
};

// one realization on an n x n grid; rng supplies the white noise
inline std::vector<double> gen_grf(const GrfSpec& spec, int n, Rng& rng) {
    if (!(spec.corr_len > 0.0)) throw std::invalid_argument("gen_grf: correlation length must be > 0");
    if (n < 8) throw std::invalid_argument("gen_grf: grid too small, n = " + std::to_string(n));
    const std::size_t cells = static_cast<std::size_t>(n) * n;
    std::vector<double> amp(cells);
    double power = 0.0;
    for (int iy = 0; iy < n; ++iy) {
        const int my = iy <= n / 2 ? iy : iy - n;
        for (int ix = 0; ix < n; ++ix) {
            const int mx = ix <= n / 2 ? ix : ix - n;
            const double k2 = 4.0 * M_PI * M_PI * (mx * mx + my * my);
            const double a = std::exp(-spec.corr_len * spec.corr_len * k2 / 4.0);
            amp[static_cast<std::size_t>(iy) * n + ix] = a;
            power += a * a;
        }
    }
    // scale such that the pointwise variance is exactly spec.variance
    const double scale = std::sqrt(spec.variance / (power / cells));
    std::vector<double> noise(cells), field(cells);
    for (auto& v : noise) v = rng.normal();
    spectral::filter(noise.data(), field.data(), n, n, amp);
    for (auto& v : field) v *= scale;
    return field;
}

// ---------------------------------------------------------------------------
// circle toy data: uniform points on the unit circle

inline GridDataset gen_circle(std::int64_t n, std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("gen_circle: need n >= 1");
    GridDataset ds;
    ds.channels = {"x", "y"};
    ds.count = n;
    ds.samples.resize(static_cast<std::size_t>(2 * n));
    for (std::int64_t i = 0; i < n; ++i) {
        Rng rng(seed, static_cast<std::uint64_t>(i));
        const double theta = 2.0 * M_PI * rng.uniform();
        ds.samples[2 * i] = std::cos(theta);
        ds.samples[2 * i + 1] = std::sin(theta);
    }
    compute_stats(ds);
    ds.manifest = {{"generator", "circle"}, {"seed", seed}, {"count", n}};
    return ds;
}

// ---------------------------------------------------------------------------
// Darcy flow: K = exp(G), p solved with CG on the same discrete operator the
// residual uses (zero-flux faces, zero-mean pressure projected every
// iteration)

struct CgFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// solves -div(K grad p) = f; returns p with zero mean. Stops when
// max|f + div(K grad p)| <= tol * max|f|.
inline std::vector<double> darcy_solve(const std::vector<double>& k, const std::vector<double>& f,
                                       int n, double h, double tol, std::uint64_t tag,
                                       int max_iter = 50000) {
    const std::size_t cells = static_cast<std::size_t>(n) * n;
    auto project = [&](std::vector<double>& v) {
        double m = 0;
        for (double x : v) m += x;
        m /= static_cast<double>(cells);
        for (double& x : v) x -= m;
    };
    auto apply_a = [&](const std::vector<double>& x, std::vector<double>& out) {
        residuals::darcy_apply(k.data(), x.data(), out.data(), n, h);
        for (double& v : out) v = -v;
    };
    double fmax = 0;
    for (double v : f) fmax = std::max(fmax, std::abs(v));
    const double target = tol * fmax;

    std::vector<double> x(cells, 0.0), r = f, p, ap(cells);
    project(r);
    p = r;
    double rr = 0;
    for (double v : r) rr += v * v;
    for (int it = 0; it < max_iter; ++it) {
        double rmax = 0;
        for (double v : r) rmax = std::max(rmax, std::abs(v));
        if (rmax <= target) return x;
        apply_a(p, ap);
        double pap = 0;
        for (std::size_t i = 0; i < cells; ++i) pap += p[i] * ap[i];
        const double alpha = rr / pap;
        for (std::size_t i = 0; i < cells; ++i) {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        project(x);
        project(r);
        double rr_new = 0;
        for (double v : r) rr_new += v * v;
        const double beta = rr_new / rr;
        rr = rr_new;
        for (std::size_t i = 0; i < cells; ++i) p[i] = r[i] + beta * p[i];
    }
    throw CgFailure("darcy_solve: CG did not reach tol " + std::to_string(tol) + " for sample seed " +
                    std::to_string(tag));
}

inline GridDataset gen_darcy(std::int64_t count, int n, const GrfSpec& spec, double cg_tol,
                             std::uint64_t seed) {
    if (!(cg_tol > 0.0)) throw std::invalid_argument("gen_darcy: cg_tol must be > 0");
    GridDataset ds;
    ds.channels = {"p", "K"};
    ds.count = count;
    ds.h = ds.w = n;
    const std::size_t cells = static_cast<std::size_t>(n) * n;
    ds.samples.resize(static_cast<std::size_t>(count) * 2 * cells);
    const double h = 1.0 / n;
    const auto f = residuals::darcy_forcing(n);
    for (std::int64_t s = 0; s < count; ++s) {
        Rng rng(seed, static_cast<std::uint64_t>(s));
        auto g = gen_grf(spec, n, rng);
        std::vector<double> k(cells);
        for (std::size_t i = 0; i < cells; ++i) k[i] = std::exp(g[i]);
        auto p = darcy_solve(k, f, n, h, cg_tol, mix_seed(seed, s));
        double* dst = ds.samples.data() + static_cast<std::size_t>(s) * 2 * cells;
        std::copy(p.begin(), p.end(), dst);
        std::copy(k.begin(), k.end(), dst + cells);
    }
    compute_stats(ds);
    ds.manifest = {{"generator", "darcy"},
                   {"seed", seed},
                   {"count", count},
                   {"grid", n},
                   {"cg_tol", cg_tol},
                   {"grf", {{"corr_len", spec.corr_len}, {"variance", spec.variance}}}};
    return ds;
}

// ---------------------------------------------------------------------------
// divergence-free flow: velocity is the curl of a random periodic stream
// function; the spectral decay exponent is mapped monotonically from the
// condition value (larger c -> shallower decay -> finer scales)

inline GridDataset gen_divfree(std::int64_t count, int n, int n_conditions, std::uint64_t seed) {
    if (n % 2 != 0) throw std::invalid_argument("gen_divfree: grid size must be even");
    if (n_conditions < 1) throw std::invalid_argument("gen_divfree: need at least one condition");
    GridDataset ds;
    ds.channels = {"u", "v"};
    ds.count = count;
    ds.h = ds.w = n;
    ds.cond_dim = 1;
    const std::size_t cells = static_cast<std::size_t>(n) * n;
    ds.samples.resize(static_cast<std::size_t>(count) * 2 * cells);
    ds.cond.resize(static_cast<std::size_t>(count));
    const double domain = 1.0;

    for (std::int64_t s = 0; s < count; ++s) {
        const int ci = static_cast<int>(s % n_conditions);
        const double c = 100.0 + 400.0 * (ci + 0.5) / n_conditions;
        const double alpha = 3.0 - (c - 100.0) / 400.0 * 1.25;  // in [1.75, 3.0]
        ds.cond[s] = c;

        std::vector<double> amp(cells, 0.0);
        double vel_power = 0.0;
        for (int iy = 0; iy < n; ++iy) {
            const int my = iy <= n / 2 ? iy : iy - n;
            for (int ix = 0; ix < n; ++ix) {
                const int mx = ix <= n / 2 ? ix : ix - n;
                if (mx == 0 && my == 0) continue;
                const double kmag = std::sqrt(static_cast<double>(mx * mx + my * my));
                const double a = std::pow(kmag, -alpha);
                amp[static_cast<std::size_t>(iy) * n + ix] = a;
                vel_power += (2.0 * M_PI * kmag / domain) * (2.0 * M_PI * kmag / domain) * a * a;
            }
        }
        // unit mean-square speed per component: (Var(u)+Var(v))/2 = 1
        const double scale = std::sqrt(2.0 / (vel_power / cells));

        Rng rng(seed, static_cast<std::uint64_t>(s));
        std::vector<double> noise(cells), psi(cells), u(cells), v(cells);
        for (auto& x : noise) x = rng.normal();
        spectral::filter(noise.data(), psi.data(), n, n, amp);
        for (auto& x : psi) x *= scale;
        spectral::derivative(psi.data(), u.data(), n, n, 0, domain);  // u = d(psi)/dy
        spectral::derivative(psi.data(), v.data(), n, n, 1, domain);
        for (auto& x : v) x = -x;  // v = -d(psi)/dx

        double* dst = ds.samples.data() + static_cast<std::size_t>(s) * 2 * cells;
        std::copy(u.begin(), u.end(), dst);
        std::copy(v.begin(), v.end(), dst + cells);
    }
    compute_stats(ds);
    ds.manifest = {{"generator", "divfree"},
                   {"seed", seed},
                   {"count", count},
                   {"grid", n},
                   {"n_conditions", n_conditions}};
    return ds;
}

// ---------------------------------------------------------------------------
// algebraic-constraint data: six channels where P and tau_w are computed
// exactly from the ideal-gas law and Sutherland's formula, so both residuals
// vanish by construction

inline GridDataset gen_algebraic(std::int64_t count, int n, int n_conditions, std::uint64_t seed,
                                 const residuals::StallConstants& consts = {}) {
    if (n_conditions < 1) throw std::invalid_argument("gen_algebraic: need at least one condition");
    GridDataset ds;
    ds.channels = {"P", "T", "rho", "tau_w", "dudx", "dudy"};
    ds.count = count;
    ds.h = ds.w = n;
    ds.cond_dim = 4;
    const std::size_t cells = static_cast<std::size_t>(n) * n;
    ds.samples.resize(static_cast<std::size_t>(count) * 6 * cells);
    ds.cond.resize(static_cast<std::size_t>(count) * 4);

    // distinct condition vectors in [0,1]^4
    std::vector<double> cond_table(static_cast<std::size_t>(n_conditions) * 4);
    for (int c = 0; c < n_conditions; ++c) {
        Rng crng(mix_seed(seed, 0xc0ffee), static_cast<std::uint64_t>(c));
        for (int d = 0; d < 4; ++d) cond_table[static_cast<std::size_t>(c) * 4 + d] = crng.uniform();
    }

    GrfSpec smooth{0.25, 1.0, 0};
    const double grad_scale = 2.0e5;  // 1/s, wall-gradient magnitude
    for (std::int64_t s = 0; s < count; ++s) {
        const int ci = static_cast<int>(s % n_conditions);
        const double* cv = cond_table.data() + static_cast<std::size_t>(ci) * 4;
        std::copy(cv, cv + 4, ds.cond.data() + static_cast<std::size_t>(s) * 4);

        Rng rng(seed, static_cast<std::uint64_t>(s));
        auto g1 = gen_grf(smooth, n, rng);
        auto g2 = gen_grf(smooth, n, rng);
        auto g3 = gen_grf(smooth, n, rng);
        auto g4 = gen_grf(smooth, n, rng);

        double* dst = ds.samples.data() + static_cast<std::size_t>(s) * 6 * cells;
        double* P = dst;
        double* T = dst + cells;
        double* rho = dst + 2 * cells;
        double* tau = dst + 3 * cells;
        double* gx = dst + 4 * cells;
        double* gy = dst + 5 * cells;
        const double t_base = 280.0 + 40.0 * cv[0];  // mean T rises with the first entry
        const double g_amp = 0.5 + cv[1];
        for (std::size_t i = 0; i < cells; ++i) {
            T[i] = t_base * std::exp(0.05 * g1[i]);
            rho[i] = 1.2 * std::exp(0.08 * g2[i]);
            gx[i] = grad_scale * g_amp * g3[i];
            gy[i] = grad_scale * g_amp * g4[i];
            P[i] = rho[i] * consts.r_gas * T[i];
            tau[i] = residuals::sutherland_viscosity(T[i], consts) *
                     std::sqrt(gx[i] * gx[i] + gy[i] * gy[i]);
        }
    }
    compute_stats(ds);
    ds.manifest = {{"generator", "algebraic"},
                   {"seed", seed},
                   {"count", count},
                   {"grid", n},
                   {"n_conditions", n_conditions}};
    return ds;
}

}  // namespace pbfm::data
