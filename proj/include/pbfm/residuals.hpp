#pragma once

#include "pbfm/autodiff.hpp"
#include "pbfm/grid_ops.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

// Physics residual operators. Each kind exists in two forms:
//   - plain-array evaluators that validate physical preconditions (used by
//     the data generators and evaluation),
//   - a differentiable Operator::apply used inside training, which cannot
//     reject mid-graph and instead guards the Sutherland law and the
//     gradient magnitude against degenerate predicted values.
// The Darcy stencil below is the single implementation shared with the data
// generator's solver, so stored samples satisfy the same discrete operator
// that training penalizes.

namespace pbfm::residuals {

struct StallConstants {
    double r_gas = 287.05;  // J/(kg K), dry air
    double mu0 = 1.716e-5;  // Pa s
    double t0 = 273.15;     // K
    double s = 110.4;       // K
};

struct DarcyForcing {
    double r = 10.0;
    double w = 0.125;
};

enum class Kind { Circle, Darcy, Divergence, AlgebraicStall };
enum class DivScheme { Spectral, Central };

// ---------------------------------------------------------------------------
// plain evaluators

// xy is [n,2] row-major; returns x^2 + y^2 - 1 per sample
inline std::vector<double> circle_residual(const std::vector<double>& xy) {
    if (xy.size() % 2 != 0)
        throw ad::ShapeError("circle_residual: expected [n,2] data, got " +
                             std::to_string(xy.size()) + " values");
    std::vector<double> r(xy.size() / 2);
    for (std::size_t i = 0; i < r.size(); ++i) {
        const double x = xy[2 * i], y = xy[2 * i + 1];
        r[i] = x * x + y * y - 1.0;
    }
    return r;
}

// +r on the [0,w]^2 corner square, -r on [1-w,1]^2; cell centers at (i+1/2)h
inline std::vector<double> darcy_forcing(int n, const DarcyForcing& fc = {}) {
    std::vector<double> f(static_cast<std::size_t>(n) * n, 0.0);
    const double h = 1.0 / n;
    for (int i = 0; i < n; ++i) {
        const double y = (i + 0.5) * h;
        for (int j = 0; j < n; ++j) {
            const double x = (j + 0.5) * h;
            if (x <= fc.w && y <= fc.w) f[static_cast<std::size_t>(i) * n + j] = fc.r;
            if (x >= 1.0 - fc.w && y >= 1.0 - fc.w) f[static_cast<std::size_t>(i) * n + j] = -fc.r;
        }
    }
    return f;
}

// div(K grad p) with arithmetic-mean face coefficients and zero-flux
// boundary faces, on an n x n cell-centered grid with spacing h
inline void darcy_apply(const double* k, const double* p, double* out, int n, double h) {
    const double inv_h2 = 1.0 / (h * h);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const std::size_t c = static_cast<std::size_t>(i) * n + j;
            double acc = 0.0;
            if (j + 1 < n) acc += 0.5 * (k[c] + k[c + 1]) * (p[c + 1] - p[c]);
            if (j > 0) acc -= 0.5 * (k[c] + k[c - 1]) * (p[c] - p[c - 1]);
            if (i + 1 < n) acc += 0.5 * (k[c] + k[c + n]) * (p[c + n] - p[c]);
            if (i > 0) acc -= 0.5 * (k[c] + k[c - n]) * (p[c] - p[c - n]);
            out[c] = acc * inv_h2;
        }
    }
}

// R = div(K grad p) + f with zero-mean p; no input validation (the stencil
// itself is well-defined for any K)
inline std::vector<double> darcy_residual_raw(const std::vector<double>& k,
                                              const std::vector<double>& p,
                                              const std::vector<double>& f, int n, double h) {
    const std::size_t cells = static_cast<std::size_t>(n) * n;
    if (k.size() != cells || p.size() != cells || f.size() != cells)
        throw ad::ShapeError("darcy_residual: grids must all be " + std::to_string(n) + "x" +
                             std::to_string(n));
    double mean = 0.0;
    for (double pv : p) mean += pv;
    mean /= static_cast<double>(cells);
    std::vector<double> p0(cells);
    for (std::size_t i = 0; i < cells; ++i) p0[i] = p[i] - mean;
    std::vector<double> r(cells);
    darcy_apply(k.data(), p0.data(), r.data(), n, h);
    for (std::size_t i = 0; i < cells; ++i) r[i] += f[i];
    return r;
}

// strict form: rejects non-positive permeability
inline std::vector<double> darcy_residual(const std::vector<double>& k,
                                          const std::vector<double>& p,
                                          const std::vector<double>& f, int n, double h) {
    for (double kv : k)
        if (!(kv > 0.0))
            throw std::domain_error("darcy_residual: permeability must be positive, got " +
                                    std::to_string(kv));
    return darcy_residual_raw(k, p, f, n, h);
}

// discrete divergence of a periodic velocity field on [0,domain)^2
inline std::vector<double> divergence_residual(const std::vector<double>& u,
                                               const std::vector<double>& v, int n, double domain,
                                               DivScheme scheme) {
    const std::size_t cells = static_cast<std::size_t>(n) * n;
    if (u.size() != cells || v.size() != cells)
        throw ad::ShapeError("divergence_residual: velocity planes must be " + std::to_string(n) +
                             "x" + std::to_string(n));
    std::vector<double> r(cells, 0.0);
    if (scheme == DivScheme::Spectral) {
        std::vector<double> du(cells), dv(cells);
        spectral::derivative(u.data(), du.data(), n, n, 1, domain);
        spectral::derivative(v.data(), dv.data(), n, n, 0, domain);
        for (std::size_t i = 0; i < cells; ++i) r[i] = du[i] + dv[i];
    } else {
        const double h = domain / n;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                const int jp = (j + 1) % n, jm = (j + n - 1) % n;
                const int ip = (i + 1) % n, im = (i + n - 1) % n;
                r[static_cast<std::size_t>(i) * n + j] =
                    (u[static_cast<std::size_t>(i) * n + jp] -
                     u[static_cast<std::size_t>(i) * n + jm] +
                     v[static_cast<std::size_t>(ip) * n + j] -
                     v[static_cast<std::size_t>(im) * n + j]) /
                    (2.0 * h);
            }
    }
    return r;
}

inline double sutherland_viscosity(double t, const StallConstants& c) {
    return c.mu0 * (c.t0 + c.s) / (t + c.s) * std::pow(t / c.t0, 1.5);
}

// ideal-gas and skin-friction residuals, pointwise. Strict mode rejects
// T <= 0; lenient mode floors T at 1 K (matching the training-path guard) so
// model outputs can always be scored.
inline std::pair<std::vector<double>, std::vector<double>> stall_residuals(
    const std::vector<double>& p, const std::vector<double>& t, const std::vector<double>& rho,
    const std::vector<double>& tau, const std::vector<double>& dudx,
    const std::vector<double>& dudy, const StallConstants& c = {}, bool strict = true) {
    const std::size_t n = p.size();
    if (t.size() != n || rho.size() != n || tau.size() != n || dudx.size() != n ||
        dudy.size() != n)
        throw ad::ShapeError("stall_residuals: all six channels must have equal size");
    std::vector<double> r_ig(n), r_tau(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (strict && !(t[i] > 0.0))
            throw std::domain_error("stall_residuals: temperature must be positive, got " +
                                    std::to_string(t[i]));
        r_ig[i] = p[i] - rho[i] * c.r_gas * t[i];
        const double t_eff = strict ? t[i] : std::max(t[i], 1.0);
        const double gmag = std::sqrt(dudx[i] * dudx[i] + dudy[i] * dudy[i]);
        r_tau[i] = tau[i] - sutherland_viscosity(t_eff, c) * gmag;
    }
    return {std::move(r_ig), std::move(r_tau)};
}

// ---------------------------------------------------------------------------
// differentiable operator

struct Operator {
    Kind kind = Kind::Circle;
    int grid_n = 0;                           // H = W for grid kinds
    double h = 0.0;                           // spacing (Darcy)
    double domain = 1.0;                      // periodic length (divergence)
    DivScheme scheme = DivScheme::Spectral;
    StallConstants consts;
    DarcyForcing forcing;

    static Operator circle() { return {Kind::Circle}; }
    static Operator darcy(int n) {
        Operator op{Kind::Darcy};
        op.grid_n = n;
        op.h = 1.0 / n;
        return op;
    }
    static Operator divergence(int n, double domain = 1.0, DivScheme scheme = DivScheme::Spectral) {
        Operator op{Kind::Divergence};
        op.grid_n = n;
        op.domain = domain;
        op.scheme = scheme;
        return op;
    }
    static Operator stall(int n) {
        Operator op{Kind::AlgebraicStall};
        op.grid_n = n;
        return op;
    }

    // expected channel count of the fields the operator consumes
    int channels() const {
        switch (kind) {
            case Kind::Circle: return 2;
            case Kind::Darcy: return 2;       // (p, K)
            case Kind::Divergence: return 2;  // (u, v)
            case Kind::AlgebraicStall: return 6;  // (P, T, rho, tau_w, du/dx, du/dy)
        }
        return 0;
    }

    int residual_channels() const { return kind == Kind::AlgebraicStall ? 2 : 1; }

    // fields: [B,2] for circle, [B,C,H,W] for grid kinds, physical units
    ad::Tensor apply(const ad::Tensor& fields) const {
        switch (kind) {
            case Kind::Circle: return apply_circle(fields);
            case Kind::Darcy: return apply_darcy(fields);
            case Kind::Divergence: return apply_divergence(fields);
            case Kind::AlgebraicStall: return apply_stall(fields);
        }
        throw std::logic_error("residual operator: bad kind");
    }

    // plain evaluation for [count, C(, H, W)] sample arrays, one residual
    // block per sample. strict validates physical preconditions (dataset
    // verification); lenient scores arbitrary model outputs
    std::vector<double> evaluate(const std::vector<double>& samples, std::int64_t count,
                                 bool strict = true) const;

  private:
    ad::Tensor apply_circle(const ad::Tensor& x) const {
        if (x.shape().size() != 2 || x.shape()[1] != 2)
            throw ad::ShapeError("circle residual: expected [B,2], got " + ad::shape_str(x.shape()));
        auto xs = ad::slice(x, 1, 0, 1);
        auto ys = ad::slice(x, 1, 1, 2);
        return ad::add(ad::mul(xs, xs), ad::mul(ys, ys)) - 1.0;
    }

    void check_grid(const ad::Tensor& x, int c) const {
        if (x.shape().size() != 4 || x.shape()[1] != c || x.shape()[2] != grid_n ||
            x.shape()[3] != grid_n)
            throw ad::ShapeError("residual operator: expected [B," + std::to_string(c) + "," +
                                 std::to_string(grid_n) + "," + std::to_string(grid_n) + "], got " +
                                 ad::shape_str(x.shape()));
    }

    ad::Tensor apply_darcy(const ad::Tensor& x) const {
        check_grid(x, 2);
        const std::int64_t b = x.shape()[0], n = grid_n;
        auto p_raw = ad::slice(x, 1, 0, 1);
        auto k = ad::slice(x, 1, 1, 2);
        // zero-mean pressure before evaluation
        auto p = ad::sub(p_raw, ad::expand_spatial(ad::spatial_mean(p_raw), n, n));

        auto zeros_col = ad::Tensor::zeros({b, 1, n, 1});
        auto zeros_row = ad::Tensor::zeros({b, 1, 1, n});

        // x-direction face fluxes and their divergence
        auto dpx = ad::sub(ad::slice(p, 3, 1, n), ad::slice(p, 3, 0, n - 1)) / h;
        auto kfx = ad::mul(ad::add(ad::slice(k, 3, 1, n), ad::slice(k, 3, 0, n - 1)),
                           ad::Tensor::scalar(0.5));
        auto fx = ad::mul(kfx, dpx);
        auto divx = ad::sub(ad::concat({fx, zeros_col}, 3), ad::concat({zeros_col, fx}, 3)) / h;

        auto dpy = ad::sub(ad::slice(p, 2, 1, n), ad::slice(p, 2, 0, n - 1)) / h;
        auto kfy = ad::mul(ad::add(ad::slice(k, 2, 1, n), ad::slice(k, 2, 0, n - 1)),
                           ad::Tensor::scalar(0.5));
        auto fy = ad::mul(kfy, dpy);
        auto divy = ad::sub(ad::concat({fy, zeros_row}, 2), ad::concat({zeros_row, fy}, 2)) / h;

        auto f_plane = darcy_forcing(static_cast<int>(n), forcing);
        std::vector<double> f_tiled;
        f_tiled.reserve(static_cast<std::size_t>(b) * f_plane.size());
        for (std::int64_t i = 0; i < b; ++i)
            f_tiled.insert(f_tiled.end(), f_plane.begin(), f_plane.end());
        auto f = ad::Tensor::from({b, 1, n, n}, std::move(f_tiled));
        return ad::add(ad::add(divx, divy), f);
    }

    ad::Tensor apply_divergence(const ad::Tensor& x) const {
        check_grid(x, 2);
        const std::int64_t n = grid_n;
        auto u = ad::slice(x, 1, 0, 1);
        auto v = ad::slice(x, 1, 1, 2);
        if (scheme == DivScheme::Spectral)
            return ad::add(ad::spectral_deriv(u, 1, domain), ad::spectral_deriv(v, 0, domain));
        const double h2 = 2.0 * domain / n;
        auto up = ad::pad2d(u, 1, ad::PadMode::Periodic);
        auto vp = ad::pad2d(v, 1, ad::PadMode::Periodic);
        auto du = ad::sub(ad::slice(ad::slice(up, 2, 1, n + 1), 3, 2, n + 2),
                          ad::slice(ad::slice(up, 2, 1, n + 1), 3, 0, n)) /
                  h2;
        auto dv = ad::sub(ad::slice(ad::slice(vp, 3, 1, n + 1), 2, 2, n + 2),
                          ad::slice(ad::slice(vp, 3, 1, n + 1), 2, 0, n)) /
                  h2;
        return ad::add(du, dv);
    }

    ad::Tensor apply_stall(const ad::Tensor& x) const {
        check_grid(x, 6);
        auto p = ad::slice(x, 1, 0, 1);
        auto t = ad::slice(x, 1, 1, 2);
        auto rho = ad::slice(x, 1, 2, 3);
        auto tau = ad::slice(x, 1, 3, 4);
        auto gx = ad::slice(x, 1, 4, 5);
        auto gy = ad::slice(x, 1, 5, 6);

        auto r_ig = ad::sub(p, ad::mul(rho, t) * consts.r_gas);

        // training guard: keep the Sutherland law and sqrt differentiable
        // when predictions stray out of the physical range
        auto t_eff = ad::clamp_min(t, 1.0);
        auto mu = ad::mul(ad::div(ad::Tensor::scalar(consts.mu0 * (consts.t0 + consts.s)),
                                  t_eff + consts.s),
                          ad::pow(t_eff / consts.t0, 1.5));
        auto g2 = ad::clamp_min(ad::add(ad::mul(gx, gx), ad::mul(gy, gy)), 1e-30);
        auto r_tau = ad::sub(tau, ad::mul(mu, ad::sqrt(g2)));
        return ad::concat({r_ig, r_tau}, 1);
    }
};

inline std::vector<double> Operator::evaluate(const std::vector<double>& samples,
                                              std::int64_t count, bool strict) const {
    if (count <= 0) throw std::invalid_argument("residual evaluate: empty batch");
    const std::size_t per = samples.size() / static_cast<std::size_t>(count);
    std::vector<double> out;
    if (kind == Kind::Circle) {
        if (per != 2) throw ad::ShapeError("circle residual: expected 2 values per sample");
        return circle_residual(samples);
    }
    const int n = grid_n;
    const std::size_t cells = static_cast<std::size_t>(n) * n;
    if (per != static_cast<std::size_t>(channels()) * cells)
        throw ad::ShapeError("residual evaluate: sample stride " + std::to_string(per) +
                             " does not match " + std::to_string(channels()) + " channels of " +
                             std::to_string(n) + "x" + std::to_string(n));
    out.reserve(static_cast<std::size_t>(count) * residual_channels() * cells);
    for (std::int64_t si = 0; si < count; ++si) {
        const double* s = samples.data() + static_cast<std::size_t>(si) * per;
        auto chan = [&](int c) {
            return std::vector<double>(s + static_cast<std::size_t>(c) * cells,
                                       s + static_cast<std::size_t>(c + 1) * cells);
        };
        if (kind == Kind::Darcy) {
            auto r = strict ? darcy_residual(chan(1), chan(0), darcy_forcing(n, forcing), n, h)
                            : darcy_residual_raw(chan(1), chan(0), darcy_forcing(n, forcing), n, h);
            out.insert(out.end(), r.begin(), r.end());
        } else if (kind == Kind::Divergence) {
            auto r = divergence_residual(chan(0), chan(1), n, domain, scheme);
            out.insert(out.end(), r.begin(), r.end());
        } else {
            auto [rig, rtau] = stall_residuals(chan(0), chan(1), chan(2), chan(3), chan(4), chan(5),
                                               consts, strict);
            out.insert(out.end(), rig.begin(), rig.end());
            out.insert(out.end(), rtau.begin(), rtau.end());
        }
    }
    return out;
}

// L_R = mean over batch and elements of (t^p R)^2, weighted by each sample's
// starting time
inline ad::Tensor residual_loss(const ad::Tensor& r, const std::vector<double>& t_start,
                                double power) {
    if (power < 0.0) throw std::invalid_argument("residual_loss: power must be >= 0");
    const std::int64_t b = r.shape()[0];
    if (t_start.size() != static_cast<std::size_t>(b))
        throw ad::ShapeError("residual_loss: " + std::to_string(t_start.size()) + " times for batch " +
                             std::to_string(b));
    std::vector<double> w(t_start.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::pow(t_start[i], power);
    ad::Shape rest(r.shape().begin() + 1, r.shape().end());
    auto wt = ad::expand_persample(ad::Tensor::from({b}, std::move(w)), rest);
    auto wr = ad::mul(wt, r);
    return ad::mean(ad::mul(wr, wr));
}

}  // namespace pbfm::residuals
