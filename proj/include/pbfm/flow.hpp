#pragma once

#include "pbfm/autodiff.hpp"
#include "pbfm/rng.hpp"

#include <stdexcept>
#include <string>
#include <vector>

// Optimal-transport conditional flow path: straight-line interpolant between
// a noise sample and a data sample, its conditional velocity, training-time
// time sampling, and the flow-matching loss.

namespace pbfm::flow {

enum class TimeDist { Uniform, LogitNormal };

inline const char* to_string(TimeDist d) {
    return d == TimeDist::Uniform ? "uniform" : "logitnormal";
}

inline TimeDist time_dist_from(const std::string& s) {
    if (s == "uniform") return TimeDist::Uniform;
    if (s == "logitnormal" || s == "logit-normal") return TimeDist::LogitNormal;
    throw std::invalid_argument("unknown time distribution: " + s);
}

struct FlowConfig {
    double sigma_min = 0.0;  // < 1
    TimeDist time_dist = TimeDist::Uniform;
};

// n draws in the open interval (0,1)
inline std::vector<double> sample_time(std::size_t n, TimeDist dist, Rng& rng) {
    std::vector<double> t(n);
    if (dist == TimeDist::Uniform) {
        for (auto& v : t) v = rng.uniform();
    } else {
        for (auto& v : t) v = ad::detail::sigmoid_val(rng.normal());
    }
    return t;
}

// psi_t(x0) = (1 - (1 - sigma_min) t) x0 + t x1, elementwise
inline std::vector<double> interpolate(const std::vector<double>& x0, const std::vector<double>& x1,
                                       double t, double sigma_min) {
    if (x0.size() != x1.size())
        throw ad::ShapeError("interpolate: size mismatch " + std::to_string(x0.size()) + " vs " +
                             std::to_string(x1.size()));
    const double c0 = 1.0 - (1.0 - sigma_min) * t;
    std::vector<double> out(x0.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c0 * x0[i] + t * x1[i];
    return out;
}

// u_t(x | x1) = (x1 - (1 - sigma_min) x) / (1 - (1 - sigma_min) t)
inline std::vector<double> target_velocity(const std::vector<double>& x, const std::vector<double>& x1,
                                           double t, double sigma_min) {
    if (x.size() != x1.size())
        throw ad::ShapeError("target_velocity: size mismatch " + std::to_string(x.size()) + " vs " +
                             std::to_string(x1.size()));
    const double a = 1.0 - sigma_min;
    const double denom = 1.0 - a * t;
    if (denom <= 0.0)
        throw std::domain_error("target_velocity: undefined at t=1 with sigma_min=0");
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x1[i] - a * x[i]) / denom;
    return out;
}

// batched forms; t is per-sample, buffers are [n, elems] row-major
inline std::vector<double> interpolate_batch(const std::vector<double>& x0,
                                             const std::vector<double>& x1,
                                             const std::vector<double>& t, double sigma_min) {
    if (x0.size() != x1.size() || t.empty() || x0.size() % t.size() != 0)
        throw ad::ShapeError("interpolate_batch: inconsistent sizes");
    const std::size_t elems = x0.size() / t.size();
    std::vector<double> out(x0.size());
    for (std::size_t s = 0; s < t.size(); ++s) {
        const double c0 = 1.0 - (1.0 - sigma_min) * t[s];
        const double* p0 = x0.data() + s * elems;
        const double* p1 = x1.data() + s * elems;
        double* po = out.data() + s * elems;
        for (std::size_t i = 0; i < elems; ++i) po[i] = c0 * p0[i] + t[s] * p1[i];
    }
    return out;
}

inline std::vector<double> target_velocity_batch(const std::vector<double>& x,
                                                 const std::vector<double>& x1,
                                                 const std::vector<double>& t, double sigma_min) {
    if (x.size() != x1.size() || t.empty() || x.size() % t.size() != 0)
        throw ad::ShapeError("target_velocity_batch: inconsistent sizes");
    const std::size_t elems = x.size() / t.size();
    const double a = 1.0 - sigma_min;
    std::vector<double> out(x.size());
    for (std::size_t s = 0; s < t.size(); ++s) {
        const double denom = 1.0 - a * t[s];
        if (denom <= 0.0)
            throw std::domain_error("target_velocity: undefined at t=1 with sigma_min=0");
        const double* px = x.data() + s * elems;
        const double* p1 = x1.data() + s * elems;
        double* po = out.data() + s * elems;
        for (std::size_t i = 0; i < elems; ++i) po[i] = (p1[i] - a * px[i]) / denom;
    }
    return out;
}

// mean squared error over batch and elements
inline ad::Tensor fm_loss(const ad::Tensor& u_pred, const ad::Tensor& u_target) {
    if (u_pred.shape() != u_target.shape())
        throw ad::ShapeError("fm_loss: shape mismatch " + ad::shape_str(u_pred.shape()) + " vs " +
                             ad::shape_str(u_target.shape()));
    return ad::mse(u_pred, u_target);
}

inline double fm_loss_value(const std::vector<double>& u_pred, const std::vector<double>& u_target) {
    if (u_pred.size() != u_target.size()) throw ad::ShapeError("fm_loss: size mismatch");
    double s = 0;
    for (std::size_t i = 0; i < u_pred.size(); ++i) {
        const double d = u_pred[i] - u_target[i];
        s += d * d;
    }
    return s / static_cast<double>(u_pred.size());
}

}  // namespace pbfm::flow
