#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

// Conflict-free combination of the flow-matching and residual gradients,
// plus the fixed-weight baseline. Operates on whole-model gradient vectors
// flattened in parameter registration order.

namespace pbfm::combiner {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const std::vector<double>& g) { return std::sqrt(dot(g, g)); }

// O(g1, g2) = g2 - (g1.g2 / |g1|^2) g1. Degenerate rule: g1 = 0 returns g2.
inline std::vector<double> orthogonalize(const std::vector<double>& g1,
                                         const std::vector<double>& g2) {
    if (g1.size() != g2.size())
        throw std::invalid_argument("orthogonalize: length mismatch " + std::to_string(g1.size()) +
                                    " vs " + std::to_string(g2.size()));
    const double n2 = dot(g1, g1);
    if (n2 == 0.0) return g2;
    const double coef = dot(g1, g2) / n2;
    std::vector<double> out(g2.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = g2[i] - coef * g1[i];
    return out;
}

// U(g) = g / |g|; |g| <= eps maps to 0 (documented degenerate rule)
inline std::vector<double> unit(const std::vector<double>& g, double eps = 1e-12) {
    const double n = norm(g);
    if (n <= eps) return std::vector<double>(g.size(), 0.0);
    std::vector<double> out(g.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = g[i] / n;
    return out;
}

enum class ConfigStatus {
    Ok,            // conflict-free direction computed
    ZeroInput,     // one or both gradients vanished; fell back to the sum
    Parallel,      // cos similarity > 1 - 1e-8; fell back to the sum
    AntiParallel,  // exactly opposed; update is zero
};

// g_v = U[ U(O(g_fm, g_r)) + U(O(g_r, g_fm)) ],
// g_update = (g_fm . g_v + g_r . g_v) g_v
inline std::vector<double> config_update(const std::vector<double>& g_fm,
                                         const std::vector<double>& g_r,
                                         ConfigStatus* status = nullptr) {
    if (g_fm.size() != g_r.size())
        throw std::invalid_argument("config_update: length mismatch " + std::to_string(g_fm.size()) +
                                    " vs " + std::to_string(g_r.size()));
    const double n_fm = norm(g_fm), n_r = norm(g_r);
    auto set = [&](ConfigStatus s) {
        if (status) *status = s;
    };

    if (n_fm <= 1e-12 || n_r <= 1e-12) {
        set(ConfigStatus::ZeroInput);
        std::vector<double> out(g_fm.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = g_fm[i] + g_r[i];
        return out;
    }
    const double cosine = dot(g_fm, g_r) / (n_fm * n_r);
    if (cosine > 1.0 - 1e-8) {
        set(ConfigStatus::Parallel);
        std::vector<double> out(g_fm.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = g_fm[i] + g_r[i];
        return out;
    }
    if (cosine < -1.0 + 1e-8) {
        // orthogonalized components vanish; no direction decreases both losses
        set(ConfigStatus::AntiParallel);
        return std::vector<double>(g_fm.size(), 0.0);
    }

    const auto u1 = unit(orthogonalize(g_fm, g_r));
    const auto u2 = unit(orthogonalize(g_r, g_fm));
    std::vector<double> v(g_fm.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = u1[i] + u2[i];
    const auto g_v = unit(v);
    const double mag = dot(g_fm, g_v) + dot(g_r, g_v);
    std::vector<double> out(g_fm.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = mag * g_v[i];
    set(ConfigStatus::Ok);
    return out;
}

inline std::vector<double> weighted_update(const std::vector<double>& g_fm,
                                           const std::vector<double>& g_r, double w_fm, double w_r) {
    if (g_fm.size() != g_r.size())
        throw std::invalid_argument("weighted_update: length mismatch");
    std::vector<double> out(g_fm.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = w_fm * g_fm[i] + w_r * g_r[i];
    return out;
}

}  // namespace pbfm::combiner
