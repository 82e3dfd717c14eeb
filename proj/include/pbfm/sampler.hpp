#pragma once

#include "pbfm/data.hpp"
#include "pbfm/models.hpp"
#include "pbfm/rng.hpp"

#include <stdexcept>
#include <string>
#include <vector>

// Inference-time generation: left-endpoint Euler over n equispaced steps on
// t in {0, dt, ..., 1-dt}. The stochastic variant, active while t < t_star,
// jumps to the one-step final-state estimate, advances t, and re-noises back
// to the new time level with fresh Gaussian noise. Each sample owns an RNG
// stream derived from (seed, sample index), so results are independent of
// batch splitting.

namespace pbfm::sampler {

struct SamplerConfig {
    int steps = 20;           // n >= 1
    bool stochastic = false;
    double t_star = 0.2;      // in [0,1]
    std::uint64_t seed = 0;
    std::int64_t max_batch = 256;  // forward-pass chunk size; no effect on values
};

// Generates `count` samples in the net's standardized field space.
// cond_rows: standardized conditioning, count x cond_dim (empty when
// unconditioned). Net needs config() and forward(x, t, cond); templated so
// tests can drive the integrator with closed-form stub fields.
template <class Net>
std::vector<double> sample(const Net& net, std::int64_t count,
                           const std::vector<double>& cond_rows, const SamplerConfig& cfg) {
    if (cfg.steps < 1) throw std::invalid_argument("sample: need at least one step");
    if (cfg.t_star < 0.0 || cfg.t_star > 1.0)
        throw std::invalid_argument("sample: t_star must be in [0,1]");
    const auto& nc = net.config();
    const std::int64_t elems =
        static_cast<std::int64_t>(nc.field_channels) * nc.grid_h * nc.grid_w;
    const bool grid = nc.variant == models::NetVariant::Conv;
    const double dt = 1.0 / cfg.steps;

    std::vector<double> out(static_cast<std::size_t>(count * elems));
    ad::NoGradGuard ng;

    for (std::int64_t start = 0; start < count; start += cfg.max_batch) {
        const std::int64_t b = std::min<std::int64_t>(cfg.max_batch, count - start);

        std::vector<Rng> streams;
        streams.reserve(static_cast<std::size_t>(b));
        std::vector<double> x(static_cast<std::size_t>(b * elems));
        for (std::int64_t i = 0; i < b; ++i) {
            streams.emplace_back(cfg.seed, static_cast<std::uint64_t>(start + i));
            double* xi = x.data() + i * elems;
            for (std::int64_t e = 0; e < elems; ++e) xi[e] = streams.back().normal();
        }
        std::vector<double> cond;
        if (nc.cond_dim > 0)
            cond.assign(cond_rows.begin() + start * nc.cond_dim,
                        cond_rows.begin() + (start + b) * nc.cond_dim);

        double t = 0.0;
        for (int step = 0; step < cfg.steps; ++step) {
            ad::Shape shape = grid ? ad::Shape{b, nc.field_channels, nc.grid_h, nc.grid_w}
                                   : ad::Shape{b, elems};
            auto xt = ad::Tensor::from(shape, x);
            const std::vector<double> tv(static_cast<std::size_t>(b), t);
            const auto ut = net.forward(xt, tv, cond);  // keep the node alive
            const auto& u = ut.value();

            if (cfg.stochastic && t < cfg.t_star) {
                const double horizon = 1.0 - t;
                for (std::size_t i = 0; i < x.size(); ++i) x[i] += horizon * u[i];  // jump to t=1
                t += dt;
                for (std::int64_t i = 0; i < b; ++i) {  // re-noise back to the new t
                    double* xi = x.data() + i * elems;
                    for (std::int64_t e = 0; e < elems; ++e)
                        xi[e] = (1.0 - t) * streams[static_cast<std::size_t>(i)].normal() + t * xi[e];
                }
            } else {
                for (std::size_t i = 0; i < x.size(); ++i) x[i] += dt * u[i];
                t += dt;
            }
        }
        std::copy(x.begin(), x.end(), out.begin() + start * elems);
    }

    for (double v : out)
        if (!std::isfinite(v)) throw std::runtime_error("sample: non-finite output value");
    return out;
}

// Sampling always runs on the EMA shadow parameters.
inline std::vector<double> sample_with_ema(const models::VelocityNet& net,
                                           const models::EmaState& ema, std::int64_t count,
                                           const std::vector<double>& cond_rows,
                                           const SamplerConfig& cfg) {
    if (ema.shadow.size() != net.params().size())
        throw std::invalid_argument("sample_with_ema: checkpoint has no usable EMA state");
    auto shadow_net = net.clone();
    shadow_net.assign(ema.shadow);
    return sample(shadow_net, count, cond_rows, cfg);
}

}  // namespace pbfm::sampler
