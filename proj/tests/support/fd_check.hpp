#pragma once

#include "pbfm/autodiff.hpp"
#include "pbfm/rng.hpp"

#include <algorithm>
#include <functional>
#include <vector>

// Central finite-difference oracle for gradient checks. The loss builder is
// re-invoked for every probe so it must read parameter values fresh each
// call (graphs are define-by-run, so any lambda over the param tensors does).

namespace pbfm_test {

struct FdReport {
    double max_rel = 0.0;
    double worst_analytic = 0.0;
    double worst_fd = 0.0;
};

inline FdReport fd_check(const std::vector<pbfm::ad::Tensor>& params,
                         const std::function<pbfm::ad::Tensor()>& build, double step = 1e-6) {
    using pbfm::ad::backward;
    using pbfm::ad::zero_grads;

    zero_grads(params);
    backward(build());
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) analytic.push_back(p.grad());

    FdReport rep;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto p = params[pi];
        auto& vals = p.mutable_value();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double saved = vals[i];
            vals[i] = saved + step;
            const double lp = build().item();
            vals[i] = saved - step;
            const double lm = build().item();
            vals[i] = saved;
            const double fd = (lp - lm) / (2.0 * step);
            const double a = analytic[pi][i];
            const double denom = std::max({std::abs(a), std::abs(fd), 1e-2});
            const double rel = std::abs(a - fd) / denom;
            if (rel > rep.max_rel) {
                rep.max_rel = rel;
                rep.worst_analytic = a;
                rep.worst_fd = fd;
            }
        }
    }
    return rep;
}

inline std::vector<double> random_vec(std::size_t n, pbfm::Rng& rng, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * rng.normal();
    return v;
}

}  // namespace pbfm_test
