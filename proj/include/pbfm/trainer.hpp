#pragma once

#include "pbfm/combiner.hpp"
#include "pbfm/data.hpp"
#include "pbfm/flow.hpp"
#include "pbfm/io.hpp"
#include "pbfm/models.hpp"
#include "pbfm/residuals.hpp"
#include "pbfm/rng.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

// The training step: interpolate, predict the velocity once for the FM loss,
// unroll it to a final-state estimate, evaluate the physics residual on the
// denormalized prediction, combine the two gradients conflict-free (or with
// fixed weights), and take an AdamW step plus the EMA update.
//
// All per-iteration randomness is derived from (seed, iteration), so resuming
// from a checkpoint replays the identical stream.

namespace pbfm::train {

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class UpdateMode { Config, Weighted, FmOnly };

inline const char* to_string(UpdateMode m) {
    switch (m) {
        case UpdateMode::Config: return "config";
        case UpdateMode::Weighted: return "weighted";
        case UpdateMode::FmOnly: return "fm-only";
    }
    return "?";
}

inline UpdateMode update_mode_from(const std::string& s) {
    if (s == "config") return UpdateMode::Config;
    if (s == "weighted") return UpdateMode::Weighted;
    if (s == "fm-only" || s == "fmonly") return UpdateMode::FmOnly;
    throw std::invalid_argument("unknown update mode: " + s);
}

struct TrainConfig {
    std::int64_t iterations = 20000;
    std::int64_t batch = 64;
    double lr = 1e-3;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double weight_decay = 0.0;
    double adam_eps = 1e-8;
    int n_max = 1;                 // unroll ceiling; curriculum ramps up to it
    double residual_power = 1.0;   // t^p weighting
    double sigma_min = 0.0;
    flow::TimeDist time_dist = flow::TimeDist::Uniform;
    UpdateMode mode = UpdateMode::Config;
    double w_fm = 1.0, w_r = 1.0;  // weighted mode only
    std::vector<std::pair<double, int>> curriculum;  // (progress fraction, n); empty = equal phases
    std::uint64_t seed = 0;
    double ema_decay = 0.999;
    std::int64_t log_every = 100;
    std::int64_t checkpoint_every = 0;  // 0 = final checkpoint only
};

// piecewise-constant, non-decreasing unroll schedule; the default splits
// training into n_max equal phases
inline int curriculum_steps(std::int64_t iteration, std::int64_t total, int n_max,
                            const std::vector<std::pair<double, int>>& breakpoints = {}) {
    if (iteration < 0 || iteration >= total)
        throw std::invalid_argument("curriculum: iteration out of range");
    if (n_max < 1) throw std::invalid_argument("curriculum: n_max must be >= 1");
    const double progress = static_cast<double>(iteration) / static_cast<double>(total);
    if (!breakpoints.empty()) {
        int n = 1;
        for (const auto& [frac, steps] : breakpoints) {
            if (progress >= frac) n = steps;
        }
        return std::min(n, n_max);
    }
    const int n = 1 + static_cast<int>(progress * n_max);
    return std::min(n, n_max);
}

// ---------------------------------------------------------------------------
// Algorithm-1 unrolled final-state estimate. The velocity at the starting
// time is computed once; when the caller already has it (for the FM loss),
// pass it in and it seeds the first Euler substep. Subsequent substeps
// re-evaluate the model at advanced times; gradients flow through the whole
// chain.
template <class Model>
ad::Tensor unroll_predict(Model&& model, const ad::Tensor& x_t, const std::vector<double>& t, int n,
                          const ad::Tensor* u_first = nullptr) {
    if (n < 1) throw std::invalid_argument("unroll_predict: need n >= 1");
    for (double ti : t)
        if (ti >= 1.0) throw std::invalid_argument("unroll_predict: start time t = 1 rejected");
    const std::int64_t b = x_t.shape()[0];
    if (t.size() != static_cast<std::size_t>(b))
        throw ad::ShapeError("unroll_predict: time count does not match batch");

    std::vector<double> dt(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) dt[i] = (1.0 - t[i]) / n;
    ad::Shape rest(x_t.shape().begin() + 1, x_t.shape().end());
    auto dt_t = ad::expand_persample(ad::Tensor::from({b}, dt), rest);

    ad::Tensor u0 = u_first ? *u_first : model(x_t, t);
    auto x1 = ad::add(x_t, ad::mul(dt_t, u0));
    std::vector<double> t_cur = t;
    for (int i = 1; i < n; ++i) {
        for (std::size_t s = 0; s < t_cur.size(); ++s) t_cur[s] += dt[s];
        auto u = model(x1, t_cur);
        x1 = ad::add(x1, ad::mul(dt_t, u));
    }
    return x1;
}

// ---------------------------------------------------------------------------

struct OptimizerState {
    std::vector<double> m, v;  // flat, parameter registration order
    std::int64_t step = 0;

    static OptimizerState init(std::int64_t total) {
        OptimizerState s;
        s.m.assign(static_cast<std::size_t>(total), 0.0);
        s.v.assign(static_cast<std::size_t>(total), 0.0);
        return s;
    }
};

inline std::vector<double> flatten_grads(const std::vector<ad::Tensor>& params) {
    std::vector<double> out;
    std::size_t total = 0;
    for (const auto& p : params) total += p.value().size();
    out.reserve(total);
    for (const auto& p : params) {
        if (p.grad().size() == p.value().size())
            out.insert(out.end(), p.grad().begin(), p.grad().end());
        else
            out.insert(out.end(), p.value().size(), 0.0);
    }
    return out;
}

// decoupled-weight-decay adaptive-moment update with bias correction
inline void adamw_step(std::vector<ad::Tensor>& params, const std::vector<double>& grad,
                       OptimizerState& opt, double lr, double beta1, double beta2,
                       double weight_decay, double eps = 1e-8) {
    if (grad.size() != opt.m.size())
        throw std::invalid_argument("adamw_step: gradient length " + std::to_string(grad.size()) +
                                    " does not match optimizer state " + std::to_string(opt.m.size()));
    opt.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(opt.step));
    std::size_t off = 0;
    for (auto& p : params) {
        auto& vals = p.mutable_value();
        for (std::size_t i = 0; i < vals.size(); ++i, ++off) {
            const double g = grad[off];
            opt.m[off] = beta1 * opt.m[off] + (1.0 - beta1) * g;
            opt.v[off] = beta2 * opt.v[off] + (1.0 - beta2) * g * g;
            const double mhat = opt.m[off] / bc1;
            const double vhat = opt.v[off] / bc2;
            vals[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * vals[i]);
        }
    }
}

struct StepMetrics {
    std::int64_t iteration = 0;
    double l_fm = 0;
    double l_r = 0;
    double gnorm_fm = 0;
    double gnorm_r = 0;
    int unroll_n = 1;
    double wall_ms = 0;
    combiner::ConfigStatus combine_status = combiner::ConfigStatus::Ok;
};

class Trainer {
  public:
    // ds must be standardized; op evaluates physical fields, so the trainer
    // denormalizes predictions with the stats recorded in ds
    Trainer(TrainConfig cfg, models::VelocityNet net, data::GridDataset ds,
            residuals::Operator op)
        : cfg_(std::move(cfg)), net_(std::move(net)), data_(std::move(ds)), op_(std::move(op)) {
        if (!data_.standardized)
            throw std::invalid_argument("Trainer: dataset must be standardized");
        if (cfg_.n_max < 1 || cfg_.residual_power < 0.0 || cfg_.lr <= 0.0)
            throw std::invalid_argument("Trainer: invalid config (n_max, power, lr)");
        ema_ = models::EmaState::init_from(net_.params(), cfg_.ema_decay);
        opt_ = OptimizerState::init(net_.param_count());
        grid_ = net_.config().variant == models::NetVariant::Conv;
        // standardized conditioning rows for the embedder
        if (data_.cond_dim > 0) {
            cond_std_.resize(data_.cond.size());
            for (std::int64_t s = 0; s < data_.count; ++s)
                for (std::int64_t d = 0; d < data_.cond_dim; ++d)
                    cond_std_[s * data_.cond_dim + d] =
                        (data_.cond[s * data_.cond_dim + d] - data_.cond_mean[d]) /
                        data_.cond_std[d];
        }
    }

    const TrainConfig& config() const { return cfg_; }
    const models::VelocityNet& net() const { return net_; }
    models::VelocityNet& net() { return net_; }
    const models::EmaState& ema() const { return ema_; }
    models::EmaState& ema() { return ema_; }
    const OptimizerState& optimizer() const { return opt_; }
    OptimizerState& optimizer() { return opt_; }
    const data::GridDataset& dataset() const { return data_; }

    std::int64_t iteration() const { return opt_.step; }

    StepMetrics step() {
        const auto t0 = std::chrono::steady_clock::now();
        const std::int64_t it = opt_.step;
        Rng rng(cfg_.seed, static_cast<std::uint64_t>(it));
        StepMetrics mx;
        mx.iteration = it;
        mx.unroll_n =
            cfg_.mode == UpdateMode::FmOnly
                ? 1
                : curriculum_steps(std::min(it, cfg_.iterations - 1), cfg_.iterations, cfg_.n_max,
                                   cfg_.curriculum);

        // assemble the batch: data sample, fresh noise, fresh time
        const std::int64_t b = cfg_.batch;
        const std::int64_t stride = data_.sample_stride();
        std::vector<double> x1(static_cast<std::size_t>(b * stride));
        std::vector<double> cond;
        if (data_.cond_dim > 0) cond.resize(static_cast<std::size_t>(b * data_.cond_dim));
        for (std::int64_t i = 0; i < b; ++i) {
            const auto s = static_cast<std::int64_t>(rng.index(static_cast<std::uint64_t>(data_.count)));
            std::copy(data_.sample(s), data_.sample(s) + stride, x1.data() + i * stride);
            if (data_.cond_dim > 0)
                std::copy(cond_std_.data() + s * data_.cond_dim,
                          cond_std_.data() + (s + 1) * data_.cond_dim,
                          cond.data() + i * data_.cond_dim);
        }
        std::vector<double> x0(x1.size());
        for (auto& v : x0) v = rng.normal();
        auto t = flow::sample_time(static_cast<std::size_t>(b), cfg_.time_dist, rng);

        auto x_t = flow::interpolate_batch(x0, x1, t, cfg_.sigma_min);
        auto u_tgt = flow::target_velocity_batch(x_t, x1, t, cfg_.sigma_min);

        const auto shape = batch_shape(b);
        auto x_t_leaf = ad::Tensor::from(shape, std::move(x_t));
        auto u_target = ad::Tensor::from(shape, std::move(u_tgt));

        auto model = [&](const ad::Tensor& x, const std::vector<double>& tt) {
            return net_.forward(x, tt, cond);
        };

        auto u_pred = model(x_t_leaf, t);
        auto l_fm = flow::fm_loss(u_pred, u_target);
        mx.l_fm = l_fm.item();
        if (!std::isfinite(mx.l_fm))
            throw NumericError("non-finite L_fm at iteration " + std::to_string(it));

        ad::zero_grads(net_.params());
        ad::backward(l_fm);
        auto g_fm = flatten_grads(net_.params());
        mx.gnorm_fm = combiner::norm(g_fm);

        std::vector<double> g_update;
        if (cfg_.mode == UpdateMode::FmOnly) {
            g_update = std::move(g_fm);
        } else {
            auto x1_hat = unroll_predict(model, x_t_leaf, t, mx.unroll_n, &u_pred);
            auto r = op_.apply(denormalize_tensor(x1_hat));
            auto l_r = residuals::residual_loss(r, t, cfg_.residual_power);
            mx.l_r = l_r.item();
            if (!std::isfinite(mx.l_r))
                throw NumericError("non-finite L_r at iteration " + std::to_string(it));

            ad::zero_grads(net_.params());
            ad::backward(l_r);
            auto g_r = flatten_grads(net_.params());
            mx.gnorm_r = combiner::norm(g_r);

            if (cfg_.mode == UpdateMode::Config)
                g_update = combiner::config_update(g_fm, g_r, &mx.combine_status);
            else
                g_update = combiner::weighted_update(g_fm, g_r, cfg_.w_fm, cfg_.w_r);
        }
        for (double g : g_update)
            if (!std::isfinite(g))
                throw NumericError("non-finite g_update at iteration " + std::to_string(it));

        adamw_step(net_.params(), g_update, opt_, cfg_.lr, cfg_.beta1, cfg_.beta2,
                   cfg_.weight_decay, cfg_.adam_eps);
        ema_.update(net_.params());

        mx.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                         .count();
        return mx;
    }

    // runs up to cfg.iterations, invoking on_log every log_every steps (and
    // on the final step)
    void run(const std::function<void(const StepMetrics&)>& on_log = {},
             const std::function<void(std::int64_t)>& on_checkpoint = {}) {
        while (opt_.step < cfg_.iterations) {
            auto mx = step();
            const bool last = opt_.step == cfg_.iterations;
            if (on_log && (cfg_.log_every > 0 && (mx.iteration % cfg_.log_every == 0 || last)))
                on_log(mx);
            if (on_checkpoint && cfg_.checkpoint_every > 0 &&
                (opt_.step % cfg_.checkpoint_every == 0) && !last)
                on_checkpoint(opt_.step);
        }
    }

    // state capture for persistence; the caller attaches the config snapshot
    io::Checkpoint snapshot() const {
        io::Checkpoint ck;
        ck.step = opt_.step;
        ck.param_names = net_.param_names();
        for (const auto& p : net_.params()) ck.param_shapes.push_back(p.shape());
        ck.params = net_.values();
        ck.ema = ema_.shadow;
        std::size_t off = 0;
        for (const auto& p : net_.params()) {
            const std::size_t n = p.value().size();
            ck.opt_m.emplace_back(opt_.m.begin() + off, opt_.m.begin() + off + n);
            ck.opt_v.emplace_back(opt_.v.begin() + off, opt_.v.begin() + off + n);
            off += n;
        }
        return ck;
    }

    void restore(const io::Checkpoint& ck) {
        if (ck.param_names != net_.param_names())
            throw std::invalid_argument("restore: checkpoint parameter manifest does not match net");
        net_.assign(ck.params);
        ema_.shadow = ck.ema;
        std::size_t off = 0;
        for (std::size_t i = 0; i < ck.opt_m.size(); ++i) {
            std::copy(ck.opt_m[i].begin(), ck.opt_m[i].end(), opt_.m.begin() + off);
            std::copy(ck.opt_v[i].begin(), ck.opt_v[i].end(), opt_.v.begin() + off);
            off += ck.opt_m[i].size();
        }
        opt_.step = ck.step;
    }

    // standardized -> physical fields, differentiable (stats are constants)
    ad::Tensor denormalize_tensor(const ad::Tensor& x) const {
        const std::int64_t b = x.shape()[0];
        auto mean = ad::Tensor::from({data_.channel_count()}, data_.chan_mean);
        auto stdv = ad::Tensor::from({data_.channel_count()}, data_.chan_std);
        if (grid_) {
            auto m = ad::expand_chan(mean, b, data_.h, data_.w);
            auto s = ad::expand_chan(stdv, b, data_.h, data_.w);
            return ad::add(ad::mul(x, s), m);
        }
        auto m = ad::expand_rows(mean, b);
        auto s = ad::expand_rows(stdv, b);
        return ad::add(ad::mul(x, s), m);
    }

    ad::Shape batch_shape(std::int64_t b) const {
        if (grid_) return {b, data_.channel_count(), data_.h, data_.w};
        return {b, data_.channel_count()};
    }

  private:
    TrainConfig cfg_;
    models::VelocityNet net_;
    data::GridDataset data_;
    residuals::Operator op_;
    models::EmaState ema_;
    OptimizerState opt_;
    std::vector<double> cond_std_;
    bool grid_ = false;
};

}  // namespace pbfm::train
