#pragma once

#include "pbfm/autodiff.hpp"
#include "pbfm/grid_ops.hpp"
#include "pbfm/rng.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

// Velocity-field networks u_t(x_t, t, c) with sinusoidal time embedding and
// a two-layer conditioning embedder. Two variants: an MLP for vector-valued
// cases and a small conv residual net with per-channel scale/shift
// conditioning for grid cases. Final layers are zero-initialized so training
// starts from the zero velocity field.

namespace pbfm::models {

// Sinusoidal features at geometrically spaced frequencies, descending from
// `base` to `base/ratio`: [sin(f0 t) .. sin(f_{d/2-1} t), cos(f0 t) .. ].
inline std::vector<double> embed_time(double t, int dim, double base = 1.0, double ratio = 1e4) {
    if (dim <= 0 || dim % 2 != 0)
        throw std::invalid_argument("embed_time: dim must be positive and even, got " +
                                    std::to_string(dim));
    const int half = dim / 2;
    std::vector<double> out(dim);
    for (int k = 0; k < half; ++k) {
        const double f =
            half == 1 ? base : base * std::pow(ratio, -static_cast<double>(k) / (half - 1));
        out[k] = std::sin(f * t);
        out[half + k] = std::cos(f * t);
    }
    return out;
}

inline ad::Tensor embed_time_batch(const std::vector<double>& t, int dim, double base,
                                   double ratio) {
    std::vector<double> data;
    data.reserve(t.size() * dim);
    for (double ti : t) {
        auto row = embed_time(ti, dim, base, ratio);
        data.insert(data.end(), row.begin(), row.end());
    }
    return ad::Tensor::from({static_cast<std::int64_t>(t.size()), dim}, std::move(data));
}

enum class NetVariant { Mlp, Conv };

struct NetConfig {
    NetVariant variant = NetVariant::Mlp;
    int field_channels = 2;  // C for grids, D for vector data
    int grid_h = 1;
    int grid_w = 1;
    int cond_dim = 0;
    int hidden = 128;  // MLP width / conv feature channels
    int depth = 4;     // hidden layers / conv blocks
    int time_dim = 32;
    double time_base = 256.0;
    double time_ratio = 256.0;
    int emb_dim = 64;  // learned embedding width (conv variant and cond embedder)
    ad::PadMode pad = ad::PadMode::Periodic;
};

class VelocityNet {
  public:
    VelocityNet() = default;

    static VelocityNet create(const NetConfig& cfg, Rng& rng) {
        VelocityNet net;
        net.cfg_ = cfg;
        if (cfg.variant == NetVariant::Mlp)
            net.build_mlp(rng);
        else
            net.build_conv(rng);
        return net;
    }

    const NetConfig& config() const { return cfg_; }
    const std::vector<std::string>& param_names() const { return names_; }
    const std::vector<ad::Tensor>& params() const { return params_; }
    std::vector<ad::Tensor>& params() { return params_; }

    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.numel();
        return n;
    }

    // x: [B,D] (mlp) or [B,C,H,W] (conv); t per-sample; cond [B,cond_dim] rows
    // or empty when the case is unconditioned
    ad::Tensor forward(const ad::Tensor& x, const std::vector<double>& t,
                       const std::vector<double>& cond = {}) const {
        if (cfg_.variant == NetVariant::Mlp) return forward_mlp(x, t, cond);
        return forward_conv(x, t, cond);
    }

    // Copies of VelocityNet share parameter storage (tensors are handles).
    // clone() makes an isolated net with its own buffers.
    VelocityNet clone() const {
        VelocityNet c;
        c.cfg_ = cfg_;
        c.names_ = names_;
        c.params_.reserve(params_.size());
        for (const auto& p : params_)
            c.params_.push_back(ad::Tensor::from(p.shape(), p.value(), true));
        return c;
    }

    // snapshot of all parameter buffers, in registration order
    std::vector<std::vector<double>> values() const {
        std::vector<std::vector<double>> out;
        out.reserve(params_.size());
        for (const auto& p : params_) out.push_back(p.value());
        return out;
    }

    void assign(const std::vector<std::vector<double>>& vals) {
        if (vals.size() != params_.size())
            throw std::invalid_argument("VelocityNet::assign: parameter structure mismatch");
        for (std::size_t i = 0; i < vals.size(); ++i) {
            if (vals[i].size() != params_[i].value().size())
                throw std::invalid_argument("VelocityNet::assign: size mismatch at " + names_[i]);
            params_[i].mutable_value() = vals[i];
        }
    }

  private:
    NetConfig cfg_;
    std::vector<std::string> names_;
    std::vector<ad::Tensor> params_;

    ad::Tensor add_param(const std::string& name, ad::Shape shape, std::vector<double> data) {
        auto t = ad::Tensor::from(std::move(shape), std::move(data), true);
        names_.push_back(name);
        params_.push_back(t);
        return t;
    }

    ad::Tensor dense_init(const std::string& name, std::int64_t in, std::int64_t out, Rng& rng) {
        std::vector<double> w(static_cast<std::size_t>(in * out));
        const double s = 1.0 / std::sqrt(static_cast<double>(in));
        for (auto& v : w) v = s * rng.normal();
        return add_param(name, {in, out}, std::move(w));
    }

    ad::Tensor conv_init(const std::string& name, std::int64_t cin, std::int64_t cout, Rng& rng) {
        std::vector<double> w(static_cast<std::size_t>(cout * cin * 9));
        const double s = 1.0 / std::sqrt(static_cast<double>(cin) * 9.0);
        for (auto& v : w) v = s * rng.normal();
        return add_param(name, {cout, cin, 3, 3}, std::move(w));
    }

    ad::Tensor zeros_param(const std::string& name, ad::Shape shape) {
        return add_param(name, shape, std::vector<double>(ad::numel_of(shape), 0.0));
    }

    // ---- MLP: input = flattened field (+) time embedding (+) cond embedding
    void build_mlp(Rng& rng) {
        const int d = cfg_.field_channels * cfg_.grid_h * cfg_.grid_w;
        int in = d + cfg_.time_dim;
        if (cfg_.cond_dim > 0) {
            dense_init("cond.w1", cfg_.cond_dim, cfg_.emb_dim, rng);
            zeros_param("cond.b1", {cfg_.emb_dim});
            dense_init("cond.w2", cfg_.emb_dim, cfg_.emb_dim, rng);
            zeros_param("cond.b2", {cfg_.emb_dim});
            in += cfg_.emb_dim;
        }
        int width = in;
        for (int i = 0; i < cfg_.depth; ++i) {
            dense_init("mlp.w" + std::to_string(i), width, cfg_.hidden, rng);
            zeros_param("mlp.b" + std::to_string(i), {cfg_.hidden});
            width = cfg_.hidden;
        }
        zeros_param("head.w", {width, d});
        zeros_param("head.b", {d});
    }

    // ---- conv residual net with adaLN-style per-channel modulation
    void build_conv(Rng& rng) {
        const int f = cfg_.hidden;
        dense_init("time.w1", cfg_.time_dim, cfg_.emb_dim, rng);
        zeros_param("time.b1", {cfg_.emb_dim});
        dense_init("time.w2", cfg_.emb_dim, cfg_.emb_dim, rng);
        zeros_param("time.b2", {cfg_.emb_dim});
        if (cfg_.cond_dim > 0) {
            dense_init("cond.w1", cfg_.cond_dim, cfg_.emb_dim, rng);
            zeros_param("cond.b1", {cfg_.emb_dim});
            dense_init("cond.w2", cfg_.emb_dim, cfg_.emb_dim, rng);
            zeros_param("cond.b2", {cfg_.emb_dim});
        }
        conv_init("lift.w", cfg_.field_channels, f, rng);
        zeros_param("lift.b", {f});
        for (int i = 0; i < cfg_.depth; ++i) {
            const std::string p = "block" + std::to_string(i);
            zeros_param(p + ".mod.w", {cfg_.emb_dim, 2 * f});  // starts as identity modulation
            zeros_param(p + ".mod.b", {2 * f});
            conv_init(p + ".conv.w", f, f, rng);
            zeros_param(p + ".conv.b", {f});
        }
        zeros_param("head.w", {cfg_.field_channels, f, 3, 3});
        zeros_param("head.b", {cfg_.field_channels});
    }

    ad::Tensor param(const std::string& name) const {
        for (std::size_t i = 0; i < names_.size(); ++i)
            if (names_[i] == name) return params_[i];
        throw std::logic_error("VelocityNet: missing parameter " + name);
    }

    ad::Tensor linear(const ad::Tensor& x, const std::string& w, const std::string& b) const {
        auto y = ad::matmul(x, param(w));
        return ad::add(y, ad::expand_rows(param(b), x.shape()[0]));
    }

    ad::Tensor cond_embedding(const std::vector<double>& cond, std::int64_t batch) const {
        if (cfg_.cond_dim <= 0) throw std::invalid_argument("net is unconditioned");
        if (cond.size() != static_cast<std::size_t>(batch * cfg_.cond_dim))
            throw ad::ShapeError("forward: conditioning size " + std::to_string(cond.size()) +
                                 " does not match batch " + std::to_string(batch) + " x dim " +
                                 std::to_string(cfg_.cond_dim));
        auto c = ad::Tensor::from({batch, cfg_.cond_dim}, cond);
        return linear(ad::silu(linear(c, "cond.w1", "cond.b1")), "cond.w2", "cond.b2");
    }

    void check_time(const std::vector<double>& t, std::int64_t batch) const {
        if (t.size() != static_cast<std::size_t>(batch))
            throw ad::ShapeError("forward: got " + std::to_string(t.size()) + " times for batch " +
                                 std::to_string(batch));
    }

    ad::Tensor forward_mlp(const ad::Tensor& x, const std::vector<double>& t,
                           const std::vector<double>& cond) const {
        const int d = cfg_.field_channels * cfg_.grid_h * cfg_.grid_w;
        if (x.shape().size() != 2 || x.shape()[1] != d)
            throw ad::ShapeError("forward: expected [B," + std::to_string(d) + "], got " +
                                 ad::shape_str(x.shape()));
        const std::int64_t b = x.shape()[0];
        check_time(t, b);
        std::vector<ad::Tensor> parts{
            x, embed_time_batch(t, cfg_.time_dim, cfg_.time_base, cfg_.time_ratio)};
        if (cfg_.cond_dim > 0) parts.push_back(cond_embedding(cond, b));
        auto h = ad::concat(parts, 1);
        for (int i = 0; i < cfg_.depth; ++i)
            h = ad::silu(linear(h, "mlp.w" + std::to_string(i), "mlp.b" + std::to_string(i)));
        return linear(h, "head.w", "head.b");
    }

    ad::Tensor forward_conv(const ad::Tensor& x, const std::vector<double>& t,
                            const std::vector<double>& cond) const {
        if (x.shape().size() != 4 || x.shape()[1] != cfg_.field_channels ||
            x.shape()[2] != cfg_.grid_h || x.shape()[3] != cfg_.grid_w)
            throw ad::ShapeError("forward: expected [B," + std::to_string(cfg_.field_channels) + "," +
                                 std::to_string(cfg_.grid_h) + "," + std::to_string(cfg_.grid_w) +
                                 "], got " + ad::shape_str(x.shape()));
        const std::int64_t b = x.shape()[0];
        const std::int64_t h = cfg_.grid_h, w = cfg_.grid_w;
        check_time(t, b);

        auto e = linear(
            ad::silu(linear(embed_time_batch(t, cfg_.time_dim, cfg_.time_base, cfg_.time_ratio),
                            "time.w1", "time.b1")),
            "time.w2", "time.b2");
        if (cfg_.cond_dim > 0) e = ad::add(e, cond_embedding(cond, b));
        auto e_act = ad::silu(e);

        const int f = cfg_.hidden;
        auto hid = ad::add(ad::conv2d(x, param("lift.w"), cfg_.pad),
                           ad::expand_chan(param("lift.b"), b, h, w));
        for (int i = 0; i < cfg_.depth; ++i) {
            const std::string p = "block" + std::to_string(i);
            auto mod = linear(e_act, p + ".mod.w", p + ".mod.b");  // [B, 2F]
            auto scale = ad::expand_spatial(ad::slice(mod, 1, 0, f), h, w);
            auto shift = ad::expand_spatial(ad::slice(mod, 1, f, 2 * f), h, w);
            auto m = ad::add(ad::mul(hid, ad::add(scale, ad::Tensor::scalar(1.0))), shift);
            auto y = ad::add(ad::conv2d(ad::silu(m), param(p + ".conv.w"), cfg_.pad),
                             ad::expand_chan(param(p + ".conv.b"), b, h, w));
            hid = ad::add(hid, y);
        }
        return ad::add(ad::conv2d(ad::silu(hid), param("head.w"), cfg_.pad),
                       ad::expand_chan(param("head.b"), b, h, w));
    }
};

// Exponential moving average of the parameters; the shadow is what sampling
// uses.
struct EmaState {
    double decay = 0.999;
    std::vector<std::vector<double>> shadow;

    static EmaState init_from(const std::vector<ad::Tensor>& params, double decay) {
        EmaState e;
        e.decay = decay;
        e.shadow.reserve(params.size());
        for (const auto& p : params) e.shadow.push_back(p.value());
        return e;
    }

    void update(const std::vector<ad::Tensor>& live) {
        if (live.size() != shadow.size())
            throw std::invalid_argument("EmaState::update: structure mismatch");
        for (std::size_t i = 0; i < live.size(); ++i) {
            const auto& lv = live[i].value();
            auto& sv = shadow[i];
            if (lv.size() != sv.size())
                throw std::invalid_argument("EmaState::update: size mismatch at tensor " +
                                            std::to_string(i));
            for (std::size_t j = 0; j < sv.size(); ++j)
                sv[j] = decay * sv[j] + (1.0 - decay) * lv[j];
        }
    }
};

}  // namespace pbfm::models
