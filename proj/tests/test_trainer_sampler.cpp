#include "pbfm/data.hpp"
#include "pbfm/sampler.hpp"
#include "pbfm/trainer.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace pbfm;
using Catch::Approx;
using ad::Tensor;

namespace {

// u(x, t) = t, independent of the state
struct TimeStub {
    ad::Tensor operator()(const ad::Tensor& x, const std::vector<double>& t) const {
        ad::Shape rest(x.shape().begin() + 1, x.shape().end());
        return ad::expand_persample(
            ad::Tensor::from({x.shape()[0]}, std::vector<double>(t.begin(), t.end())), rest);
    }
};

models::VelocityNet tiny_circle_net(std::uint64_t seed) {
    models::NetConfig nc;
    nc.field_channels = 2;
    nc.hidden = 16;
    nc.depth = 2;
    nc.time_dim = 8;
    Rng rng(seed);
    return models::VelocityNet::create(nc, rng);
}

train::Trainer make_circle_trainer(train::TrainConfig cfg, std::uint64_t net_seed = 99) {
    auto ds = data::normalize(data::gen_circle(256, 7));
    return train::Trainer(cfg, tiny_circle_net(net_seed), ds, residuals::Operator::circle());
}

}  // namespace

TEST_CASE("unroll: single step reduces to one Euler update") {
    auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto stub = [](const Tensor& xt, const std::vector<double>&) {
        return ad::add(xt, Tensor::scalar(1.0));  // u = x + 1
    };
    std::vector<double> t{0.25, 0.5};
    auto x1 = train::unroll_predict(stub, x, t, 1);
    for (int s = 0; s < 2; ++s)
        for (int j = 0; j < 3; ++j) {
            const double xi = x.value()[s * 3 + j];
            CHECK(x1.value()[s * 3 + j] == Approx(xi + (1.0 - t[s]) * (xi + 1.0)).epsilon(1e-15));
        }
}

TEST_CASE("unroll: constant velocity telescopes identically for every n") {
    auto x = Tensor::from({1, 2}, {0.3, -0.8});
    const double c = 1.7;
    auto stub = [&](const Tensor& xt, const std::vector<double>&) {
        return Tensor::full(xt.shape(), c);
    };
    std::vector<double> t{0.2};
    for (int n : {1, 2, 3, 7}) {
        auto x1 = train::unroll_predict(stub, x, t, n);
        CHECK(x1.value()[0] == Approx(0.3 + 0.8 * c).epsilon(1e-14));
        CHECK(x1.value()[1] == Approx(-0.8 + 0.8 * c).epsilon(1e-14));
    }
}

TEST_CASE("unroll: hand-computed Euler sums for u(x,t) = t") {
    auto x = Tensor::from({1, 1}, {2.0});
    std::vector<double> t{0.0};
    auto x2 = train::unroll_predict(TimeStub{}, x, t, 2);
    CHECK(x2.value()[0] == Approx(2.25).epsilon(1e-15));
    auto x4 = train::unroll_predict(TimeStub{}, x, t, 4);
    CHECK(x4.value()[0] == Approx(2.375).epsilon(1e-15));

    CHECK_THROWS_AS(train::unroll_predict(TimeStub{}, x, {1.0}, 2), std::invalid_argument);
    CHECK_THROWS_AS(train::unroll_predict(TimeStub{}, x, {0.5}, 0), std::invalid_argument);
}

TEST_CASE("unroll: the exact conditional OT field is n-independent") {
    // u(x, t) = (x1 - x) / (1 - t): Euler is exact on straight paths, so
    // every n lands on x1
    auto x1_target = Tensor::from({2, 2}, {0.6, 0.8, -1.0, 0.0});
    auto x = Tensor::from({2, 2}, {0.1, -0.2, 0.4, 0.9});
    std::vector<double> t{0.3, 0.7};
    auto stub = [&](const Tensor& xt, const std::vector<double>& tt) {
        std::vector<double> inv(tt.size());
        for (std::size_t i = 0; i < tt.size(); ++i) inv[i] = 1.0 / (1.0 - tt[i]);
        auto w = ad::expand_persample(Tensor::from({xt.shape()[0]}, inv), {xt.shape()[1]});
        return ad::mul(ad::sub(x1_target, xt), w);
    };
    for (int n : {1, 2, 5, 20}) {
        auto got = train::unroll_predict(stub, x, t, n);
        for (int i = 0; i < 4; ++i)
            CHECK(got.value()[i] == Approx(x1_target.value()[i]).margin(1e-12));
    }
}

TEST_CASE("curriculum schedule") {
    CHECK(train::curriculum_steps(0, 100, 1) == 1);
    CHECK(train::curriculum_steps(99, 100, 1) == 1);
    CHECK(train::curriculum_steps(10, 100, 4) == 1);
    CHECK(train::curriculum_steps(90, 100, 4) == 4);
    int prev = 1;
    for (int it = 0; it < 100; ++it) {
        const int n = train::curriculum_steps(it, 100, 4);
        CHECK(n >= prev);
        prev = n;
    }
    // explicit breakpoints
    std::vector<std::pair<double, int>> bp{{0.0, 1}, {0.5, 3}};
    CHECK(train::curriculum_steps(10, 100, 4, bp) == 1);
    CHECK(train::curriculum_steps(80, 100, 4, bp) == 3);
    CHECK_THROWS_AS(train::curriculum_steps(100, 100, 4), std::invalid_argument);
}

TEST_CASE("adamw: zero gradient leaves parameters unchanged") {
    auto p = Tensor::from({3}, {1.0, -2.0, 3.0}, true);
    std::vector<ad::Tensor> params{p};
    auto opt = train::OptimizerState::init(3);
    train::adamw_step(params, {0, 0, 0}, opt, 0.1, 0.5, 0.999, 0.0);
    CHECK(p.value() == std::vector<double>{1.0, -2.0, 3.0});
}

TEST_CASE("adamw: first-step closed form") {
    const double g = 0.37, lr = 0.01, eps = 1e-8;
    auto p = Tensor::from({1}, {2.0}, true);
    std::vector<ad::Tensor> params{p};
    auto opt = train::OptimizerState::init(1);
    train::adamw_step(params, {g}, opt, lr, 0.5, 0.999, 0.0, eps);
    // bias correction makes m_hat = g and v_hat = g^2 on the first step
    CHECK(p.value()[0] == Approx(2.0 - lr * g / (std::abs(g) + eps)).epsilon(1e-12));
}

TEST_CASE("training is deterministic given the seed") {
    train::TrainConfig cfg;
    cfg.iterations = 20;
    cfg.batch = 16;
    cfg.lr = 1e-3;
    cfg.n_max = 2;
    cfg.seed = 5;
    auto a = make_circle_trainer(cfg);
    auto b = make_circle_trainer(cfg);
    for (int i = 0; i < 20; ++i) {
        auto ma = a.step();
        auto mb = b.step();
        CHECK(ma.l_fm == mb.l_fm);
        CHECK(ma.l_r == mb.l_r);
    }
    CHECK(a.net().values() == b.net().values());
    CHECK(a.ema().shadow == b.ema().shadow);
}

TEST_CASE("fm-only trajectory is bit-identical to weighted(1, 0)") {
    train::TrainConfig fm;
    fm.iterations = 25;
    fm.batch = 8;
    fm.seed = 11;
    fm.mode = train::UpdateMode::FmOnly;
    auto a = make_circle_trainer(fm);

    auto wt = fm;
    wt.mode = train::UpdateMode::Weighted;
    wt.w_fm = 1.0;
    wt.w_r = 0.0;
    auto b = make_circle_trainer(wt);

    for (int i = 0; i < 25; ++i) {
        auto ma = a.step();
        auto mb = b.step();
        CHECK(ma.l_fm == mb.l_fm);
        CHECK(ma.gnorm_fm == mb.gnorm_fm);
        CHECK(mb.l_r >= 0.0);  // residual branch evaluated but weighted away
    }
    CHECK(a.net().values() == b.net().values());
}

TEST_CASE("first-step FM loss is identical across update modes") {
    for (auto mode : {train::UpdateMode::Config, train::UpdateMode::FmOnly}) {
        train::TrainConfig cfg;
        cfg.iterations = 4;
        cfg.batch = 8;
        cfg.seed = 3;
        cfg.mode = mode;
        auto tr = make_circle_trainer(cfg);
        auto m = tr.step();
        static double first = 0;
        if (mode == train::UpdateMode::Config)
            first = m.l_fm;
        else
            CHECK(m.l_fm == first);
    }
}

TEST_CASE("non-finite losses abort with a named term") {
    train::TrainConfig cfg;
    cfg.iterations = 4;
    cfg.batch = 8;
    cfg.seed = 3;
    auto tr = make_circle_trainer(cfg);
    for (auto& p : tr.net().params())
        for (auto& v : p.mutable_value()) v = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH(tr.step(), Catch::Matchers::ContainsSubstring("L_fm"));
}

TEST_CASE("conflict-free update is a first-order descent direction for both losses") {
    Rng rng(17);
    auto net = tiny_circle_net(42);
    for (auto& p : net.params())
        for (auto& v : p.mutable_value()) v = 0.3 * rng.normal();

    const std::int64_t b = 32;
    auto circle = data::gen_circle(b, 23);
    std::vector<double> x1(circle.samples);
    std::vector<double> x0(x1.size());
    for (auto& v : x0) v = rng.normal();
    Rng trng(29);
    auto t = flow::sample_time(b, flow::TimeDist::Uniform, trng);
    auto x_t = flow::interpolate_batch(x0, x1, t, 0.0);
    auto u_tgt = flow::target_velocity_batch(x_t, x1, t, 0.0);
    auto xt = Tensor::from({b, 2}, x_t);
    auto ut = Tensor::from({b, 2}, u_tgt);
    auto op = residuals::Operator::circle();

    auto model = [&](const Tensor& x, const std::vector<double>& tt) {
        return net.forward(x, tt);
    };
    auto losses = [&] {
        auto u = model(xt, t);
        auto l_fm = flow::fm_loss(u, ut);
        auto xh = train::unroll_predict(model, xt, t, 2, &u);
        auto l_r = residuals::residual_loss(op.apply(xh), t, 1.0);
        return std::pair{l_fm, l_r};
    };

    auto [l_fm, l_r] = losses();
    ad::zero_grads(net.params());
    ad::backward(l_fm);
    auto g_fm = train::flatten_grads(net.params());
    ad::zero_grads(net.params());
    ad::backward(l_r);
    auto g_r = train::flatten_grads(net.params());

    combiner::ConfigStatus st;
    auto g = combiner::config_update(g_fm, g_r, &st);
    REQUIRE(st == combiner::ConfigStatus::Ok);

    const double f0 = l_fm.item(), r0 = l_r.item();
    const double eps = 1e-6 / combiner::norm(g);
    std::size_t off = 0;
    for (auto& p : net.params())
        for (auto& v : p.mutable_value()) v -= eps * g[off++];
    auto [l_fm2, l_r2] = losses();
    CHECK(l_fm2.item() < f0);
    CHECK(l_r2.item() < r0);
}

TEST_CASE("checkpoint resume is bit-identical to an uninterrupted run") {
    train::TrainConfig cfg;
    cfg.iterations = 40;
    cfg.batch = 8;
    cfg.seed = 31;
    cfg.n_max = 2;

    auto full = make_circle_trainer(cfg);
    for (int i = 0; i < 40; ++i) full.step();

    auto half = make_circle_trainer(cfg);
    for (int i = 0; i < 20; ++i) half.step();
    auto ck = half.snapshot();

    auto resumed = make_circle_trainer(cfg, 1234);  // different init, then restored
    resumed.restore(ck);
    CHECK(resumed.iteration() == 20);
    for (int i = 0; i < 20; ++i) resumed.step();

    CHECK(resumed.net().values() == full.net().values());
    CHECK(resumed.ema().shadow == full.ema().shadow);
    CHECK(resumed.optimizer().m == full.optimizer().m);
    CHECK(resumed.optimizer().v == full.optimizer().v);
}

// ---------------------------------------------------------------------------

namespace {

models::VelocityNet zero_net(int d, std::uint64_t seed = 1) {
    models::NetConfig nc;
    nc.field_channels = d;
    nc.hidden = 8;
    nc.depth = 1;
    nc.time_dim = 4;
    Rng rng(seed);
    auto net = models::VelocityNet::create(nc, rng);
    for (auto& p : net.params())
        for (auto& v : p.mutable_value()) v = 0.0;  // output identically zero
    return net;
}

void set_head_bias(models::VelocityNet& net, const std::vector<double>& c) {
    const auto& names = net.param_names();
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == "head.b") net.params()[i].mutable_value() = c;
}

}  // namespace

TEST_CASE("deterministic sampler is exact on a constant field") {
    auto base = zero_net(2);
    auto cnet = base.clone();
    set_head_bias(cnet, {1.25, -0.5});
    for (int steps : {1, 3, 10}) {
        sampler::SamplerConfig cfg;
        cfg.steps = steps;
        cfg.seed = 7;
        auto with_c = sampler::sample(cnet, 33, {}, cfg);
        auto without = sampler::sample(base, 33, {}, cfg);  // pure x0
        for (std::size_t i = 0; i < with_c.size(); i += 2) {
            CHECK(with_c[i] - without[i] == Approx(1.25).margin(1e-12));
            CHECK(with_c[i + 1] - without[i + 1] == Approx(-0.5).margin(1e-12));
        }
    }
}

TEST_CASE("stochastic sampler with t_star = 0 matches the deterministic one bitwise") {
    auto net = zero_net(2);
    set_head_bias(net, {0.3, 0.9});
    sampler::SamplerConfig det;
    det.steps = 8;
    det.seed = 13;
    sampler::SamplerConfig sto = det;
    sto.stochastic = true;
    sto.t_star = 0.0;
    CHECK(sampler::sample(net, 50, {}, det) == sampler::sample(net, 50, {}, sto));
}

TEST_CASE("re-noising variance matches the Gaussian algebra") {
    // zero velocity, n = 5, t_star = 0.2: only the first step renoises,
    // leaving x = 0.8 eps + 0.2 x0 with variance 0.68
    auto net = zero_net(1);
    sampler::SamplerConfig cfg;
    cfg.steps = 5;
    cfg.stochastic = true;
    cfg.t_star = 0.2;
    cfg.seed = 3;
    const std::int64_t n = 100000;
    auto out = sampler::sample(net, n, {}, cfg);
    double mean = 0;
    for (double v : out) mean += v;
    mean /= n;
    double var = 0;
    for (double v : out) var += (v - mean) * (v - mean);
    var /= n;
    CHECK(var == Approx(0.68).epsilon(0.02));
}

TEST_CASE("sampling is deterministic per seed and chunk-size independent") {
    auto net = zero_net(2);
    set_head_bias(net, {0.1, 0.2});
    sampler::SamplerConfig a;
    a.steps = 6;
    a.stochastic = true;
    a.t_star = 0.5;
    a.seed = 21;
    auto b = a;
    b.max_batch = 7;  // ragged chunking must not change values
    CHECK(sampler::sample(net, 40, {}, a) == sampler::sample(net, 40, {}, b));
}

TEST_CASE("sample_with_ema uses the shadow parameters") {
    Rng rng(5);
    auto net = zero_net(2);
    for (auto& p : net.params())
        for (auto& v : p.mutable_value()) v = 0.2 * rng.normal();
    auto ema = models::EmaState::init_from(net.params(), 0.999);

    sampler::SamplerConfig cfg;
    cfg.steps = 4;
    cfg.seed = 9;
    // shadow == live: identical outputs
    CHECK(sampler::sample_with_ema(net, ema, 8, {}, cfg) == sampler::sample(net, 8, {}, cfg));

    // diverged shadow: outputs differ, live parameters untouched
    auto live_before = net.values();
    for (auto& s : ema.shadow)
        for (auto& v : s) v = 0.0;
    set_head_bias(net, {1.0, 1.0});
    auto via_ema = sampler::sample_with_ema(net, ema, 8, {}, cfg);
    auto via_live = sampler::sample(net, 8, {}, cfg);
    CHECK(via_ema != via_live);

    models::EmaState broken;
    broken.shadow = {{0.0}};
    CHECK_THROWS_AS(sampler::sample_with_ema(net, broken, 8, {}, cfg), std::invalid_argument);
}

TEST_CASE("sampler rejects bad configs") {
    auto net = zero_net(1);
    sampler::SamplerConfig cfg;
    cfg.steps = 0;
    CHECK_THROWS_AS(sampler::sample(net, 4, {}, cfg), std::invalid_argument);
    cfg.steps = 2;
    cfg.t_star = 1.5;
    CHECK_THROWS_AS(sampler::sample(net, 4, {}, cfg), std::invalid_argument);
}
