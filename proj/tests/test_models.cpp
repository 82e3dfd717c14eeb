#include "pbfm/models.hpp"
#include "pbfm/rng.hpp"

#include "support/fd_check.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace pbfm;
using Catch::Approx;
using ad::Tensor;

namespace {

void randomize_params(models::VelocityNet& net, Rng& rng, double scale = 0.3) {
    for (auto& p : net.params())
        for (auto& v : p.mutable_value()) v = scale * rng.normal();
}

}  // namespace

TEST_CASE("embed_time basics") {
    auto e = models::embed_time(0.0, 8);
    for (int i = 0; i < 4; ++i) CHECK(e[i] == 0.0);
    for (int i = 4; i < 8; ++i) CHECK(e[i] == 1.0);

    auto a = models::embed_time(0.37, 16, 2.0, 100.0);
    auto b = models::embed_time(0.37, 16, 2.0, 100.0);
    CHECK(a == b);

    auto w = models::embed_time(0.5, 4, 1.0, 100.0);
    CHECK(w[0] == Approx(std::sin(0.5)).epsilon(1e-15));
    CHECK(w[1] == Approx(std::sin(0.005)).epsilon(1e-15));
    CHECK(w[2] == Approx(std::cos(0.5)).epsilon(1e-15));
    CHECK(w[3] == Approx(std::cos(0.005)).epsilon(1e-15));

    CHECK_THROWS_AS(models::embed_time(0.5, 5), std::invalid_argument);
    CHECK_THROWS_AS(models::embed_time(0.5, 0), std::invalid_argument);
}

TEST_CASE("zero-initialized final layer gives the zero velocity field") {
    Rng rng(1);
    models::NetConfig mlp_cfg;
    mlp_cfg.field_channels = 2;
    mlp_cfg.hidden = 32;
    mlp_cfg.depth = 2;
    auto mlp = models::VelocityNet::create(mlp_cfg, rng);
    auto x = Tensor::from({3, 2}, {0.5, -1, 2, 3, -0.7, 0.1});
    auto y = mlp.forward(x, {0.1, 0.5, 0.9});
    for (double v : y.value()) CHECK(v == 0.0);

    models::NetConfig conv_cfg;
    conv_cfg.variant = models::NetVariant::Conv;
    conv_cfg.field_channels = 2;
    conv_cfg.grid_h = conv_cfg.grid_w = 8;
    conv_cfg.hidden = 6;
    conv_cfg.depth = 2;
    conv_cfg.cond_dim = 1;
    auto conv = models::VelocityNet::create(conv_cfg, rng);
    Rng data_rng(2);
    auto xg = Tensor::from({2, 2, 8, 8}, pbfm_test::random_vec(256, data_rng));
    auto yg = conv.forward(xg, {0.2, 0.8}, {0.3, 0.9});
    for (double v : yg.value()) CHECK(v == 0.0);
}

TEST_CASE("forward is pure: identical rows give identical outputs") {
    Rng rng(3);
    models::NetConfig cfg;
    cfg.field_channels = 3;
    cfg.hidden = 24;
    cfg.depth = 2;
    auto net = models::VelocityNet::create(cfg, rng);
    randomize_params(net, rng);

    std::vector<double> row{0.4, -0.2, 1.1};
    std::vector<double> data;
    for (int i = 0; i < 4; ++i) data.insert(data.end(), row.begin(), row.end());
    auto x = Tensor::from({4, 3}, data);
    auto y = net.forward(x, {0.3, 0.3, 0.3, 0.3});
    for (int i = 1; i < 4; ++i)
        for (int j = 0; j < 3; ++j) CHECK(y.value()[i * 3 + j] == y.value()[j]);

    // repeated calls are bit-identical
    auto y2 = net.forward(x, {0.3, 0.3, 0.3, 0.3});
    CHECK(y.value() == y2.value());
}

TEST_CASE("conditioning has a live Jacobian column") {
    Rng rng(4);
    models::NetConfig cfg;
    cfg.variant = models::NetVariant::Conv;
    cfg.field_channels = 1;
    cfg.grid_h = cfg.grid_w = 4;
    cfg.hidden = 5;
    cfg.depth = 2;
    cfg.cond_dim = 3;
    cfg.emb_dim = 8;
    auto net = models::VelocityNet::create(cfg, rng);
    randomize_params(net, rng);

    Rng data_rng(5);
    auto x = Tensor::from({1, 1, 4, 4}, pbfm_test::random_vec(16, data_rng));
    std::vector<double> cond{0.2, -0.4, 0.9};
    auto y0 = net.forward(x, {0.5}, cond);
    auto bumped = cond;
    bumped[1] += 1e-3;
    auto y1 = net.forward(x, {0.5}, bumped);
    double diff = 0;
    for (std::size_t i = 0; i < y0.value().size(); ++i)
        diff = std::max(diff, std::abs(y1.value()[i] - y0.value()[i]));
    CHECK(diff > 1e-9);
}

TEST_CASE("parameter gradients of mean-squared output match finite differences") {
    Rng rng(6);
    Rng data_rng(7);

    SECTION("mlp with conditioning") {
        models::NetConfig cfg;
        cfg.field_channels = 2;
        cfg.hidden = 12;
        cfg.depth = 2;
        cfg.cond_dim = 2;
        cfg.emb_dim = 6;
        cfg.time_dim = 8;
        auto net = models::VelocityNet::create(cfg, rng);
        randomize_params(net, rng);
        auto x = Tensor::from({3, 2}, pbfm_test::random_vec(6, data_rng));
        std::vector<double> t{0.2, 0.5, 0.8};
        std::vector<double> cond = pbfm_test::random_vec(6, data_rng);
        auto rep = pbfm_test::fd_check(net.params(), [&] {
            auto y = net.forward(x, t, cond);
            return ad::mean(ad::mul(y, y));
        });
        CHECK(rep.max_rel < 1e-5);
    }

    SECTION("conv with conditioning") {
        models::NetConfig cfg;
        cfg.variant = models::NetVariant::Conv;
        cfg.field_channels = 2;
        cfg.grid_h = cfg.grid_w = 4;
        cfg.hidden = 4;
        cfg.depth = 2;
        cfg.cond_dim = 1;
        cfg.emb_dim = 6;
        cfg.time_dim = 8;
        cfg.pad = ad::PadMode::Replicate;
        auto net = models::VelocityNet::create(cfg, rng);
        randomize_params(net, rng);
        auto x = Tensor::from({2, 2, 4, 4}, pbfm_test::random_vec(64, data_rng));
        std::vector<double> t{0.3, 0.7};
        std::vector<double> cond{0.1, 0.9};
        auto rep = pbfm_test::fd_check(net.params(), [&] {
            auto y = net.forward(x, t, cond);
            return ad::mean(ad::mul(y, y));
        });
        CHECK(rep.max_rel < 1e-5);
    }
}

TEST_CASE("output shape equals input field shape") {
    Rng rng(8);
    models::NetConfig cfg;
    cfg.variant = models::NetVariant::Conv;
    cfg.field_channels = 6;
    cfg.grid_h = cfg.grid_w = 8;
    cfg.hidden = 4;
    cfg.depth = 1;
    cfg.cond_dim = 4;
    auto net = models::VelocityNet::create(cfg, rng);
    Rng data_rng(9);
    auto x = Tensor::from({2, 6, 8, 8}, pbfm_test::random_vec(2 * 6 * 64, data_rng));
    auto y = net.forward(x, {0.5, 0.5}, pbfm_test::random_vec(8, data_rng));
    CHECK(y.shape() == x.shape());
}

TEST_CASE("forward rejects mismatched shapes and conditioning") {
    Rng rng(10);
    models::NetConfig cfg;
    cfg.field_channels = 2;
    cfg.cond_dim = 3;
    cfg.hidden = 8;
    cfg.depth = 1;
    auto net = models::VelocityNet::create(cfg, rng);
    auto bad = Tensor::from({2, 5}, std::vector<double>(10, 0.0));
    CHECK_THROWS_AS(net.forward(bad, {0.1, 0.2}, {1, 2, 3, 4, 5, 6}), ad::ShapeError);
    auto ok = Tensor::from({2, 2}, std::vector<double>(4, 0.0));
    CHECK_THROWS_AS(net.forward(ok, {0.1, 0.2}, {1, 2, 3}), ad::ShapeError);   // cond rows
    CHECK_THROWS_AS(net.forward(ok, {0.1}, {1, 2, 3, 4, 5, 6}), ad::ShapeError);  // t length
}

TEST_CASE("ema update formula and structure checks") {
    Rng rng(11);
    models::NetConfig cfg;
    cfg.field_channels = 1;
    cfg.hidden = 4;
    cfg.depth = 1;
    auto net = models::VelocityNet::create(cfg, rng);
    for (auto& p : net.params())
        for (auto& v : p.mutable_value()) v = 1.0;

    auto ema = models::EmaState::init_from(net.params(), 0.999);
    for (auto& s : ema.shadow) std::fill(s.begin(), s.end(), 0.0);

    ema.update(net.params());
    for (const auto& s : ema.shadow)
        for (double v : s) CHECK(v == Approx(0.001).epsilon(1e-12));

    // live parameters are untouched
    for (const auto& p : net.params())
        for (double v : p.value()) CHECK(v == 1.0);

    // constant live target: gap shrinks by exactly the decay factor per step
    double prev_gap = 1.0 - ema.shadow[0][0];
    for (int k = 0; k < 5; ++k) {
        ema.update(net.params());
        const double gap = 1.0 - ema.shadow[0][0];
        CHECK(gap == Approx(prev_gap * 0.999).epsilon(1e-12));
        prev_gap = gap;
    }

    auto instant = models::EmaState::init_from(net.params(), 0.0);
    for (auto& s : instant.shadow) std::fill(s.begin(), s.end(), -5.0);
    instant.update(net.params());
    for (const auto& s : instant.shadow)
        for (double v : s) CHECK(v == 1.0);

    models::EmaState broken;
    broken.shadow = {{1.0}};
    CHECK_THROWS_AS(broken.update(net.params()), std::invalid_argument);
}
