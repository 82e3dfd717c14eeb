#include "pbfm/combiner.hpp"
#include "pbfm/flow.hpp"
#include "pbfm/rng.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

using namespace pbfm;
using Catch::Approx;

TEST_CASE("sample_time statistics and determinism") {
    Rng rng(7);
    auto tl = flow::sample_time(100000, flow::TimeDist::LogitNormal, rng);
    auto sorted = tl;
    std::sort(sorted.begin(), sorted.end());
    const double median = sorted[sorted.size() / 2];
    CHECK(median > 0.48);
    CHECK(median < 0.52);

    Rng rng2(8);
    auto tu = flow::sample_time(100000, flow::TimeDist::Uniform, rng2);
    double mean = 0;
    for (double t : tu) mean += t;
    mean /= tu.size();
    CHECK(mean > 0.49);
    CHECK(mean < 0.51);

    for (double t : tl) {
        REQUIRE(t > 0.0);
        REQUIRE(t < 1.0);
    }
    for (double t : tu) {
        REQUIRE(t > 0.0);
        REQUIRE(t < 1.0);
    }

    Rng a(123), b(123);
    auto s1 = flow::sample_time(64, flow::TimeDist::LogitNormal, a);
    auto s2 = flow::sample_time(64, flow::TimeDist::LogitNormal, b);
    CHECK(s1 == s2);
}

TEST_CASE("logit-normal mass concentrates near one half") {
    Rng rng(9);
    auto t = flow::sample_time(10000, flow::TimeDist::LogitNormal, rng);
    std::size_t inside = 0;
    for (double v : t)
        if (v >= 0.25 && v <= 0.75) ++inside;
    CHECK(inside > t.size() - inside);
}

TEST_CASE("interpolant endpoints and worked value") {
    std::vector<double> x0{1.0}, x1{2.0};
    CHECK(flow::interpolate(x0, x1, 0.0, 0.0)[0] == 1.0);
    CHECK(flow::interpolate(x0, x1, 1.0, 0.0)[0] == 2.0);
    // at t=1 the x0 coefficient is exactly sigma_min
    const double sigma = 1e-3;
    CHECK(flow::interpolate(x0, x1, 1.0, sigma)[0] == Approx(sigma * 1.0 + 2.0).epsilon(1e-15));
    CHECK(flow::interpolate(x0, x1, 0.5, 1e-3)[0] == Approx(1.5005).epsilon(1e-12));
    CHECK_THROWS_AS(flow::interpolate(x0, {1.0, 2.0}, 0.5, 0.0), ad::ShapeError);
}

TEST_CASE("target velocity is the straight-path constant when sigma_min = 0") {
    std::vector<double> x0{1.0}, x1{2.0};
    for (double t : {0.0, 0.1, 0.37, 0.99}) {
        auto xt = flow::interpolate(x0, x1, t, 0.0);
        auto u = flow::target_velocity(xt, x1, t, 0.0);
        CHECK(u[0] == Approx(1.0).epsilon(1e-12));
    }
    CHECK(flow::target_velocity({5.0}, {5.0}, 0.0, 0.0)[0] == 0.0);
    CHECK(flow::target_velocity({0.0}, {3.0}, 0.5, 1e-3)[0] == Approx(3.0 / 0.5005).epsilon(1e-12));
    CHECK_THROWS_AS(flow::target_velocity({0.0}, {1.0}, 1.0, 0.0), std::domain_error);
}

TEST_CASE("fm_loss equals a brute-force mean of squared residuals") {
    Rng rng(11);
    const int n = 257;
    std::vector<double> a(n), b(n);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();

    double acc = 0;
    for (int i = 0; i < n; ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    acc /= n;

    auto ta = ad::Tensor::from({n}, a);
    auto tb = ad::Tensor::from({n}, b);
    CHECK(flow::fm_loss(ta, tb).item() == Approx(acc).epsilon(1e-13));
    CHECK(flow::fm_loss(ta, ta).item() == 0.0);
    auto shifted = ad::add(ta, ad::Tensor::scalar(1.0));
    CHECK(flow::fm_loss(shifted, ta).item() == Approx(1.0).epsilon(1e-13));
    CHECK(flow::fm_loss(ta, tb).item() >= 0.0);
    CHECK_THROWS_AS(flow::fm_loss(ta, ad::Tensor::zeros({n + 1})), ad::ShapeError);
}

// ---------------------------------------------------------------------------

TEST_CASE("orthogonalize worked examples and degenerate rule") {
    using combiner::orthogonalize;
    auto r = orthogonalize({1, 0}, {0, 1});
    CHECK(r[0] == 0.0);
    CHECK(r[1] == 1.0);
    r = orthogonalize({1, 0}, {1, 1});
    CHECK(r[0] == Approx(0.0).margin(1e-15));
    CHECK(r[1] == 1.0);
    r = orthogonalize({2, 3}, {2, 3});
    CHECK(std::abs(r[0]) < 1e-15);
    CHECK(std::abs(r[1]) < 1e-15);
    r = orthogonalize({0, 0}, {4, 5});
    CHECK(r[0] == 4.0);
    CHECK(r[1] == 5.0);
    CHECK_THROWS_AS(orthogonalize({1, 0}, {1, 0, 0}), std::invalid_argument);
}

TEST_CASE("orthogonalize output is orthogonal to the first argument") {
    Rng rng(12);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t d = 2 + rng.index(40);
        std::vector<double> g1(d), g2(d);
        for (auto& v : g1) v = rng.normal();
        for (auto& v : g2) v = rng.normal();
        auto o = combiner::orthogonalize(g1, g2);
        const double bound = 1e-10 * combiner::norm(o) * combiner::norm(g1);
        CHECK(std::abs(combiner::dot(o, g1)) <= std::max(bound, 1e-300));
    }
}

TEST_CASE("unit vector operator") {
    auto u = combiner::unit({3, 4});
    CHECK(u[0] == Approx(0.6));
    CHECK(u[1] == Approx(0.8));
    auto z = combiner::unit({0, 0, 0});
    CHECK(z == std::vector<double>{0, 0, 0});
    auto uu = combiner::unit(combiner::unit({0.3, -0.2, 1.4}));
    auto u1 = combiner::unit({0.3, -0.2, 1.4});
    for (int i = 0; i < 3; ++i) CHECK(uu[i] == Approx(u1[i]).epsilon(1e-14));
}

TEST_CASE("config_update worked examples") {
    auto g = combiner::config_update({1, 0}, {0, 1});
    CHECK(g[0] == Approx(1.0).epsilon(1e-12));
    CHECK(g[1] == Approx(1.0).epsilon(1e-12));

    g = combiner::config_update({2, 0}, {0, 1});
    CHECK(g[0] == Approx(1.5).epsilon(1e-12));
    CHECK(g[1] == Approx(1.5).epsilon(1e-12));
}

TEST_CASE("config_update degenerate rules") {
    combiner::ConfigStatus st;
    auto g = combiner::config_update({0.5, -1.0}, {0.5, -1.0}, &st);
    CHECK(st == combiner::ConfigStatus::Parallel);
    CHECK(g[0] == Approx(1.0));
    CHECK(g[1] == Approx(-2.0));

    g = combiner::config_update({1.0, 2.0}, {-2.0, -4.0}, &st);
    CHECK(st == combiner::ConfigStatus::AntiParallel);
    CHECK(g == std::vector<double>{0.0, 0.0});

    g = combiner::config_update({0.0, 0.0}, {3.0, 4.0}, &st);
    CHECK(st == combiner::ConfigStatus::ZeroInput);
    CHECK(g[0] == 3.0);
    CHECK(g[1] == 4.0);

    CHECK_THROWS_AS(combiner::config_update({1, 2}, {1, 2, 3}), std::invalid_argument);
}

TEST_CASE("config_update properties over random pairs") {
    for (std::size_t dim : {2ul, 10ul, 1000ul}) {
        Rng rng(100 + dim);
        for (int trial = 0; trial < 300; ++trial) {
            std::vector<double> g1(dim), g2(dim);
            for (auto& v : g1) v = rng.normal();
            for (auto& v : g2) v = rng.normal();
            combiner::ConfigStatus st;
            auto g = combiner::config_update(g1, g2, &st);
            REQUIRE(st == combiner::ConfigStatus::Ok);

            // equal projections onto the unit-normalized inputs, positive
            const double d1 = combiner::dot(g, combiner::unit(g1));
            const double d2 = combiner::dot(g, combiner::unit(g2));
            CHECK(std::abs(d1 - d2) <= 1e-10 * std::max(std::abs(d1), std::abs(d2)));
            CHECK(d1 > 0.0);
            CHECK(combiner::dot(g, g1) > 0.0);
            CHECK(combiner::dot(g, g2) > 0.0);

            // update stays in span{g1, g2}: residual after least-squares
            // projection is numerically zero
            const double a11 = combiner::dot(g1, g1), a12 = combiner::dot(g1, g2),
                         a22 = combiner::dot(g2, g2);
            const double b1 = combiner::dot(g1, g), b2 = combiner::dot(g2, g);
            const double det = a11 * a22 - a12 * a12;
            const double c1 = (a22 * b1 - a12 * b2) / det;
            const double c2 = (a11 * b2 - a12 * b1) / det;
            double resid = 0;
            for (std::size_t i = 0; i < dim; ++i) {
                const double r = g[i] - c1 * g1[i] - c2 * g2[i];
                resid += r * r;
            }
            CHECK(std::sqrt(resid) <= 1e-8 * combiner::norm(g));
        }
    }
}

TEST_CASE("config_update direction depends only on input directions") {
    Rng rng(77);
    std::vector<double> g1(16), g2(16);
    for (auto& v : g1) v = rng.normal();
    for (auto& v : g2) v = rng.normal();
    auto base = combiner::unit(combiner::config_update(g1, g2));
    for (auto [a, b] : {std::pair{2.0, 5.0}, {0.01, 3.0}, {7.5, 0.2}}) {
        auto s1 = g1, s2 = g2;
        for (auto& v : s1) v *= a;
        for (auto& v : s2) v *= b;
        auto dir = combiner::unit(combiner::config_update(s1, s2));
        for (std::size_t i = 0; i < dir.size(); ++i) CHECK(dir[i] == Approx(base[i]).margin(1e-12));
    }
}

TEST_CASE("weighted_update") {
    auto g = combiner::weighted_update({1, 2}, {10, 20}, 1.0, 0.0);
    CHECK(g == std::vector<double>{1, 2});
    g = combiner::weighted_update({1, 2}, {10, 20}, 1.0, 1.0);
    CHECK(g == std::vector<double>{11, 22});
    g = combiner::weighted_update({1, 2}, {10, 20}, 2.0, 0.5);
    CHECK(g == std::vector<double>{7, 14});
}
