#include "pbfm/autodiff.hpp"
#include "pbfm/grid_ops.hpp"
#include "pbfm/rng.hpp"

#include "support/fd_check.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace pbfm;
using ad::Tensor;
using pbfm_test::fd_check;
using pbfm_test::random_vec;

TEST_CASE("elementwise arithmetic values") {
    auto a = Tensor::from({2}, {1, 2});
    auto b = Tensor::from({2}, {3, 4});
    auto c = ad::add(a, b);
    CHECK(c.value()[0] == 4.0);
    CHECK(c.value()[1] == 6.0);

    auto m = ad::mean(Tensor::from({3}, {2, 4, 6}));
    CHECK(m.item() == 4.0);

    auto s = ad::mul(a, Tensor::scalar(2.0));
    CHECK(s.value()[1] == 4.0);
}

TEST_CASE("matmul identity maps a vector to itself") {
    auto eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto v = Tensor::from({3, 1}, {0.3, -1.7, 2.5});
    auto out = ad::matmul(eye, v);
    for (int i = 0; i < 3; ++i) CHECK(out.value()[i] == v.value()[i]);
}

TEST_CASE("shape mismatch errors name the op and extents") {
    auto a = Tensor::from({2}, {1, 2});
    auto b = Tensor::from({3}, {1, 2, 3});
    CHECK_THROWS_WITH(ad::add(a, b), Catch::Matchers::ContainsSubstring("add") &&
                                         Catch::Matchers::ContainsSubstring("[2]") &&
                                         Catch::Matchers::ContainsSubstring("[3]"));
    CHECK_THROWS_WITH(ad::matmul(a, b), Catch::Matchers::ContainsSubstring("matmul"));
}

TEST_CASE("quadratic backward: sum(w .* w)") {
    auto w = Tensor::from({2}, {1, 2}, true);
    ad::backward(ad::sum(ad::mul(w, w)));
    CHECK(w.grad()[0] == Catch::Approx(2.0));
    CHECK(w.grad()[1] == Catch::Approx(4.0));
}

TEST_CASE("mean(sigmoid(w)) gradient at w = 0 equals 0.25/len") {
    const int len = 8;
    auto w = Tensor::zeros({len}, true);
    ad::backward(ad::mean(ad::sigmoid(w)));
    for (int i = 0; i < len; ++i) CHECK(w.grad()[i] == Catch::Approx(0.25 / len).epsilon(1e-9));
}

TEST_CASE("detached loss leaves parameter gradient zero") {
    auto p = Tensor::from({3}, {1, 2, 3}, true);
    auto unrelated = Tensor::from({2}, {5, 6}, true);
    ad::zero_grads({p, unrelated});
    ad::backward(ad::sum(ad::mul(unrelated, unrelated)));
    for (double g : p.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward rejects non-scalar loss") {
    auto w = Tensor::from({2}, {1, 2}, true);
    CHECK_THROWS_AS(ad::backward(ad::mul(w, w)), ad::ShapeError);
}

TEST_CASE("NoGradGuard suppresses graph recording") {
    auto w = Tensor::from({2}, {1, 2}, true);
    ad::NoGradGuard ng;
    auto y = ad::mul(w, w);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("finite differences: every elementwise primitive") {
    Rng rng(41);
    const std::vector<std::int64_t> sizes = {1, 7, 128, 1000};
    for (auto n : sizes) {
        auto a = Tensor::from({n}, random_vec(n, rng), true);
        auto b = Tensor::from({n}, random_vec(n, rng), true);
        // keep div and sqrt away from their singularities
        for (auto& v : b.mutable_value()) v = 2.0 + std::abs(v);
        auto apos = Tensor::from({n}, random_vec(n, rng), true);
        for (auto& v : apos.mutable_value()) v = 1.0 + std::abs(v);

        std::vector<std::pair<const char*, std::function<Tensor()>>> cases = {
            {"add", [&] { return ad::mean(ad::add(a, b)); }},
            {"sub", [&] { return ad::mean(ad::mul(ad::sub(a, b), a)); }},
            {"mul", [&] { return ad::mean(ad::mul(a, b)); }},
            {"div", [&] { return ad::mean(ad::div(a, b)); }},
            {"neg", [&] { return ad::mean(ad::mul(ad::neg(a), a)); }},
            {"sigmoid", [&] { return ad::mean(ad::sigmoid(a)); }},
            {"silu", [&] { return ad::mean(ad::silu(a)); }},
            {"sin", [&] { return ad::mean(ad::sin(a)); }},
            {"cos", [&] { return ad::mean(ad::cos(a)); }},
            {"exp", [&] { return ad::mean(ad::exp(ad::mul(a, Tensor::scalar(0.3)))); }},
            {"sqrt", [&] { return ad::mean(ad::sqrt(apos)); }},
            {"abs", [&] { return ad::mean(ad::abs(a)); }},
            {"pow", [&] { return ad::mean(ad::pow(apos, 1.7)); }},
            {"clamp_min", [&] { return ad::mean(ad::clamp_min(a, 0.35)); }},
            {"sum", [&] { return ad::mul(ad::sum(ad::mul(a, a)), Tensor::scalar(1.0 / double(n))); }},
        };
        for (auto& [name, fn] : cases) {
            INFO("primitive " << name << " n=" << n);
            auto rep = fd_check({a, b, apos}, fn);
            CHECK(rep.max_rel < 1e-6);
        }
    }
}

TEST_CASE("finite differences: scalar-broadcast binary ops") {
    Rng rng(43);
    auto a = Tensor::from({17}, random_vec(17, rng), true);
    auto s = Tensor::from({1}, {1.3}, true);
    for (auto& v : a.mutable_value()) v = 2.0 + std::abs(v);

    auto rep = fd_check({a, s}, [&] { return ad::mean(ad::mul(a, s)); });
    CHECK(rep.max_rel < 1e-6);
    rep = fd_check({a, s}, [&] { return ad::mean(ad::div(s, a)); });
    CHECK(rep.max_rel < 1e-6);
    rep = fd_check({a, s}, [&] { return ad::mean(ad::sub(s, a)); });
    CHECK(rep.max_rel < 1e-6);
    rep = fd_check({a, s}, [&] { return ad::mean(ad::add(a, s)); });
    CHECK(rep.max_rel < 1e-6);
}

TEST_CASE("finite differences: matmul, slice, concat, reshape, expands") {
    Rng rng(44);
    auto a = Tensor::from({4, 6}, random_vec(24, rng), true);
    auto b = Tensor::from({6, 3}, random_vec(18, rng), true);
    auto v = Tensor::from({5}, random_vec(5, rng), true);
    auto w = Tensor::from({4}, random_vec(4, rng), true);
    auto sc = Tensor::from({4, 2}, random_vec(8, rng), true);

    auto rep = fd_check({a, b}, [&] { return ad::mean(ad::matmul(a, b)); });
    CHECK(rep.max_rel < 1e-6);

    rep = fd_check({a}, [&] {
        auto sl = ad::slice(a, 1, 2, 5);
        return ad::mean(ad::mul(sl, sl));
    });
    CHECK(rep.max_rel < 1e-6);

    rep = fd_check({a, b}, [&] {
        auto cat = ad::concat({a, ad::reshape(ad::slice(b, 0, 0, 4), {4, 3}), a}, 1);
        return ad::mean(ad::mul(cat, cat));
    });
    CHECK(rep.max_rel < 1e-6);

    rep = fd_check({v}, [&] {
        auto e = ad::expand_rows(v, 7);
        return ad::mean(ad::mul(e, e));
    });
    CHECK(rep.max_rel < 1e-6);

    rep = fd_check({w, a}, [&] {
        auto e = ad::expand_persample(w, {6});
        return ad::mean(ad::mul(e, a));
    });
    CHECK(rep.max_rel < 1e-6);

    rep = fd_check({sc}, [&] {
        auto e = ad::expand_spatial(sc, 3, 5);
        return ad::mean(ad::mul(e, e));
    });
    CHECK(rep.max_rel < 1e-6);

    rep = fd_check({w}, [&] {
        auto e = ad::expand_chan(w, 2, 3, 3);
        return ad::mean(ad::mul(e, e));
    });
    CHECK(rep.max_rel < 1e-6);

    auto grid = Tensor::from({2, 4, 3, 3}, random_vec(72, rng), true);
    rep = fd_check({grid}, [&] {
        auto m = ad::spatial_mean(grid);
        return ad::mean(ad::mul(m, m));
    });
    CHECK(rep.max_rel < 1e-6);
}

TEST_CASE("finite differences: pad and conv under each padding mode") {
    Rng rng(45);
    auto x = Tensor::from({2, 3, 5, 5}, random_vec(150, rng), true);
    auto k = Tensor::from({4, 3, 3, 3}, random_vec(108, rng, 0.5), true);

    for (auto mode : {ad::PadMode::Zero, ad::PadMode::Periodic, ad::PadMode::Replicate}) {
        auto rep = fd_check({x, k}, [&] {
            auto y = ad::conv2d(x, k, mode);
            return ad::mean(ad::mul(y, y));
        });
        INFO("pad mode " << static_cast<int>(mode));
        CHECK(rep.max_rel < 1e-6);
    }
}

TEST_CASE("conv2d value against a hand-computed stencil") {
    // 3x3 discrete Laplacian applied to a linear ramp is zero away from edges
    auto x = Tensor::zeros({1, 1, 5, 5});
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) x.mutable_value()[i * 5 + j] = 2.0 * i - j;
    auto lap = Tensor::from({1, 1, 3, 3}, {0, 1, 0, 1, -4, 1, 0, 1, 0});
    auto y = ad::conv2d(x, lap, ad::PadMode::Replicate);
    for (int i = 1; i < 4; ++i)
        for (int j = 1; j < 4; ++j) CHECK(y.value()[i * 5 + j] == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("finite differences: spectral derivative") {
    Rng rng(46);
    auto x = Tensor::from({1, 2, 8, 8}, random_vec(128, rng), true);
    for (int axis : {0, 1}) {
        auto rep = fd_check({x}, [&] {
            auto d = ad::spectral_deriv(x, axis, 1.0);
            return ad::mean(ad::mul(d, d));
        });
        INFO("axis " << axis);
        CHECK(rep.max_rel < 1e-6);
    }
}

TEST_CASE("spectral derivative is exact for a single Fourier mode") {
    const int n = 16;
    const double L = 2.0;
    auto x = Tensor::zeros({1, 1, n, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            x.mutable_value()[i * n + j] = std::sin(2.0 * M_PI * 3.0 * j * (L / n) / L);
    auto d = ad::spectral_deriv(x, 1, L);
    const double k = 2.0 * M_PI * 3.0 / L;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double expect = k * std::cos(2.0 * M_PI * 3.0 * j * (L / n) / L);
            CHECK(d.value()[i * n + j] == Catch::Approx(expect).margin(1e-10));
        }
}

TEST_CASE("composition of many primitives matches finite differences") {
    Rng rng(47);
    auto w = Tensor::from({6, 6}, random_vec(36, rng, 0.4), true);
    auto x = Tensor::from({6, 6}, random_vec(36, rng), true);
    // chain of ~50 primitives
    auto build = [&] {
        auto h = x;
        for (int i = 0; i < 12; ++i) {
            h = ad::silu(ad::matmul(h, w));
            h = ad::add(h, ad::mul(x, Tensor::scalar(0.1)));
        }
        return ad::mean(ad::mul(h, h));
    };
    auto rep = fd_check({w, x}, build);
    CHECK(rep.max_rel < 1e-5);
}

TEST_CASE("two backward heads from one forward pass match isolated reruns") {
    Rng rng(48);
    auto w = Tensor::from({8}, random_vec(8, rng), true);
    auto x = Tensor::from({8}, random_vec(8, rng));

    auto shared = ad::silu(ad::mul(w, x));
    auto head1 = ad::mean(ad::mul(shared, shared));
    auto head2 = ad::sum(ad::abs(shared));

    ad::zero_grads({w});
    ad::backward(head1);
    auto g1 = w.grad();
    ad::zero_grads({w});
    ad::backward(head2);
    auto g2 = w.grad();

    // isolated recomputation
    auto s1 = ad::silu(ad::mul(w, x));
    ad::zero_grads({w});
    ad::backward(ad::mean(ad::mul(s1, s1)));
    for (int i = 0; i < 8; ++i) CHECK(w.grad()[i] == Catch::Approx(g1[i]).epsilon(1e-14));

    auto s2 = ad::silu(ad::mul(w, x));
    ad::zero_grads({w});
    ad::backward(ad::sum(ad::abs(s2)));
    for (int i = 0; i < 8; ++i) CHECK(w.grad()[i] == Catch::Approx(g2[i]).epsilon(1e-14));
}

TEST_CASE("backward on the same loss twice is idempotent") {
    auto w = Tensor::from({3}, {0.5, -1.0, 2.0}, true);
    auto loss = ad::mean(ad::mul(w, w));
    ad::backward(loss);
    auto first = w.grad();
    ad::backward(loss);
    for (int i = 0; i < 3; ++i) CHECK(w.grad()[i] == first[i]);
}
