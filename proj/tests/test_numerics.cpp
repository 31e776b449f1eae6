#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <lfkm/numerics.hpp>
#include <lfkm/rng.hpp>

#include <cmath>
#include <tuple>
#include <vector>

#include "grad_check.hpp"

using lfkm::Tensor;
using lfkm::SplitMix64;
namespace num = lfkm::numerics;

TEST_CASE("conv2d hand case: ones by ones") {
    Tensor in = Tensor::full({1, 3, 3}, 1.0);
    Tensor k = Tensor::full({3, 3, 1, 1}, 1.0);
    Tensor b({1});

    Tensor out = num::conv2d(in, k, b, 1);
    REQUIRE(out.extent(0) == 1);
    REQUIRE(out.extent(1) == 3);
    REQUIRE(out.extent(2) == 3);
    CHECK(out.at(0, 1, 1) == doctest::Approx(9.0));
    CHECK(out.at(0, 0, 0) == doctest::Approx(4.0));
    CHECK(out.at(0, 2, 2) == doctest::Approx(4.0));
    CHECK(out.at(0, 0, 1) == doctest::Approx(6.0));
    CHECK(out.at(0, 1, 0) == doctest::Approx(6.0));
}

TEST_CASE("conv2d centered delta is identity") {
    SplitMix64 rng(7);
    Tensor in = lfkm::test::random_tensor({2, 5, 4}, rng);
    Tensor k({3, 3, 2, 2});
    k.at(1, 1, 0, 0) = 1.0;
    k.at(1, 1, 1, 1) = 1.0;
    Tensor b({2});

    Tensor out = num::conv2d(in, k, b, 1);
    for (std::int64_t i = 0; i < in.size(); ++i)
        CHECK(out[i] == doctest::Approx(in[i]).epsilon(1e-12));
}

TEST_CASE("conv2d zero kernel yields bias planes") {
    SplitMix64 rng(8);
    Tensor in = lfkm::test::random_tensor({3, 4, 4}, rng);
    Tensor k({3, 3, 3, 2});
    Tensor b({2}, {-1.25, 0.5});

    Tensor out = num::conv2d(in, k, b, 1);
    for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 4; ++w) {
            CHECK(out.at(0, h, w) == doctest::Approx(-1.25));
            CHECK(out.at(1, h, w) == doctest::Approx(0.5));
        }
}

TEST_CASE("conv2d dilation 2 reaches two pixels out") {
    Tensor in({1, 5, 5});
    in.at(0, 0, 0) = 1.0;
    Tensor k = Tensor::full({3, 3, 1, 1}, 1.0);
    Tensor b({1});

    Tensor out = num::conv2d(in, k, b, 2);
    CHECK(out.at(0, 2, 2) == doctest::Approx(1.0));
    CHECK(out.at(0, 0, 2) == doctest::Approx(1.0));
    CHECK(out.at(0, 2, 0) == doctest::Approx(1.0));
    CHECK(out.at(0, 1, 1) == doctest::Approx(0.0));
    CHECK(out.at(0, 0, 0) == doctest::Approx(1.0));
}

TEST_CASE("conv2d preserves spatial shape for odd k and any dilation") {
    SplitMix64 rng(9);
    for (int k : {1, 3, 5}) {
        for (int d : {1, 2, 3}) {
            Tensor in = lfkm::test::random_tensor({2, 7, 6}, rng);
            Tensor ker = lfkm::test::random_tensor({k, k, 2, 3}, rng);
            Tensor b = lfkm::test::random_tensor({3}, rng);
            Tensor out = num::conv2d(in, ker, b, d);
            CHECK(out.extent(0) == 3);
            CHECK(out.extent(1) == 7);
            CHECK(out.extent(2) == 6);
        }
    }
}

TEST_CASE("conv2d shape and dilation errors") {
    Tensor in({2, 4, 4});
    Tensor k({3, 3, 3, 1});
    Tensor b({1});
    CHECK_THROWS(num::conv2d(in, k, b, 1));
    Tensor k2({3, 3, 2, 1});
    CHECK_THROWS(num::conv2d(in, k2, b, 0));
    Tensor k3({2, 2, 2, 1});
    CHECK_THROWS(num::conv2d(in, k3, b, 1));
}

TEST_CASE("bicubic upsample of the ramp 0 1 2 3") {
    Tensor in({1, 2, 4});
    for (int w = 0; w < 4; ++w) {
        in.at(0, 0, w) = double(w);
        in.at(0, 1, w) = double(w);
    }
    Tensor out = num::upsample_bicubic_2x(in);
    REQUIRE(out.extent(1) == 4);
    REQUIRE(out.extent(2) == 8);

    const double expect[8] = {0.0, 0.4375, 1.0, 1.5, 2.0, 2.5625, 3.0, 3.0625};
    for (int w = 0; w < 8; ++w)
        CHECK(out.at(0, 1, w) == doctest::Approx(expect[w]).epsilon(1e-12));
}

TEST_CASE("bicubic upsample reproduces constants and doubles shape") {
    Tensor in = Tensor::full({3, 8, 8}, 0.731);
    Tensor out = num::upsample_bicubic_2x(in);
    CHECK(out.extent(0) == 3);
    CHECK(out.extent(1) == 16);
    CHECK(out.extent(2) == 16);
    for (std::int64_t i = 0; i < out.size(); ++i)
        CHECK(out[i] == doctest::Approx(0.731).epsilon(1e-12));

    Tensor tiny({1, 1, 4});
    CHECK_THROWS(num::upsample_bicubic_2x(tiny));
}

TEST_CASE("bicubic upsample is linear") {
    SplitMix64 rng(10);
    Tensor x = lfkm::test::random_tensor({2, 5, 5}, rng);
    Tensor y = lfkm::test::random_tensor({2, 5, 5}, rng);
    const double a = 1.7, b = -0.4;

    Tensor mix({2, 5, 5});
    for (std::int64_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * y[i];

    Tensor fx = num::upsample_bicubic_2x(x);
    Tensor fy = num::upsample_bicubic_2x(y);
    Tensor fmix = num::upsample_bicubic_2x(mix);
    for (std::int64_t i = 0; i < fmix.size(); ++i)
        CHECK(fmix[i] == doctest::Approx(a * fx[i] + b * fy[i]).epsilon(1e-9));
}

TEST_CASE("batch_norm hand case 1 2 3 4") {
    Tensor in({1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor gamma({1}, {2.0});
    Tensor beta({1}, {1.0});

    Tensor out = num::batch_norm(in, gamma, beta, 1e-12, nullptr);
    const double expect[4] = {-1.68328157299975, 0.105572809000084, 1.89442719099992,
                              3.68328157299975};
    for (int i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(expect[i]).epsilon(1e-6));
}

TEST_CASE("batch_norm normalizes and handles constant channels") {
    SplitMix64 rng(11);
    Tensor in = lfkm::test::random_tensor({3, 6, 6}, rng, -3.0, 5.0);
    Tensor gamma = Tensor::full({3}, 1.0);
    Tensor beta({3});

    Tensor out = num::batch_norm(in, gamma, beta, 1e-5, nullptr);
    for (int c = 0; c < 3; ++c) {
        double mean = 0.0, var = 0.0;
        for (int h = 0; h < 6; ++h)
            for (int w = 0; w < 6; ++w) mean += out.at(c, h, w);
        mean /= 36.0;
        for (int h = 0; h < 6; ++h)
            for (int w = 0; w < 6; ++w) var += (out.at(c, h, w) - mean) * (out.at(c, h, w) - mean);
        var /= 36.0;
        CHECK(std::abs(mean) < 1e-5);
        CHECK(std::abs(var - 1.0) < 1e-4);
    }

    Tensor flat = Tensor::full({1, 2, 2}, 4.2);
    Tensor g1({1}, {3.0});
    Tensor b1({1}, {-0.5});
    Tensor out2 = num::batch_norm(flat, g1, b1, 1e-5, nullptr);
    for (std::int64_t i = 0; i < out2.size(); ++i)
        CHECK(out2[i] == doctest::Approx(-0.5).epsilon(1e-6));
}

TEST_CASE("activation values") {
    Tensor in({1, 1, 3}, {0.0, 1.0, -1.0});

    Tensor gel = num::activation(in, num::Act::Gelu);
    CHECK(gel[0] == doctest::Approx(0.0));
    CHECK(gel[1] == doctest::Approx(0.8413447460685429).epsilon(1e-10));
    CHECK(gel[2] == doctest::Approx(0.8413447460685429 - 1.0).epsilon(1e-6));

    Tensor sig = num::activation(in, num::Act::Sigmoid);
    CHECK(sig[0] == doctest::Approx(0.5));
    CHECK(sig[1] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));

    Tensor u({3, 1, 1});
    Tensor sm = num::activation(u, num::Act::SoftmaxChannels);
    for (std::int64_t i = 0; i < sm.size(); ++i)
        CHECK(sm[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax sums to one per pixel and stays positive") {
    SplitMix64 rng(12);
    Tensor in = lfkm::test::random_tensor({4, 5, 3}, rng, -10.0, 10.0);
    Tensor out = num::activation(in, num::Act::SoftmaxChannels);
    for (int h = 0; h < 5; ++h)
        for (int w = 0; w < 3; ++w) {
            double s = 0.0;
            for (int c = 0; c < 4; ++c) {
                CHECK(out.at(c, h, w) > 0.0);
                s += out.at(c, h, w);
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
}

TEST_CASE("mse values and gradient") {
    Tensor a({2}, {1.0, 2.0});
    Tensor t({2});
    CHECK(num::mse(a, t) == doctest::Approx(2.5));

    Tensor same({3}, {0.5, -2.0, 7.0});
    CHECK(num::mse(same, same) == doctest::Approx(0.0));

    a.requires_grad = true;
    num::mse_backward(a, t, 1.0);
    REQUIRE(a.grad.size() == 2);
    CHECK(a.grad[0] == doctest::Approx(1.0));
    CHECK(a.grad[1] == doctest::Approx(2.0));

    Tensor bad({3});
    CHECK_THROWS(num::mse(a, bad));
}

TEST_CASE("adam first step magnitude is lr") {
    Tensor p({3}, {1.0, -1.0, 0.25});
    p.requires_grad = true;
    p.ensure_grad();
    p.grad = {0.3, -2.0, 1e-4};

    num::AdamState st;
    num::AdamHyper hp;
    hp.lr = 0.01;
    std::vector<double> before = {p[0], p[1], p[2]};
    num::adam_step(p, st, hp);
    CHECK(st.step == 1);
    for (int i = 0; i < 2; ++i) {
        double delta = p[i] - before[static_cast<std::size_t>(i)];
        CHECK(std::abs(std::abs(delta) - hp.lr) < 1e-3 * hp.lr);
        CHECK(delta * p.grad[static_cast<std::size_t>(i)] < 0.0);
    }
}

TEST_CASE("adam second identical step is no larger") {
    Tensor p({1});
    p.requires_grad = true;
    p.ensure_grad();

    num::AdamState st;
    num::AdamHyper hp;
    p.grad = {0.7};
    num::adam_step(p, st, hp);
    double first = std::abs(p[0]);
    double at1 = p[0];
    p.grad = {0.7};
    num::adam_step(p, st, hp);
    double second = std::abs(p[0] - at1);
    CHECK(second <= first + 1e-6);
    CHECK(st.step == 2);
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
    Tensor p({4}, {1.0, 2.0, 3.0, 4.0});
    p.requires_grad = true;
    p.ensure_grad();
    num::AdamState st;
    num::AdamHyper hp;
    num::adam_step(p, st, hp);
    CHECK(st.step == 1);
    for (int i = 0; i < 4; ++i) CHECK(p[i] == doctest::Approx(double(i + 1)).epsilon(1e-12));

    Tensor q({2});
    q.requires_grad = true;
    num::AdamState st2;
    CHECK_THROWS(num::adam_step(q, st2, hp));
}

TEST_CASE("gradient check: conv2d") {
    SplitMix64 rng(20);
    Tensor in = lfkm::test::random_tensor({2, 6, 5}, rng);
    Tensor k = lfkm::test::random_tensor({3, 3, 2, 3}, rng);
    Tensor b = lfkm::test::random_tensor({3}, rng);
    Tensor probe = lfkm::test::random_tensor({3, 6, 5}, rng);
    in.requires_grad = k.requires_grad = b.requires_grad = true;

    lfkm::test::GradProblem prob;
    prob.objective = [&] {
        Tensor out = num::conv2d(in, k, b, 2);
        double s = 0.0;
        for (std::int64_t i = 0; i < out.size(); ++i) s += out[i] * probe[i];
        return s;
    };
    prob.backward = [&] {
        in.zero_grad();
        k.zero_grad();
        b.zero_grad();
        num::conv2d_backward(in, k, b, probe, 2);
    };
    double err = lfkm::test::finite_diff_max_rel_error(prob, {&in, &k, &b}, 1e-3, rng);
    CHECK(err < 1e-3);
}

TEST_CASE("gradient check: conv2d high precision") {
    SplitMix64 rng(21);
    Tensor in = lfkm::test::random_tensor({1, 4, 4}, rng);
    Tensor k = lfkm::test::random_tensor({3, 3, 1, 2}, rng);
    Tensor b = lfkm::test::random_tensor({2}, rng);
    Tensor probe = lfkm::test::random_tensor({2, 4, 4}, rng);
    in.requires_grad = k.requires_grad = b.requires_grad = true;

    lfkm::test::GradProblem prob;
    prob.objective = [&] {
        Tensor out = num::conv2d(in, k, b, 1);
        double s = 0.0;
        for (std::int64_t i = 0; i < out.size(); ++i) s += out[i] * probe[i];
        return s;
    };
    prob.backward = [&] {
        in.zero_grad();
        k.zero_grad();
        b.zero_grad();
        num::conv2d_backward(in, k, b, probe, 1);
    };
    // linear in each argument, so central differences are exact up to rounding
    double err = lfkm::test::finite_diff_max_rel_error(prob, {&in, &k, &b}, 1e-5, rng);
    CHECK(err < 1e-6);
}

TEST_CASE("gradient check: upsample_bicubic_2x") {
    SplitMix64 rng(22);
    Tensor in = lfkm::test::random_tensor({2, 5, 4}, rng);
    Tensor probe = lfkm::test::random_tensor({2, 10, 8}, rng);
    in.requires_grad = true;

    lfkm::test::GradProblem prob;
    prob.objective = [&] {
        Tensor out = num::upsample_bicubic_2x(in);
        double s = 0.0;
        for (std::int64_t i = 0; i < out.size(); ++i) s += out[i] * probe[i];
        return s;
    };
    prob.backward = [&] {
        in.zero_grad();
        num::upsample_bicubic_2x_backward(in, probe);
    };
    double err = lfkm::test::finite_diff_max_rel_error(prob, {&in}, 1e-5, rng);
    CHECK(err < 1e-6);
}

TEST_CASE("gradient check: batch_norm") {
    SplitMix64 rng(23);
    Tensor in = lfkm::test::random_tensor({2, 4, 4}, rng);
    Tensor gamma = lfkm::test::random_tensor({2}, rng, 0.5, 1.5);
    Tensor beta = lfkm::test::random_tensor({2}, rng);
    Tensor probe = lfkm::test::random_tensor({2, 4, 4}, rng);
    in.requires_grad = gamma.requires_grad = beta.requires_grad = true;

    lfkm::test::GradProblem prob;
    prob.objective = [&] {
        Tensor out = num::batch_norm(in, gamma, beta, 1e-5, nullptr);
        double s = 0.0;
        for (std::int64_t i = 0; i < out.size(); ++i) s += out[i] * probe[i];
        return s;
    };
    prob.backward = [&] {
        in.zero_grad();
        gamma.zero_grad();
        beta.zero_grad();
        num::BatchNormCache cache;
        Tensor out = num::batch_norm(in, gamma, beta, 1e-5, &cache);
        num::batch_norm_backward(in, gamma, beta, probe, cache);
    };
    double err = lfkm::test::finite_diff_max_rel_error(prob, {&in, &gamma, &beta}, 1e-3, rng);
    CHECK(err < 1e-3);
}

TEST_CASE("gradient check: activations") {
    SplitMix64 rng(24);
    for (auto kind : {num::Act::Gelu, num::Act::Sigmoid, num::Act::SoftmaxChannels}) {
        Tensor in = lfkm::test::random_tensor({3, 4, 3}, rng, -2.0, 2.0);
        Tensor probe = lfkm::test::random_tensor({3, 4, 3}, rng);
        in.requires_grad = true;

        lfkm::test::GradProblem prob;
        prob.objective = [&] {
            Tensor out = num::activation(in, kind);
            double s = 0.0;
            for (std::int64_t i = 0; i < out.size(); ++i) s += out[i] * probe[i];
            return s;
        };
        prob.backward = [&] {
            in.zero_grad();
            Tensor out = num::activation(in, kind);
            num::activation_backward(in, out, probe, kind);
        };
        double err = lfkm::test::finite_diff_max_rel_error(prob, {&in}, 1e-4, rng);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("gradient check: mse") {
    SplitMix64 rng(25);
    Tensor pred = lfkm::test::random_tensor({2, 3, 3}, rng);
    Tensor target = lfkm::test::random_tensor({2, 3, 3}, rng);
    pred.requires_grad = true;

    lfkm::test::GradProblem prob;
    prob.objective = [&] { return num::mse(pred, target); };
    prob.backward = [&] {
        pred.zero_grad();
        num::mse_backward(pred, target, 1.0);
    };
    double err = lfkm::test::finite_diff_max_rel_error(prob, {&pred}, 1e-5, rng);
    CHECK(err < 1e-5);
}

TEST_CASE("no NaN or Inf on finite inputs in range") {
    SplitMix64 rng(26);
    Tensor in = lfkm::test::random_tensor({3, 6, 6}, rng, -10.0, 10.0);
    Tensor k = lfkm::test::random_tensor({3, 3, 3, 3}, rng, -10.0, 10.0);
    Tensor b = lfkm::test::random_tensor({3}, rng, -10.0, 10.0);
    Tensor gamma = lfkm::test::random_tensor({3}, rng, 0.1, 10.0);
    Tensor beta = lfkm::test::random_tensor({3}, rng, -10.0, 10.0);

    Tensor x = num::conv2d(in, k, b, 2);
    CHECK(x.all_finite());
    x = num::upsample_bicubic_2x(x);
    CHECK(x.all_finite());
    x = num::batch_norm(x, gamma, beta, 1e-5, nullptr);
    CHECK(x.all_finite());
    for (auto kind : {num::Act::Gelu, num::Act::Sigmoid, num::Act::SoftmaxChannels})
        CHECK(num::activation(x, kind).all_finite());
}

TEST_CASE("thread count does not change results") {
    SplitMix64 rng(27);
    Tensor in = lfkm::test::random_tensor({4, 16, 16}, rng);
    Tensor k = lfkm::test::random_tensor({3, 3, 4, 4}, rng);
    Tensor b = lfkm::test::random_tensor({4}, rng);
    Tensor gamma = lfkm::test::random_tensor({4}, rng, 0.5, 1.5);
    Tensor beta = lfkm::test::random_tensor({4}, rng);

    auto run = [&] {
        Tensor x = num::conv2d(in, k, b, 2);
        x = num::upsample_bicubic_2x(x);
        x = num::batch_norm(x, gamma, beta, 1e-5, nullptr);
        return num::activation(x, num::Act::Gelu);
    };

    num::set_num_threads(1);
    Tensor one = run();
    num::set_num_threads(4);
    Tensor four = run();
    num::set_num_threads(3);
    Tensor three = run();

    REQUIRE(one.size() == four.size());
    for (std::int64_t i = 0; i < one.size(); ++i) {
        CHECK(one[i] == four[i]);
        CHECK(one[i] == three[i]);
    }

    auto run_bwd = [&] {
        Tensor i2 = in, k2 = k, b2 = b;
        i2.requires_grad = k2.requires_grad = b2.requires_grad = true;
        Tensor g({4, 16, 16});
        for (std::int64_t j = 0; j < g.size(); ++j) g[j] = double(j % 13) * 0.1 - 0.5;
        num::conv2d_backward(i2, k2, b2, g, 1);
        return std::tuple(i2.grad, k2.grad, b2.grad);
    };
    num::set_num_threads(1);
    auto g1 = run_bwd();
    num::set_num_threads(5);
    auto g5 = run_bwd();
    num::set_num_threads(0);
    CHECK(std::get<0>(g1) == std::get<0>(g5));
    CHECK(std::get<1>(g1) == std::get<1>(g5));
    CHECK(std::get<2>(g1) == std::get<2>(g5));
}
