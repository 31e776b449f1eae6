#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <lfkm/fb_basis.hpp>
#include <lfkm/model.hpp>
#include <lfkm/numerics.hpp>
#include <lfkm/rng.hpp>

#include <cmath>
#include <vector>

#include "grad_check.hpp"

using lfkm::Tensor;
using lfkm::SplitMix64;
namespace model = lfkm::model;
namespace num = lfkm::numerics;

static model::NetworkConfig tiny_config() {
    model::NetworkConfig cfg;
    cfg.c_m = 2;
    cfg.c_d = 3;
    cfg.r = 4;
    cfg.n = 16;
    cfg.U = 2;
    cfg.V = 2;
    cfg.X = 17;
    cfg.Y = 17;
    cfg.seed = 5;
    return cfg;
}

TEST_CASE("closed-form parameter estimates") {
    CHECK(model::estimate_per_view_params(5, 3, 5, 3, 3, 2, 3) == 4725);
    CHECK(model::estimate_allocated_params(5, 3, 5, 3, 3, 2, 3) == 2025);
    CHECK(model::estimate_per_view_params(5, 3, 5, 1, 1, 2, 3) ==
          model::estimate_allocated_params(5, 3, 5, 1, 1, 2, 3));
}

TEST_CASE("modulator coefficient reduction factor") {
    model::NetworkConfig cfg = tiny_config();
    cfg.U = cfg.V = 9;
    auto per_view = model::modulator_coefficient_count(cfg, false);
    auto allocated = model::modulator_coefficient_count(cfg, true);
    CHECK(per_view == 9 * allocated);

    // allocated = per_view * (U+V) / (2*U*V), exactly
    SplitMix64 rng(41);
    for (int trial = 0; trial < 30; ++trial) {
        cfg.U = 1 + int(rng.next_below(9));
        cfg.V = 1 + int(rng.next_below(9));
        cfg.c_m = 2 * (1 + int(rng.next_below(4)));
        per_view = model::modulator_coefficient_count(cfg, false);
        allocated = model::modulator_coefficient_count(cfg, true);
        CHECK(allocated * 2 * cfg.U * cfg.V == per_view * (cfg.U + cfg.V));
    }
}

TEST_CASE("param_count matches the stored bank") {
    SplitMix64 rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        model::NetworkConfig cfg;
        cfg.allocate_modulators = rng.next_below(2) == 0;
        cfg.decompose_kernels = rng.next_below(2) == 0;
        cfg.decoder_k3 = rng.next_below(2) == 0;
        cfg.c_m = cfg.allocate_modulators ? 2 * (1 + int(rng.next_below(3)))
                                          : 1 + int(rng.next_below(5));
        cfg.c_d = 1 + int(rng.next_below(20));
        cfg.r = 1 + int(rng.next_below(9));
        cfg.n = 16;
        cfg.U = 1 + int(rng.next_below(5));
        cfg.V = 1 + int(rng.next_below(5));
        cfg.X = 17 + int(rng.next_below(24));
        cfg.Y = 17 + int(rng.next_below(24));
        cfg.seed = rng.next_u64();

        model::KernelBank bank = model::init_bank(cfg);
        std::int64_t stored = 0;
        for (const auto& ref : model::bank_params(bank)) stored += ref.tensor->size();

        model::ParamCount pc = model::param_count(cfg);
        CHECK(pc.total == stored);
        CHECK(pc.modulator_share == doctest::Approx(double(pc.modulator_values) / double(pc.total)));
    }
}

TEST_CASE("init, noise, and render are deterministic") {
    model::NetworkConfig cfg = tiny_config();
    model::KernelBank a = model::init_bank(cfg);
    model::KernelBank b = model::init_bank(cfg);

    auto pa = model::bank_params(a);
    auto pb = model::bank_params(b);
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i].tensor->size() == pb[i].tensor->size());
        for (std::int64_t j = 0; j < pa[i].tensor->size(); ++j)
            CHECK((*pa[i].tensor)[j] == (*pb[i].tensor)[j]);
    }

    Tensor n1 = model::make_noise(cfg);
    Tensor n2 = model::make_noise(cfg);
    REQUIRE(n1.shape() == std::vector<int>({cfg.channels(), 2, 2}));
    for (std::int64_t i = 0; i < n1.size(); ++i) {
        CHECK(n1[i] == n2[i]);
        CHECK(n1[i] >= 0.0);
        CHECK(n1[i] < 1.0);
    }

    Tensor r1 = model::forward(a, n1, 1, 0);
    Tensor r2 = model::forward(b, n2, 1, 0);
    REQUIRE(r1.size() == r2.size());
    for (std::int64_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]);

    model::NetworkConfig other = cfg;
    other.seed = cfg.seed + 1;
    Tensor n3 = model::make_noise(other);
    bool any_diff = false;
    for (std::int64_t i = 0; i < n1.size(); ++i) any_diff |= (n1[i] != n3[i]);
    CHECK(any_diff);
}

TEST_CASE("render shape, crop, and range") {
    model::NetworkConfig cfg = tiny_config();
    cfg.X = 17;
    cfg.Y = 19;
    model::KernelBank bank = model::init_bank(cfg);
    Tensor noise = model::make_noise(cfg);

    Tensor out = model::forward(bank, noise, 0, 0);
    REQUIRE(out.shape() == std::vector<int>({3, 17, 19}));
    for (std::int64_t i = 0; i < out.size(); ++i) {
        CHECK(out[i] > 0.0);
        CHECK(out[i] < 1.0);
    }
}

TEST_CASE("assembled kernel layout") {
    model::NetworkConfig cfg = tiny_config();
    model::KernelBank bank = model::init_bank(cfg);
    const int c = cfg.channels();

    SUBCASE("zero modulators leave descriptor block intact") {
        for (auto& t : bank.layers[1].mod_u)
            for (std::int64_t i = 0; i < t.size(); ++i) t[i] = 0.0;
        for (auto& t : bank.layers[1].mod_v)
            for (std::int64_t i = 0; i < t.size(); ++i) t[i] = 0.0;

        model::AssembledLayer al = model::assemble_layer_kernel(bank, 1, 0, 1);
        REQUIRE(al.kernel.shape() == std::vector<int>({3, 3, c, c}));
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b)
                for (int ci = 0; ci < c; ++ci)
                    for (int co = cfg.c_d; co < c; ++co)
                        CHECK(al.kernel.at(a, b, ci, co) == 0.0);

        Tensor desc = lfkm::fb_basis::compose_kernel(bank.bases, bank.layers[1].desc);
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b)
                for (int ci = 0; ci < c; ++ci)
                    for (int co = 0; co < cfg.c_d; ++co)
                        CHECK(al.kernel.at(a, b, ci, co) == doctest::Approx(desc.at(a, b, ci, co)));
    }

    SUBCASE("bias is the sum of the directional biases") {
        for (int i = 0; i < c; ++i) {
            bank.layers[0].bias_u[1][i] = 0.25 * (i + 1);
            bank.layers[0].bias_v[0][i] = -0.25 * (i + 1);
        }
        model::AssembledLayer al = model::assemble_layer_kernel(bank, 0, 1, 0);
        for (int i = 0; i < c; ++i) CHECK(al.bias[i] == doctest::Approx(0.0));
    }

    SUBCASE("views sharing a row share the u-half") {
        model::AssembledLayer a0 = model::assemble_layer_kernel(bank, 2, 1, 0);
        model::AssembledLayer a1 = model::assemble_layer_kernel(bank, 2, 1, 1);
        const int half = cfg.c_m / 2;
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b)
                for (int ci = 0; ci < c; ++ci)
                    for (int co = cfg.c_d; co < cfg.c_d + half; ++co)
                        CHECK(a0.kernel.at(a, b, ci, co) == a1.kernel.at(a, b, ci, co));
    }

    SUBCASE("angular index out of range") {
        CHECK_THROWS(model::assemble_layer_kernel(bank, 0, cfg.U, 0));
        CHECK_THROWS(model::assemble_layer_kernel(bank, 0, 0, -1));
    }
}

TEST_CASE("zeroed v-modulators make columns indistinguishable") {
    model::NetworkConfig cfg = tiny_config();
    cfg.U = 2;
    cfg.V = 3;
    model::KernelBank bank = model::init_bank(cfg);
    for (auto& layer : bank.layers) {
        for (auto& t : layer.mod_v)
            for (std::int64_t i = 0; i < t.size(); ++i) t[i] = 0.0;
        for (auto& t : layer.bias_v)
            for (std::int64_t i = 0; i < t.size(); ++i) t[i] = 0.0;
    }
    Tensor noise = model::make_noise(cfg);
    Tensor v0 = model::forward(bank, noise, 1, 0);
    Tensor v1 = model::forward(bank, noise, 1, 1);
    Tensor v2 = model::forward(bank, noise, 1, 2);
    for (std::int64_t i = 0; i < v0.size(); ++i) {
        CHECK(v0[i] == v1[i]);
        CHECK(v0[i] == v2[i]);
    }
}

TEST_CASE("mutating one row's modulators leaves other rows bit-identical") {
    model::NetworkConfig cfg = tiny_config();
    cfg.U = 3;
    cfg.V = 2;
    model::KernelBank bank = model::init_bank(cfg);
    Tensor noise = model::make_noise(cfg);

    std::vector<Tensor> before;
    for (int u = 0; u < cfg.U; ++u)
        for (int v = 0; v < cfg.V; ++v) before.push_back(model::forward(bank, noise, u, v));

    Tensor& slice = bank.layers[3].mod_u[0];
    for (std::int64_t i = 0; i < slice.size(); ++i) slice[i] += 0.05;
    bank.layers[3].bias_u[0][0] += 0.1;

    std::size_t idx = 0;
    for (int u = 0; u < cfg.U; ++u)
        for (int v = 0; v < cfg.V; ++v, ++idx) {
            Tensor after = model::forward(bank, noise, u, v);
            bool identical = true;
            for (std::int64_t i = 0; i < after.size(); ++i)
                identical &= (after[i] == before[idx][i]);
            if (u == 0)
                CHECK_FALSE(identical);
            else
                CHECK(identical);
        }
}

static double render_mse_objective(model::KernelBank& bank, const Tensor& noise,
                                   const Tensor& target, int u, int v) {
    Tensor out = model::forward(bank, noise, u, v);
    return num::mse(out, target);
}

static void render_mse_backward(model::KernelBank& bank, const Tensor& noise,
                                const Tensor& target, int u, int v) {
    for (auto& ref : model::bank_params(bank))
        if (ref.tensor->requires_grad) ref.tensor->zero_grad();
    model::ForwardTrace trace;
    Tensor out = model::forward(bank, noise, u, v, trace);
    out.requires_grad = true;
    num::mse_backward(out, target, 1.0);
    Tensor grad_out(out.shape(), std::move(out.grad));
    model::backward(bank, noise, trace, grad_out);
}

TEST_CASE("gradient check: full graph") {
    model::NetworkConfig cfg = tiny_config();
    model::KernelBank bank = model::init_bank(cfg);
    Tensor noise = model::make_noise(cfg);
    SplitMix64 rng(43);
    Tensor target = lfkm::test::random_tensor({3, cfg.X, cfg.Y}, rng, 0.1, 0.9);
    for (auto& ref : model::bank_params(bank)) ref.tensor->requires_grad = true;

    std::vector<Tensor*> inputs = {
        &bank.bases,
        &bank.layers[0].desc,
        &bank.layers[0].mod_u[0],
        &bank.layers[0].mod_v[1],
        &bank.layers[0].bias_u[0],
        &bank.layers[0].bias_v[1],
        &bank.layers[2].desc,
        &bank.layers[2].gamma,
        &bank.layers[2].beta,
        &bank.layers[4].mod_u[0],
        &bank.decoder_kernel,
        &bank.decoder_bias,
    };

    lfkm::test::GradProblem prob;
    prob.objective = [&] { return render_mse_objective(bank, noise, target, 0, 1); };
    prob.backward = [&] { render_mse_backward(bank, noise, target, 0, 1); };
    double err = lfkm::test::finite_diff_max_rel_error(prob, inputs, 1e-4, rng, 6);
    CHECK(err < 1e-3);
}

TEST_CASE("gradient check: per-view modulators and dense kernels") {
    model::NetworkConfig cfg = tiny_config();
    cfg.allocate_modulators = false;
    cfg.decompose_kernels = false;
    cfg.c_m = 3;
    model::KernelBank bank = model::init_bank(cfg);
    Tensor noise = model::make_noise(cfg);
    SplitMix64 rng(44);
    Tensor target = lfkm::test::random_tensor({3, cfg.X, cfg.Y}, rng, 0.1, 0.9);
    for (auto& ref : model::bank_params(bank)) ref.tensor->requires_grad = true;

    const int view = 1 * cfg.V + 0;
    std::vector<Tensor*> inputs = {
        &bank.layers[0].desc,
        &bank.layers[1].mod_uv[view],
        &bank.layers[1].bias_uv[view],
        &bank.layers[4].gamma,
        &bank.decoder_kernel,
    };

    lfkm::test::GradProblem prob;
    prob.objective = [&] { return render_mse_objective(bank, noise, target, 1, 0); };
    prob.backward = [&] { render_mse_backward(bank, noise, target, 1, 0); };
    double err = lfkm::test::finite_diff_max_rel_error(prob, inputs, 1e-4, rng, 6);
    CHECK(err < 1e-3);
}

TEST_CASE("gradient check: softmax output and 3x3 decoder") {
    model::NetworkConfig cfg = tiny_config();
    cfg.output_activation = model::OutputAct::Softmax;
    cfg.decoder_k3 = true;
    model::KernelBank bank = model::init_bank(cfg);
    Tensor noise = model::make_noise(cfg);
    SplitMix64 rng(45);
    Tensor target = lfkm::test::random_tensor({3, cfg.X, cfg.Y}, rng, 0.1, 0.9);
    for (auto& ref : model::bank_params(bank)) ref.tensor->requires_grad = true;

    std::vector<Tensor*> inputs = {
        &bank.bases,
        &bank.layers[3].desc,
        &bank.decoder_kernel,
        &bank.decoder_bias,
    };

    lfkm::test::GradProblem prob;
    prob.objective = [&] { return render_mse_objective(bank, noise, target, 1, 1); };
    prob.backward = [&] { render_mse_backward(bank, noise, target, 1, 1); };
    double err = lfkm::test::finite_diff_max_rel_error(prob, inputs, 1e-4, rng, 6);
    CHECK(err < 1e-3);
}

TEST_CASE("forward rejects out-of-range views") {
    model::NetworkConfig cfg = tiny_config();
    model::KernelBank bank = model::init_bank(cfg);
    Tensor noise = model::make_noise(cfg);
    CHECK_THROWS(model::forward(bank, noise, cfg.U, 0));
    CHECK_THROWS(model::forward(bank, noise, 0, cfg.V));
}

TEST_CASE("config validation") {
    model::NetworkConfig cfg = tiny_config();
    cfg.c_m = 3;  // odd halves cannot split across directions
    CHECK_THROWS(cfg.validate());
    cfg = tiny_config();
    cfg.r = 10;  // r > k^2
    CHECK_THROWS(cfg.validate());
    cfg = tiny_config();
    cfg.n = 70000;
    CHECK_THROWS(cfg.validate());
    cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("match_c_d finds the budget-matched width") {
    model::NetworkConfig cfg = tiny_config();
    cfg.c_d = 16;
    std::int64_t target = model::param_count(cfg).total;
    CHECK(model::match_c_d(cfg, target) == 16);

    cfg.c_d = 4;
    std::int64_t small = model::param_count(cfg).total;
    int narrow = model::match_c_d(cfg, small);
    int wide = model::match_c_d(cfg, target);
    CHECK(narrow == 4);
    CHECK(wide > narrow);
}
