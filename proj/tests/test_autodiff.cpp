#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>

#include "scma/kernels.hpp"
#include "scma/nn.hpp"
#include "scma/tensor.hpp"
#include "support/kernel_cases.hpp"

using namespace scma;
using scma::testing::random_tensor;

TEST_CASE("forward kernels on trivial inputs") {
    Tensor a({1, 1}, {3.0}), b({1, 1}, {2.0});
    CHECK(matmul(a, b).item() == 6.0);

    Tensor r = relu(Tensor({3}, {-1.0, 0.0, 2.0}));
    CHECK(r[0] == 0.0);
    CHECK(r[1] == 0.0);
    CHECK(r[2] == 2.0);

    std::mt19937_64 rng(7);
    Tensor img = random_tensor({2, 3, 5, 4}, rng, 0, 1, false);
    // Identity 1x1 kernel per channel.
    Tensor w = Tensor::zeros({3, 3, 1, 1});
    for (std::size_t c = 0; c < 3; ++c) w.mutable_data()[c * 3 + c] = 1.0;
    Tensor out = conv2d(img, w, 0);
    CHECK(out.shape() == img.shape());
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(out[i] == img[i]);
}

TEST_CASE("conv2d zero padding keeps spatial size and matches a direct sum") {
    Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor y = conv2d(x, w, 1);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    CHECK(y[0] == 1 + 2 + 4 + 5);
    CHECK(y[4] == 45);
    CHECK(y[8] == 5 + 6 + 8 + 9);
}

TEST_CASE("backward of x^2 at 3 gives 6 and accumulates until zero_grad") {
    Tensor x = Tensor::scalar(3.0, true);
    Tensor loss = square(x);
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(6.0));
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(12.0));
    x.zero_grad();
    backward(square(x));
    CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("backward rejects non-scalar losses") {
    Tensor x({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(square(x)), ShapeError);
}

TEST_CASE("shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({3, 2});
    try {
        add(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[3,2]") != std::string::npos);
    }
    CHECK_THROWS_AS(matmul(a, a), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
}

TEST_CASE("non-finite values are rejected") {
    CHECK_THROWS_AS(Tensor({1}, {std::nan("")}), NonFiniteError);
    CHECK_THROWS_AS(log(Tensor({1}, {0.0})), NonFiniteError);
    Tensor leaf({2}, {1.0, 2.0}, true);
    leaf.mutable_data()[1] = INFINITY;
    CHECK_THROWS_AS(relu(leaf), NonFiniteError);
}

TEST_CASE("every kernel matches central finite differences over 20 seeds") {
    for (const auto& c : scma::testing::kernel_grad_cases()) {
        double worst = 0.0;
        for (std::uint64_t seed = 1; seed <= 20; ++seed) worst = std::max(worst, c.relative_error(seed));
        INFO(c.name << " worst relative error " << worst);
        CHECK(worst <= 1e-4);
    }
}

TEST_CASE("two-layer compositions obey the chain rule end to end") {
    auto cases = scma::testing::composition_cases();
    REQUIRE(cases.size() >= 5);
    for (const auto& c : cases) {
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            INFO(c.name << " seed " << seed);
            CHECK(c.relative_error(seed) <= 1e-4);
        }
    }
}

TEST_CASE("backward is bit-deterministic") {
    auto run = [] {
        std::mt19937_64 rng(42);
        Tensor x = random_tensor({4, 2, 6, 6}, rng);
        Tensor w = random_tensor({3, 2, 3, 3}, rng);
        Tensor v = random_tensor({108, 5}, rng);
        Tensor h = reshape(tanh(conv2d(x, w, 1)), {4, 108});
        backward(sum(softplus(matmul(h, v))));
        std::vector<double> g(w.grad().begin(), w.grad().end());
        g.insert(g.end(), x.grad().begin(), x.grad().end());
        return g;
    };
    CHECK(run() == run());
}

TEST_CASE("gaussian_nll closed forms") {
    const double c = std::log(std::sqrt(2.0 * std::numbers::pi));
    Tensor x({4}, {0.1, 0.2, 0.3, 0.4});
    CHECK(gaussian_nll(x, x, 1.0).item() == doctest::Approx(4 * c));
    CHECK(c == doctest::Approx(0.9189385));
    Tensor m({4}, {-0.9, -0.8, -0.7, -0.6});
    CHECK(gaussian_nll(x, m, 1.0).item() == doctest::Approx(5.6757541));
    CHECK_THROWS_AS(gaussian_nll(x, Tensor::zeros({3}), 1.0), ShapeError);
}

TEST_CASE("gaussian_kl of identical standard normals has zero value and zero gradients") {
    Tensor mq = Tensor::zeros({3}, true), sq = Tensor::full({3}, 1.0, true);
    Tensor mp = Tensor::zeros({3}, true), sp = Tensor::full({3}, 1.0, true);
    Tensor kl = sum(gaussian_kl(mq, sq, mp, sp));
    CHECK(kl.item() == doctest::Approx(0.0));
    backward(kl);
    for (const auto& t : {mq, sq, mp, sp})
        for (double g : t.grad()) CHECK(g == doctest::Approx(0.0));
    Tensor shifted = gaussian_kl(Tensor({1}, {2.0}), Tensor({1}, {1.0}), Tensor({1}, {0.0}), Tensor({1}, {1.0}));
    CHECK(shifted.item() == doctest::Approx(2.0));
}

TEST_CASE("tape lists every node after its inputs, once") {
    std::mt19937_64 rng(3);
    Tensor a = random_tensor({2, 2}, rng), b = random_tensor({2, 2}, rng);
    Tensor shared = mul(a, b);
    Tensor loss = sum(add(shared, tanh(shared)));
    Tape tape = Tape::record(loss);
    const auto& nodes = tape.nodes();
    CHECK(nodes.back() == loss.node().get());
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        CHECK(tape.index_of(nodes[i]) == i);
        for (const auto& p : nodes[i]->parents)
            if (p->requires_grad) CHECK(tape.index_of(p.get()) < i);
    }
    // a, b, mul, tanh, add, sum
    CHECK(tape.size() == 6);
}

TEST_CASE("parallel kernels are bit-identical to the serial reference") {
    std::mt19937_64 rng(11);
    const std::size_t m = 37, k = 29, n = 23;
    Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng), gc = random_tensor({m, n}, rng);
    std::vector<double> c1(m * n), c2(m * n), ga1(m * k, 0.0), ga2(m * k, 0.0), gb1(k * n, 0.0), gb2(k * n, 0.0);
    kernels::serial::matmul(a.data(), b.data(), c1, m, k, n);
    kernels::matmul(a.data(), b.data(), c2, m, k, n);
    kernels::serial::matmul_grad_a(gc.data(), b.data(), ga1, m, k, n);
    kernels::matmul_grad_a(gc.data(), b.data(), ga2, m, k, n);
    kernels::serial::matmul_grad_b(a.data(), gc.data(), gb1, m, k, n);
    kernels::matmul_grad_b(a.data(), gc.data(), gb2, m, k, n);
    CHECK(c1 == c2);
    CHECK(ga1 == ga2);
    CHECK(gb1 == gb2);

    kernels::ConvDims d{3, 4, 5, 9, 7, 3, 1};
    Tensor x = random_tensor({3, 4, 9, 7}, rng), w = random_tensor({5, 4, 3, 3}, rng);
    Tensor gy = random_tensor({3, 5, 9, 7}, rng);
    std::vector<double> y1(gy.size()), y2(gy.size()), gx1(x.size(), 0.0), gx2(x.size(), 0.0), gw1(w.size(), 0.0),
        gw2(w.size(), 0.0);
    kernels::serial::conv2d(x.data(), w.data(), y1, d);
    kernels::conv2d(x.data(), w.data(), y2, d);
    kernels::serial::conv2d_grad_x(gy.data(), w.data(), gx1, d);
    kernels::conv2d_grad_x(gy.data(), w.data(), gx2, d);
    kernels::serial::conv2d_grad_w(x.data(), gy.data(), gw1, d);
    kernels::conv2d_grad_w(x.data(), gy.data(), gw2, d);
    CHECK(y1 == y2);
    CHECK(gx1 == gx2);
    CHECK(gw1 == gw2);
}

TEST_CASE("adam minimises a quadratic, zeroes gradients, and refuses frozen sets") {
    ParamSet params;
    params.add("x", Tensor({2}, {3.0, -2.0}));
    Adam opt({&params}, AdamConfig{.lr = 0.1});
    CHECK(opt.config().epsilon == 1e-7);
    for (int i = 0; i < 300; ++i) {
        backward(sum(square(params.get("x"))));
        opt.step();
        for (double g : params.get("x").grad()) CHECK(g == 0.0);
    }
    CHECK(std::abs(params.get("x")[0]) < 1e-2);
    params.freeze();
    CHECK_FALSE(params.get("x").requires_grad());
    CHECK_THROWS_AS(opt.step(), FrozenParamsError);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    std::mt19937_64 rng(5);
    ParamSet params;
    params.add("enc.conv.weight", random_tensor({2, 3, 3, 3}, rng, -1e3, 1e3));
    params.add("tiny", Tensor({1}, {5e-324}));
    params.add("neg_zero", Tensor({2, 1}, {-0.0, 1.0 / 3.0}));
    const auto bytes = encode_checkpoint(params);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "SCMA");
    ParamSet back = decode_checkpoint(bytes);
    CHECK(back.checksum() == params.checksum());
    CHECK(encode_checkpoint(back) == bytes);
    CHECK(std::signbit(back.get("neg_zero")[0]));

    auto path = std::filesystem::temp_directory_path() / "scma_test_ckpt.bin";
    save_checkpoint(path, params);
    CHECK(load_checkpoint(path).checksum() == params.checksum());
    std::filesystem::remove(path);

    auto truncated = bytes;
    truncated.resize(truncated.size() - 3);
    CHECK_THROWS_AS(decode_checkpoint(truncated), CheckpointError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad_magic), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt.bin"), CheckpointError);
}
