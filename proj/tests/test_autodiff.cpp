#include <catch2/catch_amalgamated.hpp>

#include "oneclip/autodiff.hpp"
#include "oneclip/random.hpp"
#include "support/oracle_harness.hpp"

using namespace oneclip;

namespace {

// Finite-difference check of d(scalar op graph)/d(input tensor).
void check_grad(const std::function<Ref(Tape&, Ref)>& build, Tensor input, double tol = 1e-6) {
    Tape tape;
    Ref x = tape.input(input);
    Ref y = build(tape, x);
    REQUIRE(tape.val(y).size() == 1);
    tape.backward(y);
    Tensor autograd = tape.grad(x);

    std::vector<double> flat(input.data(), input.data() + input.size());
    auto f = [&](const std::vector<double>& p) {
        Tensor t = Tensor::from_data(input.shape(), p);
        Tape tp(false);
        Ref xx = tp.constant(t);
        return tp.item(build(tp, xx));
    };
    auto fd = oracle::finite_diff_gradient(f, flat, 1e-4);
    for (std::size_t i = 0; i < flat.size(); ++i) {
        INFO("coordinate " << i);
        REQUIRE(oracle::rel_error(autograd[i], fd[i]) < tol);
    }
}

Tensor random_tensor(std::vector<int> shape, std::uint64_t seed, double scale = 1.0) {
    RandomSource rng(seed, 0);
    return Tensor::randn(std::move(shape), rng, scale);
}

}  // namespace

TEST_CASE("elementwise op gradients") {
    Tensor x = random_tensor({2, 3}, 1);
    check_grad([](Tape& t, Ref a) { return t.sum(t.mul(a, a)); }, x);
    check_grad([](Tape& t, Ref a) { return t.mean(t.leaky_relu(a, 0.2)); }, x);
    check_grad([](Tape& t, Ref a) { return t.sum(t.tanh_(a)); }, x);
    check_grad([](Tape& t, Ref a) { return t.sum(t.softplus(a)); }, x);
    check_grad([](Tape& t, Ref a) { return t.sum(t.exp_(t.scale(a, 0.3))); }, x);
    check_grad([](Tape& t, Ref a) { return t.norm2(a); }, x);
    check_grad([](Tape& t, Ref a) { return t.sum(t.abs_(a)); }, x, 1e-5);
}

TEST_CASE("linear gradient wrt input, weight, bias") {
    Tensor x = random_tensor({3, 4}, 2);
    Tensor w = random_tensor({5, 4}, 3);
    Tensor b = random_tensor({5}, 4);

    check_grad([&](Tape& t, Ref a) { return t.sum(t.linear(a, t.constant(w), t.constant(b))); }, x);
    check_grad([&](Tape& t, Ref a) { return t.sum(t.linear(t.constant(x), a, t.constant(b))); }, w);
    check_grad([&](Tape& t, Ref a) { return t.sum(t.tanh_(t.linear(t.constant(x), t.constant(w), a))); }, b);
}

TEST_CASE("conv2d matches naive convolution and gradients check out") {
    Tensor x = random_tensor({2, 3, 5, 5}, 5);
    Tensor w = random_tensor({4, 3, 3, 3}, 6);
    Tensor b = random_tensor({4}, 7);

    Tape tape(false);
    Ref y = tape.conv2d(tape.constant(x), tape.constant(w), tape.constant(b), 1);
    const Tensor& out = tape.val(y);
    REQUIRE(out.shape() == std::vector<int>{2, 4, 5, 5});
    for (int n = 0; n < 2; ++n)
        for (int o = 0; o < 4; ++o)
            for (int yy = 0; yy < 5; ++yy)
                for (int xx = 0; xx < 5; ++xx) {
                    double acc = b[static_cast<std::size_t>(o)];
                    for (int c = 0; c < 3; ++c)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                int sy = yy + ky - 1, sx = xx + kx - 1;
                                if (sy < 0 || sy >= 5 || sx < 0 || sx >= 5) continue;
                                acc += x.at(n, c, sy, sx) * w.at(o, c, ky, kx);
                            }
                    REQUIRE(out.at(n, o, yy, xx) == Catch::Approx(acc).margin(1e-12));
                }

    check_grad([&](Tape& t, Ref a) { return t.mean(t.square(t.conv2d(a, t.constant(w), t.constant(b), 1))); }, x);
    check_grad([&](Tape& t, Ref a) { return t.mean(t.square(t.conv2d(t.constant(x), a, t.constant(b), 1))); }, w);
    check_grad([&](Tape& t, Ref a) { return t.mean(t.square(t.conv2d(t.constant(x), t.constant(w), a, 1))); }, b);

    // 1x1 conv path
    Tensor w1 = random_tensor({2, 3, 1, 1}, 8);
    Tensor b1 = random_tensor({2}, 9);
    check_grad([&](Tape& t, Ref a) { return t.mean(t.square(t.conv2d(a, t.constant(w1), t.constant(b1), 0))); }, x);
}

TEST_CASE("spatial op gradients") {
    Tensor x = random_tensor({2, 2, 4, 4}, 10);
    check_grad([](Tape& t, Ref a) { return t.mean(t.square(t.upsample2(a))); }, x);
    check_grad([](Tape& t, Ref a) { return t.mean(t.square(t.avgpool2(a))); }, x);
    check_grad([](Tape& t, Ref a) { return t.mean(t.square(t.resize_bilinear(a, 7, 3))); }, x);
    check_grad([](Tape& t, Ref a) { return t.mean(t.square(t.crop_stack(a, {{0, 0}, {1, 2}}, 2))); }, x);

    Tensor grid({3, 3, 2});
    RandomSource rng(11, 0);
    for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = rng.uniform(-0.5, 4.0);
    check_grad([&](Tape& t, Ref a) { return t.mean(t.square(t.warp(a, grid))); }, x);
}

TEST_CASE("resize_bilinear identity when sizes match") {
    Tensor x = random_tensor({1, 3, 8, 8}, 12);
    Tape t(false);
    Ref y = t.resize_bilinear(t.constant(x), 8, 8);
    const Tensor& out = t.val(y);
    for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(out[i] == x[i]);
}

TEST_CASE("row and embedding op gradients") {
    Tensor x = random_tensor({3, 5}, 13);
    check_grad([](Tape& t, Ref a) { return t.mean(t.square(t.rows_normalize(a))); }, x);
    check_grad([](Tape& t, Ref a) { return t.mean(t.square(t.row_pixel_norm(a))); }, x);
    check_grad([](Tape& t, Ref a) { return t.sum(t.pair_dots(a, {{0, 1}, {0, 2}, {1, 2}})); }, x);
    check_grad([&](Tape& t, Ref a) { return t.row_dot(a, a, 0, 2); }, x);

    Tensor w = random_tensor({2, 4}, 14);
    check_grad([](Tape& t, Ref a) { return t.mean(t.square(t.broadcast_layers(a, 3))); }, w);
    Tensor wp = random_tensor({2, 3, 4}, 15);
    check_grad([](Tape& t, Ref a) { return t.mean(t.square(t.select_layer(a, 1))); }, wp);
}

TEST_CASE("structural op gradients") {
    Tensor x = random_tensor({2, 2, 2, 2}, 16);
    Tensor s = random_tensor({2, 2}, 17);
    check_grad([&](Tape& t, Ref a) { return t.mean(t.square(t.mul_channels(a, t.constant(s)))); }, x);
    check_grad([&](Tape& t, Ref a) { return t.mean(t.square(t.mul_channels(t.constant(x), a))); }, s);

    Tensor noise = random_tensor({2, 2}, 18);
    Tensor strength({1});
    strength[0] = 0.37;
    check_grad([&](Tape& t, Ref a) { return t.mean(t.square(t.add_noise(a, noise, t.constant(strength)))); }, x);
    check_grad([&](Tape& t, Ref a) { return t.mean(t.square(t.add_noise(t.constant(x), noise, a))); }, strength);

    check_grad([](Tape& t, Ref a) { return t.image_mean(a); }, Tensor::from_data({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}));
    check_grad([](Tape& t, Ref a) { return t.sum(t.reshape(a, {4, 1})); }, random_tensor({2, 2}, 19));
    check_grad([&](Tape& t, Ref a) { return t.sum(t.concat0({a, t.constant(x)})); }, x);
    check_grad([&](Tape& t, Ref a) {
        return t.sum(t.stack_scalars({t.mean(a), t.norm2(a), t.mse(a, t.constant(x))}));
    }, random_tensor({2, 2, 2, 2}, 20));
}

TEST_CASE("gradients accumulate into parameter stores") {
    ParamStore store;
    RandomSource rng(21, 0);
    store.add("w", Tensor::randn({3, 3}, rng));
    store.add("frozen", Tensor::randn({2}, rng), /*trainable=*/false);

    Tape tape;
    Ref w = tape.leaf(store.get("w"), true);
    Ref f = tape.leaf(store.get("frozen"), true);
    REQUIRE_FALSE(tape.requires_grad(f));
    Ref loss = tape.sum(tape.square(w));
    tape.backward(loss);

    const Tensor& g = store.get("w").grad;
    REQUIRE(g.size() == 9);
    for (std::size_t i = 0; i < 9; ++i)
        REQUIRE(g[i] == Catch::Approx(2.0 * store.get("w").value[i]).epsilon(1e-12));
    REQUIRE(store.get("frozen").grad.empty());
}

TEST_CASE("finite_diff_gradient oracle sanity") {
    auto quad = [](const std::vector<double>& p) {
        double s = 0.0;
        for (double v : p) s += v * v;
        return s;
    };
    std::vector<double> p{1.0, -2.0, 0.5};
    auto g = oracle::finite_diff_gradient(quad, p, 1e-4);
    for (std::size_t i = 0; i < p.size(); ++i) REQUIRE(std::fabs(g[i] - 2.0 * p[i]) < 1e-6);

    REQUIRE_THROWS_AS(oracle::finite_diff_gradient(quad, p, 0.0), ArgumentError);
}
