#include "mumimo/autodiff.hpp"

#include "doctest.h"
#include "test_util.hpp"

#include <cmath>
#include <filesystem>
#include <random>

using namespace mumimo;
using namespace mumimo::ad;

namespace {

Tensor rand_param(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(numel(s));
    for (double& x : v) x = u(rng);
    return Tensor::parameter(s, v);
}

// Compares backward() against central differences for every element of every
// input; the loss is sum(op(inputs) * fixed random weights).
double fd_check(const std::vector<Tensor>& inputs, const std::function<Tensor()>& op, Rng& rng, double h = 1e-6) {
    const Tensor probe = op();
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> wv(probe.numel());
    for (double& x : wv) x = u(rng);
    const Tensor w = Tensor::constant(probe.shape(), wv);
    auto loss = [&]() { return sum(mul(op(), w)); };

    for (Tensor t : inputs) t.zero_grad();
    backward(loss());
    double worst = 0;
    for (Tensor t : inputs) {
        for (std::size_t i = 0; i < t.numel(); ++i) {
            double& x = t.value()[i];
            const double fd = testutil::central_diff([&] { return loss().item(); }, x, h);
            worst = std::max(worst, testutil::rel_err(t.grad()[i], fd, 1e-6));
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("elementwise primitives pass finite differences") {
    Rng rng(1);
    const Tensor a = rand_param({2, 3}, rng), b = rand_param({2, 3}, rng);
    CHECK(fd_check({a, b}, [&] { return add(a, b); }, rng) < 1e-4);
    CHECK(fd_check({a, b}, [&] { return sub(a, b); }, rng) < 1e-4);
    CHECK(fd_check({a, b}, [&] { return mul(a, b); }, rng) < 1e-4);
    CHECK(fd_check({a}, [&] { return mul(a, a); }, rng) < 1e-4);
    CHECK(fd_check({a}, [&] { return scale(a, -2.5); }, rng) < 1e-4);
    CHECK(fd_check({a}, [&] { return softplus(a); }, rng) < 1e-4);
    CHECK(fd_check({a}, [&] { return sigmoid(a); }, rng) < 1e-4);
    CHECK(fd_check({a}, [&] { return tanh(a); }, rng) < 1e-4);
    // ReLU away from the kink.
    const Tensor c = Tensor::parameter({4}, {-0.7, -0.2, 0.3, 1.1});
    CHECK(fd_check({c}, [&] { return relu(c); }, rng) < 1e-4);
}

TEST_CASE("broadcast-free shape primitives pass finite differences") {
    Rng rng(2);
    const Tensor a = rand_param({2, 3, 4}, rng), b = rand_param({2, 1, 4}, rng);
    CHECK(fd_check({a, b}, [&] { return concat({a, b}, 1); }, rng) < 1e-4);
    CHECK(fd_check({a}, [&] { return slice(a, 2, 1, 3); }, rng) < 1e-4);
    CHECK(fd_check({a}, [&] { return reshape(a, {6, 4}); }, rng) < 1e-4);
    CHECK(fd_check({a}, [&] { return sum_axis(a, 1); }, rng) < 1e-4);
    CHECK(fd_check({a}, [&] { return sum_axis(a, 0); }, rng) < 1e-4);
    CHECK(fd_check({b}, [&] { return repeat_axis(b, 1, 5); }, rng) < 1e-4);
    CHECK(fd_check({a}, [&] { return sum(a); }, rng) < 1e-4);
    CHECK(fd_check({a}, [&] { return mean(a); }, rng) < 1e-4);
    const Tensor x = rand_param({2, 3, 4, 5}, rng);
    CHECK(fd_check({x}, [&] { return mean_hw(x); }, rng) < 1e-4);
}

TEST_CASE("conv2d and dense pass finite differences") {
    Rng rng(3);
    const Tensor x = rand_param({2, 3, 5, 6}, rng), w = rand_param({4, 3, 3, 3}, rng), b = rand_param({4}, rng);
    CHECK(fd_check({x, w, b}, [&] { return conv2d(x, w, b); }, rng) < 1e-4);
    const Tensor w13 = rand_param({2, 3, 1, 3}, rng);
    CHECK(fd_check({x, w13}, [&] { return conv2d(x, w13, Tensor()); }, rng) < 1e-4);
    const Tensor xd = rand_param({3, 5}, rng), wd = rand_param({2, 5}, rng), bd = rand_param({2}, rng);
    CHECK(fd_check({xd, wd, bd}, [&] { return dense(xd, wd, bd); }, rng) < 1e-4);
    CHECK_THROWS_AS(conv2d(x, rand_param({4, 3, 2, 3}, rng), b), std::invalid_argument);
    CHECK_THROWS_AS(conv2d(x, rand_param({4, 2, 3, 3}, rng), b), std::invalid_argument);
}

TEST_CASE("conv2d forward matches a direct loop") {
    Rng rng(4);
    const Tensor x = rand_param({1, 2, 4, 5}, rng), w = rand_param({3, 2, 3, 3}, rng), b = rand_param({3}, rng);
    const Tensor y = conv2d(x, w, b);
    REQUIRE(y.shape() == Shape{1, 3, 4, 5});
    double worst = 0;
    for (int o = 0; o < 3; ++o)
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 5; ++j) {
                double acc = b.value()[o];
                for (int c = 0; c < 2; ++c)
                    for (int di = -1; di <= 1; ++di)
                        for (int dj = -1; dj <= 1; ++dj) {
                            const int ii = i + di, jj = j + dj;
                            if (ii < 0 || ii >= 4 || jj < 0 || jj >= 5) continue;
                            acc += w.value()[((o * 2 + c) * 3 + di + 1) * 3 + dj + 1] * x.value()[(c * 4 + ii) * 5 + jj];
                        }
                worst = std::max(worst, std::abs(acc - y.value()[(o * 4 + i) * 5 + j]));
            }
    CHECK(worst < 1e-12);
}

TEST_CASE("binary cross-entropy with logits: value and gradient") {
    Rng rng(5);
    const Tensor l = rand_param({6}, rng, -4, 4);
    const Tensor t = Tensor::constant({6}, {0, 1, 1, 0, 1, 0});
    const Tensor w = Tensor::constant({6}, {1, 1, 0, 1, 2, 1});
    const Tensor loss = bce_with_logits(l, t, w);
    double want = 0, wsum = 0;
    for (int i = 0; i < 6; ++i) {
        const double p = 1 / (1 + std::exp(-l.value()[i]));
        want += w.value()[i] * -(t.value()[i] * std::log(p) + (1 - t.value()[i]) * std::log(1 - p));
        wsum += w.value()[i];
    }
    CHECK(loss.item() == doctest::Approx(want / wsum).epsilon(1e-12));
    CHECK(fd_check({l}, [&] { return bce_with_logits(l, t, w); }, rng) < 1e-4);
    CHECK(fd_check({l}, [&] { return bce_with_logits(l, t); }, rng) < 1e-4);
    // Large logits stay finite.
    const Tensor big = Tensor::constant({2}, {800, -800});
    CHECK(std::isfinite(bce_with_logits(big, Tensor::constant({2}, {0, 1})).item()));
}

TEST_CASE("custom op backward plugs into the graph") {
    Rng rng(6);
    const Tensor a = rand_param({3}, rng);
    auto cube = [&] {
        std::vector<double> v(3);
        for (int i = 0; i < 3; ++i) v[i] = std::pow(a.value()[i], 3);
        return custom({3}, v, {a}, [av = a.value()](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
            if (pg[0])
                for (int i = 0; i < 3; ++i) (*pg[0])[i] += g[i] * 3 * av[i] * av[i];
        });
    };
    CHECK(fd_check({a}, cube, rng) < 1e-4);
}

TEST_CASE("shared subexpressions accumulate gradients") {
    const Tensor a = Tensor::parameter({1}, {1.5});
    const Tensor b = mul(a, a);
    const Tensor loss = sum(add(b, mul(b, a)));  // a^2 + a^3
    backward(loss);
    CHECK(a.grad()[0] == doctest::Approx(2 * 1.5 + 3 * 1.5 * 1.5));
}

TEST_CASE("backward refuses to mix passes unless accumulating") {
    Tensor a = Tensor::parameter({1}, {2.0});
    backward(sum(mul(a, a)));
    CHECK(a.grad()[0] == doctest::Approx(4.0));
    CHECK_THROWS_AS(backward(sum(mul(a, a))), std::logic_error);
    backward(sum(mul(a, a)), true);
    CHECK(a.grad()[0] == doctest::Approx(8.0));
    a.zero_grad();
    backward(sum(a));
    CHECK(a.grad()[0] == doctest::Approx(1.0));
    CHECK_THROWS_AS(backward(Tensor::parameter({2}, {1.0, 2.0})), std::invalid_argument);
}

TEST_CASE("deep chains do not overflow the stack") {
    const Tensor a = Tensor::parameter({1}, {0.5});
    Tensor x = a;
    for (int i = 0; i < 100000; ++i) x = scale(x, 1.0);
    backward(sum(x));
    CHECK(a.grad()[0] == doctest::Approx(1.0));
}

TEST_CASE("Adam matches a hand-computed update") {
    Tensor p = Tensor::parameter({2}, {1.0, -1.0});
    Adam opt({p}, 0.1);
    const double g0[2] = {0.5, -2.0};
    double m[2] = {0, 0}, v[2] = {0, 0}, want[2] = {1.0, -1.0};
    for (int step = 1; step <= 3; ++step) {
        opt.zero_grad();
        p.grad().assign({g0[0] * step, g0[1] * step});
        REQUIRE(opt.step());
        for (int i = 0; i < 2; ++i) {
            const double g = g0[i] * step;
            m[i] = 0.9 * m[i] + 0.1 * g;
            v[i] = 0.999 * v[i] + 0.001 * g * g;
            const double mh = m[i] / (1 - std::pow(0.9, step)), vh = v[i] / (1 - std::pow(0.999, step));
            want[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
        }
    }
    CHECK(p.value()[0] == doctest::Approx(want[0]).epsilon(1e-12));
    CHECK(p.value()[1] == doctest::Approx(want[1]).epsilon(1e-12));
    CHECK(opt.step_count() == 3);
    opt.zero_grad();
    p.grad().assign({std::nan(""), 0.0});
    CHECK_FALSE(opt.step());
    CHECK(p.value()[0] == doctest::Approx(want[0]).epsilon(1e-12));
}

TEST_CASE("Adam minimizes a quadratic") {
    const Tensor p = Tensor::parameter({3}, {3.0, -2.0, 1.0});
    const Tensor target = Tensor::constant({3}, {0.5, 0.25, -1.0});
    Adam opt({p}, 0.05);
    for (int i = 0; i < 2000; ++i) {
        opt.zero_grad();
        const Tensor d = sub(p, target);
        backward(sum(mul(d, d)));
        opt.step();
    }
    for (int i = 0; i < 3; ++i) CHECK(p.value()[i] == doctest::Approx(target.value()[i]).epsilon(1e-3));
}

TEST_CASE("checkpoints round trip parameters and optimizer state") {
    const auto dir = std::filesystem::temp_directory_path() / "mumimo_test_ckpt";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "c.bin").string();
    Rng rng(7);
    Tensor a = rand_param({2, 3}, rng), b = rand_param({4}, rng);
    Adam opt({a, b}, 0.01);
    a.grad().assign(6, 0.1);
    b.grad().assign(4, -0.2);
    opt.step();
    save_checkpoint(path, {{"a", a}, {"b", b}}, &opt, {{"tag", 7}});

    Tensor a2 = Tensor::parameter({2, 3}, std::vector<double>(6, 0.0));
    Tensor b2 = Tensor::parameter({4}, std::vector<double>(4, 0.0));
    Adam opt2({a2, b2}, 0.01);
    const auto extra = load_checkpoint(path, {{"a", a2}, {"b", b2}}, &opt2);
    CHECK(extra["tag"] == 7);
    CHECK(a2.value() == a.value());
    CHECK(b2.value() == b.value());
    CHECK(opt2.step_count() == 1);
    CHECK(opt2.first_moments() == opt.first_moments());
    CHECK(opt2.second_moments() == opt.second_moments());

    Tensor wrong = Tensor::parameter({5}, std::vector<double>(5, 0.0));
    CHECK_THROWS(load_checkpoint(path, {{"a", a2}, {"b", wrong}}));
    CHECK_THROWS(load_checkpoint((dir / "missing.bin").string(), {{"a", a2}}));
}

TEST_CASE("scalar helpers") {
    CHECK(ad::softplus(0.0) == doctest::Approx(std::log(2.0)));
    CHECK(ad::softplus(800.0) == doctest::Approx(800.0));
    CHECK(ad::softplus(-800.0) >= 0.0);
    CHECK(ad::softplus(ad::softplus_inv(3.14159)) == doctest::Approx(3.14159).epsilon(1e-12));
    CHECK(ad::sigmoid(0.0) == doctest::Approx(0.5));
}
