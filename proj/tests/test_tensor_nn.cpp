#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <random>

#include "marrowcast/nn.hpp"
#include "marrowcast/tensor.hpp"

#include "helpers.hpp"

using namespace marrowcast;

namespace {

// <a, b> over flattened tensors, accumulated in double.
template <typename T>
double dot(const tensor4<T>& a, const tensor4<T>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        acc += static_cast<double>(a.data[i]) * static_cast<double>(b.data[i]);
    }
    return acc;
}

constexpr double fd_h = 1e-5;     // op-level probes run in double
constexpr double fd_floor = 1e-10;
constexpr double fd_tol = 1e-3;

} // namespace

TEST_CASE("conv2d matches the nested-loop reference exactly") {
    std::mt19937_64 eng(101);
    const int shapes[][5] = {
        // n, c_in, h, w, c_out — everything at or below 2x4x16x16
        {1, 1, 4, 4, 1}, {1, 2, 6, 5, 3}, {2, 3, 8, 8, 2},
        {2, 4, 16, 16, 4}, {1, 4, 16, 16, 1}, {2, 1, 3, 3, 2},
    };
    for (const auto& s : shapes) {
        const auto x = testutil::random_tensor<float>(s[0], s[1], s[2], s[3], eng);
        const auto k = testutil::random_tensor<float>(s[4], s[1], 3, 3, eng, 0.5);
        std::vector<float> bias(static_cast<std::size_t>(s[4]));
        std::normal_distribution<double> g(0.0, 0.3);
        for (float& b : bias) b = static_cast<float>(g(eng));

        const tensor4f got = conv2d(x, k, bias);
        const tensor4f want = testutil::conv2d_reference(x, k, bias);
        REQUIRE(got.same_shape(want));
        REQUIRE(got.data == want.data); // bit-exact, not approximate
    }
}

TEST_CASE("conv2d matches the reference in double precision too") {
    std::mt19937_64 eng(102);
    const auto x = testutil::random_tensor<double>(2, 3, 12, 10, eng);
    const auto k = testutil::random_tensor<double>(4, 3, 3, 3, eng);
    std::vector<double> bias{0.1, -0.2, 0.05, 0.7};
    REQUIRE(conv2d(x, k, bias).data == testutil::conv2d_reference(x, k, bias).data);
}

TEST_CASE("conv2d validates kernel and bias shapes") {
    const tensor4f x(1, 2, 8, 8);
    REQUIRE_THROWS_AS(conv2d(x, tensor4f(1, 2, 5, 5), std::vector<float>{0.f}), shape_error);
    REQUIRE_THROWS_AS(conv2d(x, tensor4f(1, 3, 3, 3), std::vector<float>{0.f}), shape_error);
    REQUIRE_THROWS_AS(conv2d(x, tensor4f(2, 2, 3, 3), std::vector<float>{0.f}), shape_error);
    REQUIRE_THROWS_AS(
        conv2d_backward(x, tensor4f(2, 2, 3, 3), tensor4f(1, 3, 8, 8)), shape_error);
    REQUIRE_THROWS_AS(
        conv2d_backward(x, tensor4f(2, 2, 3, 3), tensor4f(1, 2, 8, 7)), shape_error);
}

TEST_CASE("conv2d gradients match finite differences") {
    std::mt19937_64 eng(201);
    auto x = testutil::random_tensor<double>(2, 3, 8, 8, eng);
    auto k = testutil::random_tensor<double>(4, 3, 3, 3, eng, 0.5);
    std::vector<double> bias{0.2, -0.1, 0.0, 0.4};
    const auto proj = testutil::random_tensor<double>(2, 4, 8, 8, eng);

    const auto loss = [&] { return dot(conv2d(x, k, bias), proj); };
    const conv2d_grads<double> g = conv2d_backward(x, k, proj);

    auto st = testutil::check_gradient(x.data, g.gx.data, fd_h, fd_floor, 16, eng, loss);
    INFO("input grad max rel " << st.max_rel);
    REQUIRE(st.max_rel < fd_tol);

    st = testutil::check_gradient(k.data, g.gk.data, fd_h, fd_floor, 16, eng, loss);
    INFO("kernel grad max rel " << st.max_rel);
    REQUIRE(st.max_rel < fd_tol);

    st = testutil::check_gradient(bias, g.gb, fd_h, fd_floor, 4, eng, loss);
    INFO("bias grad max rel " << st.max_rel);
    REQUIRE(st.max_rel < fd_tol);
}

TEST_CASE("elu matches its closed form") {
    tensor4d x(1, 1, 1, 4);
    x.data = {-1.0, 0.0, 2.5, -3.0};
    const tensor4d y = elu(x);
    REQUIRE(y.data[0] == Catch::Approx(std::exp(-1.0) - 1.0).margin(1e-6));
    REQUIRE(y.data[1] == 0.0);
    REQUIRE(y.data[2] == 2.5); // identity on the positive side
    REQUIRE(y.data[3] == Catch::Approx(std::exp(-3.0) - 1.0).margin(1e-9));
}

TEST_CASE("elu gradient matches finite differences") {
    std::mt19937_64 eng(202);
    auto x = testutil::random_tensor<double>(2, 2, 6, 6, eng);
    // keep probes away from the kink at zero
    for (double& v : x.data) v += (v >= 0.0 ? 0.15 : -0.15);
    const auto proj = testutil::random_tensor<double>(2, 2, 6, 6, eng);

    const auto loss = [&] { return dot(elu(x), proj); };
    const tensor4d g = elu_backward(elu(x), proj);
    const auto st = testutil::check_gradient(x.data, g.data, fd_h, fd_floor, 12, eng, loss);
    REQUIRE(st.max_rel < fd_tol);
    REQUIRE_THROWS_AS(elu_backward(tensor4d(1, 1, 2, 2), tensor4d(1, 1, 2, 3)), shape_error);
}

TEST_CASE("sigmoid is symmetric, saturating, and differentiable") {
    tensor4d x(1, 1, 1, 5);
    x.data = {0.0, 3.0, -3.0, 200.0, -200.0};
    const tensor4d y = sigmoid(x);
    REQUIRE(y.data[0] == 0.5);
    REQUIRE(y.data[1] + y.data[2] == Catch::Approx(1.0).margin(1e-15));
    REQUIRE(y.data[3] == 1.0);            // saturates cleanly, no overflow
    REQUIRE(y.data[4] >= 0.0);            // exp(-200) underflows to ~0
    REQUIRE(y.data[4] < 1e-80);

    std::mt19937_64 eng(203);
    auto xr = testutil::random_tensor<double>(2, 2, 5, 5, eng, 1.5);
    const auto proj = testutil::random_tensor<double>(2, 2, 5, 5, eng);
    const auto loss = [&] { return dot(sigmoid(xr), proj); };
    const tensor4d g = sigmoid_backward(sigmoid(xr), proj);
    const auto st = testutil::check_gradient(xr.data, g.data, fd_h, fd_floor, 12, eng, loss);
    REQUIRE(st.max_rel < fd_tol);
}

TEST_CASE("max_pool2 picks block maxima and prefers the first in scan order") {
    tensor4f x(1, 1, 4, 4);
    x.data = {1, 2, 0, 0,   //
              3, 4, 0, 0,   // top-left block max = 4 at (1,1)
              7, 7, 5, 6,   // bottom-left all-tie on 7s -> first in scan order
              7, 7, 8, 5};
    const auto r = max_pool2(x);
    REQUIRE(r.y.h == 2);
    REQUIRE(r.y.w == 2);
    REQUIRE(r.y.at(0, 0, 0, 0) == 4.0f);
    REQUIRE(r.y.at(0, 0, 0, 1) == 0.0f);
    REQUIRE(r.y.at(0, 0, 1, 0) == 7.0f);
    REQUIRE(r.y.at(0, 0, 1, 1) == 8.0f);
    REQUIRE(r.argmax[0] == x.index(0, 0, 1, 1));
    REQUIRE(r.argmax[1] == x.index(0, 0, 0, 2)); // all-zero block: top-left wins
    REQUIRE(r.argmax[2] == x.index(0, 0, 2, 0)); // tie: first in scan order
    REQUIRE(r.argmax[3] == x.index(0, 0, 3, 2));

    REQUIRE_THROWS_AS(max_pool2(tensor4f(1, 1, 5, 4)), shape_error);
    REQUIRE_THROWS_AS(max_pool2(tensor4f(1, 1, 4, 7)), shape_error);
}

TEST_CASE("max_pool2 gradient matches finite differences") {
    std::mt19937_64 eng(204);
    // integer-separated values so a +-h probe can never flip an argmax
    tensor4d x(1, 2, 6, 6);
    std::vector<int> order(x.data.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), eng);
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] = 0.01 * order[i];

    const auto proj = testutil::random_tensor<double>(1, 2, 3, 3, eng);
    const auto loss = [&] { return dot(max_pool2(x).y, proj); };
    const auto r = max_pool2(x);
    const tensor4d g = max_pool2_backward(x, r.argmax, proj);
    const auto st = testutil::check_gradient(x.data, g.data, fd_h, fd_floor, 12, eng, loss);
    REQUIRE(st.max_rel < fd_tol);
}

TEST_CASE("upsample2 repeats pixels and its backward is the exact adjoint") {
    tensor4f x(1, 1, 2, 2);
    x.data = {1, 2, 3, 4};
    const tensor4f y = upsample2(x);
    REQUIRE(y.data == std::vector<float>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});

    std::mt19937_64 eng(205);
    const auto a = testutil::random_tensor<double>(2, 3, 4, 5, eng);
    const auto b = testutil::random_tensor<double>(2, 3, 8, 10, eng);
    // adjoint identity: <up(a), b> == <a, up_backward(b)>
    REQUIRE(dot(upsample2(a), b) == Catch::Approx(dot(a, upsample2_backward(b))).epsilon(1e-12));
    REQUIRE_THROWS_AS(upsample2_backward(tensor4d(1, 1, 5, 4)), shape_error);
}

TEST_CASE("concat_channels stacks a then b and splits back losslessly") {
    std::mt19937_64 eng(206);
    const auto a = testutil::random_tensor<float>(2, 3, 4, 4, eng);
    const auto b = testutil::random_tensor<float>(2, 2, 4, 4, eng);
    const tensor4f y = concat_channels(a, b);
    REQUIRE(y.c == 5);
    for (int ni = 0; ni < 2; ++ni) {
        for (int yy = 0; yy < 4; ++yy) {
            for (int xx = 0; xx < 4; ++xx) {
                for (int ci = 0; ci < 3; ++ci) REQUIRE(y.at(ni, ci, yy, xx) == a.at(ni, ci, yy, xx));
                for (int ci = 0; ci < 2; ++ci)
                    REQUIRE(y.at(ni, 3 + ci, yy, xx) == b.at(ni, ci, yy, xx));
            }
        }
    }
    const auto [ga, gb] = concat_channels_backward(3, 2, y);
    REQUIRE(ga.data == a.data);
    REQUIRE(gb.data == b.data);

    REQUIRE_THROWS_AS(concat_channels(a, tensor4f(2, 2, 4, 5)), shape_error);
    REQUIRE_THROWS_AS(concat_channels_backward(3, 3, y), shape_error);
}

TEST_CASE("binary cross-entropy of a 0.5 prediction is ln 2") {
    tensor4d p(1, 1, 2, 2);
    tensor4d y(1, 1, 2, 2);
    p.data = {0.5, 0.5, 0.5, 0.5};
    y.data = {1.0, 0.0, 1.0, 0.0};
    REQUIRE(bce_loss(p, y).value == Catch::Approx(std::log(2.0)).margin(1e-6));

    // single-element closed forms
    tensor4d p1(1, 1, 1, 1), y1(1, 1, 1, 1);
    p1.data = {0.8};
    y1.data = {1.0};
    const auto r = bce_loss(p1, y1);
    REQUIRE(r.value == Catch::Approx(-std::log(0.8)).margin(1e-12));
    REQUIRE(r.grad.data[0] == Catch::Approx(-1.0 / 0.8).margin(1e-12));
}

TEST_CASE("weighted BCE with unit weight is bitwise the plain BCE") {
    std::mt19937_64 eng(207);
    tensor4d p(2, 1, 8, 8), y(2, 1, 8, 8);
    std::uniform_real_distribution<double> up(0.01, 0.99);
    std::bernoulli_distribution uy(0.3);
    for (auto& v : p.data) v = up(eng);
    for (auto& v : y.data) v = uy(eng) ? 1.0 : 0.0;
    const auto a = bce_loss(p, y);
    const auto b = weighted_bce_loss(p, y, 1.0);
    REQUIRE(a.value == b.value);
    REQUIRE(a.grad.data == b.grad.data);
}

TEST_CASE("weighted BCE scales only the positive term") {
    tensor4d p(1, 1, 1, 2), y(1, 1, 1, 2);
    p.data = {0.6, 0.3};
    y.data = {1.0, 0.0};
    const double w = 4.0;
    const auto r = weighted_bce_loss(p, y, w);
    REQUIRE(r.value == Catch::Approx((-w * std::log(0.6) - std::log(0.7)) / 2.0).margin(1e-12));
    REQUIRE(r.grad.data[0] == Catch::Approx(-(w / 0.6) / 2.0).margin(1e-12));
    REQUIRE(r.grad.data[1] == Catch::Approx((1.0 / 0.7) / 2.0).margin(1e-12));
}

TEST_CASE("loss gradients match finite differences") {
    std::mt19937_64 eng(208);
    tensor4d p(2, 1, 6, 6), y(2, 1, 6, 6);
    std::uniform_real_distribution<double> up(0.05, 0.95);
    std::bernoulli_distribution uy(0.4);
    for (auto& v : p.data) v = up(eng);
    for (auto& v : y.data) v = uy(eng) ? 1.0 : 0.0;

    for (const double w : {1.0, 3.7}) {
        const auto loss = [&] { return weighted_bce_loss(p, y, w).value; };
        const tensor4d g = weighted_bce_loss(p, y, w).grad;
        auto pd = p.data;
        const auto st = testutil::check_gradient(p.data, g.data, fd_h, fd_floor, 12, eng, loss);
        INFO("w_pos " << w << " max rel " << st.max_rel);
        REQUIRE(st.max_rel < fd_tol);
        REQUIRE(p.data == pd); // probes must restore the input
    }
}

TEST_CASE("loss clamps extreme predictions with zero gradient at the rails") {
    tensor4d p(1, 1, 1, 3), y(1, 1, 1, 3);
    p.data = {0.0, 1.0, 0.5};
    y.data = {1.0, 0.0, 1.0};
    const auto r = bce_loss(p, y);
    REQUIRE(std::isfinite(r.value));
    REQUIRE(r.value > 0.0);
    REQUIRE(r.grad.data[0] == 0.0); // clamped coordinates do not backpropagate
    REQUIRE(r.grad.data[1] == 0.0);
    REQUIRE(r.grad.data[2] != 0.0);
}

TEST_CASE("loss validates its inputs") {
    const tensor4d p(1, 1, 2, 2), y1(1, 1, 2, 3);
    tensor4d y(1, 1, 2, 2);
    REQUIRE_THROWS_AS(bce_loss(p, y1), shape_error);
    REQUIRE_THROWS_AS(weighted_bce_loss(p, y, -1.0), config_error);
    REQUIRE_THROWS_AS(
        weighted_bce_loss(p, y, std::numeric_limits<double>::quiet_NaN()), config_error);
    REQUIRE_THROWS_AS(bce_loss(tensor4d(), tensor4d()), degenerate_input_error);
}

TEST_CASE("a single Adam step matches the hand-computed update") {
    std::vector<double> params{1.0, -2.0, 0.25};
    const std::vector<double> grads{0.5, -0.25, 0.0};
    adam_state st;
    st.cfg.lr = 0.1;

    std::vector<double> expect(params);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double m = (1.0 - st.cfg.beta1) * grads[i];        // t = 1
        const double v = (1.0 - st.cfg.beta2) * grads[i] * grads[i];
        const double m_hat = m / (1.0 - st.cfg.beta1);
        const double v_hat = v / (1.0 - st.cfg.beta2);
        expect[i] -= st.cfg.lr * m_hat / (std::sqrt(v_hat) + st.cfg.eps);
    }

    adam_step(params, grads, st, "p");
    REQUIRE(st.t == 1);
    for (std::size_t i = 0; i < params.size(); ++i) {
        REQUIRE(params[i] == Catch::Approx(expect[i]).margin(1e-9));
    }
    // zero gradient with zero moments leaves the parameter untouched
    REQUIRE(params[2] == 0.25);
}

TEST_CASE("Adam accumulates moments across steps deterministically") {
    const std::vector<double> g1{0.3}, g2{-0.1};
    auto run = [&] {
        std::vector<double> p{1.0};
        adam_state st;
        st.cfg.lr = 0.05;
        adam_step(p, g1, st, "w");
        adam_step(p, g2, st, "w");
        return std::pair{p[0], st.t};
    };
    const auto a = run();
    const auto b = run();
    REQUIRE(a.first == b.first);
    REQUIRE(a.second == 2);

    // hand-rolled two-step reference
    double m = 0, v = 0, p = 1.0;
    const adam_config c{.lr = 0.05};
    for (int t = 1; t <= 2; ++t) {
        const double g = t == 1 ? g1[0] : g2[0];
        m = c.beta1 * m + (1 - c.beta1) * g;
        v = c.beta2 * v + (1 - c.beta2) * g * g;
        p -= c.lr * (m / (1 - std::pow(c.beta1, t))) /
             (std::sqrt(v / (1 - std::pow(c.beta2, t))) + c.eps);
    }
    REQUIRE(a.first == Catch::Approx(p).margin(1e-12));
}

TEST_CASE("Adam rejects bad gradients and mismatched state") {
    std::vector<double> p{1.0, 2.0};
    adam_state st;
    REQUIRE_THROWS_MATCHES(
        adam_step(p, std::vector<double>{0.1, std::numeric_limits<double>::infinity()}, st,
                  "enc1.conv"),
        numeric_error, Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("enc1.conv")));

    adam_state st2;
    st2.reset(5);
    REQUIRE_THROWS_AS(adam_step(p, std::vector<double>{0.1, 0.2}, st2, "w"), shape_error);
    tensor4f tp(1, 1, 2, 2);
    REQUIRE_THROWS_AS(adam_step(tp, tensor4f(1, 1, 2, 3), st, "w"), shape_error);
}
