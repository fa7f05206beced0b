#include <catch2/catch_amalgamated.hpp>

#include "gradcheck.hpp"
#include "tucl/tensor.hpp"

using namespace tucl;

namespace {
Tensor random_tensor(Shape shape, uint64_t seed, bool requires_grad = true) {
    RngStream rng = RngStream::derive(seed, "test/random");
    std::vector<double> d(static_cast<size_t>(numel(shape)));
    for (double& v : d) v = 2.0 * rng.next_double() - 1.0; // uniform in [-1, 1]
    return Tensor::from_data(std::move(shape), std::move(d), requires_grad);
}

/// Fixed random projection to a scalar, so gradients are nontrivial.
Tensor to_scalar(const Tensor& t, uint64_t seed = 99) {
    Tensor w = random_tensor(t.shape(), seed, false);
    return sum(mul(t, w));
}
} // namespace

TEST_CASE("matmul identity and hand arithmetic") {
    Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor b = random_tensor({3, 2}, 7, false);
    Tensor out = matmul(eye, b);
    REQUIRE(out.data() == b.data());

    Tensor a = Tensor::from_data({1, 2}, {1, 2});
    Tensor c = Tensor::from_data({2, 1}, {3, 4});
    REQUIRE(matmul(a, c).item() == 11.0);
}

TEST_CASE("matmul rejects mismatched inner dims") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    REQUIRE_THROWS_MATCHES(matmul(a, b), shape_error,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("2x3") &&
                               Catch::Matchers::ContainsSubstring("4x2")));
}

TEST_CASE("matmul gradient vs finite differences") {
    Tensor a = random_tensor({5, 4}, 1);
    Tensor b = random_tensor({4, 3}, 2);
    auto res = gradcheck::check({a, b}, [&] { return to_scalar(matmul(a, b)); });
    REQUIRE(res.max_rel_err < 1e-3);
}

TEST_CASE("softmax closed forms") {
    Tensor zeros = Tensor::zeros({1, 4});
    Tensor uniform = softmax(zeros, 1);
    for (double v : uniform.data()) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(0.25, 1e-12));

    Tensor x = Tensor::from_data({1, 2}, {std::log(2.0), 0.0});
    auto y = softmax(x, 1).data();
    REQUIRE_THAT(y[0], Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
    REQUIRE_THAT(y[1], Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-12));
}

TEST_CASE("softmax rows sum to one and survive large magnitudes") {
    RngStream rng = RngStream::derive(3, "softmax");
    std::vector<double> d(40);
    for (double& v : d) v = 2e4 * (rng.next_double() - 0.5);
    Tensor x = Tensor::from_data({8, 5}, std::vector<double>(d.begin(), d.begin() + 40));
    Tensor y = softmax(x, 1);
    REQUIRE(all_finite(y));
    for (int r = 0; r < 8; ++r) {
        double s = 0.0;
        for (int c = 0; c < 5; ++c) s += y.data()[r * 5 + c];
        REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-6));
    }
}

TEST_CASE("softmax gradient vs finite differences") {
    Tensor x = random_tensor({3, 6}, 4);
    auto res = gradcheck::check({x}, [&] { return to_scalar(softmax(x, 1)); });
    REQUIRE(res.max_rel_err < 1e-3);
}

TEST_CASE("conv3d pointwise kernel is the identity") {
    Tensor x = random_tensor({1, 4, 4, 4}, 5, false);
    Tensor k = Tensor::from_data({1, 1, 1, 1, 1}, {1.0});
    REQUIRE(conv3d(x, k, 1, 0).data() == x.data());
}

TEST_CASE("conv3d all-ones kernel counts neighbors") {
    const double c = 0.75;
    Tensor x = Tensor::full({1, 5, 5, 5}, c);
    Tensor k = Tensor::full({1, 1, 3, 3, 3}, 1.0);
    Tensor y = conv3d(x, k, 1, 0); // valid convolution: every output is interior
    REQUIRE(y.shape() == Shape{1, 3, 3, 3});
    for (double v : y.data()) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(27.0 * c, 1e-12));
}

TEST_CASE("conv3d rejects channel mismatch and even kernels") {
    Tensor x = Tensor::zeros({2, 4, 4, 4});
    REQUIRE_THROWS_AS(conv3d(x, Tensor::zeros({3, 3, 3, 3, 3}), 1, 1), shape_error);
    REQUIRE_THROWS_AS(conv3d(x, Tensor::zeros({3, 2, 2, 2, 2}), 1, 0), param_error);
}

TEST_CASE("conv3d gradient vs finite differences") {
    Tensor x = random_tensor({2, 4, 4, 4}, 6);
    Tensor k = random_tensor({3, 2, 3, 3, 3}, 7);
    auto res = gradcheck::check({x, k}, [&] { return to_scalar(conv3d(x, k, 1, 1)); });
    REQUIRE(res.max_rel_err < 1e-3);
}

TEST_CASE("dropout identities") {
    Tensor x = random_tensor({10, 10}, 8, false);
    RngStream rng = RngStream::derive(1, "drop");
    REQUIRE(dropout(x, 0.0, rng, true).data() == x.data());
    REQUIRE(dropout(x, 0.7, rng, false).data() == x.data());
    REQUIRE_THROWS_AS(dropout(x, 1.0, rng, true), param_error);
}

TEST_CASE("dropout preserves the mean and repeats under the same seed") {
    Tensor ones = Tensor::full({100000}, 1.0);
    RngStream rng = RngStream::derive(42, "drop");
    Tensor y = dropout(ones, 0.5, rng, true);
    double mean = 0.0;
    for (double v : y.data()) mean += v;
    mean /= static_cast<double>(y.size());
    REQUIRE_THAT(mean, Catch::Matchers::WithinAbs(1.0, 0.02));

    RngStream r1 = RngStream::derive(42, "drop");
    RngStream r2 = RngStream::derive(42, "drop");
    REQUIRE(dropout(ones, 0.5, r1, true).data() == dropout(ones, 0.5, r2, true).data());
}

TEST_CASE("backward fills closed-form gradients") {
    Tensor x = random_tensor({7}, 9);
    backward(sum(x));
    for (double g : x.grad()) REQUIRE(g == 1.0);

    Tensor y = random_tensor({5}, 10);
    backward(sum(mul(y, y)));
    for (size_t i = 0; i < 5; ++i)
        REQUIRE_THAT(y.grad()[i], Catch::Matchers::WithinAbs(2.0 * y.data()[i], 1e-12));
}

TEST_CASE("backward accumulates across fan-out") {
    Tensor x = random_tensor({4}, 11);
    backward(sum(add(x, x)));
    for (double g : x.grad()) REQUIRE(g == 2.0);
}

TEST_CASE("backward rejects non-scalar losses") {
    Tensor x = random_tensor({3}, 12);
    REQUIRE_THROWS_AS(backward(add(x, x)), contract_error);
}

TEST_CASE("composed conv-softmax-dice pipeline gradient") {
    Tensor x = random_tensor({1, 4, 4, 4}, 13);
    Tensor k = random_tensor({2, 1, 3, 3, 3}, 14);
    Tensor target = random_tensor({2, 64}, 15, false);
    auto fn = [&] {
        Tensor h = conv3d(x, k, 1, 1);
        Tensor p = softmax(reshape(h, {2, 64}), 0);
        Tensor numer = add_scalar(scale(sum(mul(p, target)), 2.0), 1e-5);
        Tensor denom = add_scalar(add(sum(p), sum(target)), 1e-5);
        return sub(Tensor::scalar(1.0), div(numer, denom));
    };
    auto res = gradcheck::check({x, k}, fn);
    REQUIRE(res.max_rel_err < 1e-3);
}

TEST_CASE("layer norm gradient vs finite differences") {
    Tensor x = random_tensor({4, 8}, 16);
    Tensor g = random_tensor({8}, 17);
    Tensor b = random_tensor({8}, 18);
    auto res = gradcheck::check({x, g, b}, [&] { return to_scalar(layer_norm(x, g, b)); });
    REQUIRE(res.max_rel_err < 1e-3);
}

TEST_CASE("elementwise and shape op gradients") {
    Tensor x = random_tensor({6, 5}, 19);
    Tensor y = random_tensor({6, 5}, 20);
    auto fn = [&] {
        Tensor a = relu(add(x, y));
        Tensor b = sigmoid(sub(mul(x, y), transpose2d(transpose2d(x))));
        Tensor c = concat({slice_cols(a, 0, 3), slice_cols(b, 1, 4)}, 1);
        Tensor d = concat({slice_rows(c, 0, 2), slice_rows(c, 3, 6)}, 0);
        return add(to_scalar(d), mean(log_clamped(add_scalar(sigmoid(x), 0.5))));
    };
    auto res = gradcheck::check({x, y}, fn);
    REQUIRE(res.max_rel_err < 1e-3);
}

TEST_CASE("upsample, channel bias, row vector, broadcast gradients") {
    Tensor x = random_tensor({2, 2, 2, 2}, 21);
    Tensor b = random_tensor({2}, 22);
    Tensor m = random_tensor({3, 4}, 23);
    Tensor rv = random_tensor({4}, 24);
    Tensor s = random_tensor({1}, 25);
    auto fn = [&] {
        Tensor up = upsample_nearest2(add_channel_bias(x, b));
        Tensor rows = add_row_vector(m, rv);
        Tensor bc = broadcast_scalar(s, {3, 4});
        return add(to_scalar(up, 50), add(to_scalar(mul(rows, bc), 51), to_scalar(mean_rows(rows), 52)));
    };
    auto res = gradcheck::check({x, b, m, rv, s}, fn);
    REQUIRE(res.max_rel_err < 1e-3);
}

TEST_CASE("forward determinism: same seed, bit-identical tensors") {
    RngStream r1 = RngStream::derive(123, "init");
    RngStream r2 = RngStream::derive(123, "init");
    Tensor a = Tensor::randn({50}, r1);
    Tensor b = Tensor::randn({50}, r2);
    REQUIRE(a.data() == b.data());
}

TEST_CASE("adam step reduces a quadratic") {
    Tensor x = Tensor::from_data({3}, {1.0, -2.0, 3.0}, true);
    std::vector<Tensor> params{x};
    AdamState state;
    const double initial = sum(mul(x, x)).item();
    double last = initial;
    for (int i = 0; i < 200; ++i) {
        zero_grads(params);
        Tensor loss = sum(mul(x, x));
        backward(loss);
        adam_step(params, state, 0.05);
        last = loss.item();
    }
    REQUIRE(last < 1e-2);
    REQUIRE(last < initial);
}
