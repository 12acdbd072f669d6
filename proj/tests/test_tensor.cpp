#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sgpt/tensor.hpp"

using namespace sgpt;

namespace {

// Central-difference gradient of a scalar-valued function of one tensor
// element, used as the independent oracle for the per-op gradient
// transforms.
template <typename F>
double fd_grad(TensorT<double>& x, size_t idx, F loss, double h = 1e-6) {
    double w0 = x.data[idx];
    x.data[idx] = w0 + h;
    double up = loss();
    x.data[idx] = w0 - h;
    double down = loss();
    x.data[idx] = w0;
    return (up - down) / (2 * h);
}

TensorT<double> randn_d(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
    return TensorT<double>::randn(std::move(shape), rng, stddev);
}

}  // namespace

TEST_CASE("matmul: identity is bit-exact") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor out = matmul(a, Tensor::identity(2));
    CHECK(bits_equal(out, a));

    Rng rng(7);
    Tensor r = Tensor::randn({5, 9}, rng, 1.0);
    CHECK(bits_equal(matmul(r, Tensor::identity(9)), r));
}

TEST_CASE("matmul: hand example and zero case") {
    Tensor a = Tensor::from({1, 2}, {1, 2});
    Tensor b = Tensor::from({2, 1}, {3, 4});
    Tensor out = matmul(a, b);
    CHECK(out.shape == std::vector<int>{1, 1});
    CHECK(out.data[0] == doctest::Approx(11.0));

    Rng rng(3);
    Tensor any = Tensor::randn({3, 4}, rng, 2.0);
    Tensor z = matmul(Tensor::zeros({2, 3}), any);
    for (float v : z.data) CHECK(v == 0.0f);
}

TEST_CASE("matmul: shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 5});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2 x 3]"), std::invalid_argument);
    try {
        matmul(a, b);
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("[4 x 5]") != std::string::npos);
    }
}

TEST_CASE("matmul: deterministic across calls") {
    Rng rng(11);
    Tensor a = Tensor::randn({17, 33}, rng, 1.0);
    Tensor b = Tensor::randn({33, 21}, rng, 1.0);
    CHECK(bits_equal(matmul(a, b), matmul(a, b)));
}

TEST_CASE("softmax_rows: symmetry, saturation, hand value") {
    Tensor x = Tensor::from({1, 2}, {0, 0});
    Tensor y = softmax_rows(x);
    CHECK(y.data[0] == doctest::Approx(0.5));
    CHECK(y.data[1] == doctest::Approx(0.5));

    Tensor sat = softmax_rows(Tensor::from({1, 2}, {1000, 0}));
    CHECK(std::abs(sat.data[0] - 1.0) < 1e-12);
    CHECK(std::abs(sat.data[1]) < 1e-12);

    Tensor ln2 = softmax_rows(Tensor::from({1, 2}, {std::log(2.0f), 0}));
    CHECK(std::abs(ln2.data[0] - 2.0 / 3.0) < 1e-6);
    CHECK(std::abs(ln2.data[1] - 1.0 / 3.0) < 1e-6);
}

TEST_CASE("softmax_rows: rows sum to one on random input") {
    Rng rng(5);
    for (int trial = 0; trial < 25; ++trial) {
        int m = 1 + static_cast<int>(rng.below(6));
        int k = 1 + static_cast<int>(rng.below(12));
        Tensor x = Tensor::randn({m, k}, rng, 10.0);
        Tensor y = softmax_rows(x);
        for (int i = 0; i < m; ++i) {
            double sum = 0;
            for (int j = 0; j < k; ++j) {
                double v = y.at(i, j);
                CHECK(v >= 0.0);
                sum += v;
            }
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("rms_norm: hand value, zero row, zero gain") {
    Tensor x = Tensor::from({1, 2}, {3, 4});
    Tensor gain = Tensor::full({2}, 1.0f);
    Tensor y = rms_norm(x, gain, 0.0);
    double rms = std::sqrt(12.5);
    CHECK(std::abs(y.data[0] - 3.0 / rms) < 1e-3);
    CHECK(std::abs(y.data[1] - 4.0 / rms) < 1e-3);
    CHECK(y.data[0] == doctest::Approx(0.8485).epsilon(1e-3));
    CHECK(y.data[1] == doctest::Approx(1.1314).epsilon(1e-3));

    Tensor zeros = rms_norm(Tensor::zeros({1, 2}), gain, 1e-5);
    CHECK(zeros.data[0] == 0.0f);
    CHECK(zeros.data[1] == 0.0f);

    Tensor no_gain = rms_norm(x, Tensor::zeros({2}), 1e-5);
    CHECK(no_gain.data[0] == 0.0f);
    CHECK(no_gain.data[1] == 0.0f);
}

TEST_CASE("rope: position zero, plane rotation, norm preservation") {
    Rng rng(13);
    Tensor x = Tensor::randn({3, 8}, rng, 1.0);

    Tensor same = rope_apply(x, {0, 0, 0}, 10000.0);
    CHECK(bits_equal(same, x));

    // unit pair (1, 0) rotates onto (cos, sin)
    Tensor unit = Tensor::zeros({1, 4});
    unit.data[0] = 1.0f;
    unit.data[2] = 1.0f;
    int p = 7;
    Tensor rot = rope_apply(unit, {p}, 10000.0);
    for (int j = 0; j < 2; ++j) {
        double omega = std::pow(10000.0, -2.0 * j / 4.0);
        CHECK(std::abs(rot.data[2 * j] - std::cos(p * omega)) < 1e-6);
        CHECK(std::abs(rot.data[2 * j + 1] - std::sin(p * omega)) < 1e-6);
    }

    Tensor y = rope_apply(x, {5, 11, 2}, 10000.0);
    for (int t = 0; t < 3; ++t)
        for (int j = 0; j < 4; ++j) {
            double n0 = std::hypot(x.at(t, 2 * j), x.at(t, 2 * j + 1));
            double n1 = std::hypot(y.at(t, 2 * j), y.at(t, 2 * j + 1));
            CHECK(std::abs(n0 - n1) < 1e-6);
        }

    CHECK_THROWS_AS(rope_apply(Tensor::zeros({2, 3}), std::vector<int>{0, 1}, 10000.0),
                    std::invalid_argument);
}

TEST_CASE("cross_entropy_mean: uniform, saturated, two-position mean") {
    Tensor uniform = Tensor::zeros({1, 4});
    CHECK(std::abs(cross_entropy_mean(uniform, {2}) - std::log(4.0)) < 1e-6);

    Tensor sure = Tensor::zeros({1, 8});
    sure.data[3] = 1e4f;
    CHECK(std::abs(cross_entropy_mean(sure, {3})) < 1e-6);

    // losses ln 2 and ln 8 average to ln 4
    Tensor two = Tensor::zeros({2, 8});
    two.at(0, 0) = std::log(7.0f);  // p(target 0) = 7/(7+7) = 1/2
    CHECK(std::abs(cross_entropy_mean(two, {0, 0}) - std::log(4.0)) < 1e-6);

    CHECK_THROWS_AS(cross_entropy_mean(uniform, {4}), std::out_of_range);
    CHECK_THROWS_AS(cross_entropy_mean(uniform, {-1}), std::out_of_range);
}

TEST_CASE("gradient transforms agree with finite differences") {
    Rng rng(101);

    SUBCASE("matmul") {
        TensorT<double> a = randn_d({3, 4}, rng);
        TensorT<double> b = randn_d({4, 5}, rng);
        TensorT<double> w = randn_d({3, 5}, rng);  // fixed projection making a scalar
        auto loss = [&]() {
            TensorT<double> c = matmul(a, b);
            double s = 0;
            for (size_t i = 0; i < c.data.size(); ++i) s += c.data[i] * w.data[i];
            return s;
        };
        TensorT<double> da = matmul_grad_a(w, b);
        TensorT<double> db = matmul_grad_b(a, w);
        for (size_t i = 0; i < a.data.size(); i += 3)
            CHECK(std::abs(da.data[i] - fd_grad(a, i, loss)) < 1e-6);
        for (size_t i = 0; i < b.data.size(); i += 3)
            CHECK(std::abs(db.data[i] - fd_grad(b, i, loss)) < 1e-6);
    }

    SUBCASE("softmax_rows") {
        TensorT<double> x = randn_d({2, 6}, rng);
        TensorT<double> w = randn_d({2, 6}, rng);
        auto loss = [&]() {
            TensorT<double> y = softmax_rows(x);
            double s = 0;
            for (size_t i = 0; i < y.data.size(); ++i) s += y.data[i] * w.data[i];
            return s;
        };
        TensorT<double> y = softmax_rows(x);
        TensorT<double> dx = softmax_rows_grad(y, w);
        for (size_t i = 0; i < x.data.size(); ++i)
            CHECK(std::abs(dx.data[i] - fd_grad(x, i, loss)) < 1e-6);
    }

    SUBCASE("rms_norm") {
        TensorT<double> x = randn_d({2, 5}, rng);
        TensorT<double> gain = randn_d({5}, rng);
        TensorT<double> w = randn_d({2, 5}, rng);
        const double eps = 1e-5;
        auto loss = [&]() {
            TensorT<double> y = rms_norm(x, gain, eps);
            double s = 0;
            for (size_t i = 0; i < y.data.size(); ++i) s += y.data[i] * w.data[i];
            return s;
        };
        TensorT<double> dx, dgain = TensorT<double>({5});
        rms_norm_grad(x, gain, eps, w, dx, dgain);
        for (size_t i = 0; i < x.data.size(); ++i)
            CHECK(std::abs(dx.data[i] - fd_grad(x, i, loss)) < 1e-6);
        for (size_t i = 0; i < gain.data.size(); ++i)
            CHECK(std::abs(dgain.data[i] - fd_grad(gain, i, loss)) < 1e-6);
    }

    SUBCASE("rope") {
        TensorT<double> x = randn_d({3, 6}, rng);
        TensorT<double> w = randn_d({3, 6}, rng);
        std::vector<int> pos{0, 3, 9};
        auto loss = [&]() {
            TensorT<double> y = rope_apply(x, pos, 10000.0);
            double s = 0;
            for (size_t i = 0; i < y.data.size(); ++i) s += y.data[i] * w.data[i];
            return s;
        };
        TensorT<double> dx = rope_apply_grad(w, pos, 10000.0);
        for (size_t i = 0; i < x.data.size(); ++i)
            CHECK(std::abs(dx.data[i] - fd_grad(x, i, loss)) < 1e-6);
    }

    SUBCASE("cross_entropy") {
        TensorT<double> logits = randn_d({3, 7}, rng);
        std::vector<int> targets{1, 6, 0};
        auto loss = [&]() { return cross_entropy_mean(logits, targets); };
        TensorT<double> dl = cross_entropy_grad(logits, targets, 1.0);
        for (size_t i = 0; i < logits.data.size(); ++i)
            CHECK(std::abs(dl.data[i] - fd_grad(logits, i, loss)) < 1e-6);
    }

    SUBCASE("gelu") {
        TensorT<double> x = randn_d({2, 9}, rng);
        TensorT<double> w = randn_d({2, 9}, rng);
        auto loss = [&]() {
            TensorT<double> y = gelu(x);
            double s = 0;
            for (size_t i = 0; i < y.data.size(); ++i) s += y.data[i] * w.data[i];
            return s;
        };
        TensorT<double> dx = gelu_grad(x, w);
        for (size_t i = 0; i < x.data.size(); ++i)
            CHECK(std::abs(dx.data[i] - fd_grad(x, i, loss)) < 1e-6);
    }
}
