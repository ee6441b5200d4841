#include "doctest.h"
#include "gradcheck.hpp"

#include "purer/errors.hpp"
#include "purer/functional.hpp"

using namespace purer;
using namespace purer::testing;

namespace {

using Builder = std::function<VarD(const std::vector<VarD>&)>;

double evaluate(const Builder& f, const std::vector<TensorD>& point) {
  ad::NoGradGuard no_grad;
  std::vector<VarD> vars;
  for (const auto& t : point) vars.push_back(VarD::constant(t));
  return f(vars).item();
}

// First-order check of every input.
void check_gradients(const Builder& f, const std::vector<TensorD>& point, double tol = 1e-6) {
  std::vector<VarD> vars;
  for (const auto& t : point) vars.push_back(VarD::parameter(t));
  auto grads = ad::grad(f(vars), vars);
  auto scalar_f = [&](const std::vector<TensorD>& p) { return evaluate(f, p); };
  for (std::size_t i = 0; i < point.size(); ++i) {
    auto numeric = numeric_gradient(scalar_f, point, i);
    CAPTURE(i);
    CHECK(relative_error(grads[i].value().data, numeric.data) < tol);
  }
}

// Second-order check: d/dx <grad f(x), v> against differences of the analytic gradient.
void check_second_order(const Builder& f, const std::vector<TensorD>& point, double tol = 1e-6) {
  std::mt19937_64 rng(99);
  std::vector<TensorD> directions;
  for (const auto& t : point) directions.push_back(random_tensor(t.shape, rng));

  auto directional = [&](const std::vector<VarD>& vars, bool create_graph) {
    auto g = ad::grad(f(vars), vars, create_graph);
    VarD total = VarD::scalar(0.0);
    for (std::size_t i = 0; i < g.size(); ++i) total = total + ad::sum(g[i] * VarD::constant(directions[i]));
    return total;
  };

  std::vector<VarD> vars;
  for (const auto& t : point) vars.push_back(VarD::parameter(t));
  auto hv = ad::grad(directional(vars, true), vars);

  auto scalar_dir = [&](const std::vector<TensorD>& p) {
    std::vector<VarD> v;
    for (const auto& t : p) v.push_back(VarD::parameter(t));
    return directional(v, false).item();
  };
  for (std::size_t i = 0; i < point.size(); ++i) {
    auto numeric = numeric_gradient(scalar_dir, point, i);
    CAPTURE(i);
    CHECK(relative_error(hv[i].value().data, numeric.data) < tol);
  }
}

}  // namespace

TEST_CASE("elementwise ops match finite differences to second order") {
  std::mt19937_64 rng(1);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  b.data = b.data.array().abs() + 0.5;  // keep div/log/pow away from the pole
  Builder f = [](const std::vector<VarD>& v) {
    auto x = v[0] * v[1] + ad::exp(ad::scale(v[0], 0.3)) - v[0] / v[1];
    auto y = ad::log(v[1]) * ad::pow(v[1], 1.5) + ad::add_scalar(ad::neg(v[0]), 2.0);
    return ad::sum(x * y);
  };
  check_gradients(f, {a, b});
  check_second_order(f, {a, b});
}

TEST_CASE("reductions, broadcasts and reshapes are adjoint pairs") {
  std::mt19937_64 rng(2);
  auto a = random_tensor({2, 3, 4}, rng);
  Builder f = [](const std::vector<VarD>& v) {
    auto s1 = ad::sum_axis(v[0], 1);                   // [2,4]
    auto e = ad::expand_axis(s1, 2, 5);                // [2,4,5]
    auto r = ad::reshape(e, {8, 5});
    auto t = ad::transpose(r);                         // [5,8]
    auto m = ad::matmul(t, r);                         // [5,5]
    return ad::sum(m * m) + ad::sum(ad::fill(ad::sum(v[0]), {2, 2}));
  };
  check_gradients(f, {a});
  check_second_order(f, {a});
}

TEST_CASE("conv2d agrees with a direct convolution loop") {
  std::mt19937_64 rng(3);
  auto x = random_tensor({2, 3, 5, 4}, rng);
  auto w = random_tensor({4, 3, 3, 3}, rng);
  auto y = ad::conv2d(VarD::constant(x), VarD::constant(w));
  for (Index b = 0; b < 2; ++b)
    for (Index o = 0; o < 4; ++o)
      for (Index i = 0; i < 5; ++i)
        for (Index j = 0; j < 4; ++j) {
          double acc = 0;
          for (Index c = 0; c < 3; ++c)
            for (Index p = 0; p < 3; ++p)
              for (Index q = 0; q < 3; ++q) {
                const Index ii = i + p - 1, jj = j + q - 1;
                if (ii < 0 || ii >= 5 || jj < 0 || jj >= 4) continue;
                acc += x.data[offset4(x.shape, b, c, ii, jj)] * w.data[offset4(w.shape, o, c, p, q)];
              }
          CHECK(y.value().data[offset4(y.shape(), b, o, i, j)] == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("conv2d, its kernel adjoint and flip_transpose differentiate to second order") {
  std::mt19937_64 rng(4);
  auto x = random_tensor({2, 2, 4, 4}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  Builder f = [](const std::vector<VarD>& v) {
    auto y = ad::conv2d(v[0], v[1]);
    return ad::sum(y * y * y);
  };
  check_gradients(f, {x, w});
  check_second_order(f, {x, w});

  auto w1 = random_tensor({3, 2, 1, 1}, rng);
  check_gradients(f, {x, w1});
}

TEST_CASE("flip_transpose is an involution") {
  std::mt19937_64 rng(5);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  auto twice = ad::flip_transpose(ad::flip_transpose(VarD::constant(w)));
  CHECK(twice.value() == w);
}

TEST_CASE("max pooling picks window maxima and routes gradients to them") {
  TensorD x({1, 1, 3, 3});
  for (Index i = 0; i < 9; ++i) x[i] = static_cast<double>((i * 5) % 9);  // 0 5 1 / 6 2 7 / 3 8 4
  auto p = ad::max_pool2x2(VarD::constant(x));
  REQUIRE(p.shape() == Shape{1, 1, 2, 2});
  CHECK(p.value()[0] == 6);
  CHECK(p.value()[1] == 7);
  CHECK(p.value()[2] == 8);
  CHECK(p.value()[3] == 4);

  std::mt19937_64 rng(6);
  auto r = random_tensor({2, 3, 5, 6}, rng);
  Builder f = [](const std::vector<VarD>& v) {
    auto q = ad::max_pool2x2(v[0]);
    return ad::sum(q * q);
  };
  check_gradients(f, {r});
  check_second_order(f, {r});
}

TEST_CASE("batch norm, softmax cross-entropy and normalization differentiate to second order") {
  std::mt19937_64 rng(7);
  auto x = random_tensor({3, 2, 3, 3}, rng);
  auto gamma = random_tensor({2}, rng);
  auto beta = random_tensor({2}, rng);
  Builder bn = [](const std::vector<VarD>& v) {
    auto r = ad::batch_norm(v[0], v[1], v[2], nullptr, nullptr);
    auto h = ad::relu(r.output);
    return ad::sum(h * h) + ad::sum(r.batch_variance * r.batch_mean);
  };
  check_gradients(bn, {x, gamma, beta});
  check_second_order(bn, {x, gamma, beta});

  auto logits = random_tensor({4, 3}, rng);
  Builder ce = [](const std::vector<VarD>& v) {
    auto n = ad::l2_normalize_rows(v[0]);
    return ad::cross_entropy(v[0], {0, 2, 1, 2}) + ad::sum(n * n * n);
  };
  check_gradients(ce, {logits});
  check_second_order(ce, {logits});
}

TEST_CASE("gradients of unrelated inputs are zero and constants are not recorded") {
  auto a = VarD::parameter(TensorD::constant({2}, 1.0));
  auto b = VarD::parameter(TensorD::constant({2}, 2.0));
  auto g = ad::grad(ad::sum(a * a), {a, b});
  CHECK(g[0].value().data.isApproxToConstant(2.0));
  CHECK(g[1].value().data.isZero());
  CHECK_FALSE(g[0].requires_grad());

  ad::NoGradGuard guard;
  auto c = a * a;
  CHECK_FALSE(c.requires_grad());
}

TEST_CASE("shape errors are reported") {
  auto a = VarD::constant(TensorD::zeros({2, 3}));
  auto b = VarD::constant(TensorD::zeros({3, 2}));
  CHECK_THROWS_AS(ad::add(a, b), InputError);
  CHECK_THROWS_AS(ad::matmul(a, a), InputError);
  CHECK_THROWS_AS(ad::reshape(a, {4}), InputError);
  CHECK_THROWS_AS(ad::grad(a, {a}), InputError);
}
