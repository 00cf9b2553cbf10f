#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "lnablate/gradcheck.hpp"
#include "lnablate/ops.hpp"
#include "lnablate/tensor.hpp"

using namespace lnablate;

namespace {

Tensor<double> random_tensor(std::vector<int64_t> shape, std::mt19937_64& rng, double lo = -2.0,
                             double hi = 2.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : *t.data) v = dist(rng);
  return t;
}

}  // namespace

TEST_CASE("matmul identity, hand value, annihilator") {
  auto eye = Tensor<float>::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensor<float>::from({2, 2}, {5, 6, 7, 8});
  auto c = matmul(eye, b);
  for (int i = 0; i < 4; ++i) CHECK((*c.data)[i] == (*b.data)[i]);

  auto a = Tensor<float>::from({1, 2}, {1, 2});
  auto col = Tensor<float>::from({2, 1}, {3, 4});
  CHECK(matmul(a, col).item() == doctest::Approx(11.0).epsilon(1e-6));

  auto z = Tensor<float>::zeros({2, 3});
  auto az = matmul(b, Tensor<float>::zeros({2, 3}));
  for (int i = 0; i < 6; ++i) CHECK((*az.data)[i] == 0.0f);
  CHECK(az.shape == z.shape);

  CHECK_THROWS_AS(matmul(col, b), ShapeError);
}

TEST_CASE("gelu values") {
  auto x = Tensor<double>::from({3}, {0.0, 1.0, 12.0});
  auto y = gelu(x);
  CHECK((*y.data)[0] == 0.0);
  // High-precision evaluation of the tanh approximation at 1.0.
  CHECK((*y.data)[1] == doctest::Approx(0.8411919906082767).epsilon(1e-12));
  CHECK((*y.data)[2] == doctest::Approx(12.0).epsilon(1e-9));
}

TEST_CASE("softmax cross entropy values and errors") {
  // Uniform logits over V=257 -> ln(257).
  auto flat = Tensor<double>::zeros({2, 257});
  auto l1 = softmax_cross_entropy(flat, std::vector<int32_t>{3, 77});
  CHECK(l1.item() == doctest::Approx(5.5490760848952198).epsilon(1e-12));

  // Near-delta at the target.
  auto hot = Tensor<double>::zeros({1, 5});
  (*hot.data)[2] = 1e4;
  CHECK(softmax_cross_entropy(hot, std::vector<int32_t>{2}).item() ==
        doctest::Approx(0.0).epsilon(1e-9));

  // Hand-evaluated row.
  auto row = Tensor<double>::from({1, 3}, {1, 2, 3});
  CHECK(softmax_cross_entropy(row, std::vector<int32_t>{2}).item() ==
        doctest::Approx(0.40760596444438030).epsilon(1e-12));

  CHECK_THROWS_AS(softmax_cross_entropy(row, std::vector<int32_t>{3}), IndexError);
  CHECK_THROWS_AS(softmax_cross_entropy(row, std::vector<int32_t>{-1}), IndexError);
  CHECK_THROWS_AS(softmax_cross_entropy(row, std::vector<int32_t>{0, 1}), ShapeError);
}

TEST_CASE("backward of sum gives all-ones gradient") {
  std::mt19937_64 rng(7);
  auto x = random_tensor({3, 4}, rng);
  x.set_requires_grad();
  auto s = sum(x);
  backward(s);
  for (double g : *x.grad) CHECK(g == 1.0);
}

TEST_CASE("constant function has exactly zero gradient") {
  std::mt19937_64 rng(8);
  auto x = random_tensor({5}, rng);
  auto c = Tensor<double>::from({5}, {1, 1, 1, 1, 1});
  x.set_requires_grad();
  // f(x) = sum(c) never touches x; autodiff gradient stays zero.
  auto s = sum(c);
  c.set_requires_grad();
  auto s2 = sum(c);
  backward(s2);
  for (double g : *x.grad) CHECK(g == 0.0);
}

TEST_CASE("finite differences: sum of squares") {
  std::mt19937_64 rng(9);
  auto x = random_tensor({6}, rng);
  const double err = finite_difference_check<double>(
      [](const Tensor<double>& v) { return sum(mul(v, v)); }, x);
  CHECK(err < 1e-7);
}

TEST_CASE("finite differences: every core op") {
  std::mt19937_64 rng(10);
  GradCheckOptions opt;

  SUBCASE("matmul both sides") {
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 5}, rng);
    Tensor<double>* leaves[] = {&a, &b};
    const double err = finite_difference_check_params<double>(
        [&]() { return sum(matmul(a, b)); }, leaves, opt);
    CHECK(err < 1e-4);
  }
  SUBCASE("linear with bias") {
    auto x = random_tensor({2, 3, 4}, rng);
    auto w = random_tensor({4, 5}, rng);
    auto b = random_tensor({5}, rng);
    Tensor<double>* leaves[] = {&x, &w, &b};
    const double err = finite_difference_check_params<double>(
        [&]() { return sum(gelu(linear(x, w, &b))); }, leaves, opt);
    CHECK(err < 1e-4);
  }
  SUBCASE("linear against transposed weight") {
    auto x = random_tensor({3, 4}, rng);
    auto w = random_tensor({6, 4}, rng);
    Tensor<double>* leaves[] = {&x, &w};
    const double err = finite_difference_check_params<double>(
        [&]() { return sum(linear_wt(x, w)); }, leaves, opt);
    CHECK(err < 1e-4);
  }
  SUBCASE("add and mul") {
    auto a = random_tensor({7}, rng);
    auto b = random_tensor({7}, rng);
    Tensor<double>* leaves[] = {&a, &b};
    const double err = finite_difference_check_params<double>(
        [&]() { return sum(mul(add(a, b), a)); }, leaves, opt);
    CHECK(err < 1e-4);
  }
  SUBCASE("gelu") {
    auto x = random_tensor({9}, rng);
    const double err = finite_difference_check<double>(
        [](const Tensor<double>& v) { return sum(gelu(v)); }, x, opt);
    CHECK(err < 1e-4);
  }
  SUBCASE("embedding") {
    auto wte = random_tensor({11, 6}, rng);
    auto wpe = random_tensor({4, 6}, rng);
    std::vector<int32_t> toks = {1, 5, 5, 10, 0, 3, 7, 2};
    Tensor<double>* leaves[] = {&wte, &wpe};
    const double err = finite_difference_check_params<double>(
        [&]() { return sum(gelu(embedding(wte, wpe, toks, 2, 4))); }, leaves, opt);
    CHECK(err < 1e-4);
  }
  SUBCASE("causal attention") {
    auto q = random_tensor({2, 5, 8}, rng, -1.0, 1.0);
    auto k = random_tensor({2, 5, 8}, rng, -1.0, 1.0);
    auto v = random_tensor({2, 5, 8}, rng, -1.0, 1.0);
    Tensor<double>* leaves[] = {&q, &k, &v};
    const double err = finite_difference_check_params<double>(
        [&]() { return sum(causal_attention(q, k, v, 2)); }, leaves, opt);
    CHECK(err < 1e-4);
  }
  SUBCASE("softmax cross entropy") {
    auto logits = random_tensor({6, 9}, rng);
    std::vector<int32_t> targets = {0, 3, 8, 8, 1, 4};
    const double err = finite_difference_check<double>(
        [&](const Tensor<double>& l) { return softmax_cross_entropy(l, targets); }, logits, opt);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("forward determinism within one build") {
  std::mt19937_64 rng1(42), rng2(42);
  auto a1 = random_tensor({8, 8}, rng1);
  auto b1 = random_tensor({8, 8}, rng1);
  auto a2 = random_tensor({8, 8}, rng2);
  auto b2 = random_tensor({8, 8}, rng2);
  auto c1 = matmul(a1, b1);
  auto c2 = matmul(a2, b2);
  for (int64_t i = 0; i < c1.numel(); ++i) CHECK((*c1.data)[i] == (*c2.data)[i]);
}

TEST_CASE("gradients accumulate across repeated backward") {
  auto x = Tensor<double>::from({2}, {3.0, 4.0});
  x.set_requires_grad();
  auto s1 = sum(mul(x, x));
  backward(s1);
  auto s2 = sum(mul(x, x));
  backward(s2);
  CHECK((*x.grad)[0] == doctest::Approx(12.0));
  CHECK((*x.grad)[1] == doctest::Approx(16.0));
}

TEST_CASE("no-grad mode builds no graph") {
  auto x = Tensor<double>::from({2}, {1.0, 2.0});
  x.set_requires_grad();
  NoGradGuard ng;
  auto y = mul(x, x);
  CHECK_FALSE(y.requires_grad);
  CHECK(y.node == nullptr);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor<float>::zeros({0, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>::from({2, 2}, {1, 2, 3}), ShapeError);
  auto t = Tensor<float>::from({2, 2}, {1, 2, 3, 4});
  CHECK(t.numel() == 4);
  CHECK(t.all_finite());
  (*t.data)[1] = std::numeric_limits<float>::infinity();
  CHECK_FALSE(t.all_finite());
}
