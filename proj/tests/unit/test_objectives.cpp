#include "support/doctest_torch.hpp"

#include <cmath>
#include <random>

#include "dsan/objectives.hpp"

using namespace dsan;
using namespace dsan::loss;

namespace {

// Naive cross entropy on the probability, for moderate logits only.
double naive_bce(double logit, int label) {
  const double p = 1.0 / (1.0 + std::exp(-logit));
  return label == 1 ? -std::log(p) : -std::log(1.0 - p);
}

}  // namespace

TEST_CASE("classification loss examples") {
  CHECK(classification_loss(0.0, 1) == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(classification_loss(0.0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(classification_loss(20.0, 1) < 1e-8);
  CHECK(classification_loss(0.5, 1) == doctest::Approx(0.474077).epsilon(1e-6));
  CHECK(classification_loss(0.5, 1) == doctest::Approx(naive_bce(0.5, 1)).epsilon(1e-12));
  CHECK(std::isfinite(classification_loss(-1000.0, 1)));
  CHECK(classification_loss(-1000.0, 1) == doctest::Approx(1000.0));
  CHECK(classification_loss(1000.0, 0) == doctest::Approx(1000.0));
}

TEST_CASE("classification loss agrees with the naive form and is convex") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-15.0, 15.0);
  for (int i = 0; i < 500; ++i) {
    const double x = u(rng);
    const int y = static_cast<int>(rng() % 2);
    CHECK(classification_loss(x, y) == doctest::Approx(naive_bce(x, y)).epsilon(1e-9));
    const double h = 1e-3;
    const double second = classification_loss(x + h, y) - 2.0 * classification_loss(x, y) +
                          classification_loss(x - h, y);
    CHECK(second >= -1e-12);
  }
}

TEST_CASE("tensor classification loss matches the scalar version per sample") {
  const auto logits = torch::tensor({-3.0, 0.0, 0.5, 20.0}, torch::kDouble);
  const auto labels = torch::tensor({1.0, 0.0, 1.0, 1.0}, torch::kDouble);
  const auto l = classification_loss(logits, labels);
  REQUIRE(l.sizes() == torch::IntArrayRef({4}));
  const int lab[] = {1, 0, 1, 1};
  for (int i = 0; i < 4; ++i) {
    CHECK(l[i].item<double>() == doctest::Approx(classification_loss(logits[i].item<double>(), lab[i])).epsilon(1e-12));
  }
}

TEST_CASE("attention loss examples") {
  const std::vector<double> t = {0.5, 0.0};
  const std::vector<double> m = {1.0, 0.0};
  CHECK(attention_loss(t, m) == doctest::Approx(0.25 / 1.5).epsilon(1e-9));
  CHECK(attention_loss(m, m) == 0.0);
  const std::vector<double> zeros(10, 0.0), ones(10, 1.0);
  CHECK(attention_loss(zeros, zeros) == 0.0);
  CHECK(attention_loss(ones, zeros) == 1.0);
  CHECK(std::fabs(attention_loss(t, m) - 1.0 / 6.0) < 1e-15);
  // The floor only matters when both maps are (nearly) empty.
  const std::vector<double> faint = {1e-9, 0.0}, empty = {0.0, 0.0};
  CHECK(attention_loss(faint, empty) == doctest::Approx(1e-18 / kAttentionEps));
}

TEST_CASE("attention loss properties over random maps") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng() % 200;
    std::vector<double> t(n), m(n);
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = u(rng);
      m[i] = (rng() % 3 == 0) ? 1.0 : 0.0;
    }
    const double l = attention_loss(t, m);
    CHECK(l >= 0.0);
    CHECK(l <= 1.0);
    // Equality on the support gives zero.
    std::vector<double> copy = m;
    CHECK(attention_loss(copy, m) == 0.0);
    // Any disagreement gives a positive loss.
    copy[rng() % n] = 0.5;
    CHECK(attention_loss(copy, m) > 0.0);
  }
}

TEST_CASE("tensor attention loss is per sample") {
  const auto t = torch::tensor({0.5, 0.0, 1.0, 1.0}, torch::kDouble).view({2, 1, 1, 2});
  const auto m = torch::tensor({1.0, 0.0, 1.0, 1.0}, torch::kDouble).view({2, 1, 1, 2});
  const auto l = attention_loss(t, m);
  REQUIRE(l.sizes() == torch::IntArrayRef({2}));
  CHECK(l[0].item<double>() == doctest::Approx(0.25 / 1.5).epsilon(1e-9));
  CHECK(l[1].item<double>() == 0.0);
}

TEST_CASE("total loss") {
  CHECK(total_loss(0.7, 0.2, 1) == doctest::Approx(0.8));
  CHECK(total_loss(0.7, 0.2, 0) == doctest::Approx(0.7));
  CHECK(total_loss(0.3, 0.9, 1, 0.0) == 0.3);
  CHECK(total_loss(0.7, 0.2, 1, 1.0) == doctest::Approx(0.9));
}

TEST_CASE("batch combination") {
  const auto l_c = torch::tensor({0.2, 0.4, 0.9}, torch::kDouble);
  SUBCASE("mean over the batch and over COVID samples") {
    const auto l_ex = torch::tensor({0.1, 0.3}, torch::kDouble);
    const LossBreakdown b = combine(l_c, l_ex, 0.5);
    CHECK(b.l_c.item<double>() == doctest::Approx(0.5));
    REQUIRE(b.l_ex.has_value());
    CHECK(b.l_ex->item<double>() == doctest::Approx(0.2));
    CHECK(b.l_total.item<double>() == doctest::Approx(0.6));
    // Per-sample values sum back to the batch mean.
    CHECK(b.l_c.item<double>() * 3.0 == doctest::Approx(l_c.sum().item<double>()));
  }
  SUBCASE("no COVID sample in the batch") {
    const LossBreakdown b = combine(l_c, torch::Tensor(), 0.5);
    CHECK_FALSE(b.l_ex.has_value());
    CHECK(b.l_total.item<double>() == doctest::Approx(0.5));
    const LossBreakdown e = combine(l_c, torch::empty({0}, torch::kDouble), 0.5);
    CHECK_FALSE(e.l_ex.has_value());
  }
  SUBCASE("gradients flow through the total") {
    auto x = torch::tensor({0.3, -0.2}, torch::dtype(torch::kDouble).requires_grad(true));
    const auto lc = classification_loss(x, torch::tensor({1.0, 0.0}, torch::kDouble));
    const LossBreakdown b = combine(lc, torch::Tensor(), 0.5);
    b.l_total.backward();
    // d/dx mean BCE = (sigmoid(x) - y) / 2
    CHECK(x.grad()[0].item<double>() == doctest::Approx((1.0 / (1.0 + std::exp(-0.3)) - 1.0) / 2.0));
    CHECK(x.grad()[1].item<double>() == doctest::Approx((1.0 / (1.0 + std::exp(0.2))) / 2.0));
  }
}
