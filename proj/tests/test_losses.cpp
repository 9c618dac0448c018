#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "uats/errors.hpp"
#include "uats/gradcheck.hpp"
#include "uats/losses.hpp"
#include "uats/metrics.hpp"
#include "uats/rng.hpp"

using namespace uats;

namespace {

Eigen::ArrayXd arr(std::initializer_list<double> v) {
  Eigen::ArrayXd a(static_cast<std::int64_t>(v.size()));
  std::int64_t i = 0;
  for (double x : v) a[i++] = x;
  return a;
}

// independent scalar evaluation of the masked cDC definition
double cdc_by_direct_summation(const Eigen::ArrayXd& y,
                               const Eigen::ArrayXd& yh,
                               const Eigen::ArrayXd& m) {
  double p = 0, ty = 0, th = 0, q = 0;
  for (std::int64_t i = 0; i < y.size(); ++i) {
    if (m[i] == 0.0) continue;
    p += y[i] * yh[i];
    ty += y[i];
    th += yh[i];
    q += y[i] * (yh[i] > 0.0 ? 1.0 : 0.0);
  }
  const double c = q > 0 ? p / q : 1.0;
  const double d = c * ty + th;
  if (d == 0) return 1.0;
  return 2.0 * p / d;
}

Grid4 random_probmap(Shape4 s, Rng& rng) {
  Grid4 logits(s);
  for (std::int64_t i = 0; i < logits.size(); ++i)
    logits[i] = rng.uniform(-2, 2);
  // exp-normalize per voxel by hand
  Grid4 p(s);
  const std::int64_t hw = static_cast<std::int64_t>(s.h) * s.w;
  for (int b = 0; b < s.b; ++b)
    for (std::int64_t v = 0; v < hw; ++v) {
      double denom = 0;
      const std::int64_t base = logits.index(b, 0, 0, 0);
      for (int c = 0; c < s.c; ++c) denom += std::exp(logits[base + c * hw + v]);
      for (int c = 0; c < s.c; ++c)
        p[base + c * hw + v] = std::exp(logits[base + c * hw + v]) / denom;
    }
  return p;
}

}  // namespace

TEST_CASE("continuous_dice basics") {
  SUBCASE("identical binary fields give 1") {
    const auto y = arr({1, 0, 1, 1, 0});
    const auto m = Eigen::ArrayXd::Ones(5).eval();
    CHECK(continuous_dice(y, y, m) == doctest::Approx(1.0));
  }

  SUBCASE("worked two-voxel example") {
    // y=(1,0), yhat=(0.5,0.5): c = 0.5, cDC = 1/1.5
    const auto y = arr({1, 0});
    const auto yh = arr({0.5, 0.5});
    const auto m = Eigen::ArrayXd::Ones(2).eval();
    CHECK(continuous_dice(y, yh, m) ==
          doctest::Approx(1.0 / 1.5).epsilon(1e-9));
  }

  SUBCASE("disjoint binary fields give 0") {
    const auto y = arr({1, 1, 0, 0});
    const auto yh = arr({0, 0, 1, 1});
    const auto m = Eigen::ArrayXd::Ones(4).eval();
    CHECK(continuous_dice(y, yh, m) == doctest::Approx(0.0));
  }

  SUBCASE("degenerate conventions") {
    const auto zero = Eigen::ArrayXd::Zero(4).eval();
    const auto m = Eigen::ArrayXd::Ones(4).eval();
    const auto some = arr({0.5, 0, 0.25, 0});
    CHECK(continuous_dice(zero, zero, m) == 1.0);  // both empty
    CHECK(continuous_dice(zero, some, m) == 0.0);  // exactly one empty
    CHECK(continuous_dice(some, zero, m) == 0.0);
  }

  SUBCASE("inputs outside [0,1] rejected") {
    const auto bad = arr({1.5, 0});
    const auto ok = arr({0.5, 0.5});
    const auto m = Eigen::ArrayXd::Ones(2).eval();
    CHECK_THROWS_AS(continuous_dice(bad, ok, m), DomainError);
    CHECK_THROWS_AS(continuous_dice(ok, arr({-0.2, 0.1}), m), DomainError);
  }
}

TEST_CASE("continuous_dice equals classical dice on binary fields") {
  Rng rng(21);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 20;
    Eigen::Array<std::uint8_t, Eigen::Dynamic, 1> a(n), b(n);
    Eigen::ArrayXd ya(n), yb(n);
    for (int i = 0; i < n; ++i) {
      a[i] = rng.bernoulli(0.4);
      b[i] = rng.bernoulli(0.4);
      ya[i] = a[i];
      yb[i] = b[i];
    }
    const auto m = Eigen::ArrayXd::Ones(n).eval();
    CHECK(std::abs(continuous_dice(ya, yb, m) - dice_binary(a, b)) < 1e-12);
  }
}

TEST_CASE("continuous_dice bounds and monotone masking") {
  Rng rng(22);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 30;
    Eigen::ArrayXd y(n), yh(n), m(n);
    for (int i = 0; i < n; ++i) {
      y[i] = rng.uniform();
      yh[i] = rng.uniform();
      m[i] = rng.bernoulli(0.7);
    }
    const double v = continuous_dice(y, yh, m);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  // enlarging the mask with voxels where y = yhat = 1 never decreases cDC
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 24;
    Eigen::ArrayXd y(n), yh(n), m(n);
    for (int i = 0; i < n; ++i) {
      y[i] = rng.bernoulli(0.5);
      yh[i] = rng.bernoulli(0.5);
      m[i] = rng.bernoulli(0.6);
    }
    // add agreeing-positive voxels to the mask
    Eigen::ArrayXd m2 = m;
    bool grew = false;
    for (int i = 0; i < n; ++i)
      if (m[i] == 0.0 && y[i] == 1.0 && yh[i] == 1.0) {
        m2[i] = 1.0;
        grew = true;
      }
    if (!grew) continue;
    CHECK(continuous_dice(y, yh, m2) >= continuous_dice(y, yh, m) - 1e-12);
  }
}

TEST_CASE("continuous_dice analytic gradients match finite differences") {
  Rng rng(23);
  for (int trial = 0; trial < 5; ++trial) {
    const int n = 16;
    Eigen::ArrayXd y(n), yh(n), m(n);
    for (int i = 0; i < n; ++i) {
      y[i] = rng.uniform(0.05, 0.95);
      yh[i] = rng.uniform(0.05, 0.95);
      m[i] = rng.bernoulli(0.8);
    }
    Eigen::ArrayXd dy(n), dyh(n);
    continuous_dice_grad(y, yh, m, &dy, &dyh);

    Grid4 yhg(1, 1, 1, n);
    yhg.array() = yh;
    Grid4 dyh_g(1, 1, 1, n);
    dyh_g.array() = dyh;
    auto f_yh = [&](const Grid4& g) {
      return continuous_dice(y, g.array(), m);
    };
    CHECK(check_gradients(f_yh, yhg, dyh_g, 1e-5).max_rel_err < 1e-6);

    Grid4 yg(1, 1, 1, n);
    yg.array() = y;
    Grid4 dy_g(1, 1, 1, n);
    dy_g.array() = dy;
    auto f_y = [&](const Grid4& g) {
      return continuous_dice(g.array(), yh, m);
    };
    CHECK(check_gradients(f_y, yg, dy_g, 1e-5).max_rel_err < 1e-6);
  }
}

TEST_CASE("task_loss") {
  const ClassSet classes = ClassSet::synthetic5();

  SUBCASE("perfect binary prediction gives -|S|") {
    Rng rng(24);
    Grid4 y(2, 5, 4, 4);
    for (int b = 0; b < 2; ++b)
      for (int yy = 0; yy < 4; ++yy)
        for (int xx = 0; xx < 4; ++xx)
          y.at(b, static_cast<int>(rng.uniform_int(5)), yy, xx) = 1.0;
    const Grid4 ones = Grid4::constant(y.shape(), 1.0);
    CHECK(task_loss(y, y, ones, classes) == doctest::Approx(-5.0));
  }

  SUBCASE("masking to labeled voxels reproduces the supervised loss") {
    Rng rng(25);
    Grid4 targets = random_probmap({2, 5, 4, 4}, rng);
    Grid4 probs = random_probmap({2, 5, 4, 4}, rng);
    // sample 0 labeled, sample 1 unlabeled with zero mask
    Grid4 mask(2, 5, 4, 4);
    for (int c = 0; c < 5; ++c) mask.plane(0, c).setOnes();
    const double masked = task_loss(targets, probs, mask, classes);

    Grid4 t1(1, 5, 4, 4), p1(1, 5, 4, 4);
    const Grid4 ones1 = Grid4::constant(t1.shape(), 1.0);
    for (int c = 0; c < 5; ++c) {
      t1.plane(0, c) = targets.plane(0, c);
      p1.plane(0, c) = probs.plane(0, c);
    }
    CHECK(masked == doctest::Approx(task_loss(t1, p1, ones1, classes))
                        .epsilon(1e-12));
  }

  SUBCASE("matches direct summation on random fields") {
    Rng rng(26);
    Grid4 targets = random_probmap({1, 5, 4, 4}, rng);
    Grid4 probs = random_probmap({1, 5, 4, 4}, rng);
    Grid4 mask(1, 5, 4, 4);
    for (std::int64_t i = 0; i < mask.size(); ++i)
      mask[i] = rng.bernoulli(0.6) ? 1.0 : 0.0;
    double expected = 0.0;
    for (int s = 0; s < 5; ++s)
      expected -= cdc_by_direct_summation(targets.plane(0, s), probs.plane(0, s),
                                          mask.plane(0, s));
    CHECK(std::abs(task_loss(targets, probs, mask, classes) - expected) <
          1e-12);
  }

  SUBCASE("empty mask for every class is an error") {
    Grid4 y(1, 5, 2, 2);
    Grid4 zero_mask(1, 5, 2, 2);
    CHECK_THROWS_AS(task_loss(y, y, zero_mask, classes), TrainingError);
  }

  SUBCASE("gradient with respect to the prediction") {
    Rng rng(27);
    Grid4 targets = random_probmap({1, 5, 3, 3}, rng);
    Grid4 probs = random_probmap({1, 5, 3, 3}, rng);
    Grid4 mask = Grid4::constant(probs.shape(), 1.0);
    Grid4 dprobs(probs.shape());
    task_loss(targets, probs, mask, classes, nullptr, &dprobs);
    auto f = [&](const Grid4& p) {
      return task_loss(targets, p, mask, classes);
    };
    CHECK(check_gradients(f, probs, dprobs, 1e-5).max_rel_err < 1e-4);
  }
}

TEST_CASE("consistency_loss") {
  const ClassSet classes{{"bg", "fg"}};

  SUBCASE("self-agreement on one-hot maps gives exactly 0") {
    // the c-corrected cDC equals 1 under self-agreement for binary fields
    Rng rng(28);
    Grid4 p(1, 2, 4, 4);
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        p.at(0, rng.bernoulli(0.5) ? 1 : 0, y, x) = 1.0;
    CHECK(consistency_loss(p, p, classes) == 0.0);
  }

  SUBCASE("disjoint one-hot maps give 1") {
    Grid4 a(1, 2, 2, 2), b(1, 2, 2, 2);
    a.plane(0, 0).setOnes();
    b.plane(0, 1).setOnes();
    CHECK(consistency_loss(a, b, classes) == doctest::Approx(1.0));
  }

  SUBCASE("uniform vs one-hot against direct evaluation") {
    Grid4 yh = Grid4::constant({1, 2, 2, 2}, 0.5);
    Grid4 eh(1, 2, 2, 2);
    eh.plane(0, 0).setOnes();
    const double c0 = cdc_by_direct_summation(yh.plane(0, 0), eh.plane(0, 0),
                                              Eigen::ArrayXd::Ones(4));
    const double c1 = cdc_by_direct_summation(yh.plane(0, 1), eh.plane(0, 1),
                                              Eigen::ArrayXd::Ones(4));
    const double expected = 1.0 - 0.5 * (c0 + c1);
    CHECK(std::abs(consistency_loss(yh, eh, classes) - expected) < 1e-12);
  }

  SUBCASE("symmetric on binary inputs") {
    Rng rng(29);
    Grid4 a(1, 2, 4, 4), b(1, 2, 4, 4);
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) {
        const int ca = rng.bernoulli(0.5);
        const int cb = rng.bernoulli(0.5);
        a.at(0, ca, y, x) = 1.0;
        b.at(0, cb, y, x) = 1.0;
      }
    CHECK(consistency_loss(a, b, classes) ==
          doctest::Approx(consistency_loss(b, a, classes)).epsilon(1e-12));
  }

  SUBCASE("gradient with respect to the prediction") {
    Rng rng(30);
    const ClassSet c5 = ClassSet::synthetic5();
    Grid4 probs = random_probmap({1, 5, 3, 3}, rng);
    Grid4 ens = random_probmap({1, 5, 3, 3}, rng);
    Grid4 dprobs(probs.shape());
    consistency_loss(probs, ens, c5, &dprobs);
    auto f = [&](const Grid4& p) { return consistency_loss(p, ens, c5); };
    CHECK(check_gradients(f, probs, dprobs, 1e-5).max_rel_err < 1e-4);
  }

  SUBCASE("shape mismatch rejected") {
    Grid4 a(1, 2, 2, 2), b(1, 2, 4, 4);
    CHECK_THROWS_AS(consistency_loss(a, b, classes), ShapeError);
  }
}

TEST_CASE("combined_loss lambda gate") {
  SUBCASE("task-dominated epoch keeps lambda") {
    const LossReport r = combined_loss(-1.8, 0.25, 1.0, -2.0, 0.3);
    CHECK(r.lambda_effective == 1.0);
    CHECK(r.total == doctest::Approx(-1.8 + 0.25));
  }

  SUBCASE("consistency-dominated epoch zeroes lambda") {
    const LossReport r = combined_loss(-0.2, 0.6, 1.0, -0.1, 0.5);
    CHECK(r.lambda_effective == 0.0);
    CHECK(r.total == doctest::Approx(-0.2));
  }

  SUBCASE("lambda zero passes through") {
    const LossReport r = combined_loss(-1.0, 0.9, 0.0, -0.5, 0.9);
    CHECK(r.lambda_effective == 0.0);
    CHECK(r.total == doctest::Approx(-1.0));
  }

  SUBCASE("report total is the exact arithmetic identity") {
    const LossReport r = combined_loss(-1.25, 0.125, 1.0, -2.0, 0.1);
    CHECK(r.total == r.task_loss + r.lambda_effective * r.consistency_loss);
  }
}
