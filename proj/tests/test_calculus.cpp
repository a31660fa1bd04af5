#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "order_cases.hpp"
#include "p2flow/calculus.hpp"
#include "support.hpp"

using namespace p2flow;

namespace {

ParticleEnsemble line(std::vector<double> xs) { return ParticleEnsemble(1, std::move(xs)); }

CylindricalFunctional mean_of(std::size_t d, std::size_t i, ScalarField outer) {
  return CylindricalFunctional(d, std::move(outer), {fields::coordinate(d, i)});
}

// f(mu) = mu(x^2) in d = 1
CylindricalFunctional second_moment_fn() {
  return CylindricalFunctional(1, fields::affine({1.0}), {fields::square(1, 0)});
}

std::shared_ptr<CoefficientSet> random_coefficients(gen::Gen& g, std::size_t d) {
  switch (g.integer(0, 2)) {
    case 0: return LinearMeanField::isotropic(g.uniform(0.2, 2.0), g.uniform(0.0, 1.0), d,
                                              g.uniform(0.3, 1.5));
    case 1: {
      const std::size_t m = g.integer(1, 2);
      return std::make_shared<LinearMeanField>(g.uniform(0.2, 2.0), g.uniform(0.0, 1.0), d, m,
                                               g.normals(d * m));
    }
    default:
      return std::make_shared<TanhInteraction>(d, g.uniform(0.2, 1.0), g.uniform(0.0, 1.5),
                                               g.uniform(0.3, 1.0), g.uniform(-0.5, 0.5),
                                               g.uniform(-0.5, 0.5));
  }
}

}  // namespace

// --- Lions derivative ------------------------------------------------------

TEST(LionsDerivative, LinearFunctionalHasConstantDerivative) {
  const std::vector<double> v{1.5, -2.0, 0.25};
  const CylindricalFunctional f(3, fields::affine({1.0}), {fields::affine(v, 0.7)});
  gen::Gen g(61);
  for (int trial = 0; trial < 20; ++trial) {
    const auto mu = g.ensemble(3, g.integer(1, 10));
    EXPECT_EQ(lions_derivative_closed(f, mu, g.normals(3)), v);
  }
}

TEST(LionsDerivative, SquaredMeanExample) {
  const auto f = mean_of(1, 0, fields::square(1, 0));
  const auto mu = line({1.0, 3.0});
  for (double x : {-5.0, 0.0, 2.0}) EXPECT_EQ(lions_derivative_closed(f, mu, Point{x}), Point{4.0});
}

TEST(LionsDerivative, ConstantFunctionalIsZero) {
  const CylindricalFunctional f(2, fields::constant(1, 3.0), {fields::sine({1.0, 2.0})});
  gen::Gen g(62);
  EXPECT_EQ(lions_derivative_closed(f, g.ensemble(2, 5), g.normals(2)), (Point{0.0, 0.0}));
}

TEST(LionsDerivative, NumericSecondMomentAlongIdentity) {
  gen::Gen g(63);
  const auto f = [](const ParticleEnsemble& mu) { return second_moment(mu); };
  const auto id = [](std::span<const double> x, std::span<double> out) {
    std::copy(x.begin(), x.end(), out.begin());
  };
  for (int trial = 0; trial < 20; ++trial) {
    const auto mu = g.ensemble(g.integer(1, 3), g.integer(1, 12));
    EXPECT_NEAR(lions_derivative_numeric(f, mu, id, 1e-4), 2.0 * second_moment(mu),
                1e-9 * (1.0 + second_moment(mu)));
  }
}

TEST(LionsDerivative, NumericZeroDirection) {
  gen::Gen g(64);
  const auto f = gen::smooth_cylindrical(g, 2, 3);
  const auto zero = [](std::span<const double>, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
  };
  EXPECT_EQ(lions_derivative_numeric(f, g.ensemble(2, 7), zero, 1e-3), 0.0);
  EXPECT_THROW(lions_derivative_numeric(f, g.ensemble(2, 7), zero, 0.0), InvalidArgument);
}

TEST(LionsDerivativeProperty, CentralDifferenceConvergesQuadratically) {
  gen::Gen g(65);
  std::size_t rejected = 0;
  double worst = INFINITY;
  for (int trial = 0; trial < 50; ++trial) {
    const auto c = gen::draw_order_case(g, rejected);
    const auto r = gen::central_difference_order(c);
    ASSERT_GT(r.err_fine, 0.0);
    worst = std::min(worst, r.order());
    EXPECT_LT(r.err_coarse, 1e-4 * (1.0 + std::abs(r.exact)));
  }
  EXPECT_GE(worst, 1.9);
  EXPECT_LT(rejected, 50u);
}

TEST(SecondLionsDerivative, Examples) {
  gen::Gen g(66);
  const CylindricalFunctional linear(2, fields::affine({2.0}), {fields::sine({1.0, -1.0})});
  const auto mu = g.ensemble(2, 6);
  EXPECT_EQ(second_lions_closed(linear, mu, g.normals(2), g.normals(2)),
            std::vector<double>(4, 0.0));
  const auto sq = mean_of(1, 0, fields::square(1, 0));
  EXPECT_EQ(second_lions_closed(sq, line({1.0, 3.0}), Point{-2.0}, Point{7.0}),
            std::vector<double>{2.0});
}

TEST(SecondLionsDerivativeProperty, TransposeSymmetry) {
  gen::Gen g(67);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = g.integer(1, 3);
    const auto f = g.cylindrical(d, g.integer(1, 3));
    const auto mu = g.ensemble(d, 5);
    const auto x = g.normals(d), y = g.normals(d);
    const auto xy = second_lions_closed(f, mu, x, y), yx = second_lions_closed(f, mu, y, x);
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) EXPECT_NEAR(xy[a * d + b], yx[b * d + a], 1e-12);
    }
  }
}

TEST(SecondLionsDerivativeProperty, MatchesDifferenceOfFirstDerivatives) {
  // D^2 f(mu)(x, y) is the Lions derivative in mu, at y, of x -> Df(mu)(x):
  // moving particle z changes Df(x) by (1/n) D^2 f(x, y_z) dy to first order.
  gen::Gen g(68);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = g.integer(1, 3), n = g.integer(1, 6);
    const auto f = gen::smooth_cylindrical(g, d, g.integer(1, 3));
    const auto mu = g.ensemble(d, n);
    const auto x = g.normals(d);
    const std::size_t z = g.integer(0, n - 1);
    const auto analytic = second_lions_closed(f, mu, x, mu[z]);
    const double h = 1e-5;
    for (std::size_t b = 0; b < d; ++b) {
      auto plus = std::vector<double>(mu.positions().begin(), mu.positions().end()), minus = plus;
      plus[z * d + b] += h;
      minus[z * d + b] -= h;
      const auto dp = lions_derivative_closed(f, ParticleEnsemble(d, plus), x);
      const auto dm = lions_derivative_closed(f, ParticleEnsemble(d, minus), x);
      for (std::size_t a = 0; a < d; ++a) {
        // The Hessian of h_i at y_z also moves; only the outer-coupling part
        // is the D^2 f term, and it is the whole change when x != y_z.
        EXPECT_NEAR(n * (dp[a] - dm[a]) / (2 * h), analytic[a * d + b], 1e-5);
      }
    }
  }
}

// --- Generators ------------------------------------------------------------

TEST(Generator, Examples) {
  const auto bm = ConstantDiffusion::isotropic(1, 1.0);
  gen::Gen g(69);
  for (int trial = 0; trial < 20; ++trial) {
    const auto mu = g.ensemble(1, g.integer(1, 20));
    EXPECT_EQ(generator_A(mean_of(1, 0, fields::affine({1.0})), mu, 0.0, *bm), 0.0);
    EXPECT_EQ(generator_A(second_moment_fn(), mu, 0.0, *bm), 1.0);
    EXPECT_NEAR(generator_A(mean_of(1, 0, fields::square(1, 0)), mu, 0.0, *bm), 1.0, 1e-12);
  }
}

TEST(Generator, TermsBreakdown) {
  const auto bm = ConstantDiffusion::isotropic(1, 1.0);
  const auto mu = line({0.3, -1.0, 2.0});
  const auto t1 = generator_A_terms(second_moment_fn(), mu, 0.0, *bm);
  EXPECT_EQ(t1.pair, 0.0);
  EXPECT_EQ(t1.trace, 1.0);
  EXPECT_EQ(t1.drift, 0.0);
  const auto t2 = generator_A_terms(mean_of(1, 0, fields::square(1, 0)), mu, 0.0, *bm,
                                    PairSum::direct);
  EXPECT_NEAR(t2.pair, 1.0, 1e-15);
  EXPECT_EQ(t2.trace, 0.0);
}

TEST(GeneratorProperty, DirectAndFactorizedPairSumsAgree) {
  gen::Gen g(70);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t d = g.integer(1, 3);
    const auto c = random_coefficients(g, d);
    const auto f = g.cylindrical(d, g.integer(1, 3));
    const auto mu = g.ensemble(d, g.integer(1, 12));
    const double a = generator_A(f, mu, 0.0, *c, PairSum::factorized);
    const double b = generator_A(f, mu, 0.0, *c, PairSum::direct);
    EXPECT_NEAR(a, b, 1e-10 * (1.0 + std::abs(a)));
  }
}

TEST(GeneratorProperty, MatchesOneStepQuadratureOracle) {
  gen::Gen g(71);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t d = g.integer(1, 2);
    const auto c = random_coefficients(g, d);
    const auto f = g.cylindrical(d, g.integer(1, 3));
    const auto mu = g.ensemble(d, g.integer(1, 6));
    const double a = generator_A(f, mu, 0.0, *c);
    const double o = oracle::generator_by_quadrature(
        *c, 0.0, mu, {}, [&](std::span<const double>, const ParticleEnsemble& m) { return f(m); });
    EXPECT_NEAR(a, o, 1e-5 * (1.0 + std::abs(a))) << c->family() << " trial " << trial;
  }
}

TEST(GeneratorTilde, Examples) {
  const auto bm = ConstantDiffusion::isotropic(1, 1.0);
  gen::Gen g(72);
  // f(x, mu) = x * mu(id)
  const LiftedFunctional f(1, fields::product(2, 0, 1), {fields::coordinate(1, 0)});
  for (int trial = 0; trial < 20; ++trial) {
    const auto mu = g.ensemble(1, g.integer(1, 15));
    const Point x{g.normal()};
    EXPECT_NEAR(generator_A_tilde(f, x, mu, 0.0, *bm), 1.0, 1e-12);
    const auto terms = generator_A_tilde_terms(f, x, mu, 0.0, *bm, PairSum::direct);
    EXPECT_NEAR(terms.cross, 1.0, 1e-12);
    EXPECT_EQ(terms.point, 0.0);
  }
}

TEST(GeneratorTildeProperty, MeasureFreeIsClassicalItoGenerator) {
  gen::Gen g(73);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t d = g.integer(1, 3);
    const auto c = random_coefficients(g, d);
    const auto h = g.inner(d);
    const auto f = LiftedFunctional::from_point(h);
    const auto mu = g.ensemble(d, g.integer(1, 8));
    const auto x = g.normals(d);
    // <b, grad h> + 1/2 tr(sigma sigma^T hess h), written out independently.
    const std::size_t m = c->noise_dim();
    const auto b = c->drift(0.0, x, mu);
    const auto s = c->diffusion(0.0, x, mu);
    std::vector<double> gr(d), he(d * d);
    h.gradient(x, gr);
    h.hessian(x, he);
    double expect = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      expect += b[i] * gr[i];
      for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t l = 0; l < m; ++l) expect += 0.5 * s[i * m + l] * s[j * m + l] * he[i * d + j];
      }
    }
    EXPECT_NEAR(generator_A_tilde(f, x, mu, 0.0, *c), expect, 1e-12 * (1.0 + std::abs(expect)));
  }
}

TEST(GeneratorTildeProperty, PointFreeEqualsGeneratorA) {
  gen::Gen g(74);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t d = g.integer(1, 3);
    const auto c = random_coefficients(g, d);
    const auto f = g.cylindrical(d, g.integer(1, 3));
    const auto mu = g.ensemble(d, g.integer(1, 8));
    const double a = generator_A(f, mu, 0.0, *c);
    EXPECT_NEAR(generator_A_tilde(LiftedFunctional::from_measure(f), g.normals(d), mu, 0.0, *c), a,
                1e-12 * (1.0 + std::abs(a)));
  }
}

TEST(GeneratorTildeProperty, DirectAndFactorizedCrossTermsAgree) {
  gen::Gen g(75);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t d = g.integer(1, 3);
    const auto c = random_coefficients(g, d);
    const auto f = g.lifted(d, g.integer(1, 3));
    const auto mu = g.ensemble(d, g.integer(1, 10));
    const auto x = g.normals(d);
    const double a = generator_A_tilde(f, x, mu, 0.0, *c, PairSum::factorized);
    const double b = generator_A_tilde(f, x, mu, 0.0, *c, PairSum::direct);
    EXPECT_NEAR(a, b, 1e-10 * (1.0 + std::abs(a)));
  }
}

TEST(GeneratorTildeProperty, MatchesOneStepQuadratureOracle) {
  gen::Gen g(76);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t d = g.integer(1, 2);
    const auto c = random_coefficients(g, d);
    const auto f = g.lifted(d, g.integer(1, 2));
    const auto mu = g.ensemble(d, g.integer(1, 6));
    const auto x = g.normals(d);
    const double a = generator_A_tilde(f, x, mu, 0.0, *c);
    const double o = oracle::generator_by_quadrature(*c, 0.0, mu, x, [&](auto xs, const auto& m) {
      return f(xs, m);
    });
    EXPECT_NEAR(a, o, 1e-5 * (1.0 + std::abs(a))) << c->family() << " trial " << trial;
  }
}

TEST(Quadrature, HermiteRuleIsExactOnLowMoments) {
  EXPECT_NEAR(oracle::gaussian_expectation(1, 12, [](auto) { return 1.0; }), 1.0, 1e-14);
  EXPECT_NEAR(oracle::gaussian_expectation(1, 12, [](auto z) { return z[0] * z[0]; }), 1.0, 1e-13);
  EXPECT_NEAR(oracle::gaussian_expectation(2, 12, [](auto z) { return std::pow(z[0] * z[1], 4); }),
              9.0, 1e-10);
}

// --- Square fields -----------------------------------------------------------

TEST(SquareField, NonNegative) {
  gen::Gen g(77);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = g.integer(1, 3);
    const auto f = g.cylindrical(d, g.integer(1, 3));
    EXPECT_GE(square_field(f, f, g.ensemble(d, g.integer(1, 10))), 0.0);
  }
}

TEST(SquareFieldProperty, ChainRuleIdentity) {
  gen::Gen g(78);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = g.integer(1, 3);
    const auto f = g.cylindrical(d, g.integer(1, 3));
    const auto h = g.cylindrical(d, g.integer(1, 3));
    const auto mu = g.ensemble(d, g.integer(1, 10));
    const double lhs = square_field(f, h, mu);
    const double rhs =
        0.5 * (laplacian(product(f, h), mu) - f(mu) * laplacian(h, mu) - h(mu) * laplacian(f, mu));
    EXPECT_NEAR(lhs, rhs, 1e-10 * (1.0 + std::abs(lhs)));
  }
}

TEST(SquareFieldProperty, TimeFieldEqualsFieldOnDiracWithIdentityNoise) {
  gen::Gen g(79);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = g.integer(1, 3);
    const auto c = ConstantDiffusion::isotropic(d, 1.0);
    const auto f = g.cylindrical(d, g.integer(1, 3)), h = g.cylindrical(d, g.integer(1, 3));
    const auto mu = ParticleEnsemble::dirac(g.normals(d));
    const double a = square_field(f, h, mu);
    EXPECT_NEAR(square_field_t(f, h, mu, 0.0, *c), a, 1e-12 * (1.0 + std::abs(a)));
  }
}

TEST(SquareFieldProperty, GeneratorCarreDuChampOnPureCommonNoise) {
  // With b = 0 and constant sigma, A(fg) - f A g - g A f = Gamma_t(f, g).
  gen::Gen g(80);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = g.integer(1, 3), m = g.integer(1, 3);
    const ConstantDiffusion c(d, m, g.normals(d * m));
    const auto f = g.cylindrical(d, g.integer(1, 2)), h = g.cylindrical(d, g.integer(1, 2));
    const auto mu = g.ensemble(d, g.integer(1, 8));
    const double lhs = generator_A(product(f, h), mu, 0.0, c) - f(mu) * generator_A(h, mu, 0.0, c) -
                       h(mu) * generator_A(f, mu, 0.0, c);
    const double rhs = square_field_t(f, h, mu, 0.0, c);
    EXPECT_NEAR(lhs, rhs, 1e-10 * (1.0 + std::abs(rhs)));
  }
}

// --- Martingale checks -------------------------------------------------------

TEST(Martingale, MeanFunctionalCompensatorIsBrownianEndpoint) {
  const auto bm = ConstantDiffusion::isotropic(1, 1.0);
  const auto mu = line({0.5, -1.0, 2.0});
  MartingaleConfig cfg;
  cfg.horizon = 0.5;
  cfg.dt = 1e-2;
  cfg.replicas = 64;
  cfg.seed = 3;
  const auto samples = martingale_samples(mean_of(1, 0, fields::affine({1.0})), mu, *bm, cfg);
  for (std::size_t r = 0; r < samples.size(); ++r) {
    const auto path = BrownianPath::generate(1, cfg.dt, 50, cfg.seed, r);
    EXPECT_NEAR(samples[r], path.displacement(50)[0], 1e-12);
  }
}

TEST(Martingale, ZeroDynamicsGiveZero) {
  const ConstantDiffusion still(2, 1, {0.0, 0.0});
  gen::Gen g(81);
  MartingaleConfig cfg;
  cfg.dt = 1e-2;
  cfg.replicas = 10;
  const auto f = g.cylindrical(2, 2);
  const auto e = martingale_test(f, g.ensemble(2, 5), still, cfg);
  EXPECT_EQ(e.mean, 0.0);
  EXPECT_EQ(e.std_error, 0.0);
  const auto lf = g.lifted(2, 2);
  const auto et = martingale_test_tilde(lf, g.normals(2), g.ensemble(2, 5), still, cfg);
  EXPECT_EQ(et.mean, 0.0);
}

TEST(Martingale, SecondMomentAndProductWithinThreeStandardErrors) {
  const auto bm = ConstantDiffusion::isotropic(1, 1.0);
  const auto lmf = LinearMeanField::isotropic(1.0, 0.5, 1, 1.0);
  gen::Gen g(82);
  const auto mu = g.ensemble(1, 8);
  MartingaleConfig cfg;
  cfg.dt = 1e-3;
  cfg.replicas = 2000;
  cfg.seed = 11;
  for (const CoefficientSet* c : {static_cast<const CoefficientSet*>(bm.get()),
                                  static_cast<const CoefficientSet*>(lmf.get())}) {
    const auto e = martingale_test(second_moment_fn(), mu, *c, cfg);
    EXPECT_LT(std::abs(e.z_score()), 3.0) << c->family() << " mean " << e.mean;
    const LiftedFunctional xf(1, fields::product(2, 0, 1), {fields::coordinate(1, 0)});
    const auto et = martingale_test_tilde(xf, Point{0.7}, mu, *c, cfg);
    EXPECT_LT(std::abs(et.z_score()), 3.0) << c->family() << " mean " << et.mean;
  }
}

TEST(Martingale, DynkinForMeasureFreeFunctional) {
  const auto c = std::make_shared<TanhInteraction>(1, 0.5, 1.0, 0.7, 0.2, 0.3);
  gen::Gen g(83);
  MartingaleConfig cfg;
  cfg.dt = 1e-3;
  cfg.replicas = 2000;
  cfg.seed = 12;
  const auto f = LiftedFunctional::from_point(fields::sine({1.3}, 0.4));
  const auto e = martingale_test_tilde(f, Point{0.2}, g.ensemble(1, 6), *c, cfg);
  EXPECT_LT(std::abs(e.z_score()), 3.0) << e.mean;
}

TEST(Martingale, RejectsTooFewReplicas) {
  const auto bm = ConstantDiffusion::isotropic(1, 1.0);
  MartingaleConfig cfg;
  cfg.replicas = 1;
  EXPECT_THROW(martingale_test(second_moment_fn(), line({0.0}), *bm, cfg), InvalidArgument);
}
