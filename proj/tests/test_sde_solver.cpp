#include <gtest/gtest.h>

#include <cmath>

#include "p2flow/sde_solver.hpp"
#include "p2flow/wasserstein.hpp"
#include "support.hpp"

using namespace p2flow;

namespace {

const auto noop = [](std::size_t, double, const ParticleEnsemble&, std::span<const double>) {};

// Drift that explodes in finite time, to trip the blow-up guard.
class Explosive final : public CoefficientSet {
 public:
  std::size_t dim() const override { return 1; }
  std::size_t noise_dim() const override { return 1; }
  std::string family() const override { return "explosive"; }
  std::unique_ptr<FrozenCoefficients> freeze(double t, const ParticleEnsemble& mu) const override {
    return std::make_unique<Frozen>(*this, t, mu);
  }

 private:
  class Frozen final : public FrozenCoefficients {
   public:
    using FrozenCoefficients::FrozenCoefficients;
    void drift(std::span<const double> x, std::span<double> out) const override {
      out[0] = x[0] * x[0] * x[0];
    }
    void diffusion(std::span<const double>, std::span<double> out) const override { out[0] = 0.0; }
  };
};

}  // namespace

TEST(BrownianPath, ReproducibleFromSeedAndStream) {
  const auto a = BrownianPath::generate(2, 1e-2, 50, 9, 4);
  const auto b = BrownianPath::generate(2, 1e-2, 50, 9, 4);
  const auto c = BrownianPath::generate(2, 1e-2, 50, 9, 5);
  for (std::size_t k = 0; k < 50; ++k) {
    for (std::size_t l = 0; l < 2; ++l) {
      EXPECT_EQ(a.increment(k)[l], b.increment(k)[l]);
    }
  }
  EXPECT_NE(a.increment(0)[0], c.increment(0)[0]);
  EXPECT_EQ(a.steps(), 50u);
  EXPECT_DOUBLE_EQ(a.end_time(), 0.5);
}

TEST(BrownianPath, IncrementVarianceIsDt) {
  const double dt = 1e-2;
  const auto p = BrownianPath::generate(1, dt, 200000, 1, 0);
  double s = 0.0;
  for (std::size_t k = 0; k < p.steps(); ++k) s += p.increment(k)[0] * p.increment(k)[0];
  EXPECT_NEAR(s / p.steps() / dt, 1.0, 5.0 * std::sqrt(2.0 / p.steps()));
}

TEST(BrownianPath, GridIndexRejectsOffGridTimes) {
  const auto p = BrownianPath::generate(1, 0.1, 10, 0, 0, 0.5);
  EXPECT_EQ(p.grid_index(0.5), 0u);
  EXPECT_EQ(p.grid_index(1.5), 10u);
  EXPECT_THROW(p.grid_index(0.55), InvalidArgument);
  EXPECT_THROW(p.grid_index(1.6), InvalidArgument);
  EXPECT_THROW(p.grid_index(0.4), InvalidArgument);
}

TEST(SimulationConfig, StepsMustTileHorizon) {
  SimulationConfig sc;
  sc.dt = 0.1;
  sc.horizon = 1.0;
  EXPECT_EQ(sc.steps(), 10u);
  sc.horizon = 1.05;
  EXPECT_THROW(sc.steps(), InvalidArgument);
  sc.dt = 0.0;
  EXPECT_THROW(sc.steps(), InvalidArgument);
}

TEST(EulerStep, ZeroCoefficientsLeaveStateUnchanged) {
  const ConstantDiffusion zero(2, 1, {0.0, 0.0});
  gen::Gen g(41);
  const TaggedEnsemble st(g.ensemble(2, 5), g.normals(4));
  EXPECT_EQ(euler_step(st, 0.0, zero, std::vector<double>{0.7}, 0.1), st);
}

TEST(EulerStep, CommonNoiseShiftsEveryParticleEqually) {
  const auto bm = ConstantDiffusion::isotropic(1, 1.0);
  gen::Gen g(42);
  const TaggedEnsemble st(g.ensemble(1, 6), {3.0});
  const std::vector<double> dw{0.37};
  const auto next = euler_step(st, 0.0, *bm, dw, 0.01);
  for (std::size_t p = 0; p < 6; ++p) EXPECT_EQ(next.base()[p][0], st.base()[p][0] + 0.37);
  EXPECT_EQ(next.tagged(0)[0], 3.37);
}

TEST(EulerStep, DeterministicLinearMapMatchesClosedForm) {
  const LinearMeanField lmf(2.0, 0.0, 1, 1, {0.0});
  const TaggedEnsemble st(ParticleEnsemble(1, {1.0, -3.0}), {}), next =
      euler_step(st, 0.0, lmf, std::vector<double>{5.0}, 0.1);
  EXPECT_DOUBLE_EQ(next.base()[0][0], 1.0 * (1 - 0.2));
  EXPECT_DOUBLE_EQ(next.base()[1][0], -3.0 * (1 - 0.2));
}

TEST(EulerStep, TaggedPointsNeverEnterTheMeasure) {
  const auto lmf = LinearMeanField::isotropic(1.0, 0.8, 1, 0.5);
  const ParticleEnsemble base(1, {0.0, 1.0});
  const std::vector<double> dw{0.2};
  const auto without = euler_step(TaggedEnsemble(base), 0.0, *lmf, dw, 0.1);
  const auto with = euler_step(TaggedEnsemble(base, {1e6, -1e6}), 0.0, *lmf, dw, 0.1);
  EXPECT_EQ(without.base(), with.base());
}

TEST(EulerStep, BlowUpAbortsWithLocation) {
  const Explosive ex;
  const auto path = BrownianPath::generate(1, 0.1, 100, 0, 0);
  try {
    simulate(ParticleEnsemble(1, {0.0, 10.0}), 0.0, 10.0, ex, path);
    FAIL();
  } catch (const NumericalAbort& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("particle 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("step"), std::string::npos) << msg;
    EXPECT_EQ(e.code(), ErrorCode::numerical_abort);
  }
}

TEST(Simulate, DiracStaysDiracAndMatchesTagged) {
  const auto c = std::make_shared<TanhInteraction>(2, 0.5, 1.0, 0.7, 0.2, 0.3);
  const Point x{0.4, -1.1};
  const auto path = BrownianPath::generate(2, 1e-3, 500, 3, 0);
  const auto tr = simulate(ParticleEnsemble::dirac(x), x, 0.0, 0.5, *c, path);
  ASSERT_EQ(tr.snapshots.size(), 501u);
  for (const auto& s : tr.snapshots) {
    ASSERT_EQ(s.base().size(), 1u);
    ASSERT_EQ(s.base()[0][0], s.tagged(0)[0]);
    ASSERT_EQ(s.base()[0][1], s.tagged(0)[1]);
  }
}

TEST(Simulate, AffineFlowIsAffineImage) {
  const double a = 1.5;
  const LinearMeanField c(a, 0.0, 1, 1, {0.8});
  gen::Gen g(43);
  const auto mu = g.ensemble(1, 10);
  const auto path = BrownianPath::generate(1, 1e-3, 1000, 4, 0);
  const auto end = simulate(mu, 0.0, 1.0, c, path).terminal().base();
  // x_T = x_0 (1 - a dt)^N + G with G shared by all particles.
  const double factor = std::pow(1 - a * 1e-3, 1000);
  const double G = end[0][0] - mu[0][0] * factor;
  for (std::size_t p = 0; p < 10; ++p) EXPECT_NEAR(end[p][0], mu[p][0] * factor + G, 1e-12);
  EXPECT_NEAR(factor, std::exp(-a), 2e-3);
}

TEST(Simulate, TranslationLeavesShapeIntact) {
  const auto bm = ConstantDiffusion::isotropic(2, 1.0);
  gen::Gen g(44);
  const auto mu = g.ensemble(2, 8);
  const auto path = BrownianPath::generate(2, 1e-2, 100, 5, 0);
  const auto end = simulate(mu, 0.0, 1.0, *bm, path).terminal().base();
  Point w(2, 0.0);
  for (std::size_t k = 0; k < 100; ++k) {
    for (std::size_t l = 0; l < 2; ++l) w[l] += path.increment(k)[l];
  }
  const auto shifted = pushforward(mu, [&](std::span<const double> x, std::span<double> out) {
    out[0] = x[0] + w[0];
    out[1] = x[1] + w[1];
  });
  EXPECT_LT(w2_assignment(end, shifted).distance, 1e-12);
}

TEST(Simulate, IndexCouplingDecaysForLinearMeanField) {
  const auto c = LinearMeanField::isotropic(1.0, 0.5, 1, 1.0);
  gen::Gen g(45);
  const auto mu = g.ensemble(1, 16), nu = g.ensemble(1, 16, 2.0);
  const auto path = BrownianPath::generate(1, 1e-3, 2000, 6, 0);
  std::vector<ParticleEnsemble> a, b;
  simulate_observed(mu, {}, 0.0, 2.0, *c, path,
                    [&](std::size_t, double, const ParticleEnsemble& m, std::span<const double>) {
                      a.push_back(m);
                    });
  simulate_observed(nu, {}, 0.0, 2.0, *c, path,
                    [&](std::size_t, double, const ParticleEnsemble& m, std::span<const double>) {
                      b.push_back(m);
                    });
  const double cost0 = index_coupling_cost(mu, nu);
  double prev = cost0;
  for (std::size_t k = 1; k < a.size(); ++k) {
    const double cost = index_coupling_cost(a[k], b[k]);
    ASSERT_LE(cost, prev * (1 + 1e-12));
    ASSERT_LE(cost, cost0 * std::exp(-(1.5 - 0.5) * k * 1e-3) * (1 + 1e-9));
    prev = cost;
  }
}

TEST(Simulate, ThinningKeepsTerminal) {
  const auto bm = ConstantDiffusion::isotropic(1, 1.0);
  const auto path = BrownianPath::generate(1, 0.1, 10, 0, 0);
  const auto tr = simulate(ParticleEnsemble(1, {0.0}), 0.0, 1.0, *bm, path, 3);
  EXPECT_EQ(tr.times.size(), 5u);  // 0, 3, 6, 9, 10
  EXPECT_DOUBLE_EQ(tr.times.back(), 1.0);
  EXPECT_THROW(simulate(ParticleEnsemble(1, {0.0}), 0.0, 1.0, *bm, path, 0), InvalidArgument);
}

TEST(Simulate, DimensionMismatchRejected) {
  const auto bm = ConstantDiffusion::isotropic(2, 1.0);
  const auto path = BrownianPath::generate(2, 0.1, 10, 0, 0);
  EXPECT_THROW(simulate(ParticleEnsemble(1, {0.0}), 0.0, 1.0, *bm, path), InvalidArgument);
  const auto path1 = BrownianPath::generate(1, 0.1, 10, 0, 0);
  EXPECT_THROW(simulate(ParticleEnsemble(2, {0.0, 0.0}), 0.0, 1.0, *bm, path1), InvalidArgument);
}

TEST(Simulate, BitwiseDeterministic) {
  const auto c = std::make_shared<TanhInteraction>(2, 0.5, 1.0, 0.7, 0.2, 0.3);
  gen::Gen g(46);
  const auto mu = g.ensemble(2, 12);
  const auto p1 = BrownianPath::generate(2, 1e-2, 100, 8, 1), p2 = BrownianPath::generate(2, 1e-2, 100, 8, 1);
  EXPECT_EQ(simulate(mu, 0.0, 1.0, *c, p1).snapshots, simulate(mu, 0.0, 1.0, *c, p2).snapshots);
}

TEST(SolverProperty, CommonIncrementRecoverable) {
  // sigma = s I is invertible, b known: dW = (x' - x - b dt) / s for every particle.
  const auto c = LinearMeanField::isotropic(0.7, 0.3, 2, 0.9);
  gen::Gen g(47);
  const auto mu = g.ensemble(2, 5);
  const TaggedEnsemble st(mu);
  const std::vector<double> dw{0.11, -0.42};
  const double dt = 0.05;
  const auto next = euler_step(st, 0.0, *c, dw, dt);
  for (std::size_t p = 0; p < 5; ++p) {
    const auto b = c->drift(0.0, mu[p], mu);
    for (std::size_t i = 0; i < 2; ++i) {
      EXPECT_NEAR((next.base()[p][i] - mu[p][i] - b[i] * dt) / 0.9, dw[i], 1e-14);
    }
  }
}

TEST(SolverProperty, MomentsStayBounded) {
  const auto c = LinearMeanField::isotropic(1.0, 0.5, 2, 1.0);
  gen::Gen g(48);
  const auto mu = g.ensemble(2, 16);
  const Point x{1.0, -2.0};
  const double base = 1.0 + 5.0 + second_moment(mu);
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto path = BrownianPath::generate(2, 1e-2, 100, seed, 0);
    simulate_observed(mu, x, 0.0, 1.0, *c, path,
                      [&](std::size_t, double, const ParticleEnsemble& m, std::span<const double> t) {
                        worst = std::max({worst, second_moment(m) / base,
                                          (t[0] * t[0] + t[1] * t[1]) / base});
                      });
  }
  EXPECT_LT(worst, 10.0);
}

TEST(SolverProperty, TaggedStabilityIsLinearInPerturbation) {
  const auto c = std::make_shared<TanhInteraction>(1, 0.5, 1.0, 0.7, 0.2, 0.3);
  gen::Gen g(49);
  const auto mu = g.ensemble(1, 8);
  for (double h : {1e-2, 1e-3, 1e-4}) {
    double s = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto path = BrownianPath::generate(1, 1e-2, 100, seed, 0);
      const std::vector<double> tagged{0.3, 0.3 + h};
      const auto end = simulate_observed(mu, tagged, 0.0, 1.0, *c, path, noop);
      const double diff = end.tagged(1)[0] - end.tagged(0)[0];
      s += diff * diff;
    }
    EXPECT_LT(std::sqrt(s / 20) / h, 5.0) << "h = " << h;
  }
}

TEST(Picard, MeasureFreeConvergesImmediately) {
  const LinearMeanField c(1.0, 0.0, 1, 1, {1.0});
  gen::Gen g(50);
  const auto mu = g.ensemble(1, 10);
  const auto path = BrownianPath::generate(1, 1e-3, 250, 1, 0);
  const auto r = picard_solve(mu, 0.0, 0.25, c, path);
  ASSERT_TRUE(r.converged);
  EXPECT_LE(r.iterations, 2u);
  for (double ratio : r.ratios) EXPECT_LT(ratio, 1e-12);
  EXPECT_EQ(r.trajectory.terminal().base(), simulate(mu, 0.0, 0.25, c, path).terminal().base());
}

TEST(Picard, ContractsAndMatchesDirectSolver) {
  const auto c = LinearMeanField::isotropic(1.0, 0.5, 1, 1.0);
  gen::Gen g(51);
  const auto mu = g.ensemble(1, 32);
  const auto path = BrownianPath::generate(1, 1e-3, 250, 2, 0);
  const auto r = picard_solve(mu, 0.0, 0.25, *c, path);
  ASSERT_TRUE(r.converged);
  ASSERT_FALSE(r.ratios.empty());
  for (double ratio : r.ratios) EXPECT_LT(ratio, 1.0);
  const auto direct = simulate(mu, 0.0, 0.25, *c, path).terminal().base();
  EXPECT_LT(index_coupling_cost(r.trajectory.terminal().base(), direct), 1e-8 * 10);
}

TEST(Picard, ReportsNonConvergence) {
  const auto c = LinearMeanField::isotropic(1.0, 0.5, 1, 1.0);
  gen::Gen g(52);
  const auto mu = g.ensemble(1, 8);
  const auto path = BrownianPath::generate(1, 1e-3, 250, 2, 0);
  const auto r = picard_solve(mu, 0.0, 0.25, *c, path, 2, 1e-30);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.iterations, 2u);
  EXPECT_EQ(r.distances.size(), 2u);
}

TEST(FlowCompose, ExactOnMatchingGrid) {
  const auto c = std::make_shared<TanhInteraction>(2, 0.5, 1.0, 0.7, 0.2, 0.3);
  gen::Gen g(53);
  const auto mu = g.ensemble(2, 6);
  const auto tagged = g.normals(4);
  const auto path = BrownianPath::generate(2, 1e-2, 100, 3, 0);
  EXPECT_EQ(flow_compose_check(mu, tagged, 0.2, 0.5, 0.9, *c, path).max_abs, 0.0);
  EXPECT_EQ(flow_compose_check(mu, tagged, 0.3, 0.3, 0.7, *c, path).max_abs, 0.0);
  EXPECT_EQ(flow_compose_check(mu, tagged, 0.3, 0.7, 0.7, *c, path).max_abs, 0.0);
  EXPECT_THROW(flow_compose_check(mu, tagged, 0.5, 0.3, 0.7, *c, path), InvalidArgument);
}

TEST(Conditional, TaggedDuplicatesFollowBaseParticles) {
  const auto c = std::make_shared<TanhInteraction>(1, 0.5, 1.0, 0.7, 0.2, 0.3);
  const ParticleEnsemble mu(1, {-1.0, 0.5, 2.0});
  const auto path = BrownianPath::generate(1, 1e-2, 100, 4, 0);
  const std::vector<double> samples{0.5, 2.0};
  const auto sol = conditional_mkv_solve(mu, samples, 0.0, 1.0, *c, path);
  const auto& last = sol.trajectory.terminal();
  EXPECT_EQ(last.tagged(0)[0], last.base()[1][0]);
  EXPECT_EQ(last.tagged(1)[0], last.base()[2][0]);
  EXPECT_EQ(sol.sample_count(), 2u);
}

TEST(Conditional, BrownianConditionalLawIsTranslate) {
  const auto bm = ConstantDiffusion::isotropic(1, 1.0);
  gen::Gen g(54);
  const auto mu = g.ensemble(1, 10);
  const auto path = BrownianPath::generate(1, 1e-2, 100, 5, 0);
  const auto sol = conditional_mkv_solve(mu, g.normals(3), 0.0, 1.0, *bm, path);
  const auto w = path.displacement(100);
  const auto expected = pushforward(mu, [&](std::span<const double> x, std::span<double> out) {
    out[0] = x[0] + w[0];
  });
  EXPECT_LT(w2_1d(sol.conditional_law(sol.trajectory.snapshots.size() - 1), expected), 1e-12);
}

TEST(Conditional, SampleLawApproachesConditionalLaw) {
  const auto c = LinearMeanField::isotropic(1.0, 0.5, 1, 1.0);
  const auto path = BrownianPath::generate(1, 1e-2, 100, 6, 0);
  double prev = INFINITY;
  for (std::size_t n : {16u, 256u, 4096u}) {
    gen::Gen base(55), draws(56);
    const auto mu = base.ensemble(1, 2048);
    const auto sol = conditional_mkv_solve(mu, draws.normals(n), 0.0, 1.0, *c, path, 100);
    const auto& end = sol.trajectory.terminal();
    // Compare against n equally spaced quantiles of the conditional law.
    std::vector<double> cond(end.base().positions().begin(), end.base().positions().end());
    std::sort(cond.begin(), cond.end());
    std::vector<double> q(n);
    for (std::size_t i = 0; i < n; ++i) q[i] = cond[(2 * i + 1) * cond.size() / (2 * n)];
    const double dist = w2_1d(sol.sample_law(sol.trajectory.snapshots.size() - 1),
                              ParticleEnsemble(1, q));
    EXPECT_LT(dist, prev);
    prev = dist;
  }
  EXPECT_LT(prev, 0.1);
}
