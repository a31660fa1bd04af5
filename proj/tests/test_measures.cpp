#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "p2flow/csv.hpp"
#include "p2flow/measures.hpp"
#include "support.hpp"

using namespace p2flow;

namespace {

ParticleEnsemble line(std::vector<double> xs) { return ParticleEnsemble(1, std::move(xs)); }

auto scale_by(double c) {
  return [c](std::span<const double> x, std::span<double> out) {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = c * x[i];
  };
}

auto identity_field = [](std::span<const double> x, std::span<double> out) {
  std::copy(x.begin(), x.end(), out.begin());
};

}  // namespace

TEST(Measures, RejectsInvalidConstruction) {
  EXPECT_THROW(ParticleEnsemble(0, {1.0}), InvalidArgument);
  EXPECT_THROW(ParticleEnsemble(1, {}), InvalidArgument);
  EXPECT_THROW(ParticleEnsemble(2, {1.0, 2.0, 3.0}), InvalidArgument);
  EXPECT_THROW(line({0.0, std::numeric_limits<double>::quiet_NaN()}), InvalidArgument);
  EXPECT_THROW(line({std::numeric_limits<double>::infinity()}), InvalidArgument);
  EXPECT_THROW(TaggedEnsemble(line({0.0}), {1.0, std::nan("")}), InvalidArgument);
  EXPECT_THROW(TaggedEnsemble(ParticleEnsemble(2, {0.0, 0.0}), {1.0}), InvalidArgument);
}

TEST(Measures, SecondMomentExamples) {
  EXPECT_EQ(second_moment(line({0.0})), 0.0);
  EXPECT_EQ(second_moment(line({-1.0, 1.0})), 1.0);
  EXPECT_EQ(second_moment(ParticleEnsemble(2, {3.0, 4.0})), 25.0);
}

TEST(Measures, MeanExamples) {
  EXPECT_EQ(mean(line({0.0, 2.0})), (Point{1.0}));
  EXPECT_EQ(mean(ParticleEnsemble(2, {1.0, 0.0, 0.0, 1.0})), (Point{0.5, 0.5}));
  const Point x{0.3, -1.2, 4.0};
  EXPECT_EQ(mean(ParticleEnsemble::dirac(x)), x);
}

TEST(Measures, PushforwardExamples) {
  const auto mu = line({0.0, 1.0});
  EXPECT_EQ(pushforward(mu, identity_field), mu);
  EXPECT_EQ(pushforward(mu, scale_by(2.0)), line({0.0, 2.0}));
  const Point x{1.5, -2.0};
  const auto image = pushforward(ParticleEnsemble::dirac(x), [](std::span<const double> p,
                                                               std::span<double> out) {
    out[0] = std::sin(p[0]) + p[1];
    out[1] = p[0] * p[1];
  });
  EXPECT_EQ(image.size(), 1u);
  EXPECT_EQ(image[0][0], std::sin(1.5) - 2.0);
  EXPECT_EQ(image[0][1], -3.0);
}

TEST(Measures, PushforwardNamesNonFiniteParticle) {
  const auto mu = line({1.0, 0.0, 2.0});
  try {
    pushforward(mu, [](std::span<const double> x, std::span<double> out) { out[0] = 1.0 / x[0]; });
    FAIL() << "expected rejection";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("particle 1"), std::string::npos) << e.what();
  }
}

TEST(Measures, PerturbExamples) {
  const auto mu = line({0.0, 2.0});
  EXPECT_EQ(perturb(mu, identity_field, 0.0), mu);
  EXPECT_EQ(perturb(line({1.0}), identity_field, 0.5), line({1.5}));
  const auto doubled = perturb(mu, identity_field, 1.0);
  EXPECT_EQ(doubled, line({0.0, 4.0}));
  EXPECT_EQ(second_moment(mu), 2.0);
  EXPECT_EQ(second_moment(doubled), 8.0);
}

TEST(Measures, IntegrateAveragesOverParticles) {
  const auto mu = line({1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(integrate(mu, [](std::span<const double> x) { return x[0] * x[0]; }), 14.0 / 3.0);
}

TEST(Measures, TaggedPointsStayOutOfStatistics) {
  const auto base = line({-1.0, 1.0});
  const TaggedEnsemble t(base, {100.0, -50.0});
  EXPECT_EQ(t.tagged_count(), 2u);
  EXPECT_EQ(second_moment(t.base()), 1.0);
  EXPECT_EQ(mean(t.base()), (Point{0.0}));
  EXPECT_EQ(t.tagged(1)[0], -50.0);
}

TEST(MeasuresProperty, PushforwardPreservesShapeAndOrder) {
  gen::Gen g(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = g.integer(1, 4), n = g.integer(1, 30);
    const auto mu = g.ensemble(d, n);
    const double shift = g.normal();
    const auto image = pushforward(mu, [shift](std::span<const double> x, std::span<double> out) {
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + shift;
    });
    ASSERT_EQ(image.size(), n);
    ASSERT_EQ(image.dim(), d);
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t i = 0; i < d; ++i) ASSERT_EQ(image[p][i], mu[p][i] + shift);
    }
  }
}

TEST(MeasuresProperty, SecondMomentScalesQuadratically) {
  gen::Gen g(12);
  for (int trial = 0; trial < 200; ++trial) {
    const auto mu = g.ensemble(g.integer(1, 4), g.integer(1, 40));
    const double c = g.uniform(-3.0, 3.0);
    const double lhs = second_moment(pushforward(mu, scale_by(c)));
    EXPECT_NEAR(lhs, c * c * second_moment(mu), 1e-12 * (1.0 + lhs));
  }
}

TEST(MeasuresProperty, ZeroPerturbationIsExactIdentity) {
  gen::Gen g(13);
  for (int trial = 0; trial < 100; ++trial) {
    const auto mu = g.ensemble(g.integer(1, 3), g.integer(1, 20));
    EXPECT_EQ(perturb(mu, [](std::span<const double> x, std::span<double> out) {
                for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i]);
              }, 0.0),
              mu);
  }
}

TEST(Csv, RoundTripIsBitExact) {
  gen::Gen g(14);
  const auto mu = g.ensemble(3, 17, 1e3);
  std::stringstream ss;
  write_ensemble_csv(ss, mu);
  const auto [d, flat] = read_points_csv(ss, "memory");
  EXPECT_EQ(d, 3u);
  EXPECT_EQ(ParticleEnsemble(d, flat), mu);
}

TEST(Csv, HeaderAndErrors) {
  EXPECT_EQ(csv_header(3), "p0,p1,p2");
  std::stringstream bad_header("x,y\n1,2\n");
  EXPECT_THROW(read_points_csv(bad_header, "bad"), Error);
  std::stringstream ragged("p0,p1\n1,2\n3\n");
  EXPECT_THROW(read_points_csv(ragged, "ragged"), Error);
  std::stringstream junk("p0\nabc\n");
  EXPECT_THROW(read_points_csv(junk, "junk"), Error);
  std::stringstream empty_tagged("p0,p1\n");
  EXPECT_EQ(read_points_csv(empty_tagged, "tagged").second.size(), 0u);
}
