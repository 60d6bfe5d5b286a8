#include <doctest.h>

#include "shiftcai/errors.hpp"
#include "support.hpp"

using namespace shiftcai;
using namespace shiftcai::testing;

namespace {

DesignSet fixed_gls_design() {
  DesignSet d;
  d.X_full.resize(6, 2);
  d.X_full << 1, 0.3, 1, -1.2, 1, 0.8, 1, 1.5, 1, -0.4, 1, 0.9;
  d.Z = block_ones({3, 3});
  d.G = MatrixXd::Identity(2, 2);
  d.R = MatrixXd::Identity(6, 6);
  d.Xt_full = d.X_full.topRows(2);
  d.Zt = d.Z.topRows(2);
  d.Rt = MatrixXd::Identity(2, 2);
  return d;
}

}  // namespace

TEST_CASE("candidate labels are one-based and round-trip") {
  const CandidateModel j = CandidateModel::parse("1;3;4", 5);
  CHECK(j.indices() == std::vector<Index>{0, 2, 3});
  CHECK(j.label() == "1;3;4");
  CHECK(j.size() == 3);
  CHECK_FALSE(j.is_full());
  CHECK(CandidateModel::full(4).is_full());
  CHECK_THROWS_AS(CandidateModel::parse("0;2", 3), InputError);
  CHECK_THROWS_AS(CandidateModel::parse("2;2", 3), InputError);
  CHECK_THROWS_AS(CandidateModel::parse("1;x", 3), InputError);
  CHECK_THROWS_AS(CandidateModel({}, 3), InputError);
}

TEST_CASE("all_subsets with a forced intercept has 2^(p-1) members") {
  const auto all = all_subsets(8, {0});
  CHECK(all.size() == 128);
  for (const auto& c : all) CHECK(c.contains(0));
  CHECK(all.front().size() == 1);
  CHECK(all.back().is_full());
  CHECK(all_subsets(3).size() == 7);
  const auto chain = nested_chain(4);
  REQUIRE(chain.size() == 4);
  for (Index k = 0; k < 4; ++k) CHECK(chain[static_cast<std::size_t>(k)] == CandidateModel::leading(k + 1, 4));
}

TEST_CASE("assemble_covariance: no random effects gives R") {
  Rng rng(3);
  DesignSet d = random_general(6, 3, 2, 2, rng);
  d.Z.setZero();
  const CovarianceAssembly c = assemble_covariance(d);
  CHECK(max_abs(c.Sigma - d.R) == 0.0);
}

TEST_CASE("assemble_covariance: NERM blocks are I + J") {
  Rng rng(4);
  const DesignSet d = random_nerm(3, 4, 2, 2, 1.0, rng);
  const CovarianceAssembly c = assemble_covariance(d);
  for (Index r = 0; r < d.n(); ++r)
    for (Index s = 0; s < d.n(); ++s) {
      const double expected = (r / 4 == s / 4 ? 1.0 : 0.0) + (r == s ? 1.0 : 0.0);
      CHECK(c.Sigma(r, s) == doctest::Approx(expected).epsilon(1e-14));
    }
}

TEST_CASE("assemble_covariance matches entrywise ZGZ' + R for random SPD G, R") {
  Rng rng(5);
  const DesignSet d = random_general(5, 3, 2, 2, rng);
  const CovarianceAssembly c = assemble_covariance(d);
  for (Index r = 0; r < 5; ++r)
    for (Index s = 0; s < 5; ++s) {
      double v = d.R(r, s);
      for (Index a = 0; a < 2; ++a)
        for (Index b = 0; b < 2; ++b) v += d.Z(r, a) * d.G(a, b) * d.Z(s, b);
      CHECK(c.Sigma(r, s) == doctest::Approx(v).epsilon(1e-12));
    }
  const MatrixXd I = c.solve(MatrixXd(c.Sigma));
  CHECK((I - MatrixXd::Identity(5, 5)).norm() < 1e-8);
}

TEST_CASE("assemble_covariance reports a non-SPD Sigma with its smallest eigenvalue") {
  Rng rng(6);
  DesignSet d = random_general(4, 2, 1, 2, rng);
  d.Z.setZero();
  d.R = MatrixXd::Identity(4, 4);
  d.R(2, 2) = -0.5;
  try {
    (void)assemble_covariance(d);
    FAIL("expected NotPositiveDefiniteError");
  } catch (const NotPositiveDefiniteError& e) {
    CHECK(e.smallest_eigenvalue() == doctest::Approx(-0.5));
  }
}

TEST_CASE("design validation rejects bad shapes and rank deficiency") {
  Rng rng(7);
  DesignSet d = random_nerm(2, 3, 1, 2, 1.0, rng);
  DesignSet bad = d;
  bad.Zt = MatrixXd::Ones(bad.m(), 3);
  CHECK_THROWS_AS(bad.validate(), InputError);
  bad = d;
  bad.X_full.col(1) = 2.0 * bad.X_full.col(0);
  CHECK_THROWS_AS(bad.validate(), RankDeficientError);
  bad = d;
  bad.Xt_full.resize(0, 2);
  bad.Zt.resize(0, 2);
  bad.Rt.resize(0, 0);
  CHECK_THROWS_AS(bad.validate(), InputError);
}

TEST_CASE("gls_fit: intercept only with Sigma = I is the mean and divisor-n variance") {
  DesignSet d;
  d.X_full = MatrixXd::Ones(5, 1);
  d.Z = MatrixXd::Zero(5, 1);
  d.G = MatrixXd::Identity(1, 1);
  d.R = MatrixXd::Identity(5, 5);
  d.Xt_full = MatrixXd::Ones(1, 1);
  d.Zt = MatrixXd::Zero(1, 1);
  d.Rt = MatrixXd::Identity(1, 1);
  const LmmSystem sys(d);
  VectorXd y(5);
  y << 1.0, 2.0, 4.0, 7.0, 11.0;
  const ObservedFit f = gls_fit(y, sys, CandidateModel::full(1));
  CHECK(f.beta_hat(0) == doctest::Approx(5.0));
  CHECK(f.sigma2_hat == doctest::Approx((16.0 + 9.0 + 1.0 + 4.0 + 36.0) / 5.0));
}

TEST_CASE("gls_fit: y in the column space is a degenerate fit") {
  Rng rng(8);
  const LmmSystem sys(random_nerm(3, 3, 1, 3, 1.0, rng));
  const VectorXd y = sys.design().X_full * Eigen::Vector3d(1.0, -2.0, 0.5);
  CHECK_THROWS_AS(gls_fit(y, sys, CandidateModel::full(3)), DegenerateFitError);
}

TEST_CASE("gls_fit: n=6, q=2, psi=1 matches the dense-inverse oracle") {
  const LmmSystem sys(fixed_gls_design());
  VectorXd y(6);
  y << 1.1, 0.4, 2.3, 3.0, 0.2, 1.7;
  const ObservedFit f = gls_fit(y, sys, CandidateModel::full(2));
  CHECK(f.beta_hat(0) == doctest::Approx(1.1064903136984956).epsilon(1e-12));
  CHECK(f.beta_hat(1) == doctest::Approx(1.0847674304258041).epsilon(1e-12));
  CHECK(f.sigma2_hat == doctest::Approx(0.13964794965089974).epsilon(1e-12));
  CHECK(f.b_hat(0) == doctest::Approx(0.1472514504867734).epsilon(1e-12));
  CHECK(f.b_hat(1) == doctest::Approx(-0.14725145048677374).epsilon(1e-12));
}

TEST_CASE("gls_fit rejects rank-deficient candidates") {
  Rng rng(9);
  DesignSet d = random_nerm(3, 3, 1, 3, 1.0, rng);
  const LmmSystem sys(d);
  CHECK_NOTHROW(candidate_basis(sys, CandidateModel::parse("1;2", 3)));
  MatrixXd Xbad = d.X_full;
  Xbad.col(2) = Xbad.col(1) * 3.0 + Xbad.col(0);
  DesignSet bad = d;
  bad.X_full = Xbad;
  CHECK_THROWS_AS(LmmSystem{bad}, RankDeficientError);
}

TEST_CASE("full_model_unbiased rescales by n/(n - p)") {
  ObservedFit f;
  f.candidate = CandidateModel::full(3);
  f.beta_hat = VectorXd::Ones(3);
  f.sigma2_hat = 0.7;
  const ParameterPoint eta = full_model_unbiased(f, 10);
  CHECK(eta.sigma2 == doctest::Approx(1.0).epsilon(1e-15));

  Rng rng(10);
  const LmmSystem sys(random_nerm(4, 3, 2, 3, 0.8, rng));
  const VectorXd y = simulate_response(sys, TruthParams{VectorXd::Ones(3), 1.5}, rng);
  const ParameterPoint tilde = full_model_unbiased(y, sys);
  const ObservedFit omega = gls_fit(y, sys, CandidateModel::full(3));
  CHECK((tilde.beta - omega.beta_hat).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("sigma2 tilde is unbiased under simulation") {
  Rng rng(11);
  const LmmSystem sys(random_nerm(5, 4, 2, 3, 1.0, rng));
  const TruthParams truth{Eigen::Vector3d(1.0, -0.5, 2.0), 2.0};
  Moments m;
  for (int rep = 0; rep < 5000; ++rep) m.add(full_model_unbiased(simulate_response(sys, truth, rng), sys).sigma2);
  CHECK(std::abs(m.mean - truth.sigma2_star) < 3.0 * m.se());
}

TEST_CASE("projections: j = omega gives identical projectors") {
  Rng rng(12);
  const LmmSystem sys(random_general(9, 4, 3, 3, rng));
  const Projections p = projections(sys, CandidateModel::full(3));
  CHECK(max_abs(p.P_omega - p.P_j) < 1e-12);
}

TEST_CASE("projections: n=5, p=2 instance matches the dense oracle") {
  DesignSet d;
  d.X_full.resize(5, 2);
  d.X_full << 1, 0.5, 1, -0.3, 1, 1.2, 1, 0.1, 1, -0.8;
  d.Z.resize(5, 2);
  d.Z << 1, 0, 1, 0, 0, 1, 0, 1, 0, 1;
  d.G.resize(2, 2);
  d.G << 1.0, 0.3, 0.3, 0.5;
  d.R = VectorXd((VectorXd(5) << 1.0, 2.0, 1.0, 0.5, 1.0).finished()).asDiagonal();
  d.Xt_full = d.X_full.topRows(1);
  d.Zt = d.Z.topRows(1);
  d.Rt = MatrixXd::Identity(1, 1);
  const LmmSystem sys(d);
  const Projections p = projections(sys, CandidateModel::parse("2", 2));
  const double expected[25] = {
      0.05127681948738878,    -0.03444352016072075,   0.1635419773044748,     -0.0033666598653335936,
      -0.13686767221760088,   -0.03444352016072074,   0.023136303946342716,   -0.10985395445199568,
      0.0022614432428755965,  0.09193636568151975,    0.1635419773044748,     -0.10985395445199568,
      0.521599791251393,      -0.010737604570495784,  -0.4365249242697723,    -0.0033666598653336027,
      0.0022614432428756013,  -0.010737604570495806,  0.00022104332449159915, 0.008986261307216206,
      -0.13686767221760088,   0.09193636568151976,    -0.43652492426977235,   0.008986261307216185,
      0.36532608468182853};
  for (Index r = 0; r < 5; ++r)
    for (Index c = 0; c < 5; ++c) CHECK(p.P_j(r, c) == doctest::Approx(expected[r * 5 + c]).epsilon(1e-10));
}

// Property checks over randomly generated general designs.
TEST_CASE("property: GLS orthogonality, projector algebra and nesting") {
  Rng rng(13);
  for (int inst = 0; inst < 25; ++inst) {
    const Index q = 2 + inst % 3;
    const Index n = 8 + inst % 7;
    const Index p = 2 + inst % 3;
    const LmmSystem sys(random_general(n, 4, q, p, rng));
    const VectorXd y = sys.design().X_full * VectorXd::Ones(p) + rng.normal_vector(n);
    const auto chain = nested_chain(p);
    double previous = std::numeric_limits<double>::infinity();
    for (const auto& j : chain) {
      const ObservedFit f = gls_fit(y, sys, j);
      const MatrixXd Xj = columns(sys.design().X_full, j);
      const VectorXd resid = y - Xj * f.beta_hat;
      const VectorXd normal = Xj.transpose() * sys.covariance().solve(resid);
      CHECK(normal.cwiseAbs().maxCoeff() <= 1e-8 * y.norm());
      CHECK(f.sigma2_hat <= previous * (1.0 + 1e-12));
      previous = f.sigma2_hat;

      const Projections pr = projections(sys, j);
      const MatrixXd PS = pr.P_j * sys.covariance().Sigma;
      CHECK(max_abs(PS * PS - PS) < 1e-8);
      CHECK(PS.trace() == doctest::Approx(static_cast<double>(j.size())).epsilon(1e-6));
    }
  }
}

TEST_CASE("property: overspecified n*sigma2_j/sigma2* follows chi-square(n - p_j)") {
  Rng rng(14);
  const LmmSystem sys(random_nerm(10, 3, 3, 4, 1.0, rng));
  const TruthParams truth{Eigen::Vector4d(1.0, 0.5, 0.0, 0.0), 1.3};
  const CandidateModel j = CandidateModel::parse("1;2", 4);
  Moments m;
  Rng draws(derive_seed(14, 1));
  for (int rep = 0; rep < 5000; ++rep) {
    const ObservedFit f = gls_fit(simulate_response(sys, truth, draws), sys, j);
    m.add(30.0 * f.sigma2_hat / truth.sigma2_star);
  }
  const double df = 30.0 - 2.0;
  CHECK(std::abs(m.mean - df) < 3.0 * m.se());
  // SE of a sample variance from the chi-square fourth central moment 12df(df + 4).
  const double mu4 = 12.0 * df * (df + 4.0);
  const double var_se = std::sqrt((mu4 - 4.0 * df * df * 4997.0 / 4999.0) / 5000.0);
  CHECK(std::abs(m.variance() - 2.0 * df) < 3.0 * var_se);
}
