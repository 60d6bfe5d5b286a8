#pragma once

#include <cmath>
#include <vector>

#include "shiftcai/lmm_core.hpp"
#include "shiftcai/random.hpp"

namespace shiftcai::testing {

/// Block indicator matrix with `sizes[i]` rows for area i.
inline MatrixXd block_ones(const std::vector<Index>& sizes) {
  Index rows = 0;
  for (Index s : sizes) rows += s;
  MatrixXd z = MatrixXd::Zero(rows, static_cast<Index>(sizes.size()));
  Index r = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i)
    for (Index k = 0; k < sizes[i]; ++k) z(r++, static_cast<Index>(i)) = 1.0;
  return z;
}

/// Intercept plus p − 1 standard normal columns.
inline MatrixXd random_covariates(Index rows, Index p, Rng& rng) {
  MatrixXd x(rows, p);
  x.col(0).setOnes();
  for (Index c = 1; c < p; ++c)
    for (Index r = 0; r < rows; ++r) x(r, c) = rng.normal();
  return x;
}

/// NERM observed part with a shifted unit-level predictive part drawn from
/// N(shift, 1) covariates; every area gets `r_per_area` predictive rows.
inline DesignSet random_nerm(Index q, Index n_per_area, Index r_per_area, Index p, double psi, Rng& rng,
                             double shift = 0.5) {
  DesignSet d;
  d.X_full = random_covariates(q * n_per_area, p, rng);
  d.Z = block_ones(std::vector<Index>(static_cast<std::size_t>(q), n_per_area));
  d.Xt_full = random_covariates(q * r_per_area, p, rng);
  d.Xt_full.rightCols(p - 1).array() += shift;
  d.Zt = block_ones(std::vector<Index>(static_cast<std::size_t>(q), r_per_area));
  d.G = psi * MatrixXd::Identity(q, q);
  d.R = MatrixXd::Identity(d.n(), d.n());
  d.Rt = MatrixXd::Identity(d.m(), d.m());
  return d;
}

/// Random symmetric positive definite matrix.
inline MatrixXd random_spd(Index size, Rng& rng) {
  MatrixXd a(size, size);
  for (Index r = 0; r < size; ++r)
    for (Index c = 0; c < size; ++c) a(r, c) = rng.normal();
  return a * a.transpose() + static_cast<double>(size) * MatrixXd::Identity(size, size);
}

/// General design: random SPD G, R and R̃, dense Z and Z̃.
inline DesignSet random_general(Index n, Index m, Index q, Index p, Rng& rng) {
  DesignSet d;
  d.X_full = random_covariates(n, p, rng);
  d.Xt_full = random_covariates(m, p, rng);
  d.Z = MatrixXd(n, q);
  d.Zt = MatrixXd(m, q);
  for (Index r = 0; r < n; ++r)
    for (Index c = 0; c < q; ++c) d.Z(r, c) = rng.normal();
  for (Index r = 0; r < m; ++r)
    for (Index c = 0; c < q; ++c) d.Zt(r, c) = rng.normal();
  d.G = random_spd(q, rng) / static_cast<double>(q);
  d.R = random_spd(n, rng) / static_cast<double>(n);
  d.Rt = random_spd(m, rng) / static_cast<double>(m);
  return d;
}

inline MatrixXd columns(const MatrixXd& x, const CandidateModel& j) { return x(Eigen::all, j.indices()); }

/// Textbook evaluation of the shift matrices through explicit inverses.
struct DenseGeometry {
  MatrixXd Lambda, A, B, C;
  double gamma = 0.0;
};

inline DenseGeometry dense_geometry(const DesignSet& d, const CandidateModel& j) {
  const MatrixXd S = d.Z * d.G * d.Z.transpose() + d.R;
  const MatrixXd Si = S.inverse();
  const MatrixXd St = d.Zt * d.G * d.Zt.transpose() + d.Rt;
  const MatrixXd Rti = d.Rt.inverse();
  const MatrixXd Xj = columns(d.X_full, j);
  const MatrixXd Xtj = columns(d.Xt_full, j);
  const MatrixXd Mj_inv = (Xj.transpose() * Si * Xj).inverse();
  const MatrixXd Pj = Si * Xj * Mj_inv * Xj.transpose() * Si;
  const MatrixXd Pw = Si * d.X_full * (d.X_full.transpose() * Si * d.X_full).inverse() * d.X_full.transpose() * Si;
  const MatrixXd Ptj = Xtj * Mj_inv * Xj.transpose() * Si;
  const MatrixXd ZGt = d.Zt * d.G * d.Z.transpose();
  DenseGeometry g;
  g.Lambda = St - ZGt * Si * ZGt.transpose();
  g.A = Xtj - ZGt * Si * Xj;
  g.B = Ptj * d.X_full - d.Xt_full + ZGt * (Pw - Pj) * d.X_full;
  g.C = d.X_full.transpose() * (Pw - Pj) * d.X_full;
  g.gamma = (Rti * g.Lambda).trace() + (Rti * g.A * Mj_inv * g.A.transpose()).trace();
  return g;
}

inline double max_abs(const MatrixXd& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

/// Running mean and variance (Welford).
struct Moments {
  Index count = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x) {
    ++count;
    const double d = x - mean;
    mean += d / static_cast<double>(count);
    m2 += d * (x - mean);
  }
  double variance() const { return count > 1 ? m2 / static_cast<double>(count - 1) : 0.0; }
  double se() const { return std::sqrt(variance() / static_cast<double>(count)); }
};

}  // namespace shiftcai::testing
