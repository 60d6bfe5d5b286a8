#include "shiftcai/lmm_core.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace shiftcai {

namespace {

constexpr double kSymmetryTol = 1e-10;
constexpr double kRankTol = 1e-10;
constexpr double kPivotTol = 1e-12;
// Above this size only the diagonal of Λ is checked for negativity.
constexpr Index kLambdaEigenLimit = 400;

std::string shape(const MatrixXd& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void require_shape(const MatrixXd& m, Index rows, Index cols, const char* name) {
  if (m.rows() != rows || m.cols() != cols) {
    std::ostringstream os;
    os << name << " has shape " << shape(m) << ", expected " << rows << "x" << cols;
    throw InputError(os.str());
  }
}

void require_symmetric(const MatrixXd& m, const char* name) {
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > kSymmetryTol * scale) {
    throw InputError(std::string(name) + " is not symmetric");
  }
}

bool is_diagonal(const MatrixXd& m) {
  for (Index c = 0; c < m.cols(); ++c)
    for (Index r = 0; r < m.rows(); ++r)
      if (r != c && m(r, c) != 0.0) return false;
  return true;
}

double smallest_eigenvalue(const MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

// Factors an SPD matrix; rejects failures and tiny pivots relative to tr/n.
Eigen::LLT<MatrixXd> factor_spd(const MatrixXd& m, const char* name) {
  Eigen::LLT<MatrixXd> llt(m);
  const double threshold = kPivotTol * m.trace() / static_cast<double>(m.rows());
  bool ok = llt.info() == Eigen::Success && m.trace() > 0.0;
  if (ok) {
    const VectorXd pivots = llt.matrixLLT().diagonal().array().square();
    ok = pivots.minCoeff() >= threshold;
  }
  if (!ok) {
    const double lmin = smallest_eigenvalue(m);
    std::ostringstream os;
    os << name << " is not positive definite (smallest eigenvalue " << lmin << ")";
    throw NotPositiveDefiniteError(os.str(), lmin);
  }
  return llt;
}

Index column_rank(const MatrixXd& x) {
  Eigen::ColPivHouseholderQR<MatrixXd> qr(x);
  qr.setThreshold(kRankTol);
  return qr.rank();
}

}  // namespace

// ---------------------------------------------------------------------------
// DesignSet

void DesignSet::validate() const {
  const Index n_ = n(), m_ = m(), q_ = q(), p_ = p_full();
  if (n_ == 0) throw InputError("observed design has no rows");
  if (m_ == 0) throw InputError("predictive design has no rows");
  if (p_ == 0) throw InputError("full model has no covariates");
  require_shape(Z, n_, q_, "Z");
  require_shape(Xt_full, m_, p_, "Xt_full");
  require_shape(Zt, m_, q_, "Zt");
  require_shape(G, q_, q_, "G");
  require_shape(R, n_, n_, "R");
  require_shape(Rt, m_, m_, "Rt");
  require_symmetric(G, "G");
  require_symmetric(R, "R");
  require_symmetric(Rt, "Rt");
  if (q_ > 0) {
    const double scale = std::max(1.0, G.cwiseAbs().maxCoeff());
    if (smallest_eigenvalue(G) < -kSymmetryTol * scale)
      throw NotPositiveDefiniteError("G is not positive semidefinite", smallest_eigenvalue(G));
  }
  if (column_rank(X_full) < p_) throw RankDeficientError("X(omega) does not have full column rank");
}

DesignSet without_shift(const DesignSet& design) {
  DesignSet out = design;
  out.Xt_full = design.X_full;
  out.Zt = design.Z;
  out.Rt = design.R;
  return out;
}

// ---------------------------------------------------------------------------
// CandidateModel

CandidateModel::CandidateModel(std::vector<Index> indices, Index p_full)
    : indices_(std::move(indices)), p_full_(p_full) {
  if (indices_.empty()) throw InputError("candidate model has no covariates");
  std::sort(indices_.begin(), indices_.end());
  if (std::adjacent_find(indices_.begin(), indices_.end()) != indices_.end())
    throw InputError("candidate model has duplicate indices");
  if (indices_.front() < 0 || indices_.back() >= p_full_)
    throw InputError("candidate index outside the full model");
}

CandidateModel CandidateModel::full(Index p_full) { return leading(p_full, p_full); }

CandidateModel CandidateModel::leading(Index count, Index p_full) {
  std::vector<Index> idx(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = i;
  return CandidateModel(std::move(idx), p_full);
}

CandidateModel CandidateModel::parse(const std::string& label, Index p_full) {
  std::vector<Index> idx;
  std::string token;
  std::istringstream is(label);
  while (std::getline(is, token, ';')) {
    token.erase(0, token.find_first_not_of(" \t"));
    token.erase(token.find_last_not_of(" \t") + 1);
    if (token.empty()) continue;
    std::size_t used = 0;
    long v = 0;
    try {
      v = std::stol(token, &used);
    } catch (const std::exception&) {
      throw InputError("bad candidate index '" + token + "'");
    }
    if (used != token.size()) throw InputError("bad candidate index '" + token + "'");
    idx.push_back(static_cast<Index>(v - 1));
  }
  return CandidateModel(std::move(idx), p_full);
}

bool CandidateModel::contains(Index column) const {
  return std::binary_search(indices_.begin(), indices_.end(), column);
}

std::string CandidateModel::label() const {
  std::ostringstream os;
  for (std::size_t k = 0; k < indices_.size(); ++k) {
    if (k) os << ';';
    os << indices_[k] + 1;
  }
  return os.str();
}

std::vector<CandidateModel> all_subsets(Index p_full, const std::vector<Index>& forced) {
  if (p_full <= 0 || p_full > 24) throw InputError("subset enumeration supports 1..24 covariates");
  std::vector<CandidateModel> out;
  unsigned long forced_mask = 0;
  for (Index f : forced) {
    if (f < 0 || f >= p_full) throw InputError("forced index outside the full model");
    forced_mask |= 1UL << f;
  }
  for (unsigned long mask = 1; mask < (1UL << p_full); ++mask) {
    if ((mask & forced_mask) != forced_mask) continue;
    std::vector<Index> idx;
    for (Index c = 0; c < p_full; ++c)
      if (mask & (1UL << c)) idx.push_back(c);
    out.emplace_back(std::move(idx), p_full);
  }
  std::stable_sort(out.begin(), out.end(), [](const CandidateModel& a, const CandidateModel& b) {
    if (a.size() != b.size()) return a.size() < b.size();
    return a.indices() < b.indices();
  });
  return out;
}

std::vector<CandidateModel> nested_chain(Index p_full) {
  std::vector<CandidateModel> out;
  for (Index a = 1; a <= p_full; ++a) out.push_back(CandidateModel::leading(a, p_full));
  return out;
}

// ---------------------------------------------------------------------------
// Covariance

CovarianceAssembly assemble_covariance(const DesignSet& design) {
  CovarianceAssembly cov;
  cov.Sigma = design.Z * design.G * design.Z.transpose() + design.R;
  cov.Sigma = 0.5 * (cov.Sigma + cov.Sigma.transpose());
  cov.Sigma_t = design.Zt * design.G * design.Zt.transpose() + design.Rt;
  cov.Sigma_t = 0.5 * (cov.Sigma_t + cov.Sigma_t.transpose());
  cov.sigma_llt = factor_spd(cov.Sigma, "Sigma");
  cov.log_det_sigma = 2.0 * cov.sigma_llt.matrixLLT().diagonal().array().log().sum();
  return cov;
}

LmmSystem::LmmSystem(DesignSet design) : design_(std::move(design)) {
  design_.validate();
  cov_ = assemble_covariance(design_);
  const auto& d = design_;

  sigma_lower_ = cov_.sigma_llt.matrixL();
  sigma_inv_ = cov_.solve(MatrixXd(MatrixXd::Identity(d.n(), d.n())));
  sigma_inv_ = 0.5 * (sigma_inv_ + sigma_inv_.transpose());
  sigma_inv_x_ = cov_.solve(d.X_full);
  gram_ = d.X_full.transpose() * sigma_inv_x_;
  gram_ = 0.5 * (gram_ + gram_.transpose());
  gram_inv_ = factor_spd(gram_, "X'Sigma^-1 X").solve(MatrixXd::Identity(d.p_full(), d.p_full()));
  gram_inv_ = 0.5 * (gram_inv_ + gram_inv_.transpose());

  const MatrixXd sigma_inv_z = cov_.solve(d.Z);
  bayes_op_ = d.G * sigma_inv_z.transpose();
  shifted_x_ = d.Xt_full - d.Zt * (bayes_op_ * d.X_full);

  MatrixXd shrink = bayes_op_ * d.Z * d.G;  // G Zᵀ Σ⁻¹ Z G
  shrink = 0.5 * (shrink + shrink.transpose());
  auto lambda = std::make_shared<MatrixXd>(cov_.Sigma_t - d.Zt * shrink * d.Zt.transpose());
  *lambda = 0.5 * (*lambda + lambda->transpose());
  {
    const double norm = std::max(lambda->cwiseAbs().maxCoeff(), 1e-300);
    const double lmin = d.m() <= kLambdaEigenLimit ? smallest_eigenvalue(*lambda) : lambda->diagonal().minCoeff();
    if (lmin < -1e-8 * norm) throw NotPositiveDefiniteError("conditional covariance Lambda is indefinite", lmin);
  }
  lambda_ = lambda;

  rt_diagonal_ = is_diagonal(d.Rt);
  if (rt_diagonal_) {
    const VectorXd diag = d.Rt.diagonal();
    if ((diag.array() <= 0.0).any())
      throw NotPositiveDefiniteError("Rt is not positive definite", diag.minCoeff());
    rt_diag_inv_ = diag.cwiseInverse();
    log_det_rt_ = diag.array().log().sum();
    trace_rt_inv_lambda_ = lambda_->diagonal().cwiseProduct(rt_diag_inv_).sum();
  } else {
    rt_llt_ = factor_spd(d.Rt, "Rt");
    log_det_rt_ = 2.0 * rt_llt_.matrixLLT().diagonal().array().log().sum();
    trace_rt_inv_lambda_ = rt_llt_.solve(*lambda_).trace();
  }

  r_diagonal_ = is_diagonal(d.R);
  trace_r_sigma_inv_ = d.R.cwiseProduct(sigma_inv_).sum();
  if (r_diagonal_) {
    residual_weight_ = sigma_inv_x_.transpose() * d.R.diagonal().asDiagonal() * sigma_inv_x_;
  } else {
    residual_weight_ = sigma_inv_x_.transpose() * d.R * sigma_inv_x_;
  }
  residual_weight_ = 0.5 * (residual_weight_ + residual_weight_.transpose());
}

MatrixXd LmmSystem::rt_solve(const MatrixXd& rhs) const {
  if (rt_diagonal_) return rt_diag_inv_.asDiagonal() * rhs;
  return rt_llt_.solve(rhs);
}

VectorXd LmmSystem::rt_solve(const VectorXd& rhs) const {
  if (rt_diagonal_) return rt_diag_inv_.cwiseProduct(rhs);
  return rt_llt_.solve(rhs);
}

double LmmSystem::rt_quadratic(const VectorXd& v) const {
  if (rt_diagonal_) return (v.array().square() * rt_diag_inv_.array()).sum();
  return v.dot(rt_llt_.solve(v));
}

VectorXd LmmSystem::r_apply(const VectorXd& v) const {
  if (r_diagonal_) return design_.R.diagonal().cwiseProduct(v);
  return design_.R * v;
}

// ---------------------------------------------------------------------------
// Fits

CandidateBasis candidate_basis(const LmmSystem& system, const CandidateModel& j) {
  if (j.p_full() != system.p_full()) throw InputError("candidate built for a different full model");
  const auto& idx = j.indices();
  CandidateBasis basis{j, system.design().X_full(Eigen::all, idx), system.sigma_inv_x()(Eigen::all, idx),
                       MatrixXd(), MatrixXd()};
  if (column_rank(basis.X) < j.size())
    throw RankDeficientError("X(j) is rank deficient for candidate {" + j.label() + "}");

  const MatrixXd gram_j = system.gram()(idx, idx);
  Eigen::LLT<MatrixXd> llt(gram_j);
  if (llt.info() != Eigen::Success)
    throw RankDeficientError("X(j)'Sigma^-1 X(j) is singular for candidate {" + j.label() + "}");
  basis.gram_inv = llt.solve(MatrixXd::Identity(j.size(), j.size()));
  basis.gram_inv = 0.5 * (basis.gram_inv + basis.gram_inv.transpose());
  basis.coupling = basis.gram_inv * system.gram()(idx, Eigen::all);
  // (X(j)ᵀΣ⁻¹X(j))⁻¹ X(j)ᵀΣ⁻¹X(j) = I: pin those columns exactly.
  for (Index k = 0; k < j.size(); ++k) {
    basis.coupling.col(idx[static_cast<std::size_t>(k)]).setZero();
    basis.coupling(k, idx[static_cast<std::size_t>(k)]) = 1.0;
  }
  return basis;
}

ObservedFit gls_fit(const VectorXd& y, const LmmSystem& system, const CandidateModel& j) {
  return gls_fit(y, system, candidate_basis(system, j));
}

ObservedFit gls_fit(const VectorXd& y, const LmmSystem& system, const CandidateBasis& basis) {
  const Index n = system.n();
  if (y.size() != n) throw InputError("response length does not match the design");
  if (n <= basis.candidate.size()) throw InputError("need n > p_j for a GLS fit");

  ObservedFit fit;
  fit.candidate = basis.candidate;
  fit.beta_hat = basis.gram_inv * (basis.sigma_inv_x.transpose() * y);
  const VectorXd resid = y - basis.X * fit.beta_hat;
  const VectorXd weighted = system.covariance().solve(resid);
  fit.sigma2_hat = resid.dot(weighted) / static_cast<double>(n);
  const double scale = y.dot(system.covariance().solve(y)) / static_cast<double>(n);
  if (!(fit.sigma2_hat > 1e-14 * std::max(scale, 1e-300)))
    throw DegenerateFitError("degenerate fit: y lies in the column space of X(j) for candidate {" +
                             basis.candidate.label() + "}");
  fit.b_hat = system.design().G * (system.design().Z.transpose() * weighted);
  return fit;
}

ParameterPoint full_model_unbiased(const ObservedFit& full_fit, Index n) {
  const Index p = full_fit.candidate.p_full();
  if (!full_fit.candidate.is_full()) throw InputError("full_model_unbiased needs the fit of the full model");
  if (n <= p) throw InputError("need n > p_omega for the unbiased variance estimator");
  return ParameterPoint{full_fit.beta_hat,
                        static_cast<double>(n) * full_fit.sigma2_hat / static_cast<double>(n - p)};
}

ParameterPoint full_model_unbiased(const VectorXd& y, const LmmSystem& system) {
  return full_model_unbiased(gls_fit(y, system, CandidateModel::full(system.p_full())), system.n());
}

Projections projections(const LmmSystem& system, const CandidateModel& j) {
  const CandidateBasis basis = candidate_basis(system, j);
  Projections p;
  p.P_j = basis.sigma_inv_x * basis.gram_inv * basis.sigma_inv_x.transpose();
  p.P_omega = system.sigma_inv_x() * system.gram_inverse() * system.sigma_inv_x().transpose();
  p.Pt_j = system.design().Xt_full(Eigen::all, j.indices()) * basis.gram_inv * basis.sigma_inv_x.transpose();
  return p;
}

}  // namespace shiftcai
