#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "shiftcai/errors.hpp"

namespace shiftcai {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Observed and predictive designs of the full model.
///
/// Observed:   y  = X(ω) β + Z b + ε,   b ~ N(0, σ²G), ε ~ N(0, σ²R)
/// Predictive: ỹ  = X̃(ω) β + Z̃ b + ε̃,  ε̃ ~ N(0, σ²R̃)
///
/// G may be positive semidefinite (a zero variance ratio gives G = 0);
/// R and R̃ must be positive definite.
struct DesignSet {
  MatrixXd X_full;   // n x p_omega
  MatrixXd Z;        // n x q
  MatrixXd Xt_full;  // m x p_omega
  MatrixXd Zt;       // m x q
  MatrixXd G;        // q x q
  MatrixXd R;        // n x n
  MatrixXd Rt;       // m x m

  Index n() const { return X_full.rows(); }
  Index m() const { return Xt_full.rows(); }
  Index q() const { return Z.cols(); }
  Index p_full() const { return X_full.cols(); }

  /// Throws InputError on inconsistent shapes or asymmetric covariances,
  /// RankDeficientError if X(ω) lacks full column rank.
  void validate() const;
};

/// The same observed model with the predictive side set equal to it
/// (X̃ = X, Z̃ = Z, R̃ = R).
DesignSet without_shift(const DesignSet& design);

/// A subset j of the full covariate index set ω, stored zero-based and sorted.
class CandidateModel {
 public:
  CandidateModel() = default;
  CandidateModel(std::vector<Index> indices, Index p_full);

  static CandidateModel full(Index p_full);
  /// Nested model {0, ..., count-1}.
  static CandidateModel leading(Index count, Index p_full);
  /// Parses a one-based label such as "1;3;4".
  static CandidateModel parse(const std::string& label, Index p_full);

  const std::vector<Index>& indices() const { return indices_; }
  Index size() const { return static_cast<Index>(indices_.size()); }
  Index p_full() const { return p_full_; }
  bool is_full() const { return size() == p_full_; }
  bool contains(Index column) const;
  /// One-based, semicolon separated.
  std::string label() const;

  friend bool operator==(const CandidateModel&, const CandidateModel&) = default;

 private:
  std::vector<Index> indices_;
  Index p_full_ = 0;
};

/// Every nonempty subset of ω containing all of `forced` columns, ordered by
/// size then lexicographically.
std::vector<CandidateModel> all_subsets(Index p_full, const std::vector<Index>& forced = {});

/// The nested chain {0}, {0,1}, ..., ω.
std::vector<CandidateModel> nested_chain(Index p_full);

struct TruthParams {
  VectorXd beta_star;
  double sigma2_star = 1.0;
};

/// Σ = Z G Zᵀ + R and Σ̃ = Z̃ G Z̃ᵀ + R̃, with a Cholesky factor of Σ.
struct CovarianceAssembly {
  MatrixXd Sigma;
  MatrixXd Sigma_t;
  Eigen::LLT<MatrixXd> sigma_llt;
  double log_det_sigma = 0.0;

  VectorXd solve(const VectorXd& v) const { return sigma_llt.solve(v); }
  MatrixXd solve(const MatrixXd& m) const { return sigma_llt.solve(m); }
};

/// Throws NotPositiveDefiniteError when the factorization fails or its
/// smallest pivot falls below 1e-12 · tr(Σ)/n.
CovarianceAssembly assemble_covariance(const DesignSet& design);

/// A design together with every candidate-independent quantity the fits and
/// criteria need. Immutable after construction; safe to share across threads.
class LmmSystem {
 public:
  explicit LmmSystem(DesignSet design);

  const DesignSet& design() const { return design_; }
  const CovarianceAssembly& covariance() const { return cov_; }
  Index n() const { return design_.n(); }
  Index m() const { return design_.m(); }
  Index p_full() const { return design_.p_full(); }

  const MatrixXd& sigma_inverse() const { return sigma_inv_; }
  const MatrixXd& sigma_lower() const { return sigma_lower_; }
  /// Σ⁻¹ X(ω)
  const MatrixXd& sigma_inv_x() const { return sigma_inv_x_; }
  /// X(ω)ᵀ Σ⁻¹ X(ω)
  const MatrixXd& gram() const { return gram_; }
  /// (X(ω)ᵀ Σ⁻¹ X(ω))⁻¹
  const MatrixXd& gram_inverse() const { return gram_inv_; }
  /// G Zᵀ Σ⁻¹ (q x n), the empirical Bayes operator.
  const MatrixXd& bayes_operator() const { return bayes_op_; }
  /// X̃(ω) − Z̃ G Zᵀ Σ⁻¹ X(ω) (m x p_omega)
  const MatrixXd& shifted_x() const { return shifted_x_; }
  /// Λ = Σ̃ − Z̃ G Zᵀ Σ⁻¹ Z G Z̃ᵀ, the conditional covariance of ỹ given y.
  const MatrixXd& conditional_covariance() const { return *lambda_; }
  std::shared_ptr<const MatrixXd> conditional_covariance_ptr() const { return lambda_; }
  double trace_rt_inv_lambda() const { return trace_rt_inv_lambda_; }

  double log_det_rt() const { return log_det_rt_; }
  /// R̃⁻¹ · rhs
  MatrixXd rt_solve(const MatrixXd& rhs) const;
  VectorXd rt_solve(const VectorXd& rhs) const;
  /// vᵀ R̃⁻¹ v
  double rt_quadratic(const VectorXd& v) const;
  /// R · v
  VectorXd r_apply(const VectorXd& v) const;
  /// tr(R Σ⁻¹)
  double trace_r_sigma_inv() const { return trace_r_sigma_inv_; }
  /// (Σ⁻¹X(ω))ᵀ R (Σ⁻¹X(ω)), used for tr(R P_j).
  const MatrixXd& residual_weight() const { return residual_weight_; }

 private:
  DesignSet design_;
  CovarianceAssembly cov_;
  MatrixXd sigma_inv_;
  MatrixXd sigma_lower_;
  MatrixXd sigma_inv_x_;
  MatrixXd gram_;
  MatrixXd gram_inv_;
  MatrixXd bayes_op_;
  MatrixXd shifted_x_;
  std::shared_ptr<const MatrixXd> lambda_;
  double trace_rt_inv_lambda_ = 0.0;

  bool rt_diagonal_ = false;
  VectorXd rt_diag_inv_;
  Eigen::LLT<MatrixXd> rt_llt_;
  double log_det_rt_ = 0.0;

  bool r_diagonal_ = false;
  double trace_r_sigma_inv_ = 0.0;
  MatrixXd residual_weight_;
};

/// Per-candidate pieces of the GLS normal equations.
struct CandidateBasis {
  CandidateModel candidate;
  MatrixXd X;            // X(j)
  MatrixXd sigma_inv_x;  // Σ⁻¹ X(j)
  MatrixXd gram_inv;     // (X(j)ᵀ Σ⁻¹ X(j))⁻¹
  /// (X(j)ᵀΣ⁻¹X(j))⁻¹ X(j)ᵀΣ⁻¹X(ω); its columns at j are unit vectors.
  MatrixXd coupling;
};

/// Throws RankDeficientError if X(j) is rank deficient (pivoted QR,
/// relative threshold 1e-10).
CandidateBasis candidate_basis(const LmmSystem& system, const CandidateModel& j);

struct ObservedFit {
  CandidateModel candidate;
  VectorXd beta_hat;
  double sigma2_hat = 0.0;  // ML, divisor n
  VectorXd b_hat;
};

ObservedFit gls_fit(const VectorXd& y, const LmmSystem& system, const CandidateModel& j);
ObservedFit gls_fit(const VectorXd& y, const LmmSystem& system, const CandidateBasis& basis);

/// A point η = (β, σ²) of the full model's parameter space.
struct ParameterPoint {
  VectorXd beta;
  double sigma2 = 1.0;
};

/// β̃ = β̂_ω and σ̃² = n σ̂²_ω / (n − p_ω).
ParameterPoint full_model_unbiased(const VectorXd& y, const LmmSystem& system);
ParameterPoint full_model_unbiased(const ObservedFit& full_fit, Index n);

struct Projections {
  MatrixXd P_j;      // n x n
  MatrixXd P_omega;  // n x n
  MatrixXd Pt_j;     // m x n
};

/// Explicit projection matrices. Dense n x n; the criteria never form them.
Projections projections(const LmmSystem& system, const CandidateModel& j);

/// Simulates y ~ N(X(ω)β*, σ*² Σ) using the system's Cholesky factor.
template <class Rng>
VectorXd simulate_response(const LmmSystem& system, const TruthParams& truth, Rng& rng) {
  return system.design().X_full * truth.beta_star +
         std::sqrt(truth.sigma2_star) * (system.sigma_lower() * rng.normal_vector(system.n()));
}

}  // namespace shiftcai
