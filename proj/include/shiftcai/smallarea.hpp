#pragma once

#include <optional>
#include <string>
#include <vector>

#include "shiftcai/lmm_core.hpp"

namespace shiftcai {

/// One small area of the nested error regression model.
///
/// Exactly one of `X_unsampled` (unit-level coverage) and `mean_x`
/// (area-level coverage, the mean of x over all N units) is set.
struct AreaRecord {
  std::string id;
  Index N = 0;
  VectorXd y;  // n_i sampled responses
  MatrixXd X;  // n_i x p
  std::optional<MatrixXd> X_unsampled;  // r_i x p
  std::optional<VectorXd> mean_x;       // p

  Index n() const { return y.size(); }
  Index r() const { return N - n(); }
};

enum class Coverage { Unit, Area };

struct NermData {
  std::vector<AreaRecord> areas;

  Index q() const { return static_cast<Index>(areas.size()); }
  Index n() const;
  Index p() const;
  Coverage coverage() const;

  /// Throws InputError when an invariant of the data fails.
  void validate() const;
};

/// Area-level view of unit-level data: mean_x becomes the mean over all N
/// units and the unsampled rows are dropped.
NermData to_area_level(const NermData& data);

/// Keeps only the columns of candidate j.
NermData select_columns(const NermData& data, const CandidateModel& j);

/// Stacked observed part: Z = diag(1_{n_i}), G = ψI_q, R = I_n.
struct ObservedPart {
  VectorXd y;
  MatrixXd X;
  MatrixXd Z;
  MatrixXd G;
  MatrixXd R;
};
ObservedPart build_observed(const NermData& data, double psi);

struct PredictivePart {
  MatrixXd Xt;
  MatrixXd Zt;
  MatrixXd Rt;
};

/// Unsampled units stacked by area: Z̃ = diag(1_{r_i}), R̃ = I. Fully
/// sampled areas contribute no rows.
PredictivePart build_unit_level_predictive(const NermData& data);

/// One row per area with x̄_{i(u)} = (N_i x̄_i − Σ_k x_ik)/r_i, Z̃ = I_q and
/// R̃ = diag(1/r_i). Throws InputError for a fully sampled area.
PredictivePart build_area_level_predictive(const NermData& data);

/// x̄_{i(u)} for every area (r_i ≥ 1 required).
MatrixXd unsampled_means(const NermData& data);

/// Observed part joined with the chosen predictive part.
DesignSet nerm_design(const NermData& data, double psi, Coverage predictive);

/// Prasad–Rao moment estimates of τ² and σ².
struct PsiEstimate {
  double tau2_hat = 0.0;
  double sigma2_hat = 1.0;
  double psi_hat = 0.0;
  double tau2_raw = 0.0;  // before truncation
  bool truncated = false;
};

/// σ̂² from the within-area demeaned OLS residuals, τ̂² from the pooled OLS
/// residuals. Throws InputError when the within-area degrees of freedom are
/// not positive.
PsiEstimate estimate_psi(const NermData& data);

/// Plug-in parameters θ̂ = (β, τ², σ²) of a fitted candidate.
struct NermFit {
  CandidateModel candidate;
  VectorXd beta;
  double tau2 = 0.0;
  double sigma2 = 1.0;
  PsiEstimate psi;
};

/// GLS β of candidate j with Σ = I + ψ̂ZZᵀ and Prasad–Rao variances
/// estimated under j.
NermFit fit_nerm(const NermData& data, const CandidateModel& j);

/// Shrinkage weight τ²/(σ² + n_iτ²).
double shrinkage(double tau2, double sigma2, Index n_i);

/// Conditional means μ_ik of every unsampled unit, by area.
std::vector<VectorXd> eblup_unit(const NermData& data, const NermFit& fit);

/// Conditional mean of the unsampled area mean Ȳ_{i(u)}, one per area.
VectorXd eblup_area(const NermData& data, const NermFit& fit);

/// exp(μ_ik + V_i/2) with V_i = σ² + τ²σ²/(σ² + n_iτ²), by area.
std::vector<VectorXd> ebp_log_scale(const NermData& data, const NermFit& fit);

struct AreaPrediction {
  std::string id;
  Index N = 0;
  Index n = 0;
  double sampled_mean = 0.0;
  double unsampled_mean = 0.0;
  double finite_mean = 0.0;
};

/// N_i⁻¹{Σ sampled + r_i · unsampled_mean}. Areas with r_i = 0 return the
/// sampled mean.
AreaPrediction finite_mean(const std::string& id, Index N, const VectorXd& sampled, double unsampled_mean);

/// Per-area finite population means. With `log_scale` the responses hold
/// log values: the sampled part uses exp(y) and the unsampled part the EBP
/// (unit-level coverage required). Otherwise the linear predictor is used.
std::vector<AreaPrediction> predict_finite_mean(const NermData& data, const NermFit& fit, bool log_scale);

}  // namespace shiftcai
