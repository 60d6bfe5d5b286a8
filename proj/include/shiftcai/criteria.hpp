#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "shiftcai/lmm_core.hpp"

namespace shiftcai {

/// Candidate-specific matrices of the covariate-shift risk.
///
///   A = X̃(j) − Z̃GZᵀΣ⁻¹X(j)
///   B = P̃_j X(ω) − X̃(ω) + Z̃GZᵀ(P_ω − P_j)X(ω)
///   C = X(ω)ᵀ(P_ω − P_j)X(ω)
///   γ = tr(R̃⁻¹Λ) + tr[R̃⁻¹A(X(j)ᵀΣ⁻¹X(j))⁻¹Aᵀ]
///
/// B and C vanish on the columns in j, so Bβ = Cβ = 0 exactly whenever β is
/// supported on j.
struct ShiftGeometry {
  CandidateModel candidate;
  Index n = 0;
  Index p_j = 0;
  Index p_omega = 0;
  std::shared_ptr<const MatrixXd> Lambda;  // shared by every candidate of a design
  MatrixXd A;
  MatrixXd B;
  MatrixXd C;
  double gamma = 0.0;

  double trace_rt_inv_lambda = 0.0;
  double trace_a_term = 0.0;  // tr[R̃⁻¹A(X(j)ᵀΣ⁻¹X(j))⁻¹Aᵀ]
  MatrixXd B_weight;          // Bᵀ R̃⁻¹ B
  MatrixXd gls_cov;           // (X(ω)ᵀΣ⁻¹X(ω))⁻¹
  double trace_c_cov = 0.0;   // tr(C gls_cov)
  double trace_b_cov = 0.0;   // tr(B_weight gls_cov)
  double trace_r_pj = 0.0;    // tr(R P_j)
};

ShiftGeometry shift_geometry(const LmmSystem& system, const CandidateModel& j);
ShiftGeometry shift_geometry(const LmmSystem& system, const CandidateBasis& basis);

/// The candidate-dependent terms of the risk at the true parameters.
struct TrueRTerms {
  double delta = 0.0;
  double lambda = 1.0;
  double r_star = 0.0;
  double r1 = 0.0;
  double r2 = 0.0;
  double r3 = 0.0;
  double r4 = 0.0;
};

/// R* = nγ/(n − p_j − 2); throws NumericalError when n ≤ p_j + 2.
double r_star(const ShiftGeometry& geom);

TrueRTerms true_r_terms(const ShiftGeometry& geom, const TruthParams& truth);

/// Monte Carlo mean with its standard error.
struct McEstimate {
  double mean = 0.0;
  double se = 0.0;
  Index iterations = 0;
};

/// Monte Carlo evaluation of the conditional Akaike information under shift,
/// E[m log(2πσ̂²_j) + log|R̃| + tr(R̃⁻¹Λ)σ*²/σ̂²_j + aᵀR̃⁻¹a/σ̂²_j],
/// with y ~ N(X(ω)β*, σ*²Σ). Requires iterations ≥ 1000.
McEstimate mc_true_cai(const LmmSystem& system, const CandidateModel& j, const TruthParams& truth,
                       Index iterations, std::uint64_t seed, unsigned workers = 1);

/// Same, for several candidates on common random draws.
std::vector<McEstimate> mc_true_cai(const LmmSystem& system, const std::vector<CandidateModel>& candidates,
                                    const TruthParams& truth, Index iterations, std::uint64_t seed,
                                    unsigned workers = 1);

/// Unbiased (overspecified case) estimates of λ, λ² and λ³.
struct LambdaMoments {
  double l1 = 1.0;
  double l2 = 1.0;
  double l3 = 1.0;
};

LambdaMoments lambda_hats(double sigma2_j, double sigma2_omega, Index n, Index p_j, Index p_omega);
LambdaMoments lambda_hats(const ObservedFit& fit_j, const ObservedFit& fit_omega, Index n);

double r1_hat(const ShiftGeometry& geom, const LambdaMoments& lh);
double r2_hat(const ShiftGeometry& geom, const LambdaMoments& lh);

/// R3(η) = λ(η)·βᵀBᵀR̃⁻¹Bβ/σ² with λ(η) = 1/(1 + βᵀCβ/(nσ²)).
double r3_value(const ShiftGeometry& geom, const ParameterPoint& eta);
/// R4(η) = n⁻¹{−2λ³ + (p_j+4)λ²}·βᵀBᵀR̃⁻¹Bβ/σ².
double r4_value(const ShiftGeometry& geom, const ParameterPoint& eta);

/// Closed-form second derivatives of R3 at η.
struct R3Hessian {
  MatrixXd beta_beta;    // ∂²R3/∂β∂βᵀ
  double sigma_sigma;    // ∂²R3/(∂σ²)²
};
R3Hessian r3_hessian(const ShiftGeometry& geom, const ParameterPoint& eta);

/// Second-order bias of the plug-in R3:
/// ½tr[∂²R3/∂β∂βᵀ · σ²(X(ω)ᵀΣ⁻¹X(ω))⁻¹] + ½·∂²R3/(∂σ²)² · 2σ⁴/(n − p_ω).
double b1_correction(const ShiftGeometry& geom, const ParameterPoint& eta);

struct PluginR34 {
  double r3_tilde = 0.0;
  double r4_tilde = 0.0;
  double r3_corrected = 0.0;  // r3_tilde − B1(η̃)
};
PluginR34 r3_r4_plugin(const ShiftGeometry& geom, const ParameterPoint& eta);

enum class ErrorScale { Identity, R };

struct BootstrapConfig {
  Index replications = 1000;
  std::uint64_t seed = 0;
  /// Identity draws ε† ~ N(0, σ̃²I_n); R draws ε† ~ N(0, σ̃²R).
  ErrorScale error_scale = ErrorScale::Identity;

  /// Throws InputError below one replication; returns a warning below 100.
  std::optional<std::string> validate() const;
};

/// Full-model refits η̃† on parametric bootstrap responses
/// y† = X(ω)β̃ + Zb† + ε†, b† ~ N(0, σ̃²G).
struct BootstrapSample {
  std::vector<ParameterPoint> draws;
  Index rejected = 0;
};

/// Degenerate refits are redrawn from a derived sub-seed; more than 1%
/// rejections raise NumericalError.
BootstrapSample draw_bootstrap(const LmmSystem& system, const ParameterPoint& eta, const BootstrapConfig& cfg);

struct BootstrapR34 {
  double r3_hat = 0.0;
  double r4_hat = 0.0;
};

/// R̂4 = 2R4(η̃) − E†[R4(η̃†)],
/// R̂3 = 2R3(η̃) − E†[R3(η̃†)] + E†[B1(η̃†)] − B1(η̃).
BootstrapR34 bootstrap_r3_r4(const ShiftGeometry& geom, const ParameterPoint& eta, const BootstrapSample& sample);
BootstrapR34 bootstrap_r3_r4(const ShiftGeometry& geom, const LmmSystem& system, const ParameterPoint& eta,
                             const BootstrapConfig& cfg);

enum class Variant { U, Hat, Dagger };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);

/// One criterion value split into its additive parts.
///
///   U:      total = goodness + delta_cs  (goodness carries the conditional residual term)
///   Hat:    total = goodness + r_star + r1 + r2 + r3 + r4   (r3 = R̃̃3, r4 = R̃4)
///   Dagger: same as Hat with r3 = R̂3, r4 = R̂4
struct CriterionBreakdown {
  Variant variant = Variant::Hat;
  CandidateModel candidate;
  double sigma2_hat = 0.0;
  double goodness = 0.0;
  double r_star = 0.0;
  double r1 = 0.0;
  double r2 = 0.0;
  double r3 = 0.0;
  double r4 = 0.0;
  double delta_cs = 0.0;
  double total = 0.0;
};

/// Fits and geometry of one candidate that do not depend on y.
struct PreparedCandidate {
  CandidateBasis basis;
  ShiftGeometry geometry;
};

PreparedCandidate prepare_candidate(const LmmSystem& system, const CandidateModel& j);

/// Pieces of a criterion evaluation shared by all candidates for one y.
struct ResponseContext {
  ObservedFit full_fit;
  ParameterPoint eta_tilde;
  std::optional<BootstrapSample> bootstrap;
};

/// Builds the shared pieces; draws the bootstrap sample only when `boot` is set.
ResponseContext make_response_context(const VectorXd& y, const LmmSystem& system,
                                      const std::optional<BootstrapConfig>& boot);

CriterionBreakdown evaluate_criterion(Variant variant, const VectorXd& y, const LmmSystem& system,
                                      const PreparedCandidate& cand, const ResponseContext& ctx,
                                      const ObservedFit& fit_j);
CriterionBreakdown evaluate_criterion(Variant variant, const VectorXd& y, const LmmSystem& system,
                                      const PreparedCandidate& cand, const ResponseContext& ctx);

/// Single-candidate convenience; Dagger requires `boot`.
CriterionBreakdown criterion(Variant variant, const VectorXd& y, const LmmSystem& system, const CandidateModel& j,
                             const std::optional<BootstrapConfig>& boot = std::nullopt);

struct ExcludedCandidate {
  CandidateModel candidate;
  std::string reason;
};

struct SelectionResult {
  std::vector<CriterionBreakdown> ranked;  // best first
  std::vector<ExcludedCandidate> excluded;

  const CriterionBreakdown& best() const;
};

/// Orders by total, then smaller p_j, then lexicographic indices.
void rank_breakdowns(std::vector<CriterionBreakdown>& rows);

/// Evaluates every candidate and ranks them. Rank-deficient candidates are
/// listed in `excluded`. Throws InputError for an empty candidate list.
SelectionResult select_best(const VectorXd& y, const LmmSystem& system, const std::vector<CandidateModel>& candidates,
                            Variant variant, const std::optional<BootstrapConfig>& boot = std::nullopt,
                            unsigned workers = 1);

}  // namespace shiftcai
