#include "shiftcai/smallarea.hpp"

#include <cmath>
#include <set>

namespace shiftcai {

namespace {

constexpr double kRankTol = 1e-10;

Eigen::ColPivHouseholderQR<MatrixXd> pivoted_qr(const MatrixXd& x) {
  Eigen::ColPivHouseholderQR<MatrixXd> qr(x);
  qr.setThreshold(kRankTol);
  return qr;
}

double residual_ss(const MatrixXd& x, const VectorXd& y, Index* rank) {
  const auto qr = pivoted_qr(x);
  if (rank) *rank = qr.rank();
  if (qr.rank() == 0) return y.squaredNorm();
  const VectorXd coef = qr.solve(y);
  return (y - x * coef).squaredNorm();
}

VectorXd column_sums(const MatrixXd& x) { return x.colwise().sum().transpose(); }

}  // namespace

// ---------------------------------------------------------------------------
// NermData

Index NermData::n() const {
  Index total = 0;
  for (const auto& a : areas) total += a.n();
  return total;
}

Index NermData::p() const { return areas.empty() ? 0 : areas.front().X.cols(); }

Coverage NermData::coverage() const {
  if (areas.empty()) throw InputError("no areas");
  return areas.front().X_unsampled ? Coverage::Unit : Coverage::Area;
}

void NermData::validate() const {
  if (areas.empty()) throw InputError("no areas");
  const Index p_ = p();
  if (p_ == 0) throw InputError("no covariates");
  const Coverage mode = coverage();
  std::set<std::string> ids;
  for (const auto& a : areas) {
    const std::string where = "area " + a.id + ": ";
    if (!ids.insert(a.id).second) throw InputError(where + "duplicate area id");
    if (a.n() < 1) throw InputError(where + "no sampled units");
    if (a.X.rows() != a.n() || a.X.cols() != p_) throw InputError(where + "covariate matrix has the wrong shape");
    if (a.N < a.n()) throw InputError(where + "population size is smaller than the sample size");
    if (a.X_unsampled.has_value() == a.mean_x.has_value())
      throw InputError(where + "exactly one of unsampled covariates and an area mean is required");
    if ((mode == Coverage::Unit) != a.X_unsampled.has_value())
      throw InputError(where + "coverage mode differs from the other areas");
    if (a.X_unsampled && (a.X_unsampled->rows() != a.r() || a.X_unsampled->cols() != p_))
      throw InputError(where + "unsampled covariates do not match N - n");
    if (a.mean_x && a.mean_x->size() != p_) throw InputError(where + "area mean has the wrong length");
    if (!a.y.allFinite() || !a.X.allFinite()) throw InputError(where + "non-finite sampled values");
  }
}

NermData to_area_level(const NermData& data) {
  NermData out = data;
  for (auto& a : out.areas) {
    if (!a.X_unsampled) continue;
    a.mean_x = (column_sums(a.X) + column_sums(*a.X_unsampled)) / static_cast<double>(a.N);
    a.X_unsampled.reset();
  }
  return out;
}

NermData select_columns(const NermData& data, const CandidateModel& j) {
  if (j.p_full() != data.p()) throw InputError("candidate built for a different number of covariates");
  const auto& idx = j.indices();
  NermData out = data;
  for (auto& a : out.areas) {
    a.X = MatrixXd(a.X(Eigen::all, idx));
    if (a.X_unsampled) a.X_unsampled = MatrixXd((*a.X_unsampled)(Eigen::all, idx));
    if (a.mean_x) a.mean_x = VectorXd((*a.mean_x)(idx));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Designs

ObservedPart build_observed(const NermData& data, double psi) {
  data.validate();
  if (!(psi >= 0.0)) throw InputError("variance ratio psi must be nonnegative");
  const Index n = data.n(), q = data.q(), p = data.p();
  ObservedPart o;
  o.y.resize(n);
  o.X.resize(n, p);
  o.Z = MatrixXd::Zero(n, q);
  Index row = 0;
  for (Index i = 0; i < q; ++i) {
    const auto& a = data.areas[static_cast<std::size_t>(i)];
    o.y.segment(row, a.n()) = a.y;
    o.X.middleRows(row, a.n()) = a.X;
    o.Z.block(row, i, a.n(), 1).setOnes();
    row += a.n();
  }
  o.G = psi * MatrixXd::Identity(q, q);
  o.R = MatrixXd::Identity(n, n);
  return o;
}

PredictivePart build_unit_level_predictive(const NermData& data) {
  data.validate();
  if (data.coverage() != Coverage::Unit) throw InputError("unit-level predictive model needs unsampled covariates");
  Index m = 0;
  for (const auto& a : data.areas) m += a.r();
  PredictivePart pr;
  pr.Xt.resize(m, data.p());
  pr.Zt = MatrixXd::Zero(m, data.q());
  Index row = 0;
  for (Index i = 0; i < data.q(); ++i) {
    const auto& a = data.areas[static_cast<std::size_t>(i)];
    pr.Xt.middleRows(row, a.r()) = *a.X_unsampled;
    pr.Zt.block(row, i, a.r(), 1).setOnes();
    row += a.r();
  }
  pr.Rt = MatrixXd::Identity(m, m);
  return pr;
}

MatrixXd unsampled_means(const NermData& data) {
  data.validate();
  MatrixXd out(data.q(), data.p());
  for (Index i = 0; i < data.q(); ++i) {
    const auto& a = data.areas[static_cast<std::size_t>(i)];
    if (a.r() < 1) throw InputError("area " + a.id + " is fully sampled; area-level target undefined");
    if (a.X_unsampled) {
      out.row(i) = a.X_unsampled->colwise().mean();
    } else {
      out.row(i) = ((static_cast<double>(a.N) * *a.mean_x - column_sums(a.X)) / static_cast<double>(a.r())).transpose();
    }
  }
  return out;
}

PredictivePart build_area_level_predictive(const NermData& data) {
  PredictivePart pr;
  pr.Xt = unsampled_means(data);
  pr.Zt = MatrixXd::Identity(data.q(), data.q());
  pr.Rt = MatrixXd::Zero(data.q(), data.q());
  for (Index i = 0; i < data.q(); ++i) pr.Rt(i, i) = 1.0 / static_cast<double>(data.areas[static_cast<std::size_t>(i)].r());
  return pr;
}

DesignSet nerm_design(const NermData& data, double psi, Coverage predictive) {
  ObservedPart o = build_observed(data, psi);
  PredictivePart pr =
      predictive == Coverage::Unit ? build_unit_level_predictive(data) : build_area_level_predictive(data);
  DesignSet d;
  d.X_full = std::move(o.X);
  d.Z = std::move(o.Z);
  d.G = std::move(o.G);
  d.R = std::move(o.R);
  d.Xt_full = std::move(pr.Xt);
  d.Zt = std::move(pr.Zt);
  d.Rt = std::move(pr.Rt);
  return d;
}

// ---------------------------------------------------------------------------
// Variance components

PsiEstimate estimate_psi(const NermData& data) {
  const ObservedPart o = build_observed(data, 0.0);
  const Index n = data.n(), q = data.q(), p = data.p();

  // Within-area demeaning removes the random intercepts.
  MatrixXd xw = o.X;
  VectorXd yw = o.y;
  Index row = 0;
  for (const auto& a : data.areas) {
    const Index k = a.n();
    yw.segment(row, k).array() -= yw.segment(row, k).mean();
    const Eigen::RowVectorXd mx = xw.middleRows(row, k).colwise().mean();
    xw.middleRows(row, k).rowwise() -= mx;
    row += k;
  }
  Index rank_w = 0;
  const double ss_within = residual_ss(xw, yw, &rank_w);
  const Index df_within = n - q - rank_w;
  if (df_within <= 0) throw InputError("insufficient within-area degrees of freedom to estimate sigma^2");

  Index rank_x = 0;
  const double ss_ols = residual_ss(o.X, o.y, &rank_x);
  if (rank_x < p) throw RankDeficientError("covariate matrix is rank deficient");
  if (n <= p) throw InputError("insufficient degrees of freedom to estimate tau^2");
  const MatrixXd xtz = o.X.transpose() * o.Z;
  const MatrixXd xtx = o.X.transpose() * o.X;
  const double trace_h = Eigen::LLT<MatrixXd>(xtx).solve(xtz).cwiseProduct(xtz).sum();
  const double coef = static_cast<double>(n) - trace_h;  // tr(Zᵀ(I − H)Z)
  if (!(coef > 0.0)) throw InputError("tau^2 is not identifiable for this design");

  PsiEstimate est;
  est.sigma2_hat = ss_within / static_cast<double>(df_within);
  if (!(est.sigma2_hat > 0.0)) throw DegenerateFitError("within-area residuals vanish; sigma^2 estimate is zero");
  est.tau2_raw = (ss_ols - static_cast<double>(n - p) * est.sigma2_hat) / coef;
  est.truncated = est.tau2_raw < 0.0;
  est.tau2_hat = est.truncated ? 0.0 : est.tau2_raw;
  est.psi_hat = est.tau2_hat / est.sigma2_hat;
  return est;
}

// ---------------------------------------------------------------------------
// Prediction

double shrinkage(double tau2, double sigma2, Index n_i) {
  return tau2 / (sigma2 + static_cast<double>(n_i) * tau2);
}

NermFit fit_nerm(const NermData& data, const CandidateModel& j) {
  const NermData sub = select_columns(data, j);
  const PsiEstimate pr = estimate_psi(sub);
  const Index p = sub.p();
  // Σ_i⁻¹ = I − ψ/(1 + n_iψ)·J, area by area.
  MatrixXd xsx = MatrixXd::Zero(p, p);
  VectorXd xsy = VectorXd::Zero(p);
  for (const auto& a : sub.areas) {
    const double w = pr.psi_hat / (1.0 + static_cast<double>(a.n()) * pr.psi_hat);
    const VectorXd sx = column_sums(a.X);
    xsx.noalias() += a.X.transpose() * a.X - w * sx * sx.transpose();
    xsy.noalias() += a.X.transpose() * a.y - w * a.y.sum() * sx;
  }
  Eigen::LLT<MatrixXd> llt(xsx);
  if (llt.info() != Eigen::Success) throw RankDeficientError("X(j)'Sigma^-1 X(j) is singular");
  NermFit fit;
  fit.candidate = j;
  fit.beta = llt.solve(xsy);
  fit.tau2 = pr.tau2_hat;
  fit.sigma2 = pr.sigma2_hat;
  fit.psi = pr;
  return fit;
}

namespace {

// Σ_k (y_ik − x_ikᵀβ) for one area, with X already reduced to the candidate.
double residual_sum(const AreaRecord& a, const VectorXd& beta) { return (a.y - a.X * beta).sum(); }

}  // namespace

std::vector<VectorXd> eblup_unit(const NermData& data, const NermFit& fit) {
  const NermData sub = select_columns(data, fit.candidate);
  if (sub.coverage() != Coverage::Unit) throw InputError("unit-level prediction needs unsampled covariates");
  std::vector<VectorXd> out;
  out.reserve(sub.areas.size());
  for (const auto& a : sub.areas) {
    const double offset = shrinkage(fit.tau2, fit.sigma2, a.n()) * residual_sum(a, fit.beta);
    out.push_back((*a.X_unsampled * fit.beta).array() + offset);
  }
  return out;
}

VectorXd eblup_area(const NermData& data, const NermFit& fit) {
  const NermData sub = select_columns(data, fit.candidate);
  const MatrixXd xbar = unsampled_means(sub);
  VectorXd out(sub.q());
  for (Index i = 0; i < sub.q(); ++i) {
    const auto& a = sub.areas[static_cast<std::size_t>(i)];
    out(i) = xbar.row(i).dot(fit.beta) + shrinkage(fit.tau2, fit.sigma2, a.n()) * residual_sum(a, fit.beta);
  }
  return out;
}

std::vector<VectorXd> ebp_log_scale(const NermData& data, const NermFit& fit) {
  std::vector<VectorXd> mu = eblup_unit(data, fit);
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const Index n_i = data.areas[i].n();
    const double v = fit.sigma2 + shrinkage(fit.tau2, fit.sigma2, n_i) * fit.sigma2;
    mu[i] = (mu[i].array() + 0.5 * v).exp();
  }
  return mu;
}

AreaPrediction finite_mean(const std::string& id, Index N, const VectorXd& sampled, double unsampled_mean) {
  const Index n = sampled.size();
  if (n < 1 || N < n) throw InputError("area " + id + ": invalid sample or population size");
  AreaPrediction out;
  out.id = id;
  out.N = N;
  out.n = n;
  out.sampled_mean = sampled.sum() / static_cast<double>(n);
  const Index r = N - n;
  if (r == 0) {
    out.finite_mean = out.sampled_mean;
    return out;
  }
  out.unsampled_mean = unsampled_mean;
  out.finite_mean = (sampled.sum() + static_cast<double>(r) * unsampled_mean) / static_cast<double>(N);
  return out;
}

std::vector<AreaPrediction> predict_finite_mean(const NermData& data, const NermFit& fit, bool log_scale) {
  data.validate();
  std::vector<AreaPrediction> out;
  out.reserve(data.areas.size());
  if (log_scale) {
    if (data.coverage() != Coverage::Unit)
      throw InputError("log-scale prediction needs unit-level unsampled covariates");
    const std::vector<VectorXd> ebp = ebp_log_scale(data, fit);
    for (std::size_t i = 0; i < data.areas.size(); ++i) {
      const auto& a = data.areas[i];
      const double um = a.r() > 0 ? ebp[i].mean() : 0.0;
      out.push_back(finite_mean(a.id, a.N, a.y.array().exp().matrix(), um));
    }
    return out;
  }
  const NermData sub = select_columns(data, fit.candidate);
  for (std::size_t i = 0; i < data.areas.size(); ++i) {
    const auto& a = sub.areas[i];
    double um = 0.0;
    if (a.r() > 0) {
      const VectorXd xbar = a.X_unsampled ? VectorXd(a.X_unsampled->colwise().mean().transpose())
                                          : VectorXd((static_cast<double>(a.N) * *a.mean_x - column_sums(a.X)) /
                                                     static_cast<double>(a.r()));
      um = xbar.dot(fit.beta) + shrinkage(fit.tau2, fit.sigma2, a.n()) * residual_sum(a, fit.beta);
    }
    out.push_back(finite_mean(a.id, a.N, a.y, um));
  }
  return out;
}

}  // namespace shiftcai
