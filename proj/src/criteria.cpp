#include "shiftcai/criteria.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>

#include "shiftcai/random.hpp"

namespace shiftcai {

namespace {

double dn(Index v) { return static_cast<double>(v); }

struct QuadraticParts {
  VectorXd Cb;  // Cβ
  VectorXd Mb;  // BᵀR̃⁻¹Bβ
  double c = 0.0;  // βᵀCβ
  double q = 0.0;  // βᵀBᵀR̃⁻¹Bβ
};

QuadraticParts quadratic_parts(const ShiftGeometry& g, const VectorXd& beta) {
  QuadraticParts p;
  p.Cb = g.C * beta;
  p.Mb = g.B_weight * beta;
  p.c = beta.dot(p.Cb);
  p.q = beta.dot(p.Mb);
  return p;
}

double lambda_poly(double lambda, Index p_j) {
  return -2.0 * lambda * lambda * lambda + dn(p_j + 4) * lambda * lambda;
}

}  // namespace

// ---------------------------------------------------------------------------
// Geometry

ShiftGeometry shift_geometry(const LmmSystem& system, const CandidateModel& j) {
  return shift_geometry(system, candidate_basis(system, j));
}

ShiftGeometry shift_geometry(const LmmSystem& system, const CandidateBasis& basis) {
  const auto& idx = basis.candidate.indices();
  ShiftGeometry g;
  g.candidate = basis.candidate;
  g.n = system.n();
  g.p_j = basis.candidate.size();
  g.p_omega = system.p_full();
  g.Lambda = system.conditional_covariance_ptr();

  const MatrixXd& shifted = system.shifted_x();
  g.A = shifted(Eigen::all, idx);
  // With D_j = basis.coupling, B = A·D_j − (X̃(ω) − Z̃GZᵀΣ⁻¹X(ω)).
  g.B = g.A * basis.coupling - shifted;
  for (Index k : idx) g.B.col(k).setZero();

  g.C = system.gram() - system.gram()(Eigen::all, idx) * basis.coupling;
  for (Index k : idx) {
    g.C.col(k).setZero();
    g.C.row(k).setZero();
  }
  g.C = 0.5 * (g.C + g.C.transpose());

  const MatrixXd rt_inv_a = system.rt_solve(g.A);
  g.trace_rt_inv_lambda = system.trace_rt_inv_lambda();
  g.trace_a_term = (basis.gram_inv * (g.A.transpose() * rt_inv_a)).trace();
  g.gamma = g.trace_rt_inv_lambda + g.trace_a_term;

  g.B_weight = g.B.transpose() * system.rt_solve(g.B);
  g.B_weight = 0.5 * (g.B_weight + g.B_weight.transpose());
  for (Index k : idx) {
    g.B_weight.col(k).setZero();
    g.B_weight.row(k).setZero();
  }
  g.gls_cov = system.gram_inverse();
  g.trace_c_cov = g.C.cwiseProduct(g.gls_cov).sum();
  g.trace_b_cov = g.B_weight.cwiseProduct(g.gls_cov).sum();
  g.trace_r_pj = basis.gram_inv.cwiseProduct(system.residual_weight()(idx, idx)).sum();
  return g;
}

// ---------------------------------------------------------------------------
// Risk terms at the truth

double r_star(const ShiftGeometry& g) {
  if (g.n <= g.p_j + 2) throw NumericalError("R* undefined: need n > p_j + 2");
  return dn(g.n) * g.gamma / dn(g.n - g.p_j - 2);
}

TrueRTerms true_r_terms(const ShiftGeometry& g, const TruthParams& truth) {
  if (truth.beta_star.size() != g.p_omega) throw InputError("beta_star has the wrong length");
  if (!(truth.sigma2_star > 0.0)) throw InputError("sigma2_star must be positive");
  const QuadraticParts qp = quadratic_parts(g, truth.beta_star);
  TrueRTerms t;
  t.r_star = r_star(g);
  t.delta = qp.c / (dn(g.n) * truth.sigma2_star);
  t.lambda = 1.0 / (1.0 + t.delta);
  const double l = t.lambda;
  const double scaled_q = qp.q / truth.sigma2_star;
  t.r1 = g.gamma * (l - 1.0);
  t.r2 = g.gamma * (lambda_poly(l, g.p_j) - dn(g.p_j + 2)) / dn(g.n);
  t.r3 = l * scaled_q;
  t.r4 = lambda_poly(l, g.p_j) / dn(g.n) * scaled_q;
  return t;
}

// ---------------------------------------------------------------------------
// Monte Carlo truth

McEstimate mc_true_cai(const LmmSystem& system, const CandidateModel& j, const TruthParams& truth, Index iterations,
                       std::uint64_t seed, unsigned workers) {
  return mc_true_cai(system, std::vector<CandidateModel>{j}, truth, iterations, seed, workers).front();
}

std::vector<McEstimate> mc_true_cai(const LmmSystem& system, const std::vector<CandidateModel>& candidates,
                                    const TruthParams& truth, Index iterations, std::uint64_t seed,
                                    unsigned workers) {
  if (iterations < 1000) throw InputError("mc_true_cai needs at least 1000 iterations");
  if (truth.beta_star.size() != system.p_full()) throw InputError("beta_star has the wrong length");
  std::vector<CandidateBasis> bases;
  bases.reserve(candidates.size());
  for (const auto& c : candidates) bases.push_back(candidate_basis(system, c));

  const Index n = system.n();
  const double m = static_cast<double>(system.m());
  const double log_det_rt = system.log_det_rt();
  const double tr_lambda = system.trace_rt_inv_lambda();
  const VectorXd a_truth = system.shifted_x() * truth.beta_star;
  const std::size_t k = candidates.size();
  std::vector<double> values(static_cast<std::size_t>(iterations) * k);

  parallel_for(static_cast<std::size_t>(iterations), workers, [&](std::size_t it) {
    Rng rng(derive_seed(seed, streams::kTruthOracle, it));
    const VectorXd y = simulate_response(system, truth, rng);
    const VectorXd sy = system.sigma_inverse() * y;
    for (std::size_t c = 0; c < k; ++c) {
      const CandidateBasis& b = bases[c];
      const VectorXd beta = b.gram_inv * (b.X.transpose() * sy);
      const VectorXd resid = y - b.X * beta;
      const VectorXd w = sy - b.sigma_inv_x * beta;
      const double s2 = resid.dot(w) / static_cast<double>(n);
      const VectorXd a = system.shifted_x()(Eigen::all, b.candidate.indices()) * beta - a_truth;
      values[it * k + c] = m * std::log(2.0 * std::numbers::pi * s2) + log_det_rt +
                           tr_lambda * truth.sigma2_star / s2 + system.rt_quadratic(a) / s2;
    }
  });

  std::vector<McEstimate> out(k);
  for (std::size_t c = 0; c < k; ++c) {
    double sum = 0.0;
    for (Index it = 0; it < iterations; ++it) sum += values[static_cast<std::size_t>(it) * k + c];
    const double mean = sum / dn(iterations);
    double ss = 0.0;
    for (Index it = 0; it < iterations; ++it) {
      const double d = values[static_cast<std::size_t>(it) * k + c] - mean;
      ss += d * d;
    }
    out[c] = McEstimate{mean, std::sqrt(ss / dn(iterations - 1) / dn(iterations)), iterations};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Estimators of R1..R4

LambdaMoments lambda_hats(double sigma2_j, double sigma2_omega, Index n, Index p_j, Index p_omega) {
  if (!(sigma2_j > 0.0)) throw DegenerateFitError("lambda_hats: sigma2_j must be positive");
  if (!(n > p_omega && p_omega >= p_j)) throw InputError("lambda_hats needs n > p_omega >= p_j");
  const double ratio = sigma2_omega / sigma2_j;
  const double aj = dn(n - p_j), aw = dn(n - p_omega);
  LambdaMoments lh;
  lh.l1 = aj / aw * ratio;
  lh.l2 = (aj * (aj + 2.0)) / (aw * (aw + 2.0)) * ratio * ratio;
  lh.l3 = (aj * (aj + 2.0) * (aj + 4.0)) / (aw * (aw + 2.0) * (aw + 4.0)) * ratio * ratio * ratio;
  return lh;
}

LambdaMoments lambda_hats(const ObservedFit& fit_j, const ObservedFit& fit_omega, Index n) {
  if (!fit_omega.candidate.is_full()) throw InputError("lambda_hats: second fit must be the full model");
  return lambda_hats(fit_j.sigma2_hat, fit_omega.sigma2_hat, n, fit_j.candidate.size(), fit_omega.candidate.size());
}

double r1_hat(const ShiftGeometry& g, const LambdaMoments& lh) {
  const double correction = (-2.0 * lh.l3 + dn(g.p_j + 2) * lh.l2 - dn(g.p_j) * lh.l1) / dn(g.n);
  return g.gamma * (lh.l1 - correction - 1.0);
}

double r2_hat(const ShiftGeometry& g, const LambdaMoments& lh) {
  return g.gamma * (-2.0 * lh.l3 + dn(g.p_j + 4) * lh.l2 - dn(g.p_j + 2)) / dn(g.n);
}

double r3_value(const ShiftGeometry& g, const ParameterPoint& eta) {
  const QuadraticParts qp = quadratic_parts(g, eta.beta);
  const double lambda = 1.0 / (1.0 + qp.c / (dn(g.n) * eta.sigma2));
  return lambda * qp.q / eta.sigma2;
}

double r4_value(const ShiftGeometry& g, const ParameterPoint& eta) {
  const QuadraticParts qp = quadratic_parts(g, eta.beta);
  const double lambda = 1.0 / (1.0 + qp.c / (dn(g.n) * eta.sigma2));
  return lambda_poly(lambda, g.p_j) / dn(g.n) * qp.q / eta.sigma2;
}

R3Hessian r3_hessian(const ShiftGeometry& g, const ParameterPoint& eta) {
  const QuadraticParts qp = quadratic_parts(g, eta.beta);
  const double n = dn(g.n), s = eta.sigma2;
  const double d1 = 1.0 + qp.c / (n * s);  // 1 + δ
  const double lambda = 1.0 / d1;
  R3Hessian h;
  h.beta_beta = (qp.q / s) * (-2.0 * g.C / (n * s * d1 * d1) +
                              8.0 * qp.Cb * qp.Cb.transpose() / (n * n * s * s * d1 * d1 * d1)) -
                (4.0 * qp.Mb * qp.Cb.transpose() + 4.0 * qp.Cb * qp.Mb.transpose()) / (n * s * s * d1 * d1) +
                2.0 * lambda * g.B_weight / s;
  h.sigma_sigma = (qp.q / s) * (-2.0 * qp.c / (n * s * s * s * d1 * d1) +
                                2.0 * qp.c * qp.c / (n * n * s * s * s * s * d1 * d1 * d1)) -
                  2.0 * qp.q * qp.c / (n * s * s * s * s * d1 * d1) + 2.0 * lambda * qp.q / (s * s * s);
  return h;
}

double b1_correction(const ShiftGeometry& g, const ParameterPoint& eta) {
  if (!(eta.sigma2 > 0.0)) throw InputError("b1_correction: sigma2 must be positive");
  const QuadraticParts qp = quadratic_parts(g, eta.beta);
  const double n = dn(g.n), s = eta.sigma2;
  const double d1 = 1.0 + qp.c / (n * s);
  const double lambda = 1.0 / d1;
  const VectorXd v_cb = g.gls_cov * qp.Cb;
  // tr(∂²R3/∂β∂βᵀ · V) with V = (X(ω)ᵀΣ⁻¹X(ω))⁻¹, expanded term by term.
  const double tr_hv = (qp.q / s) * (-2.0 * g.trace_c_cov / (n * s * d1 * d1) +
                                     8.0 * qp.Cb.dot(v_cb) / (n * n * s * s * d1 * d1 * d1)) -
                       8.0 * qp.Mb.dot(v_cb) / (n * s * s * d1 * d1) + 2.0 * lambda * g.trace_b_cov / s;
  const double h_ss = (qp.q / s) * (-2.0 * qp.c / (n * s * s * s * d1 * d1) +
                                    2.0 * qp.c * qp.c / (n * n * s * s * s * s * d1 * d1 * d1)) -
                      2.0 * qp.q * qp.c / (n * s * s * s * s * d1 * d1) + 2.0 * lambda * qp.q / (s * s * s);
  const double var_sigma2 = 2.0 * s * s / dn(g.n - g.p_omega);
  return 0.5 * tr_hv * s + 0.5 * h_ss * var_sigma2;
}

PluginR34 r3_r4_plugin(const ShiftGeometry& g, const ParameterPoint& eta) {
  PluginR34 out;
  out.r3_tilde = r3_value(g, eta);
  out.r4_tilde = r4_value(g, eta);
  out.r3_corrected = out.r3_tilde - b1_correction(g, eta);
  return out;
}

// ---------------------------------------------------------------------------
// Criteria

std::string to_string(Variant v) {
  switch (v) {
    case Variant::U: return "u";
    case Variant::Hat: return "hat";
    case Variant::Dagger: return "dagger";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  if (name == "u" || name == "U") return Variant::U;
  if (name == "hat" || name == "HAT") return Variant::Hat;
  if (name == "dagger" || name == "DAGGER") return Variant::Dagger;
  throw InputError("unknown criterion variant '" + name + "' (expected u, hat or dagger)");
}

PreparedCandidate prepare_candidate(const LmmSystem& system, const CandidateModel& j) {
  PreparedCandidate p{candidate_basis(system, j), ShiftGeometry{}};
  p.geometry = shift_geometry(system, p.basis);
  return p;
}

ResponseContext make_response_context(const VectorXd& y, const LmmSystem& system,
                                      const std::optional<BootstrapConfig>& boot) {
  ResponseContext ctx;
  ctx.full_fit = gls_fit(y, system, CandidateModel::full(system.p_full()));
  ctx.eta_tilde = full_model_unbiased(ctx.full_fit, system.n());
  if (boot) ctx.bootstrap = draw_bootstrap(system, ctx.eta_tilde, *boot);
  return ctx;
}

CriterionBreakdown evaluate_criterion(Variant variant, const VectorXd& y, const LmmSystem& system,
                                      const PreparedCandidate& cand, const ResponseContext& ctx) {
  return evaluate_criterion(variant, y, system, cand, ctx, gls_fit(y, system, cand.basis));
}

CriterionBreakdown evaluate_criterion(Variant variant, const VectorXd& y, const LmmSystem& system,
                                      const PreparedCandidate& cand, const ResponseContext& ctx,
                                      const ObservedFit& fit_j) {
  const ShiftGeometry& g = cand.geometry;
  CriterionBreakdown out;
  out.variant = variant;
  out.candidate = cand.basis.candidate;
  out.sigma2_hat = fit_j.sigma2_hat;
  const double base = static_cast<double>(system.m()) * std::log(2.0 * std::numbers::pi * fit_j.sigma2_hat) +
                      system.log_det_rt();

  if (variant == Variant::U) {
    // y − Xβ̂ − Zb̂ = RΣ⁻¹(y − Xβ̂), so the R⁻¹-weighted residual is wᵀRw.
    const VectorXd resid = y - cand.basis.X * fit_j.beta_hat;
    const VectorXd w = system.covariance().solve(resid);
    const double conditional_rss = w.dot(system.r_apply(w));
    out.goodness = base + conditional_rss / fit_j.sigma2_hat;
    if (g.n <= g.p_j + 2) throw NumericalError("criterion U undefined: need n > p_j + 2");
    const double n = dn(g.n);
    out.delta_cs = n / dn(g.n - g.p_j - 2) * (g.trace_rt_inv_lambda + g.trace_a_term) +
                   n / dn(g.n - g.p_j) * (-system.trace_r_sigma_inv() + g.trace_r_pj);
    out.total = out.goodness + out.delta_cs;
    return out;
  }

  out.goodness = base;
  out.r_star = r_star(g);
  const LambdaMoments lh = lambda_hats(fit_j, ctx.full_fit, g.n);
  out.r1 = r1_hat(g, lh);
  out.r2 = r2_hat(g, lh);
  if (variant == Variant::Hat) {
    const PluginR34 plug = r3_r4_plugin(g, ctx.eta_tilde);
    out.r3 = plug.r3_corrected;
    out.r4 = plug.r4_tilde;
  } else {
    if (!ctx.bootstrap) throw InputError("the dagger criterion needs a bootstrap configuration");
    const BootstrapR34 br = bootstrap_r3_r4(g, ctx.eta_tilde, *ctx.bootstrap);
    out.r3 = br.r3_hat;
    out.r4 = br.r4_hat;
  }
  out.total = out.goodness + out.r_star + out.r1 + out.r2 + out.r3 + out.r4;
  return out;
}

CriterionBreakdown criterion(Variant variant, const VectorXd& y, const LmmSystem& system, const CandidateModel& j,
                             const std::optional<BootstrapConfig>& boot) {
  if (variant == Variant::Dagger && !boot) throw InputError("the dagger criterion needs a bootstrap configuration");
  if (boot) {
    if (auto warning = boot->validate()) std::clog << "warning: " << *warning << '\n';
  }
  const PreparedCandidate cand = prepare_candidate(system, j);
  const ResponseContext ctx =
      make_response_context(y, system, variant == Variant::Dagger ? boot : std::optional<BootstrapConfig>{});
  return evaluate_criterion(variant, y, system, cand, ctx);
}

// ---------------------------------------------------------------------------
// Selection

const CriterionBreakdown& SelectionResult::best() const {
  if (ranked.empty()) throw NumericalError("no candidate survived evaluation");
  return ranked.front();
}

void rank_breakdowns(std::vector<CriterionBreakdown>& rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const CriterionBreakdown& a, const CriterionBreakdown& b) {
    if (a.total != b.total) return a.total < b.total;
    if (a.candidate.size() != b.candidate.size()) return a.candidate.size() < b.candidate.size();
    return a.candidate.indices() < b.candidate.indices();
  });
}

SelectionResult select_best(const VectorXd& y, const LmmSystem& system, const std::vector<CandidateModel>& candidates,
                            Variant variant, const std::optional<BootstrapConfig>& boot, unsigned workers) {
  if (candidates.empty()) throw InputError("select_best: empty candidate list");
  if (variant == Variant::Dagger && !boot) throw InputError("the dagger criterion needs a bootstrap configuration");
  if (boot) {
    if (auto warning = boot->validate()) std::clog << "warning: " << *warning << '\n';
  }

  SelectionResult result;
  std::vector<PreparedCandidate> prepared;
  for (const auto& c : candidates) {
    try {
      prepared.push_back(prepare_candidate(system, c));
    } catch (const RankDeficientError& e) {
      result.excluded.push_back({c, e.what()});
    }
  }
  if (prepared.empty()) return result;

  const ResponseContext ctx =
      make_response_context(y, system, variant == Variant::Dagger ? boot : std::optional<BootstrapConfig>{});
  std::vector<std::optional<CriterionBreakdown>> rows(prepared.size());
  std::vector<std::string> failures(prepared.size());
  parallel_for(prepared.size(), workers, [&](std::size_t i) {
    try {
      rows[i] = evaluate_criterion(variant, y, system, prepared[i], ctx);
    } catch (const DegenerateFitError& e) {
      failures[i] = e.what();
    } catch (const NumericalError& e) {
      failures[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < prepared.size(); ++i) {
    if (rows[i]) {
      result.ranked.push_back(*rows[i]);
    } else {
      result.excluded.push_back({prepared[i].basis.candidate, failures[i]});
    }
  }
  rank_breakdowns(result.ranked);
  return result;
}

}  // namespace shiftcai
