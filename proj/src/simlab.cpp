#include "shiftcai/simlab.hpp"

#include <cmath>
#include <map>

#include "shiftcai/random.hpp"
#include "shiftcai/table.hpp"

namespace shiftcai {

namespace {

McEstimate mean_se(const std::vector<double>& values, std::size_t stride, std::size_t offset, Index count) {
  double sum = 0.0;
  for (Index i = 0; i < count; ++i) sum += values[static_cast<std::size_t>(i) * stride + offset];
  const double mean = sum / static_cast<double>(count);
  double ss = 0.0;
  for (Index i = 0; i < count; ++i) {
    const double d = values[static_cast<std::size_t>(i) * stride + offset] - mean;
    ss += d * d;
  }
  const double se = count > 1 ? std::sqrt(ss / static_cast<double>(count - 1) / static_cast<double>(count)) : 0.0;
  return McEstimate{mean, se, count};
}

BiasCell bias_cell(const McEstimate& est, const McEstimate& truth) {
  BiasCell c;
  c.mean = est.mean;
  c.se = est.se;
  c.relbias = 100.0 * (est.mean - truth.mean) / truth.mean;
  c.relbias_se = 100.0 * std::sqrt(est.se * est.se + truth.se * truth.se) / std::abs(truth.mean);
  return c;
}

bool supported_on(const VectorXd& beta, const CandidateModel& j) {
  for (Index k = 0; k < beta.size(); ++k)
    if (beta(k) != 0.0 && !j.contains(k)) return false;
  return true;
}

NermData first_areas(const NermData& data, Index count) {
  NermData out;
  out.areas.assign(data.areas.begin(), data.areas.begin() + count);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Bias experiment

void BiasExperimentConfig::validate() const {
  if (q < 1 || n_per_area < 1 || r_per_area < 1) throw InputError("bias experiment sizes must be positive");
  if (p_omega < 1 || p_star < 1 || p_star > p_omega) throw InputError("need 1 <= p_star <= p_omega");
  if (outer_reps < 100) throw InputError("bias experiment needs at least 100 outer replications");
  if (oracle_reps < 1000) throw InputError("the truth oracle needs at least 1000 iterations");
  if (boot_reps < 1) throw InputError("bootstrap replications must be at least 1");
  if (!(sigma2 > 0.0) || !(tau2 >= 0.0)) throw InputError("invalid variance components");
  if (!(covariate_correlation > -1.0 / static_cast<double>(p_omega - 1 > 0 ? p_omega - 1 : 1)) ||
      covariate_correlation >= 1.0)
    throw InputError("covariate correlation gives a singular covariance");
}

BiasFixture make_bias_fixture(const BiasExperimentConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, streams::kCovariates, 0));
  VectorXd beta = VectorXd::Zero(cfg.p_omega);
  for (Index l = 1; l <= cfg.p_star; ++l) {
    const double sign = (l % 2 == 0) ? 1.0 : -1.0;
    beta(l - 1) = cfg.beta_scale * sign / (static_cast<double>(l) + cfg.beta_offset) *
                  rng.uniform(cfg.beta_u_low, cfg.beta_u_high);
  }
  const double rho = cfg.covariate_correlation;
  const MatrixXd sigma_x =
      (1.0 - rho) * MatrixXd::Identity(cfg.p_omega, cfg.p_omega) + rho * MatrixXd::Ones(cfg.p_omega, cfg.p_omega);
  const MatrixXd lower = Eigen::LLT<MatrixXd>(sigma_x).matrixL();
  auto draw = [&](Index rows) {
    MatrixXd x(rows, cfg.p_omega);
    for (Index r = 0; r < rows; ++r) x.row(r) = (lower * rng.normal_vector(cfg.p_omega)).transpose();
    return x;
  };

  BiasFixture f;
  for (Index i = 0; i < cfg.q; ++i) {
    AreaRecord a;
    a.id = area_label(i);
    a.N = cfg.n_per_area + cfg.r_per_area;
    a.X = draw(cfg.n_per_area);
    a.X_unsampled = draw(cfg.r_per_area);
    a.y = VectorXd::Zero(cfg.n_per_area);
    f.data.areas.push_back(std::move(a));
  }
  f.design = nerm_design(f.data, cfg.tau2 / cfg.sigma2, cfg.predictive);
  f.truth = TruthParams{beta, cfg.sigma2};
  return f;
}

BiasTable run_bias_experiment(const BiasExperimentConfig& cfg) {
  const BiasFixture fixture = make_bias_fixture(cfg);
  const LmmSystem system(fixture.design);
  const std::vector<CandidateModel> candidates = nested_chain(cfg.p_omega);
  const std::vector<McEstimate> truth =
      mc_true_cai(system, candidates, fixture.truth, cfg.oracle_reps, cfg.seed, cfg.workers);

  std::vector<PreparedCandidate> prepared;
  for (const auto& c : candidates) prepared.push_back(prepare_candidate(system, c));

  const std::size_t k = candidates.size();
  const std::size_t stride = 3 * k;
  std::vector<double> values(static_cast<std::size_t>(cfg.outer_reps) * stride);
  parallel_for(static_cast<std::size_t>(cfg.outer_reps), cfg.workers, [&](std::size_t rep) {
    Rng rng(derive_seed(cfg.seed, streams::kOuterData, rep));
    const VectorXd y = simulate_response(system, fixture.truth, rng);
    BootstrapConfig boot;
    boot.replications = cfg.boot_reps;
    boot.seed = derive_seed(cfg.seed, streams::kBootstrap, rep);
    const ResponseContext ctx = make_response_context(y, system, boot);
    for (std::size_t c = 0; c < k; ++c) {
      const ObservedFit fit = gls_fit(y, system, prepared[c].basis);
      double* out = &values[rep * stride + 3 * c];
      out[0] = evaluate_criterion(Variant::U, y, system, prepared[c], ctx, fit).total;
      out[1] = evaluate_criterion(Variant::Hat, y, system, prepared[c], ctx, fit).total;
      out[2] = evaluate_criterion(Variant::Dagger, y, system, prepared[c], ctx, fit).total;
    }
  });

  BiasTable table;
  table.truth = fixture.truth;
  for (std::size_t c = 0; c < k; ++c) {
    BiasRow row;
    row.candidate = candidates[c];
    row.overspecified = supported_on(fixture.truth.beta_star, candidates[c]);
    row.truth = truth[c];
    row.u = bias_cell(mean_se(values, stride, 3 * c, cfg.outer_reps), truth[c]);
    row.hat = bias_cell(mean_se(values, stride, 3 * c + 1, cfg.outer_reps), truth[c]);
    row.dagger = bias_cell(mean_se(values, stride, 3 * c + 2, cfg.outer_reps), truth[c]);
    table.rows.push_back(row);
  }
  return table;
}

void write_bias_csv(std::ostream& out, const BiasTable& table) {
  write_csv_row(out, {"candidate", "p_j", "overspecified", "true_cai", "true_cai_se", "mean_u", "se_u", "relbias_u",
                      "relbias_u_se", "mean_hat", "se_hat", "relbias_hat", "relbias_hat_se", "mean_dagger",
                      "se_dagger", "relbias_dagger", "relbias_dagger_se"});
  for (const auto& r : table.rows) {
    std::vector<std::string> cells{r.candidate.label(), std::to_string(r.candidate.size()),
                                   r.overspecified ? "1" : "0", format_number(r.truth.mean),
                                   format_number(r.truth.se)};
    for (const BiasCell* c : {&r.u, &r.hat, &r.dagger}) {
      cells.push_back(format_number(c->mean));
      cells.push_back(format_number(c->se));
      cells.push_back(format_number(c->relbias));
      cells.push_back(format_number(c->relbias_se));
    }
    write_csv_row(out, cells);
  }
}

// ---------------------------------------------------------------------------
// Order of the R3 estimators

std::vector<R3OrderRow> run_r3_order_experiment(const R3OrderConfig& cfg) {
  if (cfg.q_small < 1 || cfg.q_large < cfg.q_small) throw InputError("need 1 <= q_small <= q_large");
  BiasExperimentConfig base = cfg.base;
  base.q = cfg.q_large;
  const BiasFixture fixture = make_bias_fixture(base);
  const double psi = base.tau2 / base.sigma2;

  std::vector<R3OrderRow> rows;
  for (Index q : {cfg.q_small, cfg.q_large}) {
    const LmmSystem system(nerm_design(first_areas(fixture.data, q), psi, base.predictive));
    std::vector<PreparedCandidate> prepared;
    for (const auto& c : nested_chain(base.p_omega))
      if (!supported_on(fixture.truth.beta_star, c)) prepared.push_back(prepare_candidate(system, c));
    const std::size_t k = prepared.size();
    if (k == 0) throw InputError("the R3 order experiment needs underspecified candidates");

    std::vector<double> r3_true(k);
    for (std::size_t c = 0; c < k; ++c) r3_true[c] = true_r_terms(prepared[c].geometry, fixture.truth).r3;

    const std::uint64_t size_seed = derive_seed(base.seed, streams::kOuterData, static_cast<std::uint64_t>(system.n()));
    std::vector<double> values(static_cast<std::size_t>(base.outer_reps) * 2 * k);
    parallel_for(static_cast<std::size_t>(base.outer_reps), base.workers, [&](std::size_t rep) {
      Rng rng(derive_seed(size_seed, streams::kOuterData, rep));
      const VectorXd y = simulate_response(system, fixture.truth, rng);
      const ParameterPoint eta = full_model_unbiased(y, system);
      BootstrapConfig boot;
      boot.replications = base.boot_reps;
      boot.seed = derive_seed(size_seed, streams::kBootstrap, rep);
      const BootstrapSample sample = draw_bootstrap(system, eta, boot);
      for (std::size_t c = 0; c < k; ++c) {
        const ShiftGeometry& g = prepared[c].geometry;
        values[rep * 2 * k + 2 * c] = bootstrap_r3_r4(g, eta, sample).r3_hat - r3_true[c];
        values[rep * 2 * k + 2 * c + 1] = r3_r4_plugin(g, eta).r3_corrected - r3_true[c];
      }
    });
    for (std::size_t c = 0; c < k; ++c) {
      R3OrderRow row;
      row.n = system.n();
      row.candidate = prepared[c].basis.candidate;
      row.r3_true = r3_true[c];
      row.bias_boot = mean_se(values, 2 * k, 2 * c, base.outer_reps);
      row.bias_plugin = mean_se(values, 2 * k, 2 * c + 1, base.outer_reps);
      rows.push_back(row);
    }
  }
  return rows;
}

void write_r3_order_csv(std::ostream& out, const std::vector<R3OrderRow>& rows) {
  write_csv_row(out, {"n", "candidate", "r3_true", "bias_boot", "bias_boot_se", "bias_plugin", "bias_plugin_se"});
  for (const auto& r : rows)
    write_csv_row(out, {std::to_string(r.n), r.candidate.label(), format_number(r.r3_true),
                        format_number(r.bias_boot.mean), format_number(r.bias_boot.se),
                        format_number(r.bias_plugin.mean), format_number(r.bias_plugin.se)});
}

// ---------------------------------------------------------------------------
// Design-based study

double conventional_caic_baseline(const VectorXd& y, const DesignSet& design, const CandidateModel& j) {
  const LmmSystem system(without_shift(design));
  return criterion(Variant::U, y, system, j).total;
}

double DesignSimResult::share_area_better() const {
  if (areas.empty()) return 0.0;
  Index count = 0;
  for (const auto& a : areas) count += a.ratio_a < 1.0 ? 1 : 0;
  return static_cast<double>(count) / static_cast<double>(areas.size());
}

double DesignSimResult::share_unit_similar(double lo, double hi) const {
  if (areas.empty()) return 0.0;
  Index count = 0;
  for (const auto& a : areas) count += (a.ratio_u >= lo && a.ratio_u <= hi) ? 1 : 0;
  return static_cast<double>(count) / static_cast<double>(areas.size());
}

namespace {

std::vector<double> area_truth(const Population& pop) {
  std::vector<double> sum(pop.area_size.size(), 0.0);
  for (Index u = 0; u < pop.N(); ++u) sum[static_cast<std::size_t>(pop.area[static_cast<std::size_t>(u)])] += pop.price(u);
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] /= static_cast<double>(pop.area_size[i]);
  return sum;
}

// Selection under the three criteria and EBP prediction for one sample.
SampleRecord analyse_sample(const NermData& data, const std::vector<CandidateModel>& candidates) {
  const PsiEstimate psi = estimate_psi(data);
  const VectorXd y = build_observed(data, psi.psi_hat).y;
  const DesignSet unit = nerm_design(data, psi.psi_hat, Coverage::Unit);
  const DesignSet area = nerm_design(data, psi.psi_hat, Coverage::Area);

  auto best = [&](const DesignSet& d, Variant v) {
    const SelectionResult res = select_best(y, LmmSystem(d), candidates, v);
    if (res.ranked.empty()) throw NumericalError("no candidate survived selection");
    return res.best().candidate;
  };
  const CandidateModel ju = best(unit, Variant::Hat);
  const CandidateModel ja = best(area, Variant::Hat);
  const CandidateModel jvb = best(without_shift(unit), Variant::U);

  std::map<std::string, std::vector<double>> cache;
  auto predict = [&](const CandidateModel& j) {
    auto it = cache.find(j.label());
    if (it != cache.end()) return it->second;
    std::vector<double> out;
    for (const auto& a : predict_finite_mean(data, fit_nerm(data, j), true)) out.push_back(a.finite_mean);
    cache.emplace(j.label(), out);
    return out;
  };

  SampleRecord rec;
  rec.model_u = ju.label();
  rec.model_a = ja.label();
  rec.model_vb = jvb.label();
  rec.psi_hat = psi.psi_hat;
  rec.pred_u = predict(ju);
  rec.pred_a = predict(ja);
  rec.pred_vb = predict(jvb);
  return rec;
}

}  // namespace

std::vector<AreaMse> summarize_mse(const std::vector<SampleRecord>& samples, const Population& pop) {
  const std::size_t q = pop.area_size.size();
  std::vector<AreaMse> out(q);
  for (std::size_t i = 0; i < q; ++i) {
    AreaMse& a = out[i];
    a.area = area_label(static_cast<Index>(i));
    a.N = pop.area_size[i];
    a.n = pop.sample_size[i];
    for (const auto& s : samples) {
      const double t = s.truth[i];
      a.mse_u += (s.pred_u[i] - t) * (s.pred_u[i] - t);
      a.mse_a += (s.pred_a[i] - t) * (s.pred_a[i] - t);
      a.mse_vb += (s.pred_vb[i] - t) * (s.pred_vb[i] - t);
    }
    const double count = static_cast<double>(samples.size());
    a.mse_u /= count;
    a.mse_a /= count;
    a.mse_vb /= count;
    a.ratio_u = a.mse_u / a.mse_vb;
    a.ratio_a = a.mse_a / a.mse_vb;
  }
  return out;
}

DesignSimResult run_design_sim(const DesignSimConfig& cfg) {
  return run_design_sim(cfg, generate_synthetic_population(cfg));
}

DesignSimResult run_design_sim(const DesignSimConfig& cfg, const Population& pop) {
  cfg.validate();
  const std::vector<double> truth = area_truth(pop);
  const std::vector<CandidateModel> candidates = all_subsets(8, {0});
  const auto count = static_cast<std::size_t>(cfg.samples);
  const Index max_redraws = cfg.samples / 100;

  std::vector<SampleRecord> records(count);
  std::vector<Index> redraws(count, 0);
  parallel_for(count, cfg.workers, [&](std::size_t t) {
    const std::uint64_t base = derive_seed(cfg.seed, streams::kSampling, t);
    for (Index attempt = 0;; ++attempt) {
      const std::uint64_t seed = attempt == 0 ? base : derive_seed(base, streams::kSampling, static_cast<std::uint64_t>(attempt));
      try {
        records[t] = analyse_sample(draw_design_sample(pop, seed), candidates);
        break;
      } catch (const Error& e) {
        if (attempt >= max_redraws) throw NumericalError(std::string("design sample failed: ") + e.what());
        ++redraws[t];
      }
    }
    records[t].sample = static_cast<Index>(t);
    records[t].truth = truth;
  });

  DesignSimResult result;
  for (Index r : redraws) result.redraws += r;
  if (result.redraws > max_redraws)
    throw NumericalError("more than 1% of design samples needed a redraw");
  result.samples = std::move(records);
  result.areas = summarize_mse(result.samples, pop);
  return result;
}

void write_design_csv(std::ostream& out, const DesignSimResult& result) {
  write_csv_row(out, {"area", "N", "n", "mse_u", "mse_a", "mse_vb", "ratio_u", "ratio_a"});
  for (const auto& a : result.areas)
    write_csv_row(out, {a.area, std::to_string(a.N), std::to_string(a.n), format_number(a.mse_u),
                        format_number(a.mse_a), format_number(a.mse_vb), format_number(a.ratio_u),
                        format_number(a.ratio_a)});
}

void write_design_samples_csv(std::ostream& out, const DesignSimResult& result) {
  write_csv_row(out, {"sample", "area", "truth", "pred_u", "pred_a", "pred_vb", "model_u", "model_a", "model_vb",
                      "psi_hat"});
  for (const auto& s : result.samples)
    for (std::size_t i = 0; i < s.truth.size(); ++i)
      write_csv_row(out, {std::to_string(s.sample), area_label(static_cast<Index>(i)), format_number(s.truth[i]),
                          format_number(s.pred_u[i]), format_number(s.pred_a[i]), format_number(s.pred_vb[i]),
                          s.model_u, s.model_a, s.model_vb, format_number(s.psi_hat)});
}

void write_population_csv(std::ostream& out, const Population& pop) {
  write_csv_row(out, {"area", "unit", "source", "P", "FAR", "TRN", "DST", "FOOT"});
  for (Index u = 0; u < pop.N(); ++u)
    write_csv_row(out, {area_label(pop.area[static_cast<std::size_t>(u)]), std::to_string(u + 1),
                        std::to_string(pop.source[static_cast<std::size_t>(u)] + 1), format_number(pop.price(u)),
                        format_number(pop.covariates(u, 0)), format_number(pop.covariates(u, 1)),
                        format_number(pop.covariates(u, 2)), format_number(pop.covariates(u, 3))});
}

}  // namespace shiftcai
