#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "shiftcai/criteria.hpp"
#include "shiftcai/smallarea.hpp"

namespace shiftcai {

// ---------------------------------------------------------------------------
// Bias experiment

struct BiasExperimentConfig {
  Index q = 10;
  Index n_per_area = 3;
  Index r_per_area = 3;
  Index p_omega = 7;
  Index p_star = 5;
  double covariate_correlation = 0.1;  // Σx = (1 − ρ)I + ρJ
  /// β_l = beta_scale · (−1)^l/(l + beta_offset) · U(beta_u_low, beta_u_high)
  double beta_scale = 2.0;
  double beta_offset = 0.7;
  double beta_u_low = 1.0;
  double beta_u_high = 2.0;
  double sigma2 = 1.0;
  double tau2 = 1.0;
  Coverage predictive = Coverage::Unit;
  Index outer_reps = 1000;
  Index oracle_reps = 10000;
  Index boot_reps = 1000;
  std::uint64_t seed = 1;
  unsigned workers = 1;

  void validate() const;
};

/// Covariates and coefficients drawn once and held fixed.
struct BiasFixture {
  NermData data;  // unit-level coverage; y is zero
  DesignSet design;
  TruthParams truth;
};

BiasFixture make_bias_fixture(const BiasExperimentConfig& cfg);

/// Mean of an estimator over the outer replications and its relative bias
/// 100·(mean − cAI)/cAI. The SE of the relative bias combines the outer and
/// oracle standard errors.
struct BiasCell {
  double mean = 0.0;
  double se = 0.0;
  double relbias = 0.0;
  double relbias_se = 0.0;
};

struct BiasRow {
  CandidateModel candidate;
  bool overspecified = false;
  McEstimate truth;
  BiasCell u;
  BiasCell hat;
  BiasCell dagger;
};

struct BiasTable {
  std::vector<BiasRow> rows;
  TruthParams truth;
};

BiasTable run_bias_experiment(const BiasExperimentConfig& cfg);

void write_bias_csv(std::ostream& out, const BiasTable& table);

/// Bias of R̂3 and of R̃̃3 against the closed-form R3 at two sample sizes of
/// one design family: the smaller design uses the first q_small areas of the
/// larger one.
struct R3OrderConfig {
  BiasExperimentConfig base;  // q is ignored
  Index q_small = 20;
  Index q_large = 40;
};

struct R3OrderRow {
  Index n = 0;
  CandidateModel candidate;
  double r3_true = 0.0;
  McEstimate bias_boot;     // R̂3 − R3
  McEstimate bias_plugin;   // R̃̃3 − R3
};

std::vector<R3OrderRow> run_r3_order_experiment(const R3OrderConfig& cfg);

void write_r3_order_csv(std::ostream& out, const std::vector<R3OrderRow>& rows);

// ---------------------------------------------------------------------------
// Design-based small area study

/// Generator of a land-price-like original sample. Log price follows a
/// nested error regression on FAR, TRN, TRN², DST, DST², FOOT, FOOT².
struct PopulationParams {
  std::vector<double> beta{1.9, 0.12, -0.45, 0.025, -0.3, 0.0, -0.1, 0.0};  // intercept first
  double tau2 = 0.04;
  double sigma2 = 0.05;
  double latent_size_low = 2.0;   // S_i/n_i ~ U(low, high)
  double latent_size_high = 8.0;
};

struct DesignSimConfig {
  Index q = 47;
  Index n = 189;
  Index N = 1000;
  Index samples = 200;
  /// Per-area sample sizes; empty selects the default skewed allocation.
  std::vector<Index> allocation;
  PopulationParams population;
  std::uint64_t seed = 1;
  unsigned workers = 1;

  void validate() const;
};

/// Sample sizes between 2 and 12 summing to n over q areas, skewed toward
/// few large areas.
std::vector<Index> default_allocation(Index q, Index n);

/// Columns of the unit records.
struct Population {
  std::vector<Index> area;        // 0-based area of each unit
  std::vector<Index> source;      // original-sample unit it copies
  VectorXd price;                 // P_ik
  MatrixXd covariates;            // FAR, TRN, DST, FOOT
  std::vector<Index> sample_size; // original n_i
  std::vector<Index> area_size;   // N_i
  VectorXd original_weight;       // w_ik = S_i/n_i of each original unit
  Index original_units = 0;       // the first rows are the original sample

  Index N() const { return static_cast<Index>(area.size()); }
};

Population generate_synthetic_population(const DesignSimConfig& cfg);

/// Candidate covariates x0..x7 = 1, FAR, TRN, TRN², DST, DST², FOOT, FOOT².
MatrixXd candidate_covariates(const MatrixXd& raw);

inline const std::vector<std::string>& candidate_covariate_names() {
  static const std::vector<std::string> names{"x0", "FAR", "TRN", "TRN2", "DST", "DST2", "FOOT", "FOOT2"};
  return names;
}

/// "A01", "A02", ... for zero-based area i.
std::string area_label(Index i);

/// One SRS-without-replacement sample in NERM form (y = log P).
NermData draw_design_sample(const Population& pop, std::uint64_t seed);

struct SampleRecord {
  Index sample = 0;
  std::string model_u;
  std::string model_a;
  std::string model_vb;
  double psi_hat = 0.0;
  std::vector<double> truth;  // per area
  std::vector<double> pred_u;
  std::vector<double> pred_a;
  std::vector<double> pred_vb;
};

struct AreaMse {
  std::string area;
  Index N = 0;
  Index n = 0;
  double mse_u = 0.0;
  double mse_a = 0.0;
  double mse_vb = 0.0;
  double ratio_u = 0.0;
  double ratio_a = 0.0;
};

struct DesignSimResult {
  std::vector<AreaMse> areas;
  std::vector<SampleRecord> samples;
  Index redraws = 0;

  double share_area_better() const;          // fraction with ratio_a < 1
  double share_unit_similar(double lo, double hi) const;
};

/// Conventional cAIC: criterion U on the design with no shift.
double conventional_caic_baseline(const VectorXd& y, const DesignSet& design, const CandidateModel& j);

DesignSimResult run_design_sim(const DesignSimConfig& cfg);
DesignSimResult run_design_sim(const DesignSimConfig& cfg, const Population& pop);

/// MSEs recomputed from the stored per-sample predictions.
std::vector<AreaMse> summarize_mse(const std::vector<SampleRecord>& samples, const Population& pop);

void write_design_csv(std::ostream& out, const DesignSimResult& result);
void write_design_samples_csv(std::ostream& out, const DesignSimResult& result);
void write_population_csv(std::ostream& out, const Population& pop);

}  // namespace shiftcai
