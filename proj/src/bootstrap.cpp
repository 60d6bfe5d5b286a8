#include <cmath>

#include "shiftcai/criteria.hpp"
#include "shiftcai/random.hpp"

namespace shiftcai {

namespace {

// Symmetric square root factor F with F Fᵀ = M for a PSD matrix.
MatrixXd psd_factor(const MatrixXd& m) {
  if (m.size() == 0) return m;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(m);
  const VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal();
}

}  // namespace

std::optional<std::string> BootstrapConfig::validate() const {
  if (replications < 1) throw InputError("bootstrap replications must be at least 1");
  if (replications < 100)
    return "bootstrap with " + std::to_string(replications) + " replications (fewer than 100) is unreliable";
  return std::nullopt;
}

BootstrapSample draw_bootstrap(const LmmSystem& system, const ParameterPoint& eta, const BootstrapConfig& cfg) {
  cfg.validate();
  if (!(eta.sigma2 > 0.0)) throw InputError("bootstrap needs a positive variance estimate");
  const auto& d = system.design();
  const Index n = system.n(), p = system.p_full();
  const MatrixXd g_factor = psd_factor(d.G);
  MatrixXd r_factor;
  if (cfg.error_scale == ErrorScale::R) r_factor = Eigen::LLT<MatrixXd>(d.R).matrixL();
  const double sd = std::sqrt(eta.sigma2);
  const VectorXd mean = d.X_full * eta.beta;
  const double scale = eta.sigma2;

  auto refit = [&](Rng& rng) -> std::optional<ParameterPoint> {
    VectorXd y = mean;
    if (d.q() > 0) y.noalias() += d.Z * (g_factor * (sd * rng.normal_vector(d.q())));
    VectorXd eps = rng.normal_vector(n);
    if (cfg.error_scale == ErrorScale::R) eps = r_factor * eps;
    y.noalias() += sd * eps;
    const VectorXd sy = system.sigma_inverse() * y;
    ParameterPoint out;
    out.beta = system.gram_inverse() * (d.X_full.transpose() * sy);
    const VectorXd resid = y - d.X_full * out.beta;
    const VectorXd w = sy - system.sigma_inv_x() * out.beta;
    out.sigma2 = resid.dot(w) / static_cast<double>(n - p);
    if (!(out.sigma2 > 1e-12 * scale) || !std::isfinite(out.sigma2)) return std::nullopt;
    return out;
  };

  const Index cap = cfg.replications / 100;  // 1%
  BootstrapSample sample;
  sample.draws.reserve(static_cast<std::size_t>(cfg.replications));
  for (Index b = 0; b < cfg.replications; ++b) {
    Rng rng(derive_seed(cfg.seed, streams::kBootstrap, static_cast<std::uint64_t>(b)));
    auto draw = refit(rng);
    for (Index attempt = 1; !draw; ++attempt) {
      if (++sample.rejected > cap)
        throw NumericalError("bootstrap: more than 1% of resamples gave degenerate refits");
      Rng redraw(derive_seed(cfg.seed ^ static_cast<std::uint64_t>(attempt), streams::kBootstrapRedraw,
                             static_cast<std::uint64_t>(b)));
      draw = refit(redraw);
    }
    sample.draws.push_back(std::move(*draw));
  }
  return sample;
}

BootstrapR34 bootstrap_r3_r4(const ShiftGeometry& geom, const ParameterPoint& eta, const BootstrapSample& sample) {
  if (sample.draws.empty()) throw InputError("empty bootstrap sample");
  double sum_r3 = 0.0, sum_r4 = 0.0, sum_b1 = 0.0;
  for (const auto& draw : sample.draws) {
    sum_r3 += r3_value(geom, draw);
    sum_r4 += r4_value(geom, draw);
    sum_b1 += b1_correction(geom, draw);
  }
  const double count = static_cast<double>(sample.draws.size());
  BootstrapR34 out;
  out.r4_hat = 2.0 * r4_value(geom, eta) - sum_r4 / count;
  out.r3_hat = 2.0 * r3_value(geom, eta) - sum_r3 / count + sum_b1 / count - b1_correction(geom, eta);
  return out;
}

BootstrapR34 bootstrap_r3_r4(const ShiftGeometry& geom, const LmmSystem& system, const ParameterPoint& eta,
                             const BootstrapConfig& cfg) {
  return bootstrap_r3_r4(geom, eta, draw_bootstrap(system, eta, cfg));
}

}  // namespace shiftcai
