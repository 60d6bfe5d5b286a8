#include <algorithm>
#include <cmath>
#include <numeric>

#include "shiftcai/random.hpp"
#include "shiftcai/simlab.hpp"

namespace shiftcai {

namespace {

constexpr Index kMinPerArea = 2;
constexpr Index kMaxPerArea = 12;
constexpr double kAllocationSkew = 4.0;

// Column order of Population::covariates.
enum RawColumn : Index { kFar = 0, kTrn = 1, kDst = 2, kFoot = 3 };

}  // namespace

std::string area_label(Index i) {
  std::string s = std::to_string(i + 1);
  if (s.size() < 2) s.insert(0, "0");
  return "A" + s;
}

void DesignSimConfig::validate() const {
  if (q < 1) throw InputError("design sim needs at least one area");
  if (N < n) throw InputError("population size must be at least the sample size");
  if (samples < 1) throw InputError("design sim needs at least one sample");
  if (!allocation.empty()) {
    if (static_cast<Index>(allocation.size()) != q) throw InputError("allocation must list one size per area");
    if (std::accumulate(allocation.begin(), allocation.end(), Index{0}) != n)
      throw InputError("allocation must sum to n");
    for (Index v : allocation)
      if (v < kMinPerArea) throw InputError("every area needs at least two sampled units");
  }
  if (population.beta.size() != 8) throw InputError("population coefficients need 8 entries");
  if (!(population.tau2 >= 0.0) || !(population.sigma2 > 0.0)) throw InputError("invalid population variances");
  if (!(population.latent_size_low > 0.0) || population.latent_size_high < population.latent_size_low)
    throw InputError("invalid latent area size range");
}

std::vector<Index> default_allocation(Index q, Index n) {
  if (n < kMinPerArea * q || n > kMaxPerArea * q)
    throw InputError("default allocation needs 2q <= n <= 12q");
  const Index extra = n - kMinPerArea * q;
  const double cap = static_cast<double>(kMaxPerArea - kMinPerArea);
  std::vector<double> target(static_cast<std::size_t>(q));
  double total = 0.0;
  for (Index i = 0; i < q; ++i) {
    target[static_cast<std::size_t>(i)] = std::pow(1.0 - static_cast<double>(i) / static_cast<double>(q), kAllocationSkew);
    total += target[static_cast<std::size_t>(i)];
  }
  std::vector<Index> base(static_cast<std::size_t>(q));
  Index assigned = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    target[i] = std::min(cap, static_cast<double>(extra) * target[i] / total);
    base[i] = static_cast<Index>(std::floor(target[i]));
    assigned += base[i];
  }
  std::vector<std::size_t> order(target.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return target[a] - static_cast<double>(base[a]) > target[b] - static_cast<double>(base[b]);
  });
  // Largest remainders first; sweep again if capped areas left some over.
  while (assigned < extra) {
    for (std::size_t i : order) {
      if (assigned == extra) break;
      if (base[i] < kMaxPerArea - kMinPerArea) {
        ++base[i];
        ++assigned;
      }
    }
  }
  for (auto& v : base) v += kMinPerArea;
  return base;
}

MatrixXd candidate_covariates(const MatrixXd& raw) {
  MatrixXd x(raw.rows(), 8);
  x.col(0).setOnes();
  x.col(1) = raw.col(kFar);
  x.col(2) = raw.col(kTrn);
  x.col(3) = raw.col(kTrn).array().square();
  x.col(4) = raw.col(kDst);
  x.col(5) = raw.col(kDst).array().square();
  x.col(6) = raw.col(kFoot);
  x.col(7) = raw.col(kFoot).array().square();
  return x;
}

Population generate_synthetic_population(const DesignSimConfig& cfg) {
  cfg.validate();
  const PopulationParams& pp = cfg.population;
  std::vector<Index> alloc = cfg.allocation.empty() ? default_allocation(cfg.q, cfg.n) : cfg.allocation;
  Rng rng(derive_seed(cfg.seed, streams::kPopulation, 0));
  if (cfg.allocation.empty()) {
    // Large samples land on random stations rather than the first ones.
    for (std::size_t i = alloc.size(); i > 1; --i) {
      const auto k = static_cast<std::size_t>(rng.uniform(0.0, static_cast<double>(i)));
      std::swap(alloc[i - 1], alloc[std::min(k, i - 1)]);
    }
  }

  Population pop;
  pop.sample_size = alloc;
  pop.original_units = cfg.n;
  MatrixXd raw(cfg.n, 4);
  VectorXd log_price(cfg.n);
  pop.original_weight.resize(cfg.n);
  std::vector<Index> original_area;
  Index row = 0;
  const Eigen::Map<const VectorXd> beta(pp.beta.data(), 8);
  for (Index i = 0; i < cfg.q; ++i) {
    const double position = static_cast<double>(i) / static_cast<double>(std::max<Index>(cfg.q - 1, 1));
    const double trn = 1.5 + 6.0 * position + 0.3 * rng.normal();  // tens of minutes to the terminal
    const double area_effect = std::sqrt(pp.tau2) * rng.normal();
    const Index n_i = alloc[static_cast<std::size_t>(i)];
    const double weight = rng.uniform(pp.latent_size_low, pp.latent_size_high);  // S_i/n_i
    for (Index k = 0; k < n_i; ++k, ++row) {
      const double dst = std::exp(std::log(0.7) + 0.5 * rng.normal());    // km
      const double foot = 1.25 * dst * std::exp(0.15 * rng.normal());     // tens of minutes
      const double far = std::exp(std::log(2.0) + 0.45 * rng.normal());   // hundreds of percent
      raw.row(row) << far, trn, dst, foot;
      const double mean = candidate_covariates(raw.row(row)).row(0).dot(beta);
      log_price(row) = mean + area_effect + std::sqrt(pp.sigma2) * rng.normal();
      pop.original_weight(row) = weight;
      original_area.push_back(i);
    }
  }

  // Resample the remaining units with probability ∝ 1/w_ik; every area keeps
  // at least one unsampled unit.
  const Index extra = cfg.N - cfg.n;
  VectorXd cumulative(cfg.n);
  double acc = 0.0;
  for (Index u = 0; u < cfg.n; ++u) cumulative(u) = (acc += 1.0 / pop.original_weight(u));
  std::vector<Index> draws;
  for (Index attempt = 0;; ++attempt) {
    Rng pick(derive_seed(cfg.seed, streams::kPopulation, static_cast<std::uint64_t>(attempt + 1)));
    draws.assign(static_cast<std::size_t>(extra), 0);
    std::vector<Index> per_area(static_cast<std::size_t>(cfg.q), 0);
    for (auto& d : draws) {
      const double u = pick.uniform(0.0, acc);
      d = std::min<Index>(static_cast<Index>(std::upper_bound(cumulative.data(), cumulative.data() + cfg.n, u) -
                                             cumulative.data()),
                          cfg.n - 1);
      ++per_area[static_cast<std::size_t>(original_area[static_cast<std::size_t>(d)])];
    }
    if (extra == 0 || std::all_of(per_area.begin(), per_area.end(), [](Index c) { return c > 0; })) break;
    if (attempt >= 1000) throw NumericalError("could not give every area an unsampled unit");
  }

  std::vector<Index> sources(static_cast<std::size_t>(cfg.n));
  std::iota(sources.begin(), sources.end(), 0);
  sources.insert(sources.end(), draws.begin(), draws.end());
  pop.covariates.resize(cfg.N, 4);
  pop.price.resize(cfg.N);
  for (Index u = 0; u < cfg.N; ++u) {
    const Index s = sources[static_cast<std::size_t>(u)];
    pop.source.push_back(s);
    pop.area.push_back(original_area[static_cast<std::size_t>(s)]);
    pop.covariates.row(u) = raw.row(s);
    pop.price(u) = std::exp(log_price(s));
  }
  pop.area_size.assign(static_cast<std::size_t>(cfg.q), 0);
  for (Index a : pop.area) ++pop.area_size[static_cast<std::size_t>(a)];
  return pop;
}

NermData draw_design_sample(const Population& pop, std::uint64_t seed) {
  Rng rng(seed);
  const Index q = static_cast<Index>(pop.sample_size.size());
  std::vector<std::vector<Index>> members(static_cast<std::size_t>(q));
  for (Index u = 0; u < pop.N(); ++u) members[static_cast<std::size_t>(pop.area[static_cast<std::size_t>(u)])].push_back(u);
  const MatrixXd x_all = candidate_covariates(pop.covariates);

  NermData data;
  for (Index i = 0; i < q; ++i) {
    auto units = members[static_cast<std::size_t>(i)];
    const auto n_i = static_cast<std::size_t>(pop.sample_size[static_cast<std::size_t>(i)]);
    if (units.size() < n_i) throw InputError("area smaller than its sample size");
    for (std::size_t k = 0; k < n_i; ++k) {
      const auto pick = k + static_cast<std::size_t>(rng.uniform(0.0, static_cast<double>(units.size() - k)));
      std::swap(units[k], units[std::min(pick, units.size() - 1)]);
    }
    std::sort(units.begin(), units.begin() + static_cast<std::ptrdiff_t>(n_i));
    std::sort(units.begin() + static_cast<std::ptrdiff_t>(n_i), units.end());
    const std::vector<Index> sampled(units.begin(), units.begin() + static_cast<std::ptrdiff_t>(n_i));
    const std::vector<Index> rest(units.begin() + static_cast<std::ptrdiff_t>(n_i), units.end());

    AreaRecord a;
    a.id = area_label(i);
    a.N = static_cast<Index>(units.size());
    a.y = pop.price(sampled).array().log();
    a.X = x_all(sampled, Eigen::all);
    a.X_unsampled = MatrixXd(x_all(rest, Eigen::all));
    data.areas.push_back(std::move(a));
  }
  return data;
}

}  // namespace shiftcai
