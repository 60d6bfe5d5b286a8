#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include <json.hpp>

#include "shiftcai/cli.hpp"
#include "shiftcai/table.hpp"
#include "support.hpp"

using namespace shiftcai;
using namespace shiftcai::testing;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("shiftcai_cli_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

struct Run {
  int code = 0;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

void write_file(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// NERM data with x1..xK; truth holds every unit's response, sampled or not.
struct Generated {
  std::string csv;
  std::vector<double> true_mean_exp;  // area means of exp(y) over all units
};

Generated generate_csv(Index q, Index n_i, Index r_i, const VectorXd& beta, double tau2, double sigma2, Rng& rng) {
  std::ostringstream os;
  os.precision(17);
  os << "area,unit,y";
  for (Index k = 1; k < beta.size(); ++k) os << ",x" << k;
  os << '\n';
  Generated g;
  for (Index i = 0; i < q; ++i) {
    const double b = std::sqrt(tau2) * rng.normal();
    double total = 0.0;
    for (Index u = 0; u < n_i + r_i; ++u) {
      VectorXd x(beta.size());
      x(0) = 1.0;
      for (Index k = 1; k < beta.size(); ++k) x(k) = rng.normal();
      const double y = x.dot(beta) + b + std::sqrt(sigma2) * rng.normal();
      total += std::exp(y);
      os << "a" << i << ",u" << u << ',';
      if (u < n_i) os << y;
      for (Index k = 1; k < beta.size(); ++k) os << ',' << x(k);
      os << '\n';
    }
    g.true_mean_exp.push_back(total / static_cast<double>(n_i + r_i));
  }
  g.csv = os.str();
  return g;
}

}  // namespace

TEST_CASE("select: malformed inputs exit 1 with a pointed message") {
  TempDir dir("bad");
  write_file(dir / "nox.csv", "area,unit,x1\na,1,0.5\n");
  Run r = run({"select", "--data", dir / "nox.csv", "--out", dir / "o"});
  CHECK(r.code == 1);
  CHECK(r.err.find("'y'") != std::string::npos);

  write_file(dir / "text.csv", "area,unit,y,x1\na,1,abc,0.5\n");
  r = run({"select", "--data", dir / "text.csv", "--out", dir / "o"});
  CHECK(r.code == 1);
  CHECK(r.err.find("abc") != std::string::npos);

  write_file(dir / "dup.csv", "area,unit,y,x1\na,1,1.0,0.5\na,1,2.0,0.7\n");
  r = run({"select", "--data", dir / "dup.csv", "--out", dir / "o"});
  CHECK(r.code == 1);
  CHECK(r.err.find("duplicate") != std::string::npos);

  r = run({"select", "--data", dir / "missing.csv", "--out", dir / "o"});
  CHECK(r.code == 1);

  r = run({"select", "--out", dir / "o"});
  CHECK(r.code != 0);
}

TEST_CASE("select: no surviving candidate exits 2") {
  TempDir dir("empty");
  write_file(dir / "d.csv",
             "area,unit,y,x1,x2,x3\n"
             "a,1,1.0,0.1,0.5,-0.3\na,2,1.4,0.9,-0.2,0.4\na,3,0.7,-0.4,0.8,1.1\na,4,,0.2,0.1,0.3\n"
             "b,1,2.0,1.2,-0.6,0.2\nb,2,1.1,-0.3,0.3,-0.8\nb,3,1.6,0.5,0.9,0.6\nb,4,,0.0,-0.4,0.5\n");
  const Run r = run({"select", "--data", dir / "d.csv", "--candidate", "x1;x2;x3", "--out", dir / "o"});
  CHECK(r.code == 2);
  CHECK(r.err.find("x1;x2;x3") != std::string::npos);
  const CsvTable t = read_csv_file(dir / "o/selection.csv");
  REQUIRE(t.rows.size() == 1);
  CHECK(t.rows[0][static_cast<std::size_t>(t.column("status"))] == "excluded");
}

TEST_CASE("select: totals equal direct library calls") {
  TempDir dir("toy");
  Rng rng(61);
  write_file(dir / "d.csv", generate_csv(8, 4, 3, Eigen::Vector3d(1.0, 0.8, 0.0), 0.5, 1.0, rng).csv);
  for (const std::string variant : {"u", "hat", "dagger"}) {
    const Run r = run({"select", "--data", dir / "d.csv", "--variant", variant, "--boot-reps", "200", "--seed", "4",
                       "--out", dir / variant});
    REQUIRE(r.code == 0);
    const LoadedData loaded = load_nerm_csv(dir / "d.csv", "", true);
    const PsiEstimate psi = estimate_psi(loaded.data);
    const LmmSystem sys(nerm_design(loaded.data, psi.psi_hat, Coverage::Unit));
    const VectorXd y = build_observed(loaded.data, psi.psi_hat).y;
    std::optional<BootstrapConfig> boot;
    if (variant == "dagger") boot = BootstrapConfig{200, 4};
    const SelectionResult lib = select_best(y, sys, all_subsets(3, {0}), parse_variant(variant), boot);
    const CsvTable t = read_csv_file(dir / (variant + "/selection.csv"));
    REQUIRE(t.rows.size() == lib.ranked.size());
    const auto c_total = static_cast<std::size_t>(t.column("total"));
    const auto c_idx = static_cast<std::size_t>(t.column("indices"));
    const auto c_best = static_cast<std::size_t>(t.column("best"));
    for (std::size_t i = 0; i < lib.ranked.size(); ++i) {
      CHECK(t.rows[i][c_idx] == lib.ranked[i].candidate.label());
      CHECK(parse_number(t.rows[i][c_total], "total") == lib.ranked[i].total);
      CHECK(t.rows[i][c_best] == (i == 0 ? "1" : "0"));
    }
  }
}

TEST_CASE("select: named candidates and the nested chain") {
  TempDir dir("named");
  Rng rng(62);
  write_file(dir / "d.csv", generate_csv(8, 4, 3, Eigen::Vector4d(1.0, 0.8, -0.5, 0.0), 0.5, 1.0, rng).csv);
  Run r = run({"select", "--data", dir / "d.csv", "--candidate", "x1", "--candidate", "x1;x3", "--out", dir / "a"});
  REQUIRE(r.code == 0);
  CHECK(read_csv_file(dir / "a/selection.csv").rows.size() == 2);
  r = run({"select", "--data", dir / "d.csv", "--candidates", "nested", "--out", dir / "b"});
  REQUIRE(r.code == 0);
  CHECK(read_csv_file(dir / "b/selection.csv").rows.size() == 4);
  r = run({"select", "--data", dir / "d.csv", "--candidate", "x9", "--out", dir / "c"});
  CHECK(r.code == 1);
  CHECK(r.err.find("x9") != std::string::npos);
}

TEST_CASE("predict: fully sampled areas, round trip and area means") {
  TempDir dir("predict");
  write_file(dir / "d.csv",
             "area,unit,y,x1\n"
             "a,1,1.0,0.1\na,2,1.4,0.9\na,3,0.7,-0.4\n"
             "b,1,2.0,1.2\nb,2,1.1,-0.3\nb,3,1.6,0.5\nb,4,,0.3\nb,5,,-0.1\n"
             "c,1,0.5,0.2\nc,2,0.9,-0.7\nc,3,1.3,1.0\nc,4,,0.8\n");
  const Run r = run({"predict", "--data", dir / "d.csv", "--out", dir / "o"});
  REQUIRE(r.code == 0);
  const CsvTable t = read_csv_file(dir / "o/predictions.csv");
  REQUIRE(t.rows.size() == 3);
  const auto c_pred = static_cast<std::size_t>(t.column("predicted_mean"));
  CHECK(parse_number(t.rows[0][c_pred], "p") == doctest::Approx(3.1 / 3.0).epsilon(1e-15));
  CHECK(parse_number(t.rows[0][c_pred], "p") == parse_number(t.rows[0][static_cast<std::size_t>(t.column("sampled_mean"))], "s"));

  const LoadedData loaded = load_nerm_csv(dir / "d.csv", "", true);
  const std::vector<AreaPrediction> mem =
      predict_finite_mean(loaded.data, fit_nerm(loaded.data, CandidateModel::full(2)), false);
  for (std::size_t i = 0; i < mem.size(); ++i)
    CHECK(std::abs(parse_number(t.rows[i][c_pred], "p") - mem[i].finite_mean) <= 1e-12);

  // Area-level coverage with a fully sampled area is rejected.
  write_file(dir / "s.csv", "area,unit,y,x1\na,1,1.0,0.1\na,2,1.4,0.9\nb,1,2.0,1.2\nb,2,1.1,-0.3\nb,3,1.6,0.5\n");
  write_file(dir / "m.csv", "area,xbar1,N\na,0.5,2\nb,0.4,9\n");
  const Run bad = run({"predict", "--data", dir / "s.csv", "--area-means", dir / "m.csv", "--out", dir / "p"});
  CHECK(bad.code == 1);
  const Run log_area = run(
      {"predict", "--data", dir / "s.csv", "--area-means", dir / "m.csv", "--log-scale", "--out", dir / "p"});
  CHECK(log_area.code == 1);
}

TEST_CASE("predict: the log scale removes the back-transform under-prediction") {
  TempDir dir("log");
  Rng rng(63);
  double gap_off = 0.0, gap_on = 0.0;
  Index areas = 0;
  for (int rep = 0; rep < 10; ++rep) {
    const Generated g = generate_csv(15, 4, 20, Eigen::Vector2d(1.0, 0.3), 0.2, 0.3, rng);
    write_file(dir / "d.csv", g.csv);
    REQUIRE(run({"predict", "--data", dir / "d.csv", "--out", dir / "off"}).code == 0);
    REQUIRE(run({"predict", "--data", dir / "d.csv", "--log-scale", "--out", dir / "on"}).code == 0);
    const CsvTable off = read_csv_file(dir / "off/predictions.csv");
    const CsvTable on = read_csv_file(dir / "on/predictions.csv");
    const auto c = static_cast<std::size_t>(off.column("predicted_mean"));
    for (std::size_t i = 0; i < g.true_mean_exp.size(); ++i, ++areas) {
      gap_off += std::exp(parse_number(off.rows[i][c], "p")) - g.true_mean_exp[i];
      gap_on += parse_number(on.rows[i][c], "p") - g.true_mean_exp[i];
    }
  }
  gap_off /= static_cast<double>(areas);
  gap_on /= static_cast<double>(areas);
  CHECK(gap_off < 0.0);
  CHECK(std::abs(gap_on) < std::abs(gap_off));
}

TEST_CASE("config file values yield to flags and manifests append") {
  TempDir dir("cfg");
  Rng rng(64);
  write_file(dir / "d.csv", generate_csv(8, 4, 3, Eigen::Vector3d(1.0, 0.8, 0.0), 0.5, 1.0, rng).csv);
  write_file(dir / "run.cfg", "# select settings\nvariant = u\ncandidates = nested\nintercept = true\n");
  Run r = run({"select", "--config", dir / "run.cfg", "--data", dir / "d.csv", "--variant", "hat", "--out", dir / "o"});
  REQUIRE(r.code == 0);
  CsvTable t = read_csv_file(dir / "o/selection.csv");
  CHECK(t.rows.size() == 3);
  CHECK(t.rows[0][static_cast<std::size_t>(t.column("variant"))] == "hat");

  r = run({"select", "--config", dir / "run.cfg", "--data", dir / "d.csv", "--out", dir / "o"});
  REQUIRE(r.code == 0);
  t = read_csv_file(dir / "o/selection.csv");
  CHECK(t.rows[0][static_cast<std::size_t>(t.column("variant"))] == "u");

  const nlohmann::json manifest = nlohmann::json::parse(slurp(dir / "o/manifest.json"));
  REQUIRE(manifest.is_array());
  REQUIRE(manifest.size() == 2);
  CHECK(manifest[0]["config"]["variant"] == "hat");
  CHECK(manifest[1]["config"]["variant"] == "u");
  CHECK(manifest[1]["exit_code"] == 0);
  CHECK(manifest[1]["seed"] == 1);

  write_file(dir / "bad.cfg", "colour = blue\n");
  r = run({"select", "--config", dir / "bad.cfg", "--data", dir / "d.csv", "--out", dir / "o"});
  CHECK(r.code == 1);
  CHECK(r.err.find("colour") != std::string::npos);
}

TEST_CASE("outputs are deterministic across runs and worker counts") {
  TempDir dir("det");
  Rng rng(65);
  write_file(dir / "d.csv", generate_csv(8, 4, 3, Eigen::Vector4d(1.0, 0.8, -0.4, 0.0), 0.5, 1.0, rng).csv);
  for (const std::string w : {"1", "3"})
    REQUIRE(run({"select", "--data", dir / "d.csv", "--variant", "dagger", "--boot-reps", "100", "--seed", "9",
                 "--workers", w, "--out", dir / ("w" + w)})
                .code == 0);
  CHECK(slurp(dir / "w1/selection.csv") == slurp(dir / "w3/selection.csv"));

  REQUIRE(run({"simulate-sae", "--samples", "3", "--seed", "5", "--out", dir / "s1"}).code == 0);
  REQUIRE(run({"simulate-sae", "--samples", "3", "--seed", "5", "--workers", "2", "--out", dir / "s2"}).code == 0);
  for (const std::string f : {"population.csv", "design.csv", "design_samples.csv"})
    CHECK(slurp(dir / ("s1/" + f)) == slurp(dir / ("s2/" + f)));
}

TEST_CASE("simulate-bias rejects CI settings below the floors") {
  TempDir dir("floors");
  CHECK(run({"simulate-bias", "--reps", "50", "--out", dir / "o"}).code == 1);
  CHECK(run({"simulate-bias", "--oracle-reps", "10", "--out", dir / "o"}).code == 1);
}
