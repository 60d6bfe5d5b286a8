#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "shiftcai/criteria.hpp"
#include "shiftcai/smallarea.hpp"

namespace shiftcai {

/// Process exit codes of the command-line tool.
namespace exit_code {
inline constexpr int kSuccess = 0;
inline constexpr int kInputError = 1;
inline constexpr int kDegenerate = 2;
inline constexpr int kNumerical = 3;
}  // namespace exit_code

/// NERM data read from `area,unit,y,<covariates>` rows (empty y marks an
/// unsampled unit) and an optional `area,xbar...,N` area-means file.
struct LoadedData {
  NermData data;
  std::vector<std::string> names;  // design columns, intercept "x0" first when present
  bool intercept = false;
};

LoadedData load_nerm_csv(const std::string& data_path, const std::string& means_path, bool intercept);

/// Area-means column holding the mean of covariate `name`: "x3" -> "xbar3".
std::string mean_column_name(const std::string& name);

/// Parses "x1;x3" against the design column names; the intercept is added
/// when present.
CandidateModel parse_named_candidate(const std::string& spec, const LoadedData& loaded);

/// Covariate names of a candidate joined by ';'.
std::string candidate_names(const CandidateModel& j, const std::vector<std::string>& names);

/// Runs the tool on `args` (without the program name) and returns the exit
/// code. Diagnostics go to `err`, summaries to `out`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace shiftcai
