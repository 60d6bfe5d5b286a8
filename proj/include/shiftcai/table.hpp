#pragma once

#include <istream>
#include <ostream>
#include <string>
#include <vector>

namespace shiftcai {

/// Shortest text that reads back to the same double; "nan" and "inf" as is.
std::string format_number(double v);

/// Parses a whole cell as a double; throws InputError naming `where` otherwise.
double parse_number(const std::string& cell, const std::string& where);

/// A CSV file held as text cells. Quoting is not supported; cells are trimmed.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;  // source line of each row

  /// Index of a header column, or -1.
  long column(const std::string& name) const;
  /// Like column() but throws InputError naming the missing column.
  std::size_t require_column(const std::string& name) const;
};

CsvTable read_csv(std::istream& in, const std::string& source = "input");
CsvTable read_csv_file(const std::string& path);

void write_csv_row(std::ostream& out, const std::vector<std::string>& cells);

}  // namespace shiftcai
