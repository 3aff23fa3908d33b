#pragma once

#include "escore/nuisance.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace escore::cli {

enum ExitCode { kSuccess = 0, kFailure = 1, kUsage = 2 };

/// Parsed CSV: header names and one numeric row per data line.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  int column(const std::string& name) const;  // -1 when absent
};

/// Comma-separated, header required, '.' decimal, no quoting. Throws
/// std::invalid_argument naming the offending lines for empty cells, ragged
/// rows or non-numeric values.
CsvTable read_csv(const std::string& path);

/// Builds a dataset from named columns; an empty covariate list means every
/// remaining column.
Dataset dataset_from_csv(const CsvTable& table, const std::string& outcome,
                         const std::string& treatment, std::vector<std::string>& covariates);

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace escore::cli
