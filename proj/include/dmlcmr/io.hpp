#pragma once

#include <string>
#include <vector>

#include "dmlcmr/dataset.hpp"

namespace dmlcmr {

/// Which CSV columns play which CMR role. An x column whose name is also
/// listed under c is treated as a pass-through context variable.
struct RoleSchema {
  std::string y;
  std::vector<std::string> x;
  std::vector<std::string> c;
};

struct NumericTable {
  std::vector<std::string> header;
  Matrix values;
};

/// Comma-separated, header row, every cell a finite decimal number.
/// Throws EmptyInputError for a file without data rows, ParseError (1-based
/// data row, 1-based column) for a malformed or non-finite cell.
NumericTable read_numeric_csv(const std::string& path);

/// Throws SchemaError naming the first declared column absent from the header.
Dataset ingest_csv(const std::string& path, const RoleSchema& schema);

/// One column per distinct variable (y first, then x, then c-only columns).
std::string dataset_to_csv(const Dataset& data);
/// generator, params, seed and the role mapping needed to re-ingest the CSV.
Json dataset_sidecar(const Dataset& data);

/// Shortest representation that round-trips a double exactly.
std::string format_double(double v);

/// Writes to "<path>.tmp" and renames over path.
void write_file_atomic(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);

/// FNV-1a 64-bit over the canonical (sorted-key, compact) JSON dump; hex.
std::string config_hash(const Json& config);

}  // namespace dmlcmr
