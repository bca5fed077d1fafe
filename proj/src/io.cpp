#include "dmlcmr/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dmlcmr/error.hpp"

namespace dmlcmr {

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.push_back(trim(std::string_view(line).substr(start)));
      break;
    }
    out.push_back(trim(std::string_view(line).substr(start, pos - start)));
    start = pos + 1;
  }
  return out;
}

}  // namespace

NumericTable read_numeric_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  std::string line;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    if (header.empty() && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) {
      line.erase(0, 3);
    }
    if (trim(line).empty()) continue;
    header = split_commas(line);
    break;
  }
  if (header.empty()) throw EmptyInputError("'" + path + "' is empty");

  std::vector<std::vector<double>> rows;
  std::size_t data_row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++data_row;
    const auto cells = split_commas(line);
    if (cells.size() != header.size()) {
      throw ParseError(data_row, cells.size(),
                       "row " + std::to_string(data_row) + ": expected " +
                           std::to_string(header.size()) + " cells, found " +
                           std::to_string(cells.size()));
    }
    std::vector<double> vals(cells.size());
    for (std::size_t j = 0; j < cells.size(); ++j) {
      const auto& cell = cells[j];
      const char* first = cell.data();
      const char* last = first + cell.size();
      if (first != last && *first == '+') ++first;
      auto [ptr, ec] = std::from_chars(first, last, vals[j]);
      if (cell.empty() || ec != std::errc() || ptr != last || !std::isfinite(vals[j])) {
        throw ParseError(data_row, j + 1,
                         "row " + std::to_string(data_row) + ", column " + std::to_string(j + 1) +
                             " ('" + header[j] + "'): '" + cell + "' is not a finite number");
      }
    }
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw EmptyInputError("'" + path + "' has a header but no data rows");

  NumericTable t;
  t.header = std::move(header);
  t.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(t.header.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      t.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  return t;
}

Dataset ingest_csv(const std::string& path, const RoleSchema& schema) {
  const NumericTable t = read_numeric_csv(path);
  auto col = [&](const std::string& name) -> Eigen::Index {
    for (std::size_t j = 0; j < t.header.size(); ++j) {
      if (t.header[j] == name) return static_cast<Eigen::Index>(j);
    }
    throw SchemaError(name, "'" + path + "' has no column '" + name + "'");
  };
  const auto n = t.values.rows();
  Vector y = t.values.col(col(schema.y));
  Matrix x(n, static_cast<Eigen::Index>(schema.x.size()));
  Matrix c(n, static_cast<Eigen::Index>(schema.c.size()));
  for (std::size_t j = 0; j < schema.x.size(); ++j) {
    x.col(static_cast<Eigen::Index>(j)) = t.values.col(col(schema.x[j]));
  }
  for (std::size_t j = 0; j < schema.c.size(); ++j) {
    c.col(static_cast<Eigen::Index>(j)) = t.values.col(col(schema.c[j]));
  }
  Dataset d = make_dataset(std::move(y), std::move(x), std::move(c), schema.y, schema.x, schema.c);
  d.meta = {{"generator", "csv"}, {"path", path}};
  return d;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw Error("format_double failed");
  return std::string(buf, ptr);
}

std::string dataset_to_csv(const Dataset& data) {
  std::vector<std::string> names{data.y_name};
  std::vector<std::pair<int, int>> src;  // (0=y,1=x,2=c ; column)
  src.emplace_back(0, 0);
  auto seen = [&](const std::string& nm) {
    return std::find(names.begin(), names.end(), nm) != names.end();
  };
  for (int j = 0; j < data.dx(); ++j) {
    if (!seen(data.x_names[j])) {
      names.push_back(data.x_names[j]);
      src.emplace_back(1, j);
    }
  }
  for (int j = 0; j < data.dc(); ++j) {
    if (!seen(data.c_names[j])) {
      names.push_back(data.c_names[j]);
      src.emplace_back(2, j);
    }
  }
  std::ostringstream out;
  for (std::size_t j = 0; j < names.size(); ++j) out << (j ? "," : "") << names[j];
  out << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (std::size_t j = 0; j < src.size(); ++j) {
      const auto [role, k] = src[j];
      const double v = role == 0 ? data.y(r) : role == 1 ? data.x(r, k) : data.c(r, k);
      out << (j ? "," : "") << format_double(v);
    }
    out << '\n';
  }
  return out.str();
}

Json dataset_sidecar(const Dataset& data) {
  Json j = data.meta;
  j["roles"] = {{"y", data.y_name}, {"x", data.x_names}, {"c", data.c_names}};
  j["n"] = data.size();
  return j;
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp + "'");
    out << content;
    if (!out) throw Error("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string config_hash(const Json& config) {
  const std::string s = config.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dmlcmr
