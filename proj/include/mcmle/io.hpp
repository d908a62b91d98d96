#pragma once

// File formats: model spec JSON, binary response CSV, plot tables, JSON
// reports. Numbers are rendered in shortest round-trip form throughout.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "mcmle/engine.hpp"
#include "mcmle/errors.hpp"
#include "mcmle/glmm.hpp"
#include "mcmle/types.hpp"

namespace mcmle::io {

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------- basics

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes to a temporary file next to `path`, then renames it into place.
inline void atomic_write(const std::filesystem::path& path, std::string_view content) {
  const auto dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  const auto tmp = dir / ("." + path.filename().string() + ".tmp" + std::to_string(::getpid()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InvalidInput("cannot write " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw InvalidInput("write failed for " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw InvalidInput("cannot move report into place at " + path.string() + ": " + ec.message());
  }
}

/// 64-bit FNV-1a, as 16 hex digits.
inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int k = 15; k >= 0; --k, h >>= 4) out[static_cast<std::size_t>(k)] = digits[h & 0xF];
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

/// "a,b,c" -> numbers.
inline std::vector<double> parse_number_list(std::string_view text) {
  std::vector<double> out;
  for (auto cell : split(text, ',')) {
    const auto v = parse_double(cell);
    if (!v || !std::isfinite(*v)) throw InvalidInput("not a number: '" + std::string(trim(cell)) + "'");
    out.push_back(*v);
  }
  return out;
}

/// "lo:hi:k" -> k evenly spaced values from lo to hi inclusive.
inline std::vector<double> parse_grid(std::string_view text) {
  const auto parts = split(text, ':');
  if (parts.size() != 3) throw InvalidInput("grid must have the form lo:hi:k, got '" + std::string(text) + "'");
  const auto lo = parse_double(parts[0]);
  const auto hi = parse_double(parts[1]);
  const auto kd = parse_double(parts[2]);
  if (!lo || !hi || !std::isfinite(*lo) || !std::isfinite(*hi))
    throw InvalidInput("grid bounds must be numbers in '" + std::string(text) + "'");
  if (!kd || *kd < 1 || *kd != std::floor(*kd) || *kd > 1e6)
    throw InvalidInput("grid count k must be a positive integer in '" + std::string(text) + "'");
  const auto k = static_cast<std::size_t>(*kd);
  if (k == 1) {
    if (*lo != *hi) throw InvalidInput("a one-point grid needs lo == hi");
    return {*lo};
  }
  std::vector<double> out(k);
  for (std::size_t i = 0; i < k; ++i)
    out[i] = *lo + (*hi - *lo) * static_cast<double>(i) / static_cast<double>(k - 1);
  out.back() = *hi;
  return out;
}

// ---------------------------------------------------------------- model spec

struct ModelSpec {
  glmm::GlmmDesign design;
  std::string hash;
};

namespace detail {

inline Matrix json_matrix(const Json& j, const char* field, std::optional<Eigen::Index> rows) {
  if (!j.is_array()) throw InvalidInput(std::string(field) + ": must be an array of rows");
  const auto R = static_cast<Eigen::Index>(j.size());
  if (rows && R != *rows && R != 0)
    throw InvalidInput(std::string(field) + ": has " + std::to_string(R) + " rows, expected " + std::to_string(*rows));
  if (R == 0) return Matrix(rows.value_or(0), 0);
  Eigen::Index C = -1;
  Matrix out;
  for (Eigen::Index r = 0; r < R; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array()) throw InvalidInput(std::string(field) + ": row " + std::to_string(r + 1) + " is not an array");
    if (C < 0) {
      C = static_cast<Eigen::Index>(row.size());
      out.resize(R, C);
    } else if (static_cast<Eigen::Index>(row.size()) != C) {
      throw InvalidInput(std::string(field) + ": row " + std::to_string(r + 1) + " has " +
                         std::to_string(row.size()) + " entries, expected " + std::to_string(C));
    }
    for (Eigen::Index c = 0; c < C; ++c) {
      const auto& v = row[static_cast<std::size_t>(c)];
      if (!v.is_number())
        throw InvalidInput(std::string(field) + ": entry (" + std::to_string(r + 1) + ", " + std::to_string(c + 1) +
                           ") is not a number");
      out(r, c) = v.get<double>();
    }
  }
  return out;
}

}  // namespace detail

/// Model spec JSON: {"X": [[...]], "Z": [[...]], "delta_map": [1-based], "name": "..."}.
inline ModelSpec parse_model_spec(std::string_view text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw InvalidInput(std::string("model spec is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw InvalidInput("model spec must be a JSON object");
  for (const char* field : {"X", "Z", "delta_map"})
    if (!j.contains(field)) throw InvalidInput(std::string(field) + ": missing from model spec");

  const Matrix X = detail::json_matrix(j["X"], "X", std::nullopt);
  if (X.rows() == 0 || X.cols() == 0) throw InvalidInput("X: must have at least one row and one column");
  const Matrix Z = detail::json_matrix(j["Z"], "Z", X.rows());

  const auto& dm = j["delta_map"];
  if (!dm.is_array()) throw InvalidInput("delta_map: must be an array of 1-based indices");
  std::vector<long long> delta_map;
  for (const auto& v : dm) {
    if (!v.is_number_integer()) throw InvalidInput("delta_map: entries must be integers");
    delta_map.push_back(v.get<long long>());
  }
  std::string name;
  if (j.contains("name")) {
    if (!j["name"].is_string()) throw InvalidInput("name: must be a string");
    name = j["name"].get<std::string>();
  }
  return {glmm::GlmmDesign::one_based(X, Z, delta_map, name), fnv1a_hex(text)};
}

inline ModelSpec read_model_spec(const std::filesystem::path& path) {
  try {
    return parse_model_spec(read_file(path));
  } catch (const InvalidInput& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
}

inline Json model_spec_json(const glmm::GlmmDesign& design) {
  Json j;
  auto rows = [](const Matrix& M) {
    Json out = Json::array();
    for (Eigen::Index r = 0; r < M.rows(); ++r) {
      Json row = Json::array();
      for (Eigen::Index c = 0; c < M.cols(); ++c) row.push_back(M(r, c));
      out.push_back(std::move(row));
    }
    return out;
  };
  if (!design.name().empty()) j["name"] = design.name();
  j["X"] = rows(design.X());
  j["Z"] = rows(design.Z());
  Json dm = Json::array();
  for (auto l : design.delta_map()) dm.push_back(l + 1);
  j["delta_map"] = dm;
  return j;
}

// ---------------------------------------------------------------- data CSV

struct DataFile {
  ObservedData<Vector> data;
  std::string hash;
  bool header = false;
};

/// 0/1 CSV, one record per line. A first line containing any non-numeric
/// cell is taken as a header. Errors name the line and column.
inline DataFile parse_binary_csv(std::string_view text, std::optional<std::size_t> expected_T = std::nullopt) {
  auto lines = split(text, '\n');
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  if (lines.empty()) throw InvalidInput("data file is empty");

  bool header = false;
  for (auto cell : split(lines.front(), ','))
    if (!parse_double(cell)) header = true;

  std::vector<Vector> records;
  std::optional<std::size_t> width = expected_T;
  for (std::size_t l = header ? 1 : 0; l < lines.size(); ++l) {
    const std::string where = "line " + std::to_string(l + 1);
    if (trim(lines[l]).empty()) throw InvalidInput(where + ": empty row");
    const auto cells = split(lines[l], ',');
    if (width && cells.size() != *width)
      throw InvalidInput(where + ": expected " + std::to_string(*width) + " columns, found " +
                         std::to_string(cells.size()));
    width = cells.size();
    Vector y(static_cast<Eigen::Index>(cells.size()));
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto v = parse_double(cells[c]);
      if (!v || (*v != 0.0 && *v != 1.0))
        throw InvalidInput(where + ", column " + std::to_string(c + 1) + ": value '" + std::string(trim(cells[c])) +
                           "' is not 0 or 1");
      y[static_cast<Eigen::Index>(c)] = *v;
    }
    records.push_back(std::move(y));
  }
  if (records.empty()) throw InvalidInput("data file has a header but no records");
  return {ObservedData<Vector>(std::move(records)), fnv1a_hex(text), header};
}

inline DataFile read_binary_csv(const std::filesystem::path& path, std::optional<std::size_t> expected_T = std::nullopt) {
  try {
    return parse_binary_csv(read_file(path), expected_T);
  } catch (const InvalidInput& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
}

inline std::string format_binary_csv(const ObservedData<Vector>& data) {
  std::string out;
  for (const auto& y : data) {
    for (Eigen::Index k = 0; k < y.size(); ++k) {
      if (k) out += ',';
      out += y[k] != 0.0 ? '1' : '0';
    }
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------- tables

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
};

inline std::string format_table_csv(const Table& t) {
  std::string out;
  for (std::size_t c = 0; c < t.columns.size(); ++c) {
    if (c) out += ',';
    out += t.columns[c];
  }
  out += '\n';
  for (const auto& row : t.rows) {
    if (row.size() != t.columns.size()) throw InvalidInput("table row width does not match its header");
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out += ',';
      out += format_double(row[c]);
    }
    out += '\n';
  }
  return out;
}

inline Table parse_table_csv(std::string_view text) {
  auto lines = split(text, '\n');
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  if (lines.empty()) throw InvalidInput("table is empty");
  Table t;
  for (auto cell : split(lines.front(), ',')) t.columns.emplace_back(trim(cell));
  for (std::size_t l = 1; l < lines.size(); ++l) {
    const auto cells = split(lines[l], ',');
    if (cells.size() != t.columns.size())
      throw InvalidInput("line " + std::to_string(l + 1) + ": expected " + std::to_string(t.columns.size()) +
                         " columns, found " + std::to_string(cells.size()));
    std::vector<double> row;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto v = parse_double(cells[c]);
      if (!v)
        throw InvalidInput("line " + std::to_string(l + 1) + ", column " + std::to_string(c + 1) + ": not a number");
      row.push_back(*v);
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

// ---------------------------------------------------------------- reports

inline Json matrix_json(const Matrix& M) {
  Json out = Json::array();
  for (Eigen::Index r = 0; r < M.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < M.cols(); ++c) row.push_back(M(r, c));
    out.push_back(std::move(row));
  }
  return out;
}

inline Matrix json_to_matrix(const Json& j, const char* field) { return detail::json_matrix(j, field, std::nullopt); }

struct OptimizerInfo {
  bool converged = false;
  int iterations = 0;
  double grad_norm = 0.0;
  double gtol = 0.0;
};

/// Everything a fit writes. Optional members are omitted from the JSON
/// when absent.
struct FitReport {
  std::string method;  // "monte-carlo" or "quadrature"
  std::string scheme;  // "shared" or "fresh"; empty for quadrature
  std::string model_name;
  std::vector<std::string> labels;
  Vector theta_hat;
  double loglik = 0.0;
  std::optional<Vector> se;
  std::optional<Matrix> vcov;
  Matrix J_hat;
  Matrix V_hat;
  std::optional<Matrix> W_hat;
  std::optional<std::size_t> m;
  std::size_t n = 0;
  std::optional<std::uint64_t> seed;
  std::string generator_id;
  std::string spec_hash;
  std::string data_hash;
  OptimizerInfo optimizer;
  std::optional<std::string> warning;
  double wall_time = 0.0;
};

inline Json to_json(const FitReport& r) {
  Json j;
  j["method"] = r.method;
  if (!r.scheme.empty()) j["scheme"] = r.scheme;
  j["model_name"] = r.model_name;
  Json theta = Json::object();
  for (std::size_t k = 0; k < r.labels.size(); ++k) theta[r.labels[k]] = r.theta_hat[static_cast<Eigen::Index>(k)];
  j["theta_hat"] = theta;
  j["loglik"] = r.loglik;
  if (r.se) {
    Json se = Json::object();
    for (std::size_t k = 0; k < r.labels.size(); ++k) se[r.labels[k]] = (*r.se)[static_cast<Eigen::Index>(k)];
    j["se"] = se;
  }
  if (r.vcov) j["vcov"] = matrix_json(*r.vcov);
  j["J_hat"] = matrix_json(r.J_hat);
  j["V_hat"] = matrix_json(r.V_hat);
  if (r.W_hat) j["W_hat"] = matrix_json(*r.W_hat);
  if (r.m) j["m"] = *r.m;
  j["n"] = r.n;
  if (r.seed) j["seed"] = *r.seed;
  if (!r.generator_id.empty()) j["generator_id"] = r.generator_id;
  j["spec_hash"] = r.spec_hash;
  j["data_hash"] = r.data_hash;
  j["optimizer"] = {{"converged", r.optimizer.converged},
                    {"iterations", r.optimizer.iterations},
                    {"grad_norm", r.optimizer.grad_norm},
                    {"gtol", r.optimizer.gtol}};
  if (r.warning) j["warning"] = *r.warning;
  j["wall_time"] = r.wall_time;
  return j;
}

inline FitReport fit_report_from_json(const Json& j) {
  try {
    FitReport r;
    r.method = j.at("method").get<std::string>();
    if (j.contains("scheme")) r.scheme = j["scheme"].get<std::string>();
    r.model_name = j.at("model_name").get<std::string>();
    const auto& theta = j.at("theta_hat");
    r.theta_hat.resize(static_cast<Eigen::Index>(theta.size()));
    Eigen::Index k = 0;
    for (const auto& [label, value] : theta.items()) {
      r.labels.push_back(label);
      r.theta_hat[k++] = value.get<double>();
    }
    r.loglik = j.at("loglik").get<double>();
    if (j.contains("se")) {
      Vector se(static_cast<Eigen::Index>(r.labels.size()));
      for (std::size_t i = 0; i < r.labels.size(); ++i)
        se[static_cast<Eigen::Index>(i)] = j["se"].at(r.labels[i]).get<double>();
      r.se = se;
    }
    if (j.contains("vcov")) r.vcov = json_to_matrix(j["vcov"], "vcov");
    r.J_hat = json_to_matrix(j.at("J_hat"), "J_hat");
    r.V_hat = json_to_matrix(j.at("V_hat"), "V_hat");
    if (j.contains("W_hat")) r.W_hat = json_to_matrix(j["W_hat"], "W_hat");
    if (j.contains("m")) r.m = j["m"].get<std::size_t>();
    r.n = j.at("n").get<std::size_t>();
    if (j.contains("seed")) r.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("generator_id")) r.generator_id = j["generator_id"].get<std::string>();
    r.spec_hash = j.at("spec_hash").get<std::string>();
    r.data_hash = j.at("data_hash").get<std::string>();
    const auto& opt = j.at("optimizer");
    r.optimizer = {opt.at("converged").get<bool>(), opt.at("iterations").get<int>(), opt.at("grad_norm").get<double>(),
                   opt.at("gtol").get<double>()};
    if (j.contains("warning")) r.warning = j["warning"].get<std::string>();
    r.wall_time = j.at("wall_time").get<double>();
    return r;
  } catch (const Json::exception& e) {
    throw InvalidInput(std::string("malformed fit report: ") + e.what());
  }
}

inline std::string dump(const Json& j) { return j.dump(2) + "\n"; }

}  // namespace mcmle::io
