#ifndef ALPHACAL_HARNESS_CSV_HPP
#define ALPHACAL_HARNESS_CSV_HPP

// Minimal CSV reading and writing. Numbers are written in the shortest form
// that parses back to the same double.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "alphacal/error.hpp"
#include "alphacal/ndcore/matrix.hpp"

namespace alphacal::harness {

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

/// Parses a full field as a double; `line` is only used for the error message.
inline double parse_double(std::string_view s, std::size_t line) {
  if (s == "nan") return std::nan("");
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw ParseError(line, "not a number: '" + std::string(s) + "'");
  return v;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw ParseError(1, "missing column '" + std::string(name) + "'");
  }

  friend bool operator==(const CsvTable&, const CsvTable&) = default;
};

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  out.push_back(std::move(field));
  return out;
}

inline void check_field(const std::string& f) {
  if (f.find_first_of(",\n\r\"") != std::string::npos)
    throw DomainError("csv: field '" + f + "' needs quoting, which is not supported");
}

}  // namespace detail

inline std::string to_csv_string(const CsvTable& t) {
  std::string out;
  auto emit = [&](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      detail::check_field(fields[i]);
      if (i) out.push_back(',');
      out += fields[i];
    }
    out.push_back('\n');
  };
  emit(t.header);
  for (const auto& r : t.rows) emit(r);
  return out;
}

/// Parses CSV text. Every row must have as many fields as the header.
inline CsvTable parse_csv(std::string_view text) {
  CsvTable t;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string line(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = detail::split_fields(line);
    if (t.header.empty()) {
      t.header = std::move(fields);
      continue;
    }
    if (fields.size() != t.header.size())
      throw ParseError(line_no, "expected " + std::to_string(t.header.size()) + " fields, found " +
                                    std::to_string(fields.size()));
    t.rows.push_back(std::move(fields));
  }
  if (t.header.empty()) throw ParseError(1, "empty CSV");
  return t;
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("write to '" + path + "' failed");
}

inline CsvTable read_csv(const std::string& path) { return parse_csv(read_text(path)); }

inline void write_csv(const std::string& path, const CsvTable& t) { write_text(path, to_csv_string(t)); }

/// Numeric view of the named columns, one matrix row per CSV row. Parse
/// errors carry the CSV line number (header is line 1).
inline Matrix numeric_columns(const CsvTable& t, const std::vector<std::size_t>& cols) {
  Matrix m(t.rows.size(), cols.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) m(i, j) = parse_double(t.rows[i][cols[j]], i + 2);
  return m;
}

inline std::vector<std::string> format_row(std::span<const double> values) {
  std::vector<std::string> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(format_double(v));
  return out;
}

}  // namespace alphacal::harness

#endif  // ALPHACAL_HARNESS_CSV_HPP
