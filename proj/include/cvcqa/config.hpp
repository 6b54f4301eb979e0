#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace cvcqa::config {

/// Sectioned key = value configuration text. Lines are `[section]` headers,
/// `key = value` pairs, blanks, or `#` comments. Values are bare scalars,
/// double-quoted strings, or comma lists; typed access happens at read time
/// so one file can feed several consumers.
class Config {
 public:
  static Config parse(const std::string& text);
  static Config load(const std::string& path);

  bool has(const std::string& section, const std::string& key) const;

  // Typed getters; the no-default forms throw std::runtime_error when the
  // key is missing, every form throws when the value does not parse.
  std::string get_string(const std::string& section, const std::string& key) const;
  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) const;
  long long get_int(const std::string& section, const std::string& key) const;
  long long get_int(const std::string& section, const std::string& key,
                    long long fallback) const;
  std::uint64_t get_uint(const std::string& section, const std::string& key) const;
  std::uint64_t get_uint(const std::string& section, const std::string& key,
                         std::uint64_t fallback) const;
  double get_double(const std::string& section, const std::string& key) const;
  double get_double(const std::string& section, const std::string& key,
                    double fallback) const;
  bool get_bool(const std::string& section, const std::string& key) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
  std::vector<std::string> get_strings(const std::string& section,
                                       const std::string& key,
                                       const std::vector<std::string>& fallback) const;
  std::vector<double> get_doubles(const std::string& section, const std::string& key,
                                  const std::vector<double>& fallback) const;

  // Setters store canonical literals; used to echo resolved configs.
  void set(const std::string& section, const std::string& key, const std::string& value);
  void set_int(const std::string& section, const std::string& key, long long value);
  void set_uint(const std::string& section, const std::string& key, std::uint64_t value);
  void set_double(const std::string& section, const std::string& key, double value);
  void set_bool(const std::string& section, const std::string& key, bool value);
  void set_list(const std::string& section, const std::string& key,
                const std::vector<std::string>& values);

  /// Canonical text form: sections and keys in sorted order. Parsing the
  /// dump yields an equal Config, and equal Configs dump equal bytes.
  std::string dump() const;
  void save(const std::string& path) const;

 private:
  const std::string* find(const std::string& section, const std::string& key) const;
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

/// Shortest round-trip decimal form of a double ("0.9", "1e-05", ...).
std::string format_double(double value);

/// Split a comma list into trimmed items; empty input -> empty list.
std::vector<std::string> split_list(const std::string& text);

}  // namespace cvcqa::config
