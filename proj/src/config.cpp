#include "cvcqa/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cvcqa::config {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

[[noreturn]] void fail(int line, const std::string& msg) {
  throw std::runtime_error("config line " + std::to_string(line) + ": " + msg);
}

/// Strip an unquoted trailing comment; quotes protect '#'.
std::string strip_comment(const std::string& s) {
  bool quoted = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') quoted = !quoted;
    if (s[i] == '#' && !quoted) return s.substr(0, i);
  }
  return s;
}

std::string unquote(const std::string& raw, int line) {
  if (raw.size() < 2 || raw.front() != '"') return raw;
  if (raw.back() != '"') fail(line, "unterminated string");
  std::string out;
  for (std::size_t i = 1; i + 1 < raw.size(); ++i) {
    if (raw[i] == '\\' && i + 2 < raw.size()) {
      ++i;
      if (raw[i] == 'n') {
        out += '\n';
        continue;
      }
      out += raw[i];
      continue;
    }
    out += raw[i];
  }
  return out;
}

bool needs_quoting(const std::string& v) {
  if (v.empty()) return true;
  if (v != trim(v)) return true;
  for (char c : v)
    if (c == '#' || c == '"' || c == '\n') return true;
  return false;
}

std::string quote(const std::string& v) {
  std::string out = "\"";
  for (char c : v) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace

Config Config::parse(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(line_no, "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) fail(line_no, "empty section name");
      cfg.sections_[section];  // sections may legitimately stay empty
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) fail(line_no, "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) fail(line_no, "empty key");
    if (section.empty()) fail(line_no, "key outside any [section]");
    cfg.sections_[section][key] = unquote(trim(line.substr(eq + 1)), line_no);
  }
  return cfg;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

const std::string* Config::find(const std::string& section, const std::string& key) const {
  auto s = sections_.find(section);
  if (s == sections_.end()) return nullptr;
  auto k = s->second.find(key);
  if (k == s->second.end()) return nullptr;
  return &k->second;
}

bool Config::has(const std::string& section, const std::string& key) const {
  return find(section, key) != nullptr;
}

namespace {
[[noreturn]] void missing(const std::string& section, const std::string& key) {
  throw std::runtime_error("config: missing required key [" + section + "] " + key);
}
[[noreturn]] void badvalue(const std::string& section, const std::string& key,
                           const std::string& value, const std::string& want) {
  throw std::runtime_error("config: [" + section + "] " + key + " = '" + value +
                           "' is not " + want);
}
}  // namespace

std::string Config::get_string(const std::string& section, const std::string& key) const {
  const std::string* v = find(section, key);
  if (!v) missing(section, key);
  return *v;
}

std::string Config::get_string(const std::string& section, const std::string& key,
                               const std::string& fallback) const {
  const std::string* v = find(section, key);
  return v ? *v : fallback;
}

long long Config::get_int(const std::string& section, const std::string& key) const {
  const std::string v = get_string(section, key);
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    badvalue(section, key, v, "an integer");
  return out;
}

long long Config::get_int(const std::string& section, const std::string& key,
                          long long fallback) const {
  return has(section, key) ? get_int(section, key) : fallback;
}

std::uint64_t Config::get_uint(const std::string& section, const std::string& key) const {
  const std::string v = get_string(section, key);
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    badvalue(section, key, v, "an unsigned integer");
  return out;
}

std::uint64_t Config::get_uint(const std::string& section, const std::string& key,
                               std::uint64_t fallback) const {
  return has(section, key) ? get_uint(section, key) : fallback;
}

double Config::get_double(const std::string& section, const std::string& key) const {
  const std::string v = get_string(section, key);
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) badvalue(section, key, v, "a number");
  return out;
}

double Config::get_double(const std::string& section, const std::string& key,
                          double fallback) const {
  return has(section, key) ? get_double(section, key) : fallback;
}

bool Config::get_bool(const std::string& section, const std::string& key) const {
  const std::string v = get_string(section, key);
  if (v == "true") return true;
  if (v == "false") return false;
  badvalue(section, key, v, "true/false");
}

bool Config::get_bool(const std::string& section, const std::string& key,
                      bool fallback) const {
  return has(section, key) ? get_bool(section, key) : fallback;
}

std::vector<std::string> Config::get_strings(
    const std::string& section, const std::string& key,
    const std::vector<std::string>& fallback) const {
  const std::string* v = find(section, key);
  if (!v) return fallback;
  return split_list(*v);
}

std::vector<double> Config::get_doubles(const std::string& section,
                                        const std::string& key,
                                        const std::vector<double>& fallback) const {
  const std::string* v = find(section, key);
  if (!v) return fallback;
  std::vector<double> out;
  for (const std::string& item : split_list(*v)) {
    double x = 0.0;
    const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), x);
    if (ec != std::errc() || p != item.data() + item.size())
      badvalue(section, key, item, "a number");
    out.push_back(x);
  }
  return out;
}

void Config::set(const std::string& section, const std::string& key,
                 const std::string& value) {
  sections_[section][key] = value;
}

void Config::set_int(const std::string& section, const std::string& key,
                     long long value) {
  set(section, key, std::to_string(value));
}

void Config::set_uint(const std::string& section, const std::string& key,
                      std::uint64_t value) {
  set(section, key, std::to_string(value));
}

void Config::set_double(const std::string& section, const std::string& key,
                        double value) {
  set(section, key, format_double(value));
}

void Config::set_bool(const std::string& section, const std::string& key, bool value) {
  set(section, key, value ? "true" : "false");
}

void Config::set_list(const std::string& section, const std::string& key,
                      const std::vector<std::string>& values) {
  std::string joined;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) joined += ", ";
    joined += values[i];
  }
  set(section, key, joined);
}

std::string Config::dump() const {
  std::string out;
  bool first = true;
  for (const auto& [section, kv] : sections_) {
    if (!first) out += '\n';
    first = false;
    out += '[' + section + "]\n";
    for (const auto& [key, value] : kv) {
      out += key;
      out += " = ";
      out += needs_quoting(value) ? quote(value) : value;
      out += '\n';
    }
  }
  return out;
}

void Config::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << dump();
}

std::string format_double(double value) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) return "nan";
  return std::string(buf, p);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ',') {
      const std::string t = trim(cur);
      if (!t.empty()) out.push_back(t);
      cur.clear();
    } else {
      cur += c;
    }
  }
  const std::string t = trim(cur);
  if (!t.empty()) out.push_back(t);
  return out;
}

}  // namespace cvcqa::config
