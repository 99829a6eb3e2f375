#pragma once

#include <charconv>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sme {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One `[name]` block of `key = value` lines.
struct ConfigSection {
  struct Entry {
    std::string key, value;
    int line = 0;
  };
  std::string name;
  std::vector<Entry> entries;
};

/// Sections of `key = value` lines. `#` starts a comment; keys may appear
/// before any header, in which case they belong to the section named "".
struct ConfigFile {
  std::string source;
  std::map<std::string, ConfigSection> sections;

  static ConfigFile parse(std::istream& is, const std::string& source) {
    ConfigFile cf;
    cf.source = source;
    std::string current;
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    while (std::getline(is, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const std::string where = source + ":" + std::to_string(lineno);
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError(where + ": malformed section header '" + line + "'");
        current = trim(line.substr(1, line.size() - 2));
        if (current.empty()) throw ConfigError(where + ": empty section name");
        cf.sections[current].name = current;
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError(where + ": missing key");
      auto& sec = cf.sections[current];
      sec.name = current;
      for (const auto& e : sec.entries)
        if (e.key == key) throw ConfigError(where + ": duplicate key '" + key + "' in [" + current + "]");
      sec.entries.push_back({key, trim(line.substr(eq + 1)), lineno});
    }
    return cf;
  }

  static ConfigFile parse_string(const std::string& text, const std::string& source = "config") {
    std::istringstream is(text);
    return parse(is, source);
  }

  /// Rejects sections outside `known`.
  void require_sections(const std::set<std::string>& known) const {
    for (const auto& [name, sec] : sections)
      if (!known.count(name)) {
        const int line = sec.entries.empty() ? 0 : sec.entries.front().line;
        throw ConfigError(source + ":" + std::to_string(line) + ": unknown section [" + name + "]");
      }
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

/// Typed reads from one section. Every key must be read before finish(),
/// which rejects leftovers so typos fail loudly.
class ConfigReader {
 public:
  ConfigReader(const ConfigFile& file, const std::string& section) : source_(file.source), section_(section) {
    if (auto it = file.sections.find(section); it != file.sections.end()) entries_ = it->second.entries;
  }

  void get(const std::string& key, double& out) {
    if (const auto* e = take(key)) out = parse_double(*e);
  }
  void get(const std::string& key, int& out) {
    if (const auto* e = take(key)) out = static_cast<int>(parse_int(*e));
  }
  void get(const std::string& key, std::uint64_t& out) {
    if (const auto* e = take(key)) {
      const std::int64_t v = parse_int(*e);
      if (v < 0) fail(*e, "expected a non-negative integer");
      out = static_cast<std::uint64_t>(v);
    }
  }
  void get(const std::string& key, bool& out) {
    if (const auto* e = take(key)) {
      if (e->value == "true" || e->value == "1") out = true;
      else if (e->value == "false" || e->value == "0") out = false;
      else fail(*e, "expected true or false");
    }
  }
  void get(const std::string& key, std::string& out) {
    if (const auto* e = take(key)) out = e->value;
  }
  void get(const std::string& key, std::vector<double>& out) {
    if (const auto* e = take(key)) {
      out.clear();
      for (const auto& item : split_list(e->value)) out.push_back(parse_double({e->key, item, e->line}));
    }
  }
  void get(const std::string& key, std::vector<std::string>& out) {
    if (const auto* e = take(key)) out = split_list(e->value);
  }

  /// Reads a string and maps it through `choices`.
  template <typename E>
  void get_enum(const std::string& key, E& out, const std::vector<std::pair<std::string, E>>& choices) {
    if (const auto* e = take(key)) {
      for (const auto& [name, v] : choices)
        if (name == e->value) {
          out = v;
          return;
        }
      std::string opts;
      for (const auto& c : choices) opts += (opts.empty() ? "" : ", ") + c.first;
      fail(*e, "expected one of: " + opts);
    }
  }

  void finish() const {
    for (const auto& e : entries_)
      if (!used_.count(e.key)) fail(e, "unknown key '" + e.key + "' in [" + section_ + "]");
  }

  static std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, ',')) {
      const auto b = item.find_first_not_of(" \t");
      const auto e = item.find_last_not_of(" \t");
      if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
    }
    return out;
  }

 private:
  const ConfigSection::Entry* take(const std::string& key) {
    for (const auto& e : entries_)
      if (e.key == key) {
        used_.insert(key);
        return &e;
      }
    return nullptr;
  }

  [[noreturn]] void fail(const ConfigSection::Entry& e, const std::string& msg) const {
    throw ConfigError(source_ + ":" + std::to_string(e.line) + ": " + msg);
  }

  double parse_double(const ConfigSection::Entry& e) const {
    double v = 0;
    const char* b = e.value.data();
    const char* end = b + e.value.size();
    const auto res = std::from_chars(b, end, v);
    if (res.ec != std::errc() || res.ptr != end) fail(e, "'" + e.key + "' expects a number, got '" + e.value + "'");
    return v;
  }

  std::int64_t parse_int(const ConfigSection::Entry& e) const {
    std::int64_t v = 0;
    const char* b = e.value.data();
    const char* end = b + e.value.size();
    const auto res = std::from_chars(b, end, v);
    if (res.ec != std::errc() || res.ptr != end) fail(e, "'" + e.key + "' expects an integer, got '" + e.value + "'");
    return v;
  }

  std::string source_, section_;
  std::vector<ConfigSection::Entry> entries_;
  std::set<std::string> used_;
};

/// Writes `key = value` lines in call order.
class ConfigWriter {
 public:
  explicit ConfigWriter(std::ostream& os) : os_(os) {}

  ConfigWriter& section(const std::string& name) {
    if (!first_) os_ << '\n';
    first_ = false;
    os_ << '[' << name << "]\n";
    return *this;
  }
  ConfigWriter& put(const std::string& key, double v) { return raw(key, detail::format_double(v)); }
  ConfigWriter& put(const std::string& key, int v) { return raw(key, std::to_string(v)); }
  ConfigWriter& put(const std::string& key, std::uint64_t v) { return raw(key, std::to_string(v)); }
  ConfigWriter& put(const std::string& key, bool v) { return raw(key, v ? "true" : "false"); }
  ConfigWriter& put(const std::string& key, const std::string& v) { return raw(key, v); }
  ConfigWriter& put(const std::string& key, const char* v) { return raw(key, v); }
  ConfigWriter& put(const std::string& key, const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + detail::format_double(v[i]);
    return raw(key, s);
  }
  ConfigWriter& put(const std::string& key, const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
    return raw(key, s);
  }

 private:
  ConfigWriter& raw(const std::string& key, const std::string& v) {
    os_ << key << " = " << v << '\n';
    return *this;
  }
  std::ostream& os_;
  bool first_ = true;
};

}  // namespace sme
