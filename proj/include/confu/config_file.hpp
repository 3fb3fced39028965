#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "confu/error.hpp"

namespace confu {

// Flat key=value config with [section] headers, '#' comments, and a canonical
// sorted rendering so parse(render(x)) == x.
class ConfigFile {
 public:
  static ConfigFile parse(const std::string& text) {
    ConfigFile cf;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string s = strip(line);
      if (s.empty() || s[0] == '#') continue;
      if (s.front() == '[') {
        if (s.back() != ']') throw FormatError("config line " + std::to_string(lineno) +
                                               ": unterminated section");
        section = strip(s.substr(1, s.size() - 2));
        cf.sections_[section];
        continue;
      }
      auto eq = s.find('=');
      if (eq == std::string::npos)
        throw FormatError("config line " + std::to_string(lineno) + ": expected key=value");
      std::string key = strip(s.substr(0, eq));
      std::string value = strip(s.substr(eq + 1));
      if (key.empty()) throw FormatError("config line " + std::to_string(lineno) + ": empty key");
      cf.sections_[section][key] = value;
    }
    return cf;
  }

  static ConfigFile from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse(text);
  }

  std::string render() const {
    std::ostringstream out;
    bool first = true;
    for (const auto& [section, kv] : sections_) {
      if (!first) out << "\n";
      first = false;
      out << "[" << section << "]\n";
      for (const auto& [k, v] : kv) out << k << " = " << v << "\n";
    }
    return out.str();
  }

  void to_file(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ConfigError("config: cannot write " + path);
    out << render();
  }

  bool has(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    return s != sections_.end() && s->second.count(key) != 0;
  }

  std::string get(const std::string& section, const std::string& key,
                  const std::string& fallback) const {
    auto s = sections_.find(section);
    if (s == sections_.end()) return fallback;
    auto k = s->second.find(key);
    return k == s->second.end() ? fallback : k->second;
  }

  double get_double(const std::string& section, const std::string& key, double fallback) const {
    if (!has(section, key)) return fallback;
    return std::stod(get(section, key, ""));
  }

  long long get_int(const std::string& section, const std::string& key,
                    long long fallback) const {
    if (!has(section, key)) return fallback;
    return std::stoll(get(section, key, ""));
  }

  std::vector<std::string> get_list(const std::string& section, const std::string& key,
                                    const std::string& fallback) const {
    std::string raw = get(section, key, fallback);
    std::vector<std::string> out;
    std::string cur;
    for (char c : raw) {
      if (c == ',') {
        if (!strip(cur).empty()) out.push_back(strip(cur));
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    if (!strip(cur).empty()) out.push_back(strip(cur));
    return out;
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    sections_[section][key] = value;
  }

  bool operator==(const ConfigFile& o) const { return sections_ == o.sections_; }

  const std::map<std::string, std::map<std::string, std::string>>& sections() const {
    return sections_;
  }

 private:
  static std::string strip(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, std::map<std::string, std::string>> sections_;
};

// CONFU_SEED overrides every configured seed when set.
inline std::optional<std::uint64_t> env_seed_override() {
  const char* v = std::getenv("CONFU_SEED");
  if (!v || !*v) return std::nullopt;
  return static_cast<std::uint64_t>(std::strtoull(v, nullptr, 10));
}

}  // namespace confu
