#pragma once

// Flat key-value configuration: `section.key = value` lines, '#' comments.
// Later sources override earlier ones key by key.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dodeca/error.hpp"

namespace dodeca {

namespace detail {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

}  // namespace detail

class RunConfig {
 public:
  RunConfig() = default;

  static RunConfig parse(std::istream& in, std::string_view origin = "<config>") {
    RunConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::string t = detail::trim(line);
      if (t.empty() || t.front() == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": expected 'key = value'");
      }
      const std::string key = detail::trim(std::string_view(t).substr(0, eq));
      if (key.empty()) throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": empty key");
      cfg.values_[key] = detail::trim(std::string_view(t).substr(eq + 1));
    }
    return cfg;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file '" + path + "'");
    return parse(in, path);
  }

  // Parses a single `key=value` override.
  void set_assignment(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
      throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
    }
    set(detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
  }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  void merge(const RunConfig& over) {
    for (const auto& [k, v] : over.values_) values_[k] = v;
  }
  [[nodiscard]] bool has(const std::string& key) const { return values_.contains(key); }
  void erase(const std::string& key) { values_.erase(key); }

  [[nodiscard]] std::optional<std::string> find(const std::string& key) const {
    if (auto it = values_.find(key); it != values_.end()) return it->second;
    return std::nullopt;
  }

  [[nodiscard]] std::string get_string(const std::string& key, std::string fallback) const {
    return find(key).value_or(std::move(fallback));
  }

  template <typename Number>
  [[nodiscard]] Number get_number(const std::string& key, Number fallback) const {
    const auto v = find(key);
    if (!v) return fallback;
    Number out{};
    if constexpr (std::is_floating_point_v<Number>) {
      try {
        std::size_t used = 0;
        out = static_cast<Number>(std::stod(*v, &used));
        if (used != v->size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + *v + "' is not a number");
      }
    } else {
      const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
      if (ec != std::errc() || ptr != v->data() + v->size()) {
        throw ConfigError("config key '" + key + "': '" + *v + "' is not an integer");
      }
    }
    return out;
  }

  [[nodiscard]] bool get_bool(const std::string& key, bool fallback) const {
    const auto v = find(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
    if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
    throw ConfigError("config key '" + key + "': '" + *v + "' is not a boolean");
  }

  [[nodiscard]] std::vector<std::string> get_list(const std::string& key) const {
    std::vector<std::string> out;
    const auto v = find(key);
    if (!v) return out;
    std::stringstream ss(*v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (auto t = detail::trim(item); !t.empty()) out.push_back(std::move(t));
    }
    return out;
  }

  // Keys under `prefix.` with the prefix stripped.
  [[nodiscard]] RunConfig section(const std::string& prefix) const {
    RunConfig out;
    const std::string p = prefix + ".";
    for (const auto& [k, v] : values_)
      if (k.rfind(p, 0) == 0) out.values_[k.substr(p.size())] = v;
    return out;
  }

  [[nodiscard]] const std::map<std::string, std::string>& values() const noexcept { return values_; }

  // Sorted `key = value` lines; the verbatim echo embedded in artifacts.
  [[nodiscard]] std::string echo() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
    return os.str();
  }

  // Same content on one line (`k=v; k=v`), for line-oriented headers.
  [[nodiscard]] std::string echo_line() const {
    std::string out;
    for (const auto& [k, v] : values_) {
      if (!out.empty()) out += "; ";
      out += k + "=" + v;
    }
    return out;
  }

  bool operator==(const RunConfig&) const = default;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace dodeca
