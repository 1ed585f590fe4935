#pragma once

#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "prunelab/errors.hpp"

namespace prunelab {

/// Strict reader for a JSON object section: typed gets, and finish() rejects
/// keys nobody asked for.
class JsonFields {
 public:
  JsonFields(const nlohmann::json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError("config section '" + section_ + "' must be an object");
  }

  template <typename T>
  bool get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return false;
    try {
      if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (!it->is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>)
          if (it->is_number_integer() && !it->is_number_unsigned()) throw ConfigError("");
      }
      out = it->get<T>();
    } catch (const std::exception&) {
      throw ConfigError("config key '" + section_ + "." + key + "' has the wrong type");
    }
    return true;
  }

  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + section_ + "." + k + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

}  // namespace prunelab
