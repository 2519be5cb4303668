#pragma once

#include <stdexcept>
#include <string>

namespace fedgela {

// Base for every error raised by the library. `kind()` is a stable short tag
// so tests and the CLI can dispatch without string matching on messages.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

// Invalid user-facing configuration. The CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error("config", what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

inline Error dimension_error(const std::string& what) { return {"dimension", what}; }
inline Error parameter_error(const std::string& what) { return {"parameter", what}; }
inline Error shape_error(const std::string& what) { return {"shape", what}; }
inline Error numeric_error(const std::string& what) { return {"numeric", what}; }

}  // namespace fedgela
