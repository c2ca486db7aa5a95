#pragma once

#include <stdexcept>
#include <string>

namespace mcblock {

/// Base error. `code()` is a stable, machine-readable identifier that the CLI
/// prints before the human-readable message.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& w) : Error("dimension_error", w) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& w) : Error("contract_error", w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config_error", w) {}
};
struct DegenerateConfigError : Error {
  explicit DegenerateConfigError(const std::string& w) : Error("degenerate_config", w) {}
};
struct ConstructionError : Error {
  explicit ConstructionError(const std::string& w) : Error("construction_error", w) {}
};
struct LoadError : Error {
  explicit LoadError(const std::string& w) : Error("load_error", w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error("io_error", w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error("non_finite", w) {}
};

}  // namespace mcblock
