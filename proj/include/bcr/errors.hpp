#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace bcr {

// Base of every error the library throws. `kind()` is a stable tag used by the
// CLI for its machine-readable error line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& m) : Error("DimensionError", m) {}
};

class ArgumentError : public Error {
 public:
  explicit ArgumentError(const std::string& m) : Error("ArgumentError", m) {}
};

// A non-finite value appeared in a tensor.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& m) : Error("NumericError", m) {}
};

class UndefinedMetricError : public Error {
 public:
  explicit UndefinedMetricError(const std::string& m) : Error("UndefinedMetricError", m) {}
};

class ContractViolation : public Error {
 public:
  explicit ContractViolation(const std::string& m) : Error("ContractViolation", m) {}
};

class DegenerateMaskError : public Error {
 public:
  DegenerateMaskError(std::string case_id, const std::string& m)
      : Error("DegenerateMaskError", m), case_id_(std::move(case_id)) {}
  const std::string& case_id() const noexcept { return case_id_; }

 private:
  std::string case_id_;
};

class FormatError : public Error {
 public:
  FormatError(std::uint64_t offset, const std::string& m)
      : Error("FormatError", m + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset),
        detail_(m) {}
  std::uint64_t offset() const noexcept { return offset_; }
  // Message without the offset suffix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::uint64_t offset_;
  std::string detail_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& m) : Error("ValidationError", m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error("IoError", m) {}
};

}  // namespace bcr
