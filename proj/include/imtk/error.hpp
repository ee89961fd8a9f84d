#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace imtk {

enum class ErrorCode {
  // measurement graph
  MissingIdentityKey,
  AttributeConflict,
  DanglingEndpoint,
  SchemaViolation,
  MetaMismatch,
  IntegrityViolation,
  ParseError,
  UnknownKind,
  // elf inspector
  NotElf,
  Truncated,
  UnsupportedClass,
  MalformedTable,
  // collectors
  ProcUnavailable,
  Vanished,
  PermissionDenied,
  NotFound,
  IoError,
  // appraiser
  PolicyParseError,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Error carrying a machine-checkable code. Thrown by all library
/// operations whose contract names an error kind.
class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

private:
  ErrorCode code_;
};

/// Maps errno to the closest collector error kind.
ErrorCode errno_to_code(int err) noexcept;

} // namespace imtk
