#include "imtk/error.hpp"

#include <cerrno>

namespace imtk {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::MissingIdentityKey: return "MissingIdentityKey";
    case ErrorCode::AttributeConflict: return "AttributeConflict";
    case ErrorCode::DanglingEndpoint: return "DanglingEndpoint";
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::MetaMismatch: return "MetaMismatch";
    case ErrorCode::IntegrityViolation: return "IntegrityViolation";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::UnknownKind: return "UnknownKind";
    case ErrorCode::NotElf: return "NotElf";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::UnsupportedClass: return "UnsupportedClass";
    case ErrorCode::MalformedTable: return "MalformedTable";
    case ErrorCode::ProcUnavailable: return "ProcUnavailable";
    case ErrorCode::Vanished: return "Vanished";
    case ErrorCode::PermissionDenied: return "PermissionDenied";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::PolicyParseError: return "PolicyParseError";
  }
  return "Unknown";
}

ErrorCode errno_to_code(int err) noexcept {
  switch (err) {
    case ENOENT:
    case ENOTDIR: return ErrorCode::NotFound;
    case EACCES:
    case EPERM: return ErrorCode::PermissionDenied;
    case ESRCH: return ErrorCode::Vanished;
    default: return ErrorCode::IoError;
  }
}

} // namespace imtk
