#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace profilebench {

enum class ErrorCode {
  MalformedFile,
  DuplicateItemId,
  UnknownSkillTag,
  OptionCountNot4,
  EmptySkill,
  KTooLarge,
  SampleTooLarge,
  MissingSkillCoverage,
  UnknownItem,
  LengthMismatch,
  LeakageDetected,
  MissingSkillExamples,
  PoolRequired,
  GradeMismatch,
  AuthError,
  RateLimitExhausted,
  Timeout,
  TransportError,
  UnknownSkill,
  BadCouplingMatrix,
  TooFewStudents,
  BadSubset,
  SingularBlock,
  MissingSuppressionRun,
  TooFewBackends,
  ConfigDrift,
  RunNotFound,
  RunExists,
  IncompleteRuns,
  InvalidConfig,
  UsageError,
  IoError,
};

/// Stable machine-readable name, used in CLI error output and in run logs.
constexpr std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedFile: return "MALFORMED_FILE";
    case ErrorCode::DuplicateItemId: return "DUPLICATE_ITEM_ID";
    case ErrorCode::UnknownSkillTag: return "UNKNOWN_SKILL_TAG";
    case ErrorCode::OptionCountNot4: return "OPTION_COUNT_NOT_4";
    case ErrorCode::EmptySkill: return "EMPTY_SKILL";
    case ErrorCode::KTooLarge: return "K_TOO_LARGE";
    case ErrorCode::SampleTooLarge: return "SAMPLE_TOO_LARGE";
    case ErrorCode::MissingSkillCoverage: return "MISSING_SKILL_COVERAGE";
    case ErrorCode::UnknownItem: return "UNKNOWN_ITEM";
    case ErrorCode::LengthMismatch: return "LENGTH_MISMATCH";
    case ErrorCode::LeakageDetected: return "LEAKAGE_DETECTED";
    case ErrorCode::MissingSkillExamples: return "MISSING_SKILL_EXAMPLES";
    case ErrorCode::PoolRequired: return "POOL_REQUIRED";
    case ErrorCode::GradeMismatch: return "GRADE_MISMATCH";
    case ErrorCode::AuthError: return "AUTH_ERROR";
    case ErrorCode::RateLimitExhausted: return "RATE_LIMIT_EXHAUSTED";
    case ErrorCode::Timeout: return "TIMEOUT";
    case ErrorCode::TransportError: return "TRANSPORT_ERROR";
    case ErrorCode::UnknownSkill: return "UNKNOWN_SKILL";
    case ErrorCode::BadCouplingMatrix: return "BAD_COUPLING_MATRIX";
    case ErrorCode::TooFewStudents: return "TOO_FEW_STUDENTS";
    case ErrorCode::BadSubset: return "BAD_SUBSET";
    case ErrorCode::SingularBlock: return "SINGULAR_BLOCK";
    case ErrorCode::MissingSuppressionRun: return "MISSING_SUPPRESSION_RUN";
    case ErrorCode::TooFewBackends: return "TOO_FEW_BACKENDS";
    case ErrorCode::ConfigDrift: return "CONFIG_DRIFT";
    case ErrorCode::RunNotFound: return "RUN_NOT_FOUND";
    case ErrorCode::RunExists: return "RUN_EXISTS";
    case ErrorCode::IncompleteRuns: return "INCOMPLETE_RUNS";
    case ErrorCode::InvalidConfig: return "INVALID_CONFIG";
    case ErrorCode::UsageError: return "USAGE_ERROR";
    case ErrorCode::IoError: return "IO_ERROR";
  }
  return "UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }
  std::string_view code_name() const noexcept { return error_code_name(code_); }

 private:
  ErrorCode code_;
};

}  // namespace profilebench
