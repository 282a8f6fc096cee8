#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace gridpipe {

// Error codes used across the library. Codes are stable strings: the CLI
// prints them, the gateway maps them onto HTTP statuses, and tests match
// on them.
namespace errc {
inline constexpr const char* syntax_error = "SYNTAX_ERROR";
inline constexpr const char* unknown_task_ref = "UNKNOWN_TASK_REF";
inline constexpr const char* unknown_actor_ref = "UNKNOWN_ACTOR_REF";
inline constexpr const char* unknown_port_ref = "UNKNOWN_PORT_REF";
inline constexpr const char* predicate_syntax = "PREDICATE_SYNTAX";
inline constexpr const char* unknown_tag = "UNKNOWN_TAG";
inline constexpr const char* unknown_member = "UNKNOWN_MEMBER";
inline constexpr const char* invalid_policy = "INVALID_POLICY";
inline constexpr const char* no_eligible_site = "NO_ELIGIBLE_SITE";
inline constexpr const char* empty_study_set = "EMPTY_STUDY_SET";
inline constexpr const char* duplicate_backend = "DUPLICATE_BACKEND";
inline constexpr const char* unknown_backend = "UNKNOWN_BACKEND";
inline constexpr const char* invalid_job = "INVALID_JOB_DESCRIPTION";
inline constexpr const char* unknown_handle = "UNKNOWN_HANDLE";
inline constexpr const char* source_missing = "SOURCE_MISSING";
inline constexpr const char* storage_error = "STORAGE_ERROR";
inline constexpr const char* illegal_transition = "ILLEGAL_TRANSITION";
inline constexpr const char* unknown_artifact = "UNKNOWN_ARTIFACT";
inline constexpr const char* unknown_execution = "UNKNOWN_EXECUTION";
inline constexpr const char* unknown_port = "UNKNOWN_PORT";
inline constexpr const char* unknown_pipeline = "UNKNOWN_PIPELINE";
inline constexpr const char* unknown_studyset = "UNKNOWN_STUDYSET";
inline constexpr const char* unknown_plan = "UNKNOWN_PLAN";
inline constexpr const char* enactment_failed = "ENACTMENT_FAILED";
inline constexpr const char* canceled = "CANCELED";
inline constexpr const char* catalog_error = "CATALOG_ERROR";
inline constexpr const char* config_error = "CONFIG_ERROR";
inline constexpr const char* bind_error = "BIND_ERROR";
inline constexpr const char* unauthorized = "UNAUTHORIZED";
}  // namespace errc

// Domain error: a stable code plus a human message and optional detail
// (usually the offending identifier).
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message, std::string detail = "")
      : std::runtime_error(message), code_(std::move(code)), detail_(std::move(detail)) {}

  const std::string& code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string code_;
  std::string detail_;
};

[[noreturn]] inline void raise(const char* code, const std::string& message,
                               std::string detail = "") {
  throw Error(code, message, std::move(detail));
}

}  // namespace gridpipe
