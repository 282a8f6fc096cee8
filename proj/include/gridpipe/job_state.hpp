#pragma once

// Job lifecycle vocabulary shared by the glueing layer and the provenance
// store's transition validator.

#include <string_view>

namespace gridpipe::job_state {

inline constexpr const char* pending = "PENDING";
inline constexpr const char* staging = "STAGING";
inline constexpr const char* running = "RUNNING";
inline constexpr const char* done = "DONE";
inline constexpr const char* failed = "FAILED";
inline constexpr const char* canceled = "CANCELED";

inline bool terminal(std::string_view s) {
  return s == done || s == failed || s == canceled;
}

// PENDING -> STAGING -> RUNNING -> {DONE|FAILED}; any non-terminal -> CANCELED.
inline bool legal(std::string_view from, std::string_view to) {
  if (from.empty()) return to == pending;
  if (to == canceled) return !terminal(from);
  if (from == pending) return to == staging;
  if (from == staging) return to == running;
  if (from == running) return to == done || to == failed;
  return false;
}

// Progress rank used for monotone status clamping.
inline int rank(std::string_view s) {
  if (s == pending) return 0;
  if (s == staging) return 1;
  if (s == running) return 2;
  return 3;
}

}  // namespace gridpipe::job_state
