#pragma once

// Append-only JSON-lines journal shared between processes. Appends happen
// under an exclusive flock; readers consume complete lines from a tracked
// byte offset, so several store instances over the same file (gateway
// replicas) observe one total order.

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>

#include "gridpipe/error.hpp"

namespace gridpipe {

class LineJournal {
 public:
  using Sink = std::function<void(std::string_view line)>;

  explicit LineJournal(const std::filesystem::path& path) : path_(path) {
    if (path.has_parent_path()) {
      std::error_code ec;
      std::filesystem::create_directories(path.parent_path(), ec);
    }
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_APPEND, 0644);
    if (fd_ < 0) raise(errc::storage_error, "cannot open journal: " + path.string());
  }

  ~LineJournal() {
    if (fd_ >= 0) ::close(fd_);
  }

  LineJournal(const LineJournal&) = delete;
  LineJournal& operator=(const LineJournal&) = delete;

  // Feeds every complete line appended since the last call to `sink`.
  // The offset only ever advances over whole lines, so a concurrent
  // writer's half-flushed tail is picked up on a later call.
  void poll_new(const Sink& sink) {
    char buf[64 * 1024];
    for (;;) {
      ssize_t n = ::pread(fd_, buf, sizeof buf, static_cast<off_t>(offset_ + pending_.size()));
      if (n < 0) raise(errc::storage_error, "journal read failed: " + path_.string());
      if (n == 0) break;
      pending_.append(buf, static_cast<size_t>(n));
      size_t start = 0, nl;
      while ((nl = pending_.find('\n', start)) != std::string::npos) {
        if (nl > start) sink(std::string_view(pending_).substr(start, nl - start));
        start = nl + 1;
      }
      offset_ += start;
      pending_.erase(0, start);
    }
  }

  // Exclusive append: lock, catch up on other writers' lines via `sink`,
  // then write the line `produce` builds (typically using state the sink
  // just updated, e.g. the next sequence number).
  void append(const Sink& sink, const std::function<std::string()>& produce) {
    if (::flock(fd_, LOCK_EX) != 0)
      raise(errc::storage_error, "journal lock failed: " + path_.string());
    try {
      poll_new(sink);
      std::string line = produce();
      line.push_back('\n');
      ssize_t n = ::write(fd_, line.data(), line.size());
      if (n != static_cast<ssize_t>(line.size()))
        raise(errc::storage_error, "journal append failed: " + path_.string());
      offset_ += line.size();  // we hold the lock, so we are at EOF
    } catch (...) {
      ::flock(fd_, LOCK_UN);
      throw;
    }
    ::flock(fd_, LOCK_UN);
  }

  // Bytes consumed so far; stable token for cache freshness checks.
  uint64_t consumed_bytes() const { return offset_; }

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
  uint64_t offset_ = 0;
  std::string pending_;
};

}  // namespace gridpipe
