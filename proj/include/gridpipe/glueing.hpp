#pragma once

// Middleware abstraction boundary. Upper layers submit JobDescriptions and
// poll JobHandles; adaptors implementing AdaptorContract carry the
// middleware specifics, registered by name at startup. Nothing
// adaptor-specific crosses this interface.

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "gridpipe/artifact_store.hpp"
#include "gridpipe/error.hpp"
#include "gridpipe/job_state.hpp"
#include "gridpipe/util.hpp"

namespace gridpipe {

struct JobDescription {
  std::string executable;
  std::vector<std::string> arguments;
  // (artifact locator, working-dir-relative name) staged in before start.
  std::vector<std::pair<std::string, std::string>> input_files;
  std::vector<std::string> output_files;  // working-dir-relative names
  bool side_effect_free = false;          // permits empty output_files
  std::string site_id;
  std::map<std::string, std::string> labels;  // task_id, attempt, stage, ...
};

struct JobHandle {
  std::string handle_id;
  std::string backend;
  int64_t submitted_at = 0;
};

struct JobState {
  std::string state = job_state::pending;
  int exit_code = 0;  // meaningful in terminal states
  std::string diagnostics;
  // name -> locator, filled by the adaptor once outputs are staged out.
  std::map<std::string, std::string> staged_outputs;
};

// The contract every middleware adaptor implements. poll is non-blocking
// and, once a job is terminal, keeps returning that same terminal state.
class AdaptorContract {
 public:
  virtual ~AdaptorContract() = default;
  virtual std::string submit(const JobDescription& jd) = 0;
  virtual JobState poll(const std::string& backend_job_id) = 0;
  virtual void cancel(const std::string& backend_job_id) = 0;
  virtual void stage_in(const std::string& locator, const std::filesystem::path& dest) = 0;
  virtual std::string stage_out(const std::filesystem::path& src,
                                const std::string& locator) = 0;
};

// Locator resolution shared by adaptors: "store://<id>" names content in an
// ArtifactStore, anything else is a filesystem path.
inline void stage_from_locator(const ArtifactStore& store, const std::string& locator,
                               const std::filesystem::path& dest) {
  if (auto id = parse_store_locator(locator)) {
    if (!store.has(*id))
      raise(errc::source_missing, "artifact not in store: " + *id, locator);
    write_file_atomic(dest, store.get(*id));
    return;
  }
  auto bytes = try_read_file(locator);
  if (!bytes) raise(errc::source_missing, "no such file: " + locator, locator);
  write_file_atomic(dest, *bytes);
}

// Returns the locator actually written. Staging into the store is content
// addressed: an explicit "store://<id>" must match the content digest.
inline std::string stage_to_locator(ArtifactStore& store,
                                    const std::filesystem::path& src,
                                    const std::string& locator) {
  auto bytes = try_read_file(src);
  if (!bytes) raise(errc::source_missing, "no such file: " + src.string(), src.string());
  if (auto id = parse_store_locator(locator)) {
    std::string actual = store.put(*bytes);
    if (!id->empty() && *id != actual)
      raise(errc::storage_error,
            "content digest " + actual + " does not match requested id " + *id, locator);
    return store_locator(actual);
  }
  write_file_atomic(locator, *bytes);
  return locator;
}

inline void validate_job(const JobDescription& jd) {
  if (jd.executable.empty())
    raise(errc::invalid_job, "job has no executable");
  if (jd.output_files.empty() && !jd.side_effect_free)
    raise(errc::invalid_job,
          "job declares no outputs and is not marked side-effect-free");
  std::set<std::string> names;
  auto check_name = [&](const std::string& n) {
    if (n.empty() || n.front() == '/' || n.find("..") != std::string::npos)
      raise(errc::invalid_job, "staged name must be a safe relative path: " + n, n);
    if (!names.insert(n).second)
      raise(errc::invalid_job, "duplicate staged name: " + n, n);
  };
  for (const auto& [loc, name] : jd.input_files) check_name(name);
  for (const auto& name : jd.output_files) check_name(name);
}

class GlueingService {
 public:
  void register_adaptor(const std::string& name, std::shared_ptr<AdaptorContract> adaptor) {
    std::lock_guard<std::mutex> lk(mu_);
    if (adaptors_.count(name))
      raise(errc::duplicate_backend, "backend already registered: " + name, name);
    adaptors_[name] = std::move(adaptor);
  }

  std::vector<std::string> backends() const {
    std::lock_guard<std::mutex> lk(mu_);
    std::vector<std::string> out;
    for (const auto& [name, _] : adaptors_) out.push_back(name);
    return out;  // map order is already sorted
  }

  JobHandle submit(const JobDescription& jd, const std::string& backend) {
    validate_job(jd);
    std::lock_guard<std::mutex> lk(mu_);
    AdaptorContract* adaptor = find_adaptor(backend);
    std::string backend_job_id = adaptor->submit(jd);
    JobHandle h;
    h.handle_id = "h-" + zero_pad(next_handle_++, 6);
    h.backend = backend;
    h.submitted_at = now_ms();
    jobs_[h.handle_id] = Entry{backend, backend_job_id, JobState{}};
    return h;
  }

  // Monotone: never reports an earlier phase than previously observed, and
  // a terminal state, once seen, is final without further adaptor polls.
  JobState status(const JobHandle& h) {
    std::lock_guard<std::mutex> lk(mu_);
    Entry& e = find_job(h.handle_id);
    if (job_state::terminal(e.last.state)) return e.last;
    JobState fresh = adaptors_[e.backend]->poll(e.backend_job_id);
    if (job_state::rank(fresh.state) >= job_state::rank(e.last.state)) e.last = fresh;
    return e.last;
  }

  JobState cancel(const JobHandle& h) {
    std::lock_guard<std::mutex> lk(mu_);
    Entry& e = find_job(h.handle_id);
    if (job_state::terminal(e.last.state)) return e.last;
    adaptors_[e.backend]->cancel(e.backend_job_id);
    JobState fresh = adaptors_[e.backend]->poll(e.backend_job_id);
    if (job_state::rank(fresh.state) >= job_state::rank(e.last.state)) e.last = fresh;
    return e.last;
  }

  // Locator-to-locator copy through the backend's staging operations.
  std::string transfer(const std::string& src, const std::string& dst,
                       const std::string& backend) {
    std::shared_ptr<AdaptorContract> adaptor;
    {
      std::lock_guard<std::mutex> lk(mu_);
      find_adaptor(backend);
      adaptor = adaptors_[backend];
    }
    std::filesystem::path tmp =
        std::filesystem::temp_directory_path() /
        ("gridpipe-xfer-" + std::to_string(::getpid()) + "-" +
         std::to_string(xfer_counter_++));
    adaptor->stage_in(src, tmp);
    std::string written = adaptor->stage_out(tmp, dst);
    std::error_code ec;
    std::filesystem::remove(tmp, ec);
    return written;
  }

 private:
  struct Entry {
    std::string backend;
    std::string backend_job_id;
    JobState last;
  };

  AdaptorContract* find_adaptor(const std::string& name) {
    auto it = adaptors_.find(name);
    if (it == adaptors_.end())
      raise(errc::unknown_backend, "no such backend: " + name, name);
    return it->second.get();
  }

  Entry& find_job(const std::string& handle_id) {
    auto it = jobs_.find(handle_id);
    if (it == jobs_.end())
      raise(errc::unknown_handle, "no such job handle: " + handle_id, handle_id);
    return it->second;
  }

  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<AdaptorContract>> adaptors_;
  std::map<std::string, Entry> jobs_;
  uint64_t next_handle_ = 1;
  std::atomic<uint64_t> xfer_counter_{0};
};

}  // namespace gridpipe
