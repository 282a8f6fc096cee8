#pragma once

// Reference backend: runs each job as an OS subprocess in a fresh per-job
// working directory under work_root. Jobs queue as PENDING while
// max_concurrent are running; poll() both reaps finished processes and
// promotes queued jobs into free capacity.

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "gridpipe/glueing.hpp"

namespace gridpipe {

class LocalAdaptor : public AdaptorContract {
 public:
  LocalAdaptor(ArtifactStore& store, std::filesystem::path work_root,
               int max_concurrent = 4)
      : store_(store), work_root_(std::move(work_root)), cap_(max_concurrent) {
    std::filesystem::create_directories(work_root_);
  }

  std::string submit(const JobDescription& jd) override {
    std::lock_guard<std::mutex> lk(mu_);
    std::string id = "local-" + zero_pad(next_id_++, 6);
    Job& job = jobs_[id];
    job.jd = jd;
    job.workdir = work_root_ / id;
    queue_.push_back(id);
    promote_locked();
    return id;
  }

  JobState poll(const std::string& id) override {
    std::lock_guard<std::mutex> lk(mu_);
    Job& job = find(id);
    reap_locked(id, job);
    promote_locked();
    return job.state;
  }

  void cancel(const std::string& id) override {
    std::lock_guard<std::mutex> lk(mu_);
    Job& job = find(id);
    if (job_state::terminal(job.state.state)) return;
    if (job.pid > 0) {
      ::kill(job.pid, SIGKILL);
      int status = 0;
      ::waitpid(job.pid, &status, 0);
      job.pid = -1;
    }
    for (auto it = queue_.begin(); it != queue_.end(); ++it)
      if (*it == id) {
        queue_.erase(it);
        break;
      }
    job.state.state = job_state::canceled;
    job.state.diagnostics = "canceled";
    promote_locked();
  }

  void stage_in(const std::string& locator, const std::filesystem::path& dest) override {
    stage_from_locator(store_, locator, dest);
  }

  std::string stage_out(const std::filesystem::path& src,
                        const std::string& locator) override {
    return stage_to_locator(store_, src, locator);
  }

  int running_now() {
    std::lock_guard<std::mutex> lk(mu_);
    int n = 0;
    for (const auto& [_, j] : jobs_)
      if (j.pid > 0) ++n;
    return n;
  }

 private:
  struct Job {
    JobDescription jd;
    JobState state;
    std::filesystem::path workdir;
    pid_t pid = -1;
  };

  Job& find(const std::string& id) {
    auto it = jobs_.find(id);
    if (it == jobs_.end())
      raise(errc::unknown_handle, "no such local job: " + id, id);
    return it->second;
  }

  int running_locked() const {
    int n = 0;
    for (const auto& [_, j] : jobs_)
      if (j.pid > 0) ++n;
    return n;
  }

  void promote_locked() {
    while (!queue_.empty() && running_locked() < cap_) {
      std::string id = queue_.front();
      queue_.erase(queue_.begin());
      start_locked(id, jobs_.at(id));
    }
  }

  void start_locked(const std::string& id, Job& job) {
    job.state.state = job_state::staging;
    std::filesystem::create_directories(job.workdir);
    try {
      for (const auto& [locator, name] : job.jd.input_files)
        stage_from_locator(store_, locator, job.workdir / name);
    } catch (const Error& e) {
      job.state.state = job_state::failed;
      job.state.exit_code = -1;
      job.state.diagnostics = std::string("stage-in failed: ") + e.what();
      return;
    }

    // Relative executables with a slash are resolved against the caller's
    // cwd before the child chdirs into its working directory.
    std::string exe = job.jd.executable;
    if (exe.find('/') != std::string::npos && exe.front() != '/')
      exe = (std::filesystem::current_path() / exe).string();

    pid_t pid = ::fork();
    if (pid < 0) {
      job.state.state = job_state::failed;
      job.state.exit_code = -1;
      job.state.diagnostics = "fork failed";
      return;
    }
    if (pid == 0) {
      if (::chdir(job.workdir.c_str()) != 0) ::_exit(126);
      int out = ::open(".stdout", O_WRONLY | O_CREAT | O_TRUNC, 0644);
      int err = ::open(".stderr", O_WRONLY | O_CREAT | O_TRUNC, 0644);
      if (out >= 0) ::dup2(out, 1);
      if (err >= 0) ::dup2(err, 2);
      std::vector<char*> argv;
      argv.push_back(const_cast<char*>(exe.c_str()));
      for (const auto& a : job.jd.arguments) argv.push_back(const_cast<char*>(a.c_str()));
      argv.push_back(nullptr);
      ::execvp(exe.c_str(), argv.data());
      ::_exit(127);
    }
    job.pid = pid;
    job.state.state = job_state::running;
  }

  void reap_locked(const std::string& id, Job& job) {
    if (job.pid <= 0) return;
    int status = 0;
    pid_t r = ::waitpid(job.pid, &status, WNOHANG);
    if (r == 0) return;  // still running
    job.pid = -1;
    int exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -WTERMSIG(status);
    job.state.exit_code = exit_code;
    if (exit_code != 0) {
      job.state.state = job_state::failed;
      job.state.diagnostics = "exit code " + std::to_string(exit_code) +
                              stderr_excerpt(job.workdir);
      return;
    }
    // Exit 0 still fails the job when a declared output was not produced.
    for (const auto& name : job.jd.output_files) {
      if (!std::filesystem::exists(job.workdir / name)) {
        job.state.state = job_state::failed;
        job.state.exit_code = 0;
        job.state.diagnostics = "declared output missing: " + name;
        return;
      }
    }
    try {
      for (const auto& name : job.jd.output_files)
        job.state.staged_outputs[name] =
            stage_to_locator(store_, job.workdir / name, "store://");
    } catch (const Error& e) {
      job.state.state = job_state::failed;
      job.state.diagnostics = std::string("stage-out failed: ") + e.what();
      return;
    }
    job.state.state = job_state::done;
  }

  static std::string stderr_excerpt(const std::filesystem::path& workdir) {
    auto err = try_read_file(workdir / ".stderr");
    if (!err || err->empty()) return "";
    if (err->size() > 500) err->resize(500);
    return ": " + *err;
  }

  ArtifactStore& store_;
  std::filesystem::path work_root_;
  int cap_;
  std::mutex mu_;
  std::map<std::string, Job> jobs_;
  std::vector<std::string> queue_;
  uint64_t next_id_ = 1;
};

}  // namespace gridpipe
