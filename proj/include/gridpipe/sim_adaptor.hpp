#pragma once

// Simulated middleware: a discrete-event model of the grid. Each site runs
// at most `slots` jobs at once; a job occupies a lane for its configured
// runtime in ticks. The virtual clock advances only through tick(); poll
// never moves time. Outputs are synthesized deterministically from the job's
// identity and input digests, so reruns and retries produce identical bytes.

#include <cstdint>
#include <deque>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "gridpipe/digest.hpp"
#include "gridpipe/glueing.hpp"
#include "gridpipe/planner.hpp"

namespace gridpipe {

struct SimFault {
  std::string task_id;
  int attempt = 0;  // 0 means every attempt
};

struct SimConfig {
  GridView grid;
  std::map<std::string, int> actor_runtimes;  // actor name -> ticks, default 1
  std::vector<SimFault> fault_plan;
};

class SimGridAdaptor : public AdaptorContract {
 public:
  SimGridAdaptor(ArtifactStore& store, SimConfig cfg)
      : store_(store), cfg_(std::move(cfg)) {
    for (const auto& s : cfg_.grid.sites) sites_[s.site_id].slots = s.slots;
  }

  std::string submit(const JobDescription& jd) override {
    std::lock_guard<std::mutex> lk(mu_);
    auto site = sites_.find(jd.site_id);
    if (site == sites_.end())
      raise(errc::invalid_job, "site not in simulated grid: " + jd.site_id, jd.site_id);
    std::string id = "sim-" + zero_pad(next_id_++, 6);
    Job& job = jobs_[id];
    job.jd = jd;
    job.runtime = runtime_of(jd);
    site->second.queue.push_back(id);
    start_ready_locked(jd.site_id);
    return id;
  }

  JobState poll(const std::string& id) override {
    std::lock_guard<std::mutex> lk(mu_);
    return find(id).state;
  }

  void cancel(const std::string& id) override {
    std::lock_guard<std::mutex> lk(mu_);
    Job& job = find(id);
    if (job_state::terminal(job.state.state)) return;
    Site& site = sites_.at(job.jd.site_id);
    site.running.erase(id);
    for (auto it = site.queue.begin(); it != site.queue.end(); ++it)
      if (*it == id) {
        site.queue.erase(it);
        break;
      }
    job.state.state = job_state::canceled;
    job.state.diagnostics = "canceled";
    start_ready_locked(job.jd.site_id);
  }

  void stage_in(const std::string& locator, const std::filesystem::path& dest) override {
    stage_from_locator(store_, locator, dest);
  }

  std::string stage_out(const std::filesystem::path& src,
                        const std::string& locator) override {
    return stage_to_locator(store_, src, locator);
  }

  // Advances the virtual clock n ticks: finish due jobs, then pull queued
  // jobs into the freed lanes, per tick.
  void tick(int n = 1) {
    std::lock_guard<std::mutex> lk(mu_);
    for (int step = 0; step < n; ++step) {
      ++now_;
      for (auto& [site_id, site] : sites_) {
        // Deterministic order: running set is ordered by job id.
        std::vector<std::string> due;
        for (const auto& id : site.running)
          if (jobs_.at(id).end_tick <= now_) due.push_back(id);
        for (const auto& id : due) {
          site.running.erase(id);
          finish_locked(jobs_.at(id));
        }
        start_ready_locked(site_id);
      }
    }
  }

  int64_t now() const {
    std::lock_guard<std::mutex> lk(mu_);
    return now_;
  }

  int running_at(const std::string& site_id) const {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = sites_.find(site_id);
    return it == sites_.end() ? 0 : static_cast<int>(it->second.running.size());
  }

  int slots_at(const std::string& site_id) const {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = sites_.find(site_id);
    return it == sites_.end() ? 0 : it->second.slots;
  }

 private:
  struct Job {
    JobDescription jd;
    JobState state;
    int runtime = 1;
    int64_t end_tick = -1;
    std::vector<std::pair<std::string, std::string>> input_digests;  // name, digest
  };
  struct Site {
    int slots = 1;
    std::set<std::string> running;
    std::deque<std::string> queue;
  };

  Job& find(const std::string& id) {
    auto it = jobs_.find(id);
    if (it == jobs_.end())
      raise(errc::unknown_handle, "no such simulated job: " + id, id);
    return it->second;
  }

  int runtime_of(const JobDescription& jd) const {
    auto actor = jd.labels.find("actor");
    if (actor == jd.labels.end()) return 1;
    auto it = cfg_.actor_runtimes.find(actor->second);
    return it == cfg_.actor_runtimes.end() ? 1 : std::max(1, it->second);
  }

  void start_ready_locked(const std::string& site_id) {
    Site& site = sites_.at(site_id);
    while (!site.queue.empty() &&
           static_cast<int>(site.running.size()) < site.slots) {
      std::string id = site.queue.front();
      site.queue.pop_front();
      Job& job = jobs_.at(id);
      std::string err;
      job.input_digests = resolve_inputs(job.jd, err);
      if (!err.empty()) {
        job.state.state = job_state::failed;
        job.state.exit_code = -1;
        job.state.diagnostics = err;
        continue;
      }
      job.state.state = job_state::running;
      job.end_tick = now_ + job.runtime;
      site.running.insert(id);
    }
  }

  std::vector<std::pair<std::string, std::string>> resolve_inputs(
      const JobDescription& jd, std::string& err) const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [locator, name] : jd.input_files) {
      if (auto id = parse_store_locator(locator)) {
        if (!store_.has(*id)) {
          err = "stage-in failed: artifact not in store: " + *id;
          return {};
        }
        out.emplace_back(name, *id);
      } else {
        auto bytes = try_read_file(locator);
        if (!bytes) {
          err = "stage-in failed: no such file: " + locator;
          return {};
        }
        out.emplace_back(name, sha256_hex(*bytes));
      }
    }
    return out;
  }

  bool faulted(const JobDescription& jd) const {
    auto task = jd.labels.find("task_id");
    auto attempt = jd.labels.find("attempt");
    if (task == jd.labels.end()) return false;
    int att = attempt == jd.labels.end() ? 1 : std::stoi(attempt->second);
    for (const auto& f : cfg_.fault_plan)
      if (f.task_id == task->second && (f.attempt == 0 || f.attempt == att))
        return true;
    return false;
  }

  void finish_locked(Job& job) {
    if (faulted(job.jd)) {
      job.state.state = job_state::failed;
      job.state.exit_code = 1;
      job.state.diagnostics = "injected fault";
      return;
    }
    // Output bytes are a pure function of (actor, task, study index, port,
    // input digests); the attempt number is deliberately excluded so a retry
    // reproduces the identical artifact.
    auto label = [&](const char* k) {
      auto it = job.jd.labels.find(k);
      return it == job.jd.labels.end() ? std::string() : it->second;
    };
    for (const auto& name : job.jd.output_files) {
      json inputs = json::array();
      for (const auto& [in_name, digest] : job.input_digests)
        inputs.push_back({{"digest", digest}, {"name", in_name}});
      json content{{"actor", label("actor")},
                   {"inputs", inputs},
                   {"output", name},
                   {"study_index", label("study_index")},
                   {"task_id", label("task_id")}};
      std::string id = store_.put(content.dump());
      job.state.staged_outputs[name] = store_locator(id);
    }
    job.state.state = job_state::done;
    job.state.exit_code = 0;
  }

  ArtifactStore& store_;
  SimConfig cfg_;
  mutable std::mutex mu_;
  std::map<std::string, Job> jobs_;
  std::map<std::string, Site> sites_;
  int64_t now_ = 0;
  uint64_t next_id_ = 1;
};

}  // namespace gridpipe
