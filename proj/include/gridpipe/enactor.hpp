#pragma once

// Execution engine. Takes a validated pipeline plus its plan, expands the
// study fan-out into per-image job instances, and drives every instance
// through the glueing service stage by stage: all jobs of a stage are
// submitted before any is awaited, and the next stage starts only when the
// current one is fully done. Every observed state change is written to the
// provenance store as a gap-free transition chain, and every produced
// artifact is recorded with its input lineage. The enactor never talks to a
// middleware directly; backends differ only by the name passed in.

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "gridpipe/catalog.hpp"
#include "gridpipe/glueing.hpp"
#include "gridpipe/pipeline.hpp"
#include "gridpipe/planner.hpp"
#include "gridpipe/provenance.hpp"

namespace gridpipe {

struct EnactmentOptions {
  int retry_limit = 0;  // extra attempts per failing job instance
  // Called between poll rounds while jobs are live; defaults to a short
  // sleep. Simulated backends hook their tick() in here.
  std::function<void()> idle;
  // Receives the execution id as soon as it is allocated, before any job
  // is submitted.
  std::function<void(const std::string&)> on_start;
};

struct ExecutionResult {
  std::string execution_id;
  std::string plan_id;
  std::string status;  // SUCCEEDED
  // "task.port" -> artifact ids, ordered by study index for fanned tasks.
  std::map<std::string, std::vector<std::string>> outputs;
};

inline json execution_result_to_json(const ExecutionResult& r) {
  json outs = json::object();
  for (const auto& [port, ids] : r.outputs) outs[port] = ids;
  return json{{"execution_id", r.execution_id},
              {"outputs", outs},
              {"plan_id", r.plan_id},
              {"status", r.status}};
}

// PERSISTENT when the port is persist-marked or feeds no downstream task;
// everything else is scratch that exists only to be consumed.
inline std::string classify_artifact(const Pipeline& p, const std::string& task_id,
                                     const std::string& port) {
  const Task* t = p.find_task(task_id);
  const Actor* a = t ? p.actor_of(*t) : nullptr;
  if (!a || !a->has_output(port))
    raise(errc::unknown_port, "no such output port: " + task_id + "." + port,
          task_id + "." + port);
  if (t->persists(port) || p.consumers_of(task_id, port).empty()) return "PERSISTENT";
  return "TRANSITORY";
}

class Enactor {
 public:
  Enactor(GlueingService& glue, ArtifactStore& store, ProvenanceStore& prov,
          Catalog* catalog = nullptr)
      : glue_(glue), store_(store), prov_(prov), catalog_(catalog) {}

  ExecutionResult enact(const Pipeline& p, const ExecutionPlan& plan,
                        const std::string& backend, EnactmentOptions opts = {}) {
    ValidationReport report = validate(p);
    if (!report.ok)
      raise(errc::syntax_error, "pipeline fails validation: " + report.issues[0].message,
            report.issues[0].code);
    Run run;
    run.p = &p;
    run.plan = &plan;
    run.backend = backend;
    run.retry_limit = opts.retry_limit;
    run.idle = opts.idle ? opts.idle : [] {
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
    };
    compute_fanout(run);

    run.execution_id = prov_.start_execution(plan.plan_id, backend);
    run.cancel_flag = std::make_shared<std::atomic<bool>>(false);
    {
      std::lock_guard<std::mutex> lk(mu_);
      live_[run.execution_id] = run.cancel_flag;
    }
    if (opts.on_start) opts.on_start(run.execution_id);

    try {
      for (size_t s = 0; s < plan.stages.size(); ++s) run_stage(run, s);
    } catch (...) {
      unregister(run.execution_id);
      throw;
    }

    ExecutionResult result;
    result.execution_id = run.execution_id;
    result.plan_id = plan.plan_id;
    result.status = "SUCCEEDED";
    for (const auto& t : p.tasks) {
      const Actor* a = p.actor_of(t);
      for (const auto& port : a->output_ports) {
        std::vector<std::string> ids;
        for (const auto& per_instance : run.produced.at(t.id))
          ids.push_back(per_instance.at(port));
        result.outputs[t.id + "." + port] = ids;
      }
    }
    json outs = json::object();
    for (const auto& [port, ids] : result.outputs) outs[port] = ids;
    prov_.end_execution(run.execution_id, json{{"outputs", outs}, {"status", "SUCCEEDED"}});
    unregister(run.execution_id);
    return result;
  }

  // Flags a live execution; its enact() call notices between poll rounds,
  // cancels the in-flight jobs, and ends the execution as CANCELED.
  void cancel_execution(const std::string& execution_id) {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = live_.find(execution_id);
    if (it == live_.end())
      raise(errc::unknown_execution, "execution is not live: " + execution_id,
            execution_id);
    it->second->store(true);
  }

 private:
  struct Instance {
    std::string task_id;
    std::optional<int64_t> study_index;
    size_t slot = 0;  // index into produced[task_id]
    JobDescription jd;
    JobHandle handle;
    int attempt = 1;
    std::string recorded;  // last state written to the transition chain
    bool finished = false;
    std::vector<std::string> input_ids;  // consumed artifacts, staging order
  };

  struct Run {
    const Pipeline* p = nullptr;
    const ExecutionPlan* plan = nullptr;
    std::string backend;
    std::string execution_id;
    int retry_limit = 0;
    std::function<void()> idle;
    std::shared_ptr<std::atomic<bool>> cancel_flag;
    std::set<std::string> fanned;
    size_t fan_n = 0;
    // task -> one map per instance (fanned: indexed by study index).
    std::map<std::string, std::vector<std::map<std::string, std::string>>> produced;
    std::map<std::string, std::string> external_ids;  // payload_ref -> artifact id
  };

  void unregister(const std::string& execution_id) {
    std::lock_guard<std::mutex> lk(mu_);
    live_.erase(execution_id);
  }

  // A task is fanned when a study feeds it image-by-image, or when it
  // consumes a fanned producer through a port that does not collect.
  void compute_fanout(Run& run) {
    for (const auto& [port_ref, members] : run.plan->study_fanout)
      run.fan_n = members.size();
    for (const auto& stage : run.plan->stages) {
      for (const auto& tid : stage) {
        const Task* t = run.p->find_task(tid);
        if (!t) raise(errc::unknown_task_ref, "plan names unknown task: " + tid, tid);
        bool fanned = false;
        for (const auto& port : run.p->study_inputs)
          if (port.task == tid && run.plan->study_fanout.count(port.str()) &&
              !t->collects(port.port))
            fanned = true;
        for (const Edge* e : run.p->in_edges(tid))
          if (run.fanned.count(e->from_task) && !t->collects(e->to_port)) fanned = true;
        if (fanned) run.fanned.insert(tid);
      }
    }
  }

  // Bytes entering from outside the execution (study payloads, literal-fed
  // ports) become external artifacts: recorded once per id, classification
  // PERSISTENT, no producing task.
  std::string register_external(Run& run, const std::string& id) {
    if (!prov_.artifact(id)) {
      ArtifactRecord ar;
      ar.artifact_id = id;
      ar.produced_by.external = true;
      ar.classification = "PERSISTENT";
      ar.size_bytes = store_.size_of(id);
      prov_.record_artifact(run.execution_id, ar);
    }
    return id;
  }

  std::string resolve_payload(Run& run, const std::string& image_id) {
    if (!catalog_)
      raise(errc::config_error, "study inputs require a catalog", image_id);
    auto rec = catalog_->find(image_id);
    if (!rec)
      raise(errc::unknown_member, "studyset member not in catalog: " + image_id,
            image_id);
    auto memo = run.external_ids.find(rec->payload_ref);
    if (memo != run.external_ids.end()) return memo->second;
    std::string id;
    if (auto sid = parse_store_locator(rec->payload_ref)) {
      if (!store_.has(*sid))
        raise(errc::unknown_artifact, "payload not in store: " + *sid, *sid);
      id = *sid;
    } else {
      auto bytes = try_read_file(rec->payload_ref);
      if (!bytes)
        raise(errc::source_missing, "payload file missing: " + rec->payload_ref,
              rec->payload_ref);
      id = store_.put(*bytes);
    }
    register_external(run, id);
    run.external_ids[rec->payload_ref] = id;
    return id;
  }

  Instance build_instance(Run& run, size_t stage_idx, const std::string& tid,
                          std::optional<int64_t> si) {
    const Task& t = *run.p->find_task(tid);
    const Actor& a = *run.p->actor_of(t);
    Instance inst;
    inst.task_id = tid;
    inst.study_index = si;
    inst.slot = si ? static_cast<size_t>(*si) : 0;

    JobDescription& jd = inst.jd;
    jd.site_id = run.plan->assignments.at(tid);
    jd.labels = {{"actor", a.name}, {"task_id", tid},
                 {"stage", std::to_string(stage_idx)}, {"attempt", "1"}};
    if (si) jd.labels["study_index"] = std::to_string(*si);

    std::map<std::string, std::string> in_text;  // port -> {in:} expansion
    auto stage_id = [&](const std::string& id, const std::string& name) {
      jd.input_files.emplace_back(store_locator(id), name);
      inst.input_ids.push_back(id);
    };
    for (const auto& port : a.input_ports) {
      std::string key = tid + "." + port;
      auto fan = run.plan->study_fanout.find(key);
      if (fan != run.plan->study_fanout.end()) {
        if (t.collects(port)) {
          std::vector<std::string> names;
          for (size_t k = 0; k < fan->second.size(); ++k) {
            names.push_back(port + "." + std::to_string(k));
            stage_id(resolve_payload(run, fan->second[k]), names.back());
          }
          in_text[port] = join(names, " ");
        } else {
          stage_id(resolve_payload(run, fan->second.at(inst.slot)), port);
          in_text[port] = port;
        }
        continue;
      }
      const Edge* feeder = nullptr;
      for (const Edge* e : run.p->in_edges(tid))
        if (e->to_port == port) feeder = e;
      if (!feeder) {
        // A param binding named like the port feeds it with literal bytes.
        auto lit = t.param_bindings.find(port);
        if (lit == t.param_bindings.end())
          raise(errc::unknown_port_ref, "input port is unfed: " + key, key);
        stage_id(register_external(run, store_.put(lit->second)), port);
        in_text[port] = port;
        continue;
      }
      const auto& upstream = run.produced.at(feeder->from_task);
      if (run.fanned.count(feeder->from_task) && t.collects(port)) {
        std::vector<std::string> names;
        for (size_t k = 0; k < upstream.size(); ++k) {
          names.push_back(port + "." + std::to_string(k));
          stage_id(upstream[k].at(feeder->from_port), names.back());
        }
        in_text[port] = join(names, " ");
      } else {
        size_t slot = run.fanned.count(feeder->from_task) ? inst.slot : 0;
        stage_id(upstream.at(slot).at(feeder->from_port), port);
        in_text[port] = port;
      }
    }
    jd.output_files = a.output_ports;
    jd.side_effect_free = a.output_ports.empty();

    auto tokens = split_ws(expand_command(a, t, in_text));
    if (tokens.empty())
      raise(errc::syntax_error, "actor command expands to nothing: " + a.name, a.name);
    jd.executable = tokens.front();
    jd.arguments.assign(tokens.begin() + 1, tokens.end());
    return inst;
  }

  static std::string expand_command(const Actor& a, const Task& t,
                                    const std::map<std::string, std::string>& in_text) {
    const std::string& tmpl = a.command_template;
    std::string out;
    size_t i = 0;
    while (i < tmpl.size()) {
      if (tmpl[i] != '{') {
        out += tmpl[i++];
        continue;
      }
      size_t close = tmpl.find('}', i);
      std::string inner = tmpl.substr(i + 1, close - i - 1);
      size_t colon = inner.find(':');
      std::string kind = inner.substr(0, colon);
      std::string name = inner.substr(colon + 1);
      if (kind == "in")
        out += in_text.at(name);
      else if (kind == "out")
        out += name;
      else
        out += t.param_bindings.at(name);
      i = close + 1;
    }
    return out;
  }

  // Writes the missing links so the recorded chain steps through every
  // intermediate state exactly once per attempt.
  void advance_recorded(Run& run, Instance& inst, const std::string& observed) {
    namespace js = job_state;
    if (observed == inst.recorded || js::terminal(inst.recorded)) return;
    if (observed == js::canceled) {
      prov_.record_transition(run.execution_id, inst.task_id, inst.study_index,
                              inst.attempt, inst.recorded, js::canceled);
      inst.recorded = js::canceled;
      return;
    }
    while (js::rank(inst.recorded) < js::rank(observed)) {
      std::string next;
      if (inst.recorded == js::pending)
        next = js::staging;
      else if (inst.recorded == js::staging)
        next = js::running;
      else
        next = observed;
      prov_.record_transition(run.execution_id, inst.task_id, inst.study_index,
                              inst.attempt, inst.recorded, next);
      inst.recorded = next;
    }
  }

  void submit(Run& run, Instance& inst) {
    inst.jd.labels["attempt"] = std::to_string(inst.attempt);
    inst.handle = glue_.submit(inst.jd, run.backend);
    prov_.record_transition(run.execution_id, inst.task_id, inst.study_index,
                            inst.attempt, "", job_state::pending,
                            json{{"site", inst.jd.site_id}});
    inst.recorded = job_state::pending;
  }

  void harvest(Run& run, Instance& inst, const JobState& st) {
    const Task& t = *run.p->find_task(inst.task_id);
    const Actor& a = *run.p->actor_of(t);
    for (const auto& port : a.output_ports) {
      auto it = st.staged_outputs.find(port);
      if (it == st.staged_outputs.end())
        raise(errc::storage_error, "adaptor staged no locator for output: " + port,
              inst.task_id + "." + port);
      auto id = parse_store_locator(it->second);
      if (!id)
        raise(errc::storage_error, "output locator is not content addressed: " + it->second,
              it->second);
      ArtifactRecord ar;
      ar.artifact_id = *id;
      ar.produced_by.execution_id = run.execution_id;
      ar.produced_by.task_id = inst.task_id;
      ar.produced_by.port = port;
      ar.produced_by.study_index = inst.study_index;
      ar.classification = classify_artifact(*run.p, inst.task_id, port);
      ar.size_bytes = store_.size_of(*id);
      ar.inputs = inst.input_ids;
      prov_.record_artifact(run.execution_id, ar);
      run.produced.at(inst.task_id).at(inst.slot)[port] = *id;
    }
    inst.finished = true;
  }

  [[noreturn]] void fail_execution(Run& run, std::vector<Instance>& instances,
                                   const Instance& culprit, const std::string& diag) {
    cancel_live(run, instances);
    prov_.end_execution(run.execution_id,
                        json{{"failed_task", culprit.task_id}, {"status", "FAILED"}});
    std::string msg = "task " + culprit.task_id + " failed";
    if (culprit.study_index) msg += " (study " + std::to_string(*culprit.study_index) + ")";
    msg += " after " + std::to_string(culprit.attempt) + " attempt(s)";
    if (!diag.empty()) msg += ": " + diag;
    raise(errc::enactment_failed, msg, culprit.task_id);
  }

  [[noreturn]] void cancel_execution_now(Run& run, std::vector<Instance>& instances) {
    cancel_live(run, instances);
    prov_.end_execution(run.execution_id, json{{"status", "CANCELED"}});
    raise(errc::canceled, "execution canceled: " + run.execution_id, run.execution_id);
  }

  void cancel_live(Run& run, std::vector<Instance>& instances) {
    for (auto& inst : instances) {
      if (inst.finished || job_state::terminal(inst.recorded)) continue;
      JobState st = glue_.cancel(inst.handle);
      advance_recorded(run, inst, st.state);
      if (st.state == job_state::done) harvest(run, inst, st);
      inst.finished = true;
    }
  }

  void run_stage(Run& run, size_t stage_idx) {
    const auto& tasks = run.plan->stages[stage_idx];
    std::vector<Instance> instances;
    for (const auto& tid : tasks) {
      size_t copies = run.fanned.count(tid) ? run.fan_n : 1;
      run.produced[tid].resize(copies);
      for (size_t k = 0; k < copies; ++k) {
        std::optional<int64_t> si;
        if (run.fanned.count(tid)) si = static_cast<int64_t>(k);
        instances.push_back(build_instance(run, stage_idx, tid, si));
      }
    }
    for (auto& inst : instances) submit(run, inst);

    for (;;) {
      if (run.cancel_flag->load()) cancel_execution_now(run, instances);
      bool all_done = true;
      for (auto& inst : instances) {
        if (inst.finished) continue;
        JobState st = glue_.status(inst.handle);
        advance_recorded(run, inst, st.state);
        if (st.state == job_state::done) {
          harvest(run, inst, st);
        } else if (st.state == job_state::failed) {
          if (inst.attempt <= run.retry_limit) {
            ++inst.attempt;  // same description, same site, next attempt
            submit(run, inst);
            all_done = false;
          } else {
            fail_execution(run, instances, inst, st.diagnostics);
          }
        } else if (st.state == job_state::canceled) {
          fail_execution(run, instances, inst, "job canceled by backend");
        } else {
          all_done = false;
        }
      }
      if (all_done) return;
      run.idle();
    }
  }

  GlueingService& glue_;
  ArtifactStore& store_;
  ProvenanceStore& prov_;
  Catalog* catalog_;
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<std::atomic<bool>>> live_;
};

}  // namespace gridpipe
