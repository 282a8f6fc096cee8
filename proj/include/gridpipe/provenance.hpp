#pragma once

// Provenance store: one append-only JSON-lines event log, event-sourced
// views derived from it (pipelines, study sets, plans, executions,
// artifacts), lineage graphs, and a bounded read cache. Several store
// instances, in one process or many, may share a log file; the journal's
// lock-sync-append discipline gives them a single total order and globally
// consecutive sequence numbers.

#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "gridpipe/catalog.hpp"
#include "gridpipe/error.hpp"
#include "gridpipe/job_state.hpp"
#include "gridpipe/linefile.hpp"
#include "gridpipe/planner.hpp"
#include "gridpipe/util.hpp"
#include "json.hpp"

namespace gridpipe {

namespace event_kind {
inline constexpr const char* pipeline_registered = "PIPELINE_REGISTERED";
inline constexpr const char* studyset_created = "STUDYSET_CREATED";
inline constexpr const char* anonymized = "ANONYMIZED";
inline constexpr const char* plan_created = "PLAN_CREATED";
inline constexpr const char* exec_started = "EXEC_STARTED";
inline constexpr const char* task_transition = "TASK_TRANSITION";
inline constexpr const char* artifact_created = "ARTIFACT_CREATED";
inline constexpr const char* exec_ended = "EXEC_ENDED";

inline bool known(std::string_view k) {
  return k == pipeline_registered || k == studyset_created || k == anonymized ||
         k == plan_created || k == exec_started || k == task_transition ||
         k == artifact_created || k == exec_ended;
}
}  // namespace event_kind

struct ProvenanceEvent {
  uint64_t seq = 0;
  int64_t at = 0;
  std::string kind;
  std::string execution_id;  // empty when the event is not execution-scoped
  json payload = json::object();
};

inline json event_to_json(const ProvenanceEvent& e) {
  json j{{"at", e.at}, {"kind", e.kind}, {"payload", e.payload}, {"seq", e.seq}};
  if (!e.execution_id.empty()) j["execution_id"] = e.execution_id;
  return j;
}

inline ProvenanceEvent event_from_json(const json& j) {
  ProvenanceEvent e;
  e.seq = j.value("seq", uint64_t{0});
  e.at = j.value("at", int64_t{0});
  e.kind = j.value("kind", "");
  e.execution_id = j.value("execution_id", "");
  if (j.contains("payload")) e.payload = j["payload"];
  return e;
}

struct ProducedBy {
  bool external = false;
  std::string execution_id, task_id, port;
  std::optional<int64_t> study_index;
};

struct ArtifactRecord {
  std::string artifact_id;
  ProducedBy produced_by;
  std::string classification;  // TRANSITORY | PERSISTENT
  uint64_t size_bytes = 0;
  std::vector<std::string> inputs;  // artifact ids consumed to produce this
  uint64_t seq = 0;                 // creating event
};

struct EventFilter {
  std::optional<std::string> execution_id;
  std::optional<std::string> task_id;
  std::optional<std::string> kind;
  std::optional<std::pair<uint64_t, uint64_t>> seq_range;  // inclusive

  std::string canonical() const {
    std::string s;
    if (execution_id) s += "execution_id=" + *execution_id + "&";
    if (kind) s += "kind=" + *kind + "&";
    if (seq_range)
      s += "seq=" + std::to_string(seq_range->first) + ".." +
           std::to_string(seq_range->second) + "&";
    if (task_id) s += "task_id=" + *task_id + "&";
    return s;
  }

  bool matches(const ProvenanceEvent& e) const {
    if (execution_id && e.execution_id != *execution_id) return false;
    if (kind && e.kind != *kind) return false;
    if (seq_range && (e.seq < seq_range->first || e.seq > seq_range->second))
      return false;
    if (task_id) {
      std::string t;
      if (e.payload.contains("task_id") && e.payload["task_id"].is_string())
        t = e.payload["task_id"].get<std::string>();
      else if (e.payload.contains("produced_by") && e.payload["produced_by"].is_object())
        t = e.payload["produced_by"].value("task_id", "");
      if (t != *task_id) return false;
    }
    return true;
  }
};

// Filter text as accepted on the wire and the command line:
// comma-separated key=value with keys execution, task, kind, seq (lo..hi).
inline EventFilter parse_event_filter(const std::string& text) {
  EventFilter f;
  for (const auto& part : split(text, ',')) {
    if (part.empty()) continue;
    size_t eq = part.find('=');
    if (eq == std::string::npos)
      raise(errc::syntax_error, "filter term is not key=value: " + part, part);
    std::string key = part.substr(0, eq), value = part.substr(eq + 1);
    if (value.empty())
      raise(errc::syntax_error, "filter term has no value: " + part, part);
    if (key == "execution") {
      f.execution_id = value;
    } else if (key == "task") {
      f.task_id = value;
    } else if (key == "kind") {
      if (!event_kind::known(value))
        raise(errc::syntax_error, "unknown event kind: " + value, value);
      f.kind = value;
    } else if (key == "seq") {
      size_t dots = value.find("..");
      std::string lo = value.substr(0, dots);
      std::string hi = dots == std::string::npos ? lo : value.substr(dots + 2);
      if (lo.empty() || hi.empty() ||
          lo.find_first_not_of("0123456789") != std::string::npos ||
          hi.find_first_not_of("0123456789") != std::string::npos)
        raise(errc::syntax_error, "seq range must be lo..hi: " + value, value);
      f.seq_range = {std::stoull(lo), std::stoull(hi)};
    } else {
      raise(errc::syntax_error, "unknown filter key: " + key, key);
    }
  }
  return f;
}

struct LineageNode {
  std::string id;    // artifact id, or execution/task[#index] for task instances
  std::string type;  // "artifact" | "task"
  uint64_t seq = 0;
  json attrs;
};

struct LineageEdge {
  std::string from, to, relation;  // relation: "produced_by" | "consumed"
};

struct LineageGraph {
  std::string root;
  std::vector<LineageNode> nodes;
  std::vector<LineageEdge> edges;
};

inline json lineage_to_json(const LineageGraph& g) {
  json nodes = json::array(), edges = json::array();
  for (const auto& n : g.nodes)
    nodes.push_back({{"attrs", n.attrs}, {"id", n.id}, {"seq", n.seq}, {"type", n.type}});
  for (const auto& e : g.edges)
    edges.push_back({{"from", e.from}, {"relation", e.relation}, {"to", e.to}});
  return json{{"edges", edges}, {"nodes", nodes}, {"root", g.root}};
}

struct ExecutionView {
  std::string execution_id;
  std::string plan_id;
  std::string backend;
  std::string status = "RUNNING";  // SUCCEEDED | FAILED | CANCELED once ended
  uint64_t started_seq = 0;
  json result;  // EXEC_ENDED payload, null until then
};

class ProvenanceStore {
 public:
  // With logical time (the default) event timestamps equal sequence numbers,
  // so replicas derive byte-identical views. Wall-clock time is opt-in.
  explicit ProvenanceStore(const std::filesystem::path& event_log,
                           bool logical_time = true)
      : journal_(event_log), logical_(logical_time) {
    std::lock_guard<std::mutex> lk(mu_);
    pull_locked();
  }

  // --- writing ---------------------------------------------------------

  uint64_t record(ProvenanceEvent e) {
    ProvenanceEvent out = append_raw([&](uint64_t seq, int64_t at) {
      e.seq = seq;
      e.at = at;
      return e;
    });
    return out.seq;
  }

  // Stamps set-NNNNNN and created_at from the assigned seq, atomically with
  // the append, so concurrent creators cannot collide.
  StudySet create_studyset(std::vector<std::string> members,
                           std::optional<std::string> defining_query,
                           const std::string& owner) {
    StudySet s;
    s.members = std::move(members);
    s.defining_query = std::move(defining_query);
    s.owner = owner;
    append_raw([&](uint64_t seq, int64_t at) {
      s.set_id = "set-" + zero_pad(seq, 6);
      s.created_at = at;
      ProvenanceEvent e;
      e.seq = seq;
      e.at = at;
      e.kind = event_kind::studyset_created;
      e.payload = studyset_to_json(s);
      return e;
    });
    return s;
  }

  std::string register_pipeline(const std::string& pipeline_id, const json& doc) {
    append_raw([&](uint64_t seq, int64_t at) {
      ProvenanceEvent e;
      e.seq = seq;
      e.at = at;
      e.kind = event_kind::pipeline_registered;
      e.payload = json{{"doc", doc}, {"pipeline_id", pipeline_id}};
      return e;
    });
    return pipeline_id;
  }

  void record_anonymized(const std::string& from_set, const std::string& to_set,
                         const json& rules) {
    append_raw([&](uint64_t seq, int64_t at) {
      ProvenanceEvent e;
      e.seq = seq;
      e.at = at;
      e.kind = event_kind::anonymized;
      e.payload = json{{"from_set", from_set}, {"rules", rules}, {"to_set", to_set}};
      return e;
    });
  }

  void record_plan(const ExecutionPlan& plan, const std::string& set_id) {
    append_raw([&](uint64_t seq, int64_t at) {
      ProvenanceEvent e;
      e.seq = seq;
      e.at = at;
      e.kind = event_kind::plan_created;
      e.payload = json{{"plan", plan_to_json(plan)}, {"set_id", set_id}};
      return e;
    });
  }

  std::string start_execution(const std::string& plan_id, const std::string& backend) {
    std::string id;
    append_raw([&](uint64_t seq, int64_t at) {
      id = "exec-" + zero_pad(seq, 6);
      ProvenanceEvent e;
      e.seq = seq;
      e.at = at;
      e.kind = event_kind::exec_started;
      e.execution_id = id;
      e.payload = json{{"backend", backend}, {"plan_id", plan_id}};
      return e;
    });
    return id;
  }

  void record_transition(const std::string& execution_id, const std::string& task_id,
                         std::optional<int64_t> study_index, int attempt,
                         const std::string& from_state, const std::string& to_state,
                         json extra = json::object()) {
    ProvenanceEvent e;
    e.kind = event_kind::task_transition;
    e.execution_id = execution_id;
    e.payload = std::move(extra);
    e.payload["task_id"] = task_id;
    e.payload["study_index"] = study_index ? json(*study_index) : json(nullptr);
    e.payload["attempt"] = attempt;
    e.payload["from_state"] = from_state.empty() ? json(nullptr) : json(from_state);
    e.payload["to_state"] = to_state;
    record(std::move(e));
  }

  void record_artifact(const std::string& execution_id, const ArtifactRecord& r) {
    ProvenanceEvent e;
    e.kind = event_kind::artifact_created;
    e.execution_id = execution_id;
    json produced;
    if (r.produced_by.external) {
      produced = "EXTERNAL";
    } else {
      produced = json{{"execution_id", r.produced_by.execution_id},
                      {"port", r.produced_by.port},
                      {"study_index", r.produced_by.study_index
                                          ? json(*r.produced_by.study_index)
                                          : json(nullptr)},
                      {"task_id", r.produced_by.task_id}};
    }
    e.payload = json{{"artifact_id", r.artifact_id},
                     {"classification", r.classification},
                     {"inputs", r.inputs},
                     {"produced_by", produced},
                     {"size_bytes", r.size_bytes}};
    record(std::move(e));
  }

  void end_execution(const std::string& execution_id, const json& result) {
    ProvenanceEvent e;
    e.kind = event_kind::exec_ended;
    e.execution_id = execution_id;
    e.payload = result;
    record(std::move(e));
  }

  // --- reading ---------------------------------------------------------

  std::vector<ProvenanceEvent> query_events(const EventFilter& f) {
    std::lock_guard<std::mutex> lk(mu_);
    pull_locked();
    return scan_locked(f);
  }

  // Identical results to query_events; serves from cache when the log has
  // not grown since the entry was built.
  std::vector<ProvenanceEvent> cached_query(const EventFilter& f) {
    std::lock_guard<std::mutex> lk(mu_);
    pull_locked();
    std::string key = f.canonical();
    uint64_t size_now = journal_.consumed_bytes();
    auto it = cache_.find(key);
    if (it != cache_.end() && it->second.log_bytes == size_now) {
      ++cache_hits_;
      return it->second.events;
    }
    auto events = scan_locked(f);
    if (cache_.size() >= kCacheCapacity) cache_.clear();
    cache_[key] = {size_now, events};
    return events;
  }

  uint64_t cache_hits() const { return cache_hits_; }

  LineageGraph lineage(const std::string& artifact_id) {
    std::lock_guard<std::mutex> lk(mu_);
    pull_locked();
    auto root = artifacts_.find(artifact_id);
    if (root == artifacts_.end())
      raise(errc::unknown_artifact, "no such artifact: " + artifact_id, artifact_id);

    LineageGraph g;
    g.root = artifact_id;
    std::set<std::string> seen_artifacts, seen_tasks;
    std::deque<std::string> frontier{artifact_id};
    while (!frontier.empty()) {
      std::string id = frontier.front();
      frontier.pop_front();
      if (!seen_artifacts.insert(id).second) continue;
      auto it = artifacts_.find(id);
      if (it == artifacts_.end()) {
        // Referenced as an input but never recorded; keep it as a leaf.
        g.nodes.push_back({id, "artifact", 0, json{{"recorded", false}}});
        continue;
      }
      const ArtifactRecord& r = it->second;
      g.nodes.push_back({id, "artifact", r.seq,
                         json{{"classification", r.classification},
                              {"size_bytes", r.size_bytes}}});
      if (r.produced_by.external) continue;
      std::string tid = task_instance_id(r.produced_by);
      if (seen_tasks.insert(tid).second)
        g.nodes.push_back({tid, "task", r.seq,
                           json{{"execution_id", r.produced_by.execution_id},
                                {"study_index", r.produced_by.study_index
                                                    ? json(*r.produced_by.study_index)
                                                    : json(nullptr)},
                                {"task_id", r.produced_by.task_id}}});
      g.edges.push_back({tid, id, "produced_by"});
      for (const auto& input : r.inputs) {
        g.edges.push_back({input, tid, "consumed"});
        frontier.push_back(input);
      }
    }
    std::sort(g.nodes.begin(), g.nodes.end(), [](const auto& a, const auto& b) {
      return a.seq != b.seq ? a.seq < b.seq : a.id < b.id;
    });
    std::sort(g.edges.begin(), g.edges.end(), [](const auto& a, const auto& b) {
      return std::tie(a.from, a.to, a.relation) < std::tie(b.from, b.to, b.relation);
    });
    return g;
  }

  // --- derived views ---------------------------------------------------

  std::optional<json> pipeline_doc(const std::string& pipeline_id) {
    std::lock_guard<std::mutex> lk(mu_);
    pull_locked();
    auto it = pipelines_.find(pipeline_id);
    if (it == pipelines_.end()) return std::nullopt;
    return it->second;
  }

  std::optional<StudySet> studyset(const std::string& set_id) {
    std::lock_guard<std::mutex> lk(mu_);
    pull_locked();
    auto it = studysets_.find(set_id);
    if (it == studysets_.end()) return std::nullopt;
    return it->second;
  }

  std::optional<ExecutionPlan> plan_record(const std::string& plan_id) {
    std::lock_guard<std::mutex> lk(mu_);
    pull_locked();
    auto it = plans_.find(plan_id);
    if (it == plans_.end()) return std::nullopt;
    return plan_from_json(it->second["plan"]);
  }

  std::optional<std::string> plan_studyset(const std::string& plan_id) {
    std::lock_guard<std::mutex> lk(mu_);
    pull_locked();
    auto it = plans_.find(plan_id);
    if (it == plans_.end()) return std::nullopt;
    return it->second.value("set_id", "");
  }

  std::optional<ExecutionView> execution(const std::string& execution_id) {
    std::lock_guard<std::mutex> lk(mu_);
    pull_locked();
    auto it = executions_.find(execution_id);
    if (it == executions_.end()) return std::nullopt;
    return it->second;
  }

  std::optional<ArtifactRecord> artifact(const std::string& artifact_id) {
    std::lock_guard<std::mutex> lk(mu_);
    pull_locked();
    auto it = artifacts_.find(artifact_id);
    if (it == artifacts_.end()) return std::nullopt;
    return it->second;
  }

  uint64_t last_seq() {
    std::lock_guard<std::mutex> lk(mu_);
    pull_locked();
    return last_seq_;
  }

  static std::string task_instance_id(const ProducedBy& p) {
    std::string id = p.execution_id + "/" + p.task_id;
    if (p.study_index) id += "#" + std::to_string(*p.study_index);
    return id;
  }

 private:
  struct CacheEntry {
    uint64_t log_bytes = 0;
    std::vector<ProvenanceEvent> events;
  };
  static constexpr size_t kCacheCapacity = 64;

  ProvenanceEvent append_raw(
      const std::function<ProvenanceEvent(uint64_t seq, int64_t at)>& build) {
    std::lock_guard<std::mutex> lk(mu_);
    ProvenanceEvent final_event;
    std::string line;
    journal_.append([this](std::string_view l) { ingest(l); },
                    [&]() {
                      uint64_t seq = last_seq_ + 1;
                      int64_t at = logical_ ? static_cast<int64_t>(seq) : now_ms();
                      final_event = build(seq, at);
                      validate_event(final_event);
                      line = event_to_json(final_event).dump();
                      return line;
                    });
    apply(final_event);
    return final_event;
  }

  void pull_locked() {
    journal_.poll_new([this](std::string_view l) { ingest(l); });
  }

  void ingest(std::string_view line) {
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded())
      raise(errc::storage_error, "event log holds a malformed line");
    ProvenanceEvent e = event_from_json(j);
    validate_event(e);
    apply(e);
  }

  // Checks an event against current state. Used for both fresh records and
  // replayed lines; the log only ever holds events that passed it.
  void validate_event(const ProvenanceEvent& e) {
    if (!event_kind::known(e.kind))
      raise(errc::storage_error, "unknown event kind: " + e.kind, e.kind);
    if (e.seq <= last_seq_)
      raise(errc::storage_error,
            "sequence regression: " + std::to_string(e.seq) + " after " +
                std::to_string(last_seq_));
    if (e.kind == event_kind::task_transition) {
      const json& p = e.payload;
      if (!p.contains("task_id") || !p["task_id"].is_string() ||
          !p.contains("to_state") || !p["to_state"].is_string() ||
          !p.contains("attempt") || !p["attempt"].is_number_integer() ||
          p["attempt"].get<int64_t>() < 1)
        raise(errc::illegal_transition, "malformed TASK_TRANSITION payload");
      std::string key = chain_key(e);
      std::string from = p["from_state"].is_string() ? p["from_state"].get<std::string>()
                                                     : std::string();
      std::string to = p["to_state"].get<std::string>();
      auto it = chains_.find(key);
      std::string current = it == chains_.end() ? std::string() : it->second;
      if (from != current)
        raise(errc::illegal_transition,
              "from_state " + (from.empty() ? "null" : from) + " does not match " +
                  (current.empty() ? "no prior state" : current) + " for " + key,
              key);
      if (!job_state::legal(from, to))
        raise(errc::illegal_transition,
              "illegal transition " + (from.empty() ? "null" : from) + " -> " + to, key);
    }
    if (e.kind == event_kind::artifact_created) {
      const json& p = e.payload;
      if (!p.contains("artifact_id") || !p["artifact_id"].is_string() ||
          !p.contains("produced_by") || !p.contains("classification"))
        raise(errc::storage_error, "malformed ARTIFACT_CREATED payload");
    }
  }

  void apply(const ProvenanceEvent& e) {
    last_seq_ = e.seq;
    events_.push_back(e);
    if (e.kind == event_kind::task_transition)
      chains_[chain_key(e)] = e.payload["to_state"].get<std::string>();
    else if (e.kind == event_kind::pipeline_registered)
      pipelines_[e.payload.value("pipeline_id", "")] = e.payload["doc"];
    else if (e.kind == event_kind::studyset_created) {
      StudySet s = studyset_from_json(e.payload);
      studysets_[s.set_id] = std::move(s);
    } else if (e.kind == event_kind::plan_created) {
      std::string id = e.payload["plan"].value("plan_id", "");
      plans_[id] = e.payload;
    } else if (e.kind == event_kind::exec_started) {
      ExecutionView v;
      v.execution_id = e.execution_id;
      v.plan_id = e.payload.value("plan_id", "");
      v.backend = e.payload.value("backend", "");
      v.started_seq = e.seq;
      executions_[v.execution_id] = std::move(v);
    } else if (e.kind == event_kind::exec_ended) {
      auto it = executions_.find(e.execution_id);
      if (it != executions_.end()) {
        it->second.status = e.payload.value("status", "FAILED");
        it->second.result = e.payload;
      }
    } else if (e.kind == event_kind::artifact_created) {
      // Content addressing can legitimately emit the same id twice; the
      // first producer stays canonical.
      std::string id = e.payload["artifact_id"].get<std::string>();
      if (!artifacts_.count(id)) {
        ArtifactRecord r;
        r.artifact_id = id;
        r.classification = e.payload.value("classification", "TRANSITORY");
        r.size_bytes = e.payload.value("size_bytes", uint64_t{0});
        if (e.payload.contains("inputs"))
          r.inputs = e.payload["inputs"].get<std::vector<std::string>>();
        const json& pb = e.payload["produced_by"];
        if (pb.is_string()) {
          r.produced_by.external = true;
        } else {
          r.produced_by.execution_id = pb.value("execution_id", "");
          r.produced_by.task_id = pb.value("task_id", "");
          r.produced_by.port = pb.value("port", "");
          if (pb.contains("study_index") && pb["study_index"].is_number_integer())
            r.produced_by.study_index = pb["study_index"].get<int64_t>();
        }
        r.seq = e.seq;
        artifacts_[id] = std::move(r);
      }
    }
  }

  std::vector<ProvenanceEvent> scan_locked(const EventFilter& f) const {
    std::vector<ProvenanceEvent> out;
    for (const auto& e : events_)
      if (f.matches(e)) out.push_back(e);
    return out;
  }

  static std::string chain_key(const ProvenanceEvent& e) {
    const json& p = e.payload;
    std::string idx = p.contains("study_index") ? p["study_index"].dump() : "null";
    return e.execution_id + "\x1f" + p.value("task_id", "") + "\x1f" + idx + "\x1f" +
           std::to_string(p.value("attempt", 0));
  }

  LineJournal journal_;
  bool logical_;
  std::mutex mu_;
  uint64_t last_seq_ = 0;
  std::vector<ProvenanceEvent> events_;
  std::map<std::string, std::string> chains_;  // (exec,task,index,attempt) -> state
  std::map<std::string, json> pipelines_;
  std::map<std::string, StudySet> studysets_;
  std::map<std::string, json> plans_;
  std::map<std::string, ExecutionView> executions_;
  std::map<std::string, ArtifactRecord> artifacts_;
  std::map<std::string, CacheEntry> cache_;
  uint64_t cache_hits_ = 0;
};

}  // namespace gridpipe
