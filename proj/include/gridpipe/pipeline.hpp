#pragma once

// Abstract pipeline language: actors (executable task definitions), tasks,
// typed data ports, edges, study inputs. Parsing, structural validation and
// canonical serialization of the JSON pipeline document:
//
//   {
//     "id": "...", "name": "...",
//     "actors": { name: { "version": "...", "command": "prog {in:p} {out:q} {param:r}",
//                         "inputs": [...], "outputs": [...] } },
//     "tasks":  { id: { "actor": "...", "version": "...", "params": {...},
//                       "persist": [output ports...], "collect": [input ports...] } },
//     "edges":  [ { "from": "task.port", "to": "task.port" } ],
//     "study_inputs": [ "task.port" ]
//   }
//
// A task param whose key names one of the actor's input ports feeds that port
// with the literal's bytes; every other key is a {param:...} substitution.
// "collect" marks an input port that receives the whole fan-out of its
// producer as a list instead of being fanned itself.

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "gridpipe/error.hpp"
#include "gridpipe/util.hpp"

namespace gridpipe {

using json = nlohmann::json;

struct ActorRef {
  std::string name;
  std::string version;

  friend bool operator==(const ActorRef&, const ActorRef&) = default;
  friend bool operator<(const ActorRef& a, const ActorRef& b) {
    return std::tie(a.name, a.version) < std::tie(b.name, b.version);
  }
  std::string str() const { return name + "@" + version; }
};

struct Actor {
  std::string name;
  std::string version;
  std::string command_template;
  std::vector<std::string> input_ports;
  std::vector<std::string> output_ports;

  bool has_input(const std::string& p) const {
    return std::find(input_ports.begin(), input_ports.end(), p) != input_ports.end();
  }
  bool has_output(const std::string& p) const {
    return std::find(output_ports.begin(), output_ports.end(), p) != output_ports.end();
  }
  ActorRef ref() const { return {name, version}; }
};

struct Task {
  std::string id;
  ActorRef actor;
  std::map<std::string, std::string> param_bindings;
  std::vector<std::string> persist_ports;  // output ports retained after the run
  std::vector<std::string> collect_ports;  // input ports that gather a full fan-out

  bool collects(const std::string& port) const {
    return std::find(collect_ports.begin(), collect_ports.end(), port) != collect_ports.end();
  }
  bool persists(const std::string& port) const {
    return std::find(persist_ports.begin(), persist_ports.end(), port) != persist_ports.end();
  }
};

struct Edge {
  std::string from_task;
  std::string from_port;
  std::string to_task;
  std::string to_port;

  friend bool operator==(const Edge&, const Edge&) = default;
  friend bool operator<(const Edge& a, const Edge& b) {
    return std::tie(a.from_task, a.from_port, a.to_task, a.to_port) <
           std::tie(b.from_task, b.from_port, b.to_task, b.to_port);
  }
};

struct PortRef {
  std::string task;
  std::string port;

  friend bool operator==(const PortRef&, const PortRef&) = default;
  friend bool operator<(const PortRef& a, const PortRef& b) {
    return std::tie(a.task, a.port) < std::tie(b.task, b.port);
  }
  std::string str() const { return task + "." + port; }
};

struct Pipeline {
  std::string id;
  std::string name;
  std::map<std::string, Actor> actors;  // keyed by actor name
  std::vector<Task> tasks;              // canonical order: sorted by id
  std::vector<Edge> edges;              // canonical order: sorted
  std::vector<PortRef> study_inputs;    // canonical order: sorted

  const Task* find_task(const std::string& id_) const {
    for (const auto& t : tasks)
      if (t.id == id_) return &t;
    return nullptr;
  }
  const Actor* find_actor(const ActorRef& r) const {
    auto it = actors.find(r.name);
    if (it == actors.end() || it->second.version != r.version) return nullptr;
    return &it->second;
  }
  // Actor of a task; nullptr when the reference is dangling.
  const Actor* actor_of(const Task& t) const { return find_actor(t.actor); }

  bool is_study_fed(const std::string& task, const std::string& port) const {
    return std::find(study_inputs.begin(), study_inputs.end(), PortRef{task, port}) !=
           study_inputs.end();
  }
  std::vector<const Edge*> in_edges(const std::string& task) const {
    std::vector<const Edge*> out;
    for (const auto& e : edges)
      if (e.to_task == task) out.push_back(&e);
    return out;
  }
  std::vector<const Edge*> consumers_of(const std::string& task, const std::string& port) const {
    std::vector<const Edge*> out;
    for (const auto& e : edges)
      if (e.from_task == task && e.from_port == port) out.push_back(&e);
    return out;
  }
};

struct Issue {
  std::string code;
  std::string locus;  // task id, edge "a.p->b.q", or actor name
  std::string message;
};

struct ValidationReport {
  bool ok = true;
  std::vector<Issue> issues;

  void add(std::string code, std::string locus, std::string message) {
    ok = false;
    issues.push_back({std::move(code), std::move(locus), std::move(message)});
  }
  json to_json() const {
    json arr = json::array();
    for (const auto& i : issues)
      arr.push_back({{"code", i.code}, {"locus", i.locus}, {"message", i.message}});
    return {{"ok", ok}, {"issues", arr}};
  }
};

// Validation issue codes.
namespace issue {
inline constexpr const char* cycle = "CYCLE";
inline constexpr const char* dup_id = "DUP_ID";
inline constexpr const char* bad_actor_name = "BAD_ACTOR_NAME";
inline constexpr const char* dup_port = "DUP_PORT";
inline constexpr const char* bad_template = "BAD_TEMPLATE";
inline constexpr const char* unbound_param = "UNBOUND_PARAM";
inline constexpr const char* unknown_actor = "UNKNOWN_ACTOR";
inline constexpr const char* unknown_task = "UNKNOWN_TASK";
inline constexpr const char* unknown_port = "UNKNOWN_PORT";
inline constexpr const char* port_unfed = "PORT_UNFED";
inline constexpr const char* port_fed_twice = "PORT_FED_TWICE";
}  // namespace issue

// --------------------------------------------------------------------------
// Command template placeholders: {in:PORT}, {out:PORT}, {param:NAME}
// --------------------------------------------------------------------------

struct Placeholder {
  enum Kind { In, Out, Param } kind;
  std::string name;
};

// Scans a template and returns its placeholders, or nullopt when a brace
// group is malformed (unknown kind, empty name, unclosed brace).
inline std::optional<std::vector<Placeholder>> scan_placeholders(const std::string& tmpl) {
  std::vector<Placeholder> out;
  size_t i = 0;
  while ((i = tmpl.find('{', i)) != std::string::npos) {
    size_t close = tmpl.find('}', i);
    if (close == std::string::npos) return std::nullopt;
    std::string inner = tmpl.substr(i + 1, close - i - 1);
    size_t colon = inner.find(':');
    if (colon == std::string::npos) return std::nullopt;
    std::string kind = inner.substr(0, colon);
    std::string name = inner.substr(colon + 1);
    if (name.empty()) return std::nullopt;
    if (kind == "in")
      out.push_back({Placeholder::In, name});
    else if (kind == "out")
      out.push_back({Placeholder::Out, name});
    else if (kind == "param")
      out.push_back({Placeholder::Param, name});
    else
      return std::nullopt;
    i = close + 1;
  }
  return out;
}

namespace detail {

inline PortRef parse_port_ref(const std::string& s, const char* err_code) {
  size_t dot = s.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == s.size())
    raise(err_code, "expected \"task.port\", got \"" + s + "\"", s);
  return {s.substr(0, dot), s.substr(dot + 1)};
}

inline std::string expect_string(const json& j, const std::string& key, const std::string& ctx) {
  if (!j.contains(key) || !j[key].is_string())
    raise(errc::syntax_error, ctx + ": missing string field \"" + key + "\"", key);
  return j[key].get<std::string>();
}

inline std::vector<std::string> string_list(const json& j, const std::string& key,
                                            const std::string& ctx) {
  std::vector<std::string> out;
  if (!j.contains(key)) return out;
  if (!j[key].is_array())
    raise(errc::syntax_error, ctx + ": field \"" + key + "\" must be an array", key);
  for (const auto& v : j[key]) {
    if (!v.is_string()) raise(errc::syntax_error, ctx + ": \"" + key + "\" entries must be strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

}  // namespace detail

// --------------------------------------------------------------------------
// parse / serialize
// --------------------------------------------------------------------------

inline Pipeline parse_pipeline(const std::string& doc_text) {
  json doc;
  try {
    doc = json::parse(doc_text);
  } catch (const json::exception& e) {
    raise(errc::syntax_error, std::string("pipeline document is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) raise(errc::syntax_error, "pipeline document must be a JSON object");

  Pipeline p;
  p.id = detail::expect_string(doc, "id", "pipeline");
  p.name = doc.value("name", p.id);

  if (!doc.contains("actors") || !doc["actors"].is_object())
    raise(errc::syntax_error, "pipeline: missing \"actors\" object");
  for (const auto& [name, a] : doc["actors"].items()) {
    if (!valid_identifier(name))
      raise(errc::syntax_error, "actor name contains reserved characters: \"" + name + "\"", name);
    Actor actor;
    actor.name = name;
    actor.version = detail::expect_string(a, "version", "actor " + name);
    actor.command_template = detail::expect_string(a, "command", "actor " + name);
    actor.input_ports = detail::string_list(a, "inputs", "actor " + name);
    actor.output_ports = detail::string_list(a, "outputs", "actor " + name);
    for (const auto& port : actor.input_ports)
      if (!valid_identifier(port))
        raise(errc::syntax_error, "actor " + name + ": bad port name \"" + port + "\"", port);
    for (const auto& port : actor.output_ports)
      if (!valid_identifier(port))
        raise(errc::syntax_error, "actor " + name + ": bad port name \"" + port + "\"", port);
    p.actors.emplace(name, std::move(actor));
  }

  if (!doc.contains("tasks") || !doc["tasks"].is_object())
    raise(errc::syntax_error, "pipeline: missing \"tasks\" object");
  for (const auto& [id, t] : doc["tasks"].items()) {
    if (!valid_identifier(id))
      raise(errc::syntax_error, "task id contains reserved characters: \"" + id + "\"", id);
    Task task;
    task.id = id;
    task.actor.name = detail::expect_string(t, "actor", "task " + id);
    task.actor.version = detail::expect_string(t, "version", "task " + id);
    if (t.contains("params")) {
      if (!t["params"].is_object())
        raise(errc::syntax_error, "task " + id + ": \"params\" must be an object");
      for (const auto& [k, v] : t["params"].items()) {
        if (v.is_string())
          task.param_bindings[k] = v.get<std::string>();
        else
          task.param_bindings[k] = v.dump();  // numeric / bool literals kept verbatim
      }
    }
    task.persist_ports = detail::string_list(t, "persist", "task " + id);
    task.collect_ports = detail::string_list(t, "collect", "task " + id);

    const Actor* actor = p.find_actor(task.actor);
    if (!actor)
      raise(errc::unknown_actor_ref,
            "task " + id + " references unknown actor " + task.actor.str(), task.actor.str());
    for (const auto& port : task.persist_ports)
      if (!actor->has_output(port))
        raise(errc::unknown_port_ref,
              "task " + id + ": persist names unknown output port \"" + port + "\"", port);
    for (const auto& port : task.collect_ports)
      if (!actor->has_input(port))
        raise(errc::unknown_port_ref,
              "task " + id + ": collect names unknown input port \"" + port + "\"", port);
    p.tasks.push_back(std::move(task));
  }
  std::sort(p.tasks.begin(), p.tasks.end(),
            [](const Task& a, const Task& b) { return a.id < b.id; });

  if (doc.contains("edges")) {
    if (!doc["edges"].is_array()) raise(errc::syntax_error, "pipeline: \"edges\" must be an array");
    for (const auto& e : doc["edges"]) {
      PortRef from = detail::parse_port_ref(detail::expect_string(e, "from", "edge"),
                                            errc::syntax_error);
      PortRef to = detail::parse_port_ref(detail::expect_string(e, "to", "edge"),
                                          errc::syntax_error);
      const Task* ft = p.find_task(from.task);
      if (!ft) raise(errc::unknown_task_ref, "edge from unknown task \"" + from.task + "\"", from.task);
      const Task* tt = p.find_task(to.task);
      if (!tt) raise(errc::unknown_task_ref, "edge to unknown task \"" + to.task + "\"", to.task);
      if (!p.actor_of(*ft)->has_output(from.port))
        raise(errc::unknown_port_ref,
              "edge names unknown output port \"" + from.str() + "\"", from.str());
      if (!p.actor_of(*tt)->has_input(to.port))
        raise(errc::unknown_port_ref,
              "edge names unknown input port \"" + to.str() + "\"", to.str());
      p.edges.push_back({from.task, from.port, to.task, to.port});
    }
  }
  std::sort(p.edges.begin(), p.edges.end());

  for (const auto& s : detail::string_list(doc, "study_inputs", "pipeline")) {
    PortRef r = detail::parse_port_ref(s, errc::syntax_error);
    const Task* t = p.find_task(r.task);
    if (!t) raise(errc::unknown_task_ref, "study input on unknown task \"" + r.task + "\"", r.task);
    if (!p.actor_of(*t)->has_input(r.port))
      raise(errc::unknown_port_ref, "study input names unknown port \"" + r.str() + "\"", r.str());
    p.study_inputs.push_back(r);
  }
  std::sort(p.study_inputs.begin(), p.study_inputs.end());
  p.study_inputs.erase(std::unique(p.study_inputs.begin(), p.study_inputs.end()),
                       p.study_inputs.end());

  return p;
}

inline json pipeline_to_json(const Pipeline& p) {
  json actors = json::object();
  for (const auto& [name, a] : p.actors) {
    actors[name] = {{"version", a.version},
                    {"command", a.command_template},
                    {"inputs", a.input_ports},
                    {"outputs", a.output_ports}};
  }
  json tasks = json::object();
  for (const auto& t : p.tasks) {
    json jt = {{"actor", t.actor.name}, {"version", t.actor.version}};
    if (!t.param_bindings.empty()) jt["params"] = t.param_bindings;
    if (!t.persist_ports.empty()) jt["persist"] = t.persist_ports;
    if (!t.collect_ports.empty()) jt["collect"] = t.collect_ports;
    tasks[t.id] = jt;
  }
  json edges = json::array();
  for (const auto& e : p.edges)
    edges.push_back({{"from", e.from_task + "." + e.from_port},
                     {"to", e.to_task + "." + e.to_port}});
  json study = json::array();
  for (const auto& s : p.study_inputs) study.push_back(s.str());

  return {{"id", p.id},     {"name", p.name},          {"actors", actors},
          {"tasks", tasks}, {"edges", edges},          {"study_inputs", study}};
}

inline std::string serialize_pipeline(const Pipeline& p) { return pipeline_to_json(p).dump(); }

// --------------------------------------------------------------------------
// validate
// --------------------------------------------------------------------------

namespace detail {

// Deterministic DFS cycle search. Returns one witness cycle rotated so the
// lexicographically smallest task id comes first.
inline std::optional<std::vector<std::string>> find_cycle(
    const std::map<std::string, std::set<std::string>>& adj) {
  enum class Mark { White, Grey, Black };
  std::map<std::string, Mark> mark;
  for (const auto& [n, _] : adj) mark[n] = Mark::White;

  std::vector<std::string> stack;
  std::optional<std::vector<std::string>> witness;

  // Recursive lambda; graphs are desk-scale so stack depth is fine.
  std::function<bool(const std::string&)> visit = [&](const std::string& n) -> bool {
    mark[n] = Mark::Grey;
    stack.push_back(n);
    auto it = adj.find(n);
    if (it != adj.end()) {
      for (const auto& m : it->second) {
        if (mark[m] == Mark::Grey) {
          auto pos = std::find(stack.begin(), stack.end(), m);
          witness = std::vector<std::string>(pos, stack.end());
          return true;
        }
        if (mark[m] == Mark::White && visit(m)) return true;
      }
    }
    stack.pop_back();
    mark[n] = Mark::Black;
    return false;
  };

  for (const auto& [n, _] : adj)
    if (mark[n] == Mark::White && visit(n)) break;

  if (witness) {
    auto& c = *witness;
    auto smallest = std::min_element(c.begin(), c.end());
    std::rotate(c.begin(), smallest, c.end());
  }
  return witness;
}

}  // namespace detail

inline ValidationReport validate(const Pipeline& p) {
  ValidationReport rep;

  // Actor table invariants.
  for (const auto& [name, a] : p.actors) {
    bool name_ok = !name.empty() && name.size() <= 64 && name[0] >= 'a' && name[0] <= 'z';
    for (size_t i = 1; name_ok && i < name.size(); ++i) {
      char c = name[i];
      name_ok = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
    }
    if (!name_ok)
      rep.add(issue::bad_actor_name, name, "actor name must match [a-z][a-z0-9_-]{0,63}");

    std::set<std::string> seen;
    for (const auto& port : a.input_ports)
      if (!seen.insert(port).second)
        rep.add(issue::dup_port, name, "duplicate port \"" + port + "\"");
    for (const auto& port : a.output_ports)
      if (!seen.insert(port).second)
        rep.add(issue::dup_port, name, "duplicate port \"" + port + "\"");

    auto phs = scan_placeholders(a.command_template);
    if (!phs) {
      rep.add(issue::bad_template, name, "malformed placeholder in command template");
    } else {
      for (const auto& ph : *phs) {
        if (ph.kind == Placeholder::In && !a.has_input(ph.name))
          rep.add(issue::bad_template, name, "template reads undeclared input \"" + ph.name + "\"");
        if (ph.kind == Placeholder::Out && !a.has_output(ph.name))
          rep.add(issue::bad_template, name,
                  "template writes undeclared output \"" + ph.name + "\"");
      }
    }
  }

  // Task ids unique; actor references resolve; {param:} placeholders bound.
  std::set<std::string> task_ids;
  for (const auto& t : p.tasks) {
    if (!task_ids.insert(t.id).second)
      rep.add(issue::dup_id, t.id, "duplicate task id");
    const Actor* a = p.actor_of(t);
    if (!a) {
      rep.add(issue::unknown_actor, t.id, "task references unknown actor " + t.actor.str());
      continue;
    }
    if (auto phs = scan_placeholders(a->command_template)) {
      for (const auto& ph : *phs)
        if (ph.kind == Placeholder::Param && !t.param_bindings.count(ph.name))
          rep.add(issue::unbound_param, t.id, "template param \"" + ph.name + "\" is unbound");
    }
    for (const auto& port : t.persist_ports)
      if (!a->has_output(port))
        rep.add(issue::unknown_port, t.id, "persist names unknown output \"" + port + "\"");
    for (const auto& port : t.collect_ports)
      if (!a->has_input(port))
        rep.add(issue::unknown_port, t.id, "collect names unknown input \"" + port + "\"");
  }

  // Edge endpoints resolve and respect port direction.
  for (const auto& e : p.edges) {
    std::string locus = e.from_task + "." + e.from_port + "->" + e.to_task + "." + e.to_port;
    const Task* ft = p.find_task(e.from_task);
    const Task* tt = p.find_task(e.to_task);
    if (!ft) rep.add(issue::unknown_task, locus, "edge from unknown task \"" + e.from_task + "\"");
    if (!tt) rep.add(issue::unknown_task, locus, "edge to unknown task \"" + e.to_task + "\"");
    if (ft && p.actor_of(*ft) && !p.actor_of(*ft)->has_output(e.from_port))
      rep.add(issue::unknown_port, locus, "\"" + e.from_port + "\" is not an output port");
    if (tt && p.actor_of(*tt) && !p.actor_of(*tt)->has_input(e.to_port))
      rep.add(issue::unknown_port, locus, "\"" + e.to_port + "\" is not an input port");
  }

  // Study inputs resolve.
  for (const auto& s : p.study_inputs) {
    const Task* t = p.find_task(s.task);
    if (!t) {
      rep.add(issue::unknown_task, s.str(), "study input on unknown task");
      continue;
    }
    if (p.actor_of(*t) && !p.actor_of(*t)->has_input(s.port))
      rep.add(issue::unknown_port, s.str(), "study input is not an input port");
  }

  // Feeding: every input port of every task fed exactly once.
  for (const auto& t : p.tasks) {
    const Actor* a = p.actor_of(t);
    if (!a) continue;
    for (const auto& port : a->input_ports) {
      int sources = 0;
      for (const auto& e : p.edges)
        if (e.to_task == t.id && e.to_port == port) ++sources;
      if (p.is_study_fed(t.id, port)) ++sources;
      if (t.param_bindings.count(port)) ++sources;
      if (sources == 0)
        rep.add(issue::port_unfed, t.id, "input port \"" + port + "\" has no source");
      else if (sources > 1)
        rep.add(issue::port_fed_twice, t.id,
                "input port \"" + port + "\" fed by " + std::to_string(sources) + " sources");
    }
  }

  // Acyclicity, with a deterministic witness.
  std::map<std::string, std::set<std::string>> adj;
  for (const auto& t : p.tasks) adj[t.id];
  for (const auto& e : p.edges)
    if (adj.count(e.from_task) && adj.count(e.to_task)) adj[e.from_task].insert(e.to_task);
  if (auto cycle = detail::find_cycle(adj)) {
    std::string path = join(*cycle, " -> ") + " -> " + (*cycle)[0];
    rep.add(issue::cycle, (*cycle)[0], "cycle: " + path);
  }

  return rep;
}

inline std::set<ActorRef> required_actors(const Pipeline& p) {
  std::set<ActorRef> out;
  for (const auto& t : p.tasks) out.insert(t.actor);
  return out;
}

}  // namespace gridpipe
