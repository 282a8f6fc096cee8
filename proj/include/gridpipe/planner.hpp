#pragma once

// Global pre-enactment planning: level scheduling (stage = longest edge-path
// depth) plus greedy load-balanced placement onto eligible sites. Planning is
// a pure function of (pipeline, study set, grid view); the plan_id is a
// digest of the plan body, so equal inputs give equal plans, id included.

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "gridpipe/digest.hpp"
#include "gridpipe/catalog.hpp"
#include "gridpipe/error.hpp"
#include "gridpipe/pipeline.hpp"
#include "json.hpp"

namespace gridpipe {

struct SiteDescriptor {
  std::string site_id;
  std::set<ActorRef> installed_actors;
  int slots = 1;
  double cost_hint = 0.0;
};

struct GridView {
  std::vector<SiteDescriptor> sites;
};

inline ActorRef parse_actor_ref(const std::string& s) {
  size_t at = s.rfind('@');
  if (at == std::string::npos || at == 0 || at + 1 == s.size())
    raise(errc::config_error, "actor reference must look like name@version: " + s, s);
  return ActorRef{s.substr(0, at), s.substr(at + 1)};
}

inline GridView grid_from_json(const json& j) {
  if (!j.is_object() || !j.contains("sites") || !j["sites"].is_array())
    raise(errc::config_error, "grid view needs a sites array");
  GridView g;
  std::set<std::string> ids;
  for (const auto& sj : j["sites"]) {
    SiteDescriptor s;
    if (!sj.is_object() || !sj.contains("site_id") || !sj["site_id"].is_string())
      raise(errc::config_error, "each site needs a string site_id");
    s.site_id = sj["site_id"].get<std::string>();
    if (!ids.insert(s.site_id).second)
      raise(errc::config_error, "duplicate site_id: " + s.site_id, s.site_id);
    if (sj.contains("installed_actors"))
      for (const auto& a : sj["installed_actors"]) {
        if (!a.is_string())
          raise(errc::config_error, "installed_actors entries must be strings", s.site_id);
        s.installed_actors.insert(parse_actor_ref(a.get<std::string>()));
      }
    s.slots = sj.value("slots", 1);
    if (s.slots < 1)
      raise(errc::config_error, "slots must be >= 1 at site " + s.site_id, s.site_id);
    s.cost_hint = sj.value("cost_hint", 0.0);
    if (s.cost_hint < 0)
      raise(errc::config_error, "cost_hint must be >= 0 at site " + s.site_id, s.site_id);
    g.sites.push_back(std::move(s));
  }
  return g;
}

inline json grid_to_json(const GridView& g) {
  json sites = json::array();
  for (const auto& s : g.sites) {
    json actors = json::array();
    for (const auto& a : s.installed_actors) actors.push_back(a.str());
    sites.push_back({{"cost_hint", s.cost_hint},
                     {"installed_actors", actors},
                     {"site_id", s.site_id},
                     {"slots", s.slots}});
  }
  return json{{"sites", sites}};
}

struct ExecutionPlan {
  std::string plan_id;
  std::string pipeline_id;
  std::vector<std::vector<std::string>> stages;
  std::map<std::string, std::string> assignments;             // task -> site
  std::map<std::string, std::vector<std::string>> study_fanout;  // "task.port" -> ids
};

inline json plan_to_json(const ExecutionPlan& p) {
  return json{{"assignments", p.assignments},
              {"pipeline_id", p.pipeline_id},
              {"plan_id", p.plan_id},
              {"stages", p.stages},
              {"study_fanout", p.study_fanout}};
}

inline ExecutionPlan plan_from_json(const json& j) {
  ExecutionPlan p;
  p.plan_id = j.value("plan_id", "");
  p.pipeline_id = j.value("pipeline_id", "");
  if (j.contains("stages"))
    p.stages = j["stages"].get<std::vector<std::vector<std::string>>>();
  if (j.contains("assignments"))
    p.assignments = j["assignments"].get<std::map<std::string, std::string>>();
  if (j.contains("study_fanout"))
    p.study_fanout =
        j["study_fanout"].get<std::map<std::string, std::vector<std::string>>>();
  return p;
}

// Stage of a task = length of the longest edge-path ending at it. Stages come
// out sorted within themselves; the caller guarantees a validated DAG.
inline std::vector<std::vector<std::string>> parallel_stages(const Pipeline& p) {
  std::map<std::string, int> indeg;
  std::map<std::string, std::vector<std::string>> succs;
  for (const auto& t : p.tasks) indeg[t.id] = 0;
  for (const auto& e : p.edges) {
    succs[e.from_task].push_back(e.to_task);
    indeg[e.to_task]++;
  }
  std::vector<std::string> ready;
  for (const auto& [id, d] : indeg)
    if (d == 0) ready.push_back(id);
  std::map<std::string, int> depth;
  size_t done = 0;
  while (!ready.empty()) {
    std::string id = ready.back();
    ready.pop_back();
    ++done;
    for (const auto& next : succs[id]) {
      depth[next] = std::max(depth[next], depth[id] + 1);
      if (--indeg[next] == 0) ready.push_back(next);
    }
  }
  if (done != p.tasks.size())
    raise(errc::syntax_error, "parallel_stages called on a cyclic pipeline", p.id);

  int max_depth = -1;
  for (const auto& t : p.tasks) max_depth = std::max(max_depth, depth[t.id]);
  std::vector<std::vector<std::string>> stages(static_cast<size_t>(max_depth + 1));
  for (const auto& t : p.tasks) stages[static_cast<size_t>(depth[t.id])].push_back(t.id);
  for (auto& s : stages) std::sort(s.begin(), s.end());
  return stages;
}

inline std::vector<std::string> eligible_sites(const Task& t, const GridView& grid) {
  std::vector<std::string> out;
  for (const auto& s : grid.sites)
    if (s.installed_actors.count(t.actor)) out.push_back(s.site_id);
  std::sort(out.begin(), out.end());
  return out;
}

inline ExecutionPlan plan(const Pipeline& p, const StudySet& s, const GridView& grid) {
  if (!p.study_inputs.empty() && s.members.empty())
    raise(errc::empty_study_set,
          "pipeline declares study inputs but the study set is empty", s.set_id);

  std::map<std::string, const SiteDescriptor*> sites;
  for (const auto& sd : grid.sites) sites[sd.site_id] = &sd;

  ExecutionPlan ep;
  ep.pipeline_id = p.id;
  ep.stages = parallel_stages(p);

  for (const auto& stage : ep.stages) {
    std::map<std::string, int> stage_load;
    for (const auto& task_id : stage) {
      const Task* t = p.find_task(task_id);
      std::vector<std::string> elig = eligible_sites(*t, grid);
      if (elig.empty())
        raise(errc::no_eligible_site,
              "no site has " + t->actor.str() + " installed for task " + task_id,
              task_id);
      // Minimize projected load / slots; integer cross-multiplication keeps
      // the comparison exact. Ties: lower cost_hint, then site_id.
      std::string best;
      for (const auto& sid : elig) {
        if (best.empty()) {
          best = sid;
          continue;
        }
        const SiteDescriptor* a = sites[sid];
        const SiteDescriptor* b = sites[best];
        long la = stage_load[sid], lb = stage_load[best];
        long lhs = la * b->slots, rhs = lb * a->slots;
        if (lhs < rhs || (lhs == rhs && a->cost_hint < b->cost_hint)) best = sid;
      }
      ep.assignments[task_id] = best;
      stage_load[best]++;
    }
  }

  for (const auto& in : p.study_inputs) ep.study_fanout[in.str()] = s.members;

  json body = plan_to_json(ep);
  body.erase("plan_id");
  ep.plan_id = "plan-" + short_digest(body.dump(), 12);
  return ep;
}

}  // namespace gridpipe
