#pragma once

// Service configuration. One JSON document selects the bind point, the
// backing store files, and the execution backends; every field has a
// default so an empty object is a valid config. PIPELINE_TOKEN,
// PIPELINE_BIND and PIPELINE_PORT override the file at startup.

#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "gridpipe/error.hpp"
#include "gridpipe/util.hpp"
#include "json.hpp"

namespace gridpipe {

struct ServiceConfig {
  std::string bind_address = "127.0.0.1";
  int port = 8080;  // 0 picks an ephemeral port
  std::string token;  // empty disables bearer auth
  std::string principal = "operator";
  bool logical_time = true;

  std::string event_log = "data/events.jsonl";
  std::string artifact_dir = "data/artifacts";
  std::string catalog_file = "data/catalog.jsonl";

  std::string default_backend = "local";
  int retry_limit = 0;
  int local_max_concurrent = 4;
  std::string local_work_root = "data/work";
  // The simulated backend is registered only when a grid view is given.
  std::string grid_view_file;
  std::map<std::string, int> sim_actor_runtimes;
  std::vector<std::pair<std::string, int>> sim_fault_plan;  // task, attempt (0 = all)
};

namespace detail {

inline void cfg_str(const nlohmann::json& j, const char* key, std::string& out,
                    const std::string& ctx) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_string())
    raise(errc::config_error, ctx + "." + key + " must be a string", key);
  out = j.at(key).get<std::string>();
}

inline void cfg_int(const nlohmann::json& j, const char* key, int& out,
                    const std::string& ctx, int min_value) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_number_integer())
    raise(errc::config_error, ctx + "." + key + " must be an integer", key);
  int v = j.at(key).get<int>();
  if (v < min_value)
    raise(errc::config_error,
          ctx + "." + key + " must be at least " + std::to_string(min_value), key);
  out = v;
}

inline void cfg_bool(const nlohmann::json& j, const char* key, bool& out,
                     const std::string& ctx) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_boolean())
    raise(errc::config_error, ctx + "." + key + " must be a boolean", key);
  out = j.at(key).get<bool>();
}

}  // namespace detail

inline ServiceConfig config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object())
    raise(errc::config_error, "config must be a JSON object");
  ServiceConfig c;
  detail::cfg_str(doc, "bind_address", c.bind_address, "config");
  detail::cfg_int(doc, "port", c.port, "config", 0);
  if (c.port > 65535) raise(errc::config_error, "config.port out of range", "port");
  detail::cfg_str(doc, "token", c.token, "config");
  detail::cfg_str(doc, "principal", c.principal, "config");
  detail::cfg_bool(doc, "logical_time", c.logical_time, "config");

  if (doc.contains("stores")) {
    const auto& s = doc.at("stores");
    if (!s.is_object()) raise(errc::config_error, "config.stores must be an object", "stores");
    detail::cfg_str(s, "event_log", c.event_log, "stores");
    detail::cfg_str(s, "artifact_dir", c.artifact_dir, "stores");
    detail::cfg_str(s, "catalog", c.catalog_file, "stores");
  }

  if (doc.contains("execution")) {
    const auto& e = doc.at("execution");
    if (!e.is_object())
      raise(errc::config_error, "config.execution must be an object", "execution");
    detail::cfg_str(e, "default_backend", c.default_backend, "execution");
    detail::cfg_int(e, "retry_limit", c.retry_limit, "execution", 0);
    if (e.contains("backends")) {
      const auto& b = e.at("backends");
      if (!b.is_object())
        raise(errc::config_error, "execution.backends must be an object", "backends");
      if (b.contains("local")) {
        const auto& l = b.at("local");
        detail::cfg_int(l, "max_concurrent", c.local_max_concurrent, "local", 1);
        detail::cfg_str(l, "work_root", c.local_work_root, "local");
      }
      if (b.contains("simgrid")) {
        const auto& s = b.at("simgrid");
        detail::cfg_str(s, "grid_view_file", c.grid_view_file, "simgrid");
        if (s.contains("actor_runtimes")) {
          if (!s.at("actor_runtimes").is_object())
            raise(errc::config_error, "simgrid.actor_runtimes must be an object",
                  "actor_runtimes");
          for (const auto& [actor, ticks] : s.at("actor_runtimes").items()) {
            if (!ticks.is_number_integer() || ticks.get<int>() < 1)
              raise(errc::config_error,
                    "simgrid.actor_runtimes." + actor + " must be a positive integer",
                    actor);
            c.sim_actor_runtimes[actor] = ticks.get<int>();
          }
        }
        if (s.contains("fault_plan")) {
          if (!s.at("fault_plan").is_array())
            raise(errc::config_error, "simgrid.fault_plan must be an array", "fault_plan");
          for (const auto& f : s.at("fault_plan")) {
            if (!f.is_array() || f.size() != 2 || !f[0].is_string() ||
                !f[1].is_number_integer() || f[1].get<int>() < 0)
              raise(errc::config_error,
                    "simgrid.fault_plan entries must be [task, attempt] pairs",
                    "fault_plan");
            c.sim_fault_plan.emplace_back(f[0].get<std::string>(), f[1].get<int>());
          }
        }
      }
    }
  }
  return c;
}

inline ServiceConfig load_config(const std::filesystem::path& path) {
  nlohmann::json doc = nlohmann::json::parse(read_file(path), nullptr, false);
  if (doc.is_discarded())
    raise(errc::config_error, "config file is not valid JSON: " + path.string(),
          path.string());
  return config_from_json(doc);
}

inline void apply_env_overrides(ServiceConfig& c) {
  if (const char* v = std::getenv("PIPELINE_TOKEN")) c.token = v;
  if (const char* v = std::getenv("PIPELINE_BIND")) c.bind_address = v;
  if (const char* v = std::getenv("PIPELINE_PORT")) {
    std::string s = v;
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
      raise(errc::config_error, "PIPELINE_PORT must be a number", s);
    c.port = std::stoi(s);
  }
}

}  // namespace gridpipe
