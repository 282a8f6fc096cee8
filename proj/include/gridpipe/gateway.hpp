#pragma once

// HTTP face of the service. One gateway owns a runtime (catalog, artifact
// store, provenance store, glueing service with its adaptors); several
// gateway instances may point at the same store files and stay convergent,
// because every durable fact lives in the shared journals. Request and
// response bodies are plain JSON; anything instance-specific (correlation
// id) travels in headers so bodies compare byte-for-byte across replicas.

#include <algorithm>
#include <atomic>
#include <future>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "gridpipe/anonymizer.hpp"
#include "gridpipe/catalog.hpp"
#include "gridpipe/config.hpp"
#include "gridpipe/enactor.hpp"
#include "gridpipe/glueing.hpp"
#include "gridpipe/local_adaptor.hpp"
#include "gridpipe/pipeline.hpp"
#include "gridpipe/planner.hpp"
#include "gridpipe/provenance.hpp"
#include "gridpipe/sim_adaptor.hpp"
#include "httplib.h"

namespace gridpipe {

inline int http_status_for(const std::string& code) {
  if (code == errc::unauthorized) return 401;
  if (code == errc::no_eligible_site) return 409;
  if (code == errc::unknown_pipeline || code == errc::unknown_studyset ||
      code == errc::unknown_plan || code == errc::unknown_execution ||
      code == errc::unknown_artifact || code == errc::unknown_member ||
      code == errc::unknown_backend || code == errc::unknown_handle ||
      code == errc::source_missing)
    return 404;
  if (code == errc::storage_error || code == errc::bind_error) return 500;
  return 400;
}

inline json execution_view_to_json(const ExecutionView& v) {
  return json{{"backend", v.backend},
              {"execution_id", v.execution_id},
              {"plan_id", v.plan_id},
              {"result", v.result},
              {"status", v.status}};
}

// Everything a service process needs, wired from one config. The CLI's
// local mode and the HTTP gateway share this so the two fronts cannot
// drift apart in behavior.
struct ServiceRuntime {
  ServiceConfig cfg;
  ArtifactStore store;
  ProvenanceStore prov;
  Catalog catalog;
  GlueingService glue;
  std::shared_ptr<LocalAdaptor> local;
  std::shared_ptr<SimGridAdaptor> sim;
  Enactor enactor;

  explicit ServiceRuntime(ServiceConfig c)
      : cfg(std::move(c)),
        store(cfg.artifact_dir),
        prov(cfg.event_log, cfg.logical_time),
        catalog(cfg.catalog_file),
        enactor(glue, store, prov, &catalog) {
    local = std::make_shared<LocalAdaptor>(store, cfg.local_work_root,
                                           cfg.local_max_concurrent);
    glue.register_adaptor("local", local);
    if (!cfg.grid_view_file.empty()) {
      json doc = json::parse(read_file(cfg.grid_view_file), nullptr, false);
      if (doc.is_discarded())
        raise(errc::config_error,
              "grid view file is not valid JSON: " + cfg.grid_view_file,
              cfg.grid_view_file);
      SimConfig sc;
      sc.grid = grid_from_json(doc);
      sc.actor_runtimes = cfg.sim_actor_runtimes;
      for (const auto& [task, attempt] : cfg.sim_fault_plan)
        sc.fault_plan.push_back({task, attempt});
      sim = std::make_shared<SimGridAdaptor>(store, sc);
      glue.register_adaptor("simgrid", sim);
    }
  }

  StudySet need_studyset(const std::string& id) {
    auto set = prov.studyset(id);
    if (!set) raise(errc::unknown_studyset, "no such study set: " + id, id);
    return *set;
  }

  Pipeline need_pipeline(const std::string& id) {
    auto doc = prov.pipeline_doc(id);
    if (!doc) raise(errc::unknown_pipeline, "no such pipeline: " + id, id);
    return parse_pipeline(doc->dump());
  }

  EnactmentOptions enact_options(const std::string& backend, int retry_limit) {
    EnactmentOptions opts;
    opts.retry_limit = retry_limit;
    if (backend == "simgrid" && sim) {
      auto s = sim;
      opts.idle = [s] { s->tick(1); };
    }
    return opts;
  }
};

// --- domain flows shared by the gateway and the CLI ----------------------

inline StudySet query_studyset(ServiceRuntime& rt, const std::string& query,
                               const std::string& owner) {
  StudySet found = evaluate_query(query, rt.catalog);
  return rt.prov.create_studyset(found.members, query,
                                 owner.empty() ? rt.cfg.principal : owner);
}

// The pseudonym map stays with the caller and the salt stays out of the
// event log: only the rules array is recorded.
inline StudySet anonymize_studyset(ServiceRuntime& rt, const std::string& set_id,
                                   const AnonymizationPolicy& policy) {
  StudySet set = rt.need_studyset(set_id);
  auto [fresh, tokens] = anonymize_study(set, policy, rt.catalog);
  StudySet stamped = rt.prov.create_studyset(
      fresh.members, std::nullopt,
      set.owner.empty() ? rt.cfg.principal : set.owner);
  rt.prov.record_anonymized(set.set_id, stamped.set_id,
                            policy_to_json(policy).at("rules"));
  return stamped;
}

inline ExecutionPlan make_plan(ServiceRuntime& rt, const Pipeline& p,
                               const std::string& studyset_id, const GridView& grid) {
  StudySet set;
  if (!studyset_id.empty()) set = rt.need_studyset(studyset_id);
  ExecutionPlan planned = plan(p, set, grid);
  rt.prov.record_plan(planned, set.set_id);
  return planned;
}

class ServiceGateway {
 public:
  explicit ServiceGateway(ServiceConfig cfg) : rt_(std::move(cfg)) { routes(); }

  ~ServiceGateway() { stop(); }

  // Binds and serves on a background thread; returns the bound port
  // (cfg.port, or the kernel's pick when cfg.port is 0).
  int start() {
    int port = rt_.cfg.port;
    if (port == 0) {
      port = server_.bind_to_any_port(rt_.cfg.bind_address);
      if (port <= 0)
        raise(errc::bind_error, "cannot bind " + rt_.cfg.bind_address,
              rt_.cfg.bind_address);
    } else if (!server_.bind_to_port(rt_.cfg.bind_address, port)) {
      raise(errc::bind_error,
            "cannot bind " + rt_.cfg.bind_address + ":" + std::to_string(port),
            std::to_string(port));
    }
    serve_thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port;
  }

  // Blocks until stop() or process death; the serve verb sits here.
  void wait() {
    if (serve_thread_.joinable()) serve_thread_.join();
  }

  void stop() {
    server_.stop();
    if (serve_thread_.joinable()) serve_thread_.join();
    std::vector<std::thread> pending;
    {
      std::lock_guard<std::mutex> lk(exec_mu_);
      pending.swap(exec_threads_);
    }
    for (auto& t : pending) t.join();
  }

  ProvenanceStore& provenance() { return rt_.prov; }
  Catalog& catalog() { return rt_.catalog; }
  ArtifactStore& artifacts() { return rt_.store; }
  SimGridAdaptor* sim() { return rt_.sim.get(); }

 private:
  static void send_json(httplib::Response& res, const json& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, const Error& e) {
    send_json(res,
              json{{"code", e.code()}, {"detail", e.detail()}, {"message", e.what()}},
              http_status_for(e.code()));
  }

  template <typename F>
  static void guard(httplib::Response& res, F f) {
    try {
      f();
    } catch (const Error& e) {
      send_error(res, e);
    } catch (const std::exception& e) {
      send_error(res, Error(errc::storage_error, e.what()));
    }
  }

  static json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    json doc = json::parse(req.body, nullptr, false);
    if (doc.is_discarded())
      raise(errc::syntax_error, "request body is not valid JSON");
    return doc;
  }

  void routes() {
    server_.set_pre_routing_handler([this](const httplib::Request& req,
                                           httplib::Response& res) {
      if (rt_.cfg.token.empty() ||
          req.get_header_value("Authorization") == "Bearer " + rt_.cfg.token)
        return httplib::Server::HandlerResponse::Unhandled;
      send_json(res,
                json{{"code", errc::unauthorized},
                     {"detail", ""},
                     {"message", "missing or invalid bearer token"}},
                401);
      return httplib::Server::HandlerResponse::Handled;
    });
    server_.set_post_routing_handler([this](const httplib::Request&, httplib::Response& res) {
      res.set_header("X-Correlation-Id", "c-" + zero_pad(++correlation_, 8));
    });

    server_.Get("/health", [](const httplib::Request&, httplib::Response& res) {
      send_json(res, json{{"status", "ok"}});
    });

    server_.Post("/pipelines", [this](const httplib::Request& req, httplib::Response& res) {
      guard(res, [&] {
        Pipeline p = parse_pipeline(req.body);
        ValidationReport report = validate(p);
        json body{{"pipeline_id", p.id}, {"report", report.to_json()}};
        if (!report.ok) {
          send_json(res, body, 422);
          return;
        }
        rt_.prov.register_pipeline(p.id, pipeline_to_json(p));
        send_json(res, body);
      });
    });

    server_.Post("/studysets/query", [this](const httplib::Request& req, httplib::Response& res) {
      guard(res, [&] {
        json body = parse_body(req);
        if (!body.contains("query") || !body.at("query").is_string())
          raise(errc::syntax_error, "body must carry a \"query\" string");
        StudySet stamped = query_studyset(rt_, body.at("query").get<std::string>(),
                                          body.value("owner", ""));
        send_json(res, studyset_to_json(stamped));
      });
    });

    server_.Post(R"(/studysets/([^/]+)/homogeneity)",
                 [this](const httplib::Request& req, httplib::Response& res) {
      guard(res, [&] {
        StudySet set = rt_.need_studyset(req.matches[1]);
        json body = parse_body(req);
        std::vector<std::string> fields;
        if (body.contains("fields")) {
          if (!body.at("fields").is_array())
            raise(errc::syntax_error, "\"fields\" must be an array of tag names");
          for (const auto& f : body.at("fields")) {
            if (!f.is_string())
              raise(errc::syntax_error, "\"fields\" must be an array of tag names");
            fields.push_back(f.get<std::string>());
          }
        } else {
          fields.assign(standard_tags().begin(), standard_tags().end());
        }
        send_json(res, homogeneity_to_json(check_homogeneity(set, fields, rt_.catalog)));
      });
    });

    server_.Post(R"(/studysets/([^/]+)/anonymize)",
                 [this](const httplib::Request& req, httplib::Response& res) {
      guard(res, [&] {
        AnonymizationPolicy policy = policy_from_json(parse_body(req));
        StudySet stamped = anonymize_studyset(rt_, req.matches[1], policy);
        send_json(res, studyset_to_json(stamped));
      });
    });

    server_.Post("/plans", [this](const httplib::Request& req, httplib::Response& res) {
      guard(res, [&] {
        json body = parse_body(req);
        if (!body.contains("pipeline_id") || !body.at("pipeline_id").is_string())
          raise(errc::syntax_error, "body must carry a \"pipeline_id\" string");
        Pipeline p = rt_.need_pipeline(body.at("pipeline_id").get<std::string>());
        if (!body.contains("grid"))
          raise(errc::config_error, "body must carry a \"grid\" view");
        ExecutionPlan planned = make_plan(rt_, p, body.value("studyset_id", ""),
                                          grid_from_json(body.at("grid")));
        send_json(res, plan_to_json(planned));
      });
    });

    server_.Post("/executions", [this](const httplib::Request& req, httplib::Response& res) {
      guard(res, [&] {
        json body = parse_body(req);
        if (!body.contains("plan_id") || !body.at("plan_id").is_string())
          raise(errc::syntax_error, "body must carry a \"plan_id\" string");
        std::string plan_id = body.at("plan_id").get<std::string>();
        std::string backend = body.value("backend", rt_.cfg.default_backend);
        int retries = body.value("retry_limit", rt_.cfg.retry_limit);

        auto planned = rt_.prov.plan_record(plan_id);
        if (!planned) raise(errc::unknown_plan, "no such plan: " + plan_id, plan_id);
        Pipeline p = rt_.need_pipeline(planned->pipeline_id);
        auto known = rt_.glue.backends();
        if (std::find(known.begin(), known.end(), backend) == known.end())
          raise(errc::unknown_backend, "no such backend: " + backend, backend);

        std::string exec_id = launch(std::move(p), *planned, backend, retries);
        send_json(res, json{{"execution_id", exec_id}, {"status", "RUNNING"}}, 202);
      });
    });

    server_.Get(R"(/executions/([^/]+))",
                [this](const httplib::Request& req, httplib::Response& res) {
      guard(res, [&] {
        std::string id = req.matches[1];
        auto view = rt_.prov.execution(id);
        if (!view) raise(errc::unknown_execution, "no such execution: " + id, id);
        send_json(res, execution_view_to_json(*view));
      });
    });

    server_.Get("/provenance/events",
                [this](const httplib::Request& req, httplib::Response& res) {
      guard(res, [&] {
        EventFilter f = parse_event_filter(req.get_param_value("filter"));
        json events = json::array();
        for (const auto& e : rt_.prov.cached_query(f)) events.push_back(event_to_json(e));
        send_json(res, json{{"events", events}});
      });
    });

    server_.Get(R"(/provenance/lineage/([^/]+))",
                [this](const httplib::Request& req, httplib::Response& res) {
      guard(res, [&] { send_json(res, lineage_to_json(rt_.prov.lineage(req.matches[1]))); });
    });

    server_.Get(R"(/artifacts/([^/]+))",
                [this](const httplib::Request& req, httplib::Response& res) {
      guard(res, [&] {
        res.status = 200;
        res.set_content(rt_.store.get(req.matches[1]), "application/octet-stream");
      });
    });
  }

  // Runs the enactment on its own thread; the call returns as soon as the
  // execution id exists. Failures land in the provenance store, where
  // GET /executions/{id} picks them up.
  std::string launch(Pipeline p, ExecutionPlan planned, const std::string& backend,
                     int retries) {
    struct Shared {
      std::promise<std::string> started;
      std::atomic<bool> satisfied{false};
    };
    auto shared = std::make_shared<Shared>();
    EnactmentOptions opts = rt_.enact_options(backend, retries);
    opts.on_start = [shared](const std::string& id) {
      shared->satisfied = true;
      shared->started.set_value(id);
    };
    auto future = shared->started.get_future();
    std::thread runner([this, shared, p = std::move(p), planned = std::move(planned),
                        backend, opts = std::move(opts)]() mutable {
      try {
        rt_.enactor.enact(p, planned, backend, opts);
      } catch (const Error& e) {
        if (!shared->satisfied.exchange(true))
          shared->started.set_exception(std::make_exception_ptr(e));
      } catch (...) {
        if (!shared->satisfied.exchange(true))
          shared->started.set_exception(std::current_exception());
      }
    });
    {
      std::lock_guard<std::mutex> lk(exec_mu_);
      exec_threads_.push_back(std::move(runner));
    }
    return future.get();  // rethrows when enact fails before starting
  }

  ServiceRuntime rt_;
  httplib::Server server_;
  std::thread serve_thread_;
  std::mutex exec_mu_;
  std::vector<std::thread> exec_threads_;
  std::atomic<uint64_t> correlation_{0};
};

}  // namespace gridpipe
