// Command line front for the pipeline service. Every verb runs in one of
// two modes: local (open the stores named by --config and do the work in
// process) or remote (--remote URL or PIPELINE_GATEWAY_URL: forward to a
// running gateway). With --json both modes print the exact bytes the
// gateway would put on the wire, so scripts can switch modes freely.
//
// Exit codes: 0 success, 1 domain error or failed execution, 2 usage.

#include <cstdlib>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "gridpipe/gateway.hpp"

using namespace gridpipe;

namespace {

struct RemoteReply {
  int status = 0;
  std::string body;
};

struct Cli {
  std::string config_file;
  std::string remote;
  bool json_out = false;
  std::unique_ptr<ServiceRuntime> rt;

  bool remote_mode() const { return !remote.empty(); }

  ServiceConfig config() {
    ServiceConfig cfg;
    if (!config_file.empty()) cfg = load_config(config_file);
    apply_env_overrides(cfg);
    return cfg;
  }

  ServiceRuntime& runtime() {
    if (!rt) rt = std::make_unique<ServiceRuntime>(config());
    return *rt;
  }

  httplib::Client client() {
    httplib::Client cli(remote);
    const char* token = std::getenv("PIPELINE_TOKEN");
    if (token && *token) cli.set_bearer_token_auth(token);
    cli.set_connection_timeout(10);
    cli.set_read_timeout(600);
    return cli;
  }

  RemoteReply call(const std::string& method, const std::string& path,
                   const std::string& body = "",
                   const httplib::Params& params = {}) {
    auto cli = client();
    httplib::Result res;
    if (method == "GET") {
      res = params.empty() ? cli.Get(path) : cli.Get(path, params, httplib::Headers{});
    } else {
      res = cli.Post(path, body, "application/json");
    }
    if (!res)
      raise(errc::storage_error, "cannot reach gateway at " + remote + ": " +
                                     httplib::to_string(res.error()));
    return {res->status, res->body};
  }
};

json load_json(const std::string& path) {
  json doc = json::parse(read_file(path), nullptr, false);
  if (doc.is_discarded())
    raise(errc::syntax_error, "not valid JSON: " + path, path);
  return doc;
}

void print_body(const Cli& ctx, const json& body) {
  if (ctx.json_out) {
    std::cout << body.dump() << "\n";
  }
}

// Remote replies are printed verbatim in json mode; otherwise parsed for
// the human rendering the caller does. Non-2xx replies become exit code 1.
json handle_reply(const Cli& ctx, const RemoteReply& r, int& rc) {
  if (ctx.json_out) std::cout << r.body << "\n";
  if (r.status < 200 || r.status >= 300) rc = 1;
  json body = json::parse(r.body, nullptr, false);
  if (body.is_discarded()) body = json::object();
  if (!ctx.json_out && rc == 1 && body.contains("code"))
    std::cerr << "error: " << body.value("code", "") << ": "
              << body.value("message", "") << "\n";
  return body;
}

void human_report(const std::string& pipeline_id, const json& report) {
  if (report.value("ok", false)) {
    std::cout << "pipeline " << pipeline_id << ": valid\n";
    return;
  }
  const auto& issues = report.at("issues");
  std::cout << "pipeline " << pipeline_id << ": " << issues.size() << " issue(s)\n";
  for (const auto& i : issues)
    std::cout << "  " << i.value("code", "") << " at " << i.value("locus", "") << ": "
              << i.value("message", "") << "\n";
}

void human_plan(const json& p) {
  std::cout << "plan " << p.value("plan_id", "") << " for pipeline "
            << p.value("pipeline_id", "") << "\n";
  int n = 0;
  for (const auto& stage : p.at("stages")) {
    std::cout << "  stage " << n++ << ":";
    for (const auto& t : stage)
      std::cout << " " << t.get<std::string>() << "@"
                << p.at("assignments").value(t.get<std::string>(), "?");
    std::cout << "\n";
  }
}

void human_view(const json& v) {
  std::cout << "execution " << v.value("execution_id", "") << ": "
            << v.value("status", "") << " (plan " << v.value("plan_id", "")
            << ", backend " << v.value("backend", "") << ")\n";
  if (v.at("result").is_object() && v.at("result").contains("outputs"))
    for (const auto& [port, ids] : v.at("result").at("outputs").items()) {
      std::cout << "  " << port << ":";
      for (const auto& id : ids) std::cout << " " << id.get<std::string>();
      std::cout << "\n";
    }
  if (v.at("result").is_object() && v.at("result").contains("failed_task"))
    std::cout << "  failed task: " << v.at("result").value("failed_task", "") << "\n";
}

void human_set(const json& s) {
  std::cout << "study set " << s.value("set_id", "") << " (owner "
            << s.value("owner", "") << ", " << s.at("members").size()
            << " member(s))\n";
  for (const auto& m : s.at("members")) std::cout << "  " << m.get<std::string>() << "\n";
}

void human_homogeneity(const json& h) {
  std::cout << (h.value("homogeneous", false) ? "homogeneous" : "NOT homogeneous")
            << " over";
  for (const auto& f : h.at("checked_fields")) std::cout << " " << f.get<std::string>();
  std::cout << "\n";
  for (const auto& o : h.at("offenders")) {
    std::string tag = o.value("tag", "");
    std::cout << "  " << o.value("image_id", "") << ": " << tag << " = \""
              << o.value("value", "") << "\" (majority \""
              << h.at("majority").value(tag, "") << "\")\n";
  }
}

void human_events(const json& body) {
  for (const auto& e : body.at("events")) {
    std::cout << e.value("seq", uint64_t{0}) << " " << e.value("kind", "");
    if (e.contains("execution_id")) std::cout << " " << e.value("execution_id", "");
    if (e.at("payload").contains("task_id"))
      std::cout << " " << e.at("payload").value("task_id", "");
    std::cout << "\n";
  }
}

void human_lineage(const json& g) {
  std::cout << "lineage of " << g.value("root", "") << ": " << g.at("nodes").size()
            << " node(s)\n";
  for (const auto& e : g.at("edges"))
    std::cout << "  " << e.value("from", "") << " -" << e.value("relation", "")
              << "-> " << e.value("to", "") << "\n";
}

int verb_validate(Cli& ctx, const std::string& file) {
  if (ctx.remote_mode()) {
    int rc = 0;
    json body = handle_reply(ctx, ctx.call("POST", "/pipelines", read_file(file)), rc);
    if (!ctx.json_out && body.contains("report"))
      human_report(body.value("pipeline_id", ""), body.at("report"));
    return rc;
  }
  Pipeline p = parse_pipeline(read_file(file));
  ValidationReport report = validate(p);
  json body{{"pipeline_id", p.id}, {"report", report.to_json()}};
  print_body(ctx, body);
  if (!ctx.json_out) human_report(p.id, body.at("report"));
  return report.ok ? 0 : 1;
}

int verb_plan(Cli& ctx, const std::string& file, const std::string& grid_file,
              const std::string& studyset_id) {
  if (ctx.remote_mode()) {
    // The principal body of `plan` is the plan; the registration reply is
    // only surfaced when it is the reason nothing was planned.
    RemoteReply reg = ctx.call("POST", "/pipelines", read_file(file));
    int rc = 0;
    if (reg.status != 200) {
      json body = handle_reply(ctx, reg, rc);
      if (!ctx.json_out && body.contains("report"))
        human_report(body.value("pipeline_id", ""), body.at("report"));
      return rc;
    }
    json body{{"pipeline_id", json::parse(reg.body).at("pipeline_id")},
              {"grid", load_json(grid_file)}};
    if (!studyset_id.empty()) body["studyset_id"] = studyset_id;
    json planned = handle_reply(ctx, ctx.call("POST", "/plans", body.dump()), rc);
    if (rc == 0 && !ctx.json_out) human_plan(planned);
    return rc;
  }
  Pipeline p = parse_pipeline(read_file(file));
  ValidationReport report = validate(p);
  if (!report.ok) {
    json body{{"pipeline_id", p.id}, {"report", report.to_json()}};
    print_body(ctx, body);
    if (!ctx.json_out) human_report(p.id, body.at("report"));
    return 1;
  }
  auto& rt = ctx.runtime();
  rt.prov.register_pipeline(p.id, pipeline_to_json(p));
  ExecutionPlan planned =
      make_plan(rt, p, studyset_id, grid_from_json(load_json(grid_file)));
  json body = plan_to_json(planned);
  print_body(ctx, body);
  if (!ctx.json_out) human_plan(body);
  return 0;
}

int finish_view(const Cli& ctx, const json& view) {
  if (ctx.json_out)
    std::cout << view.dump() << "\n";
  else
    human_view(view);
  return view.value("status", "") == "SUCCEEDED" ? 0 : 1;
}

int verb_run(Cli& ctx, const std::string& plan_id, const std::string& backend,
             int retries) {
  if (ctx.remote_mode()) {
    json body{{"plan_id", plan_id}};
    if (!backend.empty()) body["backend"] = backend;
    if (retries >= 0) body["retry_limit"] = retries;
    RemoteReply r = ctx.call("POST", "/executions", body.dump());
    if (r.status != 202) {
      int rc = 0;
      handle_reply(ctx, r, rc);
      return rc;
    }
    std::string exec_id = json::parse(r.body).at("execution_id");
    if (!ctx.json_out) std::cout << "execution " << exec_id << " started\n";
    for (;;) {
      RemoteReply r = ctx.call("GET", "/executions/" + exec_id);
      json view = json::parse(r.body, nullptr, false);
      if (r.status != 200 || view.is_discarded())
        raise(errc::storage_error, "lost execution " + exec_id, exec_id);
      if (view.value("status", "") != "RUNNING") return finish_view(ctx, view);
      std::this_thread::sleep_for(std::chrono::milliseconds(25));
    }
  }
  auto& rt = ctx.runtime();
  auto planned = rt.prov.plan_record(plan_id);
  if (!planned) raise(errc::unknown_plan, "no such plan: " + plan_id, plan_id);
  Pipeline p = rt.need_pipeline(planned->pipeline_id);
  std::string chosen = backend.empty() ? rt.cfg.default_backend : backend;
  auto known = rt.glue.backends();
  if (std::find(known.begin(), known.end(), chosen) == known.end())
    raise(errc::unknown_backend, "no such backend: " + chosen, chosen);
  EnactmentOptions opts =
      rt.enact_options(chosen, retries >= 0 ? retries : rt.cfg.retry_limit);
  std::string exec_id;
  opts.on_start = [&exec_id](const std::string& id) { exec_id = id; };
  try {
    rt.enactor.enact(p, *planned, chosen, opts);
  } catch (const Error& e) {
    // Post-start failures are already in the store; the view tells the tale.
    if (exec_id.empty()) throw;
    if (e.code() != errc::enactment_failed && e.code() != errc::canceled) throw;
  }
  auto view = rt.prov.execution(exec_id);
  if (!view) raise(errc::unknown_execution, "no view for " + exec_id, exec_id);
  return finish_view(ctx, execution_view_to_json(*view));
}

int verb_status(Cli& ctx, const std::string& exec_id) {
  if (ctx.remote_mode()) {
    int rc = 0;
    json view = handle_reply(ctx, ctx.call("GET", "/executions/" + exec_id), rc);
    if (rc == 0 && !ctx.json_out) human_view(view);
    return rc;
  }
  auto view = ctx.runtime().prov.execution(exec_id);
  if (!view) raise(errc::unknown_execution, "no such execution: " + exec_id, exec_id);
  json body = execution_view_to_json(*view);
  print_body(ctx, body);
  if (!ctx.json_out) human_view(body);
  return 0;
}

int verb_events(Cli& ctx, const std::string& filter) {
  if (ctx.remote_mode()) {
    int rc = 0;
    json body = handle_reply(
        ctx, ctx.call("GET", "/provenance/events", "", {{"filter", filter}}), rc);
    if (rc == 0 && !ctx.json_out) human_events(body);
    return rc;
  }
  EventFilter f = parse_event_filter(filter);
  json events = json::array();
  for (const auto& e : ctx.runtime().prov.cached_query(f))
    events.push_back(event_to_json(e));
  json body{{"events", events}};
  print_body(ctx, body);
  if (!ctx.json_out) human_events(body);
  return 0;
}

int verb_lineage(Cli& ctx, const std::string& artifact_id) {
  if (ctx.remote_mode()) {
    int rc = 0;
    json body =
        handle_reply(ctx, ctx.call("GET", "/provenance/lineage/" + artifact_id), rc);
    if (rc == 0 && !ctx.json_out) human_lineage(body);
    return rc;
  }
  json body = lineage_to_json(ctx.runtime().prov.lineage(artifact_id));
  print_body(ctx, body);
  if (!ctx.json_out) human_lineage(body);
  return 0;
}

int verb_query(Cli& ctx, const std::string& predicate, const std::string& owner) {
  if (ctx.remote_mode()) {
    json body{{"query", predicate}};
    if (!owner.empty()) body["owner"] = owner;
    int rc = 0;
    json set = handle_reply(ctx, ctx.call("POST", "/studysets/query", body.dump()), rc);
    if (rc == 0 && !ctx.json_out) human_set(set);
    return rc;
  }
  StudySet set = query_studyset(ctx.runtime(), predicate, owner);
  json body = studyset_to_json(set);
  print_body(ctx, body);
  if (!ctx.json_out) human_set(body);
  return 0;
}

int verb_check(Cli& ctx, const std::string& set_id, const std::string& fields_csv) {
  std::vector<std::string> fields;
  if (!fields_csv.empty()) fields = split(fields_csv, ',');
  if (ctx.remote_mode()) {
    json body = json::object();
    if (!fields.empty()) body["fields"] = fields;
    int rc = 0;
    json rep = handle_reply(
        ctx, ctx.call("POST", "/studysets/" + set_id + "/homogeneity", body.dump()), rc);
    if (rc == 0 && !ctx.json_out) human_homogeneity(rep);
    return rc;
  }
  auto& rt = ctx.runtime();
  StudySet set = rt.need_studyset(set_id);
  if (fields.empty()) fields.assign(standard_tags().begin(), standard_tags().end());
  json body = homogeneity_to_json(check_homogeneity(set, fields, rt.catalog));
  print_body(ctx, body);
  if (!ctx.json_out) human_homogeneity(body);
  return 0;
}

int verb_anonymize(Cli& ctx, const std::string& set_id, const std::string& policy_file) {
  if (ctx.remote_mode()) {
    int rc = 0;
    json set = handle_reply(
        ctx,
        ctx.call("POST", "/studysets/" + set_id + "/anonymize", read_file(policy_file)),
        rc);
    if (rc == 0 && !ctx.json_out) human_set(set);
    return rc;
  }
  AnonymizationPolicy policy = policy_from_json(load_json(policy_file));
  StudySet stamped = anonymize_studyset(ctx.runtime(), set_id, policy);
  json body = studyset_to_json(stamped);
  print_body(ctx, body);
  if (!ctx.json_out) human_set(body);
  return 0;
}

int verb_artifact(Cli& ctx, const std::string& artifact_id, const std::string& out) {
  std::string bytes;
  if (ctx.remote_mode()) {
    RemoteReply r = ctx.call("GET", "/artifacts/" + artifact_id);
    if (r.status != 200) {
      int rc = 0;
      handle_reply(ctx, r, rc);
      return rc;
    }
    bytes = r.body;
  } else {
    bytes = ctx.runtime().store.get(artifact_id);
  }
  if (out.empty())
    std::cout.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  else
    write_file_atomic(out, bytes);
  return 0;
}

int verb_serve(Cli& ctx) {
  ServiceGateway gw(ctx.config());
  int port = gw.start();
  std::cout << "listening on " << ctx.config().bind_address << ":" << port
            << std::endl;
  gw.wait();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Cli ctx;
  if (const char* url = std::getenv("PIPELINE_GATEWAY_URL")) ctx.remote = url;

  CLI::App app{"medical image pipeline service"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");
  app.add_option("--config", ctx.config_file, "service config file");
  app.add_option("--remote", ctx.remote,
                 "gateway base URL (default: $PIPELINE_GATEWAY_URL)");
  app.add_flag("--json", ctx.json_out, "print wire-format JSON bodies");

  std::string pipeline_file, grid_file, studyset_id, plan_id, backend, exec_id;
  std::string filter, artifact_id, out_file, predicate, set_id, fields_csv;
  std::string owner, policy_file;
  int retries = -1;

  auto* v_validate = app.add_subcommand("validate", "check a pipeline document");
  v_validate->add_option("pipeline", pipeline_file, "pipeline JSON file")->required();

  auto* v_plan = app.add_subcommand("plan", "register a pipeline and plan it");
  v_plan->add_option("pipeline", pipeline_file, "pipeline JSON file")->required();
  v_plan->add_option("--grid", grid_file, "grid view JSON file")->required();
  v_plan->add_option("--studyset", studyset_id, "study set id to fan over");

  auto* v_run = app.add_subcommand("run", "enact a recorded plan");
  v_run->add_option("plan_id", plan_id, "plan id")->required();
  v_run->add_option("--backend", backend, "execution backend");
  v_run->add_option("--retries", retries, "retry limit per task");

  auto* v_status = app.add_subcommand("status", "show an execution");
  v_status->add_option("execution_id", exec_id)->required();

  auto* v_prov = app.add_subcommand("prov", "provenance queries");
  v_prov->require_subcommand(1);
  auto* v_events = v_prov->add_subcommand("events", "list events");
  v_events->add_option("--filter", filter,
                       "key=value list: execution, task, kind, seq=lo..hi");
  auto* v_lineage = v_prov->add_subcommand("lineage", "trace an artifact");
  v_lineage->add_option("artifact_id", artifact_id)->required();

  auto* v_study = app.add_subcommand("study", "study set operations");
  v_study->require_subcommand(1);
  auto* v_query = v_study->add_subcommand("query", "select images into a study set");
  v_query->add_option("predicate", predicate, "header predicate")->required();
  v_query->add_option("--owner", owner, "study set owner");
  auto* v_check = v_study->add_subcommand("check", "homogeneity check");
  v_check->add_option("set_id", set_id)->required();
  v_check->add_option("--fields", fields_csv, "comma-separated header fields");

  auto* v_anon = app.add_subcommand("anonymize", "anonymize a study set");
  v_anon->add_option("set_id", set_id)->required();
  v_anon->add_option("--policy", policy_file, "policy JSON file")->required();

  auto* v_artifact = app.add_subcommand("artifact", "fetch artifact bytes");
  v_artifact->add_option("artifact_id", artifact_id)->required();
  v_artifact->add_option("--out", out_file, "write to file instead of stdout");

  auto* v_serve = app.add_subcommand("serve", "run the HTTP gateway");

  // Let --config/--remote/--json appear on either side of the verb.
  for (auto* sc : {v_validate, v_plan, v_run, v_status, v_prov, v_events, v_lineage,
                   v_study, v_query, v_check, v_anon, v_artifact, v_serve})
    sc->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (v_validate->parsed()) return verb_validate(ctx, pipeline_file);
    if (v_plan->parsed()) return verb_plan(ctx, pipeline_file, grid_file, studyset_id);
    if (v_run->parsed()) return verb_run(ctx, plan_id, backend, retries);
    if (v_status->parsed()) return verb_status(ctx, exec_id);
    if (v_prov->parsed() && v_events->parsed()) return verb_events(ctx, filter);
    if (v_prov->parsed() && v_lineage->parsed()) return verb_lineage(ctx, artifact_id);
    if (v_study->parsed() && v_query->parsed()) return verb_query(ctx, predicate, owner);
    if (v_study->parsed() && v_check->parsed()) return verb_check(ctx, set_id, fields_csv);
    if (v_anon->parsed()) return verb_anonymize(ctx, set_id, policy_file);
    if (v_artifact->parsed()) return verb_artifact(ctx, artifact_id, out_file);
    if (v_serve->parsed()) return verb_serve(ctx);
  } catch (const Error& e) {
    if (ctx.json_out)
      std::cout << json{{"code", e.code()}, {"detail", e.detail()}, {"message", e.what()}}
                       .dump()
                << "\n";
    else
      std::cerr << "error: " << e.code() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
