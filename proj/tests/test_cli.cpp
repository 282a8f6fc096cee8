#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>
#include <vector>

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include "catch_amalgamated.hpp"
#include "gridpipe/gateway.hpp"
#include "support/fixtures.hpp"

using namespace gridpipe;
using fixtures::TempDir;

namespace {

std::string shq(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'')
      out += "'\\''";
    else
      out += c;
  }
  out += "'";
  return out;
}

struct CliResult {
  int code = -1;
  std::string out;
};

CliResult run_cli(const std::vector<std::string>& args, const std::string& env = "") {
  std::string cmd = env.empty() ? "" : env + " ";
  cmd += shq(GRIDPIPE_BIN);
  for (const auto& a : args) cmd += " " + shq(a);
  cmd += " 2>/dev/null";
  FILE* f = ::popen(cmd.c_str(), "r");
  REQUIRE(f != nullptr);
  CliResult r;
  char buf[4096];
  size_t n;
  while ((n = ::fread(buf, 1, sizeof buf, f)) > 0) r.out.append(buf, n);
  int st = ::pclose(f);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::string sh(const TempDir& dir, const std::string& name, const std::string& body) {
  auto p = dir / name;
  write_file_atomic(p, "#!/bin/sh\n" + body + "\n");
  std::filesystem::permissions(p, std::filesystem::perms::owner_all);
  return p.string();
}

std::string write_chain(const TempDir& tmp) {
  std::string gen = sh(tmp, "gen.sh", R"(printf 'seed\n' > "$1")");
  std::string up = sh(tmp, "up.sh", R"(tr a-z A-Z < "$1" > "$2")");
  json doc{
      {"id", "chain"},
      {"name", "chain"},
      {"actors",
       {{"gen", {{"version", "1"}, {"command", gen + " {out:x}"},
                 {"inputs", json::array()}, {"outputs", {"x"}}}},
        {"up", {{"version", "1"}, {"command", up + " {in:x} {out:o}"},
                {"inputs", {"x"}}, {"outputs", {"o"}}}}}},
      {"tasks",
       {{"g", {{"actor", "gen"}, {"version", "1"}}},
        {"u", {{"actor", "up"}, {"version", "1"}, {"persist", {"o"}}}}}},
      {"edges", {{{"from", "g.x"}, {"to", "u.x"}}}},
      {"study_inputs", json::array()}};
  auto path = tmp / "chain.json";
  write_file_atomic(path, doc.dump(2));
  return path.string();
}

std::string write_grid(const TempDir& tmp) {
  json grid{{"sites",
             {{{"site_id", "S1"},
               {"installed_actors", {"gen@1", "up@1"}},
               {"slots", 4}}}}};
  auto path = tmp / "grid.json";
  write_file_atomic(path, grid.dump());
  return path.string();
}

std::string write_policy(const TempDir& tmp) {
  json policy{{"rules",
               {{{"tag", "PatientName"}, {"action", "REMOVE"}},
                {{"tag", "PatientID"}, {"action", "PSEUDONYMIZE"}}}},
              {"salt", "pepper"}};
  auto path = tmp / "policy.json";
  write_file_atomic(path, policy.dump());
  return path.string();
}

ServiceConfig store_config(const std::filesystem::path& root) {
  ServiceConfig cfg;
  cfg.bind_address = "127.0.0.1";
  cfg.port = 0;
  cfg.event_log = (root / "events.jsonl").string();
  cfg.artifact_dir = (root / "artifacts").string();
  cfg.catalog_file = (root / "catalog.jsonl").string();
  cfg.local_work_root = (root / "work").string();
  return cfg;
}

std::string write_config(const TempDir& tmp, const std::string& name,
                         const std::filesystem::path& root) {
  json doc{{"stores",
            {{"event_log", (root / "events.jsonl").string()},
             {"artifact_dir", (root / "artifacts").string()},
             {"catalog", (root / "catalog.jsonl").string()}}},
           {"execution",
            {{"backends", {{"local", {{"work_root", (root / "work").string()}}}}}}}};
  auto path = tmp / name;
  write_file_atomic(path, doc.dump());
  return path.string();
}

void seed_catalog(const std::filesystem::path& journal) {
  Catalog cat(journal);
  for (int i = 0; i < 6; ++i) {
    ImageRecord r;
    r.image_id = "img-" + zero_pad(static_cast<uint64_t>(i), 3);
    r.subject_id = "subj-" + std::to_string(i % 3);
    r.header = {{"PatientName", "Name " + std::to_string(i)},
                {"PatientID", "P" + std::to_string(i)},
                {"Age", std::to_string(60 + i)},
                {"Modality", i % 2 ? "CT" : "MR"},
                {"StudyDate", "20240101"}};
    cat.insert(r);
  }
}

}  // namespace

TEST_CASE("cli: exit code table") {
  TempDir tmp("cli");
  std::string chain = write_chain(tmp);
  std::string cfg = write_config(tmp, "config.json", tmp / "store");

  json cyclic{{"id", "cyc"},
              {"name", "cyc"},
              {"actors",
               {{"loop", {{"version", "1"}, {"command", "loop.sh {in:x} {out:o}"},
                          {"inputs", {"x"}}, {"outputs", {"o"}}}}}},
              {"tasks",
               {{"a", {{"actor", "loop"}, {"version", "1"}}},
                {"b", {{"actor", "loop"}, {"version", "1"}}}}},
              {"edges",
               {{{"from", "a.o"}, {"to", "b.x"}}, {{"from", "b.o"}, {"to", "a.x"}}}},
              {"study_inputs", json::array()}};
  auto cyc_path = tmp / "cyc.json";
  write_file_atomic(cyc_path, cyclic.dump());

  struct Row {
    std::vector<std::string> args;
    int expect;
  };
  const std::vector<Row> table = {
      {{"validate", chain}, 0},
      {{"validate", cyc_path.string()}, 1},
      {{"validate", (tmp / "absent.json").string()}, 1},
      {{"frobnicate"}, 2},
      {{"plan", chain}, 2},                       // --grid is required
      {{"run"}, 2},                               // plan id is required
      {{"--config", cfg, "status", "exec-000009"}, 1},
      {{"--config", cfg, "prov", "events", "--filter", "kind=NOPE"}, 1},
      {{"--config", cfg, "artifact", "deadbeef"}, 1},
      {{"--config", cfg, "study", "query", "Age >>= 5"}, 1},
      {{"--config", cfg, "study", "check", "set-000042"}, 1},
  };
  for (const auto& row : table) {
    CAPTURE(row.args);
    CHECK(run_cli(row.args).code == row.expect);
  }

  SECTION("json mode puts the error body on stdout") {
    CliResult r = run_cli({"--config", cfg, "--json", "status", "exec-000009"});
    CHECK(r.code == 1);
    json body = json::parse(r.out);
    CHECK(body.at("code") == "UNKNOWN_EXECUTION");
    CHECK(body.at("detail") == "exec-000009");
  }
}

TEST_CASE("cli: local and remote modes emit identical bytes") {
  TempDir tmp("cli");
  std::string chain = write_chain(tmp);
  std::string grid = write_grid(tmp);
  std::string policy = write_policy(tmp);

  auto rootL = tmp / "envL";
  auto rootR = tmp / "envR";
  std::string cfgL = write_config(tmp, "configL.json", rootL);
  seed_catalog(rootL / "catalog.jsonl");
  seed_catalog(rootR / "catalog.jsonl");

  ServiceGateway gw(store_config(rootR));
  std::string url = "http://127.0.0.1:" + std::to_string(gw.start());

  // Runs one verb through fresh-process local mode and through the gateway;
  // both event streams advance in lockstep, so bodies must match exactly.
  auto both = [&](std::vector<std::string> args, int expect = 0) {
    std::vector<std::string> local = {"--config", cfgL, "--json"};
    local.insert(local.end(), args.begin(), args.end());
    std::vector<std::string> remote = {"--remote", url, "--json"};
    remote.insert(remote.end(), args.begin(), args.end());
    CliResult l = run_cli(local);
    CliResult r = run_cli(remote);
    CAPTURE(args);
    CHECK(l.code == expect);
    CHECK(r.code == expect);
    CHECK(l.out == r.out);
    return l.out;
  };

  json set = json::parse(both({"study", "query", "Modality = MR"}));
  std::string set_id = set.at("set_id");
  CHECK(set.at("members") == json{"img-000", "img-002", "img-004"});

  both({"study", "check", set_id, "--fields", "Modality,StudyDate"});

  json anon = json::parse(both({"anonymize", set_id, "--policy", policy}));
  CHECK(anon.at("members").size() == 3);
  CHECK(anon.at("members")[0] == "anon-000001");

  json planned = json::parse(both({"plan", chain, "--grid", grid}));
  std::string plan_id = planned.at("plan_id");

  json view = json::parse(both({"run", plan_id}));
  REQUIRE(view.at("status") == "SUCCEEDED");
  std::string exec_id = view.at("execution_id");
  std::string artifact = view.at("result").at("outputs").at("u.o")[0];

  both({"status", exec_id});
  both({"prov", "lineage", artifact});
  std::string bytes = both({"artifact", artifact});
  CHECK(bytes == "SEED\n");

  // Full event stream comparison: every id, payload, and seq in lockstep.
  std::string all_events = both({"prov", "events"});
  CHECK(json::parse(all_events).at("events").size() >= 10);

  gw.stop();
}

TEST_CASE("cli: serve fronts a config-described store with auth") {
  TempDir tmp("cli");
  std::string chain = write_chain(tmp);
  auto root = tmp / "envS";
  json doc{{"port", 0},
           {"token", "hush"},
           {"stores",
            {{"event_log", (root / "events.jsonl").string()},
             {"artifact_dir", (root / "artifacts").string()},
             {"catalog", (root / "catalog.jsonl").string()}}},
           {"execution",
            {{"backends", {{"local", {{"work_root", (root / "work").string()}}}}}}}};
  auto cfg_path = tmp / "configS.json";
  write_file_atomic(cfg_path, doc.dump());

  int fds[2];
  REQUIRE(::pipe(fds) == 0);
  pid_t pid = ::fork();
  REQUIRE(pid >= 0);
  if (pid == 0) {
    ::dup2(fds[1], STDOUT_FILENO);
    ::close(fds[0]);
    ::close(fds[1]);
    ::execl(GRIDPIPE_BIN, "gridpipe", "serve", "--config", cfg_path.string().c_str(),
            (char*)nullptr);
    ::_exit(127);
  }
  ::close(fds[1]);

  // The serve verb announces its bound address on the first stdout line.
  std::string line;
  ::fcntl(fds[0], F_SETFL, O_NONBLOCK);
  for (int spins = 0; spins < 500 && line.find('\n') == std::string::npos; ++spins) {
    char c;
    ssize_t n = ::read(fds[0], &c, 1);
    if (n == 1)
      line += c;
    else
      ::usleep(10000);
  }
  ::close(fds[0]);
  REQUIRE(line.rfind("listening on 127.0.0.1:", 0) == 0);
  std::string url = "http://" + line.substr(std::strlen("listening on "),
                                            line.size() - std::strlen("listening on ") - 1);

  CliResult denied = run_cli({"--remote", url, "--json", "validate", chain});
  CHECK(denied.code == 1);
  CHECK(json::parse(denied.out).at("code") == "UNAUTHORIZED");

  CliResult ok = run_cli({"--remote", url, "--json", "validate", chain},
                         "PIPELINE_TOKEN=hush");
  CHECK(ok.code == 0);
  CHECK(json::parse(ok.out).at("report").at("ok") == true);

  ::kill(pid, SIGTERM);
  int st = 0;
  ::waitpid(pid, &st, 0);

  // The journal outlives the process: the registration survives a SIGTERM.
  ProvenanceStore prov(root / "events.jsonl");
  CHECK(prov.pipeline_doc("chain").has_value());
}
