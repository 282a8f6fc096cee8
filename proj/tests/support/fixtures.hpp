#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <unistd.h>

#include "gridpipe/pipeline.hpp"

namespace fixtures {

namespace fs = std::filesystem;

// Unique scratch directory, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "gridpipe") {
    static std::atomic<unsigned> counter{0};
    path_ = fs::temp_directory_path() /
            (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

// Diamond a -> {b,c} -> d, one actor kind per role.
inline std::string diamond_doc() {
  return R"({
    "id": "diamond",
    "name": "diamond fixture",
    "actors": {
      "gen":   {"version": "1", "command": "gen.sh {param:seed} {out:o}", "inputs": [], "outputs": ["o"]},
      "filt":  {"version": "1", "command": "filt.sh {param:label} {in:x} {out:o}", "inputs": ["x"], "outputs": ["o"]},
      "merge": {"version": "1", "command": "merge.sh {in:x} {in:y} {out:o}", "inputs": ["x", "y"], "outputs": ["o"]}
    },
    "tasks": {
      "a": {"actor": "gen",   "version": "1", "params": {"seed": "s0"}},
      "b": {"actor": "filt",  "version": "1", "params": {"label": "left"}},
      "c": {"actor": "filt",  "version": "1", "params": {"label": "right"}},
      "d": {"actor": "merge", "version": "1"}
    },
    "edges": [
      {"from": "a.o", "to": "b.x"},
      {"from": "a.o", "to": "c.x"},
      {"from": "b.o", "to": "d.x"},
      {"from": "c.o", "to": "d.y"}
    ],
    "study_inputs": []
  })";
}

inline gridpipe::Pipeline diamond_pipeline() { return gridpipe::parse_pipeline(diamond_doc()); }

// Random DAG over nodes t0..t{n-1}; edges only go from lower to higher index
// so the result is acyclic by construction. Returns successor sets.
inline std::map<std::string, std::set<std::string>> random_dag(std::mt19937& rng, int n,
                                                               double edge_prob = 0.35) {
  std::map<std::string, std::set<std::string>> g;
  auto name = [](int i) { return "t" + std::to_string(i); };
  for (int i = 0; i < n; ++i) g[name(i)];
  std::bernoulli_distribution coin(edge_prob);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (coin(rng)) g[name(i)].insert(name(j));
  return g;
}

// Wraps a bare dependency graph into a Pipeline. Every task uses a variadic
// "node" actor whose input count equals its in-degree; ports are named
// in0..inK / "o". Inputs beyond the edges are literal-fed so validation holds.
inline gridpipe::Pipeline pipeline_from_graph(
    const std::map<std::string, std::set<std::string>>& succs) {
  using namespace gridpipe;
  std::map<std::string, int> indeg;
  for (const auto& [n, _] : succs) indeg[n] = 0;
  for (const auto& [_, outs] : succs)
    for (const auto& m : outs) indeg[m]++;

  Pipeline p;
  p.id = "rand";
  p.name = "random dag";

  int max_in = 0;
  for (const auto& [_, d] : indeg) max_in = std::max(max_in, d);
  for (int k = 0; k <= max_in; ++k) {
    Actor a;
    a.name = "node" + std::to_string(k);
    a.version = "1";
    std::string cmd = "node.sh";
    for (int i = 0; i < k; ++i) {
      a.input_ports.push_back("in" + std::to_string(i));
      cmd += " {in:in" + std::to_string(i) + "}";
    }
    a.output_ports.push_back("o");
    cmd += " {out:o}";
    a.command_template = cmd;
    p.actors.emplace(a.name, a);
  }

  for (const auto& [n, _] : succs) {
    Task t;
    t.id = n;
    t.actor = {"node" + std::to_string(indeg[n]), "1"};
    p.tasks.push_back(t);
  }
  std::sort(p.tasks.begin(), p.tasks.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });

  std::map<std::string, int> next_port;
  for (const auto& [from, outs] : succs)
    for (const auto& to : outs) {
      int k = next_port[to]++;
      p.edges.push_back({from, "o", to, "in" + std::to_string(k)});
    }
  std::sort(p.edges.begin(), p.edges.end());
  return p;
}

}  // namespace fixtures
