#pragma once

// Content-addressed artifact store: a directory of files named by the
// SHA-256 of their bytes. Writing the same content twice is a no-op, so
// concurrent stores over one directory need no coordination.

#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>

#include "gridpipe/digest.hpp"
#include "gridpipe/error.hpp"
#include "gridpipe/util.hpp"

namespace gridpipe {

inline std::string store_locator(const std::string& artifact_id) {
  return "store://" + artifact_id;
}

inline std::optional<std::string> parse_store_locator(std::string_view locator) {
  constexpr std::string_view prefix = "store://";
  if (locator.substr(0, prefix.size()) != prefix) return std::nullopt;
  return std::string(locator.substr(prefix.size()));
}

class ArtifactStore {
 public:
  explicit ArtifactStore(const std::filesystem::path& dir) : dir_(dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) raise(errc::storage_error, "cannot create artifact dir: " + dir_.string());
  }

  const std::filesystem::path& dir() const { return dir_; }

  std::string put(std::string_view bytes) {
    std::string id = sha256_hex(bytes);
    std::filesystem::path target = dir_ / id;
    if (!std::filesystem::exists(target))
      write_file_atomic(target, std::string(bytes));
    return id;
  }

  std::string put_file(const std::filesystem::path& src) {
    auto bytes = try_read_file(src);
    if (!bytes) raise(errc::source_missing, "no such file: " + src.string(), src.string());
    return put(*bytes);
  }

  bool has(const std::string& artifact_id) const {
    return std::filesystem::exists(dir_ / artifact_id);
  }

  std::string get(const std::string& artifact_id) const {
    auto bytes = try_read_file(dir_ / artifact_id);
    if (!bytes)
      raise(errc::unknown_artifact, "no such artifact: " + artifact_id, artifact_id);
    return *bytes;
  }

  uint64_t size_of(const std::string& artifact_id) const {
    if (!has(artifact_id))
      raise(errc::unknown_artifact, "no such artifact: " + artifact_id, artifact_id);
    return std::filesystem::file_size(dir_ / artifact_id);
  }

  std::filesystem::path path_of(const std::string& artifact_id) const {
    return dir_ / artifact_id;
  }

  std::vector<std::string> list() const {
    std::vector<std::string> out;
    for (const auto& e : std::filesystem::directory_iterator(dir_))
      if (e.is_regular_file()) out.push_back(e.path().filename().string());
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::filesystem::path dir_;
};

}  // namespace gridpipe
