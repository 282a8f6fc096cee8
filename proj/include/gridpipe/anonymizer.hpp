#pragma once

// Header anonymization. Pseudonym tokens are the first 16 lowercase hex
// characters of SHA-256(salt 0x1F tag 0x1F value); the pseudonym map is
// returned to the caller and must never reach the provenance log.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "gridpipe/catalog.hpp"
#include "gridpipe/digest.hpp"
#include "gridpipe/error.hpp"
#include "gridpipe/util.hpp"
#include "json.hpp"

namespace gridpipe {

enum class AnonAction { Remove, Replace, Pseudonymize };

struct AnonRule {
  std::string tag;
  AnonAction action = AnonAction::Remove;
  std::string value;  // Replace only
};

struct AnonymizationPolicy {
  std::vector<AnonRule> rules;
  std::string salt;
};

struct PseudonymMap {
  // (tag, original value) -> token
  std::map<std::pair<std::string, std::string>, std::string> entries;
};

inline void validate_policy(const AnonymizationPolicy& p) {
  std::set<std::string> seen;
  bool any_pseudo = false;
  for (const auto& r : p.rules) {
    if (r.tag.empty()) raise(errc::invalid_policy, "rule with empty tag");
    if (!seen.insert(r.tag).second)
      raise(errc::invalid_policy, "more than one rule for tag " + r.tag, r.tag);
    if (r.action == AnonAction::Pseudonymize) any_pseudo = true;
  }
  if (any_pseudo && p.salt.empty())
    raise(errc::invalid_policy, "PSEUDONYMIZE rules require a non-empty salt");
}

inline AnonymizationPolicy policy_from_json(const json& j) {
  if (!j.is_object()) raise(errc::invalid_policy, "policy must be a JSON object");
  AnonymizationPolicy p;
  p.salt = j.value("salt", "");
  if (j.contains("rules")) {
    if (!j["rules"].is_array())
      raise(errc::invalid_policy, "policy rules must be an array");
    for (const auto& rj : j["rules"]) {
      AnonRule r;
      if (!rj.is_object() || !rj.contains("tag") || !rj["tag"].is_string() ||
          !rj.contains("action") || !rj["action"].is_string())
        raise(errc::invalid_policy, "each rule needs string tag and action");
      r.tag = rj["tag"].get<std::string>();
      std::string action = rj["action"].get<std::string>();
      if (action == "REMOVE") {
        r.action = AnonAction::Remove;
      } else if (action == "REPLACE") {
        if (!rj.contains("value") || !rj["value"].is_string())
          raise(errc::invalid_policy, "REPLACE rule needs a string value", r.tag);
        r.action = AnonAction::Replace;
        r.value = rj["value"].get<std::string>();
      } else if (action == "PSEUDONYMIZE") {
        r.action = AnonAction::Pseudonymize;
      } else {
        raise(errc::invalid_policy, "unknown action: " + action, r.tag);
      }
      p.rules.push_back(std::move(r));
    }
  }
  validate_policy(p);
  return p;
}

inline json policy_to_json(const AnonymizationPolicy& p) {
  json rules = json::array();
  for (const auto& r : p.rules) {
    json rj{{"tag", r.tag}};
    switch (r.action) {
      case AnonAction::Remove: rj["action"] = "REMOVE"; break;
      case AnonAction::Replace: rj["action"] = "REPLACE"; rj["value"] = r.value; break;
      case AnonAction::Pseudonymize: rj["action"] = "PSEUDONYMIZE"; break;
    }
    rules.push_back(std::move(rj));
  }
  return json{{"rules", rules}, {"salt", p.salt}};
}

inline std::string pseudonym_token(const std::string& salt, const std::string& tag,
                                   const std::string& value) {
  std::string preimage = salt;
  preimage.push_back('\x1f');
  preimage += tag;
  preimage.push_back('\x1f');
  preimage += value;
  return sha256_hex(preimage).substr(0, 16);
}

// Rules act on tags present in the input; a rule for an absent tag is a
// no-op. Untouched tags pass through byte-identical.
inline std::pair<std::map<std::string, std::string>, PseudonymMap> anonymize_header(
    const std::map<std::string, std::string>& h, const AnonymizationPolicy& policy) {
  validate_policy(policy);
  std::map<std::string, std::string> out = h;
  PseudonymMap pm;
  for (const auto& r : policy.rules) {
    auto it = out.find(r.tag);
    if (it == out.end()) continue;
    switch (r.action) {
      case AnonAction::Remove:
        out.erase(it);
        break;
      case AnonAction::Replace:
        it->second = r.value;
        break;
      case AnonAction::Pseudonymize: {
        std::string token = pseudonym_token(policy.salt, r.tag, it->second);
        pm.entries[{r.tag, it->second}] = token;
        it->second = token;
        break;
      }
    }
  }
  return {std::move(out), std::move(pm)};
}

// Fresh ids are the lowest unused anon-NNNNNN names, so the outcome is a
// function of catalog state, not wall clock. Originals are never mutated.
inline std::pair<StudySet, PseudonymMap> anonymize_study(
    const StudySet& s, const AnonymizationPolicy& policy, Catalog& catalog) {
  validate_policy(policy);
  std::vector<ImageRecord> sources;
  for (const auto& id : s.members) {
    auto r = catalog.find(id);
    if (!r) raise(errc::unknown_member, "study set member not in catalog: " + id, id);
    sources.push_back(std::move(*r));
  }
  StudySet out;
  PseudonymMap pm;
  uint64_t counter = 1;
  for (const auto& src : sources) {
    auto [header, part] = anonymize_header(src.header, policy);
    for (const auto& [k, v] : part.entries) pm.entries[k] = v;
    ImageRecord copy;
    while (true) {
      copy.image_id = "anon-" + zero_pad(counter++, 6);
      if (!catalog.find(copy.image_id)) break;
    }
    copy.subject_id = src.subject_id;
    copy.header = std::move(header);
    copy.payload_ref = src.payload_ref;
    catalog.insert(copy);
    out.members.push_back(copy.image_id);
  }
  return {std::move(out), std::move(pm)};
}

}  // namespace gridpipe
