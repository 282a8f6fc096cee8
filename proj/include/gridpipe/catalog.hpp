#pragma once

// Image metadata catalog and the predicate language over it. The catalog is
// one JSON-lines file (one ImageRecord per line) loaded fully into memory;
// appends go through LineJournal so independent processes converge.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "gridpipe/error.hpp"
#include "gridpipe/linefile.hpp"
#include "json.hpp"

namespace gridpipe {

using json = nlohmann::json;

struct ImageRecord {
  std::string image_id;
  std::string subject_id;
  std::map<std::string, std::string> header;
  std::string payload_ref;
};

// Tags every catalog understands even before a record mentions them.
inline const std::set<std::string>& standard_tags() {
  static const std::set<std::string> tags = {"Age", "Modality", "PatientID",
                                             "PatientName", "StudyDate"};
  return tags;
}

// Age and StudyDate compare numerically, everything else lexically.
inline bool numeric_tag(std::string_view tag) {
  return tag == "Age" || tag == "StudyDate";
}

inline std::optional<long long> parse_number(std::string_view s) {
  if (s.empty()) return std::nullopt;
  size_t i = s[0] == '-' ? 1 : 0;
  if (i == s.size()) return std::nullopt;
  long long v = 0;
  for (; i < s.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) return std::nullopt;
    if (v > 922337203685477580LL) return std::nullopt;
    v = v * 10 + (s[i] - '0');
  }
  return s[0] == '-' ? -v : v;
}

inline json record_to_json(const ImageRecord& r) {
  json h = json::object();
  for (const auto& [k, v] : r.header) h[k] = v;
  return json{{"header", h},
              {"image_id", r.image_id},
              {"payload_ref", r.payload_ref},
              {"subject_id", r.subject_id}};
}

inline ImageRecord record_from_json(const json& j) {
  if (!j.is_object() || !j.contains("image_id") || !j["image_id"].is_string())
    raise(errc::catalog_error, "image record needs a string image_id");
  ImageRecord r;
  r.image_id = j["image_id"].get<std::string>();
  if (r.image_id.empty())
    raise(errc::catalog_error, "image record needs a non-empty image_id");
  if (j.contains("subject_id")) {
    if (!j["subject_id"].is_string())
      raise(errc::catalog_error, "subject_id must be a string", r.image_id);
    r.subject_id = j["subject_id"].get<std::string>();
  }
  if (j.contains("payload_ref")) {
    if (!j["payload_ref"].is_string())
      raise(errc::catalog_error, "payload_ref must be a string", r.image_id);
    r.payload_ref = j["payload_ref"].get<std::string>();
  }
  if (j.contains("header")) {
    if (!j["header"].is_object())
      raise(errc::catalog_error, "header must be an object", r.image_id);
    for (const auto& [k, v] : j["header"].items()) {
      if (!v.is_string())
        raise(errc::catalog_error, "header value for " + k + " must be a string",
              r.image_id);
      r.header[k] = v.get<std::string>();
    }
  }
  if (auto it = r.header.find("Age"); it != r.header.end()) {
    auto n = parse_number(it->second);
    if (!n || *n < 0)
      raise(errc::catalog_error, "Age must be a non-negative integer", r.image_id);
  }
  return r;
}

class Catalog {
 public:
  explicit Catalog(const std::filesystem::path& file) : journal_(file) { sync(); }

  // Picks up records appended by other processes since the last call.
  void sync() {
    std::lock_guard<std::mutex> lk(mu_);
    pull_locked();
  }

  size_t size() {
    std::lock_guard<std::mutex> lk(mu_);
    pull_locked();
    return records_.size();
  }

  std::vector<ImageRecord> snapshot() {
    std::lock_guard<std::mutex> lk(mu_);
    pull_locked();
    return records_;
  }

  std::optional<ImageRecord> find(const std::string& image_id) {
    std::lock_guard<std::mutex> lk(mu_);
    pull_locked();
    auto it = index_.find(image_id);
    if (it == index_.end()) return std::nullopt;
    return records_[it->second];
  }

  void insert(const ImageRecord& r) {
    record_from_json(record_to_json(r));  // re-run invariant checks
    std::lock_guard<std::mutex> lk(mu_);
    journal_.append([this](std::string_view line) { ingest(line); },
                    [&]() {
                      if (index_.count(r.image_id))
                        raise(errc::catalog_error,
                              "duplicate image_id: " + r.image_id, r.image_id);
                      return record_to_json(r).dump();
                    });
    records_.push_back(r);
    index_[r.image_id] = records_.size() - 1;
  }

  // Standard tags plus every tag observed on any record.
  std::set<std::string> schema() {
    std::lock_guard<std::mutex> lk(mu_);
    pull_locked();
    std::set<std::string> out = standard_tags();
    for (const auto& r : records_)
      for (const auto& [k, v] : r.header) out.insert(k);
    return out;
  }

 private:
  void pull_locked() {
    journal_.poll_new([this](std::string_view line) { ingest(line); });
  }

  void ingest(std::string_view line) {
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded())
      raise(errc::catalog_error, "catalog file holds a malformed line");
    ImageRecord r = record_from_json(j);
    if (index_.count(r.image_id))
      raise(errc::catalog_error, "duplicate image_id: " + r.image_id, r.image_id);
    records_.push_back(std::move(r));
    index_[records_.back().image_id] = records_.size() - 1;
  }

  LineJournal journal_;
  std::mutex mu_;
  std::vector<ImageRecord> records_;
  std::map<std::string, size_t> index_;
};

// --- predicate language -----------------------------------------------------
// expr := and ('OR' and)* ; and := unary ('AND' unary)* ;
// unary := 'NOT' unary | '(' expr ')' | tag op value ;
// op := '=' | '!=' | '>=' | '<=' ; value := bare word | quoted string.

struct Predicate {
  enum class Kind { Cmp, And, Or, Not };
  enum class Op { Eq, Ne, Ge, Le };

  Kind kind = Kind::Cmp;
  Op op = Op::Eq;
  std::string tag, literal;                  // Cmp
  std::shared_ptr<const Predicate> a, b;     // Not uses a; And/Or use both

  static Predicate cmp(std::string tag, Op op, std::string literal) {
    Predicate p;
    p.kind = Kind::Cmp;
    p.tag = std::move(tag);
    p.op = op;
    p.literal = std::move(literal);
    return p;
  }
  static Predicate combine(Kind k, Predicate lhs, Predicate rhs) {
    Predicate p;
    p.kind = k;
    p.a = std::make_shared<Predicate>(std::move(lhs));
    p.b = std::make_shared<Predicate>(std::move(rhs));
    return p;
  }
  static Predicate negate(Predicate inner) {
    Predicate p;
    p.kind = Kind::Not;
    p.a = std::make_shared<Predicate>(std::move(inner));
    return p;
  }
};

namespace detail {

struct PredToken {
  enum Type { LParen, RParen, Op, Word, Str, End } type;
  std::string text;
  size_t pos;
};

inline std::vector<PredToken> pred_lex(std::string_view s) {
  std::vector<PredToken> out;
  size_t i = 0;
  auto fail = [&](const std::string& why) {
    raise(errc::predicate_syntax, why + " at offset " + std::to_string(i));
  };
  while (i < s.size()) {
    char c = s[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    if (c == '(') {
      out.push_back({PredToken::LParen, "(", i++});
    } else if (c == ')') {
      out.push_back({PredToken::RParen, ")", i++});
    } else if (c == '=') {
      out.push_back({PredToken::Op, "=", i++});
    } else if (c == '!' || c == '>' || c == '<') {
      if (i + 1 >= s.size() || s[i + 1] != '=')
        fail(std::string("expected '=' after '") + c + "'");
      out.push_back({PredToken::Op, std::string(1, c) + "=", i});
      i += 2;
    } else if (c == '\'' || c == '"') {
      size_t end = s.find(c, i + 1);
      if (end == std::string_view::npos) fail("unterminated string");
      out.push_back({PredToken::Str, std::string(s.substr(i + 1, end - i - 1)), i});
      i = end + 1;
    } else {
      size_t start = i;
      while (i < s.size()) {
        char w = s[i];
        if (std::isspace(static_cast<unsigned char>(w)) || w == '(' || w == ')' ||
            w == '=' || w == '!' || w == '>' || w == '<' || w == '\'' || w == '"')
          break;
        ++i;
      }
      out.push_back({PredToken::Word, std::string(s.substr(start, i - start)), start});
    }
  }
  out.push_back({PredToken::End, "", s.size()});
  return out;
}

class PredParser {
 public:
  explicit PredParser(std::string_view text) : toks_(pred_lex(text)) {}

  Predicate parse() {
    Predicate p = expr();
    if (peek().type != PredToken::End)
      fail("trailing input after expression");
    return p;
  }

 private:
  const PredToken& peek() const { return toks_[at_]; }
  PredToken take() { return toks_[at_++]; }
  [[noreturn]] void fail(const std::string& why) const {
    raise(errc::predicate_syntax,
          why + " at offset " + std::to_string(peek().pos));
  }
  bool keyword(const char* kw) const {
    return peek().type == PredToken::Word && peek().text == kw;
  }

  Predicate expr() {
    Predicate lhs = conj();
    while (keyword("OR")) {
      take();
      lhs = Predicate::combine(Predicate::Kind::Or, std::move(lhs), conj());
    }
    return lhs;
  }

  Predicate conj() {
    Predicate lhs = unary();
    while (keyword("AND")) {
      take();
      lhs = Predicate::combine(Predicate::Kind::And, std::move(lhs), unary());
    }
    return lhs;
  }

  Predicate unary() {
    if (keyword("NOT")) {
      take();
      return Predicate::negate(unary());
    }
    if (peek().type == PredToken::LParen) {
      take();
      Predicate inner = expr();
      if (peek().type != PredToken::RParen) fail("expected ')'");
      take();
      return inner;
    }
    return comparison();
  }

  Predicate comparison() {
    if (peek().type != PredToken::Word) fail("expected a tag name");
    if (keyword("AND") || keyword("OR")) fail("expected a tag name, got keyword");
    std::string tag = take().text;
    if (peek().type != PredToken::Op) fail("expected one of = != >= <=");
    std::string op = take().text;
    if (peek().type != PredToken::Word && peek().type != PredToken::Str)
      fail("expected a comparison value");
    std::string value = take().text;
    Predicate::Op o = op == "=" ? Predicate::Op::Eq
                    : op == "!=" ? Predicate::Op::Ne
                    : op == ">=" ? Predicate::Op::Ge
                                 : Predicate::Op::Le;
    return Predicate::cmp(std::move(tag), o, std::move(value));
  }

  std::vector<PredToken> toks_;
  size_t at_ = 0;
};

}  // namespace detail

inline Predicate parse_predicate(std::string_view text) {
  return detail::PredParser(text).parse();
}

inline void referenced_tags(const Predicate& p, std::set<std::string>& out) {
  switch (p.kind) {
    case Predicate::Kind::Cmp:
      out.insert(p.tag);
      break;
    case Predicate::Kind::Not:
      referenced_tags(*p.a, out);
      break;
    default:
      referenced_tags(*p.a, out);
      referenced_tags(*p.b, out);
  }
}

// A comparison on a tag the record lacks is false, whatever the operator.
// Numeric tags with an unparsable side are likewise false.
inline bool eval_predicate(const Predicate& p,
                           const std::map<std::string, std::string>& header) {
  switch (p.kind) {
    case Predicate::Kind::And:
      return eval_predicate(*p.a, header) && eval_predicate(*p.b, header);
    case Predicate::Kind::Or:
      return eval_predicate(*p.a, header) || eval_predicate(*p.b, header);
    case Predicate::Kind::Not:
      return !eval_predicate(*p.a, header);
    case Predicate::Kind::Cmp:
      break;
  }
  auto it = header.find(p.tag);
  if (it == header.end()) return false;
  int rel;  // -1, 0, 1
  if (numeric_tag(p.tag)) {
    auto lhs = parse_number(it->second), rhs = parse_number(p.literal);
    if (!lhs || !rhs) return false;
    rel = *lhs < *rhs ? -1 : *lhs > *rhs ? 1 : 0;
  } else {
    int c = it->second.compare(p.literal);
    rel = c < 0 ? -1 : c > 0 ? 1 : 0;
  }
  switch (p.op) {
    case Predicate::Op::Eq: return rel == 0;
    case Predicate::Op::Ne: return rel != 0;
    case Predicate::Op::Ge: return rel >= 0;
    case Predicate::Op::Le: return rel <= 0;
  }
  return false;
}

// --- study sets --------------------------------------------------------------

struct StudySet {
  std::string set_id;
  std::string owner;
  std::vector<std::string> members;  // image ids, query results sorted by id
  int64_t created_at = 0;
  std::optional<std::string> defining_query;
};

inline json studyset_to_json(const StudySet& s) {
  return json{{"created_at", s.created_at},
              {"defining_query",
               s.defining_query ? json(*s.defining_query) : json(nullptr)},
              {"members", s.members},
              {"owner", s.owner},
              {"set_id", s.set_id}};
}

inline StudySet studyset_from_json(const json& j) {
  StudySet s;
  s.set_id = j.value("set_id", "");
  s.owner = j.value("owner", "");
  s.created_at = j.value("created_at", int64_t{0});
  if (j.contains("members"))
    s.members = j["members"].get<std::vector<std::string>>();
  if (j.contains("defining_query") && j["defining_query"].is_string())
    s.defining_query = j["defining_query"].get<std::string>();
  return s;
}

// Members are exactly the matching records, sorted by image_id. The set_id,
// owner and created_at are stamped later by the provenance store.
inline StudySet evaluate_query(const std::string& predicate_text, Catalog& catalog) {
  Predicate p = parse_predicate(predicate_text);
  std::set<std::string> tags;
  referenced_tags(p, tags);
  std::set<std::string> schema = catalog.schema();
  for (const auto& t : tags)
    if (!schema.count(t))
      raise(errc::unknown_tag, "predicate names tag absent from catalog schema: " + t, t);
  StudySet s;
  s.defining_query = predicate_text;
  for (const auto& r : catalog.snapshot())
    if (eval_predicate(p, r.header)) s.members.push_back(r.image_id);
  std::sort(s.members.begin(), s.members.end());
  return s;
}

struct HomogeneityOffender {
  std::string image_id;
  std::string tag;
  std::string value;
};

struct HomogeneityReport {
  bool homogeneous = true;
  std::vector<std::string> checked_fields;
  std::map<std::string, std::string> majority;  // field -> majority value
  std::vector<HomogeneityOffender> offenders;
};

inline json homogeneity_to_json(const HomogeneityReport& r) {
  json off = json::array();
  for (const auto& o : r.offenders)
    off.push_back({{"image_id", o.image_id}, {"tag", o.tag}, {"value", o.value}});
  return json{{"checked_fields", r.checked_fields},
              {"homogeneous", r.homogeneous},
              {"majority", r.majority},
              {"offenders", off}};
}

// A member missing a checked field counts as holding the empty value. Ties
// between equally common values go to the value held by the lowest image_id.
inline HomogeneityReport check_homogeneity(const StudySet& s,
                                           const std::vector<std::string>& fields,
                                           Catalog& catalog) {
  std::map<std::string, ImageRecord> resolved;
  for (const auto& id : s.members) {
    auto r = catalog.find(id);
    if (!r) raise(errc::unknown_member, "study set member not in catalog: " + id, id);
    resolved.emplace(id, std::move(*r));
  }
  std::vector<std::string> sorted_ids(s.members.begin(), s.members.end());
  std::sort(sorted_ids.begin(), sorted_ids.end());

  HomogeneityReport rep;
  rep.checked_fields = fields;
  for (const auto& field : fields) {
    auto value_of = [&](const std::string& id) -> std::string {
      const auto& h = resolved.at(id).header;
      auto it = h.find(field);
      return it == h.end() ? std::string() : it->second;
    };
    std::map<std::string, int> counts;
    for (const auto& id : s.members) counts[value_of(id)]++;
    if (counts.empty()) continue;
    int best = 0;
    for (const auto& [v, n] : counts) best = std::max(best, n);
    std::string majority;
    for (const auto& id : sorted_ids) {
      if (counts.at(value_of(id)) == best) {
        majority = value_of(id);
        break;
      }
    }
    rep.majority[field] = majority;
    for (const auto& id : s.members)
      if (value_of(id) != majority)
        rep.offenders.push_back({id, field, value_of(id)});
  }
  rep.homogeneous = rep.offenders.empty();
  return rep;
}

}  // namespace gridpipe
