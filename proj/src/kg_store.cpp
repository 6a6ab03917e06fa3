// Copyright 2026 The privgemo Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "privgemo/kg_store.hpp"

#include <algorithm>
#include <charconv>
#include <deque>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "privgemo/errors.hpp"

namespace privgemo::kg {

const char* to_string(LiteralKind kind) {
  switch (kind) {
    case LiteralKind::kDate: return "date";
    case LiteralKind::kNumber: return "number";
    case LiteralKind::kString: return "string";
  }
  return "string";
}

std::optional<LiteralKind> literal_kind_from_string(std::string_view s) {
  if (s == "date") return LiteralKind::kDate;
  if (s == "number") return LiteralKind::kNumber;
  if (s == "string") return LiteralKind::kString;
  return std::nullopt;
}

namespace {

std::optional<int> parse_digits(std::string_view s) {
  if (s.empty()) return std::nullopt;
  int value = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  for (char c : s) {
    if (c < '0' || c > '9') return std::nullopt;
  }
  return value;
}

}  // namespace

std::optional<DateParts> parse_iso_date(std::string_view s) {
  if (auto t = s.find('T'); t != std::string_view::npos) s = s.substr(0, t);
  if (s.size() != 4 && s.size() != 7 && s.size() != 10) return std::nullopt;
  DateParts parts;
  auto year = parse_digits(s.substr(0, 4));
  if (!year) return std::nullopt;
  parts.year = *year;
  if (s.size() >= 7) {
    if (s[4] != '-') return std::nullopt;
    auto month = parse_digits(s.substr(5, 2));
    if (!month || *month < 1 || *month > 12) return std::nullopt;
    parts.month = month;
  }
  if (s.size() == 10) {
    if (s[7] != '-') return std::nullopt;
    auto day = parse_digits(s.substr(8, 2));
    if (!day || *day < 1 || *day > 31) return std::nullopt;
    parts.day = day;
  }
  return parts;
}

std::optional<double> parse_decimal(std::string_view s) {
  if (s.empty()) return std::nullopt;
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value,
                                   std::chars_format::fixed);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return value;
}

bool well_formed(const Literal& literal) {
  switch (literal.kind) {
    case LiteralKind::kDate: return parse_iso_date(literal.raw).has_value();
    case LiteralKind::kNumber: return parse_decimal(literal.raw).has_value();
    case LiteralKind::kString: return true;
  }
  return false;
}

std::optional<std::string> relation_cluster(std::string_view relation_label) {
  auto dot = relation_label.rfind('.');
  if (dot == std::string_view::npos || dot == 0) return std::nullopt;
  return std::string(relation_label.substr(0, dot));
}

// ---------------------------------------------------------------------------
// Builder

struct KnowledgeGraph::Builder::Impl {
  std::vector<Node> nodes;
  std::vector<RelationRef> relations;
  std::vector<Triple> triples;
  std::unordered_map<std::string, NodeId> entity_ids;
  std::map<std::pair<LiteralKind, std::string>, NodeId> literal_ids;
  std::unordered_map<std::string, RelationId> relation_ids;
  std::set<std::tuple<NodeId, RelationId, NodeId>> seen;
  std::size_t literal_count = 0;
  std::size_t duplicates = 0;

  NodeId entity(std::string_view label) {
    if (label.empty()) throw InvalidArgument("empty entity label");
    std::string key(label);
    if (auto it = entity_ids.find(key); it != entity_ids.end()) return it->second;
    const auto id = static_cast<NodeId>(nodes.size());
    Node n;
    n.id = id;
    n.kind = NodeKind::kEntity;
    n.label = key;
    nodes.push_back(std::move(n));
    entity_ids.emplace(std::move(key), id);
    return id;
  }

  NodeId literal(const Literal& lit) {
    auto key = std::make_pair(lit.kind, lit.raw);
    if (auto it = literal_ids.find(key); it != literal_ids.end()) return it->second;
    const auto id = static_cast<NodeId>(nodes.size());
    Node n;
    n.id = id;
    n.kind = NodeKind::kLiteral;
    n.label = lit.raw;
    n.literal_kind = lit.kind;
    nodes.push_back(std::move(n));
    literal_ids.emplace(std::move(key), id);
    ++literal_count;
    return id;
  }

  RelationId relation(std::string_view label) {
    if (label.empty()) throw InvalidArgument("empty relation label");
    std::string key(label);
    if (auto it = relation_ids.find(key); it != relation_ids.end()) return it->second;
    const auto id = static_cast<RelationId>(relations.size());
    relations.push_back(RelationRef{id, key, relation_cluster(key)});
    relation_ids.emplace(std::move(key), id);
    return id;
  }

  bool insert(NodeId head, RelationId rel, NodeId tail) {
    if (!seen.emplace(head, rel, tail).second) {
      ++duplicates;
      return false;
    }
    triples.push_back(Triple{head, rel, tail});
    return true;
  }
};

KnowledgeGraph::Builder::Builder() : impl_(std::make_unique<Impl>()) {}
KnowledgeGraph::Builder::~Builder() = default;
KnowledgeGraph::Builder::Builder(Builder&&) noexcept = default;
KnowledgeGraph::Builder& KnowledgeGraph::Builder::operator=(Builder&&) noexcept = default;

bool KnowledgeGraph::Builder::add(std::string_view head, std::string_view relation,
                                  std::string_view tail) {
  const NodeId h = impl_->entity(head);
  const RelationId r = impl_->relation(relation);
  const NodeId t = impl_->entity(tail);
  return impl_->insert(h, r, t);
}

bool KnowledgeGraph::Builder::add_literal(std::string_view head, std::string_view relation,
                                          const Literal& tail) {
  if (!well_formed(tail)) {
    throw InvalidArgument(std::string("malformed ") + to_string(tail.kind) +
                          " literal: " + tail.raw);
  }
  const NodeId h = impl_->entity(head);
  const RelationId r = impl_->relation(relation);
  const NodeId t = impl_->literal(tail);
  return impl_->insert(h, r, t);
}

KnowledgeGraph KnowledgeGraph::Builder::build() && {
  KnowledgeGraph g;
  g.nodes_ = std::move(impl_->nodes);
  g.relations_ = std::move(impl_->relations);
  g.triples_ = std::move(impl_->triples);
  g.literal_count_ = impl_->literal_count;
  g.duplicate_warnings_ = impl_->duplicates;

  g.out_index_.assign(g.nodes_.size(), {});
  g.in_index_.assign(g.nodes_.size(), {});
  std::vector<std::set<std::string>> tags(g.nodes_.size());
  for (TripleId id = 0; id < g.triples_.size(); ++id) {
    const Triple& t = g.triples_[id];
    g.out_index_[t.head].push_back(id);
    g.in_index_[t.tail].push_back(id);
    if (const auto& cluster = g.relations_[t.relation].cluster_label) {
      tags[t.head].insert(*cluster);
    }
  }
  for (auto& bucket : g.out_index_) {
    std::sort(bucket.begin(), bucket.end(), [&](TripleId a, TripleId b) {
      const auto& x = g.triples_[a];
      const auto& y = g.triples_[b];
      return std::tie(x.relation, x.tail) < std::tie(y.relation, y.tail);
    });
  }
  for (auto& bucket : g.in_index_) {
    std::sort(bucket.begin(), bucket.end(), [&](TripleId a, TripleId b) {
      const auto& x = g.triples_[a];
      const auto& y = g.triples_[b];
      return std::tie(x.relation, x.head) < std::tie(y.relation, y.head);
    });
  }
  for (auto& n : g.nodes_) {
    if (n.is_literal()) continue;
    n.type_tags.assign(tags[n.id].begin(), tags[n.id].end());
    g.entity_by_label_.emplace(n.label, n.id);
  }
  for (const auto& r : g.relations_) g.relation_by_label_.emplace(r.label, r.id);
  return g;
}

// ---------------------------------------------------------------------------
// Loaders

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
    s.remove_prefix(1);
  }
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

// `"value"^^kind` or `"value"`; nullopt if the field is not a literal.
std::optional<Literal> parse_tsv_literal(std::string_view field, std::size_t line_no) {
  if (field.size() < 2 || field.front() != '"') return std::nullopt;
  auto close = field.rfind('"');
  if (close == 0) throw ParseError(line_no, "unterminated literal");
  Literal lit;
  lit.raw = std::string(field.substr(1, close - 1));
  auto rest = field.substr(close + 1);
  if (rest.empty()) {
    lit.kind = LiteralKind::kString;
  } else if (rest.starts_with("^^")) {
    auto kind = literal_kind_from_string(rest.substr(2));
    if (!kind) throw ParseError(line_no, "unknown literal kind '" + std::string(rest.substr(2)) + "'");
    lit.kind = *kind;
  } else {
    throw ParseError(line_no, "trailing characters after literal");
  }
  if (!well_formed(lit)) {
    throw ParseError(line_no, std::string("malformed ") + to_string(lit.kind) + " literal");
  }
  return lit;
}

void parse_tsv_line(KnowledgeGraph::Builder& b, std::string_view line, std::size_t line_no) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    auto tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab == std::string_view::npos ? tab : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  if (fields.size() != 3) {
    throw ParseError(line_no, "expected 3 tab-separated fields, got " +
                                  std::to_string(fields.size()));
  }
  auto head = trim(fields[0]);
  auto rel = trim(fields[1]);
  auto tail = trim(fields[2]);
  if (head.empty() || rel.empty() || tail.empty()) throw ParseError(line_no, "empty field");
  if (head.front() == '"') throw ParseError(line_no, "literal in head position");
  if (auto lit = parse_tsv_literal(tail, line_no)) {
    b.add_literal(head, rel, *lit);
  } else {
    b.add(head, rel, tail);
  }
}

// Reads one N-Triples term starting at `pos`; advances `pos` past it.
struct NtTerm {
  bool literal = false;
  std::string value;
  LiteralKind kind = LiteralKind::kString;
};

NtTerm read_nt_term(std::string_view line, std::size_t& pos, std::size_t line_no) {
  while (pos < line.size() && (line[pos] == ' ' || line[pos] == '\t')) ++pos;
  if (pos >= line.size()) throw ParseError(line_no, "missing term");
  NtTerm term;
  if (line[pos] == '<') {
    auto close = line.find('>', pos);
    if (close == std::string_view::npos) throw ParseError(line_no, "unterminated IRI");
    term.value = std::string(line.substr(pos + 1, close - pos - 1));
    pos = close + 1;
    if (term.value.empty()) throw ParseError(line_no, "empty IRI");
    return term;
  }
  if (line[pos] == '"') {
    std::size_t i = pos + 1;
    std::string value;
    for (; i < line.size() && line[i] != '"'; ++i) {
      if (line[i] == '\\' && i + 1 < line.size()) ++i;
      value.push_back(line[i]);
    }
    if (i >= line.size()) throw ParseError(line_no, "unterminated literal");
    pos = i + 1;
    term.literal = true;
    term.value = std::move(value);
    if (line.substr(pos).starts_with("^^<")) {
      auto close = line.find('>', pos);
      if (close == std::string_view::npos) throw ParseError(line_no, "unterminated datatype");
      std::string dt(line.substr(pos + 3, close - pos - 3));
      pos = close + 1;
      std::transform(dt.begin(), dt.end(), dt.begin(), ::tolower);
      if (dt.find("date") != std::string::npos || dt.find("gyear") != std::string::npos) {
        term.kind = LiteralKind::kDate;
      } else if (dt.find("integer") != std::string::npos ||
                 dt.find("decimal") != std::string::npos ||
                 dt.find("double") != std::string::npos ||
                 dt.find("float") != std::string::npos ||
                 dt.ends_with("#int") || dt.ends_with("#long")) {
        term.kind = LiteralKind::kNumber;
      }
    } else if (pos < line.size() && line[pos] == '@') {
      while (pos < line.size() && line[pos] != ' ' && line[pos] != '\t') ++pos;
    }
    return term;
  }
  throw ParseError(line_no, "unsupported N-Triples term");
}

void parse_nt_line(KnowledgeGraph::Builder& b, std::string_view line, std::size_t line_no) {
  std::size_t pos = 0;
  auto head = read_nt_term(line, pos, line_no);
  auto rel = read_nt_term(line, pos, line_no);
  auto tail = read_nt_term(line, pos, line_no);
  auto rest = trim(line.substr(pos));
  if (rest != ".") throw ParseError(line_no, "expected terminating '.'");
  if (head.literal || rel.literal) throw ParseError(line_no, "literal outside object position");
  if (tail.literal) {
    Literal lit{tail.kind, tail.value};
    if (!well_formed(lit)) {
      throw ParseError(line_no, std::string("malformed ") + to_string(lit.kind) + " literal");
    }
    b.add_literal(head.value, rel.value, lit);
  } else {
    b.add(head.value, rel.value, tail.value);
  }
}

}  // namespace

KnowledgeGraph KnowledgeGraph::parse(std::istream& in, GraphFormat format) {
  Builder builder;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view = line;
    if (!view.empty() && view.back() == '\r') view.remove_suffix(1);
    auto trimmed = trim(view);
    if (trimmed.empty() || trimmed.front() == '#') continue;
    try {
      if (format == GraphFormat::kTsv) {
        parse_tsv_line(builder, view, line_no);
      } else {
        parse_nt_line(builder, trimmed, line_no);
      }
    } catch (const InvalidArgument& e) {
      throw ParseError(line_no, e.what());
    }
  }
  return std::move(builder).build();
}

KnowledgeGraph KnowledgeGraph::load(const std::filesystem::path& path, GraphFormat format) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open graph file: " + path.string());
  return parse(in, format);
}

// ---------------------------------------------------------------------------
// Queries

const Node& KnowledgeGraph::node(NodeId id) const {
  if (id >= nodes_.size()) throw UnknownEntity("unknown node id " + std::to_string(id));
  return nodes_[id];
}

const RelationRef& KnowledgeGraph::relation(RelationId id) const {
  if (id >= relations_.size()) throw InvalidArgument("unknown relation id " + std::to_string(id));
  return relations_[id];
}

const Triple& KnowledgeGraph::triple(TripleId id) const {
  if (id >= triples_.size()) throw InvalidArgument("unknown triple id " + std::to_string(id));
  return triples_[id];
}

std::optional<NodeId> KnowledgeGraph::find_entity(std::string_view label) const {
  if (auto it = entity_by_label_.find(std::string(label)); it != entity_by_label_.end()) {
    return it->second;
  }
  return std::nullopt;
}

std::optional<RelationId> KnowledgeGraph::find_relation(std::string_view label) const {
  if (auto it = relation_by_label_.find(std::string(label)); it != relation_by_label_.end()) {
    return it->second;
  }
  return std::nullopt;
}

std::optional<TripleId> KnowledgeGraph::find_triple(NodeId head, RelationId relation,
                                                    NodeId tail) const {
  if (head >= nodes_.size()) return std::nullopt;
  const auto& bucket = out_index_[head];
  auto it = std::lower_bound(bucket.begin(), bucket.end(), std::make_pair(relation, tail),
                             [&](TripleId id, const std::pair<RelationId, NodeId>& key) {
                               const auto& t = triples_[id];
                               return std::tie(t.relation, t.tail) < std::tie(key.first, key.second);
                             });
  if (it != bucket.end() && triples_[*it].relation == relation && triples_[*it].tail == tail) {
    return *it;
  }
  return std::nullopt;
}

std::span<const TripleId> KnowledgeGraph::out_edges(NodeId id) const {
  if (id >= nodes_.size()) throw UnknownEntity("unknown node id " + std::to_string(id));
  return out_index_[id];
}

std::span<const TripleId> KnowledgeGraph::in_edges(NodeId id) const {
  if (id >= nodes_.size()) throw UnknownEntity("unknown node id " + std::to_string(id));
  return in_index_[id];
}

std::vector<TripleId> KnowledgeGraph::neighbors(NodeId id, Direction direction) const {
  if (id >= nodes_.size()) throw UnknownEntity("unknown node id " + std::to_string(id));
  const auto& out = out_index_[id];
  const auto& in = in_index_[id];
  switch (direction) {
    case Direction::kOut: return {out.begin(), out.end()};
    case Direction::kIn: return {in.begin(), in.end()};
    case Direction::kBoth: break;
  }
  struct Keyed {
    RelationId rel;
    NodeId other;
    int dir;
    TripleId id;
  };
  std::vector<Keyed> all;
  all.reserve(out.size() + in.size());
  for (TripleId t : out) all.push_back({triples_[t].relation, triples_[t].tail, 0, t});
  for (TripleId t : in) {
    // A self-loop is already listed once from the out bucket.
    if (triples_[t].head == triples_[t].tail) continue;
    all.push_back({triples_[t].relation, triples_[t].head, 1, t});
  }
  std::sort(all.begin(), all.end(), [](const Keyed& a, const Keyed& b) {
    return std::tie(a.rel, a.other, a.dir) < std::tie(b.rel, b.other, b.dir);
  });
  std::vector<TripleId> result;
  result.reserve(all.size());
  for (const auto& k : all) result.push_back(k.id);
  return result;
}

std::optional<std::size_t> KnowledgeGraph::hop_distance(NodeId a, NodeId b,
                                                        std::size_t cap) const {
  if (a >= nodes_.size()) throw UnknownEntity("unknown node id " + std::to_string(a));
  if (b >= nodes_.size()) throw UnknownEntity("unknown node id " + std::to_string(b));
  if (a == b) return 0;
  std::vector<std::size_t> dist(nodes_.size(), SIZE_MAX);
  std::deque<NodeId> queue{a};
  dist[a] = 0;
  while (!queue.empty()) {
    NodeId u = queue.front();
    queue.pop_front();
    if (dist[u] >= cap) continue;
    auto visit = [&](NodeId v) {
      if (dist[v] != SIZE_MAX) return false;
      dist[v] = dist[u] + 1;
      queue.push_back(v);
      return v == b;
    };
    for (TripleId t : out_index_[u]) {
      if (visit(triples_[t].tail)) return dist[b];
    }
    for (TripleId t : in_index_[u]) {
      if (visit(triples_[t].head)) return dist[b];
    }
  }
  return std::nullopt;
}

std::string KnowledgeGraph::describe(TripleId id) const {
  const Triple& t = triple(id);
  std::ostringstream os;
  os << '(' << nodes_[t.head].label << ", " << relations_[t.relation].label << ", "
     << nodes_[t.tail].label << ')';
  return os.str();
}

}  // namespace privgemo::kg
