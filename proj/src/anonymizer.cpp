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

#include "privgemo/anonymizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <numeric>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "privgemo/errors.hpp"
#include "privgemo/gateway.hpp"

namespace privgemo::anon {

const char* to_string(RelationMode m) { return m == RelationMode::kUtility ? "utility" : "privacy"; }

const char* to_string(DateGranularity g) {
  switch (g) {
    case DateGranularity::kYear: return "year";
    case DateGranularity::kMonth: return "month";
    case DateGranularity::kFull: return "full";
  }
  return "year";
}

RelationMode relation_mode_from_string(std::string_view s) {
  if (s == "utility") return RelationMode::kUtility;
  if (s == "privacy") return RelationMode::kPrivacy;
  throw InvalidArgument("relation_mode must be 'utility' or 'privacy', got '" + std::string(s) + "'");
}

DateGranularity date_granularity_from_string(std::string_view s) {
  if (s == "year") return DateGranularity::kYear;
  if (s == "month") return DateGranularity::kMonth;
  if (s == "full") return DateGranularity::kFull;
  throw InvalidArgument("date_granularity must be year, month or full");
}

void PrivacyPolicy::validate() const {
  if (!(anonymization_ratio >= 0.0 && anonymization_ratio <= 1.0)) {
    throw InvalidArgument("privacy.ratio must lie in [0, 1]");
  }
  if (cluster_min_size < 2) throw InvalidArgument("privacy.cluster_min_size must be at least 2");
  if (!(number_bucket_width > 0.0)) throw InvalidArgument("privacy.number_bucket_width must be positive");
  if (node_budget < 1) throw InvalidArgument("privacy.node_budget must be at least 1");
}

std::string PrivacyPolicy::fingerprint() const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s|%.2f", to_string(relation_mode), anonymization_ratio);
  return buf;
}

namespace {

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

}  // namespace

kg::Literal coarsen_literal(const kg::Literal& literal, const PrivacyPolicy& policy) {
  switch (literal.kind) {
    case kg::LiteralKind::kDate: {
      auto d = kg::parse_iso_date(literal.raw);
      if (!d) throw CoarsenError("unparseable date literal '" + literal.raw + "'");
      char buf[16];
      if (policy.date_granularity == DateGranularity::kYear || !d->month) {
        std::snprintf(buf, sizeof buf, "%04d", d->year);
      } else if (policy.date_granularity == DateGranularity::kMonth || !d->day) {
        std::snprintf(buf, sizeof buf, "%04d-%02d", d->year, *d->month);
      } else {
        std::snprintf(buf, sizeof buf, "%04d-%02d-%02d", d->year, *d->month, *d->day);
      }
      return {kg::LiteralKind::kDate, buf};
    }
    case kg::LiteralKind::kNumber: {
      auto v = kg::parse_decimal(literal.raw);
      if (!v) throw CoarsenError("unparseable number literal '" + literal.raw + "'");
      const double w = policy.number_bucket_width;
      if (!(w > 0.0)) throw CoarsenError("bucket width must be positive");
      const double k = std::floor(*v / w);
      return {kg::LiteralKind::kNumber, "[" + format_number(k * w) + "," + format_number((k + 1) * w) + ")"};
    }
    case kg::LiteralKind::kString:
      return literal;
  }
  return literal;
}

// ---------------------------------------------------------------------------
// SessionMapping

SessionMapping::SessionMapping() : secret_(crypto::random_bytes(32)) {}

SessionMapping::SessionMapping(crypto::Bytes secret) : secret_(std::move(secret)) {
  if (secret_.empty()) throw InvalidArgument("session secret must not be empty");
}

void SessionMapping::require_open() const {
  if (sealed_) throw InvalidArgument("session mapping is sealed; tokens cannot be minted");
}

const std::string& SessionMapping::mint(std::string_view prefix, std::string_view key, TokenTarget target) {
  require_open();
  const auto mac = crypto::hmac_sha256(secret_.view(), key);
  const std::string base = std::string(prefix) + crypto::to_hex(std::span(mac.data(), 4));
  std::string token = base;
  for (int suffix = 2; inverse_.count(token); ++suffix) {
    token = base + "_" + std::to_string(suffix);
  }
  auto [it, inserted] = inverse_.emplace(token, std::move(target));
  return it->first;
}

const std::string& SessionMapping::mint_entity(kg::NodeId id, std::string_view label) {
  if (auto it = entity_forward_.find(id); it != entity_forward_.end()) return it->second;
  const auto& token = mint("ent_", std::string("entity\x1f") + std::string(label),
                           TokenTarget{TokenKind::kEntity, {id}, {std::string(label)}});
  return entity_forward_.emplace(id, token).first->second;
}

const std::string& SessionMapping::mint_literal(kg::NodeId id, kg::LiteralKind kind, std::string_view raw) {
  if (auto it = entity_forward_.find(id); it != entity_forward_.end()) return it->second;
  const auto& token =
      mint("ent_", std::string("literal\x1f") + kg::to_string(kind) + "\x1f" + std::string(raw),
           TokenTarget{TokenKind::kLiteral, {id}, {std::string(raw)}});
  return entity_forward_.emplace(id, token).first->second;
}

const std::string& SessionMapping::mint_relation(kg::RelationId id, std::string_view label) {
  if (auto it = relation_forward_.find(id); it != relation_forward_.end()) return it->second;
  const auto& token = mint("rel_", std::string("relation\x1f") + std::string(label),
                           TokenTarget{TokenKind::kRelation, {id}, {std::string(label)}});
  return relation_forward_.emplace(id, token).first->second;
}

const std::string& SessionMapping::mint_group(const std::vector<kg::NodeId>& members,
                                              const std::vector<std::string>& labels) {
  std::vector<std::string> keys = labels;
  std::sort(keys.begin(), keys.end());
  std::string key = "group";
  for (const auto& k : keys) key += "\x1f" + k;
  return mint("ent_", key, TokenTarget{TokenKind::kGroup, {members.begin(), members.end()}, labels});
}

const std::string& SessionMapping::keep_plain(kg::NodeId id, std::string_view label) {
  require_open();
  if (auto it = entity_forward_.find(id); it != entity_forward_.end()) return it->second;
  std::string token(label);
  for (int suffix = 2; inverse_.count(token); ++suffix) token = std::string(label) + "_" + std::to_string(suffix);
  inverse_.emplace(token, TokenTarget{TokenKind::kEntity, {id}, {std::string(label)}});
  plain_[id] = true;
  return entity_forward_.emplace(id, token).first->second;
}

const std::string& SessionMapping::keep_plain_relation(kg::RelationId id, std::string_view label) {
  require_open();
  if (auto it = relation_forward_.find(id); it != relation_forward_.end()) return it->second;
  std::string token(label);
  for (int suffix = 2; inverse_.count(token); ++suffix) token = std::string(label) + "_" + std::to_string(suffix);
  inverse_.emplace(token, TokenTarget{TokenKind::kRelation, {id}, {std::string(label)}});
  plain_relations_.insert(id);
  return relation_forward_.emplace(id, token).first->second;
}

std::optional<std::string> SessionMapping::entity_token(kg::NodeId id) const {
  if (auto it = entity_forward_.find(id); it != entity_forward_.end()) return it->second;
  return std::nullopt;
}

std::optional<std::string> SessionMapping::relation_token(kg::RelationId id) const {
  if (auto it = relation_forward_.find(id); it != relation_forward_.end()) return it->second;
  return std::nullopt;
}

bool SessionMapping::is_plain(kg::NodeId id) const { return plain_.count(id) > 0; }

bool SessionMapping::is_plain_relation(kg::RelationId id) const { return plain_relations_.count(id) > 0; }

const TokenTarget* SessionMapping::resolve(std::string_view token) const {
  auto it = inverse_.find(std::string(token));
  return it == inverse_.end() ? nullptr : &it->second;
}

std::uint64_t SessionMapping::derive_seed(std::string_view purpose) const {
  require_open();
  const auto mac = crypto::hmac_sha256(secret_.view(), purpose);
  std::uint64_t seed = 0;
  for (int i = 0; i < 8; ++i) seed = (seed << 8) | mac[i];
  return seed;
}

void SessionMapping::seal() noexcept {
  secret_.clear();
  sealed_ = true;
}

// ---------------------------------------------------------------------------
// build_mapping

SessionMapping build_mapping(const grounding::RawSubgraph& sub, const PrivacyPolicy& policy) {
  return build_mapping(sub, policy, SessionMapping());
}

SessionMapping build_mapping(const grounding::RawSubgraph& sub, const PrivacyPolicy& policy,
                             SessionMapping mapping) {
  policy.validate();
  if (sub.members.empty() || sub.parent == nullptr) throw InvalidArgument("subgraph is empty");
  const kg::KnowledgeGraph& g = *sub.parent;
  const double ratio = policy.anonymization_ratio;

  std::set<kg::RelationId> relations;
  for (kg::TripleId t : sub.triples) relations.insert(g.triple(t).relation);

  if (ratio == 0.0) {
    for (kg::NodeId id : sub.members) mapping.keep_plain(id, g.node(id).label);
    for (kg::RelationId r : relations) mapping.keep_plain_relation(r, g.relation(r).label);
    return mapping;
  }

  std::vector<kg::NodeId> entities, candidates;
  for (kg::NodeId id : sub.members) {
    if (g.node(id).is_literal()) continue;
    entities.push_back(id);
    if (std::find(sub.anchors.begin(), sub.anchors.end(), id) == sub.anchors.end()) {
      candidates.push_back(id);
    }
  }

  std::set<kg::NodeId> plain;
  if (ratio < 1.0 && !candidates.empty()) {
    const auto k = std::min<std::size_t>(
        static_cast<std::size_t>(std::floor((1.0 - ratio) * static_cast<double>(entities.size()))),
        candidates.size());
    std::mt19937_64 rng(mapping.derive_seed("sample"));
    // Partial Fisher-Yates with an explicit draw so the sample does not depend
    // on the standard library's shuffle.
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng() % (candidates.size() - i));
      std::swap(candidates[i], candidates[j]);
      plain.insert(candidates[i]);
    }
    // A plain label must not reveal a pseudonymized one inside it.
    bool changed = true;
    while (changed) {
      changed = false;
      for (auto it = plain.begin(); it != plain.end();) {
        const std::string& label = g.node(*it).label;
        bool leaks = false;
        for (kg::NodeId other : entities) {
          if (plain.count(other)) continue;
          const std::string& hidden = g.node(other).label;
          if (hidden.size() >= 4 && gateway::contains_word(label, hidden)) {
            leaks = true;
            break;
          }
        }
        if (leaks) {
          it = plain.erase(it);
          changed = true;
        } else {
          ++it;
        }
      }
    }
  }

  for (kg::NodeId id : sub.members) {
    const auto& n = g.node(id);
    if (n.is_literal()) {
      mapping.mint_literal(id, n.literal_kind, n.label);
    } else if (plain.count(id)) {
      mapping.keep_plain(id, n.label);
    } else {
      mapping.mint_entity(id, n.label);
    }
  }
  for (kg::RelationId r : relations) mapping.mint_relation(r, g.relation(r).label);
  return mapping;
}

// ---------------------------------------------------------------------------
// AnonymizedView

void AnonymizedView::reindex() {
  out_.assign(nodes.size(), {});
  in_.assign(nodes.size(), {});
  by_token_.clear();
  by_display_.clear();
  by_raw_.clear();
  for (ViewIndex v = 0; v < nodes.size(); ++v) {
    by_token_.emplace(nodes[v].token, v);
    by_display_.emplace(nodes[v].display, v);
    for (kg::NodeId raw : nodes[v].members) by_raw_[raw] = v;
  }
  for (std::uint32_t e = 0; e < edges.size(); ++e) {
    out_[edges[e].head].push_back(e);
    in_[edges[e].tail].push_back(e);
  }
  anchors.clear();
  for (kg::NodeId raw : anchor_raw) {
    if (auto v = node_of_raw(raw)) anchors.push_back(*v);
  }
}

std::optional<ViewIndex> AnonymizedView::find_token(std::string_view token) const {
  if (auto it = by_token_.find(std::string(token)); it != by_token_.end()) return it->second;
  return std::nullopt;
}

std::optional<ViewIndex> AnonymizedView::find_display(std::string_view display) const {
  if (auto it = by_display_.find(std::string(display)); it != by_display_.end()) return it->second;
  return std::nullopt;
}

std::optional<ViewIndex> AnonymizedView::node_of_raw(kg::NodeId raw) const {
  if (auto it = by_raw_.find(raw); it != by_raw_.end()) return it->second;
  return std::nullopt;
}

std::vector<PathStep> AnonymizedView::steps_from(ViewIndex v) const {
  struct Keyed {
    const std::string* rel;
    ViewIndex other;
    bool forward;
    std::uint32_t edge;
  };
  std::vector<Keyed> keyed;
  for (std::uint32_t e : out_[v]) keyed.push_back({&edges[e].relation, edges[e].tail, true, e});
  for (std::uint32_t e : in_[v]) {
    if (edges[e].head == edges[e].tail) continue;
    keyed.push_back({&edges[e].relation, edges[e].head, false, e});
  }
  std::sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
    if (*a.rel != *b.rel) return *a.rel < *b.rel;
    if (a.other != b.other) return a.other < b.other;
    if (a.forward != b.forward) return a.forward;
    return a.edge < b.edge;
  });
  std::vector<PathStep> out;
  out.reserve(keyed.size());
  for (const auto& k : keyed) out.push_back({k.edge, k.forward});
  return out;
}

ViewIndex AnonymizedView::step_target(ViewIndex from, const PathStep& step) const {
  const auto& e = edges[step.edge];
  (void)from;
  return step.forward ? e.tail : e.head;
}

double AnonymizedView::reduction_ratio() const noexcept {
  if (raw_entity_count == 0) return 0.0;
  const double r = 1.0 - static_cast<double>(nodes.size()) / static_cast<double>(raw_entity_count);
  return std::clamp(r, 0.0, 1.0);
}

std::string AnonymizedView::serialize() const {
  std::ostringstream os;
  os << "# sketch entities=" << sketch.entity_count << " triples=" << sketch.triple_count << '\n';
  for (const auto& a : sketch.anchors) {
    os << "# anchor " << a.token << " degree=" << a.degree_bucket << " radius=" << a.radius_reached;
    if (!a.type_histogram.empty()) {
      os << " types=";
      bool first = true;
      for (const auto& [tag, n] : a.type_histogram) {
        os << (first ? "" : ",") << tag << ':' << n;
        first = false;
      }
    }
    os << '\n';
  }
  for (const auto& e : edges) {
    os << nodes[e.head].display << '\t' << e.relation << '\t' << nodes[e.tail].display << '\n';
  }
  return os.str();
}

std::vector<RawPath> AnonymizedView::expand(ViewIndex start, const std::vector<PathStep>& steps,
                                            const kg::KnowledgeGraph& g, std::size_t cap) const {
  std::vector<RawPath> out;
  if (steps.empty()) return out;
  RawPath current;
  // Depth-first over the raw triples behind each step; consecutive triples
  // must meet at the same raw node.
  auto dfs = [&](auto&& self, std::size_t i, std::optional<kg::NodeId> at) -> void {
    if (out.size() >= cap) return;
    if (i == steps.size()) {
      out.push_back(current);
      return;
    }
    const auto& edge = edges[steps[i].edge];
    for (kg::TripleId t : edge.raw) {
      const auto& tr = g.triple(t);
      const kg::NodeId from = steps[i].forward ? tr.head : tr.tail;
      const kg::NodeId to = steps[i].forward ? tr.tail : tr.head;
      if (at && *at != from) continue;
      if (!at) current.nodes.assign(1, from);
      current.triples.push_back(t);
      current.nodes.push_back(to);
      self(self, i + 1, to);
      current.triples.pop_back();
      current.nodes.pop_back();
      if (out.size() >= cap) return;
    }
  };
  (void)start;
  dfs(dfs, 0, std::nullopt);
  return out;
}

// ---------------------------------------------------------------------------
// build_view

namespace {

std::string relation_display(const kg::KnowledgeGraph& g, kg::RelationId r, const SessionMapping& m,
                             const PrivacyPolicy& policy) {
  const auto& rel = g.relation(r);
  if (policy.relation_mode == RelationMode::kUtility || m.is_plain_relation(r)) return rel.label;
  if (rel.cluster_label) return *rel.cluster_label;
  auto tok = m.relation_token(r);
  return tok ? *tok : rel.label;
}

// Rebuilds the edge list after nodes were renumbered; parallel edges with
// the same displayed relation collapse into one.
std::vector<ViewEdge> remap_edges(const std::vector<ViewEdge>& edges, const std::vector<std::optional<ViewIndex>>& to_new) {
  std::map<std::tuple<ViewIndex, std::string, ViewIndex>, std::size_t> seen;
  std::vector<ViewEdge> out;
  for (const auto& e : edges) {
    auto h = to_new[e.head];
    auto t = to_new[e.tail];
    if (!h || !t) continue;
    auto key = std::make_tuple(*h, e.relation, *t);
    auto it = seen.find(key);
    if (it == seen.end()) {
      seen.emplace(key, out.size());
      out.push_back(ViewEdge{*h, *t, e.relation, e.raw});
    } else {
      auto& raw = out[it->second].raw;
      raw.insert(raw.end(), e.raw.begin(), e.raw.end());
    }
  }
  for (auto& e : out) {
    std::sort(e.raw.begin(), e.raw.end());
    e.raw.erase(std::unique(e.raw.begin(), e.raw.end()), e.raw.end());
  }
  std::sort(out.begin(), out.end(), [](const ViewEdge& a, const ViewEdge& b) {
    return std::tie(a.head, a.relation, a.tail) < std::tie(b.head, b.relation, b.tail);
  });
  return out;
}

}  // namespace

AnonymizedView build_view(const grounding::RawSubgraph& sub, const SessionMapping& mapping,
                          const PrivacyPolicy& policy) {
  const kg::KnowledgeGraph& g = *sub.parent;
  AnonymizedView view;
  view.anchor_raw = sub.anchors;
  view.raw_entity_count = sub.members.size();
  view.raw_triple_count = sub.triples.size();
  std::unordered_map<kg::NodeId, ViewIndex> index;
  for (kg::NodeId id : sub.members) {
    const auto& n = g.node(id);
    auto token = mapping.entity_token(id);
    if (!token) throw InvalidArgument("mapping has no token for '" + n.label + "'");
    ViewNode v;
    v.token = *token;
    v.display = *token;
    v.members = {id};
    v.anchor = std::find(sub.anchors.begin(), sub.anchors.end(), id) != sub.anchors.end();
    if (n.is_literal()) {
      v.literal = true;
      v.literal_kind = n.literal_kind;
      if (mapping.is_plain(id)) {
        v.display = n.label;
      } else if (n.literal_kind != kg::LiteralKind::kString) {
        v.display = coarsen_literal({n.literal_kind, n.label}, policy).raw;
      }
    } else if (policy.expose_type_tags) {
      v.type_tags = n.type_tags;
    }
    index.emplace(id, static_cast<ViewIndex>(view.nodes.size()));
    view.nodes.push_back(std::move(v));
  }
  std::vector<ViewEdge> edges;
  for (kg::TripleId t : sub.triples) {
    const auto& tr = g.triple(t);
    edges.push_back(ViewEdge{index.at(tr.head), index.at(tr.tail),
                             relation_display(g, tr.relation, mapping, policy), {t}});
  }
  std::vector<std::optional<ViewIndex>> identity(view.nodes.size());
  for (ViewIndex i = 0; i < identity.size(); ++i) identity[i] = i;
  view.edges = remap_edges(edges, identity);
  view.reindex();
  return view;
}

// ---------------------------------------------------------------------------
// sanitize_structure

namespace {

std::string cluster_key(const AnonymizedView& view, ViewIndex v) {
  const auto& n = view.nodes[v];
  std::string key = n.literal ? std::string("L:") + kg::to_string(*n.literal_kind) : std::string("E");
  key += "|";
  for (const auto& t : n.type_tags) key += t + ",";
  std::vector<std::string> rels;
  for (auto e : view.out_edges(v)) rels.push_back("out:" + view.edges[e].relation);
  for (auto e : view.in_edges(v)) rels.push_back("in:" + view.edges[e].relation);
  std::sort(rels.begin(), rels.end());
  key += "|";
  for (const auto& r : rels) key += r + ",";
  return key;
}

// Undirected distinct-neighbour sets, ignoring self-loops.
std::vector<std::set<ViewIndex>> neighbour_sets(const AnonymizedView& view, const std::vector<bool>& alive) {
  std::vector<std::set<ViewIndex>> nb(view.nodes.size());
  for (const auto& e : view.edges) {
    if (e.head == e.tail || !alive[e.head] || !alive[e.tail]) continue;
    nb[e.head].insert(e.tail);
    nb[e.tail].insert(e.head);
  }
  return nb;
}

std::vector<std::size_t> component_ids(const std::vector<std::set<ViewIndex>>& nb, const std::vector<bool>& alive) {
  std::vector<std::size_t> comp(nb.size(), SIZE_MAX);
  std::size_t next = 0;
  for (ViewIndex s = 0; s < nb.size(); ++s) {
    if (!alive[s] || comp[s] != SIZE_MAX) continue;
    std::deque<ViewIndex> q{s};
    comp[s] = next;
    while (!q.empty()) {
      auto u = q.front();
      q.pop_front();
      for (auto v : nb[u]) {
        if (alive[v] && comp[v] == SIZE_MAX) {
          comp[v] = next;
          q.push_back(v);
        }
      }
    }
    ++next;
  }
  return comp;
}

std::vector<std::size_t> anchor_distance(const AnonymizedView& view, const std::vector<std::set<ViewIndex>>& nb,
                                         const std::vector<bool>& alive) {
  std::vector<std::size_t> dist(view.nodes.size(), SIZE_MAX);
  std::deque<ViewIndex> q;
  for (auto a : view.anchors) {
    if (dist[a] == SIZE_MAX) {
      dist[a] = 0;
      q.push_back(a);
    }
  }
  while (!q.empty()) {
    auto u = q.front();
    q.pop_front();
    for (auto v : nb[u]) {
      if (alive[v] && dist[v] == SIZE_MAX) {
        dist[v] = dist[u] + 1;
        q.push_back(v);
      }
    }
  }
  return dist;
}

AnonymizedView compact(const AnonymizedView& view, const std::vector<bool>& alive) {
  AnonymizedView out;
  out.anchor_raw = view.anchor_raw;
  out.raw_entity_count = view.raw_entity_count;
  out.raw_triple_count = view.raw_triple_count;
  std::vector<std::optional<ViewIndex>> to_new(view.nodes.size());
  for (ViewIndex v = 0; v < view.nodes.size(); ++v) {
    if (!alive[v]) continue;
    to_new[v] = static_cast<ViewIndex>(out.nodes.size());
    out.nodes.push_back(view.nodes[v]);
  }
  out.edges = remap_edges(view.edges, to_new);
  out.reindex();
  return out;
}

std::string degree_bucket(std::size_t d) {
  if (d <= 1) return std::to_string(d);
  if (d <= 3) return "2-3";
  if (d <= 7) return "4-7";
  return "8+";
}

}  // namespace

StructureSketch build_sketch(const AnonymizedView& view) {
  StructureSketch s;
  s.entity_count = view.nodes.size();
  s.triple_count = view.edges.size();
  std::vector<bool> alive(view.nodes.size(), true);
  const auto nb = neighbour_sets(view, alive);
  for (auto a : view.anchors) {
    AnchorSketch as;
    as.token = view.nodes[a].display;
    as.degree_bucket = degree_bucket(view.out_edges(a).size() + view.in_edges(a).size());
    std::vector<std::size_t> dist(view.nodes.size(), SIZE_MAX);
    std::deque<ViewIndex> q{a};
    dist[a] = 0;
    while (!q.empty()) {
      auto u = q.front();
      q.pop_front();
      as.radius_reached = std::max(as.radius_reached, dist[u]);
      if (u != a) {
        for (const auto& tag : view.nodes[u].type_tags) ++as.type_histogram[tag];
      }
      for (auto v : nb[u]) {
        if (dist[v] == SIZE_MAX) {
          dist[v] = dist[u] + 1;
          q.push_back(v);
        }
      }
    }
    s.anchors.push_back(std::move(as));
  }
  return s;
}

AnonymizedView sanitize_structure(AnonymizedView view, SessionMapping& mapping, const PrivacyPolicy& policy) {
  policy.validate();
  view.reindex();
  if (view.anchors.size() != view.anchor_raw.size()) {
    throw InvalidArgument("an anchor is missing from the view");
  }
  if (policy.node_budget < view.anchors.size()) {
    throw BudgetInfeasible("node budget " + std::to_string(policy.node_budget) + " is below the " +
                           std::to_string(view.anchors.size()) + " anchors");
  }
  // (1) clustering: structurally identical non-anchor nodes merge.
  std::map<std::string, std::vector<ViewIndex>> groups;
  // The plaintext baseline keeps every node distinct.
  const bool cluster = policy.anonymization_ratio > 0.0;
  for (ViewIndex v = 0; cluster && v < view.nodes.size(); ++v) {
    if (!view.nodes[v].anchor) groups[cluster_key(view, v)].push_back(v);
  }
  std::vector<ViewIndex> owner(view.nodes.size());
  std::iota(owner.begin(), owner.end(), 0);
  for (const auto& [key, members] : groups) {
    if (members.size() < policy.cluster_min_size) continue;
    for (auto m : members) owner[m] = members.front();
  }
  std::vector<ViewNode> merged;
  std::vector<std::optional<ViewIndex>> to_new(view.nodes.size());
  {
    std::map<ViewIndex, std::vector<ViewIndex>> by_owner;
    for (ViewIndex v = 0; v < view.nodes.size(); ++v) by_owner[owner[v]].push_back(v);
    // Owners are the lowest index of their group, and indices follow raw id
    // order, so iterating by owner keeps nodes ordered by minimum raw id.
    for (const auto& [own, members] : by_owner) {
      const auto idx = static_cast<ViewIndex>(merged.size());
      for (auto m : members) to_new[m] = idx;
      if (members.size() == 1) {
        merged.push_back(view.nodes[own]);
        continue;
      }
      ViewNode s = view.nodes[own];
      s.members.clear();
      std::vector<std::string> labels;
      for (auto m : members) {
        s.members.insert(s.members.end(), view.nodes[m].members.begin(), view.nodes[m].members.end());
      }
      std::sort(s.members.begin(), s.members.end());
      for (auto m : members) {
        const auto* target = mapping.resolve(view.nodes[m].token);
        labels.push_back(target && !target->labels.empty() ? target->labels.front() : view.nodes[m].token);
      }
      s.token = mapping.mint_group(s.members, labels);
      s.display = s.token;
      merged.push_back(std::move(s));
    }
  }
  AnonymizedView clustered;
  clustered.anchor_raw = view.anchor_raw;
  clustered.raw_entity_count = view.raw_entity_count;
  clustered.raw_triple_count = view.raw_triple_count;
  clustered.nodes = std::move(merged);
  clustered.edges = remap_edges(view.edges, to_new);
  clustered.reindex();

  // (2) pruning under the node budget.
  std::vector<bool> alive(clustered.nodes.size(), true);
  std::size_t count = clustered.nodes.size();
  while (count > policy.node_budget) {
    const auto nb = neighbour_sets(clustered, alive);
    const auto dist = anchor_distance(clustered, nb, alive);
    std::optional<ViewIndex> victim;
    auto farther = [&](ViewIndex a, ViewIndex b) {
      return dist[a] != dist[b] ? dist[a] > dist[b] : a > b;
    };
    for (ViewIndex v = 0; v < clustered.nodes.size(); ++v) {
      if (!alive[v] || clustered.nodes[v].anchor || nb[v].size() > 1) continue;
      if (!victim || farther(v, *victim)) victim = v;
    }
    if (!victim) {
      const auto before = component_ids(nb, alive);
      std::vector<ViewIndex> order;
      for (ViewIndex v = 0; v < clustered.nodes.size(); ++v) {
        if (alive[v] && !clustered.nodes[v].anchor) order.push_back(v);
      }
      std::sort(order.begin(), order.end(), farther);
      for (auto v : order) {
        auto trial = alive;
        trial[v] = false;
        const auto after = component_ids(neighbour_sets(clustered, trial), trial);
        bool keeps = true;
        for (std::size_t i = 0; i < clustered.anchors.size() && keeps; ++i) {
          for (std::size_t j = i + 1; j < clustered.anchors.size(); ++j) {
            const auto a = clustered.anchors[i], b = clustered.anchors[j];
            if (before[a] == before[b] && after[a] != after[b]) {
              keeps = false;
              break;
            }
          }
        }
        if (keeps) {
          victim = v;
          break;
        }
      }
    }
    if (!victim) {
      throw BudgetInfeasible("node budget " + std::to_string(policy.node_budget) +
                             " cannot keep the anchors connected");
    }
    alive[*victim] = false;
    --count;
  }
  AnonymizedView out = compact(clustered, alive);

  // (3) sketch last.
  out.sketch = build_sketch(out);
  return out;
}

// ---------------------------------------------------------------------------
// Dictionary, de-anonymization, session

std::vector<std::string> boundary_dictionary(const grounding::RawSubgraph& sub, const SessionMapping& mapping,
                                             const PrivacyPolicy& policy) {
  std::vector<std::string> out;
  if (policy.anonymization_ratio == 0.0) return out;
  const kg::KnowledgeGraph& g = *sub.parent;
  for (kg::NodeId id : sub.members) {
    const auto& n = g.node(id);
    if (mapping.is_plain(id)) continue;
    if (n.is_literal() && n.literal_kind != kg::LiteralKind::kString) {
      if (coarsen_literal({n.literal_kind, n.label}, policy).raw == n.label) continue;
    }
    out.push_back(n.label);
  }
  if (policy.relation_mode == RelationMode::kPrivacy) {
    std::set<kg::RelationId> rels;
    for (kg::TripleId t : sub.triples) rels.insert(g.triple(t).relation);
    for (auto r : rels) out.push_back(g.relation(r).label);
  } else {
    spdlog::warn("utility relation mode: raw relation labels are shown to the remote model");
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::string deanonymize_text(std::string_view text, const SessionMapping& mapping) {
  static const std::regex kToken(R"(\b(ent|rel)_[0-9a-f]{8}(_[0-9]+)?\b)");
  std::string input(text);
  std::string out;
  auto begin = std::sregex_iterator(input.begin(), input.end(), kToken);
  std::size_t last = 0;
  for (auto it = begin; it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    out.append(input, last, static_cast<std::size_t>(m.position()) - last);
    const TokenTarget* target = mapping.resolve(m.str());
    if (!target) throw UnknownToken(m.str());
    if (target->kind == TokenKind::kGroup) {
      out += "{";
      for (std::size_t i = 0; i < target->labels.size(); ++i) {
        out += (i ? ", " : "") + target->labels[i];
      }
      out += "}";
    } else {
      out += target->labels.front();
    }
    last = static_cast<std::size_t>(m.position() + m.length());
  }
  out.append(input, last, std::string::npos);
  return out;
}

std::string Session::anon_text(std::string_view raw_text, const kg::KnowledgeGraph& g) const {
  if (policy.anonymization_ratio == 0.0) return std::string(raw_text);
  // (lowered label, replacement), longest label first.
  std::vector<std::pair<std::string, std::string>> table;
  for (const auto& [token, target] : mapping.inverse()) {
    if (target.kind == TokenKind::kGroup) continue;
    if (target.kind == TokenKind::kRelation) {
      if (policy.relation_mode == RelationMode::kUtility) continue;
      const auto& rel = g.relation(target.ids.front());
      table.emplace_back(gateway::to_lower(target.labels.front()),
                         rel.cluster_label ? *rel.cluster_label : token);
      continue;
    }
    const kg::NodeId id = target.ids.front();
    if (mapping.is_plain(id)) continue;
    std::string replacement = token;
    if (auto v = view.node_of_raw(id)) replacement = view.nodes[*v].display;
    table.emplace_back(gateway::to_lower(target.labels.front()), replacement);
  }
  std::sort(table.begin(), table.end(), [](const auto& a, const auto& b) {
    return a.first.size() != b.first.size() ? a.first.size() > b.first.size() : a.first < b.first;
  });
  const std::string lowered = gateway::to_lower(raw_text);
  std::string out;
  std::size_t i = 0;
  while (i < raw_text.size()) {
    bool replaced = false;
    const bool at_boundary = i == 0 || !gateway::is_word_char(lowered[i - 1]);
    for (const auto& [label, repl] : table) {
      if (label.empty() || lowered.compare(i, label.size(), label) != 0) continue;
      if (gateway::is_word_char(label.front()) && !at_boundary) continue;
      const std::size_t end = i + label.size();
      if (gateway::is_word_char(label.back()) && end < lowered.size() && gateway::is_word_char(lowered[end])) {
        continue;
      }
      out += repl;
      i = end;
      replaced = true;
      break;
    }
    if (!replaced) out.push_back(raw_text[i++]);
  }
  return out;
}

Session anonymize(const grounding::RawSubgraph& sub, const PrivacyPolicy& policy) {
  Session s;
  s.policy = policy;
  s.mapping = build_mapping(sub, policy);
  s.view = build_view(sub, s.mapping, policy);
  s.view = sanitize_structure(std::move(s.view), s.mapping, policy);
  s.dictionary = boundary_dictionary(sub, s.mapping, policy);
  s.mapping.seal();
  return s;
}

}  // namespace privgemo::anon
